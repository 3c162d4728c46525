// SPDX-License-Identifier: Apache-2.0
#include "core/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "core/common.hpp"
#include "core/rng.hpp"
#include "core/sha256.hpp"

namespace pqat {

using ordered_json = nlohmann::ordered_json;

int Vocab::require_id(const std::string& token) const {
  auto it = token_to_id.find(token);
  if (it == token_to_id.end()) throw DataError(cat("unknown token \"", token, "\""));
  return it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token.size()) {
    throw DataError(cat("token id ", id, " out of range [0,", id_to_token.size(), ")"));
  }
  return id_to_token[static_cast<std::size_t>(id)];
}

Vocab build_vocab(std::size_t n_keys, std::size_t n_values) {
  Vocab v;
  v.id_to_token = {"[CLS]", "[SEP]", "[PAD]"};
  char buf[32];
  for (std::size_t i = 0; i < n_keys; ++i) {
    std::snprintf(buf, sizeof(buf), "key%03zu", i);
    v.id_to_token.emplace_back(buf);
  }
  for (std::size_t i = 0; i < n_values; ++i) {
    std::snprintf(buf, sizeof(buf), "val%03zu", i);
    v.id_to_token.emplace_back(buf);
  }
  for (std::size_t i = 0; i < v.id_to_token.size(); ++i) {
    v.token_to_id[v.id_to_token[i]] = static_cast<int>(i);
  }
  return v;
}

GroupedInitSpec Dataset::key_groups() const {
  GroupedInitSpec spec;
  spec.first_id = key_first_id();
  spec.group_size = std::max<std::size_t>(1, meta.confusion_class_size);
  spec.n_groups = (meta.n_keys + spec.group_size - 1) / spec.group_size;
  return spec;
}

namespace {

DatasetMeta make_meta(const std::string& task, std::size_t n_examples, std::size_t n_pairs,
                      std::size_t n_options, std::size_t vocab_size, std::uint64_t seed,
                      std::size_t confusion_class_size) {
  if (n_pairs < 1) throw ConfigError("dataset: n_pairs must be >= 1");
  if (n_examples < 1) throw ConfigError("dataset: n_examples must be >= 1");
  if (confusion_class_size < 1) throw ConfigError("dataset: confusion class size must be >= 1");
  if (vocab_size <= 2 * n_pairs + 3) {
    throw ConfigError(cat("dataset: vocab_size ", vocab_size, " too small for n_pairs ", n_pairs,
                          " (need > ", 2 * n_pairs + 3, ")"));
  }
  DatasetMeta m;
  m.task = task;
  m.n_examples = n_examples;
  m.n_pairs = n_pairs;
  m.n_options = n_options;
  m.vocab_size = vocab_size;
  m.n_keys = (vocab_size - 3) / 2;
  m.n_values = vocab_size - 3 - m.n_keys;
  m.confusion_class_size = confusion_class_size;
  m.seed = seed;
  const std::size_t n_classes = (m.n_keys + confusion_class_size - 1) / confusion_class_size;
  if (n_classes < n_pairs) {
    throw ConfigError(cat("dataset: ", n_classes, " key groups cannot fill ", n_pairs,
                          " pairs; raise vocab_size or lower confusion_class_size"));
  }
  return m;
}

struct KvDraw {
  std::vector<int> passage;
  std::size_t q_pair = 0;
  int q_key = 0;
  int answer_value = 0;
};

// Passage keys come one per confusion group, so near-miss keys never occur
// together naturally; only distractor injection introduces them.
KvDraw draw_passage(RandomStream& rs, const Dataset& ds) {
  const auto& m = ds.meta;
  const std::size_t cs = std::max<std::size_t>(1, m.confusion_class_size);
  const std::size_t n_classes = (m.n_keys + cs - 1) / cs;
  std::vector<std::size_t> class_pool(n_classes);
  std::iota(class_pool.begin(), class_pool.end(), 0);
  rs.shuffle(class_pool);
  KvDraw out;
  out.passage.reserve(2 * m.n_pairs);
  for (std::size_t j = 0; j < m.n_pairs; ++j) {
    const std::size_t members =
        std::min(cs, m.n_keys - class_pool[j] * cs);  // last group may be partial
    const int key =
        ds.key_first_id() + static_cast<int>(class_pool[j] * cs + rs.index(members));
    const int value = ds.value_first_id() + static_cast<int>(rs.index(m.n_values));
    out.passage.push_back(key);
    out.passage.push_back(value);
  }
  out.q_pair = rs.index(m.n_pairs);
  out.q_key = out.passage[2 * out.q_pair];
  out.answer_value = out.passage[2 * out.q_pair + 1];
  return out;
}

}  // namespace

Dataset gen_kv_task(std::size_t n_examples, std::size_t n_pairs, std::size_t vocab_size,
                    std::uint64_t seed, std::size_t confusion_class_size) {
  Dataset ds;
  ds.meta = make_meta("span", n_examples, n_pairs, 0, vocab_size, seed, confusion_class_size);
  ds.vocab = build_vocab(ds.meta.n_keys, ds.meta.n_values);
  ds.examples.reserve(n_examples);
  for (std::size_t i = 0; i < n_examples; ++i) {
    const std::uint64_t sub = mix_seed(seed, 1000 + i);
    RandomStream rs(sub);
    const KvDraw d = draw_passage(rs, ds);
    Example ex;
    ex.passage = d.passage;
    ex.question = {d.q_key};
    ex.span = SpanAnswer{2 * d.q_pair + 1, 2 * d.q_pair + 1};
    ex.gen_seed = sub;
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

Dataset gen_choice_task(std::size_t n_examples, std::size_t n_pairs, std::size_t n_options,
                        std::size_t vocab_size, std::uint64_t seed,
                        std::size_t confusion_class_size) {
  if (n_options < 2) throw ConfigError("gen_choice_task: need at least 2 options");
  Dataset ds;
  ds.meta =
      make_meta("choice", n_examples, n_pairs, n_options, vocab_size, seed, confusion_class_size);
  ds.vocab = build_vocab(ds.meta.n_keys, ds.meta.n_values);
  if (ds.meta.n_values < n_options) {
    throw ConfigError(cat("gen_choice_task: ", n_options, " options need >= ", n_options,
                          " value tokens, vocabulary has ", ds.meta.n_values));
  }
  ds.examples.reserve(n_examples);
  for (std::size_t i = 0; i < n_examples; ++i) {
    const std::uint64_t sub = mix_seed(seed, 2000000 + i);
    RandomStream rs(sub);
    const KvDraw d = draw_passage(rs, ds);
    std::vector<int> value_pool;
    value_pool.reserve(ds.meta.n_values - 1);
    for (std::size_t v = 0; v < ds.meta.n_values; ++v) {
      const int id = ds.value_first_id() + static_cast<int>(v);
      if (id != d.answer_value) value_pool.push_back(id);
    }
    rs.shuffle(value_pool);
    const std::size_t gold = rs.index(n_options);
    Example ex;
    ex.passage = d.passage;
    ex.question = {d.q_key};
    ex.options.resize(n_options);
    std::size_t wrong = 0;
    for (std::size_t o = 0; o < n_options; ++o) {
      ex.options[o] = {o == gold ? d.answer_value : value_pool[wrong++]};
    }
    ex.choice = gold;
    ex.gen_seed = sub;
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

Example inject_distractor(const Dataset& ds, const Example& ex, std::uint64_t seed) {
  RandomStream rs(seed);
  const int q_key = ex.question.at(0);
  const std::size_t class_size = std::max<std::size_t>(1, ds.meta.confusion_class_size);
  const std::size_t q_class = static_cast<std::size_t>(q_key - ds.key_first_id()) / class_size;

  auto in_passage = [&](int id) {
    return std::find(ex.passage.begin(), ex.passage.end(), id) != ex.passage.end();
  };

  // Prefer a same-class key the passage does not already contain.
  std::vector<int> candidates;
  for (std::size_t k = 0; k < class_size; ++k) {
    const std::size_t idx = q_class * class_size + k;
    if (idx >= ds.meta.n_keys) break;
    const int id = ds.key_first_id() + static_cast<int>(idx);
    if (id != q_key && !in_passage(id)) candidates.push_back(id);
  }
  if (candidates.empty()) {
    for (std::size_t k = 0; k < ds.meta.n_keys; ++k) {
      const int id = ds.key_first_id() + static_cast<int>(k);
      if (id != q_key && !in_passage(id)) candidates.push_back(id);
    }
  }
  if (candidates.empty()) throw DataError("inject_distractor: no unused key available");
  const int distractor_key = candidates[rs.index(candidates.size())];

  int gold_value;
  if (ex.span) {
    gold_value = ex.passage.at(ex.span->start);
  } else if (ex.choice) {
    gold_value = ex.options.at(*ex.choice).at(0);
  } else {
    throw DataError("inject_distractor: example has no answer");
  }

  int distractor_value = -1;
  if (ex.choice && ex.options.size() > 1) {
    // Support a wrong option, the way a misleading sentence would.
    std::vector<int> wrong;
    for (std::size_t o = 0; o < ex.options.size(); ++o) {
      if (o != *ex.choice) wrong.push_back(ex.options[o].at(0));
    }
    distractor_value = wrong[rs.index(wrong.size())];
  } else {
    std::vector<int> pool;
    for (std::size_t v = 0; v < ds.meta.n_values; ++v) {
      const int id = ds.value_first_id() + static_cast<int>(v);
      if (id != gold_value) pool.push_back(id);
    }
    if (pool.empty()) throw DataError("inject_distractor: no wrong value available");
    distractor_value = pool[rs.index(pool.size())];
  }

  Example out = ex;
  out.passage.push_back(distractor_key);
  out.passage.push_back(distractor_value);
  out.has_distractor = true;
  return out;
}

Dataset with_distractors(const Dataset& ds, std::uint64_t seed) {
  Dataset out;
  out.meta = ds.meta;
  out.vocab = ds.vocab;
  out.examples.reserve(ds.examples.size());
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    out.examples.push_back(inject_distractor(ds, ds.examples[i], mix_seed(seed, 3000000 + i)));
  }
  return out;
}

std::vector<std::vector<int>> Batch::all_ids() const {
  std::vector<std::vector<int>> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back(s.ids);
  return out;
}

std::vector<RoleMask> Batch::all_roles() const {
  std::vector<RoleMask> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back(s.roles);
  return out;
}

namespace {

Sequence layout_sequence(const Example& ex, const std::vector<int>* option,
                         std::size_t max_len, std::size_t example_index) {
  Sequence s;
  s.ids.push_back(Vocab::kCls);
  s.roles.push_back(Role::Special);
  for (int id : ex.passage) {
    s.ids.push_back(id);
    s.roles.push_back(Role::Passage);
  }
  s.ids.push_back(Vocab::kSep);
  s.roles.push_back(Role::Special);
  for (int id : ex.question) {
    s.ids.push_back(id);
    s.roles.push_back(Role::Question);
  }
  s.ids.push_back(Vocab::kSep);
  s.roles.push_back(Role::Special);
  if (option) {
    for (int id : *option) {
      s.ids.push_back(id);
      s.roles.push_back(Role::Option);
    }
    s.ids.push_back(Vocab::kSep);
    s.roles.push_back(Role::Special);
  }
  s.valid_len = s.ids.size();
  if (s.valid_len > max_len) {
    throw DataError(cat("build_batch: example ", example_index, " needs ", s.valid_len,
                        " positions, max_len is ", max_len));
  }
  while (s.ids.size() < max_len) {
    s.ids.push_back(Vocab::kPad);
    s.roles.push_back(Role::Special);
  }
  return s;
}

}  // namespace

Batch build_batch(const std::vector<const Example*>& examples, const Vocab& vocab,
                  std::size_t max_len) {
  (void)vocab;
  if (examples.empty()) throw DataError("build_batch: empty example list");
  Batch b;
  b.seq_len = max_len;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const Example& ex = *examples[i];
    if (static_cast<bool>(ex.span) == static_cast<bool>(ex.choice)) {
      throw DataError(cat("build_batch: example ", i, " must carry exactly one answer kind"));
    }
    BatchItem item;
    item.first_seq = b.seqs.size();
    item.passage_first = 1;
    item.passage_len = ex.passage.size();
    if (ex.span) {
      if (ex.span->start > ex.span->end || ex.span->end >= ex.passage.size()) {
        throw DataError(cat("build_batch: example ", i, " span out of passage bounds"));
      }
      item.n_seqs = 1;
      item.span_seq = SpanAnswer{ex.span->start + 1, ex.span->end + 1};
      b.seqs.push_back(layout_sequence(ex, nullptr, max_len, i));
    } else {
      if (ex.options.size() < 2) {
        throw DataError(cat("build_batch: example ", i, " needs at least 2 options"));
      }
      if (*ex.choice >= ex.options.size()) {
        throw DataError(cat("build_batch: example ", i, " gold choice out of range"));
      }
      item.n_seqs = ex.options.size();
      item.choice = ex.choice;
      for (const auto& opt : ex.options) {
        b.seqs.push_back(layout_sequence(ex, &opt, max_len, i));
      }
    }
    b.items.push_back(item);
  }
  return b;
}

Batch build_batch(const Dataset& ds, const std::vector<std::size_t>& indices,
                  std::size_t max_len) {
  std::vector<const Example*> ptrs;
  ptrs.reserve(indices.size());
  for (std::size_t idx : indices) ptrs.push_back(&ds.examples.at(idx));
  return build_batch(ptrs, ds.vocab, max_len);
}

std::size_t max_built_length(const Dataset& ds) {
  std::size_t longest = 0;
  for (const auto& ex : ds.examples) {
    const std::size_t base = 1 + ex.passage.size() + 1 + ex.question.size() + 1;
    if (ex.options.empty()) {
      longest = std::max(longest, base);
    } else {
      for (const auto& opt : ex.options) longest = std::max(longest, base + opt.size() + 1);
    }
  }
  return longest;
}

std::vector<std::string> decode_section(const Sequence& seq, const Vocab& vocab, Role role) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    if (seq.roles[i] == role) out.push_back(vocab.token(seq.ids[i]));
  }
  return out;
}

std::string dataset_meta_path(const std::string& jsonl_path) { return jsonl_path + ".meta.json"; }

namespace {

ordered_json tokens_json(const std::vector<int>& ids, const Vocab& vocab) {
  ordered_json arr = ordered_json::array();
  for (int id : ids) arr.push_back(vocab.token(id));
  return arr;
}

std::vector<int> tokens_from_json(const ordered_json& arr, const Vocab& vocab) {
  std::vector<int> ids;
  for (const auto& t : arr) ids.push_back(vocab.require_id(t.get<std::string>()));
  return ids;
}

}  // namespace

std::string dataset_jsonl_string(const Dataset& ds) {
  std::ostringstream os;
  for (const auto& ex : ds.examples) {
    ordered_json line;
    line["passage"] = tokens_json(ex.passage, ds.vocab);
    line["question"] = tokens_json(ex.question, ds.vocab);
    if (!ex.options.empty()) {
      ordered_json opts = ordered_json::array();
      for (const auto& o : ex.options) opts.push_back(tokens_json(o, ds.vocab));
      line["options"] = opts;
    }
    if (ex.span) {
      line["answer"] = {{"start", ex.span->start}, {"end", ex.span->end}};
    } else {
      line["answer"] = {{"choice", *ex.choice}};
    }
    os << line.dump() << "\n";
  }
  return os.str();
}

std::string dataset_content_hash(const Dataset& ds) { return sha256_hex(dataset_jsonl_string(ds)); }

void save_dataset(const Dataset& ds, const std::string& jsonl_path) {
  std::ofstream out(jsonl_path);
  if (!out) throw std::runtime_error("save_dataset: cannot write " + jsonl_path);
  out << dataset_jsonl_string(ds);
  out.close();
  if (!out) throw std::runtime_error("save_dataset: write failed for " + jsonl_path);

  ordered_json meta;
  meta["format"] = "pqat-dataset-meta";
  meta["version"] = 1;
  meta["task"] = ds.meta.task;
  meta["n_examples"] = ds.meta.n_examples;
  meta["n_pairs"] = ds.meta.n_pairs;
  meta["n_options"] = ds.meta.n_options;
  meta["vocab_size"] = ds.meta.vocab_size;
  meta["n_keys"] = ds.meta.n_keys;
  meta["n_values"] = ds.meta.n_values;
  meta["confusion_class_size"] = ds.meta.confusion_class_size;
  meta["seed"] = ds.meta.seed;
  std::ofstream mout(dataset_meta_path(jsonl_path));
  if (!mout) throw std::runtime_error("save_dataset: cannot write " + dataset_meta_path(jsonl_path));
  mout << meta.dump(2) << "\n";
}

Dataset load_dataset(const std::string& jsonl_path) {
  std::ifstream min(dataset_meta_path(jsonl_path));
  if (!min) {
    throw std::runtime_error("load_dataset: missing metadata file " +
                             dataset_meta_path(jsonl_path));
  }
  ordered_json meta = ordered_json::parse(min);
  Dataset ds;
  ds.meta.task = meta.at("task").get<std::string>();
  if (ds.meta.task != "span" && ds.meta.task != "choice") {
    throw DataError("load_dataset: unknown task \"" + ds.meta.task + "\"");
  }
  ds.meta.n_examples = meta.at("n_examples").get<std::size_t>();
  ds.meta.n_pairs = meta.at("n_pairs").get<std::size_t>();
  ds.meta.n_options = meta.at("n_options").get<std::size_t>();
  ds.meta.vocab_size = meta.at("vocab_size").get<std::size_t>();
  ds.meta.n_keys = meta.at("n_keys").get<std::size_t>();
  ds.meta.n_values = meta.at("n_values").get<std::size_t>();
  ds.meta.confusion_class_size = meta.at("confusion_class_size").get<std::size_t>();
  ds.meta.seed = meta.at("seed").get<std::uint64_t>();
  if (3 + ds.meta.n_keys + ds.meta.n_values != ds.meta.vocab_size) {
    throw DataError("load_dataset: inconsistent vocabulary sizes in metadata");
  }
  ds.vocab = build_vocab(ds.meta.n_keys, ds.meta.n_values);

  std::ifstream in(jsonl_path);
  if (!in) throw std::runtime_error("load_dataset: cannot open " + jsonl_path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    ordered_json j = ordered_json::parse(line);
    Example ex;
    ex.passage = tokens_from_json(j.at("passage"), ds.vocab);
    ex.question = tokens_from_json(j.at("question"), ds.vocab);
    if (ex.passage.empty() || ex.question.empty()) {
      throw DataError(cat("load_dataset: line ", line_no, ": empty passage or question"));
    }
    if (j.contains("options")) {
      for (const auto& o : j.at("options")) ex.options.push_back(tokens_from_json(o, ds.vocab));
    }
    const auto& ans = j.at("answer");
    if (ans.contains("start")) {
      SpanAnswer span{ans.at("start").get<std::size_t>(), ans.at("end").get<std::size_t>()};
      if (span.start > span.end || span.end >= ex.passage.size()) {
        throw DataError(cat("load_dataset: line ", line_no, ": span outside passage"));
      }
      ex.span = span;
    }
    if (ans.contains("choice")) {
      if (ex.span) throw DataError(cat("load_dataset: line ", line_no, ": two answer kinds"));
      const std::size_t c = ans.at("choice").get<std::size_t>();
      if (ex.options.size() < 2 || c >= ex.options.size()) {
        throw DataError(cat("load_dataset: line ", line_no, ": choice answer out of range"));
      }
      ex.choice = c;
    }
    if (!ex.span && !ex.choice) {
      throw DataError(cat("load_dataset: line ", line_no, ": no answer"));
    }
    if (ds.is_span() && !ex.span) {
      throw DataError(cat("load_dataset: line ", line_no, ": span task requires span answers"));
    }
    if (!ds.is_span() && !ex.choice) {
      throw DataError(cat("load_dataset: line ", line_no, ": choice task requires choice answers"));
    }
    if (!ds.is_span() && ex.options.size() != ds.meta.n_options) {
      throw DataError(cat("load_dataset: line ", line_no, ": expected ", ds.meta.n_options,
                          " options, found ", ex.options.size()));
    }
    ds.examples.push_back(std::move(ex));
  }
  if (ds.examples.size() != ds.meta.n_examples) {
    throw DataError(cat("load_dataset: metadata names ", ds.meta.n_examples, " examples, file has ",
                        ds.examples.size()));
  }
  return ds;
}

}  // namespace pqat
