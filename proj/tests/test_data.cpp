// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "core/common.hpp"
#include "core/data.hpp"
#include "core/perturb.hpp"
#include "core/rng.hpp"

using namespace pqat;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "pqat_test_data";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("gen_kv_task: structure and determinism") {
  auto ds = gen_kv_task(50, 1, 16, 3);
  for (const auto& ex : ds.examples) {
    REQUIRE(ex.span.has_value());
    CHECK(ex.span->start == 1);  // single pair: value is always position 1
    CHECK(ex.span->end == 1);
    CHECK(ex.passage.size() == 2);
    CHECK(ex.question.size() == 1);
  }

  auto a = gen_kv_task(40, 4, 51, 9);
  auto b = gen_kv_task(40, 4, 51, 9);
  CHECK(dataset_jsonl_string(a) == dataset_jsonl_string(b));
  auto c = gen_kv_task(40, 4, 51, 10);
  CHECK(dataset_jsonl_string(a) != dataset_jsonl_string(c));
}

TEST_CASE("gen_kv_task: answer token is the value paired with the question key") {
  auto ds = gen_kv_task(200, 5, 61, 21);
  for (const auto& ex : ds.examples) {
    const int q_key = ex.question[0];
    // Re-derive the pairing from the passage and cross-check the label.
    int paired_value = -1;
    std::set<int> keys;
    for (std::size_t j = 0; j + 1 < ex.passage.size(); j += 2) {
      CHECK(ds.is_key_id(ex.passage[j]));
      CHECK_FALSE(ds.is_key_id(ex.passage[j + 1]));
      CHECK(keys.insert(ex.passage[j]).second);  // keys unique within a passage
      if (ex.passage[j] == q_key) paired_value = ex.passage[j + 1];
    }
    REQUIRE(paired_value != -1);
    CHECK(ex.passage[ex.span->start] == paired_value);
  }
}

TEST_CASE("gen_kv_task rejects infeasible sizes") {
  CHECK_THROWS_AS(gen_kv_task(10, 4, 11, 1), ConfigError);  // needs > 2*4+3
  CHECK_THROWS_AS(gen_kv_task(0, 4, 51, 1), ConfigError);
}

TEST_CASE("gen_choice_task: exactly one correct option, uniform gold index") {
  auto ds = gen_choice_task(10000, 2, 4, 31, 5);
  std::vector<std::size_t> gold_counts(4, 0);
  for (const auto& ex : ds.examples) {
    REQUIRE(ex.choice.has_value());
    REQUIRE(ex.options.size() == 4);
    const int q_key = ex.question[0];
    int paired_value = -1;
    for (std::size_t j = 0; j + 1 < ex.passage.size(); j += 2) {
      if (ex.passage[j] == q_key) paired_value = ex.passage[j + 1];
    }
    std::size_t matches = 0;
    std::set<int> distinct;
    for (std::size_t o = 0; o < 4; ++o) {
      REQUIRE(ex.options[o].size() == 1);
      distinct.insert(ex.options[o][0]);
      if (ex.options[o][0] == paired_value) {
        ++matches;
        CHECK(o == *ex.choice);
      }
    }
    CHECK(matches == 1);
    CHECK(distinct.size() == 4);
    gold_counts[*ex.choice] += 1;
  }
  // Multinomial: each count within 3 sigma of n/4.
  const double expect = 2500.0, sigma = std::sqrt(10000.0 * 0.25 * 0.75);
  for (std::size_t c = 0; c < 4; ++c) {
    CHECK(std::fabs(static_cast<double>(gold_counts[c]) - expect) < 3.0 * sigma);
  }

  auto again = gen_choice_task(100, 2, 4, 31, 5);
  auto ds100 = gen_choice_task(100, 2, 4, 31, 5);
  CHECK(dataset_jsonl_string(again) == dataset_jsonl_string(ds100));
}

TEST_CASE("gen_choice_task: m=2, n_pairs=1 distractor option is a non-answer value") {
  auto ds = gen_choice_task(100, 1, 2, 16, 8);
  for (const auto& ex : ds.examples) {
    const int gold_tok = ex.options[*ex.choice][0];
    const int other = ex.options[1 - *ex.choice][0];
    CHECK(gold_tok == ex.passage[1]);
    CHECK(other != gold_tok);
    CHECK_FALSE(ds.is_key_id(other));
  }
}

TEST_CASE("inject_distractor: append-only, labels intact, near-miss key") {
  auto ds = gen_kv_task(300, 4, 51, 33);
  const std::size_t class_size = ds.meta.confusion_class_size;
  std::size_t same_class = 0;
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    const Example& ex = ds.examples[i];
    Example out = inject_distractor(ds, ex, mix_seed(1, i));
    CHECK(out.passage.size() == ex.passage.size() + 2);
    // Original passage is a prefix; answer unchanged.
    for (std::size_t j = 0; j < ex.passage.size(); ++j) CHECK(out.passage[j] == ex.passage[j]);
    CHECK(*out.span == *ex.span);
    CHECK(out.has_distractor);

    const int key = out.passage[ex.passage.size()];
    const int val = out.passage[ex.passage.size() + 1];
    CHECK(ds.is_key_id(key));
    CHECK_FALSE(ds.is_key_id(val));
    CHECK(val != ex.passage[ex.span->start]);  // never the gold value
    CHECK(key != ex.question[0]);
    const auto cls = [&](int k) {
      return static_cast<std::size_t>(k - ds.key_first_id()) / class_size;
    };
    if (cls(key) == cls(ex.question[0])) ++same_class;
  }
  // The near-miss key shares the question key's group except when the group
  // is exhausted by the passage.
  CHECK(same_class == ds.examples.size());
}

TEST_CASE("inject_distractor on choice examples supports a wrong option") {
  auto ds = gen_choice_task(200, 3, 4, 41, 13);
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    const Example& ex = ds.examples[i];
    Example out = inject_distractor(ds, ex, mix_seed(2, i));
    CHECK(*out.choice == *ex.choice);
    const int val = out.passage.back();
    const int gold_tok = ex.options[*ex.choice][0];
    CHECK(val != gold_tok);
    bool is_option = false;
    for (const auto& o : ex.options) is_option = is_option || o[0] == val;
    CHECK(is_option);
  }
}

TEST_CASE("embedding-similarity matcher is distracted by near-miss keys") {
  // A matcher that scores each value position by dot(E[key], E[question key])
  // over the group-correlated init: high accuracy on clean passages, visibly
  // lower once a same-group key is appended.
  auto ds = gen_kv_task(500, 4, 51, 99);
  auto hard = with_distractors(ds, 4242);
  GroupedInitSpec groups = ds.key_groups();
  groups.mix = 0.9;
  auto e = init_embeddings(ds.meta.vocab_size, 32, 0.1, 7, groups);

  auto run = [&](const Dataset& d) {
    std::size_t hits = 0;
    for (const auto& ex : d.examples) {
      const int q = ex.question[0];
      double best = -1e300;
      std::size_t best_pos = 0;
      for (std::size_t j = 0; j + 1 < ex.passage.size(); j += 2) {
        double dot = 0.0;
        for (std::size_t k = 0; k < 32; ++k) {
          dot += e->values[static_cast<std::size_t>(ex.passage[j]) * 32 + k] *
                 e->values[static_cast<std::size_t>(q) * 32 + k];
        }
        if (dot > best) {
          best = dot;
          best_pos = j + 1;
        }
      }
      hits += best_pos == ex.span->start ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(d.examples.size());
  };

  const double clean_acc = run(ds);
  const double hard_acc = run(hard);
  CHECK(clean_acc > 0.9);
  CHECK(hard_acc < clean_acc - 0.05);
}

TEST_CASE("build_batch: layout, roles, labels, round trip") {
  Example ex;
  ex.passage = {5, 9};
  ex.question = {5};
  ex.span = SpanAnswer{1, 1};
  Vocab vocab = build_vocab(10, 10);

  Batch b = build_batch({&ex}, vocab, 8);
  const Sequence& s = b.seqs[0];
  CHECK(s.valid_len == 6);  // CLS p p SEP q SEP
  CHECK(s.ids.size() == 8);
  CHECK(s.ids[0] == Vocab::kCls);
  CHECK(s.ids[1] == 5);
  CHECK(s.ids[2] == 9);
  CHECK(s.ids[3] == Vocab::kSep);
  CHECK(s.ids[4] == 5);
  CHECK(s.ids[5] == Vocab::kSep);
  CHECK(s.ids[6] == Vocab::kPad);
  CHECK(s.roles[1] == Role::Passage);
  CHECK(s.roles[4] == Role::Question);
  CHECK(s.roles[0] == Role::Special);
  CHECK(s.roles[7] == Role::Special);

  // Role counts equal section lengths.
  std::size_t n_passage = 0, n_question = 0;
  for (Role r : s.roles) {
    n_passage += r == Role::Passage ? 1 : 0;
    n_question += r == Role::Question ? 1 : 0;
  }
  CHECK(n_passage == ex.passage.size());
  CHECK(n_question == ex.question.size());

  // Label shifted past CLS and pointing at a passage position.
  CHECK(b.items[0].span_seq->start == 2);
  CHECK(s.roles[b.items[0].span_seq->start] == Role::Passage);

  // Round trip through token strings.
  std::vector<std::string> passage_tokens = decode_section(s, vocab, Role::Passage);
  CHECK(passage_tokens == std::vector<std::string>{vocab.token(5), vocab.token(9)});

  // Overflow names the example.
  CHECK_THROWS_WITH_AS(static_cast<void>(build_batch({&ex}, vocab, 4)),
                       doctest::Contains("example 0"), DataError);
}

TEST_CASE("build_batch: choice layout emits one sequence per option") {
  auto ds = gen_choice_task(4, 2, 3, 31, 77);
  Batch b = build_batch(ds, {0, 1}, 16);
  CHECK(b.items.size() == 2);
  CHECK(b.seqs.size() == 6);
  CHECK(b.items[1].first_seq == 3);
  for (const auto& seq : b.seqs) {
    std::size_t n_option = 0;
    for (Role r : seq.roles) n_option += r == Role::Option ? 1 : 0;
    CHECK(n_option == 1);
    CHECK(seq.ids[seq.valid_len - 1] == Vocab::kSep);
  }
}

TEST_CASE("dataset save/load round trip validates and preserves content") {
  auto ds = gen_kv_task(25, 3, 31, 55);
  const auto path = temp_file("roundtrip.jsonl");
  save_dataset(ds, path.string());

  // Same generator, same bytes.
  save_dataset(ds, temp_file("roundtrip2.jsonl").string());
  std::ifstream f1(path), f2(temp_file("roundtrip2.jsonl"));
  std::stringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  CHECK(s1.str() == s2.str());

  Dataset loaded = load_dataset(path.string());
  CHECK(loaded.examples.size() == ds.examples.size());
  CHECK(dataset_jsonl_string(loaded) == dataset_jsonl_string(ds));
  CHECK(dataset_content_hash(loaded) == dataset_content_hash(ds));
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    CHECK(loaded.examples[i].passage == ds.examples[i].passage);
    CHECK(*loaded.examples[i].span == *ds.examples[i].span);
  }
}

TEST_CASE("loader rejects malformed content") {
  auto ds = gen_kv_task(5, 2, 21, 1);
  const auto path = temp_file("bad.jsonl");
  save_dataset(ds, path.string());

  // Span outside the passage.
  {
    std::ofstream out(path);
    out << R"({"passage":["key000","val000"],"question":["key000"],"answer":{"start":5,"end":5}})"
        << "\n";
  }
  CHECK_THROWS_AS(load_dataset(path.string()), DataError);

  // Unknown token.
  {
    std::ofstream out(path);
    out << R"({"passage":["mystery","val000"],"question":["key000"],"answer":{"start":1,"end":1}})"
        << "\n";
  }
  CHECK_THROWS_AS(load_dataset(path.string()), DataError);

  // Missing answer.
  {
    std::ofstream out(path);
    out << R"({"passage":["key000","val000"],"question":["key000"],"answer":{}})"
        << "\n";
  }
  CHECK_THROWS_AS(load_dataset(path.string()), DataError);

  std::filesystem::remove(dataset_meta_path(path.string()));
  CHECK_THROWS(load_dataset(path.string()));
}
