// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "core/perturb.hpp"

namespace pqat {

// Token string <-> id bijection. Ids 0,1,2 are reserved for the sequence
// glue tokens.
struct Vocab {
  static constexpr int kCls = 0;
  static constexpr int kSep = 1;
  static constexpr int kPad = 2;

  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, int> token_to_id;

  std::size_t size() const { return id_to_token.size(); }
  int require_id(const std::string& token) const;
  const std::string& token(int id) const;
};

// Inclusive span in passage coordinates.
struct SpanAnswer {
  std::size_t start = 0;
  std::size_t end = 0;
  bool operator==(const SpanAnswer&) const = default;
};

struct Example {
  std::vector<int> passage;
  std::vector<int> question;
  std::vector<std::vector<int>> options;  // empty for span examples
  std::optional<SpanAnswer> span;
  std::optional<std::size_t> choice;
  std::uint64_t gen_seed = 0;
  bool has_distractor = false;
};

struct DatasetMeta {
  std::string task;  // "span" | "choice"
  std::size_t n_examples = 0;
  std::size_t n_pairs = 0;
  std::size_t n_options = 0;  // 0 for span
  std::size_t vocab_size = 0;
  std::size_t n_keys = 0;
  std::size_t n_values = 0;
  std::size_t confusion_class_size = 4;
  std::uint64_t seed = 0;
};

struct Dataset {
  DatasetMeta meta;
  Vocab vocab;
  std::vector<Example> examples;

  bool is_span() const { return meta.task == "span"; }
  int key_first_id() const { return 3; }
  int value_first_id() const { return 3 + static_cast<int>(meta.n_keys); }
  bool is_key_id(int id) const {
    return id >= key_first_id() && id < value_first_id();
  }
  // Correlated-init grouping of the key tokens; distractor keys are drawn
  // from the question key's group.
  GroupedInitSpec key_groups() const;
};

Vocab build_vocab(std::size_t n_keys, std::size_t n_values);

// Key-value retrieval passages: n_pairs (key, value) token pairs, the
// question is one passage key, the answer is the position of its value.
Dataset gen_kv_task(std::size_t n_examples, std::size_t n_pairs, std::size_t vocab_size,
                    std::uint64_t seed, std::size_t confusion_class_size = 4);

// Same passages; the answer is one of n_options candidate value tokens, of
// which exactly one is the value paired with the queried key.
Dataset gen_choice_task(std::size_t n_examples, std::size_t n_pairs, std::size_t n_options,
                        std::size_t vocab_size, std::uint64_t seed,
                        std::size_t confusion_class_size = 4);

// Appends one (near-miss key, wrong value) pair to the passage. The key
// shares the question key's confusion group; the value never equals the gold
// answer (for choice examples it supports one of the wrong options). Labels
// are unchanged.
Example inject_distractor(const Dataset& ds, const Example& ex, std::uint64_t seed);

// Distractor-injected copy of every example, seeds derived per example.
Dataset with_distractors(const Dataset& ds, std::uint64_t seed);

// One encoded input sequence, padded to the batch length.
struct Sequence {
  std::vector<int> ids;
  RoleMask roles;
  std::size_t valid_len = 0;
};

struct BatchItem {
  std::size_t first_seq = 0;
  std::size_t n_seqs = 1;
  std::optional<SpanAnswer> span_seq;  // sequence coordinates
  std::optional<std::size_t> choice;
  std::size_t passage_first = 1;
  std::size_t passage_len = 0;
};

struct Batch {
  std::vector<Sequence> seqs;
  std::vector<BatchItem> items;
  std::size_t seq_len = 0;

  std::vector<std::vector<int>> all_ids() const;
  std::vector<RoleMask> all_roles() const;
};

// Layout per sequence: CLS, passage, SEP, question, [option after another
// SEP, one sequence per option], SEP, then PAD up to max_len. Glue and pad
// positions carry the Special role. Span labels are shifted past the CLS.
Batch build_batch(const std::vector<const Example*>& examples, const Vocab& vocab,
                  std::size_t max_len);
Batch build_batch(const Dataset& ds, const std::vector<std::size_t>& indices,
                  std::size_t max_len);

// Length of the longest sequence the dataset would build, before padding.
std::size_t max_built_length(const Dataset& ds);

// Token strings of a section of a built sequence, for round-trip checks.
std::vector<std::string> decode_section(const Sequence& seq, const Vocab& vocab, Role role);

// JSON-lines persistence. Each line holds token strings:
//   {"passage": [...], "question": [...], "options": [[...]...],
//    "answer": {"start":s,"end":e} | {"choice":c}}
// A companion "<path>.meta.json" carries the generation parameters the
// loader needs to rebuild the vocabulary; the loader re-validates every
// invariant.
void save_dataset(const Dataset& ds, const std::string& jsonl_path);
Dataset load_dataset(const std::string& jsonl_path);
std::string dataset_meta_path(const std::string& jsonl_path);

// The exact bytes save_dataset writes, and their SHA-256 fingerprint (used
// in metrics headers so runs are auditable against their inputs).
std::string dataset_jsonl_string(const Dataset& ds);
std::string dataset_content_hash(const Dataset& ds);

}  // namespace pqat
