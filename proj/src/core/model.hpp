// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "core/data.hpp"
#include "core/graph.hpp"
#include "core/perturb.hpp"
#include "core/tensor.hpp"

namespace pqat {

// One pre-norm encoder block, single attention head.
struct EncoderBlockParams {
  TensorPtr w_query, w_key, w_value, w_out;  // D x D
  TensorPtr w_ff1;                           // D x H
  TensorPtr w_ff2;                           // H x D
  TensorPtr ln1_scale, ln1_shift;            // D
  TensorPtr ln2_scale, ln2_shift;            // D
};

struct TaskHeads {
  TensorPtr span_start;  // D x 1
  TensorPtr span_end;    // D x 1
  TensorPtr choice;      // D x 1, applied to the pooled first position
};

struct ModelConfig {
  std::size_t dim = 32;
  std::size_t hidden = 128;  // feed-forward width, >= dim
  std::size_t n_blocks = 1;
  std::size_t max_len = 16;  // position table size
  int max_answer_len = 8;
};

struct ModelParams {
  ModelConfig config;
  TensorPtr position;  // max_len x D, learned, added after composition
  std::vector<EncoderBlockParams> blocks;
  TensorPtr final_scale, final_shift;  // closing layer norm before the heads
  TaskHeads heads;

  // Canonical parameter order, shared by the optimizer and the checkpoint.
  std::vector<TensorPtr> all_params() const;
};

ModelParams init_model(const ModelConfig& config, std::uint64_t seed);

// Pre-norm block stack: h = z + Attn(LN(z)); out = h + FFN(LN(h)), with a
// closing layer norm so the heads read a normalized stream.
// Bidirectional; attn_bias is a 1 x T row added to every score row (use
// kAttentionMaskValue at padded key positions, 0 elsewhere).
TensorPtr encode(Graph& g, const TensorPtr& z, const ModelParams& params,
                 const TensorPtr& attn_bias);

inline constexpr double kAttentionMaskValue = -1e9;

struct SpanForwardResult {
  TensorPtr loss;
  std::vector<TensorPtr> start_logits;  // per item, T x 1
  std::vector<TensorPtr> end_logits;
};

struct ChoiceForwardResult {
  TensorPtr loss;
  std::vector<TensorPtr> choice_logits;  // per item, m x 1
};

// Loss = mean over items of (CE(start) + CE(end)) / 2. Pad positions are
// masked out of attention and of the logits that feed the loss. Null
// virtual matrices / delta are skipped in the composition.
SpanForwardResult span_forward(Graph& g, const Batch& batch, const EmbeddingSet& emb,
                               const TensorPtr& delta, const ModelParams& params);

// Each option sequence is encoded independently; the first-position vector
// is pooled and scored, giving one logit per option; loss = mean CE.
ChoiceForwardResult choice_forward(Graph& g, const Batch& batch, const EmbeddingSet& emb,
                                   const TensorPtr& delta, const ModelParams& params);

// Dispatches on the batch's task.
TensorPtr task_forward(Graph& g, const Batch& batch, const EmbeddingSet& emb,
                       const TensorPtr& delta, const ModelParams& params);

// Highest-scoring (start, end) pair with start <= end <= start+max_answer_len,
// restricted to [passage_first, passage_first+passage_len). Ties prefer the
// smallest start, then the smallest end. Returns sequence coordinates.
SpanAnswer predict_span(const std::vector<double>& start_logits,
                        const std::vector<double>& end_logits, std::size_t passage_first,
                        std::size_t passage_len, int max_answer_len);

// Checkpoints hold the real embedding matrix and the model parameters only;
// the virtual perturbation matrices are never serialized.
void save_checkpoint(const std::string& path, const ModelParams& params, const EmbeddingSet& emb);

struct Checkpoint {
  ModelParams params;
  EmbeddingSet emb;  // embeddings only; virtual matrices are null
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace pqat
