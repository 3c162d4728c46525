// SPDX-License-Identifier: Apache-2.0
#include "core/model.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <json.hpp>

#include "core/common.hpp"
#include "core/rng.hpp"

namespace pqat {

using ordered_json = nlohmann::ordered_json;

std::vector<TensorPtr> ModelParams::all_params() const {
  std::vector<TensorPtr> out;
  out.push_back(position);
  out.push_back(final_scale);
  out.push_back(final_shift);
  for (const auto& b : blocks) {
    out.push_back(b.w_query);
    out.push_back(b.w_key);
    out.push_back(b.w_value);
    out.push_back(b.w_out);
    out.push_back(b.w_ff1);
    out.push_back(b.w_ff2);
    out.push_back(b.ln1_scale);
    out.push_back(b.ln1_shift);
    out.push_back(b.ln2_scale);
    out.push_back(b.ln2_shift);
  }
  out.push_back(heads.span_start);
  out.push_back(heads.span_end);
  out.push_back(heads.choice);
  return out;
}

namespace {

TensorPtr xavier(RandomStream& rs, std::size_t fan_in, std::size_t fan_out) {
  auto t = Tensor::zeros({fan_in, fan_out}, /*requires_grad=*/true);
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : t->values) v = std * rs.normal();
  return t;
}

TensorPtr constant_vec(std::size_t n, double v) {
  auto t = Tensor::zeros({n}, /*requires_grad=*/true);
  t->fill(v);
  return t;
}

}  // namespace

ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
  if (config.dim < 1 || config.hidden < config.dim) {
    throw ConfigError("init_model: need dim >= 1 and hidden >= dim");
  }
  if (config.n_blocks < 1) throw ConfigError("init_model: need at least one block");
  if (config.max_len < 1) throw ConfigError("init_model: max_len must be positive");
  ModelParams p;
  p.config = config;
  RandomStream rs(mix_seed(seed, 0x60));
  const std::size_t d = config.dim, h = config.hidden;
  p.position = Tensor::zeros({config.max_len, d}, /*requires_grad=*/true);
  for (double& v : p.position->values) v = 0.1 * rs.normal();
  for (std::size_t b = 0; b < config.n_blocks; ++b) {
    EncoderBlockParams blk;
    blk.w_query = xavier(rs, d, d);
    blk.w_key = xavier(rs, d, d);
    blk.w_value = xavier(rs, d, d);
    blk.w_out = xavier(rs, d, d);
    blk.w_ff1 = xavier(rs, d, h);
    blk.w_ff2 = xavier(rs, h, d);
    blk.ln1_scale = constant_vec(d, 1.0);
    blk.ln1_shift = constant_vec(d, 0.0);
    blk.ln2_scale = constant_vec(d, 1.0);
    blk.ln2_shift = constant_vec(d, 0.0);
    p.blocks.push_back(std::move(blk));
  }
  p.final_scale = constant_vec(d, 1.0);
  p.final_shift = constant_vec(d, 0.0);
  p.heads.span_start = xavier(rs, d, 1);
  p.heads.span_end = xavier(rs, d, 1);
  p.heads.choice = xavier(rs, d, 1);
  return p;
}

TensorPtr encode(Graph& g, const TensorPtr& z_in, const ModelParams& params,
                 const TensorPtr& attn_bias) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(params.config.dim));
  TensorPtr z = z_in;
  for (const auto& blk : params.blocks) {
    TensorPtr normed = g.layer_norm(z, blk.ln1_scale, blk.ln1_shift);
    TensorPtr q = g.matmul(normed, blk.w_query);
    TensorPtr k = g.matmul(normed, blk.w_key);
    TensorPtr v = g.matmul(normed, blk.w_value);
    TensorPtr scores = g.mul_scalar(g.matmul(q, g.transpose(k)), scale);
    if (attn_bias) scores = g.add(scores, attn_bias);
    TensorPtr attn = g.matmul(g.softmax(scores), v);
    z = g.add(z, g.matmul(attn, blk.w_out));
    TensorPtr normed2 = g.layer_norm(z, blk.ln2_scale, blk.ln2_shift);
    TensorPtr ff = g.matmul(g.relu(g.matmul(normed2, blk.w_ff1)), blk.w_ff2);
    z = g.add(z, ff);
  }
  return g.layer_norm(z, params.final_scale, params.final_shift);
}

namespace {

// 1 x T additive attention bias masking padded key positions.
TensorPtr attention_bias(const Sequence& seq) {
  auto bias = Tensor::zeros({1, seq.ids.size()});
  for (std::size_t t = seq.valid_len; t < seq.ids.size(); ++t) {
    bias->values[t] = kAttentionMaskValue;
  }
  return bias;
}

// T x 1 additive logit mask hiding padded positions from the loss.
TensorPtr logit_mask(const Sequence& seq) {
  auto mask = Tensor::zeros({seq.ids.size(), 1});
  for (std::size_t t = seq.valid_len; t < seq.ids.size(); ++t) {
    mask->values[t] = kAttentionMaskValue;
  }
  return mask;
}

TensorPtr encode_sequence(Graph& g, const Batch& batch, std::size_t seq_idx,
                          const EmbeddingSet& emb, const TensorPtr& delta,
                          const ModelParams& params) {
  const Sequence& seq = batch.seqs[seq_idx];
  if (seq.ids.size() > params.config.max_len) {
    throw DataError(cat("encode: sequence length ", seq.ids.size(), " exceeds model max_len ",
                        params.config.max_len));
  }
  TensorPtr delta_slice;
  if (delta) delta_slice = g.slice_rows(delta, seq_idx * batch.seq_len, batch.seq_len);
  TensorPtr z = compose_sequence(g, seq.ids, seq.roles, emb, delta_slice);
  z = g.add(z, g.slice_rows(params.position, 0, seq.ids.size()));
  return encode(g, z, params, attention_bias(seq));
}

TensorPtr mean_of(Graph& g, const std::vector<TensorPtr>& losses) {
  TensorPtr acc = losses[0];
  for (std::size_t i = 1; i < losses.size(); ++i) acc = g.add(acc, losses[i]);
  return g.mul_scalar(acc, 1.0 / static_cast<double>(losses.size()));
}

}  // namespace

SpanForwardResult span_forward(Graph& g, const Batch& batch, const EmbeddingSet& emb,
                               const TensorPtr& delta, const ModelParams& params) {
  SpanForwardResult res;
  std::vector<TensorPtr> losses;
  for (const auto& item : batch.items) {
    if (!item.span_seq) throw DataError("span_forward: batch item has no span label");
    const Sequence& seq = batch.seqs[item.first_seq];
    if (item.span_seq->end >= seq.valid_len) {
      throw DataError("span_forward: gold span outside the sequence");
    }
    TensorPtr enc = encode_sequence(g, batch, item.first_seq, emb, delta, params);
    TensorPtr mask = logit_mask(seq);
    TensorPtr start_logits = g.add(g.matmul(enc, params.heads.span_start), mask);
    TensorPtr end_logits = g.add(g.matmul(enc, params.heads.span_end), mask);
    TensorPtr ce_start = g.cross_entropy_logits(start_logits, item.span_seq->start);
    TensorPtr ce_end = g.cross_entropy_logits(end_logits, item.span_seq->end);
    losses.push_back(g.mul_scalar(g.add(ce_start, ce_end), 0.5));
    res.start_logits.push_back(start_logits);
    res.end_logits.push_back(end_logits);
  }
  res.loss = mean_of(g, losses);
  return res;
}

ChoiceForwardResult choice_forward(Graph& g, const Batch& batch, const EmbeddingSet& emb,
                                   const TensorPtr& delta, const ModelParams& params) {
  ChoiceForwardResult res;
  std::vector<TensorPtr> losses;
  for (const auto& item : batch.items) {
    if (!item.choice) throw DataError("choice_forward: batch item has no choice label");
    if (item.n_seqs < 2) throw DataError("choice_forward: need at least 2 option sequences");
    std::vector<TensorPtr> pooled;
    for (std::size_t s = 0; s < item.n_seqs; ++s) {
      TensorPtr enc = encode_sequence(g, batch, item.first_seq + s, emb, delta, params);
      pooled.push_back(g.slice_rows(enc, 0, 1));
    }
    TensorPtr logits = g.matmul(g.concat_rows(pooled), params.heads.choice);
    losses.push_back(g.cross_entropy_logits(logits, *item.choice));
    res.choice_logits.push_back(logits);
  }
  res.loss = mean_of(g, losses);
  return res;
}

TensorPtr task_forward(Graph& g, const Batch& batch, const EmbeddingSet& emb,
                       const TensorPtr& delta, const ModelParams& params) {
  const bool is_span = batch.items.front().span_seq.has_value();
  if (is_span) return span_forward(g, batch, emb, delta, params).loss;
  return choice_forward(g, batch, emb, delta, params).loss;
}

SpanAnswer predict_span(const std::vector<double>& start_logits,
                        const std::vector<double>& end_logits, std::size_t passage_first,
                        std::size_t passage_len, int max_answer_len) {
  if (passage_len == 0) throw std::invalid_argument("predict_span: empty passage range");
  const std::size_t last = passage_first + passage_len - 1;
  SpanAnswer best{passage_first, passage_first};
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t s = passage_first; s <= last; ++s) {
    const std::size_t e_max = std::min(last, s + static_cast<std::size_t>(max_answer_len));
    for (std::size_t e = s; e <= e_max; ++e) {
      const double score = start_logits[s] + end_logits[e];
      if (score > best_score) {
        best_score = score;
        best = SpanAnswer{s, e};
      }
    }
  }
  return best;
}

namespace {

ordered_json tensor_json(const TensorPtr& t) {
  ordered_json j;
  j["shape"] = t->shape;
  j["values"] = t->values;
  return j;
}

TensorPtr tensor_from_json(const ordered_json& j, bool requires_grad) {
  return Tensor::from_values(j.at("shape").get<std::vector<std::size_t>>(),
                             j.at("values").get<std::vector<double>>(), requires_grad);
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params, const EmbeddingSet& emb) {
  ordered_json j;
  j["format"] = "pqat-checkpoint";
  j["version"] = 1;
  j["vocab_size"] = emb.vocab_size;
  j["dim"] = params.config.dim;
  j["hidden"] = params.config.hidden;
  j["n_blocks"] = params.config.n_blocks;
  j["max_len"] = params.config.max_len;
  j["max_answer_len"] = params.config.max_answer_len;
  j["embedding"] = tensor_json(emb.embeddings);
  j["position"] = tensor_json(params.position);
  j["final_scale"] = tensor_json(params.final_scale);
  j["final_shift"] = tensor_json(params.final_shift);
  ordered_json blocks = ordered_json::array();
  for (const auto& b : params.blocks) {
    ordered_json bj;
    bj["w_query"] = tensor_json(b.w_query);
    bj["w_key"] = tensor_json(b.w_key);
    bj["w_value"] = tensor_json(b.w_value);
    bj["w_out"] = tensor_json(b.w_out);
    bj["w_ff1"] = tensor_json(b.w_ff1);
    bj["w_ff2"] = tensor_json(b.w_ff2);
    bj["ln1_scale"] = tensor_json(b.ln1_scale);
    bj["ln1_shift"] = tensor_json(b.ln1_shift);
    bj["ln2_scale"] = tensor_json(b.ln2_scale);
    bj["ln2_shift"] = tensor_json(b.ln2_shift);
    blocks.push_back(bj);
  }
  j["blocks"] = blocks;
  j["heads"] = {{"span_start", tensor_json(params.heads.span_start)},
                {"span_end", tensor_json(params.heads.span_end)},
                {"choice", tensor_json(params.heads.choice)}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_checkpoint: cannot write " + path);
  out << j.dump() << "\n";
  out.close();
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  ordered_json j = ordered_json::parse(in);
  if (j.value("format", "") != std::string("pqat-checkpoint")) {
    throw ConfigError("load_checkpoint: not a checkpoint file: " + path);
  }
  Checkpoint ck;
  ck.params.config.dim = j.at("dim").get<std::size_t>();
  ck.params.config.hidden = j.at("hidden").get<std::size_t>();
  ck.params.config.n_blocks = j.at("n_blocks").get<std::size_t>();
  ck.params.config.max_len = j.at("max_len").get<std::size_t>();
  ck.params.config.max_answer_len = j.at("max_answer_len").get<int>();
  ck.params.position = tensor_from_json(j.at("position"), true);
  ck.params.final_scale = tensor_from_json(j.at("final_scale"), true);
  ck.params.final_shift = tensor_from_json(j.at("final_shift"), true);
  for (const auto& bj : j.at("blocks")) {
    EncoderBlockParams b;
    b.w_query = tensor_from_json(bj.at("w_query"), true);
    b.w_key = tensor_from_json(bj.at("w_key"), true);
    b.w_value = tensor_from_json(bj.at("w_value"), true);
    b.w_out = tensor_from_json(bj.at("w_out"), true);
    b.w_ff1 = tensor_from_json(bj.at("w_ff1"), true);
    b.w_ff2 = tensor_from_json(bj.at("w_ff2"), true);
    b.ln1_scale = tensor_from_json(bj.at("ln1_scale"), true);
    b.ln1_shift = tensor_from_json(bj.at("ln1_shift"), true);
    b.ln2_scale = tensor_from_json(bj.at("ln2_scale"), true);
    b.ln2_shift = tensor_from_json(bj.at("ln2_shift"), true);
    ck.params.blocks.push_back(std::move(b));
  }
  ck.params.heads.span_start = tensor_from_json(j.at("heads").at("span_start"), true);
  ck.params.heads.span_end = tensor_from_json(j.at("heads").at("span_end"), true);
  ck.params.heads.choice = tensor_from_json(j.at("heads").at("choice"), true);
  ck.emb.embeddings = tensor_from_json(j.at("embedding"), true);
  ck.emb.vocab_size = j.at("vocab_size").get<std::size_t>();
  ck.emb.dim = ck.params.config.dim;
  return ck;
}

}  // namespace pqat
