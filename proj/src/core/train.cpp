// SPDX-License-Identifier: Apache-2.0
#include "core/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "core/common.hpp"
#include "core/metrics.hpp"
#include "core/rng.hpp"

namespace pqat {

const char* train_mode_name(TrainMode mode) {
  switch (mode) {
    case TrainMode::Baseline: return "baseline";
    case TrainMode::StandardAt: return "at";
    case TrainMode::Pqat: return "pqat";
    case TrainMode::Combined: return "combined";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (eps_delta < 0.0 || eps_p < 0.0 || eps_q < 0.0) {
    throw ConfigError("config: perturbation strengths must be non-negative");
  }
  if (sigma < 0.0) throw ConfigError("config: sigma must be non-negative");
  if (adversarial_steps < 1) throw ConfigError("config: adversarial_steps must be >= 1");
  if (use_classic_pgd && (pgd_alpha <= 0.0 || pgd_eps_ball <= 0.0)) {
    throw ConfigError("config: classic PGD needs positive pgd_alpha and pgd_eps_ball");
  }
  if (lr <= 0.0) throw ConfigError("config: lr must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    throw ConfigError("config: betas must lie in [0,1)");
  }
  if (adam_eps <= 0.0) throw ConfigError("config: adam_eps must be positive");
  if (weight_decay < 0.0) throw ConfigError("config: weight_decay must be non-negative");
  if (warmup_ratio < 0.0 || warmup_ratio >= 1.0) {
    throw ConfigError("config: warmup_ratio must lie in [0,1)");
  }
  if (batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
  if (dim < 1 || hidden < dim) throw ConfigError("config: need dim >= 1 and hidden >= dim");
  if (n_blocks < 1) throw ConfigError("config: n_blocks must be >= 1");
  if (max_answer_len < 0) throw ConfigError("config: max_answer_len must be non-negative");
  if (embed_init_scale <= 0.0) throw ConfigError("config: embed_init_scale must be positive");
  if (key_group_mix < 0.0 || key_group_mix > 1.0) {
    throw ConfigError("config: key_group_mix must lie in [0,1]");
  }
}

bool TrainConfig::local_channel_enabled() const {
  return use_classic_pgd ? (pgd_alpha > 0.0 && pgd_eps_ball > 0.0) : eps_delta > 0.0;
}

TrainMode TrainConfig::mode() const {
  const bool local = local_channel_enabled();
  const bool virt = virtual_channel_enabled();
  if (local && virt) return TrainMode::Combined;
  if (local) return TrainMode::StandardAt;
  if (virt) return TrainMode::Pqat;
  return TrainMode::Baseline;
}

void AdamState::init(const std::vector<TensorPtr>& params) {
  m1.clear();
  m2.clear();
  for (const auto& p : params) {
    m1.emplace_back(p->numel(), 0.0);
    m2.emplace_back(p->numel(), 0.0);
  }
  step = 0;
}

void adam_update(const std::vector<TensorPtr>& params,
                 const std::vector<std::vector<double>>& grads, AdamState& state, double lr,
                 double beta1, double beta2, double eps, double weight_decay) {
  if (params.size() != grads.size() || params.size() != state.m1.size()) {
    throw std::invalid_argument("adam_update: parameter/gradient/state count mismatch");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const std::vector<double>& g = grads[i];
    if (g.size() != p.numel()) {
      throw std::invalid_argument(cat("adam_update: gradient size ", g.size(),
                                      " does not match parameter ", shape_str(p.shape)));
    }
    std::vector<double>& m = state.m1[i];
    std::vector<double>& v = state.m2[i];
    for (std::size_t j = 0; j < g.size(); ++j) {
      m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
      v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      p.values[j] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
    if (weight_decay > 0.0) {
      for (std::size_t j = 0; j < p.numel(); ++j) p.values[j] -= lr * weight_decay * p.values[j];
    }
  }
}

namespace {

long now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

double span_f1(const SpanAnswer& pred, const SpanAnswer& gold) {
  const std::size_t lo = std::max(pred.start, gold.start);
  const std::size_t hi = std::min(pred.end, gold.end);
  if (hi < lo) return 0.0;
  const double overlap = static_cast<double>(hi - lo + 1);
  const double precision = overlap / static_cast<double>(pred.end - pred.start + 1);
  const double recall = overlap / static_cast<double>(gold.end - gold.start + 1);
  return 2.0 * precision * recall / (precision + recall);
}

}  // namespace

EvalMetrics evaluate(const ModelParams& model, const EmbeddingSet& emb, const Dataset& ds,
                     std::size_t batch_size) {
  // Inference path: real embeddings only, no recording, no perturbations.
  EmbeddingSet clean;
  clean.embeddings = emb.embeddings;
  clean.vocab_size = emb.vocab_size;
  clean.dim = emb.dim;

  EvalMetrics out;
  double em_sum = 0.0, f1_sum = 0.0, acc_sum = 0.0, loss_sum = 0.0;
  for (std::size_t first = 0; first < ds.examples.size(); first += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, ds.examples.size() - first));
    std::iota(idx.begin(), idx.end(), first);
    Batch batch = build_batch(ds, idx, model.config.max_len);
    Graph g(/*recording=*/false);
    if (ds.is_span()) {
      SpanForwardResult fwd = span_forward(g, batch, clean, nullptr, model);
      loss_sum += fwd.loss->values[0] * static_cast<double>(batch.items.size());
      for (std::size_t i = 0; i < batch.items.size(); ++i) {
        const BatchItem& item = batch.items[i];
        const SpanAnswer pred =
            predict_span(fwd.start_logits[i]->values, fwd.end_logits[i]->values,
                         item.passage_first, item.passage_len, model.config.max_answer_len);
        em_sum += pred == *item.span_seq ? 1.0 : 0.0;
        f1_sum += span_f1(pred, *item.span_seq);
      }
    } else {
      ChoiceForwardResult fwd = choice_forward(g, batch, clean, nullptr, model);
      loss_sum += fwd.loss->values[0] * static_cast<double>(batch.items.size());
      for (std::size_t i = 0; i < batch.items.size(); ++i) {
        const auto& logits = fwd.choice_logits[i]->values;
        const std::size_t pred = static_cast<std::size_t>(
            std::max_element(logits.begin(), logits.end()) - logits.begin());
        acc_sum += pred == *batch.items[i].choice ? 1.0 : 0.0;
      }
    }
    out.n += batch.items.size();
  }
  if (out.n > 0) {
    const double n = static_cast<double>(out.n);
    out.em = em_sum / n;
    out.f1 = f1_sum / n;
    out.acc = acc_sum / n;
    out.mean_loss = loss_sum / n;
  }
  return out;
}

Trainer::Trainer(const Dataset& train_ds, const TrainConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t vocab = train_ds.meta.vocab_size;

  GroupedInitSpec groups = train_ds.key_groups();
  groups.mix = cfg_.key_group_mix;
  emb_.embeddings = init_embeddings(vocab, cfg_.dim, cfg_.embed_init_scale,
                                    mix_seed(cfg_.seed, 0x10), groups);
  emb_.vocab_size = vocab;
  emb_.dim = cfg_.dim;
  if (cfg_.virtual_channel_enabled()) {
    auto pq = init_virtual(vocab, cfg_.dim, cfg_.sigma, mix_seed(cfg_.seed, 0x20));
    emb_.passage_virtual = pq.first;
    emb_.question_virtual = pq.second;
  }

  ModelConfig mc;
  mc.dim = cfg_.dim;
  mc.hidden = cfg_.hidden;
  mc.n_blocks = cfg_.n_blocks;
  mc.max_len = max_built_length(train_ds) + 2;  // headroom for one injected pair
  mc.max_answer_len = cfg_.max_answer_len;
  model_ = init_model(mc, mix_seed(cfg_.seed, 0x30));

  opt_params_.push_back(emb_.embeddings);
  for (const auto& p : model_.all_params()) opt_params_.push_back(p);
  adam_.init(opt_params_);
}

MetricsRecord Trainer::train_batch(const Batch& batch, long step_index, double lr_now,
                                   const TrainHooks& hooks) {
  const long t0 = now_ms();
  const bool local_on = cfg_.local_channel_enabled();
  const bool virt_on = cfg_.virtual_channel_enabled();
  const std::size_t n_seqs = batch.seqs.size();
  const std::size_t seq_len = batch.seq_len;

  MetricsRecord rec;
  rec.step = step_index;
  rec.mode = train_mode_name(cfg_.mode());

  // Diagnostics only; never enters the update.
  {
    Graph g(/*recording=*/false);
    EmbeddingSet clean;
    clean.embeddings = emb_.embeddings;
    clean.vocab_size = emb_.vocab_size;
    clean.dim = emb_.dim;
    rec.loss_clean = task_forward(g, batch, clean, nullptr, model_)->values[0];
  }

  if (virt_on) {
    renormalize(*emb_.passage_virtual, cfg_.sigma);
    renormalize(*emb_.question_virtual, cfg_.sigma);
    if (hooks.after_renormalize) {
      hooks.after_renormalize(*emb_.passage_virtual, *emb_.question_virtual);
    }
  }

  TensorPtr delta;
  if (local_on) {
    delta = init_delta(n_seqs, seq_len, cfg_.dim, cfg_.sigma,
                       mix_seed(cfg_.seed, 0x1000 + static_cast<std::uint64_t>(step_index)));
  }

  for (const auto& p : opt_params_) p->zero_grad();

  const auto ids = batch.all_ids();
  Tensor x_clean;
  std::vector<double> row_norms;
  if (local_on) x_clean = clean_embedding_values(*emb_.embeddings, ids);
  if (virt_on) row_norms = embedding_row_norms(*emb_.embeddings);

  for (int t = 1; t <= cfg_.adversarial_steps; ++t) {
    if (delta) delta->zero_grad();
    if (virt_on) {
      emb_.passage_virtual->zero_grad();
      emb_.question_virtual->zero_grad();
    }
    Graph g;
    TensorPtr loss = task_forward(g, batch, emb_, delta, model_);
    if (!std::isfinite(loss->values[0])) {
      throw std::runtime_error(cat("train_batch: non-finite loss at step ", step_index,
                                   ", inner step ", t, ", mode ", rec.mode, ", |E|=",
                                   emb_.embeddings->value_l2_norm()));
    }
    rec.loss_adv.push_back(loss->values[0]);
    g.backward(loss);

    if (delta) {
      if (cfg_.use_classic_pgd) {
        Tensor grad;
        grad.shape = delta->shape;
        grad.values = delta->grad;
        grad.grad.assign(delta->grad.size(), 0.0);
        pgd_update_classic(*delta, grad, cfg_.pgd_alpha, cfg_.pgd_eps_ball);
      } else {
        Tensor grad;
        grad.shape = delta->shape;
        grad.values = delta->grad;
        grad.grad.assign(delta->grad.size(), 0.0);
        update_delta(*delta, grad, x_clean, cfg_.eps_delta, cfg_.delta_norm_scope);
      }
    }
    if (virt_on) {
      Tensor gp;
      gp.shape = emb_.passage_virtual->shape;
      gp.values = emb_.passage_virtual->grad;
      gp.grad.assign(gp.values.size(), 0.0);
      update_virtual_rowwise(*emb_.passage_virtual, gp, row_norms, cfg_.eps_p);
      Tensor gq;
      gq.shape = emb_.question_virtual->shape;
      gq.values = emb_.question_virtual->grad;
      gq.grad.assign(gq.values.size(), 0.0);
      update_virtual_rowwise(*emb_.question_virtual, gq, row_norms, cfg_.eps_q);
    }
    if (hooks.after_inner_step) {
      hooks.after_inner_step(t, delta ? delta.get() : nullptr,
                             virt_on ? emb_.passage_virtual.get() : nullptr,
                             virt_on ? emb_.question_virtual.get() : nullptr);
    }
  }

  std::vector<std::vector<double>> grads;
  grads.reserve(opt_params_.size());
  for (const auto& p : opt_params_) grads.push_back(p->grad);
  if (cfg_.grad_accum == GradAccumMode::Mean && cfg_.adversarial_steps > 1) {
    const double inv_k = 1.0 / static_cast<double>(cfg_.adversarial_steps);
    for (auto& g : grads) {
      for (double& v : g) v *= inv_k;
    }
  }
  if (hooks.before_adam) hooks.before_adam(grads);

  adam_update(opt_params_, grads, adam_, lr_now, cfg_.beta1, cfg_.beta2, cfg_.adam_eps,
              cfg_.weight_decay);
  if (hooks.after_step) hooks.after_step(step_index);

  rec.wall_ms = now_ms() - t0;
  return rec;
}

double Trainer::lr_at(long step, long total_steps) const {
  if (total_steps <= 0) return cfg_.lr;
  const long warmup = static_cast<long>(cfg_.warmup_ratio * static_cast<double>(total_steps));
  if (warmup > 0 && step < warmup) {
    return cfg_.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  return cfg_.lr * static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warmup);
}

std::vector<MetricsRecord> Trainer::run(const Dataset& train_ds, const Dataset* eval_clean,
                                        const Dataset* eval_distractor, MetricsWriter* sink,
                                        const TrainHooks& hooks) {
  std::vector<MetricsRecord> records;
  const std::size_t n = train_ds.examples.size();
  if (n == 0) throw DataError("train: empty dataset");
  const long batches_per_epoch =
      static_cast<long>((n + cfg_.batch_size - 1) / cfg_.batch_size);
  const long total_steps = batches_per_epoch * static_cast<long>(cfg_.epochs);

  auto emit = [&](MetricsRecord rec) {
    if (sink) sink->write(rec);
    records.push_back(std::move(rec));
  };

  auto run_eval = [&](const Dataset& ds, const char* which, long step, std::size_t epoch) {
    const long t0 = now_ms();
    const EvalMetrics m = evaluate(model_, emb_, ds);
    MetricsRecord rec;
    rec.step = step;
    rec.epoch = epoch;
    rec.mode = train_mode_name(cfg_.mode());
    rec.loss_clean = m.mean_loss;
    rec.eval_set = which;
    if (ds.is_span()) {
      rec.em = m.em;
      rec.f1 = m.f1;
    } else {
      rec.acc = m.acc;
    }
    rec.wall_ms = now_ms() - t0;
    emit(std::move(rec));
  };

  long step = 0;
  for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    RandomStream shuffle_rs(mix_seed(cfg_.seed, 0xE000 + epoch));
    shuffle_rs.shuffle(order);
    for (std::size_t first = 0; first < n; first += cfg_.batch_size) {
      const std::size_t count = std::min(cfg_.batch_size, n - first);
      std::vector<std::size_t> idx(order.begin() + first, order.begin() + first + count);
      Batch batch = build_batch(train_ds, idx, model_.config.max_len);
      MetricsRecord rec = train_batch(batch, step, lr_at(step, total_steps), hooks);
      rec.epoch = epoch;
      emit(std::move(rec));
      ++step;
    }
    if (eval_clean) run_eval(*eval_clean, "clean", step, epoch);
    if (eval_distractor) run_eval(*eval_distractor, "distractor", step, epoch);
  }
  return records;
}

}  // namespace pqat
