// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "core/data.hpp"
#include "core/model.hpp"
#include "core/perturb.hpp"

namespace pqat {

enum class TrainMode { Baseline, StandardAt, Pqat, Combined };
const char* train_mode_name(TrainMode mode);

enum class GradAccumMode { Sum, Mean };

struct TrainConfig {
  // Perturbation strengths. A channel is active only while its strength is
  // positive: eps_delta drives the per-batch local perturbation, eps_p /
  // eps_q the virtual matrices. All zero recovers plain supervised training.
  double eps_delta = 0.0;
  double eps_p = 0.0;
  double eps_q = 0.0;
  double sigma = 1e-2;       // init scale for the virtual matrices and delta
  int adversarial_steps = 2; // K

  // Classic projected-gradient alternative for the local channel: normalized
  // steps of size pgd_alpha projected onto the eps-ball, replacing the
  // norm-matched update.
  bool use_classic_pgd = false;
  double pgd_alpha = 0.0;
  double pgd_eps_ball = 0.0;

  // Optimizer (decoupled weight decay) and schedule.
  double lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double warmup_ratio = 0.1;  // linear warmup, then linear decay

  std::size_t batch_size = 32;
  std::size_t epochs = 3;
  std::uint64_t seed = 1;
  GradAccumMode grad_accum = GradAccumMode::Sum;
  DeltaNormScope delta_norm_scope = DeltaNormScope::PerExample;

  // Model geometry.
  std::size_t dim = 32;
  std::size_t hidden = 128;
  std::size_t n_blocks = 1;
  int max_answer_len = 8;

  // Embedding init: N(0, scale^2) with key tokens group-correlated by
  // key_group_mix (gives near-miss keys real distracting power).
  double embed_init_scale = 0.1;
  double key_group_mix = 0.8;

  void validate() const;
  bool local_channel_enabled() const;
  bool virtual_channel_enabled() const { return eps_p > 0.0 || eps_q > 0.0; }
  TrainMode mode() const;
};

struct AdamState {
  std::vector<std::vector<double>> m1, m2;
  long step = 0;
  void init(const std::vector<TensorPtr>& params);
};

// Bias-corrected Adam step from explicit gradients, then decoupled weight
// decay p -= lr * wd * p applied separately from the moment step.
void adam_update(const std::vector<TensorPtr>& params,
                 const std::vector<std::vector<double>>& grads, AdamState& state, double lr,
                 double beta1, double beta2, double eps, double weight_decay);

struct MetricsRecord {
  long step = 0;
  std::size_t epoch = 0;
  std::string mode;
  double loss_clean = 0.0;
  std::vector<double> loss_adv;  // one entry per inner step
  std::optional<double> em, f1, acc;
  long wall_ms = 0;
  std::string eval_set;  // "", "clean" or "distractor"
};

struct EvalMetrics {
  double em = 0.0;
  double f1 = 0.0;
  double acc = 0.0;
  double mean_loss = 0.0;
  std::size_t n = 0;
};

// Inference-only evaluation: the forward pass reads the real embeddings and
// the model parameters, never the virtual matrices or any gradient buffer.
EvalMetrics evaluate(const ModelParams& model, const EmbeddingSet& emb, const Dataset& ds,
                     std::size_t batch_size = 64);

// Test/inspection hooks into the training loop. All optional.
struct TrainHooks {
  std::function<void(const Tensor& p, const Tensor& q)> after_renormalize;
  std::function<void(int inner_step, const Tensor* delta, const Tensor* p, const Tensor* q)>
      after_inner_step;
  std::function<void(const std::vector<std::vector<double>>& grad_accum)> before_adam;
  std::function<void(long step)> after_step;
};

class MetricsWriter;

class Trainer {
 public:
  Trainer(const Dataset& train_ds, const TrainConfig& cfg);

  // One optimizer step on one batch: renormalize the virtual matrices,
  // re-init the local perturbation, run the K-step inner loop (forward,
  // single backward, perturbation updates, parameter-gradient accumulation),
  // then one Adam update from the accumulated gradient.
  MetricsRecord train_batch(const Batch& batch, long step_index, double lr_now,
                            const TrainHooks& hooks = {});

  // Full run: epochs x shuffled batches with the warmup/decay schedule,
  // optional per-epoch evaluation, metrics streamed to `sink` when given.
  std::vector<MetricsRecord> run(const Dataset& train_ds, const Dataset* eval_clean,
                                 const Dataset* eval_distractor, MetricsWriter* sink = nullptr,
                                 const TrainHooks& hooks = {});

  double lr_at(long step, long total_steps) const;

  ModelParams& model() { return model_; }
  const ModelParams& model() const { return model_; }
  EmbeddingSet& emb() { return emb_; }
  const EmbeddingSet& emb() const { return emb_; }
  const TrainConfig& config() const { return cfg_; }
  const std::vector<TensorPtr>& opt_params() const { return opt_params_; }

 private:
  TrainConfig cfg_;
  ModelParams model_;
  EmbeddingSet emb_;
  std::vector<TensorPtr> opt_params_;  // E first, then model parameters
  AdamState adam_;
};

}  // namespace pqat
