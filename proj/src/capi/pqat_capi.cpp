// SPDX-License-Identifier: Apache-2.0
#include "pqat/pqat.h"

#include <cmath>
#include <memory>
#include <string>

#include "core/common.hpp"
#include "core/data.hpp"
#include "core/metrics.hpp"
#include "core/model.hpp"
#include "core/train.hpp"

struct pqat_dataset {
  pqat::Dataset ds;
  std::string hash;  // cached for pqat_dataset_content_hash
};

struct pqat_model {
  pqat::ModelParams params;
  pqat::EmbeddingSet emb;
};

namespace {

thread_local std::string g_last_error;

pqat_status fail(pqat_status code, const std::string& message) {
  g_last_error = message;
  return code;
}

template <typename Fn>
pqat_status guarded(Fn&& fn) {
  try {
    fn();
    return PQAT_OK;
  } catch (const pqat::ConfigError& e) {
    return fail(PQAT_ERROR_CONFIG, e.what());
  } catch (const std::exception& e) {
    return fail(PQAT_ERROR_RUNTIME, e.what());
  }
}

pqat::TrainConfig to_core_config(const pqat_train_config& c) {
  pqat::TrainConfig cfg;
  cfg.eps_delta = c.eps_delta;
  cfg.eps_p = c.eps_p;
  cfg.eps_q = c.eps_q;
  cfg.sigma = c.sigma;
  cfg.adversarial_steps = c.adversarial_steps;
  cfg.use_classic_pgd = c.use_classic_pgd != 0;
  cfg.pgd_alpha = c.pgd_alpha;
  cfg.pgd_eps_ball = c.pgd_eps_ball;
  cfg.lr = c.lr;
  cfg.beta1 = c.beta1;
  cfg.beta2 = c.beta2;
  cfg.adam_eps = c.adam_eps;
  cfg.weight_decay = c.weight_decay;
  cfg.warmup_ratio = c.warmup_ratio;
  if (c.batch_size < 1) throw pqat::ConfigError("config: batch_size must be >= 1");
  cfg.batch_size = static_cast<std::size_t>(c.batch_size);
  if (c.epochs < 0) throw pqat::ConfigError("config: epochs must be non-negative");
  cfg.epochs = static_cast<std::size_t>(c.epochs);
  cfg.seed = c.seed;
  cfg.grad_accum = c.grad_accum_mean ? pqat::GradAccumMode::Mean : pqat::GradAccumMode::Sum;
  cfg.delta_norm_scope = c.delta_norm_whole_batch ? pqat::DeltaNormScope::WholeBatch
                                                  : pqat::DeltaNormScope::PerExample;
  if (c.dim < 1 || c.hidden < 1 || c.n_blocks < 1) {
    throw pqat::ConfigError("config: dim, hidden and n_blocks must be >= 1");
  }
  cfg.dim = static_cast<std::size_t>(c.dim);
  cfg.hidden = static_cast<std::size_t>(c.hidden);
  cfg.n_blocks = static_cast<std::size_t>(c.n_blocks);
  cfg.max_answer_len = c.max_answer_len;
  cfg.embed_init_scale = c.embed_init_scale;
  cfg.key_group_mix = c.key_group_mix;
  cfg.validate();
  return cfg;
}

}  // namespace

extern "C" {

const char* pqat_last_error(void) { return g_last_error.c_str(); }

pqat_status pqat_gen_span_dataset(int64_t n_examples, int32_t n_pairs, int32_t vocab_size,
                                  uint64_t seed, pqat_dataset** out) {
  if (!out) return fail(PQAT_ERROR_CONFIG, "gen_span_dataset: null out pointer");
  return guarded([&] {
    if (n_examples < 1 || n_pairs < 1 || vocab_size < 1) {
      throw pqat::ConfigError("gen_span_dataset: sizes must be positive");
    }
    auto* handle = new pqat_dataset{
        pqat::gen_kv_task(static_cast<std::size_t>(n_examples), static_cast<std::size_t>(n_pairs),
                          static_cast<std::size_t>(vocab_size), seed),
        {}};
    *out = handle;
  });
}

pqat_status pqat_gen_choice_dataset(int64_t n_examples, int32_t n_pairs, int32_t n_options,
                                    int32_t vocab_size, uint64_t seed, pqat_dataset** out) {
  if (!out) return fail(PQAT_ERROR_CONFIG, "gen_choice_dataset: null out pointer");
  return guarded([&] {
    if (n_examples < 1 || n_pairs < 1 || n_options < 2 || vocab_size < 1) {
      throw pqat::ConfigError("gen_choice_dataset: invalid sizes");
    }
    auto* handle = new pqat_dataset{
        pqat::gen_choice_task(static_cast<std::size_t>(n_examples),
                              static_cast<std::size_t>(n_pairs),
                              static_cast<std::size_t>(n_options),
                              static_cast<std::size_t>(vocab_size), seed),
        {}};
    *out = handle;
  });
}

pqat_status pqat_dataset_save(const pqat_dataset* ds, const char* jsonl_path) {
  if (!ds || !jsonl_path) return fail(PQAT_ERROR_CONFIG, "dataset_save: null argument");
  return guarded([&] { pqat::save_dataset(ds->ds, jsonl_path); });
}

pqat_status pqat_dataset_load(const char* jsonl_path, pqat_dataset** out) {
  if (!jsonl_path || !out) return fail(PQAT_ERROR_CONFIG, "dataset_load: null argument");
  return guarded([&] { *out = new pqat_dataset{pqat::load_dataset(jsonl_path), {}}; });
}

pqat_status pqat_dataset_with_distractors(const pqat_dataset* ds, uint64_t seed,
                                          pqat_dataset** out) {
  if (!ds || !out) return fail(PQAT_ERROR_CONFIG, "dataset_with_distractors: null argument");
  return guarded([&] { *out = new pqat_dataset{pqat::with_distractors(ds->ds, seed), {}}; });
}

int64_t pqat_dataset_size(const pqat_dataset* ds) {
  return ds ? static_cast<int64_t>(ds->ds.examples.size()) : 0;
}

const char* pqat_dataset_task(const pqat_dataset* ds) {
  if (!ds) return "";
  return ds->ds.meta.task.c_str();
}

int32_t pqat_dataset_vocab_size(const pqat_dataset* ds) {
  return ds ? static_cast<int32_t>(ds->ds.meta.vocab_size) : 0;
}

const char* pqat_dataset_content_hash(pqat_dataset* ds) {
  if (!ds) return "";
  if (ds->hash.empty()) ds->hash = pqat::dataset_content_hash(ds->ds);
  return ds->hash.c_str();
}

void pqat_dataset_free(pqat_dataset* ds) { delete ds; }

void pqat_train_config_defaults(pqat_train_config* cfg) {
  if (!cfg) return;
  pqat::TrainConfig d;
  cfg->eps_delta = d.eps_delta;
  cfg->eps_p = d.eps_p;
  cfg->eps_q = d.eps_q;
  cfg->sigma = d.sigma;
  cfg->adversarial_steps = d.adversarial_steps;
  cfg->use_classic_pgd = d.use_classic_pgd ? 1 : 0;
  cfg->pgd_alpha = d.pgd_alpha;
  cfg->pgd_eps_ball = d.pgd_eps_ball;
  cfg->lr = d.lr;
  cfg->beta1 = d.beta1;
  cfg->beta2 = d.beta2;
  cfg->adam_eps = d.adam_eps;
  cfg->weight_decay = d.weight_decay;
  cfg->warmup_ratio = d.warmup_ratio;
  cfg->batch_size = static_cast<int64_t>(d.batch_size);
  cfg->epochs = static_cast<int64_t>(d.epochs);
  cfg->seed = d.seed;
  cfg->grad_accum_mean = d.grad_accum == pqat::GradAccumMode::Mean ? 1 : 0;
  cfg->delta_norm_whole_batch = d.delta_norm_scope == pqat::DeltaNormScope::WholeBatch ? 1 : 0;
  cfg->dim = static_cast<int64_t>(d.dim);
  cfg->hidden = static_cast<int64_t>(d.hidden);
  cfg->n_blocks = static_cast<int64_t>(d.n_blocks);
  cfg->max_answer_len = d.max_answer_len;
  cfg->embed_init_scale = d.embed_init_scale;
  cfg->key_group_mix = d.key_group_mix;
}

const char* pqat_config_mode_name(const pqat_train_config* cfg) {
  if (!cfg) return "";
  try {
    return pqat::train_mode_name(to_core_config(*cfg).mode());
  } catch (const std::exception&) {
    return "";
  }
}

pqat_status pqat_train(const pqat_dataset* train_ds, const pqat_dataset* eval_clean,
                       const pqat_dataset* eval_distractor, const pqat_train_config* cfg,
                       const char* metrics_jsonl_path, pqat_model** out) {
  if (!train_ds || !cfg || !out) return fail(PQAT_ERROR_CONFIG, "train: null argument");
  return guarded([&] {
    pqat::TrainConfig core_cfg = to_core_config(*cfg);
    pqat::Trainer trainer(train_ds->ds, core_cfg);
    std::unique_ptr<pqat::MetricsWriter> sink;
    if (metrics_jsonl_path) {
      sink = std::make_unique<pqat::MetricsWriter>(metrics_jsonl_path, core_cfg,
                                                   pqat::dataset_content_hash(train_ds->ds));
    }
    trainer.run(train_ds->ds, eval_clean ? &eval_clean->ds : nullptr,
                eval_distractor ? &eval_distractor->ds : nullptr, sink.get());
    auto* handle = new pqat_model{trainer.model(), trainer.emb()};
    // The handle keeps only what inference needs.
    handle->emb.passage_virtual.reset();
    handle->emb.question_virtual.reset();
    *out = handle;
  });
}

pqat_status pqat_evaluate(const pqat_model* model, const pqat_dataset* ds, pqat_metrics* out) {
  if (!model || !ds || !out) return fail(PQAT_ERROR_CONFIG, "evaluate: null argument");
  return guarded([&] {
    if (model->emb.vocab_size != ds->ds.meta.vocab_size) {
      throw pqat::ConfigError(pqat::cat("evaluate: checkpoint vocabulary (", model->emb.vocab_size,
                                        ") does not match dataset vocabulary (",
                                        ds->ds.meta.vocab_size, ")"));
    }
    const pqat::EvalMetrics m = pqat::evaluate(model->params, model->emb, ds->ds);
    const bool span = ds->ds.is_span();
    out->em = span ? m.em : std::nan("");
    out->f1 = span ? m.f1 : std::nan("");
    out->acc = span ? std::nan("") : m.acc;
    out->mean_loss = m.mean_loss;
    out->n_examples = static_cast<int64_t>(m.n);
  });
}

pqat_status pqat_model_save(const pqat_model* model, const char* path) {
  if (!model || !path) return fail(PQAT_ERROR_CONFIG, "model_save: null argument");
  return guarded([&] { pqat::save_checkpoint(path, model->params, model->emb); });
}

pqat_status pqat_model_load(const char* path, pqat_model** out) {
  if (!path || !out) return fail(PQAT_ERROR_CONFIG, "model_load: null argument");
  return guarded([&] {
    pqat::Checkpoint ck = pqat::load_checkpoint(path);
    *out = new pqat_model{std::move(ck.params), std::move(ck.emb)};
  });
}

void pqat_model_free(pqat_model* model) { delete model; }

}  // extern "C"
