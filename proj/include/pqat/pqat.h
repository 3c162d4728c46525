/* SPDX-License-Identifier: Apache-2.0
 *
 * C API for the PQAT training library: synthetic reading-comprehension
 * datasets, adversarial training with virtual passage/question perturbation
 * matrices, evaluation, and checkpoints.
 *
 * All functions return PQAT_OK on success. On failure they return an error
 * status and leave a human-readable message in pqat_last_error() (thread
 * local). Out-parameters are written only on success. Every handle returned
 * through an out-parameter must be released with the matching *_free call.
 */
#ifndef PQAT_PQAT_H
#define PQAT_PQAT_H

#include <stdint.h>

#if defined(_WIN32)
#define PQAT_API __declspec(dllexport)
#else
#define PQAT_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum pqat_status {
  PQAT_OK = 0,
  PQAT_ERROR_RUNTIME = 1, /* I/O failures, numerical aborts, internal errors */
  PQAT_ERROR_CONFIG = 2   /* invalid parameters or incompatible artifacts   */
} pqat_status;

/* Message describing the most recent failure on this thread. */
PQAT_API const char* pqat_last_error(void);

/* ------------------------------------------------------------------ */
/* Datasets                                                            */
/* ------------------------------------------------------------------ */

typedef struct pqat_dataset pqat_dataset;

/* Key-value retrieval passages with span answers. */
PQAT_API pqat_status pqat_gen_span_dataset(int64_t n_examples, int32_t n_pairs,
                                           int32_t vocab_size, uint64_t seed,
                                           pqat_dataset** out);

/* Same passages with n_options candidate answers, exactly one correct. */
PQAT_API pqat_status pqat_gen_choice_dataset(int64_t n_examples, int32_t n_pairs,
                                             int32_t n_options, int32_t vocab_size, uint64_t seed,
                                             pqat_dataset** out);

/* JSON-lines file plus "<path>.meta.json" companion. */
PQAT_API pqat_status pqat_dataset_save(const pqat_dataset* ds, const char* jsonl_path);
PQAT_API pqat_status pqat_dataset_load(const char* jsonl_path, pqat_dataset** out);

/* Copy of ds with one misleading (near-miss key, wrong value) pair appended
 * to every passage; labels unchanged. */
PQAT_API pqat_status pqat_dataset_with_distractors(const pqat_dataset* ds, uint64_t seed,
                                                   pqat_dataset** out);

PQAT_API int64_t pqat_dataset_size(const pqat_dataset* ds);
/* "span" or "choice". */
PQAT_API const char* pqat_dataset_task(const pqat_dataset* ds);
PQAT_API int32_t pqat_dataset_vocab_size(const pqat_dataset* ds);
/* Hex SHA-256 of the serialized dataset; buffer owned by the dataset. */
PQAT_API const char* pqat_dataset_content_hash(pqat_dataset* ds);
PQAT_API void pqat_dataset_free(pqat_dataset* ds);

/* ------------------------------------------------------------------ */
/* Training configuration                                              */
/* ------------------------------------------------------------------ */

typedef struct pqat_train_config {
  /* Perturbation strengths; a channel is active only while its strength is
   * positive. eps_delta: per-batch local perturbation. eps_p / eps_q:
   * virtual passage / question matrices. */
  double eps_delta;
  double eps_p;
  double eps_q;
  double sigma;             /* init scale for virtual matrices and delta */
  int32_t adversarial_steps; /* K */

  /* Classic projected-gradient variant of the local channel. */
  int32_t use_classic_pgd; /* 0/1 */
  double pgd_alpha;
  double pgd_eps_ball;

  double lr;
  double beta1;
  double beta2;
  double adam_eps;
  double weight_decay;
  double warmup_ratio;

  int64_t batch_size;
  int64_t epochs;
  uint64_t seed;
  int32_t grad_accum_mean;       /* 0: sum over the K inner steps, 1: mean */
  int32_t delta_norm_whole_batch; /* 0: per-example norms, 1: whole batch  */

  /* Model geometry. */
  int64_t dim;
  int64_t hidden;
  int64_t n_blocks;
  int32_t max_answer_len;

  /* Embedding init. */
  double embed_init_scale;
  double key_group_mix;
} pqat_train_config;

PQAT_API void pqat_train_config_defaults(pqat_train_config* cfg);
/* "baseline", "at", "pqat" or "combined" as implied by the strengths. */
PQAT_API const char* pqat_config_mode_name(const pqat_train_config* cfg);

/* ------------------------------------------------------------------ */
/* Training, evaluation, checkpoints                                   */
/* ------------------------------------------------------------------ */

typedef struct pqat_model pqat_model;

/* Trains a fresh model on train_ds. When metrics_jsonl_path is non-NULL a
 * metrics file is written (header line, then one record per step; per-epoch
 * evaluation records when eval sets are given). eval_clean/eval_distractor
 * may be NULL. */
PQAT_API pqat_status pqat_train(const pqat_dataset* train_ds, const pqat_dataset* eval_clean,
                                const pqat_dataset* eval_distractor,
                                const pqat_train_config* cfg, const char* metrics_jsonl_path,
                                pqat_model** out);

typedef struct pqat_metrics {
  double em;   /* span tasks; NaN otherwise   */
  double f1;   /* span tasks; NaN otherwise   */
  double acc;  /* choice tasks; NaN otherwise */
  double mean_loss;
  int64_t n_examples;
} pqat_metrics;

/* Inference-only evaluation; never touches the virtual matrices. */
PQAT_API pqat_status pqat_evaluate(const pqat_model* model, const pqat_dataset* ds,
                                   pqat_metrics* out);

/* Checkpoints carry the real embeddings and the model parameters only. */
PQAT_API pqat_status pqat_model_save(const pqat_model* model, const char* path);
PQAT_API pqat_status pqat_model_load(const char* path, pqat_model** out);
PQAT_API void pqat_model_free(pqat_model* model);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* PQAT_PQAT_H */
