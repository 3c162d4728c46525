// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Talks to the library exclusively through the C API
// in pqat/pqat.h. Subcommands: gen, train, eval, compare.
// Exit codes: 0 success, 1 runtime failure, 2 config error.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pqat/pqat.h"

namespace {

using ordered_json = nlohmann::ordered_json;

// Distractor evaluation uses one fixed seed so every --distractor run sees
// the same injected pairs.
constexpr uint64_t kDistractorEvalSeed = 20177;

struct DatasetDeleter {
  void operator()(pqat_dataset* d) const { pqat_dataset_free(d); }
};
struct ModelDeleter {
  void operator()(pqat_model* m) const { pqat_model_free(m); }
};
using DatasetPtr = std::unique_ptr<pqat_dataset, DatasetDeleter>;
using ModelPtr = std::unique_ptr<pqat_model, ModelDeleter>;

[[noreturn]] void die(pqat_status st) {
  std::cerr << "error: " << pqat_last_error() << "\n";
  std::exit(st == PQAT_ERROR_CONFIG ? 2 : 1);
}

void check(pqat_status st) {
  if (st != PQAT_OK) die(st);
}

DatasetPtr load_dataset_or_die(const std::string& path) {
  pqat_dataset* raw = nullptr;
  check(pqat_dataset_load(path.c_str(), &raw));
  return DatasetPtr(raw);
}

struct ConfigFlags {
  pqat_train_config cfg{};
  std::string grad_accum = "sum";
  std::string delta_norm_scope = "per_example";

  void attach(CLI::App* cmd) {
    pqat_train_config_defaults(&cfg);
    cmd->add_option("--eps-delta", cfg.eps_delta, "Local perturbation strength");
    cmd->add_option("--eps-p", cfg.eps_p, "Passage-matrix perturbation strength");
    cmd->add_option("--eps-q", cfg.eps_q, "Question-matrix perturbation strength");
    cmd->add_option("--sigma", cfg.sigma, "Init scale for virtual matrices and delta");
    cmd->add_option("--adversarial-steps,-K", cfg.adversarial_steps, "Inner ascent steps");
    cmd->add_flag("--use-classic-pgd", cfg.use_classic_pgd,
                  "Projected-gradient local updates (needs --pgd-alpha/--pgd-eps-ball)");
    cmd->add_option("--pgd-alpha", cfg.pgd_alpha, "Classic PGD step size");
    cmd->add_option("--pgd-eps-ball", cfg.pgd_eps_ball, "Classic PGD projection radius");
    cmd->add_option("--lr", cfg.lr, "Peak learning rate");
    cmd->add_option("--beta1", cfg.beta1, "Adam beta1");
    cmd->add_option("--beta2", cfg.beta2, "Adam beta2");
    cmd->add_option("--adam-eps", cfg.adam_eps, "Adam epsilon");
    cmd->add_option("--weight-decay", cfg.weight_decay, "Decoupled weight decay");
    cmd->add_option("--warmup-ratio", cfg.warmup_ratio, "Linear warmup fraction");
    cmd->add_option("--batch-size", cfg.batch_size, "Examples per step");
    cmd->add_option("--epochs", cfg.epochs, "Training epochs");
    cmd->add_option("--seed", cfg.seed, "Run seed");
    cmd->add_option("--grad-accum", grad_accum, "Inner-loop gradient accumulation: sum|mean");
    cmd->add_option("--delta-norm-scope", delta_norm_scope,
                    "Norm scope for the delta update: per_example|whole_batch");
    cmd->add_option("--dim", cfg.dim, "Embedding dimension");
    cmd->add_option("--hidden", cfg.hidden, "Feed-forward width");
    cmd->add_option("--n-blocks", cfg.n_blocks, "Encoder blocks");
    cmd->add_option("--max-answer-len", cfg.max_answer_len, "Span decoder answer-length cap");
    cmd->add_option("--embed-init-scale", cfg.embed_init_scale, "Embedding init scale");
    cmd->add_option("--key-group-mix", cfg.key_group_mix,
                    "Within-group correlation of key embeddings at init");
  }

  pqat_train_config resolve() {
    if (grad_accum == "sum") {
      cfg.grad_accum_mean = 0;
    } else if (grad_accum == "mean") {
      cfg.grad_accum_mean = 1;
    } else {
      std::cerr << "error: --grad-accum must be sum or mean\n";
      std::exit(2);
    }
    if (delta_norm_scope == "per_example") {
      cfg.delta_norm_whole_batch = 0;
    } else if (delta_norm_scope == "whole_batch") {
      cfg.delta_norm_whole_batch = 1;
    } else {
      std::cerr << "error: --delta-norm-scope must be per_example or whole_batch\n";
      std::exit(2);
    }
    return cfg;
  }
};

ordered_json config_json(const pqat_train_config& c) {
  ordered_json j;
  j["eps_delta"] = c.eps_delta;
  j["eps_p"] = c.eps_p;
  j["eps_q"] = c.eps_q;
  j["sigma"] = c.sigma;
  j["adversarial_steps"] = c.adversarial_steps;
  j["use_classic_pgd"] = c.use_classic_pgd != 0;
  j["pgd_alpha"] = c.pgd_alpha;
  j["pgd_eps_ball"] = c.pgd_eps_ball;
  j["lr"] = c.lr;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_eps"] = c.adam_eps;
  j["weight_decay"] = c.weight_decay;
  j["warmup_ratio"] = c.warmup_ratio;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["seed"] = c.seed;
  j["grad_accum"] = c.grad_accum_mean ? "mean" : "sum";
  j["delta_norm_scope"] = c.delta_norm_whole_batch ? "whole_batch" : "per_example";
  j["dim"] = c.dim;
  j["hidden"] = c.hidden;
  j["n_blocks"] = c.n_blocks;
  j["max_answer_len"] = c.max_answer_len;
  j["embed_init_scale"] = c.embed_init_scale;
  j["key_group_mix"] = c.key_group_mix;
  return j;
}

ordered_json metrics_json(const pqat_metrics& m, bool span) {
  ordered_json j;
  j["em"] = span ? ordered_json(m.em) : ordered_json(nullptr);
  j["f1"] = span ? ordered_json(m.f1) : ordered_json(nullptr);
  j["acc"] = span ? ordered_json(nullptr) : ordered_json(m.acc);
  j["mean_loss"] = m.mean_loss;
  j["n_examples"] = m.n_examples;
  return j;
}

void print_metrics(const std::string& label, const pqat_metrics& m, bool span) {
  if (span) {
    std::printf("%-12s em=%.4f f1=%.4f loss=%.4f n=%lld\n", label.c_str(), m.em, m.f1, m.mean_loss,
                static_cast<long long>(m.n_examples));
  } else {
    std::printf("%-12s acc=%.4f loss=%.4f n=%lld\n", label.c_str(), m.acc, m.mean_loss,
                static_cast<long long>(m.n_examples));
  }
}

int cmd_gen(const std::string& task, int64_t n, int32_t n_pairs, int32_t n_options,
            int32_t vocab_size, uint64_t seed, const std::string& out_path) {
  pqat_dataset* raw = nullptr;
  if (task == "span") {
    check(pqat_gen_span_dataset(n, n_pairs, vocab_size, seed, &raw));
  } else {
    check(pqat_gen_choice_dataset(n, n_pairs, n_options, vocab_size, seed, &raw));
  }
  DatasetPtr ds(raw);
  check(pqat_dataset_save(ds.get(), out_path.c_str()));
  std::printf("wrote %lld %s examples to %s\n", static_cast<long long>(pqat_dataset_size(ds.get())),
              task.c_str(), out_path.c_str());
  return 0;
}

int cmd_train(ConfigFlags& flags, const std::string& data_path, const std::string& eval_path,
              const std::string& out_dir) {
  const pqat_train_config cfg = flags.resolve();
  DatasetPtr train_ds = load_dataset_or_die(data_path);
  DatasetPtr eval_ds;
  DatasetPtr eval_distractor;
  if (!eval_path.empty()) {
    eval_ds = load_dataset_or_die(eval_path);
    pqat_dataset* raw = nullptr;
    check(pqat_dataset_with_distractors(eval_ds.get(), kDistractorEvalSeed, &raw));
    eval_distractor.reset(raw);
  }
  const std::string metrics_path = out_dir + "/metrics.jsonl";
  const std::string ckpt_path = out_dir + "/checkpoint.json";
  pqat_model* raw_model = nullptr;
  check(pqat_train(train_ds.get(), eval_ds.get(), eval_distractor.get(), &cfg,
                   metrics_path.c_str(), &raw_model));
  ModelPtr model(raw_model);
  check(pqat_model_save(model.get(), ckpt_path.c_str()));
  std::printf("mode=%s checkpoint=%s metrics=%s\n", pqat_config_mode_name(&cfg),
              ckpt_path.c_str(), metrics_path.c_str());
  if (eval_ds) {
    const bool span = std::string(pqat_dataset_task(eval_ds.get())) == "span";
    pqat_metrics m{};
    check(pqat_evaluate(model.get(), eval_ds.get(), &m));
    print_metrics("clean", m, span);
    pqat_metrics md{};
    check(pqat_evaluate(model.get(), eval_distractor.get(), &md));
    print_metrics("distractor", md, span);
  }
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path, bool distractor,
             const std::string& out_path) {
  pqat_model* raw_model = nullptr;
  check(pqat_model_load(ckpt_path.c_str(), &raw_model));
  ModelPtr model(raw_model);
  DatasetPtr ds = load_dataset_or_die(data_path);
  if (distractor) {
    pqat_dataset* raw = nullptr;
    check(pqat_dataset_with_distractors(ds.get(), kDistractorEvalSeed, &raw));
    ds.reset(raw);
  }
  const bool span = std::string(pqat_dataset_task(ds.get())) == "span";
  pqat_metrics m{};
  check(pqat_evaluate(model.get(), ds.get(), &m));
  print_metrics(distractor ? "distractor" : "clean", m, span);
  if (!out_path.empty()) {
    ordered_json j;
    j["checkpoint"] = ckpt_path;
    j["dataset"] = data_path;
    j["dataset_sha256"] = pqat_dataset_content_hash(ds.get());
    j["distractor"] = distractor;
    j["metrics"] = metrics_json(m, span);
    std::ofstream out(out_path);
    if (!out) {
      std::cerr << "error: cannot write " << out_path << "\n";
      return 1;
    }
    out << j.dump(2) << "\n";
  }
  return 0;
}

struct Aggregate {
  double mean = 0.0;
  double stddev = 0.0;  // population
};

Aggregate aggregate(const std::vector<double>& xs) {
  Aggregate a;
  if (xs.empty()) return a;
  for (double x : xs) a.mean += x;
  a.mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - a.mean) * (x - a.mean);
  a.stddev = std::sqrt(var / static_cast<double>(xs.size()));
  return a;
}

int cmd_compare(ConfigFlags& flags, const std::string& data_path, const std::string& eval_path,
                std::vector<std::string> modes, std::vector<uint64_t> seeds,
                const std::string& out_dir) {
  if (seeds.size() < 2) {
    std::cerr << "error: --seeds needs at least 2 entries\n";
    return 2;
  }
  const pqat_train_config base_cfg = flags.resolve();
  DatasetPtr train_ds = load_dataset_or_die(data_path);
  DatasetPtr eval_ds = load_dataset_or_die(eval_path);
  pqat_dataset* raw = nullptr;
  check(pqat_dataset_with_distractors(eval_ds.get(), kDistractorEvalSeed, &raw));
  DatasetPtr eval_distractor(raw);
  const bool span = std::string(pqat_dataset_task(eval_ds.get())) == "span";

  ordered_json summary;
  summary["dataset"] = data_path;
  summary["eval_dataset"] = eval_path;
  summary["dataset_sha256"] = pqat_dataset_content_hash(train_ds.get());
  summary["seeds"] = seeds;
  summary["config"] = config_json(base_cfg);
  summary["modes"] = ordered_json::object();

  bool any_failed = false;
  const std::string key = span ? "em" : "acc";
  std::printf("%-10s %-6s %16s %16s\n", "mode", "seeds", (key + " clean").c_str(),
              (key + " distractor").c_str());
  for (const std::string& mode : modes) {
    pqat_train_config cfg = base_cfg;
    if (mode == "baseline") {
      cfg.eps_delta = 0.0;
      cfg.eps_p = 0.0;
      cfg.eps_q = 0.0;
    } else if (mode == "at") {
      cfg.eps_p = 0.0;
      cfg.eps_q = 0.0;
      if (cfg.eps_delta <= 0.0) cfg.eps_delta = 1e-2;
    } else if (mode == "pqat") {
      cfg.eps_delta = 0.0;
      if (cfg.eps_p <= 0.0) cfg.eps_p = 2e-2;
      if (cfg.eps_q <= 0.0) cfg.eps_q = 2e-2;
    } else if (mode == "combined") {
      if (cfg.eps_delta <= 0.0) cfg.eps_delta = 1e-2;
      if (cfg.eps_p <= 0.0) cfg.eps_p = 2e-2;
      if (cfg.eps_q <= 0.0) cfg.eps_q = 2e-2;
    } else {
      std::cerr << "error: unknown mode \"" << mode
                << "\" (expected baseline, at, pqat or combined)\n";
      return 2;
    }

    std::vector<double> clean_vals, distractor_vals;
    ordered_json per_seed = ordered_json::array();
    for (uint64_t seed : seeds) {
      pqat_train_config run_cfg = cfg;
      run_cfg.seed = seed;
      const std::string metrics_path =
          out_dir + "/" + mode + "_seed" + std::to_string(seed) + ".metrics.jsonl";
      pqat_model* raw_model = nullptr;
      const pqat_status st = pqat_train(train_ds.get(), nullptr, nullptr, &run_cfg,
                                        metrics_path.c_str(), &raw_model);
      if (st != PQAT_OK) {
        std::cerr << "error: " << mode << " seed " << seed << ": " << pqat_last_error() << "\n";
        any_failed = true;
        continue;
      }
      ModelPtr model(raw_model);
      pqat_metrics mc{}, md{};
      check(pqat_evaluate(model.get(), eval_ds.get(), &mc));
      check(pqat_evaluate(model.get(), eval_distractor.get(), &md));
      const double clean = span ? mc.em : mc.acc;
      const double hard = span ? md.em : md.acc;
      clean_vals.push_back(clean);
      distractor_vals.push_back(hard);
      ordered_json sj;
      sj["seed"] = seed;
      sj["clean"] = metrics_json(mc, span);
      sj["distractor"] = metrics_json(md, span);
      per_seed.push_back(sj);
    }
    const Aggregate ac = aggregate(clean_vals);
    const Aggregate ad = aggregate(distractor_vals);
    std::printf("%-10s %-6zu %9.4f (%.4f) %9.4f (%.4f)\n", mode.c_str(), clean_vals.size(),
                ac.mean, ac.stddev, ad.mean, ad.stddev);
    ordered_json mj;
    mj["runs"] = per_seed;
    mj[key + "_clean_mean"] = ac.mean;
    mj[key + "_clean_std"] = ac.stddev;
    mj[key + "_distractor_mean"] = ad.mean;
    mj[key + "_distractor_std"] = ad.stddev;
    mj["complete"] = per_seed.size() == seeds.size();
    summary["modes"][mode] = mj;
  }
  summary["complete"] = !any_failed;

  const std::string summary_path = out_dir + "/compare.json";
  std::ofstream out(summary_path);
  if (!out) {
    std::cerr << "error: cannot write " << summary_path << "\n";
    return 1;
  }
  out << summary.dump(2) << "\n";
  std::printf("summary: %s\n", summary_path.c_str());
  return any_failed ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial training for synthetic reading comprehension"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a dataset (JSON lines + metadata)");
  std::string gen_task = "span";
  int64_t gen_n = 2000;
  int32_t gen_pairs = 4, gen_options = 4, gen_vocab = 51;
  uint64_t gen_seed = 7;
  std::string gen_out = "data.jsonl";
  gen->add_option("--task", gen_task, "span|choice")->check(CLI::IsMember({"span", "choice"}));
  gen->add_option("--n", gen_n, "Number of examples");
  gen->add_option("--n-pairs", gen_pairs, "Key-value pairs per passage");
  gen->add_option("--m,--n-options", gen_options, "Options per example (choice task)");
  gen->add_option("--vocab-size", gen_vocab, "Total vocabulary size");
  gen->add_option("--seed", gen_seed, "Generation seed");
  gen->add_option("--out", gen_out, "Output JSONL path")->required();

  // train
  auto* train = app.add_subcommand("train", "Train a model and write checkpoint + metrics");
  ConfigFlags train_flags;
  std::string train_data, train_eval, train_out = ".";
  train->add_option("--data", train_data, "Training dataset (JSONL)")->required();
  train->add_option("--eval", train_eval, "Optional evaluation dataset");
  train->add_option("--out-dir", train_out, "Output directory");
  train_flags.attach(train);

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  std::string eval_ckpt, eval_data, eval_out;
  bool eval_distractor = false;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint path")->required();
  eval->add_option("--data", eval_data, "Dataset path")->required();
  eval->add_flag("--distractor", eval_distractor, "Inject distractors before evaluating");
  eval->add_option("--out", eval_out, "Also write metrics JSON here");

  // compare
  auto* compare = app.add_subcommand("compare", "Train several modes across seeds and summarize");
  ConfigFlags compare_flags;
  std::string cmp_data, cmp_eval, cmp_out = ".";
  std::vector<std::string> cmp_modes = {"baseline", "at", "pqat"};
  std::vector<uint64_t> cmp_seeds = {1, 2, 3, 4};
  compare->add_option("--data", cmp_data, "Training dataset")->required();
  compare->add_option("--eval", cmp_eval, "Evaluation dataset")->required();
  compare->add_option("--modes", cmp_modes, "Modes to run");
  compare->add_option("--seeds", cmp_seeds, "Seeds (>= 2)");
  compare->add_option("--out-dir", cmp_out, "Output directory");
  compare_flags.attach(compare);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      return cmd_gen(gen_task, gen_n, gen_pairs, gen_options, gen_vocab, gen_seed, gen_out);
    }
    if (train->parsed()) return cmd_train(train_flags, train_data, train_eval, train_out);
    if (eval->parsed()) return cmd_eval(eval_ckpt, eval_data, eval_distractor, eval_out);
    if (compare->parsed()) {
      return cmd_compare(compare_flags, cmp_data, cmp_eval, cmp_modes, cmp_seeds, cmp_out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
