// SPDX-License-Identifier: Apache-2.0
#include "core/metrics.hpp"

#include <stdexcept>

#include <json.hpp>

namespace pqat {

using ordered_json = nlohmann::ordered_json;

namespace {

ordered_json config_to_json(const TrainConfig& cfg) {
  ordered_json j;
  j["eps_delta"] = cfg.eps_delta;
  j["eps_p"] = cfg.eps_p;
  j["eps_q"] = cfg.eps_q;
  j["sigma"] = cfg.sigma;
  j["adversarial_steps"] = cfg.adversarial_steps;
  j["use_classic_pgd"] = cfg.use_classic_pgd;
  j["pgd_alpha"] = cfg.pgd_alpha;
  j["pgd_eps_ball"] = cfg.pgd_eps_ball;
  j["lr"] = cfg.lr;
  j["beta1"] = cfg.beta1;
  j["beta2"] = cfg.beta2;
  j["adam_eps"] = cfg.adam_eps;
  j["weight_decay"] = cfg.weight_decay;
  j["warmup_ratio"] = cfg.warmup_ratio;
  j["batch_size"] = cfg.batch_size;
  j["epochs"] = cfg.epochs;
  j["seed"] = cfg.seed;
  j["grad_accum"] = cfg.grad_accum == GradAccumMode::Sum ? "sum" : "mean";
  j["delta_norm_scope"] =
      cfg.delta_norm_scope == DeltaNormScope::PerExample ? "per_example" : "whole_batch";
  j["dim"] = cfg.dim;
  j["hidden"] = cfg.hidden;
  j["n_blocks"] = cfg.n_blocks;
  j["max_answer_len"] = cfg.max_answer_len;
  j["embed_init_scale"] = cfg.embed_init_scale;
  j["key_group_mix"] = cfg.key_group_mix;
  return j;
}

}  // namespace

std::string train_config_json(const TrainConfig& cfg) { return config_to_json(cfg).dump(); }

std::string metrics_record_json(const MetricsRecord& rec) {
  ordered_json j;
  j["step"] = rec.step;
  j["epoch"] = rec.epoch;
  j["mode"] = rec.mode;
  j["loss_clean"] = rec.loss_clean;
  j["loss_adv"] = rec.loss_adv;
  j["em"] = rec.em ? ordered_json(*rec.em) : ordered_json(nullptr);
  j["f1"] = rec.f1 ? ordered_json(*rec.f1) : ordered_json(nullptr);
  j["acc"] = rec.acc ? ordered_json(*rec.acc) : ordered_json(nullptr);
  j["wall_ms"] = rec.wall_ms;
  if (!rec.eval_set.empty()) j["eval_set"] = rec.eval_set;
  return j.dump();
}

MetricsWriter::MetricsWriter(const std::string& path, const TrainConfig& cfg,
                             const std::string& dataset_sha256)
    : out_(path), path_(path) {
  if (!out_) throw std::runtime_error("MetricsWriter: cannot write " + path);
  ordered_json header;
  header["type"] = "header";
  header["mode"] = train_mode_name(cfg.mode());
  header["seed"] = cfg.seed;
  header["dataset_sha256"] = dataset_sha256;
  header["config"] = ordered_json::parse(train_config_json(cfg));
  out_ << header.dump() << "\n";
}

void MetricsWriter::write(const MetricsRecord& rec) {
  out_ << metrics_record_json(rec) << "\n";
  if (!out_) throw std::runtime_error("MetricsWriter: write failed for " + path_);
}

void MetricsWriter::flush() { out_.flush(); }

}  // namespace pqat
