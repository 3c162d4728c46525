// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <string>

#include "core/train.hpp"

namespace pqat {

// JSON-lines metrics sink. The first line is a header object carrying the
// full config, seed and dataset fingerprint; every following line is one
// record:
//   {"step":int,"epoch":int,"mode":str,"loss_clean":float,
//    "loss_adv":[float],"em":float|null,"f1":float|null,"acc":float|null,
//    "wall_ms":int}
// Evaluation records additionally carry "eval_set":"clean"|"distractor".
class MetricsWriter {
 public:
  MetricsWriter(const std::string& path, const TrainConfig& cfg,
                const std::string& dataset_sha256);
  void write(const MetricsRecord& rec);
  void flush();

 private:
  std::ofstream out_;
  std::string path_;
};

std::string metrics_record_json(const MetricsRecord& rec);
std::string train_config_json(const TrainConfig& cfg);

}  // namespace pqat
