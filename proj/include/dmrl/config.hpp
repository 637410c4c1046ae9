#pragma once

#include <json.hpp>

#include "dmrl/nets.hpp"
#include "dmrl/objectives.hpp"
#include "dmrl/synthdata.hpp"

namespace dmrl {

using json = nlohmann::json;

struct TrainConfig {
  std::string dataset;
  std::string run_dir;  // empty -> runs/<timestamp>-<hash8>
  int epochs = 50;
  int batch_subjects = 8;
  double lr = 2e-4;
  double weight_decay = 1e-5;
  double grad_clip = 5.0;
  std::uint64_t seed = 1;
  int eval_every = 10;
  bool augment_flip = true;
  std::string variant = "sim";  // "na" disables the similarity terms
  LossWeights loss;
  ModelConfig model;
};

struct TaskConfig {
  std::string task = "segmentation";  // segmentation | synthesis
  int target_class = -1;              // -1 -> lesion class (K-1)
  int target_modality = -1;           // -1 -> modality m-1 (synthesis)
  std::string input_mode = "fused";   // fused | raw-stack
  std::string missing_fill = "none";  // none | zero | average (raw-stack eval)
  double dropout_p = 0.3;
  int epochs = 30;
  int batch_subjects = 8;
  double lr = 2e-4;
  double weight_decay = 0.0;
  std::uint64_t seed = 1;
  int base_width = 16;
  std::string dataset;
  std::string encoder_ckpt;
  std::string run_dir;
};

json parse_json_file(const std::string& path);

// Canonical text (sorted keys, shortest float round-trip) and its hash;
// reordering keys in the source document does not change the hash.
std::string canonical_dump(const json& j);
std::string config_hash(const json& merged);
inline std::string config_hash8(const json& merged) { return config_hash(merged).substr(0, 8); }

// Hash of the semantic configuration: output locations (run_dir) are not
// part of a run's identity.
std::string run_config_hash(json merged);

json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const json& j);

json loss_weights_to_json(const LossWeights& w);
LossWeights loss_weights_from_json(const json& j);

json gen_config_to_json(const GenConfig& c);
json train_config_to_json(const TrainConfig& c);
json task_config_to_json(const TaskConfig& c);

// Parses with defaults applied; rejects unknown keys, listing every
// offending key path in the error message.
GenConfig gen_config_from_json(const json& j);
TrainConfig train_config_from_json(const json& j);
TaskConfig task_config_from_json(const json& j);

std::string make_run_dir_name(const std::string& hash8);

}  // namespace dmrl
