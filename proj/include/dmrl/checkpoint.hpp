#pragma once

#include <map>
#include <memory>

#include "dmrl/config.hpp"
#include "dmrl/nets.hpp"

namespace dmrl {

// "DMRC" archive: magic, u32 version, u64 header length, JSON header with a
// tensor table, then back-to-back DMRT blobs.
struct Archive {
  json header;
  std::map<std::string, Tensor<float>> tensors;
};

void save_archive(const std::string& path, json header,
                  const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors);
Archive load_archive(const std::string& path);

// Model checkpoints carry all parameters and batch-norm buffers plus a header
// with mode/m/n/height/width, the full model config, and caller fields
// (epoch, config_hash, optimizer state as extra tensors, ...).
void save_model_checkpoint(const std::string& path, const Model<float>& model, json extra_header,
                           const std::vector<std::pair<std::string, const Tensor<float>*>>&
                               extra_tensors = {});

struct ModelCheckpoint {
  std::unique_ptr<Model<float>> model;
  json header;
  std::map<std::string, Tensor<float>> extra;  // tensors outside the model registry
};

ModelCheckpoint load_model_checkpoint(const std::string& path);

}  // namespace dmrl
