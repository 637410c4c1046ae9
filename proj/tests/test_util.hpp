#pragma once

#include <filesystem>
#include <string>
#include <unistd.h>

#include "dmrl/nets.hpp"
#include "dmrl/rng.hpp"
#include "dmrl/synthdata.hpp"

namespace dmrl::testutil {

// Scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("dmrl_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string str() const { return path.string(); }
  std::string sub(const std::string& name) const { return (path / name).string(); }
};

// Desk-size model for unit tests: 16x16 inputs, two encoder stages.
inline ModelConfig tiny_model_config(EncMode mode = EncMode::kCondConv, int m = 2) {
  ModelConfig cfg;
  cfg.mode = mode;
  cfg.modalities = m;
  cfg.experts = 2;
  cfg.height = 16;
  cfg.width = 16;
  cfg.ea_widths = {8, 16};
  cfg.ea_bottleneck = 16;
  cfg.em_widths = {8, 16, 16};
  cfg.dec_widths = {16, 8};
  cfg.dec_seed_channels = 16;
  cfg.spade_hidden = 8;
  return cfg;
}

// Smallest differentiable setup for finite-difference oracles: 8x8 inputs.
inline ModelConfig micro_model_config(EncMode mode = EncMode::kCondConv, int m = 2) {
  ModelConfig cfg;
  cfg.mode = mode;
  cfg.modalities = m;
  cfg.experts = 2;
  cfg.height = 8;
  cfg.width = 8;
  cfg.ea_widths = {2, 4};
  cfg.ea_bottleneck = 4;
  cfg.em_widths = {2, 4};
  cfg.dec_widths = {4, 2};
  cfg.dec_seed_channels = 4;
  cfg.spade_hidden = 2;
  return cfg;
}

template <typename S>
Tensor<S> random_image(Index n, Index c, Index h, Index w, Rng& rng, double scale = 1.0) {
  Tensor<S> t({n, c, h, w});
  for (Index i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(scale * rng.normal());
  return t;
}

inline GenConfig tiny_gen_config(int subjects = 8, int m = 2) {
  GenConfig cfg;
  cfg.num_subjects = subjects;
  cfg.modalities = m;
  cfg.height = 32;
  cfg.width = 32;
  cfg.split_fractions = {0.5, 0.25, 0.25};
  cfg.seed = 21;
  return cfg;
}

}  // namespace dmrl::testutil
