#pragma once

#include <string>
#include <vector>

#include "dmrl/rng.hpp"
#include "dmrl/tensor.hpp"

namespace dmrl {

// Synthetic multi-modal dataset: anatomy (a nested-blob label map) is shared
// across a subject's modalities, appearance (per-class intensity tables,
// bias field, noise) is shared across subjects of a modality.

struct LabelMap {
  Index height = 0;
  Index width = 0;
  int num_classes = 0;                // K; class K-1 is the lesion
  Tensor<std::int32_t> labels;        // [H,W], values in {0..K-1}
};

struct ModalityProfile {
  int modality_id = 0;
  std::vector<double> class_intensities;  // K values in [-2,2], pairwise >= 0.2 apart
  double bias_amplitude = 0.1;
  double bias_smoothness = 16.0;          // correlation length, pixels
  double noise_sigma = 0.05;
};

struct LabelMapParams {
  int height = 64;
  int width = 64;
  int classes = 5;
  double p_lesion = 0.6;
};

struct GenConfig {
  int num_subjects = 40;
  int modalities = 2;
  int height = 64;
  int width = 64;
  int classes = 5;
  int channels = 1;
  double p_lesion = 0.6;
  double noise_sigma = 0.05;
  double bias_amplitude = 0.1;
  double bias_smoothness = 16.0;
  std::vector<double> split_fractions = {0.7, 0.1, 0.2};
  std::uint64_t seed = 7;
};

struct SubjectRecord {
  std::string subject_id;
  std::string label_path;               // relative to the manifest directory
  std::vector<std::string> image_paths;
  std::string split;                    // train | val | test
  std::uint32_t label_crc = 0;
  std::vector<std::uint32_t> image_crcs;
};

struct DatasetManifest {
  int version = 1;
  int num_subjects = 0;
  int m = 0;
  int height = 0;
  int width = 0;
  int classes = 0;
  int channels = 1;
  std::uint64_t generator_seed = 0;
  std::vector<SubjectRecord> subjects;
  GenConfig config;      // full generation config, for exact rebuilds
  std::string root_dir;  // runtime only: directory containing the manifest
};

struct MultiModalSample {
  std::string subject_id;
  std::vector<Tensor<float>> images;  // m tensors [C,H,W]
  LabelMap label_map;
  std::string split;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<MultiModalSample> samples;

  std::vector<int> split_indices(const std::string& split) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].split == split || split == "all") out.push_back(static_cast<int>(i));
    return out;
  }
};

// Deterministic in (seed, params). Nested smooth blobs assign classes
// 1..K-2 concentrically; a lesion disk (class K-1) is stamped with
// probability p_lesion.
LabelMap generate_label_map(std::uint64_t seed, const LabelMapParams& params);

// pixel = intensities[label] * (1 + bias) + noise, deterministic in noise_seed.
// Output is [channels,H,W]; channels differ only in their noise stream.
Tensor<float> render_modality(const LabelMap& label_map, const ModalityProfile& profile,
                              std::uint64_t noise_seed, int channels = 1);

// Full-frame z-score: stored dataset images are standardized per image,
// mirroring the z-scored intensity convention of the modeled pipeline.
void standardize_image(Tensor<float>& img);

// Per-modality appearance tables derived from the generator seed.
std::vector<ModalityProfile> make_profiles(const GenConfig& cfg);

DatasetManifest build_dataset(const GenConfig& cfg, const std::string& out_dir);

DatasetManifest load_manifest(const std::string& manifest_path);
Dataset load_dataset(const std::string& manifest_path);

std::string manifest_to_json(const DatasetManifest& m);

}  // namespace dmrl
