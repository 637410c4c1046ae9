#pragma once

#include "dmrl/checkpoint.hpp"
#include "dmrl/synthdata.hpp"

namespace dmrl {

struct PsnrResult {
  double value = 0.0;     // dB, capped at 100 for identical images
  bool identical = false;
};

// 10*log10(data_range^2 / MSE). Identical inputs report the 100 dB cap.
PsnrResult psnr(const Tensor<float>& x, const Tensor<float>& y, double data_range);

// Mean local SSIM, 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
// computed over valid window positions.
double ssim(const Tensor<float>& x, const Tensor<float>& y, double data_range);

// 2|P∩G| / (|P|+|G|) for one class id; defined as 1.0 when both are empty.
double dice(const Tensor<std::int32_t>& pred, const Tensor<std::int32_t>& gt, int class_id);

double image_data_range(const Tensor<float>& ground_truth);

// ---------------------------------------------------------------------------
// Embedding structure metrics (pure; unit-testable without a model)
// ---------------------------------------------------------------------------

// embeddings[subject][modality] -> flat feature vector.
using EmbeddingTable = std::vector<std::vector<std::vector<double>>>;

struct GapStats {
  double within = 0.0;
  double across = 0.0;
  double gap = 0.0;  // within - across
  int samples = 0;
};

double cosine_sim(const std::vector<double>& a, const std::vector<double>& b);

// Anatomy gap: cos(f(s_i^p), f(s_j^p)) vs cos(f(s_i^p), f(s_i^q)).
GapStats anatomy_gap(const EmbeddingTable& fs, int pair_samples, Rng rng);
// Modality gap: cos(z_i^p, z_i^q) vs cos(z_i^p, z_j^p).
GapStats modality_gap(const EmbeddingTable& z, int pair_samples, Rng rng);

// Mean silhouette score with cosine distance (1 - cosine similarity).
double silhouette_cosine(const std::vector<std::vector<double>>& points,
                         const std::vector<int>& labels);

// Multinomial logistic probe: held-out accuracy under a seeded stratified
// 50/50 split of the given points.
double logistic_probe_accuracy(const std::vector<std::vector<double>>& points,
                               const std::vector<int>& labels, Rng rng);

// ---------------------------------------------------------------------------
// Model-level evaluation
// ---------------------------------------------------------------------------

struct ModalityRecon {
  double self_psnr = 0, self_ssim = 0;
  double cross_psnr = 0, cross_ssim = 0;
};

struct ReconReport {
  std::vector<ModalityRecon> per_modality;
  int subjects = 0;
  std::string split;
};

// Table-1 protocol: each modality j is synthesized from its own modality
// representation and the anatomical representation of every other modality i,
// averaging metrics over i != j; self-reconstruction reported alongside.
ReconReport cross_recon_eval(Model<float>& model, const Dataset& ds, const std::string& split);

struct DisentReport {
  GapStats s_gap, z_gap;
  double silhouette_z_modality = 0;
  double silhouette_fs_subject = 0;
  double probe_z_accuracy = 0;
  double probe_fs_accuracy = 0;
  int subjects = 0;
  int images = 0;
  std::string split;
};

DisentReport disentanglement_eval(Model<float>& model, const Dataset& ds, const std::string& split,
                                  int pair_samples);

// Writes z.dmrt (N x z_dim), fs.dmrt (N x |f(s)|), fused reps per subject,
// and labels.csv with (subject_id, modality_id, split) rows.
void export_embeddings(Model<float>& model, const Dataset& ds, const std::string& split,
                       const std::string& out_dir);

// f(s) on plain tensors: per-channel 8x8/8 max pool of a [C,H,W] map, flattened.
std::vector<double> pooled_anatomy_features(const Tensor<float>& s);

json recon_report_to_json(const ReconReport& r, const std::string& config_hash);
json disent_report_to_json(const DisentReport& r, const std::string& config_hash);

}  // namespace dmrl
