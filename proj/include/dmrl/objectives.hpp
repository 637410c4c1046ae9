#pragma once

#include "dmrl/nets.hpp"

namespace dmrl {

struct LossWeights {
  double lambda_c = 2.0;
  double lambda_l = 0.1;
  double lambda_s = 10.0;
  double lambda_z = 2.0;
  double alpha_s = 0.1;
  double alpha_z = 0.1;
  // The printed similarity loss sums over all (i,j) including i == j; this
  // switch drops the diagonal terms.
  bool exclude_diagonal = false;
};

// One optimization step's forward state: for B subjects and m modalities,
// the inputs, both representations, all m^2 translations, the re-encoded
// modality codes, and the subject pairing (a derangement).
template <typename S>
struct BatchBundle {
  int m = 0;
  int subjects = 0;
  std::vector<Var> x;                    // m images [B,C,H,W]
  std::vector<Var> s;                    // m anatomy reps [B,4,H,W]
  std::vector<Var> z;                    // m modality reps [B,16]
  std::vector<std::vector<Var>> synth;   // synth[i][j] = D(s_i, z_j), target x_j
  std::vector<std::vector<Var>> z_re;    // z_re[i][j] = E^M(synth[i][j]; j)
  std::vector<Index> partner;            // derangement over subjects
};

template <typename S>
void check_bundle(const BatchBundle<S>& b) {
  if (b.m < 2) throw ArgumentError("batch bundle needs m >= 2");
  if (b.subjects < 2) throw ArgumentError("batch bundle needs at least 2 subjects");
  if (static_cast<int>(b.partner.size()) != b.subjects)
    throw ArgumentError("batch bundle pairing size mismatch");
  for (int i = 0; i < b.subjects; ++i)
    if (b.partner[static_cast<std::size_t>(i)] == i)
      throw ArgumentError("batch bundle pairing has a fixed point at subject " + std::to_string(i));
}

// Runs the full forward pass for a training step. Images are leafed without
// gradients; parameters enter the tape through Tape::param.
template <typename S>
BatchBundle<S> build_bundle(Tape<S>& t, Model<S>& model, const std::vector<Tensor<S>>& images,
                            std::vector<Index> partner, bool training) {
  BatchBundle<S> b;
  b.m = static_cast<int>(images.size());
  if (b.m < 2) throw ArgumentError("build_bundle: need at least 2 modalities");
  b.subjects = static_cast<int>(images[0].dim(0));
  b.partner = std::move(partner);
  check_bundle(b);

  for (int i = 0; i < b.m; ++i) {
    Var x = t.leaf(images[static_cast<std::size_t>(i)], false);
    b.x.push_back(x);
    b.s.push_back(encode_anatomy(t, model, x, i, training));
    b.z.push_back(encode_modality(t, model, x, i, training));
  }
  b.synth.assign(static_cast<std::size_t>(b.m), std::vector<Var>(static_cast<std::size_t>(b.m)));
  b.z_re = b.synth;
  for (int i = 0; i < b.m; ++i) {
    for (int j = 0; j < b.m; ++j) {
      Var xt = decode(t, model, b.s[static_cast<std::size_t>(i)], b.z[static_cast<std::size_t>(j)],
                      training);
      b.synth[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = xt;
      // Re-encode with the modality id of the appearance source.
      b.z_re[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
          encode_modality(t, model, xt, j, training);
    }
  }
  return b;
}

// L_self = 1/m sum_i E||x~_ii - x_i||_1,
// L_cross = lambda_c/(m^2-m) sum_{i != j} E||x~_ij - x_j||_1,
// with ||.||_1 the mean absolute error over pixels and batch.
template <typename S>
std::pair<Var, Var> recon_losses(Tape<S>& t, const BatchBundle<S>& b, const LossWeights& w) {
  check_bundle(b);
  std::vector<Var> self_terms, cross_terms;
  for (int i = 0; i < b.m; ++i)
    for (int j = 0; j < b.m; ++j) {
      Var term = mean_abs_diff(t, b.synth[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)],
                               b.x[static_cast<std::size_t>(j)]);
      (i == j ? self_terms : cross_terms).push_back(term);
    }
  const S self_coef = S(1.0 / b.m);
  const S cross_coef = static_cast<S>(w.lambda_c / (static_cast<double>(b.m) * b.m - b.m));
  Var l_self = wsum(t, self_terms, std::vector<S>(self_terms.size(), self_coef));
  Var l_cross = wsum(t, cross_terms, std::vector<S>(cross_terms.size(), cross_coef));
  return {l_self, l_cross};
}

// lambda_l/m^2 sum_{i,j} E||z~ - z||_1 over all pairs including the diagonal.
template <typename S>
Var latent_consistency(Tape<S>& t, const BatchBundle<S>& b, const LossWeights& w) {
  check_bundle(b);
  std::vector<Var> terms;
  for (int i = 0; i < b.m; ++i)
    for (int j = 0; j < b.m; ++j)
      terms.push_back(mean_abs_diff(t, b.z_re[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)],
                                    b.z[static_cast<std::size_t>(j)]));
  const S coef = static_cast<S>(w.lambda_l / (static_cast<double>(b.m) * b.m));
  return wsum(t, terms, std::vector<S>(terms.size(), coef));
}

// f(s): per-channel 8x8 stride-8 max pooling, flattened per subject.
template <typename S>
Var pool_flatten(Tape<S>& t, Var s) {
  const Tensor<S>& sv = t.val(s);
  if (sv.rank() != 4) throw ShapeError("pool_flatten: expected [N,C,H,W]");
  Var pooled = maxpool2d(t, s, 8, 8);
  const Tensor<S>& pv = t.val(pooled);
  return reshape(t, pooled, {pv.dim(0), pv.dim(1) * pv.dim(2) * pv.dim(3)});
}

// Margin similarity loss, split into the anatomy (f(s)) and modality (z)
// terms. Hinges compare within-subject to across-subject similarity for s
// and within-modality to across-modality similarity for z.
//
// The s-term runs over all (i,j) including the diagonal, whose hinge
// max(0, a - 1 + cos(f(s_i^p), f(s_i^q))) meaningfully caps across-subject
// similarity. The z-term's diagonal would compare a vector with itself
// (cos identically 1), leaving a hinge that can never be satisfied, so the
// z sum runs over i != j. Each term is normalized by its pair count.
template <typename S>
std::pair<Var, Var> similarity_loss(Tape<S>& t, const BatchBundle<S>& b, const LossWeights& w) {
  check_bundle(b);
  std::vector<Index> partner = b.partner;

  std::vector<Var> fs;
  fs.reserve(static_cast<std::size_t>(b.m));
  for (int i = 0; i < b.m; ++i) fs.push_back(pool_flatten(t, b.s[static_cast<std::size_t>(i)]));

  std::vector<Var> s_terms, z_terms;
  for (int i = 0; i < b.m; ++i) {
    Var fs_i = fs[static_cast<std::size_t>(i)];
    Var z_i = b.z[static_cast<std::size_t>(i)];
    // cos(f(s_i^p), f(s_i^q)) and cos(z_i^p, z_i^q) against the paired subject.
    Var s_across = row_cosine(t, fs_i, gather_rows(t, fs_i, partner));
    Var z_within_mod = row_cosine(t, z_i, gather_rows(t, z_i, partner));
    for (int j = 0; j < b.m; ++j) {
      if (i != j || !w.exclude_diagonal) {
        Var s_within = row_cosine(t, fs_i, fs[static_cast<std::size_t>(j)]);
        Var s_hinge = relu(t, add_const(t, axpby(t, s_within, s_across, S(-1), S(1)),
                                        static_cast<S>(w.alpha_s)));
        s_terms.push_back(mean_vec(t, s_hinge));
      }
      if (i != j) {
        Var z_across = row_cosine(t, z_i, b.z[static_cast<std::size_t>(j)]);
        Var z_hinge = relu(t, add_const(t, axpby(t, z_within_mod, z_across, S(-1), S(1)),
                                        static_cast<S>(w.alpha_z)));
        z_terms.push_back(mean_vec(t, z_hinge));
      }
    }
  }
  Var sim_s = wsum(t, s_terms,
                   std::vector<S>(s_terms.size(), static_cast<S>(w.lambda_s / s_terms.size())));
  Var sim_z = wsum(t, z_terms,
                   std::vector<S>(z_terms.size(), static_cast<S>(w.lambda_z / z_terms.size())));
  return {sim_s, sim_z};
}

template <typename S>
struct LossBreakdown {
  Var total, l_self, l_cross, l_latent, l_sim_s, l_sim_z;
};

template <typename S>
LossBreakdown<S> total_loss(Tape<S>& t, const BatchBundle<S>& b, const LossWeights& w) {
  LossBreakdown<S> out;
  auto [l_self, l_cross] = recon_losses(t, b, w);
  out.l_self = l_self;
  out.l_cross = l_cross;
  out.l_latent = latent_consistency(t, b, w);
  auto [sim_s, sim_z] = similarity_loss(t, b, w);
  out.l_sim_s = sim_s;
  out.l_sim_z = sim_z;
  out.total = wsum(t, {out.l_self, out.l_cross, out.l_latent, out.l_sim_s, out.l_sim_z},
                   std::vector<S>(5, S(1)));

  const std::pair<const char*, Var> named[] = {{"L_self", out.l_self},
                                               {"L_cross", out.l_cross},
                                               {"L_latent", out.l_latent},
                                               {"L_sim_s", out.l_sim_s},
                                               {"L_sim_z", out.l_sim_z}};
  for (const auto& [name, v] : named)
    if (!std::isfinite(static_cast<double>(t.scalar(v))))
      throw DivergenceError(std::string("non-finite loss term ") + name);
  return out;
}

}  // namespace dmrl
