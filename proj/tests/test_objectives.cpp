#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>

#include "dmrl/objectives.hpp"
#include "test_util.hpp"

using namespace dmrl;
using namespace dmrl::testutil;

namespace {

// Builds a bundle directly from raw tensors (no model), m=2, B subjects.
template <typename S>
BatchBundle<S> manual_bundle(Tape<S>& t, const std::vector<Tensor<S>>& x,
                             const std::vector<Tensor<S>>& s, const std::vector<Tensor<S>>& z,
                             const std::vector<std::vector<Tensor<S>>>& synth,
                             const std::vector<std::vector<Tensor<S>>>& z_re,
                             std::vector<Index> partner) {
  BatchBundle<S> b;
  b.m = static_cast<int>(x.size());
  b.subjects = static_cast<int>(x[0].dim(0));
  b.partner = std::move(partner);
  for (const auto& xi : x) b.x.push_back(t.leaf(xi, false));
  for (const auto& si : s) b.s.push_back(t.leaf(si, false));
  for (const auto& zi : z) b.z.push_back(t.leaf(zi, false));
  b.synth.resize(static_cast<std::size_t>(b.m));
  b.z_re.resize(static_cast<std::size_t>(b.m));
  for (int i = 0; i < b.m; ++i)
    for (int j = 0; j < b.m; ++j) {
      b.synth[static_cast<std::size_t>(i)].push_back(t.leaf(synth[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)], false));
      b.z_re[static_cast<std::size_t>(i)].push_back(t.leaf(z_re[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)], false));
    }
  return b;
}

// An s map whose f(s) is a constant per channel: constant spatial values.
Tensor<double> const_channel_map(Index b_sub, std::vector<std::vector<double>> per_subject_channels) {
  const Index c = static_cast<Index>(per_subject_channels[0].size());
  Tensor<double> t({b_sub, c, 8, 8});
  for (Index n = 0; n < b_sub; ++n)
    for (Index ci = 0; ci < c; ++ci)
      for (Index p = 0; p < 64; ++p)
        t.data()[((n * c + ci) * 64) + p] =
            per_subject_channels[static_cast<std::size_t>(n)][static_cast<std::size_t>(ci)];
  return t;
}

}  // namespace

TEST_CASE("recon losses: perfect reconstruction gives zero") {
  Tape<double> t(false);
  Rng rng(1);
  std::vector<Tensor<double>> x = {random_image<double>(2, 1, 8, 8, rng),
                                   random_image<double>(2, 1, 8, 8, rng)};
  std::vector<std::vector<Tensor<double>>> synth = {{x[0], x[1]}, {x[0], x[1]}};
  std::vector<Tensor<double>> z = {Tensor<double>({2, 4}), Tensor<double>({2, 4})};
  std::vector<std::vector<Tensor<double>>> z_re = {{z[0], z[1]}, {z[0], z[1]}};
  auto b = manual_bundle(t, x, x, z, synth, z_re, {1, 0});
  LossWeights w;
  auto [l_self, l_cross] = recon_losses(t, b, w);
  CHECK(t.scalar(l_self) == 0.0);
  CHECK(t.scalar(l_cross) == 0.0);
  CHECK(t.scalar(latent_consistency(t, b, w)) == 0.0);
}

TEST_CASE("recon losses: all-zero targets, all-one reconstructions") {
  Tape<double> t(false);
  std::vector<Tensor<double>> x = {Tensor<double>({2, 1, 4, 4}), Tensor<double>({2, 1, 4, 4})};
  Tensor<double> ones({2, 1, 4, 4}, 1.0);
  std::vector<std::vector<Tensor<double>>> synth = {{ones, ones}, {ones, ones}};
  std::vector<Tensor<double>> z = {Tensor<double>({2, 4}), Tensor<double>({2, 4})};
  std::vector<std::vector<Tensor<double>>> z_re = {{z[0], z[1]}, {z[0], z[1]}};
  auto b = manual_bundle(t, x, x, z, synth, z_re, {1, 0});
  LossWeights w;
  auto [l_self, l_cross] = recon_losses(t, b, w);
  CHECK(t.scalar(l_self) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(t.scalar(l_cross) == doctest::Approx(w.lambda_c).epsilon(1e-9));

  // Doubling lambda_c doubles L_cross and leaves L_self unchanged.
  LossWeights w2 = w;
  w2.lambda_c *= 2;
  auto [l_self2, l_cross2] = recon_losses(t, b, w2);
  CHECK(t.scalar(l_self2) == t.scalar(l_self));
  CHECK(t.scalar(l_cross2) == doctest::Approx(2 * t.scalar(l_cross)).epsilon(1e-12));
}

TEST_CASE("latent consistency: hand arithmetic and diagonal inclusion") {
  Tape<double> t(false);
  std::vector<Tensor<double>> x = {Tensor<double>({2, 1, 4, 4}), Tensor<double>({2, 1, 4, 4})};
  std::vector<Tensor<double>> z = {Tensor<double>({2, 4}), Tensor<double>({2, 4})};
  Tensor<double> z_off({2, 4}, 0.5);  // |z_re - z| = 0.5 everywhere
  std::vector<std::vector<Tensor<double>>> synth = {{x[0], x[1]}, {x[0], x[1]}};
  std::vector<std::vector<Tensor<double>>> z_re = {{z_off, z_off}, {z_off, z_off}};
  auto b = manual_bundle(t, x, x, z, synth, z_re, {1, 0});
  LossWeights w;
  // (lambda_l / m^2) * sum over all 4 (i,j) pairs of 0.5 = lambda_l * 0.5;
  // the diagonal i=j contributes, per the printed double sum.
  CHECK(t.scalar(latent_consistency(t, b, w)) == doctest::Approx(w.lambda_l * 0.5).epsilon(1e-9));

  // Only the diagonal off: value is lambda_l/4 * 2 * 0.5.
  std::vector<std::vector<Tensor<double>>> z_re_diag = {{z_off, z[1]}, {z[0], z_off}};
  auto b2 = manual_bundle(t, x, x, z, synth, z_re_diag, {1, 0});
  CHECK(t.scalar(latent_consistency(t, b2, w)) ==
        doctest::Approx(w.lambda_l / 4 * 2 * 0.5).epsilon(1e-9));
}

TEST_CASE("similarity loss: margins satisfied gives exactly zero") {
  // Within-subject reps identical (cos 1), across-subject orthogonal (cos 0).
  Tape<double> t(false);
  std::vector<Tensor<double>> s = {const_channel_map(2, {{1, 0}, {0, 1}}),
                                   const_channel_map(2, {{1, 0}, {0, 1}})};
  Tensor<double> z0({2, 4});
  z0.at2(0, 0) = 1;  // subject 0 along e0
  z0.at2(1, 1) = 1;  // subject 1 along e1
  // z within modality across subjects must be SIMILAR: use same direction per
  // modality instead.
  Tensor<double> za({2, 4}), zb({2, 4});
  za.at2(0, 0) = 1;
  za.at2(1, 0) = 1;  // modality a -> e0 for both subjects
  zb.at2(0, 1) = 1;
  zb.at2(1, 1) = 1;  // modality b -> e1
  std::vector<Tensor<double>> z = {za, zb};
  std::vector<Tensor<double>> x = {Tensor<double>({2, 1, 8, 8}), Tensor<double>({2, 1, 8, 8})};
  std::vector<std::vector<Tensor<double>>> synth = {{x[0], x[1]}, {x[0], x[1]}};
  std::vector<std::vector<Tensor<double>>> z_re = {{za, zb}, {za, zb}};
  auto b = manual_bundle(t, x, s, z, synth, z_re, {1, 0});
  LossWeights w;
  auto [sim_s, sim_z] = similarity_loss(t, b, w);
  CHECK(t.scalar(sim_s) == 0.0);
  CHECK(t.scalar(sim_z) == 0.0);
}

TEST_CASE("similarity loss: identical reps everywhere costs (lambda_s+lambda_z)*alpha") {
  Tape<double> t(false);
  std::vector<Tensor<double>> s = {const_channel_map(2, {{1, 1}, {1, 1}}),
                                   const_channel_map(2, {{1, 1}, {1, 1}})};
  Tensor<double> zsame({2, 4}, 0.7);
  std::vector<Tensor<double>> z = {zsame, zsame};
  std::vector<Tensor<double>> x = {Tensor<double>({2, 1, 8, 8}), Tensor<double>({2, 1, 8, 8})};
  std::vector<std::vector<Tensor<double>>> synth = {{x[0], x[1]}, {x[0], x[1]}};
  std::vector<std::vector<Tensor<double>>> z_re = {{zsame, zsame}, {zsame, zsame}};
  auto b = manual_bundle(t, x, s, z, synth, z_re, {1, 0});
  LossWeights w;
  auto [sim_s, sim_z] = similarity_loss(t, b, w);
  // Every hinge is max(0, alpha - 1 + 1) = alpha.
  CHECK(t.scalar(sim_s) == doctest::Approx(w.lambda_s * w.alpha_s).epsilon(1e-9));
  CHECK(t.scalar(sim_z) == doctest::Approx(w.lambda_z * w.alpha_z).epsilon(1e-9));
  const double total = t.scalar(sim_s) + t.scalar(sim_z);
  CHECK(total == doctest::Approx((w.lambda_s + w.lambda_z) * 0.1).epsilon(1e-9));
  CHECK(total == doctest::Approx(1.2).epsilon(1e-9));
}

TEST_CASE("similarity loss: hand-computed cosine hinges") {
  // f(s_i^p)=(1,0), f(s_j^p)=(1,0), f(s_i^q)=(r2/2, r2/2):
  //   hinge = max(0, 0.1 - 1 + 0.7071) = 0.
  // Replacing f(s_j^p)=(0,1): hinge = max(0, 0.1 - 0 + 0.7071) = 0.8071.
  const double r22 = std::sqrt(2.0) / 2.0;
  LossWeights w;
  w.lambda_s = 1.0;
  w.lambda_z = 0.0;

  auto run_case = [&](std::vector<std::vector<double>> subj_chan_a,
                      std::vector<std::vector<double>> subj_chan_b) {
    Tape<double> t(false);
    std::vector<Tensor<double>> s = {const_channel_map(2, subj_chan_a),
                                     const_channel_map(2, subj_chan_b)};
    Tensor<double> zz({2, 4}, 0.3);
    std::vector<Tensor<double>> z = {zz, zz};
    std::vector<Tensor<double>> x = {Tensor<double>({2, 1, 8, 8}), Tensor<double>({2, 1, 8, 8})};
    std::vector<std::vector<Tensor<double>>> synth = {{x[0], x[1]}, {x[0], x[1]}};
    std::vector<std::vector<Tensor<double>>> z_re = {{zz, zz}, {zz, zz}};
    auto b = manual_bundle(t, x, s, z, synth, z_re, {1, 0});
    auto [sim_s, sim_z] = similarity_loss(t, b, w);
    (void)sim_z;
    return t.scalar(sim_s);
  };

  // Case 1: within-subject pairs aligned; the cross-subject cosine is 0.7071.
  // Subject 0 has (1,0) in both modalities; subject 1 has (r22,r22) in both.
  // Every within cosine is 1, every across cosine is 0.7071 -> all hinges 0.
  CHECK(run_case({{1, 0}, {r22, r22}}, {{1, 0}, {r22, r22}}) == 0.0);

  // Case 2: subject 0's modality-b rep becomes (0,1): the (i=a, j=b) and
  // (i=b, j=a) hinges for subject 0 are max(0, 0.1 - 0 + 0.7071) = 0.8071;
  // subject 0's diagonal terms stay 0 (within-cos 1).
  // Subject 1 keeps (r22,r22) in both modalities; its across-cos to subject 0
  // is r22 for modality a and r22 for modality b, hinges max(0,.1-1+r22)=0.
  const double expected =
      (1.0 / 4.0) *  // lambda_s=1, m^2=4
      (0.5 * std::max(0.0, 0.1 - 0.0 + r22) * 2.0);  // two off-diagonal terms, subject 0 only
  const double got = run_case({{1, 0}, {r22, r22}}, {{0, 1}, {r22, r22}});
  CHECK(got == doctest::Approx(expected).epsilon(1e-9));
  CHECK(std::abs(0.1 - 0.0 + r22 - 0.8071) < 1e-4);
}

TEST_CASE("similarity loss invariance under positive rescaling") {
  Rng rng(2);
  Tape<double> t(false);
  auto s0 = random_image<double>(3, 4, 8, 8, rng);
  auto s1 = random_image<double>(3, 4, 8, 8, rng);
  auto z0 = random_image<double>(3, 4, 1, 1, rng).reshaped({3, 4});
  auto z1 = random_image<double>(3, 4, 1, 1, rng).reshaped({3, 4});
  std::vector<Tensor<double>> x = {Tensor<double>({3, 1, 8, 8}), Tensor<double>({3, 1, 8, 8})};
  std::vector<std::vector<Tensor<double>>> synth = {{x[0], x[1]}, {x[0], x[1]}};
  std::vector<std::vector<Tensor<double>>> z_re = {{z0, z1}, {z0, z1}};
  LossWeights w;

  auto b1 = manual_bundle(t, x, {s0, s1}, {z0, z1}, synth, z_re, {2, 0, 1});
  auto [a1, b1z] = similarity_loss(t, b1, w);

  // Positive rescaling of every s map and z vector.
  auto scale_t = [](Tensor<double> v, double k) {
    for (Index i = 0; i < v.numel(); ++i) v[i] *= k;
    return v;
  };
  auto b2 = manual_bundle(t, x, {scale_t(s0, 3.7), scale_t(s1, 3.7)},
                          {scale_t(z0, 0.2), scale_t(z1, 0.2)}, synth, z_re, {2, 0, 1});
  auto [a2, b2z] = similarity_loss(t, b2, w);
  // Max-pooling of positively scaled maps scales pooled features, and cosine
  // ignores positive scale.
  CHECK(t.scalar(a2) == doctest::Approx(t.scalar(a1)).epsilon(1e-9));
  CHECK(t.scalar(b2z) == doctest::Approx(t.scalar(b1z)).epsilon(1e-9));
}

TEST_CASE("bundle pairing must be a derangement") {
  Tape<double> t(false);
  Rng rng(3);
  std::vector<Tensor<double>> x = {random_image<double>(2, 1, 8, 8, rng),
                                   random_image<double>(2, 1, 8, 8, rng)};
  std::vector<Tensor<double>> z = {Tensor<double>({2, 4}), Tensor<double>({2, 4})};
  std::vector<std::vector<Tensor<double>>> synth = {{x[0], x[1]}, {x[0], x[1]}};
  std::vector<std::vector<Tensor<double>>> z_re = {{z[0], z[1]}, {z[0], z[1]}};
  auto bad = manual_bundle(t, x, x, z, synth, z_re, {0, 1});
  LossWeights w;
  CHECK_THROWS_AS(recon_losses(t, bad, w), ArgumentError);
  CHECK_THROWS_AS(similarity_loss(t, bad, w), ArgumentError);
}

TEST_CASE("variant NA zeroes the similarity terms exactly") {
  auto cfg = micro_model_config();
  auto model = make_model<double>(cfg, 5);
  Rng rng(4);
  std::vector<Tensor<double>> images = {random_image<double>(2, 1, 8, 8, rng),
                                        random_image<double>(2, 1, 8, 8, rng)};
  Tape<double> t(true);
  auto bundle = build_bundle(t, *model, images, {1, 0}, true);
  LossWeights w;
  w.lambda_s = 0;
  w.lambda_z = 0;
  auto losses = total_loss(t, bundle, w);
  CHECK(t.scalar(losses.l_sim_s) == 0.0);
  CHECK(t.scalar(losses.l_sim_z) == 0.0);
  CHECK(t.scalar(losses.total) ==
        doctest::Approx(t.scalar(losses.l_self) + t.scalar(losses.l_cross) +
                        t.scalar(losses.l_latent)).epsilon(1e-12));
}

TEST_CASE("total loss breakdown sums to the total") {
  auto cfg = micro_model_config();
  auto model = make_model<double>(cfg, 6);
  Rng rng(5);
  std::vector<Tensor<double>> images = {random_image<double>(3, 1, 8, 8, rng),
                                        random_image<double>(3, 1, 8, 8, rng)};
  Tape<double> t(true);
  auto bundle = build_bundle(t, *model, images, {1, 2, 0}, true);
  LossWeights w;
  auto losses = total_loss(t, bundle, w);
  const double parts = t.scalar(losses.l_self) + t.scalar(losses.l_cross) +
                       t.scalar(losses.l_latent) + t.scalar(losses.l_sim_s) +
                       t.scalar(losses.l_sim_z);
  CHECK(std::abs(parts - t.scalar(losses.total)) < 1e-6);
  CHECK(t.scalar(losses.total) > 0.0);
}

TEST_CASE("total loss gradients match central finite differences") {
  // The acceptance-grade oracle: every parameter of a miniature model,
  // float64, 8x8 inputs, against central differences.
  const auto t_start = std::chrono::steady_clock::now();

  auto cfg = micro_model_config();
  auto model = make_model<double>(cfg, 7);
  Rng rng(6);
  std::vector<Tensor<double>> images = {random_image<double>(2, 1, 8, 8, rng, 0.8),
                                        random_image<double>(2, 1, 8, 8, rng, 0.8)};
  LossWeights w;
  std::vector<Index> partner = {1, 0};

  auto loss_value = [&]() {
    Tape<double> t(false);
    auto bundle = build_bundle(t, *model, images, partner, true);
    return t.scalar(total_loss(t, bundle, w).total);
  };

  Tape<double> tape(true);
  auto bundle = build_bundle(tape, *model, images, partner, true);
  auto losses = total_loss(tape, bundle, w);
  tape.backward(losses.total);

  Index checked = 0, failed = 0;
  double worst = 0;
  std::string worst_name;
  for (const auto& p : model->params) {
    Tensor<double> analytic = tape.param_grad(*p.tensor);
    double scale_mag = 0;
    for (Index i = 0; i < analytic.numel(); ++i)
      scale_mag = std::max(scale_mag, std::abs(analytic[i]));
    for (Index i = 0; i < p.tensor->numel(); ++i) {
      const double orig = (*p.tensor)[i];
      double eps = 1e-5;
      double fd = 0, err = 0;
      for (int attempt = 0; attempt < 2; ++attempt) {
        (*p.tensor)[i] = orig + eps;
        const double up = loss_value();
        (*p.tensor)[i] = orig - eps;
        const double dn = loss_value();
        (*p.tensor)[i] = orig;
        fd = (up - dn) / (2 * eps);
        err = std::abs(fd - analytic[i]) /
              std::max({std::abs(fd), std::abs(analytic[i]), 1e-3 * scale_mag, 1e-6});
        if (err < 1e-3) break;
        eps *= 0.1;  // re-test kink-adjacent coordinates with a finer step
      }
      ++checked;
      if (err >= 1e-3) ++failed;
      if (err > worst) {
        worst = err;
        worst_name = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  INFO("checked " << checked << " parameters, worst " << worst << " at " << worst_name << " in "
                  << seconds << "s");
  CHECK(failed == 0);
  CHECK(worst < 1e-3);
  CHECK(seconds < 60.0);
}
