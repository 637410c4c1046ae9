#include "dmrl/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>

#include "dmrl/objectives.hpp"
#include "dmrl/fusion.hpp"
#include "dmrl/tensor_io.hpp"

namespace fs = std::filesystem;

namespace dmrl {

PsnrResult psnr(const Tensor<float>& x, const Tensor<float>& y, double data_range) {
  check_same_shape(x, y, "psnr");
  if (data_range <= 0) throw ArgumentError("psnr: data_range must be positive");
  double mse = 0;
  for (Index i = 0; i < x.numel(); ++i) {
    double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(x.numel());
  if (mse == 0.0) return {100.0, true};
  double v = 10.0 * std::log10(data_range * data_range / mse);
  return {std::min(v, 100.0), false};
}

namespace {

std::vector<double> gaussian_window11() {
  std::vector<double> w(121);
  const double sigma = 1.5;
  double sum = 0;
  for (int y = 0; y < 11; ++y)
    for (int x = 0; x < 11; ++x) {
      double dy = y - 5, dx = x - 5;
      w[static_cast<std::size_t>(y * 11 + x)] = std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
      sum += w[static_cast<std::size_t>(y * 11 + x)];
    }
  for (auto& v : w) v /= sum;
  return w;
}

}  // namespace

double ssim(const Tensor<float>& x, const Tensor<float>& y, double data_range) {
  check_same_shape(x, y, "ssim");
  if (data_range <= 0) throw ArgumentError("ssim: data_range must be positive");
  // Accept [H,W] or [C,H,W]; SSIM is averaged over channels.
  Index c = 1, h, w;
  if (x.rank() == 2) {
    h = x.dim(0);
    w = x.dim(1);
  } else if (x.rank() == 3) {
    c = x.dim(0);
    h = x.dim(1);
    w = x.dim(2);
  } else {
    throw ShapeError("ssim: expected [H,W] or [C,H,W]");
  }
  if (h < 11 || w < 11)
    throw ShapeError("ssim: image " + std::to_string(h) + "x" + std::to_string(w) +
                     " is smaller than the 11x11 window");
  static const std::vector<double> win = gaussian_window11();
  const double c1 = (0.01 * data_range) * (0.01 * data_range);
  const double c2 = (0.03 * data_range) * (0.03 * data_range);

  double total = 0;
  Index count = 0;
  for (Index ci = 0; ci < c; ++ci) {
    const float* xp = x.data() + ci * h * w;
    const float* yp = y.data() + ci * h * w;
    for (Index oy = 0; oy + 11 <= h; ++oy) {
      for (Index ox = 0; ox + 11 <= w; ++ox) {
        double mx = 0, my = 0;
        for (int ky = 0; ky < 11; ++ky)
          for (int kx = 0; kx < 11; ++kx) {
            const double wgt = win[static_cast<std::size_t>(ky * 11 + kx)];
            mx += wgt * xp[(oy + ky) * w + ox + kx];
            my += wgt * yp[(oy + ky) * w + ox + kx];
          }
        double vx = 0, vy = 0, cov = 0;
        for (int ky = 0; ky < 11; ++ky)
          for (int kx = 0; kx < 11; ++kx) {
            const double wgt = win[static_cast<std::size_t>(ky * 11 + kx)];
            const double dx = xp[(oy + ky) * w + ox + kx] - mx;
            const double dy = yp[(oy + ky) * w + ox + kx] - my;
            vx += wgt * dx * dx;
            vy += wgt * dy * dy;
            cov += wgt * dx * dy;
          }
        const double num = (2 * mx * my + c1) * (2 * cov + c2);
        const double den = (mx * mx + my * my + c1) * (vx + vy + c2);
        total += num / den;
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

double dice(const Tensor<std::int32_t>& pred, const Tensor<std::int32_t>& gt, int class_id) {
  check_same_shape(pred, gt, "dice");
  Index p = 0, g = 0, inter = 0;
  for (Index i = 0; i < pred.numel(); ++i) {
    const bool in_p = pred[i] == class_id;
    const bool in_g = gt[i] == class_id;
    p += in_p;
    g += in_g;
    inter += in_p && in_g;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

double image_data_range(const Tensor<float>& gt) {
  float lo = gt[0], hi = gt[0];
  for (Index i = 1; i < gt.numel(); ++i) {
    lo = std::min(lo, gt[i]);
    hi = std::max(hi, gt[i]);
  }
  double r = static_cast<double>(hi) - static_cast<double>(lo);
  return r > 0 ? r : 1.0;
}

double cosine_sim(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("cosine_sim: dimension mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na < 1e-24 || nb < 1e-24) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

namespace {

void check_table(const EmbeddingTable& t) {
  if (t.size() < 2) throw ArgumentError("embedding gap: need at least 2 subjects");
  if (t[0].size() < 2) throw ArgumentError("embedding gap: need at least 2 modalities");
}

}  // namespace

GapStats anatomy_gap(const EmbeddingTable& fs, int pair_samples, Rng rng) {
  check_table(fs);
  const int subjects = static_cast<int>(fs.size());
  const int m = static_cast<int>(fs[0].size());
  GapStats st;
  double within = 0, across = 0;
  for (int k = 0; k < pair_samples; ++k) {
    int p = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(subjects)));
    int q = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(subjects - 1)));
    if (q >= p) ++q;
    int i = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(m)));
    int j = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(m - 1)));
    if (j >= i) ++j;
    within += cosine_sim(fs[static_cast<std::size_t>(p)][static_cast<std::size_t>(i)],
                         fs[static_cast<std::size_t>(p)][static_cast<std::size_t>(j)]);
    across += cosine_sim(fs[static_cast<std::size_t>(p)][static_cast<std::size_t>(i)],
                         fs[static_cast<std::size_t>(q)][static_cast<std::size_t>(i)]);
  }
  st.samples = pair_samples;
  st.within = within / pair_samples;
  st.across = across / pair_samples;
  st.gap = st.within - st.across;
  return st;
}

GapStats modality_gap(const EmbeddingTable& z, int pair_samples, Rng rng) {
  check_table(z);
  const int subjects = static_cast<int>(z.size());
  const int m = static_cast<int>(z[0].size());
  GapStats st;
  double within = 0, across = 0;
  for (int k = 0; k < pair_samples; ++k) {
    int p = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(subjects)));
    int q = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(subjects - 1)));
    if (q >= p) ++q;
    int i = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(m)));
    int j = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(m - 1)));
    if (j >= i) ++j;
    // Same modality, different subjects should agree...
    within += cosine_sim(z[static_cast<std::size_t>(p)][static_cast<std::size_t>(i)],
                         z[static_cast<std::size_t>(q)][static_cast<std::size_t>(i)]);
    // ...more than different modalities of the same subject.
    across += cosine_sim(z[static_cast<std::size_t>(p)][static_cast<std::size_t>(i)],
                         z[static_cast<std::size_t>(p)][static_cast<std::size_t>(j)]);
  }
  st.samples = pair_samples;
  st.within = within / pair_samples;
  st.across = across / pair_samples;
  st.gap = st.within - st.across;
  return st;
}

double silhouette_cosine(const std::vector<std::vector<double>>& points,
                         const std::vector<int>& labels) {
  const std::size_t n = points.size();
  if (n != labels.size() || n < 2) throw ArgumentError("silhouette: bad inputs");
  int max_label = 0;
  for (int l : labels) max_label = std::max(max_label, l);
  const int k = max_label + 1;
  std::vector<int> cluster_size(static_cast<std::size_t>(k), 0);
  for (int l : labels) ++cluster_size[static_cast<std::size_t>(l)];

  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double d = 1.0 - cosine_sim(points[i], points[j]);
      dist[i * n + j] = dist[j * n + i] = d;
    }

  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int li = labels[i];
    if (cluster_size[static_cast<std::size_t>(li)] < 2) continue;  // convention: s = 0
    std::vector<double> mean_to(static_cast<std::size_t>(k), 0.0);
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) mean_to[static_cast<std::size_t>(labels[j])] += dist[i * n + j];
    double a = mean_to[static_cast<std::size_t>(li)] /
               (cluster_size[static_cast<std::size_t>(li)] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int l = 0; l < k; ++l) {
      if (l == li || cluster_size[static_cast<std::size_t>(l)] == 0) continue;
      b = std::min(b, mean_to[static_cast<std::size_t>(l)] / cluster_size[static_cast<std::size_t>(l)]);
    }
    if (std::isinf(b)) continue;
    total += (b - a) / std::max(a, b);
  }
  return total / static_cast<double>(n);
}

double logistic_probe_accuracy(const std::vector<std::vector<double>>& points,
                               const std::vector<int>& labels, Rng rng) {
  const std::size_t n = points.size();
  if (n < 4 || n != labels.size()) throw ArgumentError("probe: need at least 4 labeled points");
  const std::size_t f = points[0].size();
  int k = 0;
  for (int l : labels) k = std::max(k, l + 1);

  // Seeded stratified 50/50 split.
  std::vector<std::vector<std::size_t>> by_label(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < n; ++i) by_label[static_cast<std::size_t>(labels[i])].push_back(i);
  std::vector<std::size_t> train_idx, test_idx;
  for (auto& group : by_label) {
    rng.shuffle(group);
    for (std::size_t i = 0; i < group.size(); ++i)
      (i % 2 == 0 ? train_idx : test_idx).push_back(group[i]);
  }
  if (train_idx.empty() || test_idx.empty()) throw ArgumentError("probe: degenerate split");

  // Standardize on training statistics.
  std::vector<double> mean(f, 0.0), stdv(f, 0.0);
  for (auto i : train_idx)
    for (std::size_t j = 0; j < f; ++j) mean[j] += points[i][j];
  for (auto& v : mean) v /= static_cast<double>(train_idx.size());
  for (auto i : train_idx)
    for (std::size_t j = 0; j < f; ++j) {
      double d = points[i][j] - mean[j];
      stdv[j] += d * d;
    }
  for (auto& v : stdv) v = std::sqrt(v / static_cast<double>(train_idx.size())) + 1e-8;

  auto feat = [&](std::size_t i, std::size_t j) { return (points[i][j] - mean[j]) / stdv[j]; };

  // Full-batch gradient descent on the multinomial logistic objective with a
  // light ridge term; the problem is convex so a fixed schedule converges.
  std::vector<double> wgt(static_cast<std::size_t>(k) * (f + 1), 0.0);
  const double lr = 0.5, l2 = 1e-4;
  std::vector<double> logits(static_cast<std::size_t>(k));
  std::vector<double> grad(wgt.size());
  for (int iter = 0; iter < 2000; ++iter) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (auto i : train_idx) {
      double mx = -1e300;
      for (int c = 0; c < k; ++c) {
        double s = wgt[static_cast<std::size_t>(c) * (f + 1) + f];
        for (std::size_t j = 0; j < f; ++j) s += wgt[static_cast<std::size_t>(c) * (f + 1) + j] * feat(i, j);
        logits[static_cast<std::size_t>(c)] = s;
        mx = std::max(mx, s);
      }
      double sum = 0;
      for (int c = 0; c < k; ++c) {
        logits[static_cast<std::size_t>(c)] = std::exp(logits[static_cast<std::size_t>(c)] - mx);
        sum += logits[static_cast<std::size_t>(c)];
      }
      for (int c = 0; c < k; ++c) {
        const double p = logits[static_cast<std::size_t>(c)] / sum;
        const double err = p - (labels[i] == c ? 1.0 : 0.0);
        double* gr = grad.data() + static_cast<std::size_t>(c) * (f + 1);
        for (std::size_t j = 0; j < f; ++j) gr[j] += err * feat(i, j);
        gr[f] += err;
      }
    }
    const double inv_n = 1.0 / static_cast<double>(train_idx.size());
    for (std::size_t j = 0; j < wgt.size(); ++j)
      wgt[j] -= lr * (grad[j] * inv_n + l2 * wgt[j]);
  }

  int correct = 0;
  for (auto i : test_idx) {
    int best = 0;
    double best_s = -1e300;
    for (int c = 0; c < k; ++c) {
      double s = wgt[static_cast<std::size_t>(c) * (f + 1) + f];
      for (std::size_t j = 0; j < f; ++j) s += wgt[static_cast<std::size_t>(c) * (f + 1) + j] * feat(i, j);
      if (s > best_s) {
        best_s = s;
        best = c;
      }
    }
    correct += best == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(test_idx.size());
}

std::vector<double> pooled_anatomy_features(const Tensor<float>& s) {
  if (s.rank() != 3) throw ShapeError("pooled_anatomy_features: expected [C,H,W]");
  const Index c = s.dim(0), h = s.dim(1), w = s.dim(2);
  if (h < 8 || w < 8) throw ShapeError("pooled_anatomy_features: map smaller than the 8x8 pool");
  const Index ho = h / 8, wo = w / 8;
  std::vector<double> out(static_cast<std::size_t>(c * ho * wo));
  std::size_t at = 0;
  for (Index ci = 0; ci < c; ++ci)
    for (Index oy = 0; oy < ho; ++oy)
      for (Index ox = 0; ox < wo; ++ox) {
        float best = s.at3(ci, oy * 8, ox * 8);
        for (Index ky = 0; ky < 8; ++ky)
          for (Index kx = 0; kx < 8; ++kx)
            best = std::max(best, s.at3(ci, oy * 8 + ky, ox * 8 + kx));
        out[at++] = static_cast<double>(best);
      }
  return out;
}

namespace {

Tensor<float> as_batch1(const Tensor<float>& chw) {
  return chw.reshaped({1, chw.dim(0), chw.dim(1), chw.dim(2)});
}

Tensor<float> from_batch1(const Tensor<float>& nchw) {
  return nchw.reshaped({nchw.dim(1), nchw.dim(2), nchw.dim(3)});
}

struct SplitEmbeddings {
  EmbeddingTable z, fs;                 // [subject][modality]
  std::vector<Tensor<float>> s_maps;    // flattened per (subject, modality)
  std::vector<int> subject_ids, modality_ids;
  std::vector<std::string> subject_names;
  std::vector<std::string> splits;
};

SplitEmbeddings compute_embeddings(Model<float>& model, const Dataset& ds,
                                   const std::string& split, bool keep_maps) {
  const auto idx = ds.split_indices(split);
  if (idx.empty()) throw ArgumentError("split '" + split + "' is empty");
  const int m = ds.manifest.m;
  SplitEmbeddings out;
  out.z.resize(idx.size());
  out.fs.resize(idx.size());
  for (std::size_t si = 0; si < idx.size(); ++si) {
    const auto& sample = ds.samples[static_cast<std::size_t>(idx[si])];
    out.z[si].resize(static_cast<std::size_t>(m));
    out.fs[si].resize(static_cast<std::size_t>(m));
    for (int mi = 0; mi < m; ++mi) {
      Tensor<float> x = as_batch1(sample.images[static_cast<std::size_t>(mi)]);
      Tensor<float> s = from_batch1(encode_anatomy_eval(model, x, mi));
      Tensor<float> z = encode_modality_eval(model, x, mi);
      auto& zrow = out.z[si][static_cast<std::size_t>(mi)];
      zrow.resize(static_cast<std::size_t>(z.numel()));
      for (Index i = 0; i < z.numel(); ++i) zrow[static_cast<std::size_t>(i)] = z[i];
      out.fs[si][static_cast<std::size_t>(mi)] = pooled_anatomy_features(s);
      if (keep_maps) out.s_maps.push_back(s);
      out.subject_ids.push_back(static_cast<int>(si));
      out.modality_ids.push_back(mi);
      out.subject_names.push_back(sample.subject_id);
      out.splits.push_back(sample.split);
    }
  }
  return out;
}

}  // namespace

ReconReport cross_recon_eval(Model<float>& model, const Dataset& ds, const std::string& split) {
  const auto idx = ds.split_indices(split);
  if (idx.empty()) throw ArgumentError("split '" + split + "' is empty");
  const int m = ds.manifest.m;
  ReconReport report;
  report.split = split;
  report.subjects = static_cast<int>(idx.size());
  report.per_modality.resize(static_cast<std::size_t>(m));

  std::vector<int> cross_counts(static_cast<std::size_t>(m), 0);
  for (int subject : idx) {
    const auto& sample = ds.samples[static_cast<std::size_t>(subject)];
    // One anatomy and one modality code per input image.
    std::vector<Tensor<float>> s(static_cast<std::size_t>(m)), z(static_cast<std::size_t>(m));
    for (int mi = 0; mi < m; ++mi) {
      Tensor<float> x = as_batch1(sample.images[static_cast<std::size_t>(mi)]);
      s[static_cast<std::size_t>(mi)] = encode_anatomy_eval(model, x, mi);
      z[static_cast<std::size_t>(mi)] = encode_modality_eval(model, x, mi);
    }
    for (int j = 0; j < m; ++j) {
      const Tensor<float>& target = sample.images[static_cast<std::size_t>(j)];
      const double range = image_data_range(target);
      auto& slot = report.per_modality[static_cast<std::size_t>(j)];
      for (int i = 0; i < m; ++i) {
        Tensor<float> synth = from_batch1(
            decode_eval(model, s[static_cast<std::size_t>(i)], z[static_cast<std::size_t>(j)]));
        const double p = psnr(synth, target, range).value;
        const double ss = ssim(synth, target, range);
        if (i == j) {
          slot.self_psnr += p;
          slot.self_ssim += ss;
        } else {
          slot.cross_psnr += p;
          slot.cross_ssim += ss;
          ++cross_counts[static_cast<std::size_t>(j)];
        }
      }
    }
  }
  for (int j = 0; j < m; ++j) {
    auto& slot = report.per_modality[static_cast<std::size_t>(j)];
    slot.self_psnr /= report.subjects;
    slot.self_ssim /= report.subjects;
    slot.cross_psnr /= std::max(1, cross_counts[static_cast<std::size_t>(j)]);
    slot.cross_ssim /= std::max(1, cross_counts[static_cast<std::size_t>(j)]);
  }
  return report;
}

DisentReport disentanglement_eval(Model<float>& model, const Dataset& ds, const std::string& split,
                                  int pair_samples) {
  const auto idx = ds.split_indices(split);
  if (static_cast<int>(idx.size()) < 4)
    throw ArgumentError("disentanglement eval needs at least 4 subjects in split '" + split + "'");
  if (pair_samples < 1) throw ArgumentError("pair_samples must be positive");
  SplitEmbeddings emb = compute_embeddings(model, ds, split, false);

  DisentReport rep;
  rep.split = split;
  rep.subjects = static_cast<int>(idx.size());
  rep.images = static_cast<int>(emb.subject_ids.size());
  // Deterministic given checkpoint and split.
  Rng rng(0x5eedf00dULL);
  rep.s_gap = anatomy_gap(emb.fs, pair_samples, rng.derive("sgap"));
  rep.z_gap = modality_gap(emb.z, pair_samples, rng.derive("zgap"));

  std::vector<std::vector<double>> z_points, fs_points;
  for (std::size_t si = 0; si < emb.z.size(); ++si)
    for (std::size_t mi = 0; mi < emb.z[si].size(); ++mi) {
      z_points.push_back(emb.z[si][mi]);
      fs_points.push_back(emb.fs[si][mi]);
    }
  std::vector<int> modality_labels, subject_labels;
  for (std::size_t si = 0; si < emb.z.size(); ++si)
    for (std::size_t mi = 0; mi < emb.z[si].size(); ++mi) {
      subject_labels.push_back(static_cast<int>(si));
      modality_labels.push_back(static_cast<int>(mi));
    }
  rep.silhouette_z_modality = silhouette_cosine(z_points, modality_labels);
  rep.silhouette_fs_subject = silhouette_cosine(fs_points, subject_labels);
  rep.probe_z_accuracy = logistic_probe_accuracy(z_points, modality_labels, rng.derive("probe_z"));
  rep.probe_fs_accuracy = logistic_probe_accuracy(fs_points, modality_labels, rng.derive("probe_fs"));
  return rep;
}

void export_embeddings(Model<float>& model, const Dataset& ds, const std::string& split,
                       const std::string& out_dir) {
  SplitEmbeddings emb = compute_embeddings(model, ds, split, true);
  fs::create_directories(out_dir);

  const Index rows = static_cast<Index>(emb.subject_ids.size());
  const Index zdim = static_cast<Index>(emb.z[0][0].size());
  const Index fdim = static_cast<Index>(emb.fs[0][0].size());
  Tensor<float> zmat({rows, zdim}), fmat({rows, fdim});
  Index r = 0;
  for (std::size_t si = 0; si < emb.z.size(); ++si)
    for (std::size_t mi = 0; mi < emb.z[si].size(); ++mi, ++r) {
      for (Index j = 0; j < zdim; ++j)
        zmat.at2(r, j) = static_cast<float>(emb.z[si][mi][static_cast<std::size_t>(j)]);
      for (Index j = 0; j < fdim; ++j)
        fmat.at2(r, j) = static_cast<float>(emb.fs[si][mi][static_cast<std::size_t>(j)]);
    }
  write_tensor_file((fs::path(out_dir) / "z.dmrt").string(), zmat);
  write_tensor_file((fs::path(out_dir) / "fs.dmrt").string(), fmat);

  // Fused rep per subject over all its modalities.
  fs::create_directories((fs::path(out_dir) / "fused").string());
  const int m = ds.manifest.m;
  Index at = 0;
  for (std::size_t si = 0; si < emb.z.size(); ++si) {
    std::vector<Tensor<float>> maps;
    for (int mi = 0; mi < m; ++mi) maps.push_back(emb.s_maps[static_cast<std::size_t>(at++)]);
    Tensor<float> fused = fuse(maps);
    write_tensor_file((fs::path(out_dir) / "fused" / (emb.subject_names[si * static_cast<std::size_t>(m)] + ".dmrt")).string(),
                      fused);
  }

  std::string csv = "subject_id,modality_id,split\n";
  for (std::size_t i = 0; i < emb.subject_names.size(); ++i)
    csv += emb.subject_names[i] + "," + std::to_string(emb.modality_ids[i]) + "," + emb.splits[i] +
           "\n";
  write_text_file((fs::path(out_dir) / "labels.csv").string(), csv);
}

json recon_report_to_json(const ReconReport& r, const std::string& config_hash) {
  json per = json::array();
  for (std::size_t j = 0; j < r.per_modality.size(); ++j) {
    const auto& s = r.per_modality[j];
    per.push_back(json{{"modality", j},
                       {"self_psnr", s.self_psnr},
                       {"self_ssim", s.self_ssim},
                       {"cross_psnr", s.cross_psnr},
                       {"cross_ssim", s.cross_ssim}});
  }
  return json{{"kind", "recon"},
              {"split", r.split},
              {"subjects", r.subjects},
              {"per_modality", per},
              {"config_hash", config_hash}};
}

json disent_report_to_json(const DisentReport& r, const std::string& config_hash) {
  auto gap = [](const GapStats& g) {
    return json{{"within", g.within}, {"across", g.across}, {"gap", g.gap}, {"samples", g.samples}};
  };
  return json{{"kind", "disent"},
              {"split", r.split},
              {"subjects", r.subjects},
              {"images", r.images},
              {"s_gap", gap(r.s_gap)},
              {"z_gap", gap(r.z_gap)},
              {"silhouette_z_modality", r.silhouette_z_modality},
              {"silhouette_fs_subject", r.silhouette_fs_subject},
              {"probe_z_accuracy", r.probe_z_accuracy},
              {"probe_fs_accuracy", r.probe_fs_accuracy},
              {"config_hash", config_hash}};
}

}  // namespace dmrl
