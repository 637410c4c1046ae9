#include "dmrl/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include <json.hpp>

#include "dmrl/tensor_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dmrl {

namespace {

void validate_label_params(const LabelMapParams& p) {
  if (p.classes < 3)
    throw ConfigError("label map needs at least 3 classes, got " + std::to_string(p.classes));
  if (p.height < 32 || p.width < 32)
    throw ConfigError("label map smaller than 32x32: " + std::to_string(p.height) + "x" +
                      std::to_string(p.width));
  if (p.p_lesion < 0.0 || p.p_lesion > 1.0) throw ConfigError("p_lesion must be in [0,1]");
}

// Smooth zero-mean unit-std field with the given correlation length:
// seeded coarse grid of normals, bilinearly upsampled, then standardized.
Tensor<float> smooth_field(Index h, Index w, double smoothness, Rng rng) {
  const double step = std::max(2.0, smoothness);
  const Index gh = static_cast<Index>(std::ceil(static_cast<double>(h) / step)) + 2;
  const Index gw = static_cast<Index>(std::ceil(static_cast<double>(w) / step)) + 2;
  std::vector<double> grid(static_cast<std::size_t>(gh * gw));
  for (auto& v : grid) v = rng.normal();

  Tensor<float> out({h, w});
  double sum = 0, sum2 = 0;
  for (Index y = 0; y < h; ++y) {
    double gy = static_cast<double>(y) / step;
    Index y0 = static_cast<Index>(gy);
    double fy = gy - static_cast<double>(y0);
    for (Index x = 0; x < w; ++x) {
      double gx = static_cast<double>(x) / step;
      Index x0 = static_cast<Index>(gx);
      double fx = gx - static_cast<double>(x0);
      double v00 = grid[static_cast<std::size_t>(y0 * gw + x0)];
      double v01 = grid[static_cast<std::size_t>(y0 * gw + x0 + 1)];
      double v10 = grid[static_cast<std::size_t>((y0 + 1) * gw + x0)];
      double v11 = grid[static_cast<std::size_t>((y0 + 1) * gw + x0 + 1)];
      double v = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
      out.at2(y, x) = static_cast<float>(v);
      sum += v;
      sum2 += v * v;
    }
  }
  const double n = static_cast<double>(h * w);
  const double mean = sum / n;
  const double var = std::max(sum2 / n - mean * mean, 1e-12);
  const double inv_std = 1.0 / std::sqrt(var);
  for (Index i = 0; i < out.numel(); ++i)
    out[i] = static_cast<float>((out[i] - mean) * inv_std);
  return out;
}

std::string subject_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "sub%03d", index);
  return buf;
}

// Largest-remainder split counts; ties broken by split order.
std::vector<int> split_counts(int n, const std::vector<double>& fractions) {
  double total = 0;
  for (double f : fractions) {
    if (f < 0) throw ConfigError("split fractions must be nonnegative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw ConfigError("split fractions must sum to 1, got " + std::to_string(total));
  std::vector<int> counts(fractions.size());
  std::vector<std::pair<double, std::size_t>> rema;
  int assigned = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    double exact = fractions[i] * n;
    counts[i] = static_cast<int>(std::floor(exact + 1e-9));
    assigned += counts[i];
    rema.push_back({exact - counts[i], i});
  }
  std::stable_sort(rema.begin(), rema.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int r = 0; r < n - assigned; ++r) counts[rema[static_cast<std::size_t>(r)].second] += 1;
  return counts;
}

json config_to_json(const GenConfig& c) {
  return json{{"num_subjects", c.num_subjects},
              {"modalities", c.modalities},
              {"height", c.height},
              {"width", c.width},
              {"classes", c.classes},
              {"channels", c.channels},
              {"p_lesion", c.p_lesion},
              {"noise_sigma", c.noise_sigma},
              {"bias_amplitude", c.bias_amplitude},
              {"bias_smoothness", c.bias_smoothness},
              {"split_fractions", c.split_fractions},
              {"seed", c.seed}};
}

GenConfig config_from_json(const json& j) {
  GenConfig c;
  c.num_subjects = j.at("num_subjects").get<int>();
  c.modalities = j.at("modalities").get<int>();
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  c.classes = j.at("classes").get<int>();
  c.channels = j.value("channels", 1);
  c.p_lesion = j.at("p_lesion").get<double>();
  c.noise_sigma = j.at("noise_sigma").get<double>();
  c.bias_amplitude = j.at("bias_amplitude").get<double>();
  c.bias_smoothness = j.at("bias_smoothness").get<double>();
  c.split_fractions = j.at("split_fractions").get<std::vector<double>>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

LabelMap generate_label_map(std::uint64_t seed, const LabelMapParams& params) {
  validate_label_params(params);
  Rng rng(seed);
  Rng blob_rng = rng.derive("blob");
  Rng lesion_rng = rng.derive("lesion");

  const Index h = params.height, w = params.width;
  const int k = params.classes;
  LabelMap lm;
  lm.height = h;
  lm.width = w;
  lm.num_classes = k;
  lm.labels = Tensor<std::int32_t>({h, w});

  const double span = static_cast<double>(std::min(h, w));
  const double cy = h / 2.0 + blob_rng.uniform(-0.15, 0.15) * h;
  const double cx = w / 2.0 + blob_rng.uniform(-0.15, 0.15) * w;

  // Radial harmonics give each subject a distinctly shaped outline; anatomy
  // is meant to vary strongly across subjects.
  constexpr int kHarmonics = 5;
  double amp[kHarmonics], phase[kHarmonics];
  for (int i = 0; i < kHarmonics; ++i) {
    amp[i] = blob_rng.uniform(-0.12, 0.12);
    phase[i] = blob_rng.uniform(0.0, 6.283185307179586);
  }
  // Per-subject nesting depths and wobbles for the inner rings.
  const int rings = k - 2;  // classes 1..K-2, outermost to innermost
  std::vector<double> ring_amp(static_cast<std::size_t>(rings)), ring_phase(static_cast<std::size_t>(rings)),
      ring_frac(static_cast<std::size_t>(rings));
  for (int r = 0; r < rings; ++r) {
    ring_amp[static_cast<std::size_t>(r)] = blob_rng.uniform(-0.08, 0.08);
    ring_phase[static_cast<std::size_t>(r)] = blob_rng.uniform(0.0, 6.283185307179586);
    ring_frac[static_cast<std::size_t>(r)] =
        1.0 - static_cast<double>(r) / rings + blob_rng.uniform(-0.08, 0.08);
  }

  double base_r = span * blob_rng.uniform(0.24, 0.40);
  const Index min_background = h * w / 10;
  for (;;) {  // shrink until the background floor holds
    Index background = 0;
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        const double dy = y - cy, dx = x - cx;
        const double d = std::sqrt(dy * dy + dx * dx);
        const double theta = std::atan2(dy, dx);
        double wobble = 1.0;
        for (int i = 0; i < kHarmonics; ++i) wobble += amp[i] * std::cos((i + 1) * theta + phase[i]);
        const double outline = base_r * std::clamp(wobble, 0.35, 1.5);
        std::int32_t label = 0;
        if (d < outline) {
          label = 1;
          for (int r = 1; r < rings; ++r) {
            const double boundary =
                outline * ring_frac[static_cast<std::size_t>(r)] *
                (1.0 + ring_amp[static_cast<std::size_t>(r - 1)] *
                           std::cos(2 * theta + ring_phase[static_cast<std::size_t>(r - 1)]));
            if (d < boundary) label = static_cast<std::int32_t>(r + 1);
          }
        }
        lm.labels.at2(y, x) = label;
        background += label == 0;
      }
    }
    if (background >= min_background) break;
    base_r *= 0.92;
  }

  if (lesion_rng.bernoulli(params.p_lesion)) {
    // Stamp a lesion disk (class K-1) centered on tissue, away from borders.
    std::vector<Index> candidates;
    const Index margin = 6;
    for (Index y = margin; y < h - margin; ++y)
      for (Index x = margin; x < w - margin; ++x)
        if (lm.labels.at2(y, x) >= 1) candidates.push_back(y * w + x);
    if (!candidates.empty()) {
      Index pick = static_cast<Index>(lesion_rng.uniform_int(candidates.size()));
      Index cyl = candidates[static_cast<std::size_t>(pick)] / w;
      Index cxl = candidates[static_cast<std::size_t>(pick)] % w;
      const double radius = lesion_rng.uniform(2.5, 4.5);
      for (Index y = cyl - 5; y <= cyl + 5; ++y)
        for (Index x = cxl - 5; x <= cxl + 5; ++x) {
          if (y < 0 || y >= h || x < 0 || x >= w) continue;
          double dy = static_cast<double>(y - cyl), dx = static_cast<double>(x - cxl);
          if (dy * dy + dx * dx <= radius * radius)
            lm.labels.at2(y, x) = static_cast<std::int32_t>(k - 1);
        }
    }
  }
  return lm;
}

Tensor<float> render_modality(const LabelMap& label_map, const ModalityProfile& profile,
                              std::uint64_t noise_seed, int channels) {
  if (static_cast<int>(profile.class_intensities.size()) != label_map.num_classes)
    throw ShapeError("render_modality: profile has " +
                     std::to_string(profile.class_intensities.size()) + " intensities for " +
                     std::to_string(label_map.num_classes) + " classes");
  const Index h = label_map.height, w = label_map.width;
  Rng rng(noise_seed);
  Tensor<float> bias({h, w});
  if (profile.bias_amplitude > 0.0)
    bias = smooth_field(h, w, profile.bias_smoothness, rng.derive("bias"));

  Tensor<float> out({channels, h, w});
  for (int c = 0; c < channels; ++c) {
    Rng noise = rng.derive("noise").derive(static_cast<std::uint64_t>(c));
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        const auto label = static_cast<std::size_t>(label_map.labels.at2(y, x));
        double v = profile.class_intensities[label];
        if (profile.bias_amplitude > 0.0)
          v *= 1.0 + profile.bias_amplitude * static_cast<double>(bias.at2(y, x));
        if (profile.noise_sigma > 0.0) v += profile.noise_sigma * noise.normal();
        out.at3(c, y, x) = static_cast<float>(v);
      }
    }
  }
  return out;
}

void standardize_image(Tensor<float>& img) {
  double sum = 0, sum2 = 0;
  for (Index i = 0; i < img.numel(); ++i) {
    sum += static_cast<double>(img[i]);
    sum2 += static_cast<double>(img[i]) * static_cast<double>(img[i]);
  }
  const double n = static_cast<double>(img.numel());
  const double mean = sum / n;
  const double std_dev = std::sqrt(std::max(sum2 / n - mean * mean, 1e-12));
  for (Index i = 0; i < img.numel(); ++i)
    img[i] = static_cast<float>((static_cast<double>(img[i]) - mean) / std_dev);
}

std::vector<ModalityProfile> make_profiles(const GenConfig& cfg) {
  const int k = cfg.classes;
  std::vector<double> grid(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i)
    grid[static_cast<std::size_t>(i)] = -1.5 + 3.0 * i / std::max(1, k - 1);
  Rng root = Rng(cfg.seed).derive("profiles");
  std::vector<ModalityProfile> profiles;
  for (int m = 0; m < cfg.modalities; ++m) {
    Rng rng = root.derive(static_cast<std::uint64_t>(m));
    std::vector<int> perm(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) perm[static_cast<std::size_t>(i)] = i;
    rng.shuffle(perm);
    ModalityProfile p;
    p.modality_id = m;
    p.bias_amplitude = cfg.bias_amplitude;
    p.bias_smoothness = cfg.bias_smoothness;
    p.noise_sigma = cfg.noise_sigma;
    p.class_intensities.resize(static_cast<std::size_t>(k));
    for (int c = 0; c < k; ++c)
      p.class_intensities[static_cast<std::size_t>(c)] =
          grid[static_cast<std::size_t>(perm[static_cast<std::size_t>(c)])] + rng.uniform(-0.05, 0.05);
    profiles.push_back(std::move(p));
  }
  return profiles;
}

DatasetManifest build_dataset(const GenConfig& cfg, const std::string& out_dir) {
  if (cfg.modalities < 2)
    throw ConfigError("dataset needs at least 2 modalities, got " + std::to_string(cfg.modalities));
  if (cfg.num_subjects < 1) throw ConfigError("num_subjects must be positive");
  if (cfg.channels < 1) throw ConfigError("channels must be positive");
  if (cfg.noise_sigma > 0.3) throw ConfigError("noise_sigma must be <= 0.3");
  LabelMapParams lp{cfg.height, cfg.width, cfg.classes, cfg.p_lesion};
  validate_label_params(lp);

  const std::vector<int> counts = split_counts(cfg.num_subjects, cfg.split_fractions);
  const char* split_names[3] = {"train", "val", "test"};
  if (cfg.split_fractions.size() != 3)
    throw ConfigError("split_fractions must have 3 entries (train, val, test)");

  Rng root(cfg.seed);
  std::vector<int> order(static_cast<std::size_t>(cfg.num_subjects));
  for (int i = 0; i < cfg.num_subjects; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng split_rng = root.derive("split");
  split_rng.shuffle(order);
  std::vector<std::string> split_of(static_cast<std::size_t>(cfg.num_subjects));
  {
    int at = 0;
    for (int s = 0; s < 3; ++s)
      for (int i = 0; i < counts[static_cast<std::size_t>(s)]; ++i)
        split_of[static_cast<std::size_t>(order[static_cast<std::size_t>(at++)])] = split_names[s];
  }

  const auto profiles = make_profiles(cfg);
  fs::create_directories(out_dir);

  DatasetManifest manifest;
  manifest.version = 1;
  manifest.num_subjects = cfg.num_subjects;
  manifest.m = cfg.modalities;
  manifest.height = cfg.height;
  manifest.width = cfg.width;
  manifest.classes = cfg.classes;
  manifest.channels = cfg.channels;
  manifest.generator_seed = cfg.seed;
  manifest.config = cfg;
  manifest.root_dir = out_dir;

  std::vector<std::string> written;
  auto write_blob = [&](const std::string& rel, const std::string& blob) -> std::uint32_t {
    const std::string path = (fs::path(out_dir) / rel).string();
    write_text_file(path, blob);
    written.push_back(path);
    return crc32(blob);
  };

  try {
    for (int si = 0; si < cfg.num_subjects; ++si) {
      Rng subj = root.derive("subject").derive(static_cast<std::uint64_t>(si));
      LabelMap lm = generate_label_map(subj.derive("label").next_u64(), lp);

      SubjectRecord rec;
      rec.subject_id = subject_name(si);
      rec.split = split_of[static_cast<std::size_t>(si)];
      rec.label_path = rec.subject_id + "_label.dmrt";
      rec.label_crc = write_blob(rec.label_path, serialize_tensor(lm.labels));
      for (int mi = 0; mi < cfg.modalities; ++mi) {
        const std::uint64_t noise_seed =
            subj.derive("noise").derive(static_cast<std::uint64_t>(mi)).next_u64();
        Tensor<float> img =
            render_modality(lm, profiles[static_cast<std::size_t>(mi)], noise_seed, cfg.channels);
        standardize_image(img);
        std::string rel = rec.subject_id + "_mod" + std::to_string(mi) + ".dmrt";
        rec.image_crcs.push_back(write_blob(rel, serialize_tensor(img)));
        rec.image_paths.push_back(std::move(rel));
      }
      manifest.subjects.push_back(std::move(rec));
    }
    write_text_file((fs::path(out_dir) / "manifest.json").string(), manifest_to_json(manifest));
  } catch (...) {
    // Partial-output cleanup: the manifest is written last, so a dataset
    // without one is never half-usable.
    for (const auto& p : written) {
      std::error_code ec;
      fs::remove(p, ec);
    }
    throw;
  }
  return manifest;
}

std::string manifest_to_json(const DatasetManifest& m) {
  json subjects = json::array();
  for (const auto& s : m.subjects) {
    subjects.push_back(json{{"subject_id", s.subject_id},
                            {"label_path", s.label_path},
                            {"image_paths", s.image_paths},
                            {"split", s.split},
                            {"label_crc", s.label_crc},
                            {"image_crcs", s.image_crcs}});
  }
  json j{{"version", m.version},
         {"num_subjects", m.num_subjects},
         {"m", m.m},
         {"height", m.height},
         {"width", m.width},
         {"classes", m.classes},
         {"channels", m.channels},
         {"generator_seed", m.generator_seed},
         {"subjects", subjects},
         {"config", config_to_json(m.config)}};
  return j.dump(2) + "\n";
}

DatasetManifest load_manifest(const std::string& manifest_path) {
  json j;
  try {
    j = json::parse(read_text_file(manifest_path));
  } catch (const json::exception& e) {
    throw DataError("invalid manifest JSON " + manifest_path + ": " + e.what());
  }
  DatasetManifest m;
  try {
    m.version = j.at("version").get<int>();
    if (m.version != 1) throw DataError("unsupported manifest version");
    m.num_subjects = j.at("num_subjects").get<int>();
    m.m = j.at("m").get<int>();
    m.height = j.at("height").get<int>();
    m.width = j.at("width").get<int>();
    m.classes = j.at("classes").get<int>();
    m.channels = j.value("channels", 1);
    m.generator_seed = j.at("generator_seed").get<std::uint64_t>();
    m.config = config_from_json(j.at("config"));
    for (const auto& s : j.at("subjects")) {
      SubjectRecord rec;
      rec.subject_id = s.at("subject_id").get<std::string>();
      rec.label_path = s.at("label_path").get<std::string>();
      rec.image_paths = s.at("image_paths").get<std::vector<std::string>>();
      rec.split = s.at("split").get<std::string>();
      rec.label_crc = s.at("label_crc").get<std::uint32_t>();
      rec.image_crcs = s.at("image_crcs").get<std::vector<std::uint32_t>>();
      m.subjects.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    throw DataError("manifest " + manifest_path + " missing field: " + e.what());
  }
  if (m.m < 2) throw DataError("manifest declares fewer than 2 modalities");
  m.root_dir = fs::path(manifest_path).parent_path().string();
  return m;
}

Dataset load_dataset(const std::string& manifest_path) {
  Dataset ds;
  ds.manifest = load_manifest(manifest_path);
  const auto& m = ds.manifest;
  for (const auto& rec : m.subjects) {
    if (rec.split != "train" && rec.split != "val" && rec.split != "test")
      throw DataError("subject " + rec.subject_id + " has unknown split '" + rec.split + "'");
    if (static_cast<int>(rec.image_paths.size()) != m.m)
      throw DataError("subject " + rec.subject_id + " does not list " + std::to_string(m.m) +
                      " modalities");
    MultiModalSample sample;
    sample.subject_id = rec.subject_id;
    sample.split = rec.split;

    auto load_blob = [&](const std::string& rel, std::uint32_t want_crc) -> std::string {
      const std::string path = (fs::path(m.root_dir) / rel).string();
      std::string blob;
      try {
        blob = read_text_file(path);
      } catch (const DataError&) {
        throw DataError("corrupt dataset: missing file " + path);
      }
      if (crc32(blob) != want_crc)
        throw DataError("corrupt dataset: checksum mismatch in " + path);
      return blob;
    };

    std::string lb = load_blob(rec.label_path, rec.label_crc);
    sample.label_map.labels = parse_tensor_i32(lb, rec.label_path);
    if (sample.label_map.labels.rank() != 2 || sample.label_map.labels.dim(0) != m.height ||
        sample.label_map.labels.dim(1) != m.width)
      throw DataError("corrupt dataset: label shape mismatch in " + rec.label_path);
    sample.label_map.height = m.height;
    sample.label_map.width = m.width;
    sample.label_map.num_classes = m.classes;
    for (Index i = 0; i < sample.label_map.labels.numel(); ++i) {
      auto v = sample.label_map.labels[i];
      if (v < 0 || v >= m.classes)
        throw DataError("corrupt dataset: label value out of range in " + rec.label_path);
    }

    for (int mi = 0; mi < m.m; ++mi) {
      const auto& rel = rec.image_paths[static_cast<std::size_t>(mi)];
      std::string blob = load_blob(rel, rec.image_crcs[static_cast<std::size_t>(mi)]);
      Tensor<float> img = parse_tensor_f32(blob, rel);
      if (img.rank() != 3 || img.dim(0) != m.channels || img.dim(1) != m.height ||
          img.dim(2) != m.width)
        throw DataError("corrupt dataset: image shape mismatch in " + rel);
      if (!img.all_finite()) throw DataError("corrupt dataset: non-finite values in " + rel);
      sample.images.push_back(std::move(img));
    }
    ds.samples.push_back(std::move(sample));
  }
  return ds;
}

}  // namespace dmrl
