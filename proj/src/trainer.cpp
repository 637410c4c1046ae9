#include "dmrl/trainer.hpp"

#include <atomic>
#include <cmath>
#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;

namespace dmrl {

namespace {
std::atomic<bool> g_stop_requested{false};
}

void request_training_stop() { g_stop_requested = true; }
void clear_training_stop() { g_stop_requested = false; }

std::vector<Index> sample_pairs(int batch_size, Rng& rng) {
  if (batch_size < 2) throw ArgumentError("sample_pairs: need at least 2 subjects");
  std::vector<Index> perm(static_cast<std::size_t>(batch_size));
  for (;;) {
    for (int i = 0; i < batch_size; ++i) perm[static_cast<std::size_t>(i)] = i;
    rng.shuffle(perm);
    bool ok = true;
    for (int i = 0; i < batch_size; ++i)
      if (perm[static_cast<std::size_t>(i)] == i) {
        ok = false;
        break;
      }
    if (ok) return perm;
  }
}

Adam::Adam(const std::vector<NamedTensor<float>>& params, double lr, double weight_decay)
    : params_(params), lr_(lr), weight_decay_(weight_decay) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor->shape());
    v_.emplace_back(p.tensor->shape());
  }
}

void Adam::step(const std::vector<Tensor<float>>& grads) {
  if (grads.size() != params_.size()) throw ArgumentError("Adam::step: gradient count mismatch");
  ++steps_;
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    Tensor<float>& p = *params_[i].tensor;
    const Tensor<float>& g = grads[i];
    Tensor<float>& m = m_[i];
    Tensor<float>& v = v_[i];
    for (Index k = 0; k < p.numel(); ++k) {
      double gk = static_cast<double>(g[k]) + weight_decay_ * static_cast<double>(p[k]);
      double mk = beta1 * static_cast<double>(m[k]) + (1.0 - beta1) * gk;
      double vk = beta2 * static_cast<double>(v[k]) + (1.0 - beta2) * gk * gk;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      p[k] -= static_cast<float>(lr_ * (mk / bc1) / (std::sqrt(vk / bc2) + eps));
    }
  }
}

std::vector<std::pair<std::string, const Tensor<float>*>> Adam::state_tensors() const {
  std::vector<std::pair<std::string, const Tensor<float>*>> out;
  for (std::size_t i = 0; i < m_.size(); ++i) {
    out.push_back({"opt.m." + params_[i].name, &m_[i]});
    out.push_back({"opt.v." + params_[i].name, &v_[i]});
  }
  return out;
}

void Adam::restore(const std::map<std::string, Tensor<float>>& extra, std::int64_t steps) {
  for (std::size_t i = 0; i < m_.size(); ++i) {
    auto im = extra.find("opt.m." + params_[i].name);
    auto iv = extra.find("opt.v." + params_[i].name);
    if (im == extra.end() || iv == extra.end())
      throw DataError("checkpoint is missing optimizer state for " + params_[i].name);
    m_[i] = im->second;
    v_[i] = iv->second;
  }
  steps_ = steps;
}

namespace {

Tensor<float> flip_lr(const Tensor<float>& img) {
  Tensor<float> out(img.shape());
  const Index c = img.dim(0), h = img.dim(1), w = img.dim(2);
  for (Index ci = 0; ci < c; ++ci)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) out.at3(ci, y, x) = img.at3(ci, y, w - 1 - x);
  return out;
}

// Per-modality batch tensors [B,C,H,W] for the chosen subjects; flips are
// shared across all modalities of a subject.
std::vector<Tensor<float>> gather_batch(const Dataset& ds, const std::vector<int>& subjects,
                                        const std::vector<bool>& flip) {
  const int m = ds.manifest.m;
  const Index b = static_cast<Index>(subjects.size());
  const Index c = ds.manifest.channels, h = ds.manifest.height, w = ds.manifest.width;
  std::vector<Tensor<float>> batches;
  for (int mi = 0; mi < m; ++mi) {
    Tensor<float> batch({b, c, h, w});
    for (Index si = 0; si < b; ++si) {
      const auto& img = ds.samples[static_cast<std::size_t>(subjects[static_cast<std::size_t>(si)])]
                            .images[static_cast<std::size_t>(mi)];
      Tensor<float> use = flip[static_cast<std::size_t>(si)] ? flip_lr(img) : img;
      std::memcpy(batch.data() + si * c * h * w, use.data(),
                  sizeof(float) * static_cast<std::size_t>(c * h * w));
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

struct StepLosses {
  double self_ = 0, cross = 0, latent = 0, sim_s = 0, sim_z = 0, total = 0;
};

json step_record(std::int64_t step, const StepLosses& l) {
  return json{{"step", step},     {"L_self", l.self_},   {"L_cross", l.cross},
              {"L_latent", l.latent}, {"L_sim_s", l.sim_s}, {"L_sim_z", l.sim_z},
              {"total", l.total}};
}

class JsonlLog {
 public:
  JsonlLog(const std::string& path, bool echo_stdout) : echo_(echo_stdout) {
    out_.open(path, std::ios::app);
    if (!out_) throw DataError("cannot open log file: " + path);
  }
  void write(const json& record) {
    const std::string line = record.dump();
    out_ << line << "\n";
    out_.flush();
    if (echo_) std::cout << line << "\n";
  }

 private:
  std::ofstream out_;
  bool echo_;
};

double validation_loss(Model<float>& model, const Dataset& ds, const TrainConfig& cfg,
                       const LossWeights& weights, int epoch) {
  const auto val_idx = ds.split_indices("val");
  if (val_idx.size() < 2) return std::nan("");
  Rng rng = Rng(cfg.seed).derive("val").derive(static_cast<std::uint64_t>(epoch));
  std::vector<bool> noflip(val_idx.size(), false);
  auto batches = gather_batch(ds, val_idx, noflip);
  Rng pair_rng = rng.derive("pairs");
  auto partner = sample_pairs(static_cast<int>(val_idx.size()), pair_rng);
  Tape<float> tape(false);
  auto bundle = build_bundle(tape, model, batches, partner, /*training=*/false);
  auto losses = total_loss(tape, bundle, weights);
  return static_cast<double>(tape.scalar(losses.total));
}

TrainResult run_training(const TrainConfig& cfg_in, const json& merged_config,
                         std::unique_ptr<Model<float>> model_in, std::unique_ptr<Adam> opt_in,
                         int start_epoch, double best_val_in) {
  TrainConfig cfg = cfg_in;
  if (cfg.dataset.empty()) throw ConfigError("train config is missing required field: dataset");
  LossWeights weights = cfg.loss;
  if (cfg.variant == "na") {
    weights.lambda_s = 0.0;
    weights.lambda_z = 0.0;
  }

  Dataset ds = load_dataset(cfg.dataset);
  if (ds.manifest.m != cfg.model.modalities)
    throw ConfigError("dataset has m=" + std::to_string(ds.manifest.m) +
                      " but the model is configured for m=" + std::to_string(cfg.model.modalities));
  if (ds.manifest.height != cfg.model.height || ds.manifest.width != cfg.model.width ||
      ds.manifest.channels != cfg.model.in_channels)
    throw ConfigError("dataset geometry does not match the model config");

  const std::string hash = run_config_hash(merged_config);
  TrainResult result;
  result.run_dir = cfg.run_dir.empty() ? make_run_dir_name(hash.substr(0, 8)) : cfg.run_dir;
  fs::create_directories(result.run_dir);
  fs::create_directories(result.run_dir + "/ckpt");
  fs::create_directories(result.run_dir + "/reports");
  fs::create_directories(result.run_dir + "/plots");
  // Config snapshot lands before any compute.
  write_text_file(result.run_dir + "/config.json", merged_config.dump(2) + "\n");

  std::unique_ptr<Model<float>> model = std::move(model_in);
  if (!model) model = make_model<float>(cfg.model, cfg.seed);
  std::unique_ptr<Adam> opt = std::move(opt_in);
  if (!opt) opt = std::make_unique<Adam>(model->params, cfg.lr, cfg.weight_decay);

  const auto train_idx = ds.split_indices("train");
  if (train_idx.size() < 2) throw ConfigError("train split needs at least 2 subjects");

  // Fixed batching grid: full batches plus a trailing batch if it still has
  // >= 2 subjects (pairing needs a partner).
  std::vector<std::pair<int, int>> batch_ranges;
  for (int at = 0; at < static_cast<int>(train_idx.size()); at += cfg.batch_subjects) {
    int end = std::min<int>(at + cfg.batch_subjects, static_cast<int>(train_idx.size()));
    if (end - at >= 2) batch_ranges.push_back({at, end});
  }
  result.steps_per_epoch = static_cast<int>(batch_ranges.size());

  JsonlLog log(result.run_dir + "/log.jsonl", true);

  auto save_ckpt = [&](const std::string& name, int epoch, double best_val) {
    json header{{"epoch", epoch},
                {"config_hash", hash},
                {"train_config", merged_config},
                {"best_val", std::isfinite(best_val) ? json(best_val) : json(nullptr)},
                {"opt_steps", opt->steps()},
                {"loss_history", result.epoch_mean_total}};
    const std::string path = result.run_dir + "/ckpt/" + name;
    save_model_checkpoint(path, *model, header, opt->state_tensors());
    return path;
  };

  double best_val = best_val_in;
  std::vector<Tensor<float>> grads(model->params.size());

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    Rng erng = Rng(cfg.seed).derive("epoch").derive(static_cast<std::uint64_t>(epoch));
    std::vector<int> order = train_idx;
    Rng shuffle_rng = erng.derive("shuffle");
    shuffle_rng.shuffle(order);

    double epoch_total = 0.0;
    for (std::size_t bi = 0; bi < batch_ranges.size(); ++bi) {
      const auto [lo, hi] = batch_ranges[bi];
      std::vector<int> subjects(order.begin() + lo, order.begin() + hi);
      const int b = static_cast<int>(subjects.size());

      Rng srng = erng.derive("step").derive(static_cast<std::uint64_t>(bi));
      std::vector<bool> flip(static_cast<std::size_t>(b), false);
      if (cfg.augment_flip) {
        Rng frng = srng.derive("flip");
        for (int i = 0; i < b; ++i) flip[static_cast<std::size_t>(i)] = frng.bernoulli(0.5);
      }
      Rng prng = srng.derive("pairs");
      auto partner = sample_pairs(b, prng);
      auto batches = gather_batch(ds, subjects, flip);

      const std::int64_t step = static_cast<std::int64_t>(epoch) * result.steps_per_epoch +
                                static_cast<std::int64_t>(bi);
      Tape<float> tape(true);
      StepLosses sl;
      try {
        auto bundle = build_bundle(tape, *model, batches, partner, /*training=*/true);
        auto losses = total_loss(tape, bundle, weights);
        sl.self_ = tape.scalar(losses.l_self);
        sl.cross = tape.scalar(losses.l_cross);
        sl.latent = tape.scalar(losses.l_latent);
        sl.sim_s = tape.scalar(losses.l_sim_s);
        sl.sim_z = tape.scalar(losses.l_sim_z);
        sl.total = tape.scalar(losses.total);
        tape.backward(losses.total);
      } catch (const DivergenceError&) {
        save_ckpt("diagnostic.dmrc", epoch, best_val);
        throw;
      }

      for (std::size_t pi = 0; pi < model->params.size(); ++pi)
        grads[pi] = tape.param_grad(*model->params[pi].tensor);
      if (cfg.grad_clip > 0) {
        double norm2 = 0;
        for (const auto& g : grads) norm2 += static_cast<double>(g.flat().template cast<double>().square().sum());
        const double norm = std::sqrt(norm2);
        if (norm > cfg.grad_clip) {
          const float k = static_cast<float>(cfg.grad_clip / norm);
          for (auto& g : grads) g.flat() *= k;
        }
      }
      opt->step(grads);

      epoch_total += sl.total;
      log.write(step_record(step, sl));
      if (tape.zero_norm_cosines > 0)
        log.write(json{{"event", "warn_zero_cosine"}, {"step", step}, {"count", tape.zero_norm_cosines}});
    }
    result.epoch_mean_total.push_back(epoch_total / std::max<std::size_t>(1, batch_ranges.size()));
    log.write(json{{"event", "epoch"},
                   {"epoch", epoch},
                   {"mean_total", result.epoch_mean_total.back()}});

    const bool last_epoch = epoch + 1 == cfg.epochs;
    if ((epoch + 1) % cfg.eval_every == 0 || last_epoch) {
      double val = validation_loss(*model, ds, cfg, weights, epoch);
      if (!std::isnan(val)) {
        log.write(json{{"event", "val"}, {"epoch", epoch}, {"val_total", val}});
        if (std::isnan(best_val) || val < best_val) {
          best_val = val;
          result.best_checkpoint = save_ckpt("best.dmrc", epoch + 1, best_val);
        }
      }
      result.last_checkpoint = save_ckpt("last.dmrc", epoch + 1, best_val);
    }
    result.epochs_run = epoch + 1;

    if (g_stop_requested) {
      result.last_checkpoint = save_ckpt("last.dmrc", epoch + 1, best_val);
      result.interrupted = true;
      break;
    }
  }
  if (result.last_checkpoint.empty())
    result.last_checkpoint = save_ckpt("last.dmrc", result.epochs_run, best_val);
  if (result.best_checkpoint.empty()) result.best_checkpoint = result.last_checkpoint;
  result.best_val = best_val;
  return result;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const json& merged_config) {
  return run_training(cfg, merged_config, nullptr, nullptr, 0, std::nan(""));
}

TrainResult resume_training(const std::string& ckpt_path, const TrainConfig& cfg,
                            const json& merged_config, bool force) {
  ModelCheckpoint ckpt = load_model_checkpoint(ckpt_path);
  const std::string hash = run_config_hash(merged_config);
  const std::string saved_hash = ckpt.header.value("config_hash", "");
  if (saved_hash != hash && !force)
    throw ConfigError("checkpoint config hash " + saved_hash + " does not match " + hash +
                      " (pass --force to resume anyway)");
  const int epoch = ckpt.header.value("epoch", 0);
  if (epoch >= cfg.epochs)
    throw ConfigError("checkpoint is already at epoch " + std::to_string(epoch) +
                      ", nothing to resume for epochs=" + std::to_string(cfg.epochs));
  auto opt = std::make_unique<Adam>(ckpt.model->params, cfg.lr, cfg.weight_decay);
  opt->restore(ckpt.extra, ckpt.header.value("opt_steps", std::int64_t(0)));
  double best_val = std::nan("");
  if (ckpt.header.contains("best_val") && ckpt.header["best_val"].is_number())
    best_val = ckpt.header["best_val"].get<double>();
  auto result = run_training(cfg, merged_config, std::move(ckpt.model), std::move(opt), epoch,
                             best_val);
  return result;
}

}  // namespace dmrl
