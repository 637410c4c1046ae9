#include "dmrl/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "dmrl/fusion.hpp"
#include "dmrl/tensor_io.hpp"
#include "dmrl/trainer.hpp"

namespace fs = std::filesystem;

namespace dmrl {

namespace {

// Mirror of the encoder registrar, scoped to the task net.
struct TaskRegistrar {
  TaskNet* net;
  std::uint64_t seed;

  void param(const std::string& name, Tensor<float>& t, double std_dev, bool he, Index fan_in) {
    Rng rng = Rng(seed).derive(name);
    if (he) {
      double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (Index i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.normal(0.0, sd));
    } else if (std_dev > 0) {
      for (Index i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.normal(0.0, std_dev));
    }
    net->params.push_back({name, &t});
  }

  void conv(const std::string& name, ExpertBank<float>& b, Index cout, Index cin, Index k,
            int stride, int pad) {
    b.stride = stride;
    b.pad = pad;
    b.kernels.resize(1);
    b.kernels[0] = Tensor<float>({cout, cin, k, k});
    param(name + ".w0", b.kernels[0], 0.0, true, cin * k * k);
    b.bias = Tensor<float>({cout});
    net->params.push_back({name + ".b", &b.bias});
  }

  void bn(const std::string& name, BatchNorm<float>& b, Index c) {
    b.gamma = Tensor<float>({c}, 1.0f);
    b.beta = Tensor<float>({c});
    net->params.push_back({name + ".gamma", &b.gamma});
    net->params.push_back({name + ".beta", &b.beta});
    b.running_mean = Tensor<float>({c});
    b.running_var = Tensor<float>({c}, 1.0f);
    net->buffers.push_back({name + ".rmean", &b.running_mean});
    net->buffers.push_back({name + ".rvar", &b.running_var});
  }

  void block(const std::string& name, EncBlock<float>& blk, Index cout, Index cin, Index k,
             int stride, int pad) {
    conv(name + ".conv", blk.conv, cout, cin, k, stride, pad);
    bn(name + ".bn", blk.bn, cout);
  }
};

}  // namespace

std::unique_ptr<TaskNet> make_task_net(const TaskNetConfig& cfg, std::uint64_t seed) {
  if (cfg.height % 8 != 0 || cfg.width % 8 != 0)
    throw ConfigError("task net needs spatial size divisible by 8");
  if (cfg.in_channels < 1 || cfg.out_channels < 1 || cfg.base_width < 1)
    throw ConfigError("task net channel configuration must be positive");
  auto net = std::make_unique<TaskNet>();
  net->cfg = cfg;
  TaskRegistrar reg{net.get(), seed};
  const Index base = cfg.base_width;
  reg.block("stem", net->stem, base, cfg.in_channels, 3, 1, 1);
  net->down.resize(3);
  Index prev = base;
  for (int i = 0; i < 3; ++i) {
    Index width = base << (i + 1);
    reg.block("down" + std::to_string(i), net->down[static_cast<std::size_t>(i)], width, prev, 3, 2, 1);
    prev = width;
  }
  reg.block("bott", net->bottleneck, prev, prev, 3, 1, 1);
  net->up.resize(3);
  for (int i = 0; i < 3; ++i) {
    Index skip = base << (3 - i);  // matching down block output
    Index width = base << (2 - i);
    reg.block("up" + std::to_string(i), net->up[static_cast<std::size_t>(i)], width, prev + skip, 3,
              1, 1);
    prev = width;
  }
  reg.conv("head", net->head, cfg.out_channels, prev + base, 1, 1, 0);
  return net;
}

Var task_forward(Tape<float>& t, TaskNet& net, Var x, bool training) {
  const Tensor<float>& xv = t.val(x);
  if (xv.rank() != 4 || xv.dim(1) != net.cfg.in_channels)
    throw ShapeError("task_forward: expected [N," + std::to_string(net.cfg.in_channels) + ",H,W]");
  if (xv.dim(2) % 8 != 0 || xv.dim(3) % 8 != 0)
    throw ShapeError("task_forward: spatial size must be divisible by 8");

  auto blockf = [&](EncBlock<float>& blk, Var h) {
    return relu(t, batchnorm(t, blk.bn, cond_conv(t, blk.conv, h, 0), training));
  };
  Var h = blockf(net.stem, x);
  Var stem_out = h;
  std::vector<Var> skips;
  for (auto& d : net.down) {
    h = blockf(d, h);
    skips.push_back(h);
  }
  h = blockf(net.bottleneck, h);
  for (std::size_t i = 0; i < net.up.size(); ++i) {
    h = concat_channels(t, h, skips[skips.size() - 1 - i]);
    h = upsample_nearest2x(t, h);
    h = blockf(net.up[i], h);
  }
  h = concat_channels(t, h, stem_out);
  return cond_conv(t, net.head, h, 0);
}

void save_task_checkpoint(const std::string& path, const TaskNet& net, json extra_header) {
  json header = std::move(extra_header);
  header["format"] = "dmrl-task";
  header["task_net"] = json{{"in_channels", net.cfg.in_channels},
                            {"out_channels", net.cfg.out_channels},
                            {"base_width", net.cfg.base_width},
                            {"height", net.cfg.height},
                            {"width", net.cfg.width}};
  std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
  for (const auto& p : net.params) tensors.push_back({"param." + p.name, p.tensor});
  for (const auto& b : net.buffers) tensors.push_back({"buffer." + b.name, b.tensor});
  save_archive(path, std::move(header), tensors);
}

TaskCheckpoint load_task_checkpoint(const std::string& path) {
  Archive ar = load_archive(path);
  if (ar.header.value("format", "") != "dmrl-task")
    throw DataError("not a task checkpoint: " + path);
  const json& tc = ar.header.at("task_net");
  TaskNetConfig cfg;
  cfg.in_channels = tc.at("in_channels").get<int>();
  cfg.out_channels = tc.at("out_channels").get<int>();
  cfg.base_width = tc.at("base_width").get<int>();
  cfg.height = tc.at("height").get<int>();
  cfg.width = tc.at("width").get<int>();
  TaskCheckpoint out;
  out.net = make_task_net(cfg, 0);
  auto fill = [&](const std::string& prefix, const std::vector<NamedTensor<float>>& entries) {
    for (const auto& e : entries) {
      auto it = ar.tensors.find(prefix + e.name);
      if (it == ar.tensors.end())
        throw DataError("task checkpoint " + path + " is missing tensor '" + prefix + e.name + "'");
      *e.tensor = it->second;
    }
  };
  fill("param.", out.net->params);
  fill("buffer.", out.net->buffers);
  out.header = std::move(ar.header);
  return out;
}

namespace {

struct TaskSetup {
  TaskConfig cfg;
  Dataset ds;
  std::unique_ptr<Model<float>> encoder;  // fused mode only
  std::vector<int> input_modalities;      // modalities feeding the model
  int target_class = 0;
  int target_modality = 0;
  int in_channels = 0;
  int out_channels = 0;
};

TaskSetup prepare(const TaskConfig& cfg_in) {
  TaskSetup s;
  s.cfg = cfg_in;
  if (s.cfg.dataset.empty()) throw ConfigError("task config is missing required field: dataset");
  s.ds = load_dataset(s.cfg.dataset);
  const int m = s.ds.manifest.m;
  const int k = s.ds.manifest.classes;
  s.target_class = s.cfg.target_class >= 0 ? s.cfg.target_class : k - 1;
  s.target_modality = s.cfg.target_modality >= 0 ? s.cfg.target_modality : m - 1;
  if (s.target_class >= k) throw ConfigError("target_class out of range");
  if (s.target_modality >= m) throw ConfigError("target_modality out of range");

  for (int i = 0; i < m; ++i) {
    if (s.cfg.task == "synthesis" && i == s.target_modality) continue;
    s.input_modalities.push_back(i);
  }
  if (s.input_modalities.empty()) throw ConfigError("no input modalities left for the task");

  if (s.cfg.input_mode == "fused") {
    if (s.cfg.encoder_ckpt.empty())
      throw ConfigError("fused input mode requires encoder_ckpt");
    ModelCheckpoint enc = load_model_checkpoint(s.cfg.encoder_ckpt);
    s.encoder = std::move(enc.model);
    if (s.encoder->cfg.modalities != m)
      throw ConfigError("encoder checkpoint has m=" + std::to_string(s.encoder->cfg.modalities) +
                        " but the dataset has m=" + std::to_string(m));
    if (s.encoder->cfg.height != s.ds.manifest.height ||
        s.encoder->cfg.width != s.ds.manifest.width)
      throw ConfigError("encoder geometry does not match the dataset");
    s.in_channels = 3 * s.encoder->cfg.s_channels;
  } else {
    s.in_channels = static_cast<int>(s.input_modalities.size()) * s.ds.manifest.channels;
  }
  s.out_channels = s.cfg.task == "segmentation" ? k : s.ds.manifest.channels;
  return s;
}

Tensor<float> subject_anatomy(Model<float>& encoder, const MultiModalSample& sample, int modality) {
  Tensor<float> x = sample.images[static_cast<std::size_t>(modality)].reshaped(
      {1, sample.images[0].dim(0), sample.images[0].dim(1), sample.images[0].dim(2)});
  Tensor<float> s = encode_anatomy_eval(encoder, x, modality);
  return s.reshaped({s.dim(1), s.dim(2), s.dim(3)});
}

// Fused input for one subject over the given available modalities.
Tensor<float> fused_input(const std::vector<Tensor<float>>& s_maps, const std::vector<int>& avail) {
  std::vector<Tensor<float>> use;
  for (int i : avail) use.push_back(s_maps[static_cast<std::size_t>(i)]);
  return fuse(use);
}

Tensor<float> raw_input(const TaskSetup& s, const MultiModalSample& sample,
                        const std::vector<int>& dropped, const std::string& fill,
                        const std::vector<Tensor<float>>& averages) {
  const Index c = s.ds.manifest.channels, h = s.ds.manifest.height, w = s.ds.manifest.width;
  Tensor<float> out({static_cast<Index>(s.input_modalities.size()) * c, h, w});
  Index at = 0;
  for (int mi : s.input_modalities) {
    const bool is_dropped = std::find(dropped.begin(), dropped.end(), mi) != dropped.end();
    const float* src = nullptr;
    if (!is_dropped) {
      src = sample.images[static_cast<std::size_t>(mi)].data();
    } else if (fill == "average") {
      src = averages[static_cast<std::size_t>(mi)].data();
    }  // zero fill leaves the slot at 0
    if (src)
      std::memcpy(out.data() + at * h * w, src, sizeof(float) * static_cast<std::size_t>(c * h * w));
    at += c;
  }
  return out;
}

}  // namespace

Tensor<float> average_image(const Dataset& ds, int modality_id) {
  if (modality_id < 0 || modality_id >= ds.manifest.m)
    throw ArgumentError("average_image: modality out of range");
  const std::string cache_path =
      (fs::path(ds.manifest.root_dir) / ("avg_mod" + std::to_string(modality_id) + ".dmrt")).string();
  if (fs::exists(cache_path)) {
    Tensor<float> cached = read_tensor_file_f32(cache_path);
    if (cached.rank() == 3 && cached.dim(0) == ds.manifest.channels &&
        cached.dim(1) == ds.manifest.height && cached.dim(2) == ds.manifest.width)
      return cached;
  }
  const auto idx = ds.split_indices("train");
  if (idx.empty()) throw ArgumentError("average_image: train split is empty");
  Tensor<double> acc({static_cast<Index>(ds.manifest.channels), static_cast<Index>(ds.manifest.height),
                      static_cast<Index>(ds.manifest.width)});
  for (int i : idx) {
    const auto& img = ds.samples[static_cast<std::size_t>(i)].images[static_cast<std::size_t>(modality_id)];
    for (Index j = 0; j < img.numel(); ++j) acc[j] += static_cast<double>(img[j]);
  }
  Tensor<float> avg(acc.shape());
  for (Index j = 0; j < acc.numel(); ++j)
    avg[j] = static_cast<float>(acc[j] / static_cast<double>(idx.size()));
  write_tensor_file(cache_path, avg);
  return avg;
}

TaskTrainResult train_downstream(const TaskConfig& cfg_in, const json& merged_config) {
  TaskSetup s = prepare(cfg_in);
  const auto train_idx = s.ds.split_indices("train");
  if (train_idx.empty()) throw ConfigError("train split is empty");
  const Index h = s.ds.manifest.height, w = s.ds.manifest.width;

  const std::string hash = run_config_hash(merged_config);
  TaskTrainResult result;
  result.run_dir = s.cfg.run_dir.empty() ? make_run_dir_name(hash.substr(0, 8)) : s.cfg.run_dir;
  fs::create_directories(result.run_dir);
  fs::create_directories(result.run_dir + "/ckpt");
  write_text_file(result.run_dir + "/config.json", merged_config.dump(2) + "\n");

  // Frozen encoders: anatomical maps are computed once, outside any tape.
  std::vector<std::vector<Tensor<float>>> s_maps(s.ds.samples.size());
  if (s.cfg.input_mode == "fused") {
    for (int i : train_idx) {
      auto& slot = s_maps[static_cast<std::size_t>(i)];
      slot.resize(static_cast<std::size_t>(s.ds.manifest.m));
      for (int mi : s.input_modalities)
        slot[static_cast<std::size_t>(mi)] =
            subject_anatomy(*s.encoder, s.ds.samples[static_cast<std::size_t>(i)], mi);
    }
  }

  TaskNetConfig net_cfg{s.in_channels, s.out_channels, s.cfg.base_width,
                        static_cast<int>(h), static_cast<int>(w)};
  auto net = make_task_net(net_cfg, s.cfg.seed);
  Adam opt(net->params, s.cfg.lr, s.cfg.weight_decay);
  std::vector<Tensor<float>> grads(net->params.size());

  std::ofstream log(result.run_dir + "/log.jsonl", std::ios::app);

  const int bs = std::max(1, s.cfg.batch_subjects);
  for (int epoch = 0; epoch < s.cfg.epochs; ++epoch) {
    Rng erng = Rng(s.cfg.seed).derive("task_epoch").derive(static_cast<std::uint64_t>(epoch));
    std::vector<int> order = train_idx;
    Rng shuffle_rng = erng.derive("shuffle");
    shuffle_rng.shuffle(order);

    double epoch_loss = 0;
    int steps = 0;
    for (int at = 0; at < static_cast<int>(order.size()); at += bs, ++steps) {
      const int end = std::min<int>(at + bs, static_cast<int>(order.size()));
      const Index b = end - at;
      Rng srng = erng.derive("step").derive(static_cast<std::uint64_t>(steps));

      Tensor<float> input({b, static_cast<Index>(s.in_channels), h, w});
      Tensor<std::int32_t> seg_target({b, h, w});
      Tensor<float> synth_target({b, static_cast<Index>(s.ds.manifest.channels), h, w});
      for (Index bi = 0; bi < b; ++bi) {
        const int subject = order[static_cast<std::size_t>(at + bi)];
        const auto& sample = s.ds.samples[static_cast<std::size_t>(subject)];
        Tensor<float> one;
        if (s.cfg.input_mode == "fused") {
          // Training-time modality dropout exposes the model to subsets.
          std::vector<int> avail;
          Rng drng = srng.derive("drop").derive(static_cast<std::uint64_t>(bi));
          for (int mi : s.input_modalities)
            if (!drng.bernoulli(s.cfg.dropout_p)) avail.push_back(mi);
          if (avail.empty()) avail = s.input_modalities;
          one = fused_input(s_maps[static_cast<std::size_t>(subject)], avail);
        } else {
          one = raw_input(s, sample, {}, "none", {});
        }
        std::memcpy(input.data() + bi * s.in_channels * h * w, one.data(),
                    sizeof(float) * static_cast<std::size_t>(one.numel()));
        if (s.cfg.task == "segmentation") {
          std::memcpy(seg_target.data() + bi * h * w, sample.label_map.labels.data(),
                      sizeof(std::int32_t) * static_cast<std::size_t>(h * w));
        } else {
          const auto& tgt = sample.images[static_cast<std::size_t>(s.target_modality)];
          std::memcpy(synth_target.data() + bi * s.ds.manifest.channels * h * w, tgt.data(),
                      sizeof(float) * static_cast<std::size_t>(tgt.numel()));
        }
      }

      Tape<float> tape(true);
      Var logits = task_forward(tape, *net, tape.leaf(std::move(input), false), true);
      Var loss = s.cfg.task == "segmentation"
                     ? cross_entropy2d(tape, logits, seg_target)
                     : mean_abs_diff(tape, logits, tape.leaf(std::move(synth_target), false));
      const double loss_value = tape.scalar(loss);
      if (!std::isfinite(loss_value)) throw DivergenceError("non-finite task loss");
      tape.backward(loss);
      for (std::size_t pi = 0; pi < net->params.size(); ++pi)
        grads[pi] = tape.param_grad(*net->params[pi].tensor);
      opt.step(grads);
      epoch_loss += loss_value;
    }
    result.epoch_mean_loss.push_back(epoch_loss / std::max(1, steps));
    json rec{{"event", "task_epoch"}, {"epoch", epoch}, {"mean_loss", result.epoch_mean_loss.back()}};
    log << rec.dump() << "\n";
    log.flush();
  }

  result.checkpoint = result.run_dir + "/ckpt/task.dmrc";
  json header{{"task_config", merged_config},
              {"config_hash", hash},
              {"epochs", s.cfg.epochs},
              {"input_modalities", s.input_modalities},
              {"target_class", s.target_class},
              {"target_modality", s.target_modality}};
  save_task_checkpoint(result.checkpoint, *net, header);
  return result;
}

MissingEvalResult eval_missing(const std::string& task_ckpt_path, const std::vector<int>& drop,
                               const std::string& fill_override, const std::string& dataset_path,
                               const std::string& split, const std::string& encoder_override) {
  TaskCheckpoint ckpt = load_task_checkpoint(task_ckpt_path);
  TaskConfig cfg = task_config_from_json(ckpt.header.at("task_config"));
  if (!dataset_path.empty()) cfg.dataset = dataset_path;
  if (!encoder_override.empty()) cfg.encoder_ckpt = encoder_override;
  TaskSetup s = prepare(cfg);

  std::string fill = fill_override.empty() ? cfg.missing_fill : fill_override;
  if (cfg.input_mode == "fused")
    fill = "none";
  else if (fill == "none")
    fill = "zero";

  // The dropped set must leave at least one input modality.
  std::vector<int> remaining = s.input_modalities;
  for (int d : drop) {
    if (d < 0 || d >= s.ds.manifest.m)
      throw ArgumentError("eval_missing: dropped modality " + std::to_string(d) + " out of range");
    remaining.erase(std::remove(remaining.begin(), remaining.end(), d), remaining.end());
  }
  if (remaining.empty())
    throw ArgumentError("eval_missing: dropping every input modality leaves nothing to evaluate");

  const auto idx = s.ds.split_indices(split);
  if (idx.empty()) throw ArgumentError("eval_missing: split '" + split + "' is empty");
  const Index h = s.ds.manifest.height, w = s.ds.manifest.width;
  const int k = s.ds.manifest.classes;

  std::vector<Tensor<float>> averages;
  if (cfg.input_mode == "raw-stack" && fill == "average") {
    averages.resize(static_cast<std::size_t>(s.ds.manifest.m));
    for (int d : drop) averages[static_cast<std::size_t>(d)] = average_image(s.ds, d);
  }

  MissingEvalResult res;
  res.dropped = drop;
  res.fill = cfg.input_mode == "fused" ? "none" : fill;
  res.task = cfg.task;
  res.subjects = static_cast<int>(idx.size());
  res.dice_per_class.assign(static_cast<std::size_t>(std::max(0, k - 1)), 0.0);

  for (int subject : idx) {
    const auto& sample = s.ds.samples[static_cast<std::size_t>(subject)];
    Tensor<float> one;
    if (cfg.input_mode == "fused") {
      std::vector<Tensor<float>> maps(static_cast<std::size_t>(s.ds.manifest.m));
      for (int mi : remaining) maps[static_cast<std::size_t>(mi)] = subject_anatomy(*s.encoder, sample, mi);
      one = fused_input(maps, remaining);
    } else {
      one = raw_input(s, sample, drop, fill, averages);
    }
    Tensor<float> input = one.reshaped({1, one.dim(0), one.dim(1), one.dim(2)});
    Tape<float> tape(false);
    Tensor<float> out = tape.val(task_forward(tape, *ckpt.net, tape.constant(input), false));

    if (cfg.task == "segmentation") {
      Tensor<std::int32_t> pred({h, w});
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
          int best = 0;
          float best_v = out.at4(0, 0, y, x);
          for (int c = 1; c < k; ++c)
            if (out.at4(0, c, y, x) > best_v) {
              best_v = out.at4(0, c, y, x);
              best = c;
            }
          pred.at2(y, x) = best;
        }
      res.dice_lesion += dice(pred, sample.label_map.labels, s.target_class);
      for (int c = 1; c < k; ++c)
        res.dice_per_class[static_cast<std::size_t>(c - 1)] += dice(pred, sample.label_map.labels, c);
    } else {
      const auto& gt = sample.images[static_cast<std::size_t>(s.target_modality)];
      Tensor<float> img = out.reshaped({gt.dim(0), gt.dim(1), gt.dim(2)});
      const double range = image_data_range(gt);
      res.psnr_value += psnr(img, gt, range).value;
      res.ssim_value += ssim(img, gt, range);
    }
  }
  const double n = static_cast<double>(idx.size());
  res.dice_lesion /= n;
  for (auto& v : res.dice_per_class) v /= n;
  if (!res.dice_per_class.empty()) {
    double sum = 0;
    for (double v : res.dice_per_class) sum += v;
    res.dice_foreground_mean = sum / static_cast<double>(res.dice_per_class.size());
  }
  res.psnr_value /= n;
  res.ssim_value /= n;
  return res;
}

json missing_eval_to_json(const MissingEvalResult& r, const std::string& config_hash) {
  json j{{"kind", "missing_eval"}, {"task", r.task},       {"dropped", r.dropped},
         {"fill", r.fill},         {"subjects", r.subjects}, {"config_hash", config_hash}};
  if (r.task == "segmentation") {
    j["dice_lesion"] = r.dice_lesion;
    j["dice_foreground_mean"] = r.dice_foreground_mean;
    j["dice_per_class"] = r.dice_per_class;
  } else {
    j["psnr"] = r.psnr_value;
    j["ssim"] = r.ssim_value;
  }
  return j;
}

}  // namespace dmrl
