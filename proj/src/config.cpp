#include "dmrl/config.hpp"

#include <chrono>
#include <ctime>

namespace dmrl {

json parse_json_file(const std::string& path) {
  try {
    return json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("invalid JSON in " + path + ": " + e.what());
  }
}

std::string canonical_dump(const json& j) {
  // nlohmann::json stores object keys sorted, so dump() is canonical.
  return j.dump();
}

std::string config_hash(const json& merged) { return hex64(fnv1a64(canonical_dump(merged))); }

std::string run_config_hash(json merged) {
  merged.erase("run_dir");
  return config_hash(merged);
}

namespace {

void collect_unknown_keys(const json& doc, const json& schema, const std::string& prefix,
                          std::vector<std::string>& offenders) {
  if (!doc.is_object()) return;
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!schema.is_object() || !schema.contains(it.key())) {
      offenders.push_back(path);
      continue;
    }
    if (it.value().is_object()) collect_unknown_keys(it.value(), schema.at(it.key()), path, offenders);
  }
}

void reject_unknown_keys(const json& doc, const json& schema, const char* what) {
  std::vector<std::string> offenders;
  collect_unknown_keys(doc, schema, "", offenders);
  if (!offenders.empty()) {
    std::string msg = std::string(what) + " config has unknown keys:";
    for (const auto& k : offenders) msg += " " + k;
    throw ConfigError(msg);
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.is_object() || !j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "' has the wrong type: " + e.what());
  }
}

}  // namespace

json model_config_to_json(const ModelConfig& c) {
  return json{{"mode", enc_mode_name(c.mode)},
              {"modalities", c.modalities},
              {"experts", c.experts},
              {"in_channels", c.in_channels},
              {"height", c.height},
              {"width", c.width},
              {"ea_widths", c.ea_widths},
              {"ea_bottleneck", c.ea_bottleneck},
              {"em_widths", c.em_widths},
              {"z_dim", c.z_dim},
              {"s_channels", c.s_channels},
              {"dec_widths", c.dec_widths},
              {"dec_seed_channels", c.dec_seed_channels},
              {"spade_hidden", c.spade_hidden},
              {"condconv_sigma", c.condconv_sigma}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.mode = enc_mode_from_name(get_or<std::string>(j, "mode", enc_mode_name(c.mode)));
  c.modalities = get_or(j, "modalities", c.modalities);
  c.experts = get_or(j, "experts", c.experts);
  c.in_channels = get_or(j, "in_channels", c.in_channels);
  c.height = get_or(j, "height", c.height);
  c.width = get_or(j, "width", c.width);
  c.ea_widths = get_or(j, "ea_widths", c.ea_widths);
  c.ea_bottleneck = get_or(j, "ea_bottleneck", c.ea_bottleneck);
  c.em_widths = get_or(j, "em_widths", c.em_widths);
  c.z_dim = get_or(j, "z_dim", c.z_dim);
  c.s_channels = get_or(j, "s_channels", c.s_channels);
  c.dec_widths = get_or(j, "dec_widths", c.dec_widths);
  c.dec_seed_channels = get_or(j, "dec_seed_channels", c.dec_seed_channels);
  c.spade_hidden = get_or(j, "spade_hidden", c.spade_hidden);
  c.condconv_sigma = get_or(j, "condconv_sigma", c.condconv_sigma);
  return c;
}

json loss_weights_to_json(const LossWeights& w) {
  return json{{"lambda_c", w.lambda_c}, {"lambda_l", w.lambda_l}, {"lambda_s", w.lambda_s},
              {"lambda_z", w.lambda_z}, {"alpha_s", w.alpha_s},   {"alpha_z", w.alpha_z},
              {"exclude_diagonal", w.exclude_diagonal}};
}

LossWeights loss_weights_from_json(const json& j) {
  LossWeights w;
  w.lambda_c = get_or(j, "lambda_c", w.lambda_c);
  w.lambda_l = get_or(j, "lambda_l", w.lambda_l);
  w.lambda_s = get_or(j, "lambda_s", w.lambda_s);
  w.lambda_z = get_or(j, "lambda_z", w.lambda_z);
  w.alpha_s = get_or(j, "alpha_s", w.alpha_s);
  w.alpha_z = get_or(j, "alpha_z", w.alpha_z);
  w.exclude_diagonal = get_or(j, "exclude_diagonal", w.exclude_diagonal);
  if (w.lambda_c < 0 || w.lambda_l < 0 || w.lambda_s < 0 || w.lambda_z < 0)
    throw ConfigError("loss weights must be nonnegative");
  if (w.alpha_s < 0 || w.alpha_s > 2 || w.alpha_z < 0 || w.alpha_z > 2)
    throw ConfigError("similarity margins must be in [0, 2]");
  return w;
}

json gen_config_to_json(const GenConfig& c) {
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

GenConfig gen_config_from_json(const json& j) {
  GenConfig c;
  reject_unknown_keys(j, gen_config_to_json(c), "gen-data");
  c.num_subjects = get_or(j, "num_subjects", c.num_subjects);
  c.modalities = get_or(j, "modalities", c.modalities);
  c.height = get_or(j, "height", c.height);
  c.width = get_or(j, "width", c.width);
  c.classes = get_or(j, "classes", c.classes);
  c.channels = get_or(j, "channels", c.channels);
  c.p_lesion = get_or(j, "p_lesion", c.p_lesion);
  c.noise_sigma = get_or(j, "noise_sigma", c.noise_sigma);
  c.bias_amplitude = get_or(j, "bias_amplitude", c.bias_amplitude);
  c.bias_smoothness = get_or(j, "bias_smoothness", c.bias_smoothness);
  c.split_fractions = get_or(j, "split_fractions", c.split_fractions);
  c.seed = get_or(j, "seed", c.seed);
  if (c.noise_sigma < 0 || c.noise_sigma > 0.3)
    throw ConfigError("noise_sigma must be in [0, 0.3]");
  if (c.bias_amplitude < 0) throw ConfigError("bias_amplitude must be >= 0");
  if (c.bias_smoothness <= 0) throw ConfigError("bias_smoothness must be > 0");
  return c;
}

json train_config_to_json(const TrainConfig& c) {
  return json{{"dataset", c.dataset},
              {"run_dir", c.run_dir},
              {"epochs", c.epochs},
              {"batch_subjects", c.batch_subjects},
              {"lr", c.lr},
              {"weight_decay", c.weight_decay},
              {"grad_clip", c.grad_clip},
              {"seed", c.seed},
              {"eval_every", c.eval_every},
              {"augment_flip", c.augment_flip},
              {"variant", c.variant},
              {"loss", loss_weights_to_json(c.loss)},
              {"model", model_config_to_json(c.model)}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  reject_unknown_keys(j, train_config_to_json(c), "train");
  c.dataset = get_or<std::string>(j, "dataset", c.dataset);
  c.run_dir = get_or<std::string>(j, "run_dir", c.run_dir);
  c.epochs = get_or(j, "epochs", c.epochs);
  c.batch_subjects = get_or(j, "batch_subjects", c.batch_subjects);
  c.lr = get_or(j, "lr", c.lr);
  c.weight_decay = get_or(j, "weight_decay", c.weight_decay);
  c.grad_clip = get_or(j, "grad_clip", c.grad_clip);
  c.seed = get_or(j, "seed", c.seed);
  c.eval_every = get_or(j, "eval_every", c.eval_every);
  c.augment_flip = get_or(j, "augment_flip", c.augment_flip);
  c.variant = get_or<std::string>(j, "variant", c.variant);
  if (j.contains("loss")) c.loss = loss_weights_from_json(j.at("loss"));
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (c.variant != "sim" && c.variant != "na")
    throw ConfigError("variant must be 'sim' or 'na', got '" + c.variant + "'");
  if (c.epochs < 1) throw ConfigError("epochs must be positive");
  if (c.batch_subjects < 2) throw ConfigError("batch_subjects must be at least 2");
  if (c.lr <= 0) throw ConfigError("lr must be positive");
  if (c.eval_every < 1) throw ConfigError("eval_every must be positive");
  return c;
}

json task_config_to_json(const TaskConfig& c) {
  return json{{"task", c.task},
              {"target_class", c.target_class},
              {"target_modality", c.target_modality},
              {"input_mode", c.input_mode},
              {"missing_fill", c.missing_fill},
              {"dropout_p", c.dropout_p},
              {"epochs", c.epochs},
              {"batch_subjects", c.batch_subjects},
              {"lr", c.lr},
              {"weight_decay", c.weight_decay},
              {"seed", c.seed},
              {"base_width", c.base_width},
              {"dataset", c.dataset},
              {"encoder_ckpt", c.encoder_ckpt},
              {"run_dir", c.run_dir}};
}

TaskConfig task_config_from_json(const json& j) {
  TaskConfig c;
  reject_unknown_keys(j, task_config_to_json(c), "task");
  c.task = get_or<std::string>(j, "task", c.task);
  c.target_class = get_or(j, "target_class", c.target_class);
  c.target_modality = get_or(j, "target_modality", c.target_modality);
  c.input_mode = get_or<std::string>(j, "input_mode", c.input_mode);
  c.missing_fill = get_or<std::string>(j, "missing_fill", c.missing_fill);
  c.dropout_p = get_or(j, "dropout_p", c.dropout_p);
  c.epochs = get_or(j, "epochs", c.epochs);
  c.batch_subjects = get_or(j, "batch_subjects", c.batch_subjects);
  c.lr = get_or(j, "lr", c.lr);
  c.weight_decay = get_or(j, "weight_decay", c.weight_decay);
  c.seed = get_or(j, "seed", c.seed);
  c.base_width = get_or(j, "base_width", c.base_width);
  c.dataset = get_or<std::string>(j, "dataset", c.dataset);
  c.encoder_ckpt = get_or<std::string>(j, "encoder_ckpt", c.encoder_ckpt);
  c.run_dir = get_or<std::string>(j, "run_dir", c.run_dir);
  if (c.task != "segmentation" && c.task != "synthesis")
    throw ConfigError("task must be 'segmentation' or 'synthesis'");
  if (c.input_mode != "fused" && c.input_mode != "raw-stack")
    throw ConfigError("input_mode must be 'fused' or 'raw-stack'");
  if (c.missing_fill != "none" && c.missing_fill != "zero" && c.missing_fill != "average")
    throw ConfigError("missing_fill must be none|zero|average");
  if (c.input_mode == "fused" && c.missing_fill != "none")
    throw ConfigError("fused input mode does not take a missing_fill policy");
  if (c.dropout_p < 0 || c.dropout_p >= 1) throw ConfigError("dropout_p must be in [0, 1)");
  return c;
}

std::string make_run_dir_name(const std::string& hash8) {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
  return std::string("runs/") + buf + "-" + hash8;
}

}  // namespace dmrl
