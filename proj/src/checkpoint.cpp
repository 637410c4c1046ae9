#include "dmrl/checkpoint.hpp"

#include <cstring>

#include "dmrl/tensor_io.hpp"

namespace dmrl {

namespace {
constexpr char kMagic[4] = {'D', 'M', 'R', 'C'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void save_archive(const std::string& path, json header,
                  const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors) {
  std::vector<std::string> blobs;
  blobs.reserve(tensors.size());
  json table = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : tensors) {
    blobs.push_back(serialize_tensor(*tensor));
    table.push_back(json{{"name", name}, {"offset", offset}, {"bytes", blobs.back().size()}});
    offset += blobs.back().size();
  }
  header["tensors"] = std::move(table);
  const std::string head = header.dump();

  std::string out;
  out.reserve(16 + head.size() + offset);
  out.append(kMagic, 4);
  std::uint32_t ver = kVersion;
  out.append(reinterpret_cast<const char*>(&ver), 4);
  std::uint64_t hlen = head.size();
  out.append(reinterpret_cast<const char*>(&hlen), 8);
  out += head;
  for (const auto& b : blobs) out += b;
  write_text_file(path, out);
}

Archive load_archive(const std::string& path) {
  const std::string raw = read_text_file(path);
  if (raw.size() < 16 || std::memcmp(raw.data(), kMagic, 4) != 0)
    throw DataError("not a DMRC checkpoint: " + path);
  std::uint32_t ver;
  std::memcpy(&ver, raw.data() + 4, 4);
  if (ver != kVersion) throw DataError("unsupported checkpoint version in " + path);
  std::uint64_t hlen;
  std::memcpy(&hlen, raw.data() + 8, 8);
  if (raw.size() < 16 + hlen) throw DataError("truncated checkpoint header: " + path);

  Archive ar;
  try {
    ar.header = json::parse(raw.substr(16, hlen));
  } catch (const json::exception& e) {
    throw DataError("corrupt checkpoint header in " + path + ": " + e.what());
  }
  const std::size_t data_at = 16 + static_cast<std::size_t>(hlen);
  for (const auto& entry : ar.header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
    const std::uint64_t bytes = entry.at("bytes").get<std::uint64_t>();
    if (data_at + offset + bytes > raw.size())
      throw DataError("checkpoint tensor '" + name + "' exceeds file size: " + path);
    ar.tensors.emplace(name,
                       parse_tensor_f32(raw.substr(data_at + offset, bytes), path + ":" + name));
  }
  return ar;
}

void save_model_checkpoint(const std::string& path, const Model<float>& model, json extra_header,
                           const std::vector<std::pair<std::string, const Tensor<float>*>>&
                               extra_tensors) {
  json header = std::move(extra_header);
  header["format"] = "dmrl-model";
  header["mode"] = enc_mode_name(model.cfg.mode);
  header["m"] = model.cfg.modalities;
  header["n"] = model.cfg.experts;
  header["height"] = model.cfg.height;
  header["width"] = model.cfg.width;
  header["model_config"] = model_config_to_json(model.cfg);

  std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
  for (const auto& p : model.params) tensors.push_back({"param." + p.name, p.tensor});
  for (const auto& b : model.buffers) tensors.push_back({"buffer." + b.name, b.tensor});
  for (const auto& e : extra_tensors) tensors.push_back(e);
  save_archive(path, std::move(header), tensors);
}

ModelCheckpoint load_model_checkpoint(const std::string& path) {
  Archive ar = load_archive(path);
  if (ar.header.value("format", "") != "dmrl-model")
    throw DataError("not a model checkpoint: " + path);
  ModelCheckpoint out;
  out.model = make_model<float>(model_config_from_json(ar.header.at("model_config")), 0);
  auto fill = [&](const std::string& prefix, const std::vector<NamedTensor<float>>& entries) {
    for (const auto& e : entries) {
      auto it = ar.tensors.find(prefix + e.name);
      if (it == ar.tensors.end())
        throw DataError("checkpoint " + path + " is missing tensor '" + prefix + e.name + "'");
      if (!(it->second.shape() == e.tensor->shape()))
        throw DataError("checkpoint " + path + " tensor '" + prefix + e.name +
                        "' has shape " + shape_str(it->second.shape()) + ", expected " +
                        shape_str(e.tensor->shape()));
      *e.tensor = it->second;
      ar.tensors.erase(it);
    }
  };
  fill("param.", out.model->params);
  fill("buffer.", out.model->buffers);
  out.extra = std::move(ar.tensors);
  out.header = std::move(ar.header);
  return out;
}

}  // namespace dmrl
