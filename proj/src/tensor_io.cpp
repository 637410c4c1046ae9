#include "dmrl/tensor_io.hpp"

#include <array>

namespace dmrl {

namespace {

const std::array<std::uint32_t, 256>& crc_table() {
  static const std::array<std::uint32_t, 256> table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  return table;
}

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  b[0] = static_cast<char>(v & 0xff);
  b[1] = static_cast<char>((v >> 8) & 0xff);
  b[2] = static_cast<char>((v >> 16) & 0xff);
  b[3] = static_cast<char>((v >> 24) & 0xff);
  out.append(b, 4);
}

std::uint32_t get_u32(const std::string& s, std::size_t at) {
  auto b = [&](std::size_t i) { return static_cast<std::uint32_t>(static_cast<unsigned char>(s[at + i])); };
  return b(0) | (b(1) << 8) | (b(2) << 16) | (b(3) << 24);
}

template <typename T>
std::string serialize_impl(const Tensor<T>& t, std::uint32_t dtype) {
  std::string out;
  out.reserve(16 + 4 * static_cast<std::size_t>(t.rank()) +
              sizeof(T) * static_cast<std::size_t>(t.numel()));
  out.append("DMRT", 4);
  put_u32(out, dmrt::kVersion);
  put_u32(out, dtype);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) put_u32(out, static_cast<std::uint32_t>(t.dim(i)));
  // Host is assumed little-endian (x86/aarch64); payload is memcpy'd.
  out.append(reinterpret_cast<const char*>(t.data()), sizeof(T) * static_cast<std::size_t>(t.numel()));
  return out;
}

template <typename T>
Tensor<T> parse_impl(const std::string& blob, std::uint32_t want_dtype, const std::string& what) {
  if (blob.size() < 16 || blob.compare(0, 4, "DMRT") != 0)
    throw DataError("not a DMRT tensor: " + what);
  std::uint32_t version = get_u32(blob, 4);
  if (version != dmrt::kVersion)
    throw DataError("unsupported DMRT version " + std::to_string(version) + ": " + what);
  std::uint32_t dtype = get_u32(blob, 8);
  if (dtype != want_dtype)
    throw DataError("DMRT dtype mismatch (got code " + std::to_string(dtype) + "): " + what);
  std::uint32_t ndim = get_u32(blob, 12);
  if (ndim > 8) throw DataError("DMRT rank too large: " + what);
  if (blob.size() < 16 + 4 * static_cast<std::size_t>(ndim))
    throw DataError("truncated DMRT header: " + what);
  Shape shape(ndim);
  Index numel = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    shape[i] = static_cast<Index>(get_u32(blob, 16 + 4 * i));
    numel *= shape[i];
  }
  std::size_t payload_at = 16 + 4 * static_cast<std::size_t>(ndim);
  std::size_t payload_bytes = sizeof(T) * static_cast<std::size_t>(numel);
  if (blob.size() != payload_at + payload_bytes)
    throw DataError("DMRT payload size mismatch: " + what);
  Tensor<T> t(shape);
  std::memcpy(t.data(), blob.data() + payload_at, payload_bytes);
  return t;
}

}  // namespace

std::uint32_t crc32(const void* data, std::size_t n, std::uint32_t seed) {
  const auto& table = crc_table();
  std::uint32_t c = seed ^ 0xffffffffu;
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) c = table[(c ^ p[i]) & 0xff] ^ (c >> 8);
  return c ^ 0xffffffffu;
}

std::string serialize_tensor(const Tensor<float>& t) { return serialize_impl(t, dmrt::kDtypeF32); }
std::string serialize_tensor(const Tensor<std::int32_t>& t) {
  return serialize_impl(t, dmrt::kDtypeI32);
}

Tensor<float> parse_tensor_f32(const std::string& blob, const std::string& what) {
  return parse_impl<float>(blob, dmrt::kDtypeF32, what);
}
Tensor<std::int32_t> parse_tensor_i32(const std::string& blob, const std::string& what) {
  return parse_impl<std::int32_t>(blob, dmrt::kDtypeI32, what);
}

std::uint32_t peek_dtype(const std::string& blob, const std::string& what) {
  if (blob.size() < 12 || blob.compare(0, 4, "DMRT") != 0)
    throw DataError("not a DMRT tensor: " + what);
  return get_u32(blob, 8);
}

void write_tensor_file(const std::string& path, const Tensor<float>& t) {
  write_text_file(path, serialize_tensor(t));
}
void write_tensor_file(const std::string& path, const Tensor<std::int32_t>& t) {
  write_text_file(path, serialize_tensor(t));
}
Tensor<float> read_tensor_file_f32(const std::string& path) {
  return parse_tensor_f32(read_text_file(path), path);
}
Tensor<std::int32_t> read_tensor_file_i32(const std::string& path) {
  return parse_tensor_i32(read_text_file(path), path);
}

}  // namespace dmrl
