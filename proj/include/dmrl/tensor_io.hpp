#pragma once

#include <cstdint>
#include <cstring>
#include <string>

#include "dmrl/tensor.hpp"

namespace dmrl {

// "DMRT" tensor container: magic, u32 version=1, u32 dtype (0=float32,
// 1=int32), u32 ndim, ndim x u32 dims, row-major little-endian payload.
namespace dmrt {
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kDtypeF32 = 0;
constexpr std::uint32_t kDtypeI32 = 1;
}  // namespace dmrt

std::uint32_t crc32(const void* data, std::size_t n, std::uint32_t seed = 0);
inline std::uint32_t crc32(const std::string& s) { return crc32(s.data(), s.size()); }

std::string serialize_tensor(const Tensor<float>& t);
std::string serialize_tensor(const Tensor<std::int32_t>& t);

// Parses a DMRT blob; throws DataError on malformed input or dtype mismatch.
Tensor<float> parse_tensor_f32(const std::string& blob, const std::string& what);
Tensor<std::int32_t> parse_tensor_i32(const std::string& blob, const std::string& what);
std::uint32_t peek_dtype(const std::string& blob, const std::string& what);

void write_tensor_file(const std::string& path, const Tensor<float>& t);
void write_tensor_file(const std::string& path, const Tensor<std::int32_t>& t);
Tensor<float> read_tensor_file_f32(const std::string& path);
Tensor<std::int32_t> read_tensor_file_i32(const std::string& path);

}  // namespace dmrl
