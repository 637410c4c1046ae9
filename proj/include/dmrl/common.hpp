#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace dmrl {

// Error taxonomy. The CLI maps ConfigError/ArgumentError/ShapeError to
// exit code 1 (validation) and everything else to 2 (runtime failure).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ArgumentError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Corrupt or inconsistent on-disk data.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Raised when a loss term goes non-finite during optimization.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Index = std::int64_t;

// FNV-1a, used for config hashing and seed derivation.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}
inline std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(s.data(), s.size());
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write file: " + path);
  out << text;
  if (!out) throw DataError("short write: " + path);
}

inline int env_int(const char* name, int fallback) {
  const char* v = std::getenv(name);
  if (!v || !*v) return fallback;
  try {
    return std::stoi(v);
  } catch (...) {
    return fallback;
  }
}

inline bool deterministic_mode() { return env_int("DMRL_DETERMINISTIC", 0) != 0; }

// Worker count for data-parallel loops. DMRL_NUM_WORKERS=0 means auto;
// deterministic mode pins it to 1.
inline int num_workers() {
  if (deterministic_mode()) return 1;
  int n = env_int("DMRL_NUM_WORKERS", 0);
  if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
  return n > 0 ? n : 1;
}

// Runs fn(i) for i in [0, n). Work items must write to disjoint outputs;
// results are then independent of the thread count.
template <typename Fn>
void parallel_for(Index n, Fn&& fn, int workers = -1) {
  if (workers < 0) workers = num_workers();
  if (workers <= 1 || n <= 1) {
    for (Index i = 0; i < n; ++i) fn(i);
    return;
  }
  const int k = static_cast<int>(std::min<Index>(workers, n));
  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(k));
  for (int t = 0; t < k; ++t) {
    threads.emplace_back([&, t] {
      for (Index i = t; i < n; i += k) fn(i);
    });
  }
  for (auto& th : threads) th.join();
}

}  // namespace dmrl
