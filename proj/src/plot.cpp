#include "dmrl/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace dmrl {

void write_bmp(const std::string& path, int width, int height, const std::vector<Rgb>& pixels) {
  if (static_cast<std::size_t>(width) * static_cast<std::size_t>(height) != pixels.size())
    throw ArgumentError("write_bmp: pixel count mismatch");
  const int row_bytes = (width * 3 + 3) & ~3;
  const std::uint32_t data_size = static_cast<std::uint32_t>(row_bytes) * height;
  const std::uint32_t file_size = 54 + data_size;

  std::string out;
  out.reserve(file_size);
  auto put_u16 = [&](std::uint16_t v) { out.append(reinterpret_cast<const char*>(&v), 2); };
  auto put_u32 = [&](std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); };
  auto put_i32 = [&](std::int32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); };

  out += "BM";
  put_u32(file_size);
  put_u32(0);
  put_u32(54);
  put_u32(40);
  put_i32(width);
  put_i32(height);
  put_u16(1);
  put_u16(24);
  put_u32(0);
  put_u32(data_size);
  put_i32(2835);
  put_i32(2835);
  put_u32(0);
  put_u32(0);

  std::string row(static_cast<std::size_t>(row_bytes), '\0');
  for (int y = height - 1; y >= 0; --y) {  // BMP rows are bottom-up
    for (int x = 0; x < width; ++x) {
      const Rgb& p = pixels[static_cast<std::size_t>(y) * width + x];
      row[static_cast<std::size_t>(x) * 3 + 0] = static_cast<char>(p[2]);
      row[static_cast<std::size_t>(x) * 3 + 1] = static_cast<char>(p[1]);
      row[static_cast<std::size_t>(x) * 3 + 2] = static_cast<char>(p[0]);
    }
    out += row;
  }
  write_text_file(path, out);
}

namespace {

struct Canvas {
  int w, h;
  std::vector<Rgb> px;
  Canvas(int width, int height) : w(width), h(height), px(static_cast<std::size_t>(width) * height, Rgb{255, 255, 255}) {}
  void set(int x, int y, Rgb c) {
    if (x >= 0 && x < w && y >= 0 && y < h) px[static_cast<std::size_t>(y) * w + x] = c;
  }
  void line(int x0, int y0, int x1, int y1, Rgb c) {
    int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    for (;;) {
      set(x0, y0, c);
      if (x0 == x1 && y0 == y1) break;
      int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }
  void fill_rect(int x0, int y0, int x1, int y1, Rgb c) {
    for (int y = std::max(0, y0); y <= std::min(h - 1, y1); ++y)
      for (int x = std::max(0, x0); x <= std::min(w - 1, x1); ++x)
        px[static_cast<std::size_t>(y) * w + x] = c;
  }
};

constexpr Rgb kAxis{40, 40, 40};
constexpr Rgb kGrid{225, 225, 225};

}  // namespace

void plot_lines(const std::string& path, const std::vector<PlotSeries>& series, int width,
                int height) {
  Canvas cv(width, height);
  const int ml = 60, mr = 20, mt = 20, mb = 40;
  const int pw = width - ml - mr, ph = height - mt - mb;

  double lo = 0, hi = 1;
  std::size_t n = 0;
  bool first = true;
  for (const auto& s : series) {
    n = std::max(n, s.values.size());
    for (double v : s.values) {
      if (!std::isfinite(v)) continue;
      if (first) {
        lo = hi = v;
        first = false;
      } else {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
  }
  if (hi - lo < 1e-12) hi = lo + 1;
  if (n < 2) n = 2;

  for (int g = 0; g <= 4; ++g) {
    int y = mt + ph * g / 4;
    cv.line(ml, y, ml + pw, y, kGrid);
  }
  cv.line(ml, mt, ml, mt + ph, kAxis);
  cv.line(ml, mt + ph, ml + pw, mt + ph, kAxis);

  for (const auto& s : series) {
    int prev_x = 0, prev_y = 0;
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      int x = ml + static_cast<int>(static_cast<double>(pw) * i / (n - 1));
      double v = std::clamp(s.values[i], lo, hi);
      int y = mt + ph - static_cast<int>((v - lo) / (hi - lo) * ph);
      if (i > 0) cv.line(prev_x, prev_y, x, y, s.color);
      prev_x = x;
      prev_y = y;
    }
  }
  write_bmp(path, width, height, cv.px);
}

void plot_bars(const std::string& path, const std::vector<PlotSeries>& bars, int width, int height) {
  Canvas cv(width, height);
  const int ml = 60, mr = 20, mt = 20, mb = 40;
  const int pw = width - ml - mr, ph = height - mt - mb;

  double lo = 0, hi = 0;
  for (const auto& b : bars)
    for (double v : b.values) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (hi - lo < 1e-12) hi = lo + 1;

  const auto to_y = [&](double v) {
    return mt + ph - static_cast<int>((v - lo) / (hi - lo) * ph);
  };
  cv.line(ml, mt, ml, mt + ph, kAxis);
  cv.line(ml, to_y(0), ml + pw, to_y(0), kAxis);

  int count = 0;
  for (const auto& b : bars) count += static_cast<int>(b.values.size());
  if (count == 0) count = 1;
  const int slot = pw / count;
  int at = 0;
  for (const auto& b : bars) {
    for (double v : b.values) {
      int x0 = ml + at * slot + slot / 6;
      int x1 = ml + (at + 1) * slot - slot / 6;
      int y0 = std::min(to_y(0), to_y(v));
      int y1 = std::max(to_y(0), to_y(v));
      cv.fill_rect(x0, y0, x1, y1, b.color);
      ++at;
    }
  }
  write_bmp(path, width, height, cv.px);
}

}  // namespace dmrl
