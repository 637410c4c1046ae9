#pragma once

#include <array>
#include <string>
#include <vector>

#include "dmrl/common.hpp"

namespace dmrl {

using Rgb = std::array<std::uint8_t, 3>;

struct PlotSeries {
  std::string name;
  std::vector<double> values;
  Rgb color;
};

// Uncompressed 24-bit BMP.
void write_bmp(const std::string& path, int width, int height, const std::vector<Rgb>& pixels);

// Line chart of one or more series over their index; axes drawn, no text
// (series names and scales go into the sidecar meta.json).
void plot_lines(const std::string& path, const std::vector<PlotSeries>& series, int width = 960,
                int height = 540);

// Bar chart of named values in [-1, 1]-ish ranges.
void plot_bars(const std::string& path, const std::vector<PlotSeries>& bars, int width = 640,
               int height = 400);

}  // namespace dmrl
