#pragma once

#include "drmo/tensor.hpp"

#include <array>
#include <filesystem>
#include <string>
#include <vector>

namespace drmo::io {

// Writes a 3 x H x W tensor with values in [0, 1] as an 8-bit RGB PNG.
void write_png(const std::filesystem::path& path, const Tensor& rgb, std::size_t scale = 1);

struct PlotSeries {
    std::vector<double> x;
    std::vector<double> y;
    std::array<unsigned char, 3> color{0, 0, 0};
};

// Minimal line chart: axes box, light grid at quarter intervals, one polyline per
// series. Each series is scaled to its own y range when separate_axes is set.
void write_line_plot(const std::filesystem::path& path, const std::vector<PlotSeries>& series, std::size_t width = 640,
                     std::size_t height = 360, bool separate_axes = false);

}  // namespace drmo::io
