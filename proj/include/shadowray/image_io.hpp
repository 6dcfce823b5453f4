#pragma once

// Rasters and their files: 8-bit PNG (sRGB encoded) and PFM (linear float).

#include <string>
#include <vector>

namespace shadowray {

/// Row-major, interleaved channels, linear values.
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<double> data;

  Raster() = default;
  Raster(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  double& at(int x, int y, int c = 0) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  [[nodiscard]] double at(int x, int y, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  /// Box-filtered downsampling by an integer factor.
  [[nodiscard]] Raster downsample(int factor) const;
};

double srgb_to_linear(double v);
double linear_to_srgb(double v);

/// srgb: encode with the sRGB curve (false writes the values as they are,
/// e.g. binary masks).
void write_png(const std::string& path, const Raster& img, bool srgb = true);
Raster read_png(const std::string& path, bool srgb = true);

void write_pfm(const std::string& path, const Raster& img);
Raster read_pfm(const std::string& path);

}  // namespace shadowray
