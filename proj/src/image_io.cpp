#include "shadowray/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace shadowray {

Raster Raster::downsample(int factor) const {
  if (factor == 1) return *this;
  if (factor < 1 || width % factor || height % factor)
    throw std::invalid_argument("downsample: " + std::to_string(width) + "x" + std::to_string(height) +
                                " is not divisible by " + std::to_string(factor));
  Raster out(width / factor, height / factor, channels);
  const double norm = 1.0 / (factor * factor);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < channels; ++c) out.at(x / factor, y / factor, c) += norm * at(x, y, c);
  return out;
}

double srgb_to_linear(double v) {
  return v <= 0.04045 ? v / 12.92 : std::pow((v + 0.055) / 1.055, 2.4);
}

double linear_to_srgb(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return v <= 0.0031308 ? 12.92 * v : 1.055 * std::pow(v, 1.0 / 2.4) - 0.055;
}

void write_png(const std::string& path, const Raster& img, bool srgb) {
  if (img.channels != 1 && img.channels != 3)
    throw std::invalid_argument("write_png: only 1 or 3 channels are supported");
  std::vector<std::uint8_t> bytes(img.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const double v = srgb ? linear_to_srgb(img.data[i]) : std::clamp(img.data[i], 0.0, 1.0);
    bytes[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  png_image im;
  std::memset(&im, 0, sizeof im);
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(img.width);
  im.height = static_cast<png_uint_32>(img.height);
  im.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&im, path.c_str(), 0, bytes.data(), 0, nullptr))
    throw std::runtime_error("cannot write PNG '" + path + "': " + im.message);
}

Raster read_png(const std::string& path, bool srgb) {
  png_image im;
  std::memset(&im, 0, sizeof im);
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&im, path.c_str()))
    throw std::runtime_error("cannot read PNG '" + path + "': " + im.message);
  const bool gray = (im.format & PNG_FORMAT_FLAG_COLOR) == 0;
  im.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(im));
  if (!png_image_finish_read(&im, nullptr, bytes.data(), 0, nullptr)) {
    png_image_free(&im);
    throw std::runtime_error("cannot decode PNG '" + path + "': " + im.message);
  }
  Raster out(static_cast<int>(im.width), static_cast<int>(im.height), gray ? 1 : 3);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const double v = bytes[i] / 255.0;
    out.data[i] = srgb ? srgb_to_linear(v) : v;
  }
  return out;
}

// PFM: "PF" (RGB) or "Pf" (gray), dimensions, scale (negative = little
// endian), rows stored bottom to top.
void write_pfm(const std::string& path, const Raster& img) {
  if (img.channels != 1 && img.channels != 3)
    throw std::invalid_argument("write_pfm: only 1 or 3 channels are supported");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f << (img.channels == 3 ? "PF" : "Pf") << "\n" << img.width << " " << img.height << "\n"
    << (std::endian::native == std::endian::little ? "-1.0" : "1.0") << "\n";
  std::vector<float> row(static_cast<std::size_t>(img.width) * img.channels);
  for (int y = img.height - 1; y >= 0; --y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) row[x * img.channels + c] = static_cast<float>(img.at(x, y, c));
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!f) throw std::runtime_error("error writing '" + path + "'");
}

Raster read_pfm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open PFM '" + path + "'");
  std::string magic;
  int w = 0, h = 0;
  double scale = 0.0;
  f >> magic >> w >> h >> scale;
  f.get();
  if ((magic != "PF" && magic != "Pf") || w <= 0 || h <= 0 || scale == 0.0 || !f)
    throw std::runtime_error("malformed PFM header in '" + path + "'");
  const int channels = magic == "PF" ? 3 : 1;
  const bool little = scale < 0.0;
  Raster out(w, h, channels);
  std::vector<std::uint32_t> row(static_cast<std::size_t>(w) * channels);
  for (int y = h - 1; y >= 0; --y) {
    f.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size() * 4));
    if (!f) throw std::runtime_error("truncated PFM '" + path + "'");
    for (std::size_t i = 0; i < row.size(); ++i) {
      std::uint32_t bits = row[i];
      if (little != (std::endian::native == std::endian::little)) bits = __builtin_bswap32(bits);
      out.data[static_cast<std::size_t>(y) * w * channels + i] = std::bit_cast<float>(bits);
    }
  }
  return out;
}

}  // namespace shadowray
