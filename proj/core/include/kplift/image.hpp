#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace kplift {

// Grayscale raster, row-major, values in [0, 1].
struct ImageRaster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;

  ImageRaster() = default;
  ImageRaster(std::size_t w, std::size_t h) : width(w), height(h), pixels(w * h, 0.0) {}

  double& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  double at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }

  friend bool operator==(const ImageRaster&, const ImageRaster&) = default;
};

// Rounds every pixel to the nearest multiple of 1/255, the exact set of
// values an 8-bit PGM can hold.
void quantize_8bit(ImageRaster& image);

// Binary PGM (P5, maxval 255).
void write_pgm(const ImageRaster& image, const std::filesystem::path& path);
ImageRaster read_pgm(const std::filesystem::path& path);

}  // namespace kplift
