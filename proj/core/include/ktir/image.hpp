#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace ktir {

// Interleaved HWC image with channel values in [0, 1].
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 3;
  std::vector<double> pixels;

  static Image filled(std::size_t width, std::size_t height, double r, double g, double b);

  double& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels[(y * width + x) * channels + c];
  }
  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }

  friend bool operator==(const Image&, const Image&) = default;
};

// Binary PPM (P6, maxval 255). Values are quantized to 8 bits on write.
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

// Box-filter resize to width x height.
Image resize_image(const Image& image, std::size_t width, std::size_t height);

}  // namespace ktir
