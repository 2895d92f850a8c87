#pragma once

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace hpnet {

/// Planar CHW image with values in [0,1].
struct Image {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0)
      : channels(c), height(h), width(w), pixels(c * h * w, fill) {}

  double& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * height + y) * width + x];
  }
  friend bool operator==(const Image&, const Image&) = default;
};

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// PNG (via libpng) or binary PPM (P6), chosen by extension. Grayscale and
/// alpha inputs are converted to RGB.
Image load_image(const std::filesystem::path& path);
void save_png(const Image& image, const std::filesystem::path& path);
void save_ppm(const Image& image, const std::filesystem::path& path);

/// Bilinear resize with half-pixel centers.
Image resize_bilinear(const Image& image, std::size_t height, std::size_t width);
Image crop(const Image& image, std::size_t top, std::size_t left, std::size_t height, std::size_t width);

}  // namespace hpnet
