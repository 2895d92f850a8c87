#include "hpnet/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>

#include <png.h>

namespace hpnet {

namespace {

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

Image load_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw ImageIoError("cannot read PNG " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buffer(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&img);
    throw ImageIoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  Image out(3, img.height, img.width);
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.at(c, y, x) = buffer[(y * out.width + x) * 3 + c] / 255.0;
  return out;
}

Image load_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageIoError("cannot open " + path.string());
  std::string magic;
  in >> magic;
  auto next_int = [&]() {
    int v = 0;
    while (in >> std::ws && in.peek() == '#') {
      std::string comment;
      std::getline(in, comment);
    }
    if (!(in >> v)) throw ImageIoError("malformed PPM header in " + path.string());
    return v;
  };
  if (magic != "P6") throw ImageIoError("only binary P6 PPM is supported: " + path.string());
  const int w = next_int(), h = next_int(), maxval = next_int();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) {
    throw ImageIoError("unsupported PPM geometry in " + path.string());
  }
  in.get();
  std::vector<unsigned char> buffer(static_cast<std::size_t>(w) * h * 3);
  if (!in.read(reinterpret_cast<char*>(buffer.data()), static_cast<std::streamsize>(buffer.size()))) {
    throw ImageIoError("truncated PPM " + path.string());
  }
  Image out(3, static_cast<std::size_t>(h), static_cast<std::size_t>(w));
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        out.at(c, y, x) = buffer[(y * out.width + x) * 3 + c] / static_cast<double>(maxval);
  return out;
}

std::vector<unsigned char> interleave_rgb(const Image& image) {
  std::vector<unsigned char> buffer(image.height * image.width * 3);
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t src = image.channels == 1 ? 0 : c;
        buffer[(y * image.width + x) * 3 + c] = to_byte(image.at(src, y, x));
      }
  return buffer;
}

}  // namespace

Image load_image(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") return load_png(path);
  if (ext == ".ppm") return load_ppm(path);
  throw ImageIoError("unsupported image format: " + path.string());
}

void save_png(const Image& image, const std::filesystem::path& path) {
  if (image.channels != 3 && image.channels != 1) throw ImageIoError("save_png: need 1 or 3 channels");
  const auto buffer = interleave_rgb(image);
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    throw ImageIoError("cannot write PNG " + path.string() + ": " + img.message);
  }
}

void save_ppm(const Image& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ImageIoError("cannot write " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  const auto buffer = interleave_rgb(image);
  out.write(reinterpret_cast<const char*>(buffer.data()), static_cast<std::streamsize>(buffer.size()));
}

Image resize_bilinear(const Image& image, std::size_t height, std::size_t width) {
  Image out(image.channels, height, width);
  const double sy = static_cast<double>(image.height) / static_cast<double>(height);
  const double sx = static_cast<double>(image.width) / static_cast<double>(width);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(image.height - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, image.height - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(image.width - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, image.width - 1);
      const double tx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < image.channels; ++c) {
        const double top = image.at(c, y0, x0) * (1 - tx) + image.at(c, y0, x1) * tx;
        const double bottom = image.at(c, y1, x0) * (1 - tx) + image.at(c, y1, x1) * tx;
        out.at(c, y, x) = top * (1 - ty) + bottom * ty;
      }
    }
  }
  return out;
}

Image crop(const Image& image, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
  if (top + height > image.height || left + width > image.width) {
    throw std::out_of_range("crop window exceeds image bounds");
  }
  Image out(image.channels, height, width);
  for (std::size_t c = 0; c < image.channels; ++c)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) out.at(c, y, x) = image.at(c, top + y, left + x);
  return out;
}

}  // namespace hpnet
