#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace ddpls {

/// Planar (CHW) float image with intensities in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, int c = 3, float fill = 0.0f)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  float& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  float at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  std::size_t plane() const { return static_cast<std::size_t>(width) * height; }

  friend bool operator==(const Image&, const Image&) = default;
};

/// 8-bit RGB PNG I/O. Throws std::runtime_error on failure.
void write_png(const std::string& path, const Image& image);
Image read_png(const std::string& path);

/// Bilinear sample with zero outside the image.
float sample_bilinear(const Image& image, int c, double y, double x);

/// Pads (bottom/right, zeros) or crops to exactly (width, height).
Image pad_or_crop(const Image& image, int width, int height);

}  // namespace ddpls
