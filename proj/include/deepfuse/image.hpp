#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "deepfuse/errors.hpp"

namespace deepfuse {

/// Planar channel-major image [C, H, W].
template <typename P>
struct BasicImage {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<P> pixels;

  BasicImage() = default;
  BasicImage(std::size_t c, std::size_t h, std::size_t w, P value = P{})
      : channels(c), height(h), width(w), pixels(c * h * w, value) {
    if (c == 0 || h == 0 || w == 0) {
      throw DimensionError("image extents must be positive, got " + std::to_string(c) + "x" + std::to_string(h) +
                           "x" + std::to_string(w));
    }
  }

  std::size_t size() const { return pixels.size(); }
  P& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  const P& at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }

  bool operator==(const BasicImage&) const = default;
};

/// 8-bit image as decoded from disk.
using Image8 = BasicImage<std::uint8_t>;
/// Working image for augmentation, pixel values on the 0..255 scale.
using Image = BasicImage<float>;

Image to_float(const Image8& img);
/// Rounds to nearest and clamps to 0..255.
Image8 to_u8(const Image& img);

}  // namespace deepfuse
