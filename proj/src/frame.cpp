#include "deepfuse/frame.hpp"

#include <algorithm>
#include <cmath>

namespace deepfuse {

Image to_float(const Image8& img) {
  Image out(img.channels, img.height, img.width);
  std::transform(img.pixels.begin(), img.pixels.end(), out.pixels.begin(),
                 [](std::uint8_t v) { return static_cast<float>(v); });
  return out;
}

Image8 to_u8(const Image& img) {
  Image8 out(img.channels, img.height, img.width);
  std::transform(img.pixels.begin(), img.pixels.end(), out.pixels.begin(), [](float v) {
    return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  });
  return out;
}

LandmarkSet::LandmarkSet(std::vector<Point> points) : points_(std::move(points)) {
  if (points_.size() != kLandmarkCount) {
    throw DataError("landmark set must have " + std::to_string(kLandmarkCount) + " points, got " +
                    std::to_string(points_.size()));
  }
  for (std::size_t i = 0; i < points_.size(); ++i) {
    if (!std::isfinite(points_[i].x) || !std::isfinite(points_[i].y)) {
      throw DataError("landmark " + std::to_string(i) + " has a non-finite coordinate");
    }
  }
}

Label parse_label(std::string_view text) {
  if (text == "real") return Label::kReal;
  if (text == "fake") return Label::kFake;
  throw DataError("label must be 'real' or 'fake', got '" + std::string(text) + "'");
}

std::string_view label_name(Label label) { return label == Label::kFake ? "fake" : "real"; }

}  // namespace deepfuse
