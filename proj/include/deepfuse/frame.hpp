#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "deepfuse/image.hpp"

namespace deepfuse {

inline constexpr std::size_t kLandmarkCount = 81;

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

/// Exactly 81 finite facial keypoints in frame pixel coordinates. Points may
/// sit slightly outside the image; consumers clip before rasterizing.
class LandmarkSet {
 public:
  explicit LandmarkSet(std::vector<Point> points);

  const std::vector<Point>& points() const noexcept { return points_; }
  const Point& operator[](std::size_t i) const { return points_.at(i); }

 private:
  std::vector<Point> points_;
};

enum class Label { kReal = 0, kFake = 1 };

Label parse_label(std::string_view text);
std::string_view label_name(Label label);

struct FaceFrame {
  Image8 pixels;
  std::optional<LandmarkSet> landmarks;
  Label label = Label::kReal;
  std::string video_id;
  std::string subset;
  std::size_t frame_index = 0;
};

}  // namespace deepfuse
