#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "deepfuse/frame.hpp"
#include "deepfuse/image.hpp"
#include "deepfuse/tensor.hpp"

namespace deepfuse::augment {

enum class CutoutMode { kNone, kFaceCutout, kRandomCutout };

CutoutMode parse_cutout_mode(std::string_view text);
std::string_view cutout_mode_name(CutoutMode mode);

/// Named landmark subsets of the 81-point layout (68-point iBUG layout plus
/// 13 forehead points, indices 68..80).
struct FaceRegion {
  std::string_view name;
  std::span<const std::size_t> indices;
};

inline constexpr int kFaceRegionTableVersion = 1;

std::span<const FaceRegion> face_regions();
const FaceRegion& face_region(std::string_view name);

struct AffineParams {
  double rotate_deg = 0.0;  // counter-clockwise as displayed (y axis down)
  double translate_frac_x = 0.0;
  double translate_frac_y = 0.0;
  double scale = 1.0;
  bool hflip = false;

  bool is_identity() const {
    return rotate_deg == 0.0 && translate_frac_x == 0.0 && translate_frac_y == 0.0 && scale == 1.0 && !hflip;
  }
};

/// Square cut-out centered at (cx, cy); covers columns [cx - side/2, cx - side/2 + side)
/// and likewise for rows, clipped to the image.
struct CutoutSquare {
  long cx = 0;
  long cy = 0;
  long side = 0;
};

struct AugmentationPlan {
  std::uint64_t seed = 0;
  CutoutMode mode = CutoutMode::kNone;
  AffineParams affine;
  bool cutout_applied = false;
  std::optional<std::string> region;     // face mode
  std::vector<Point> hull;               // face mode: polygon that was filled
  std::vector<CutoutSquare> squares;     // random mode: exactly two
  float fill_value = 0.0f;

  nlohmann::json to_json() const;
};

struct AugmentConfig {
  double max_rotate_deg = 15.0;
  double max_translate_frac = 0.10;
  double min_scale = 0.9;
  double max_scale = 1.1;
  double p_rotate = 0.5;
  double p_translate = 0.5;
  double p_scale = 0.5;
  double p_hflip = 0.5;
  double p_cutout = 0.5;
  double min_cutout_frac = 0.2;
  double max_cutout_frac = 0.4;
  float fill_value = 0.0f;
  std::size_t out_height = 224;
  std::size_t out_width = 224;
  std::array<double, 3> mean{0.5, 0.5, 0.5};
  std::array<double, 3> stddev{0.5, 0.5, 0.5};

  /// Throws ConfigError on out-of-range values.
  void validate() const;

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults.
  static AugmentConfig from_json(const nlohmann::json& j);
};

/**
 * Bilinear resize with corner-aligned sampling: output pixel i maps to
 * source coordinate i * (in - 1) / (out - 1), so corner pixels coincide.
 * A single-pixel output axis samples the source center.
 */
Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w);

/// (pixel / 255 - mean[c]) / std[c] into a [C,H,W] tensor.
template <typename T>
Tensor<T> normalize(const Image& img, std::span<const double> mean, std::span<const double> stddev);

/// Inverse of normalize.
template <typename T>
Image denormalize(const Tensor<T>& t, std::span<const double> mean, std::span<const double> stddev);

/// Forward map of a point under the affine transform about the image center.
Point affine_map_point(const Point& p, const AffineParams& params, std::size_t height, std::size_t width);

/**
 * Applies rotation, translation, scaling and horizontal flip as a single
 * transform about the image center. Each output pixel is inverse-mapped and
 * bilinearly sampled; samples outside the source read `fill_value`.
 */
Image affine_transform(const Image& img, const AffineParams& params, float fill_value = 0.0f);

struct CutoutResult {
  Image image;
  AugmentationPlan plan;
};

/// Blanks two random squares. Requires an image of at least 16x16.
CutoutResult random_cutout(const Image& img, std::uint64_t seed, const AugmentConfig& config = {});

/// Blanks the convex hull of one uniformly chosen face region.
CutoutResult face_cutout(const Image& img, const LandmarkSet& landmarks, std::uint64_t seed,
                         const AugmentConfig& config = {});

/// Convex hull (counter-clockwise in standard axes, no collinear points) via monotone chain.
std::vector<Point> convex_hull(std::vector<Point> points);

template <typename T>
struct PipelineResult {
  Tensor<T> tensor;
  AugmentationPlan plan;
};

/**
 * Full preprocessing of one frame: affine (face/random modes only, each
 * sub-transform drawn independently), then the cut-out with probability
 * p_cutout, then resize to the output size, then normalize. Mode none
 * skips every augmentation. Pure in (frame, mode, seed, config).
 */
template <typename T>
PipelineResult<T> apply_pipeline(const FaceFrame& frame, CutoutMode mode, std::uint64_t seed,
                                 const AugmentConfig& config = {});

}  // namespace deepfuse::augment
