#include "deepfuse/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "deepfuse/random.hpp"

namespace deepfuse::augment {

CutoutMode parse_cutout_mode(std::string_view text) {
  if (text == "none") return CutoutMode::kNone;
  if (text == "face_cutout") return CutoutMode::kFaceCutout;
  if (text == "random_cutout") return CutoutMode::kRandomCutout;
  throw ConfigError("augmentation mode must be none, face_cutout or random_cutout, got '" + std::string(text) + "'");
}

std::string_view cutout_mode_name(CutoutMode mode) {
  switch (mode) {
    case CutoutMode::kNone:
      return "none";
    case CutoutMode::kFaceCutout:
      return "face_cutout";
    case CutoutMode::kRandomCutout:
      return "random_cutout";
  }
  return "?";
}

namespace {

// 0..16 jaw, 17..21 / 22..26 brows, 27..35 nose, 36..41 / 42..47 eyes,
// 48..67 mouth, 68..80 forehead.
constexpr std::size_t kLeftEye[] = {22, 23, 24, 25, 26, 42, 43, 44, 45, 46, 47};
constexpr std::size_t kRightEye[] = {17, 18, 19, 20, 21, 36, 37, 38, 39, 40, 41};
constexpr std::size_t kNose[] = {27, 28, 29, 30, 31, 32, 33, 34, 35};
constexpr std::size_t kMouth[] = {48, 49, 50, 51, 52, 53, 54, 55, 56, 57,
                                  58, 59, 60, 61, 62, 63, 64, 65, 66, 67};
constexpr std::size_t kJaw[] = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16};
constexpr std::size_t kForehead[] = {17, 18, 19, 20, 21, 22, 23, 24, 25, 26, 68, 69, 70,
                                     71, 72, 73, 74, 75, 76, 77, 78, 79, 80};

constexpr FaceRegion kRegions[] = {
    {"left_eye", kLeftEye}, {"right_eye", kRightEye}, {"nose", kNose},
    {"mouth", kMouth},      {"jaw", kJaw},            {"forehead", kForehead},
};

constexpr double kSnap = 1e-9;

double snap(double v) {
  const double r = std::round(v);
  return std::abs(v - r) < kSnap ? r : v;
}

// Bilinear read at a real-valued source coordinate; outside the pixel grid reads `fill`.
float sample_bilinear(const Image& img, std::size_t c, double x, double y, float fill) {
  x = snap(x);
  y = snap(y);
  const double max_x = static_cast<double>(img.width - 1), max_y = static_cast<double>(img.height - 1);
  if (x < 0.0 || y < 0.0 || x > max_x || y > max_y) return fill;
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const std::size_t x1 = std::min(x0 + 1, img.width - 1);
  const std::size_t y1 = std::min(y0 + 1, img.height - 1);
  const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
  const double top = img.at(c, y0, x0) * (1.0 - fx) + img.at(c, y0, x1) * fx;
  const double bottom = img.at(c, y1, x0) * (1.0 - fx) + img.at(c, y1, x1) * fx;
  return static_cast<float>(top * (1.0 - fy) + bottom * fy);
}

double cross(const Point& o, const Point& a, const Point& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

Point clip_point(const Point& p, std::size_t height, std::size_t width) {
  return {std::clamp(p.x, 0.0, static_cast<double>(width - 1)), std::clamp(p.y, 0.0, static_cast<double>(height - 1))};
}

void fill_pixel(Image& img, std::size_t y, std::size_t x, float value) {
  for (std::size_t c = 0; c < img.channels; ++c) img.at(c, y, x) = value;
}

}  // namespace

std::span<const FaceRegion> face_regions() { return kRegions; }

const FaceRegion& face_region(std::string_view name) {
  for (const auto& r : kRegions) {
    if (r.name == name) return r;
  }
  throw ConfigError("unknown face region '" + std::string(name) + "'");
}

nlohmann::json AugmentationPlan::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["mode"] = std::string(cutout_mode_name(mode));
  j["affine"] = {{"rotate_deg", affine.rotate_deg},
                 {"translate_frac_x", affine.translate_frac_x},
                 {"translate_frac_y", affine.translate_frac_y},
                 {"scale", affine.scale},
                 {"hflip", affine.hflip}};
  j["cutout_applied"] = cutout_applied;
  j["region"] = region ? nlohmann::json(*region) : nlohmann::json(nullptr);
  j["hull"] = nlohmann::json::array();
  for (const auto& p : hull) j["hull"].push_back({p.x, p.y});
  j["squares"] = nlohmann::json::array();
  for (const auto& s : squares) j["squares"].push_back({{"cx", s.cx}, {"cy", s.cy}, {"side", s.side}});
  j["fill_value"] = fill_value;
  j["face_region_table_version"] = kFaceRegionTableVersion;
  return j;
}

void AugmentConfig::validate() const {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string("augment.") + name + " must lie in [0, 1]");
  };
  prob(p_rotate, "p_rotate");
  prob(p_translate, "p_translate");
  prob(p_scale, "p_scale");
  prob(p_hflip, "p_hflip");
  prob(p_cutout, "p_cutout");
  if (!(max_rotate_deg >= 0.0)) throw ConfigError("augment.max_rotate_deg must be >= 0");
  if (!(max_translate_frac >= 0.0)) throw ConfigError("augment.max_translate_frac must be >= 0");
  if (!(min_scale > 0.0 && min_scale <= max_scale)) throw ConfigError("augment scale range must satisfy 0 < min <= max");
  if (!(min_cutout_frac > 0.0 && min_cutout_frac <= max_cutout_frac && max_cutout_frac <= 1.0)) {
    throw ConfigError("augment cut-out side range must satisfy 0 < min <= max <= 1");
  }
  if (out_height == 0 || out_width == 0) throw ConfigError("augment output size must be positive");
  for (double s : stddev) {
    if (!(s > 0.0)) throw ConfigError("normalization std must be positive");
  }
}

nlohmann::json AugmentConfig::to_json() const {
  return {{"max_rotate_deg", max_rotate_deg},
          {"max_translate_frac", max_translate_frac},
          {"min_scale", min_scale},
          {"max_scale", max_scale},
          {"p_rotate", p_rotate},
          {"p_translate", p_translate},
          {"p_scale", p_scale},
          {"p_hflip", p_hflip},
          {"p_cutout", p_cutout},
          {"min_cutout_frac", min_cutout_frac},
          {"max_cutout_frac", max_cutout_frac},
          {"fill_value", fill_value},
          {"out_height", out_height},
          {"out_width", out_width},
          {"mean", mean},
          {"std", stddev}};
}

AugmentConfig AugmentConfig::from_json(const nlohmann::json& j) {
  AugmentConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) {
      try {
        j.at(key).get_to(field);
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("augment.") + key + ": " + e.what());
      }
    }
  };
  get("max_rotate_deg", c.max_rotate_deg);
  get("max_translate_frac", c.max_translate_frac);
  get("min_scale", c.min_scale);
  get("max_scale", c.max_scale);
  get("p_rotate", c.p_rotate);
  get("p_translate", c.p_translate);
  get("p_scale", c.p_scale);
  get("p_hflip", c.p_hflip);
  get("p_cutout", c.p_cutout);
  get("min_cutout_frac", c.min_cutout_frac);
  get("max_cutout_frac", c.max_cutout_frac);
  get("fill_value", c.fill_value);
  get("out_height", c.out_height);
  get("out_width", c.out_width);
  get("mean", c.mean);
  get("std", c.stddev);
  c.validate();
  return c;
}

Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw DimensionError("resize_bilinear: output extents must be positive");
  if (out_h == img.height && out_w == img.width) return img;
  auto source = [](std::size_t i, std::size_t in, std::size_t out) {
    if (out == 1) return static_cast<double>(in - 1) / 2.0;
    return static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
  };
  Image out(img.channels, out_h, out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = source(y, img.height, out_h);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = source(x, img.width, out_w);
      for (std::size_t c = 0; c < img.channels; ++c) out.at(c, y, x) = sample_bilinear(img, c, sx, sy, 0.0f);
    }
  }
  return out;
}

template <typename T>
Tensor<T> normalize(const Image& img, std::span<const double> mean, std::span<const double> stddev) {
  if (mean.size() != img.channels || stddev.size() != img.channels) {
    throw ConfigError("normalize: need one mean/std per channel (" + std::to_string(img.channels) + ")");
  }
  for (double s : stddev) {
    if (!(s > 0.0)) throw ConfigError("normalize: std must be positive");
  }
  Tensor<T> out({img.channels, img.height, img.width});
  const std::size_t plane = img.height * img.width;
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      const double v = static_cast<double>(img.pixels[c * plane + i]) / 255.0;
      out[c * plane + i] = static_cast<T>((v - mean[c]) / stddev[c]);
    }
  }
  return out;
}

template <typename T>
Image denormalize(const Tensor<T>& t, std::span<const double> mean, std::span<const double> stddev) {
  if (t.rank() != 3) throw DimensionError("denormalize: expected [C,H,W], got " + shape_to_string(t.shape()));
  Image out(t.extent(0), t.extent(1), t.extent(2));
  if (mean.size() != out.channels || stddev.size() != out.channels) {
    throw ConfigError("denormalize: need one mean/std per channel");
  }
  const std::size_t plane = out.height * out.width;
  for (std::size_t c = 0; c < out.channels; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      out.pixels[c * plane + i] =
          static_cast<float>((static_cast<double>(t[c * plane + i]) * stddev[c] + mean[c]) * 255.0);
    }
  }
  return out;
}

Point affine_map_point(const Point& p, const AffineParams& params, std::size_t height, std::size_t width) {
  const double cx = (static_cast<double>(width) - 1.0) / 2.0, cy = (static_cast<double>(height) - 1.0) / 2.0;
  const double theta = params.rotate_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  double dx = (params.hflip ? cx - p.x : p.x - cx);
  double dy = p.y - cy;
  const double rx = cs * dx + sn * dy, ry = -sn * dx + cs * dy;
  return {cx + params.scale * rx + params.translate_frac_x * static_cast<double>(width),
          cy + params.scale * ry + params.translate_frac_y * static_cast<double>(height)};
}

Image affine_transform(const Image& img, const AffineParams& params, float fill_value) {
  if (!(params.scale > 0.0)) throw ConfigError("affine_transform: scale must be positive");
  if (params.is_identity()) return img;
  const double cx = (static_cast<double>(img.width) - 1.0) / 2.0, cy = (static_cast<double>(img.height) - 1.0) / 2.0;
  const double theta = params.rotate_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double tx = params.translate_frac_x * static_cast<double>(img.width);
  const double ty = params.translate_frac_y * static_cast<double>(img.height);
  Image out(img.channels, img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      // Undo translation, scale, then rotation (R^-1 = R^T), then the flip.
      const double qx = (static_cast<double>(x) - cx - tx) / params.scale;
      const double qy = (static_cast<double>(y) - cy - ty) / params.scale;
      const double dx = cs * qx - sn * qy, dy = sn * qx + cs * qy;
      const double sx = params.hflip ? cx - dx : cx + dx;
      const double sy = cy + dy;
      for (std::size_t c = 0; c < img.channels; ++c) out.at(c, y, x) = sample_bilinear(img, c, sx, sy, fill_value);
    }
  }
  return out;
}

std::vector<Point> convex_hull(std::vector<Point> points) {
  std::sort(points.begin(), points.end(), [](const Point& a, const Point& b) {
    return a.x < b.x || (a.x == b.x && a.y < b.y);
  });
  points.erase(std::unique(points.begin(), points.end()), points.end());
  if (points.size() < 3) return points;
  std::vector<Point> hull(2 * points.size());
  std::size_t k = 0;
  for (const auto& p : points) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0.0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = points.size() - 1, lower = k + 1; i-- > 0;) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], points[i]) <= 0.0) --k;
    hull[k++] = points[i];
  }
  hull.resize(k - 1);
  return hull;
}

CutoutResult random_cutout(const Image& img, std::uint64_t seed, const AugmentConfig& config) {
  if (img.height < 16 || img.width < 16) {
    throw DimensionError("random_cutout: image must be at least 16x16, got " + std::to_string(img.height) + "x" +
                         std::to_string(img.width));
  }
  Rng rng(seed);
  const auto m = static_cast<double>(std::min(img.height, img.width));
  const auto lo = static_cast<long>(std::ceil(config.min_cutout_frac * m));
  const auto hi = std::max(lo, static_cast<long>(std::floor(config.max_cutout_frac * m)));

  CutoutResult result{img, {}};
  result.plan.seed = seed;
  result.plan.mode = CutoutMode::kRandomCutout;
  result.plan.cutout_applied = true;
  result.plan.fill_value = config.fill_value;
  for (int n = 0; n < 2; ++n) {
    CutoutSquare sq;
    sq.side = rng.integer(lo, hi);
    sq.cx = rng.integer(0, static_cast<long>(img.width) - 1);
    sq.cy = rng.integer(0, static_cast<long>(img.height) - 1);
    const long x0 = std::max(0L, sq.cx - sq.side / 2);
    const long y0 = std::max(0L, sq.cy - sq.side / 2);
    const long x1 = std::min(static_cast<long>(img.width), sq.cx - sq.side / 2 + sq.side);
    const long y1 = std::min(static_cast<long>(img.height), sq.cy - sq.side / 2 + sq.side);
    for (long y = y0; y < y1; ++y) {
      for (long x = x0; x < x1; ++x) {
        fill_pixel(result.image, static_cast<std::size_t>(y), static_cast<std::size_t>(x), config.fill_value);
      }
    }
    result.plan.squares.push_back(sq);
  }
  return result;
}

CutoutResult face_cutout(const Image& img, const LandmarkSet& landmarks, std::uint64_t seed,
                         const AugmentConfig& config) {
  Rng rng(seed);
  const FaceRegion& region = kRegions[rng.index(std::size(kRegions))];
  std::vector<Point> pts;
  pts.reserve(region.indices.size());
  for (std::size_t idx : region.indices) pts.push_back(clip_point(landmarks[idx], img.height, img.width));

  CutoutResult result{img, {}};
  result.plan.seed = seed;
  result.plan.mode = CutoutMode::kFaceCutout;
  result.plan.cutout_applied = true;
  result.plan.region = std::string(region.name);
  result.plan.fill_value = config.fill_value;

  std::vector<Point> hull = convex_hull(pts);
  double min_x = pts[0].x, max_x = pts[0].x, min_y = pts[0].y, max_y = pts[0].y;
  for (const auto& p : pts) {
    min_x = std::min(min_x, p.x);
    max_x = std::max(max_x, p.x);
    min_y = std::min(min_y, p.y);
    max_y = std::max(max_y, p.y);
  }
  const auto x_lo = static_cast<std::size_t>(std::ceil(min_x - kSnap));
  const auto x_hi = static_cast<std::size_t>(std::floor(max_x + kSnap));
  const auto y_lo = static_cast<std::size_t>(std::ceil(min_y - kSnap));
  const auto y_hi = static_cast<std::size_t>(std::floor(max_y + kSnap));

  if (hull.size() < 3) {
    // Collinear region points: blank their bounding box instead.
    result.plan.hull = {{min_x, min_y}, {max_x, min_y}, {max_x, max_y}, {min_x, max_y}};
    for (std::size_t y = y_lo; y <= y_hi && y < img.height; ++y) {
      for (std::size_t x = x_lo; x <= x_hi && x < img.width; ++x) fill_pixel(result.image, y, x, config.fill_value);
    }
    return result;
  }

  result.plan.hull = hull;
  for (std::size_t y = y_lo; y <= y_hi && y < img.height; ++y) {
    for (std::size_t x = x_lo; x <= x_hi && x < img.width; ++x) {
      const Point p{static_cast<double>(x), static_cast<double>(y)};
      bool inside = true;
      for (std::size_t i = 0; i < hull.size() && inside; ++i) {
        inside = cross(hull[i], hull[(i + 1) % hull.size()], p) >= -kSnap;
      }
      if (inside) fill_pixel(result.image, y, x, config.fill_value);
    }
  }
  return result;
}

template <typename T>
PipelineResult<T> apply_pipeline(const FaceFrame& frame, CutoutMode mode, std::uint64_t seed,
                                 const AugmentConfig& config) {
  config.validate();
  if (mode == CutoutMode::kFaceCutout && !frame.landmarks) {
    throw DataError("face_cutout needs landmarks, but frame " + std::to_string(frame.frame_index) + " of video '" +
                    frame.video_id + "' has none");
  }
  Image img = to_float(frame.pixels);
  AugmentationPlan plan;
  plan.seed = seed;
  plan.mode = mode;
  plan.fill_value = config.fill_value;

  if (mode != CutoutMode::kNone) {
    // Every draw happens regardless of outcome so that plans stay aligned across configs.
    Rng rng(seed);
    const bool do_rotate = rng.bernoulli(config.p_rotate);
    const double rotate = rng.uniform(-config.max_rotate_deg, config.max_rotate_deg);
    const bool do_translate = rng.bernoulli(config.p_translate);
    const double tx = rng.uniform(-config.max_translate_frac, config.max_translate_frac);
    const double ty = rng.uniform(-config.max_translate_frac, config.max_translate_frac);
    const bool do_scale = rng.bernoulli(config.p_scale);
    const double scale_value = rng.uniform(config.min_scale, config.max_scale);
    const bool do_flip = rng.bernoulli(config.p_hflip);
    const bool do_cutout = rng.bernoulli(config.p_cutout);
    const std::uint64_t cutout_seed = rng.next();

    AffineParams& affine = plan.affine;
    if (do_rotate) affine.rotate_deg = rotate;
    if (do_translate) {
      affine.translate_frac_x = tx;
      affine.translate_frac_y = ty;
    }
    if (do_scale) affine.scale = scale_value;
    affine.hflip = do_flip;
    img = affine_transform(img, affine, config.fill_value);

    if (do_cutout) {
      CutoutResult cut;
      if (mode == CutoutMode::kRandomCutout) {
        cut = random_cutout(img, cutout_seed, config);
      } else {
        std::vector<Point> moved;
        moved.reserve(kLandmarkCount);
        for (const auto& p : frame.landmarks->points()) moved.push_back(affine_map_point(p, affine, img.height, img.width));
        cut = face_cutout(img, LandmarkSet(std::move(moved)), cutout_seed, config);
      }
      img = std::move(cut.image);
      plan.cutout_applied = true;
      plan.region = std::move(cut.plan.region);
      plan.hull = std::move(cut.plan.hull);
      plan.squares = std::move(cut.plan.squares);
    }
  }

  img = resize_bilinear(img, config.out_height, config.out_width);
  return {normalize<T>(img, config.mean, config.stddev), std::move(plan)};
}

template Tensor<float> normalize<float>(const Image&, std::span<const double>, std::span<const double>);
template Tensor<double> normalize<double>(const Image&, std::span<const double>, std::span<const double>);
template Image denormalize<float>(const Tensor<float>&, std::span<const double>, std::span<const double>);
template Image denormalize<double>(const Tensor<double>&, std::span<const double>, std::span<const double>);
template PipelineResult<float> apply_pipeline<float>(const FaceFrame&, CutoutMode, std::uint64_t,
                                                     const AugmentConfig&);
template PipelineResult<double> apply_pipeline<double>(const FaceFrame&, CutoutMode, std::uint64_t,
                                                       const AugmentConfig&);

}  // namespace deepfuse::augment
