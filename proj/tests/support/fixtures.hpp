#pragma once

// Synthetic frames, landmark layouts and on-disk datasets shared by the tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "deepfuse/datapipe.hpp"
#include "deepfuse/frame.hpp"
#include "deepfuse/random.hpp"

namespace deepfuse::testing {

namespace fs = std::filesystem;

/// Plausible 81-point layout (68-point iBUG order plus 13 forehead points) for
/// a face filling most of a w x h frame.
inline std::vector<Point> face_landmarks(double w, double h, double jitter = 0.0, std::uint64_t seed = 0) {
  Rng rng(seed);
  std::vector<Point> p;
  p.reserve(kLandmarkCount);
  const double cx = w / 2, cy = h / 2, rx = 0.38 * w, ry = 0.42 * h;
  auto add = [&](double x, double y) { p.push_back({x + jitter * rng.normal(), y + jitter * rng.normal()}); };
  for (int i = 0; i < 17; ++i) {  // jaw
    const double t = std::numbers::pi * i / 16.0;
    add(cx - rx * std::cos(t), cy - 0.05 * h + 0.85 * ry * std::sin(t));
  }
  for (int i = 0; i < 5; ++i) add(cx - 0.28 * w + 0.05 * w * i, cy - 0.18 * h - 0.02 * h * std::sin(i / 4.0 * 3.14));
  for (int i = 0; i < 5; ++i) add(cx + 0.08 * w + 0.05 * w * i, cy - 0.18 * h - 0.02 * h * std::sin(i / 4.0 * 3.14));
  for (int i = 0; i < 4; ++i) add(cx, cy - 0.1 * h + 0.05 * h * i);                 // nose bridge
  for (int i = 0; i < 5; ++i) add(cx - 0.06 * w + 0.03 * w * i, cy + 0.12 * h);    // nostrils
  auto eye = [&](double ex) {
    for (int i = 0; i < 6; ++i) {
      const double t = 2.0 * std::numbers::pi * i / 6.0;
      add(ex + 0.06 * w * std::cos(t + std::numbers::pi), cy - 0.08 * h + 0.025 * h * std::sin(t));
    }
  };
  eye(cx - 0.16 * w);
  eye(cx + 0.16 * w);
  for (int i = 0; i < 12; ++i) {  // outer lip
    const double t = 2.0 * std::numbers::pi * i / 12.0;
    add(cx + 0.14 * w * std::cos(t + std::numbers::pi), cy + 0.24 * h + 0.06 * h * std::sin(t));
  }
  for (int i = 0; i < 8; ++i) {  // inner lip
    const double t = 2.0 * std::numbers::pi * i / 8.0;
    add(cx + 0.09 * w * std::cos(t + std::numbers::pi), cy + 0.24 * h + 0.025 * h * std::sin(t));
  }
  for (int i = 0; i < 13; ++i) {  // forehead arc
    const double t = std::numbers::pi * (1.0 + i / 12.0);
    add(cx + 0.34 * w * std::cos(t), cy - 0.22 * h + 0.2 * h * std::sin(t));
  }
  return p;
}

inline Image8 noise_image(std::size_t h, std::size_t w, Rng& rng, std::uint8_t lo = 0, std::uint8_t hi = 255) {
  Image8 img(3, h, w);
  for (auto& v : img.pixels) v = static_cast<std::uint8_t>(rng.integer(lo, hi));
  return img;
}

inline FaceFrame make_frame(Image8 pixels, Label label, std::string video_id, std::size_t index,
                            bool with_landmarks = true) {
  FaceFrame f;
  if (with_landmarks) {
    f.landmarks = LandmarkSet(face_landmarks(static_cast<double>(pixels.width), static_cast<double>(pixels.height)));
  }
  f.pixels = std::move(pixels);
  f.label = label;
  f.video_id = std::move(video_id);
  f.subset = label == Label::kFake ? "Deepfakes" : "Pristine";
  f.frame_index = index;
  return f;
}

/// Half fake, half real. Fake frames are warm (red-heavy), real frames cool;
/// both carry per-pixel noise.
inline std::vector<FaceFrame> separable_corpus(std::size_t n, std::size_t side, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<FaceFrame> out;
  for (std::size_t i = 0; i < n; ++i) {
    const Label label = i % 2 == 0 ? Label::kFake : Label::kReal;
    Image8 img(3, side, side);
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        const auto noise = [&] { return static_cast<int>(rng.integer(-40, 40)); };
        const int warm = label == Label::kFake ? 190 : 70;
        img.at(0, y, x) = static_cast<std::uint8_t>(std::clamp(warm + noise(), 0, 255));
        img.at(1, y, x) = static_cast<std::uint8_t>(std::clamp(120 + noise(), 0, 255));
        img.at(2, y, x) = static_cast<std::uint8_t>(std::clamp(260 - warm + noise(), 0, 255));
      }
    }
    out.push_back(make_frame(std::move(img), label, "sep_" + std::to_string(i), 0));
  }
  return out;
}

/// Random-noise frames; fake ones carry a bright square at a fixed position.
/// Each frame's background is independent, so the square is the only label cue.
inline std::vector<FaceFrame> patch_corpus(std::size_t n, std::size_t side, std::uint64_t seed,
                                           std::size_t patch = 8, std::size_t px = 6, std::size_t py = 6,
                                           std::uint8_t patch_value = 255, std::uint8_t noise_hi = 200) {
  Rng rng(seed);
  std::vector<FaceFrame> out;
  for (std::size_t i = 0; i < n; ++i) {
    const Label label = i % 2 == 0 ? Label::kFake : Label::kReal;
    Image8 img = noise_image(side, side, rng, 0, noise_hi);
    if (label == Label::kFake) {
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t y = py; y < py + patch; ++y) {
          for (std::size_t x = px; x < px + patch; ++x) img.at(c, y, x) = patch_value;
        }
      }
    }
    out.push_back(make_frame(std::move(img), label, "patch_" + std::to_string(seed) + "_" + std::to_string(i), 0));
  }
  return out;
}

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    Rng rng(static_cast<std::uint64_t>(reinterpret_cast<std::uintptr_t>(this)) ^ std::hash<std::string>{}(tag));
    path_ = fs::temp_directory_path() / ("deepfuse_" + tag + "_" + std::to_string(rng.next() % 1000000007ULL));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

struct VideoSpec {
  std::string video_id;
  std::string subset;
  Label label;
  datapipe::Split split;
  std::size_t frames;
};

/**
 * Writes every video's frames (warm/cool separable images, alternating P6 and
 * PNG) plus landmark sidecars and a manifest.json under `dir`. Returns the
 * manifest path.
 */
inline fs::path write_dataset(const fs::path& dir, const std::vector<VideoSpec>& videos, std::size_t side = 40,
                              std::uint64_t seed = 7, bool landmarks = true) {
  datapipe::DatasetManifest m;
  m.root = dir;
  Rng rng(seed);
  for (const auto& v : videos) {
    datapipe::VideoRecord r{v.video_id, v.subset, v.label, v.split, {}, {}};
    fs::create_directories(dir / v.video_id);
    for (std::size_t i = 0; i < v.frames; ++i) {
      auto frame = separable_corpus(2, side, rng.next())[v.label == Label::kFake ? 0 : 1];
      const fs::path img = dir / v.video_id / (std::to_string(i) + (i % 2 == 0 ? ".ppm" : ".png"));
      if (i % 2 == 0) {
        datapipe::write_ppm(img, frame.pixels);
      } else {
        datapipe::write_png(img, frame.pixels);
      }
      r.frames.push_back(img);
      if (landmarks) {
        const fs::path lm = dir / v.video_id / (std::to_string(i) + ".json");
        datapipe::write_landmarks(lm, *frame.landmarks);
        r.landmarks.push_back(lm);
      }
    }
    m.videos.push_back(std::move(r));
  }
  const fs::path path = dir / "manifest.json";
  std::ofstream(path) << datapipe::manifest_to_json(m).dump(2);
  return path;
}

}  // namespace deepfuse::testing
