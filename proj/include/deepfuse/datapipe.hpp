#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "deepfuse/augment.hpp"
#include "deepfuse/frame.hpp"
#include "deepfuse/image_io.hpp"
#include "deepfuse/tensor.hpp"

namespace deepfuse::datapipe {

inline constexpr int kManifestSchemaVersion = 1;

enum class Split { kTrain, kVal, kTest };

Split parse_split(std::string_view text);
std::string_view split_name(Split split);

/// Accepted values of the manifest "subset" field.
const std::vector<std::string>& known_subsets();

struct VideoRecord {
  std::string video_id;
  std::string subset;
  Label label = Label::kReal;
  Split split = Split::kTrain;
  std::vector<std::filesystem::path> frames;     // absolute or manifest-relative, resolved at load
  std::vector<std::filesystem::path> landmarks;  // empty, or one sidecar per frame
};

struct Count {
  std::size_t videos = 0;
  std::size_t frames = 0;
  bool operator==(const Count&) const = default;
};

struct ManifestStats {
  std::map<std::string, Count> by_split;
  std::map<std::string, Count> by_subset;
  std::size_t empty_videos = 0;
  nlohmann::json to_json() const;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<VideoRecord> videos;
  ManifestStats stats;

  const VideoRecord* find(std::string_view video_id) const;
  std::vector<const VideoRecord*> in_split(Split split) const;
};

struct ManifestOptions {
  bool check_files = true;
};

/**
 * Manifest schema (version 1):
 *
 *   {"schema_version": 1,
 *    "videos": [{"video_id": "000_003", "subset": "Deepfakes", "label": "fake",
 *                "split": "train", "frames": ["000_003/0000.ppm", ...],
 *                "landmarks": ["000_003/0000.json", ...]}]}
 *
 * Relative paths resolve against the manifest's directory. "landmarks" is
 * optional; when present it has one entry per frame. A video_id may appear
 * only once in the whole manifest, which keeps splits disjoint.
 */
DatasetManifest load_manifest(const std::filesystem::path& path, const ManifestOptions& options = {});
DatasetManifest parse_manifest(const nlohmann::json& j, const std::filesystem::path& root,
                               const ManifestOptions& options = {});
/// Serializes with paths relative to `root` where possible.
nlohmann::json manifest_to_json(const DatasetManifest& manifest);

/// Sidecar format: JSON array of 81 [x, y] pairs.
LandmarkSet load_landmarks(const std::filesystem::path& path);
LandmarkSet parse_landmarks(const nlohmann::json& j, const std::string& name = "<json>");
void write_landmarks(const std::filesystem::path& path, const LandmarkSet& landmarks);

/// Throws DataError naming the first video in `split` without sidecars.
void require_landmarks(const DatasetManifest& manifest, Split split);

/// Per-video frame quotas; every selection takes a prefix of the video's frames.
struct FramePolicy {
  std::size_t fake_quota = 50;
  std::size_t real_quota = 150;
  std::size_t test_quota = 16;
  /// Optional cap on the total frames of one split, filled round-robin across videos.
  std::optional<std::size_t> max_frames;

  std::size_t quota(Label label, Split split) const;
};

struct FrameRef {
  std::string video_id;
  std::string subset;
  Label label = Label::kReal;
  Split split = Split::kTrain;
  std::size_t frame_index = 0;
  std::filesystem::path image;
  std::optional<std::filesystem::path> landmarks;
};

struct FrameSample {
  std::vector<FrameRef> frames;  // grouped by video, manifest order
  std::size_t skipped_videos = 0;
  std::vector<std::string> warnings;
};

FrameSample sample_frames(const DatasetManifest& manifest, Split split, const FramePolicy& policy = {});

FaceFrame load_frame(const FrameRef& ref);
/// Decodes frames, concurrently when worker_count() > 1.
std::vector<FaceFrame> load_frames(const std::vector<FrameRef>& refs);

/// DEEPFUSE_WORKERS, default 1.
std::size_t worker_count();

enum class BatchMode { kTrain, kEval };

/// Index batches over [0, n). Train mode shuffles with `seed`; eval keeps order.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                   BatchMode mode);

template <typename T>
struct Batch {
  std::vector<std::size_t> indices;
  std::vector<Tensor<T>> inputs;
  std::vector<T> targets;  // 1 = fake
  std::vector<augment::AugmentationPlan> plans;
};

/**
 * Produces preprocessed batches for one epoch. Train mode applies the
 * pipeline in `mode` with per-frame seed mix_seed(epoch_seed, index); eval
 * mode always uses CutoutMode::kNone.
 */
template <typename T>
class BatchIterator {
 public:
  BatchIterator(const std::vector<FaceFrame>& frames, std::size_t batch_size, std::uint64_t epoch_seed,
                BatchMode batch_mode, augment::CutoutMode mode, augment::AugmentConfig config);

  std::size_t batch_count() const { return batches_.size(); }
  bool next(Batch<T>& out);

 private:
  const std::vector<FaceFrame>* frames_;
  std::vector<std::vector<std::size_t>> batches_;
  std::size_t cursor_ = 0;
  std::uint64_t epoch_seed_;
  augment::CutoutMode mode_;
  augment::AugmentConfig config_;
};

}  // namespace deepfuse::datapipe
