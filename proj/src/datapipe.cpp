#include "deepfuse/datapipe.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include "deepfuse/random.hpp"

namespace deepfuse::datapipe {

namespace fs = std::filesystem;
using nlohmann::json;

Split parse_split(std::string_view text) {
  if (text == "train") return Split::kTrain;
  if (text == "val") return Split::kVal;
  if (text == "test") return Split::kTest;
  throw DataError("split must be train, val or test, got '" + std::string(text) + "'");
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::kTrain:
      return "train";
    case Split::kVal:
      return "val";
    case Split::kTest:
      return "test";
  }
  return "?";
}

const std::vector<std::string>& known_subsets() {
  static const std::vector<std::string> subsets = {"Deepfakes", "Face2Face", "FaceSwap",  "NeuralTextures",
                                                   "Pristine",  "DFDC-real", "DFDC-fake", "custom"};
  return subsets;
}

json ManifestStats::to_json() const {
  json j;
  for (const auto* group : {&by_split, &by_subset}) {
    json g = json::object();
    for (const auto& [key, c] : *group) g[key] = {{"videos", c.videos}, {"frames", c.frames}};
    j[group == &by_split ? "splits" : "subsets"] = std::move(g);
  }
  j["empty_videos"] = empty_videos;
  return j;
}

const VideoRecord* DatasetManifest::find(std::string_view video_id) const {
  for (const auto& v : videos) {
    if (v.video_id == video_id) return &v;
  }
  return nullptr;
}

std::vector<const VideoRecord*> DatasetManifest::in_split(Split split) const {
  std::vector<const VideoRecord*> out;
  for (const auto& v : videos) {
    if (v.split == split) out.push_back(&v);
  }
  return out;
}

namespace {

const json& field(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) throw DataError(where + "." + key + ": missing");
  return obj.at(key);
}

std::string string_field(const json& obj, const char* key, const std::string& where) {
  const json& v = field(obj, key, where);
  if (!v.is_string()) throw DataError(where + "." + key + ": expected a string");
  std::string s = v.get<std::string>();
  if (s.empty()) throw DataError(where + "." + key + ": must not be empty");
  return s;
}

std::vector<fs::path> path_list(const json& obj, const char* key, const std::string& where, const fs::path& root,
                                bool check_files) {
  const json& v = field(obj, key, where);
  if (!v.is_array()) throw DataError(where + "." + key + ": expected an array of paths");
  std::vector<fs::path> out;
  out.reserve(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::string at = where + "." + key + "[" + std::to_string(i) + "]";
    if (!v[i].is_string()) throw DataError(at + ": expected a path string");
    fs::path p = v[i].get<std::string>();
    if (p.is_relative()) p = root / p;
    if (check_files && !fs::is_regular_file(p)) throw DataError(at + ": file not found: " + p.string());
    out.push_back(std::move(p));
  }
  return out;
}

json read_json(const fs::path& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw DataError(std::string("cannot open ") + what + " '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ": invalid JSON: " + e.what());
  }
}

}  // namespace

DatasetManifest parse_manifest(const json& j, const fs::path& root, const ManifestOptions& options) {
  if (!j.is_object()) throw DataError("manifest: expected a JSON object");
  const json& version = field(j, "schema_version", "manifest");
  if (!version.is_number_integer() || version.get<int>() != kManifestSchemaVersion) {
    throw DataError("manifest.schema_version: expected " + std::to_string(kManifestSchemaVersion) + ", got " +
                    version.dump());
  }
  const json& videos = field(j, "videos", "manifest");
  if (!videos.is_array()) throw DataError("manifest.videos: expected an array");

  DatasetManifest m;
  m.root = root;
  std::map<std::string, std::size_t> seen;
  for (std::size_t i = 0; i < videos.size(); ++i) {
    const std::string where = "videos[" + std::to_string(i) + "]";
    const json& v = videos[i];
    if (!v.is_object()) throw DataError(where + ": expected an object");
    VideoRecord r;
    r.video_id = string_field(v, "video_id", where);
    r.subset = string_field(v, "subset", where);
    const auto& subsets = known_subsets();
    if (std::find(subsets.begin(), subsets.end(), r.subset) == subsets.end()) {
      throw DataError(where + ".subset: unknown subset '" + r.subset + "'");
    }
    try {
      r.label = parse_label(string_field(v, "label", where));
      r.split = parse_split(string_field(v, "split", where));
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
    r.frames = path_list(v, "frames", where, root, options.check_files);
    if (v.contains("landmarks") && !v.at("landmarks").is_null()) {
      r.landmarks = path_list(v, "landmarks", where, root, options.check_files);
      if (r.landmarks.size() != r.frames.size()) {
        throw DataError(where + ".landmarks: " + std::to_string(r.landmarks.size()) + " sidecars for " +
                        std::to_string(r.frames.size()) + " frames");
      }
    }
    if (auto it = seen.find(r.video_id); it != seen.end()) {
      const VideoRecord& other = m.videos[it->second];
      if (other.split != r.split) {
        throw DataError(where + ".video_id: '" + r.video_id + "' appears in both the " +
                        std::string(split_name(other.split)) + " and " + std::string(split_name(r.split)) +
                        " splits");
      }
      throw DataError(where + ".video_id: duplicate video_id '" + r.video_id + "'");
    }
    seen.emplace(r.video_id, m.videos.size());

    Count& s = m.stats.by_split[std::string(split_name(r.split))];
    Count& b = m.stats.by_subset[r.subset];
    ++s.videos;
    ++b.videos;
    s.frames += r.frames.size();
    b.frames += r.frames.size();
    if (r.frames.empty()) ++m.stats.empty_videos;
    m.videos.push_back(std::move(r));
  }
  return m;
}

DatasetManifest load_manifest(const fs::path& path, const ManifestOptions& options) {
  const json j = read_json(path, "manifest");
  const fs::path root = path.has_parent_path() ? path.parent_path() : fs::path(".");
  return parse_manifest(j, root, options);
}

json manifest_to_json(const DatasetManifest& manifest) {
  auto rel = [&](const fs::path& p) {
    const fs::path r = p.lexically_relative(manifest.root);
    return (r.empty() || *r.begin() == "..") ? p.generic_string() : r.generic_string();
  };
  json videos = json::array();
  for (const auto& v : manifest.videos) {
    json rec = {{"video_id", v.video_id},
                {"subset", v.subset},
                {"label", std::string(label_name(v.label))},
                {"split", std::string(split_name(v.split))},
                {"frames", json::array()}};
    for (const auto& f : v.frames) rec["frames"].push_back(rel(f));
    if (!v.landmarks.empty()) {
      rec["landmarks"] = json::array();
      for (const auto& l : v.landmarks) rec["landmarks"].push_back(rel(l));
    }
    videos.push_back(std::move(rec));
  }
  return {{"schema_version", kManifestSchemaVersion}, {"videos", std::move(videos)}};
}

LandmarkSet parse_landmarks(const json& j, const std::string& name) {
  if (!j.is_array()) throw DataError(name + ": landmarks must be a JSON array of [x, y] pairs");
  if (j.size() != kLandmarkCount) {
    throw DataError(name + ": expected " + std::to_string(kLandmarkCount) + " landmarks, got " +
                    std::to_string(j.size()));
  }
  std::vector<Point> points;
  points.reserve(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) {
    const json& p = j[i];
    if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
      throw DataError(name + ": landmark " + std::to_string(i) + " is not an [x, y] number pair");
    }
    points.push_back({p[0].get<double>(), p[1].get<double>()});
  }
  try {
    return LandmarkSet(std::move(points));
  } catch (const DataError& e) {
    throw DataError(name + ": " + e.what());
  }
}

LandmarkSet load_landmarks(const fs::path& path) {
  return parse_landmarks(read_json(path, "landmark sidecar"), path.string());
}

void write_landmarks(const fs::path& path, const LandmarkSet& landmarks) {
  json j = json::array();
  for (const auto& p : landmarks.points()) j.push_back({p.x, p.y});
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << j.dump() << '\n';
}

void require_landmarks(const DatasetManifest& manifest, Split split) {
  for (const auto* v : manifest.in_split(split)) {
    if (!v->frames.empty() && v->landmarks.empty()) {
      throw DataError("face_cutout needs landmark sidecars, but video '" + v->video_id + "' (" +
                      std::string(split_name(split)) + ") has none");
    }
  }
}

std::size_t FramePolicy::quota(Label label, Split split) const {
  if (split == Split::kTest) return test_quota;
  return label == Label::kFake ? fake_quota : real_quota;
}

FrameSample sample_frames(const DatasetManifest& manifest, Split split, const FramePolicy& policy) {
  FrameSample out;
  std::vector<std::vector<FrameRef>> per_video;
  for (const auto* v : manifest.in_split(split)) {
    if (v->frames.empty()) {
      ++out.skipped_videos;
      out.warnings.push_back("video '" + v->video_id + "' has no frames; skipped");
      continue;
    }
    const std::size_t quota = policy.quota(v->label, split);
    const std::size_t take = std::min(quota, v->frames.size());
    if (take < quota) {
      out.warnings.push_back("video '" + v->video_id + "' has " + std::to_string(v->frames.size()) +
                             " frames, below the quota of " + std::to_string(quota));
    }
    std::vector<FrameRef> refs;
    refs.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
      FrameRef r{v->video_id, v->subset, v->label, v->split, i, v->frames[i], std::nullopt};
      if (!v->landmarks.empty()) r.landmarks = v->landmarks[i];
      refs.push_back(std::move(r));
    }
    per_video.push_back(std::move(refs));
  }

  std::vector<std::size_t> keep(per_video.size());
  for (std::size_t i = 0; i < per_video.size(); ++i) keep[i] = per_video[i].size();
  if (policy.max_frames) {
    // Round-robin over frame positions so the cap trims long videos first.
    std::fill(keep.begin(), keep.end(), 0);
    std::size_t budget = *policy.max_frames;
    for (std::size_t depth = 0; budget > 0; ++depth) {
      bool any = false;
      for (std::size_t i = 0; i < per_video.size() && budget > 0; ++i) {
        if (depth < per_video[i].size()) {
          ++keep[i];
          --budget;
          any = true;
        }
      }
      if (!any) break;
    }
  }
  for (std::size_t i = 0; i < per_video.size(); ++i) {
    out.frames.insert(out.frames.end(), per_video[i].begin(),
                      per_video[i].begin() + static_cast<std::ptrdiff_t>(keep[i]));
  }
  return out;
}

FaceFrame load_frame(const FrameRef& ref) {
  FaceFrame f;
  f.pixels = decode_image(ref.image);
  if (f.pixels.height < 32 || f.pixels.width < 32) {
    throw DataError(ref.image.string() + ": frames must be at least 32x32, got " +
                    std::to_string(f.pixels.width) + "x" + std::to_string(f.pixels.height));
  }
  if (ref.landmarks) f.landmarks = load_landmarks(*ref.landmarks);
  f.label = ref.label;
  f.video_id = ref.video_id;
  f.subset = ref.subset;
  f.frame_index = ref.frame_index;
  return f;
}

std::size_t worker_count() {
  const char* env = std::getenv("DEEPFUSE_WORKERS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError("DEEPFUSE_WORKERS must be a positive integer, got '" +
                                               std::string(env) + "'");
  return static_cast<std::size_t>(n);
}

namespace {

// Runs fn(i) for i in [0, n) on up to `workers` threads; rethrows the first failure.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn fn) {
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

std::vector<FaceFrame> load_frames(const std::vector<FrameRef>& refs) {
  std::vector<FaceFrame> out(refs.size());
  parallel_for(refs.size(), worker_count(), [&](std::size_t i) { out[i] = load_frame(refs[i]); });
  return out;
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                   BatchMode mode) {
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (mode == BatchMode::kTrain && n > 1) {
    Rng rng(seed);
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t stop = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(stop));
  }
  return batches;
}

template <typename T>
BatchIterator<T>::BatchIterator(const std::vector<FaceFrame>& frames, std::size_t batch_size,
                                std::uint64_t epoch_seed, BatchMode batch_mode, augment::CutoutMode mode,
                                augment::AugmentConfig config)
    : frames_(&frames),
      batches_(make_batches(frames.size(), batch_size, epoch_seed, batch_mode)),
      epoch_seed_(epoch_seed),
      mode_(batch_mode == BatchMode::kTrain ? mode : augment::CutoutMode::kNone),
      config_(std::move(config)) {
  config_.validate();
}

template <typename T>
bool BatchIterator<T>::next(Batch<T>& out) {
  if (cursor_ >= batches_.size()) return false;
  const auto& idx = batches_[cursor_++];
  out.indices = idx;
  out.inputs.assign(idx.size(), Tensor<T>());
  out.targets.assign(idx.size(), T{0});
  out.plans.assign(idx.size(), {});
  parallel_for(idx.size(), worker_count(), [&](std::size_t k) {
    const FaceFrame& f = (*frames_)[idx[k]];
    auto r = augment::apply_pipeline<T>(f, mode_, mix_seed(epoch_seed_, idx[k]), config_);
    out.inputs[k] = std::move(r.tensor);
    out.plans[k] = std::move(r.plan);
    out.targets[k] = f.label == Label::kFake ? T{1} : T{0};
  });
  return true;
}

template class BatchIterator<float>;
template class BatchIterator<double>;

}  // namespace deepfuse::datapipe
