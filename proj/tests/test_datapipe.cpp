#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>

#include "deepfuse/datapipe.hpp"
#include "deepfuse/errors.hpp"
#include "support/fixtures.hpp"

using namespace deepfuse;
using namespace deepfuse::datapipe;
using deepfuse::testing::TempDir;
using nlohmann::json;

namespace {

json video_json(const std::string& id, const std::string& label, const std::string& split, std::size_t frames,
                const std::string& subset = "") {
  json v{{"video_id", id},
         {"subset", subset.empty() ? (label == "fake" ? "Deepfakes" : "Pristine") : subset},
         {"label", label},
         {"split", split},
         {"frames", json::array()}};
  for (std::size_t i = 0; i < frames; ++i) v["frames"].push_back(id + "/" + std::to_string(i) + ".ppm");
  return v;
}

DatasetManifest parse_loose(const json& videos) {
  return parse_manifest(json{{"schema_version", 1}, {"videos", videos}}, "/data", {.check_files = false});
}

std::string message_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Manifest, MinimalSingleVideo) {
  const auto m = parse_loose(json::array({video_json("v0", "fake", "train", 3)}));
  ASSERT_EQ(m.videos.size(), 1u);
  EXPECT_EQ(m.stats.by_split.at("train"), (Count{1, 3}));
  EXPECT_EQ(m.videos[0].frames[0], std::filesystem::path("/data/v0/0.ppm"));
  ASSERT_NE(m.find("v0"), nullptr);
  EXPECT_EQ(m.find("missing"), nullptr);
}

TEST(Manifest, StandardSplitCountsAreEchoed) {
  json videos = json::array();
  std::size_t n = 0;
  for (auto [split, count] : {std::pair{"train", 720}, {"val", 140}, {"test", 140}}) {
    for (int i = 0; i < count; ++i, ++n) {
      videos.push_back(video_json("vid" + std::to_string(n), n % 2 ? "real" : "fake", split, 1));
    }
  }
  const auto m = parse_loose(videos);
  EXPECT_EQ(m.stats.by_split.at("train").videos, 720u);
  EXPECT_EQ(m.stats.by_split.at("val").videos, 140u);
  EXPECT_EQ(m.stats.by_split.at("test").videos, 140u);
  EXPECT_EQ(m.in_split(Split::kVal).size(), 140u);
  EXPECT_EQ(m.stats.to_json()["splits"]["train"]["videos"], 720);
}

TEST(Manifest, VideoInTwoSplitsIsRejected) {
  const auto msg = message_of([] {
    parse_loose(json::array({video_json("dup", "fake", "train", 1), video_json("dup", "fake", "test", 1)}));
  });
  EXPECT_NE(msg.find("appears in both the train and test splits"), std::string::npos) << msg;
  EXPECT_NE(message_of([] {
              parse_loose(json::array({video_json("d", "real", "val", 1), video_json("d", "real", "val", 1)}));
            }).find("duplicate video_id"),
            std::string::npos);
}

TEST(Manifest, FieldLevelSchemaErrors) {
  auto bad_label = video_json("a", "fake", "train", 1);
  bad_label["label"] = "maybe";
  EXPECT_NE(message_of([&] { parse_loose(json::array({video_json("ok", "real", "train", 1), bad_label})); })
                .find("videos[1]"),
            std::string::npos);
  auto no_split = video_json("a", "fake", "train", 1);
  no_split.erase("split");
  EXPECT_NE(message_of([&] { parse_loose(json::array({no_split})); }).find("split: missing"), std::string::npos);
  auto odd_subset = video_json("a", "fake", "train", 1, "Celeb-DF");
  EXPECT_THROW(parse_loose(json::array({odd_subset})), DataError);
  auto lm_mismatch = video_json("a", "fake", "train", 2);
  lm_mismatch["landmarks"] = json::array({"a/0.json"});
  EXPECT_THROW(parse_loose(json::array({lm_mismatch})), DataError);
  EXPECT_THROW(parse_manifest(json{{"schema_version", 2}, {"videos", json::array()}}, "/", {}), DataError);
}

TEST(Manifest, MissingFilesAreReported) {
  TempDir dir("manifest_missing");
  std::ofstream(dir / "manifest.json") << json{{"schema_version", 1},
                                                {"videos", json::array({video_json("gone", "real", "test", 1)})}}
                                              .dump();
  const auto msg = message_of([&] { load_manifest(dir / "manifest.json"); });
  EXPECT_NE(msg.find("file not found"), std::string::npos) << msg;
  EXPECT_THROW(load_manifest(dir / "nope.json"), DataError);
}

TEST(Manifest, WrittenDatasetLoadsAndRoundTrips) {
  TempDir dir("manifest_rt");
  const auto path = deepfuse::testing::write_dataset(
      dir.path(), {{"a", "Deepfakes", Label::kFake, Split::kTrain, 3}, {"b", "Pristine", Label::kReal, Split::kTest, 2}});
  const auto m = load_manifest(path);
  EXPECT_EQ(m.stats.by_subset.at("Deepfakes"), (Count{1, 3}));
  const auto j = manifest_to_json(m);
  EXPECT_EQ(j["videos"][0]["frames"][0], "a/0.ppm");
  const auto again = parse_manifest(j, m.root);
  EXPECT_EQ(again.videos[1].frames, m.videos[1].frames);
  EXPECT_NO_THROW(require_landmarks(m, Split::kTrain));
}

TEST(Manifest, RequireLandmarksNamesVideo) {
  TempDir dir("manifest_nolm");
  const auto path =
      deepfuse::testing::write_dataset(dir.path(), {{"bare", "Face2Face", Label::kFake, Split::kTrain, 1}}, 40, 1, false);
  const auto m = load_manifest(path);
  const auto msg = message_of([&] { require_landmarks(m, Split::kTrain); });
  EXPECT_NE(msg.find("bare"), std::string::npos);
}

TEST(ImageIo, DecodesMinimalP6) {
  std::string bytes = "P6 2 2 255\n";
  for (int i = 0; i < 12; ++i) bytes.push_back(static_cast<char>(i * 20));
  const auto img = decode_image_bytes({reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()});
  EXPECT_EQ(img.height, 2u);
  EXPECT_EQ(img.width, 2u);
  // Interleaved RGB in the file, planar in memory.
  EXPECT_EQ(img.at(0, 0, 0), 0);
  EXPECT_EQ(img.at(1, 0, 0), 20);
  EXPECT_EQ(img.at(2, 0, 1), 100);
  EXPECT_EQ(img.at(0, 1, 1), 180);
}

TEST(ImageIo, CommentsAndErrors) {
  auto decode = [](const std::string& s) {
    return decode_image_bytes({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
  };
  EXPECT_EQ(decode("P6\n# made by hand\n1 1\n255\nabc").at(2, 0, 0), 'c');
  EXPECT_THROW(decode("P6 2 2 255\nabcdef"), DataError);
  EXPECT_THROW(decode("P6 1 1 65535\nabcdef"), DataError);
  EXPECT_THROW(decode("GIF89a"), DataError);
  EXPECT_THROW(decode(""), DataError);
}

TEST(ImageIo, PngAndP6DecodeIdentically) {
  TempDir dir("imageio");
  Rng rng(3);
  const auto img = deepfuse::testing::noise_image(37, 41, rng);
  write_ppm(dir / "a.ppm", img);
  write_png(dir / "a.png", img);
  const auto from_ppm = decode_image(dir / "a.ppm");
  const auto from_png = decode_image(dir / "a.png");
  EXPECT_EQ(from_ppm.pixels, img.pixels);
  EXPECT_EQ(from_png.pixels, img.pixels);
  EXPECT_THROW(decode_image(dir / "missing.png"), DataError);
}

TEST(Landmarks, CountAndFiniteness) {
  json pts = json::array();
  for (int i = 0; i < 81; ++i) pts.push_back({i * 1.5, -3.0 + i});  // out-of-frame values are fine
  EXPECT_EQ(parse_landmarks(pts).points().size(), 81u);
  json short_set = json::array();
  for (int i = 0; i < 68; ++i) short_set.push_back({1.0, 2.0});
  EXPECT_NE(message_of([&] { parse_landmarks(short_set); }).find("expected 81 landmarks, got 68"), std::string::npos);
  pts[5] = {"x", 1.0};
  EXPECT_THROW(parse_landmarks(pts), DataError);
}

TEST(Landmarks, SidecarRoundTrip) {
  TempDir dir("landmarks");
  const LandmarkSet lm(deepfuse::testing::face_landmarks(64, 64, 1.0, 9));
  write_landmarks(dir / "lm.json", lm);
  const auto back = load_landmarks(dir / "lm.json");
  for (std::size_t i = 0; i < lm.points().size(); ++i) {
    EXPECT_DOUBLE_EQ(back[i].x, lm[i].x);
    EXPECT_DOUBLE_EQ(back[i].y, lm[i].y);
  }
}

TEST(SampleFrames, QuotasFollowLabelAndSplit) {
  const auto m = parse_loose(json::array({video_json("fake80", "fake", "train", 80), video_json("real100", "real", "train", 100),
                                          video_json("real200", "real", "val", 200), video_json("test30", "fake", "test", 30),
                                          video_json("test5", "real", "test", 5)}));
  const auto train = sample_frames(m, Split::kTrain);
  ASSERT_EQ(train.frames.size(), 150u);
  EXPECT_EQ(train.frames[49].frame_index, 49u);
  EXPECT_EQ(train.frames[49].video_id, "fake80");
  EXPECT_EQ(train.frames[50].video_id, "real100");
  EXPECT_EQ(train.frames.back().frame_index, 99u);
  EXPECT_EQ(train.warnings.size(), 1u);  // real100 falls short of 150

  EXPECT_EQ(sample_frames(m, Split::kVal).frames.size(), 150u);
  const auto test = sample_frames(m, Split::kTest);
  ASSERT_EQ(test.frames.size(), 21u);
  EXPECT_EQ(test.frames[15].frame_index, 15u);
  EXPECT_EQ(test.frames[16].video_id, "test5");
}

TEST(SampleFrames, EmptyVideosAreSkippedWithWarning) {
  const auto m = parse_loose(json::array({video_json("empty", "fake", "test", 0), video_json("full", "fake", "test", 4)}));
  EXPECT_EQ(m.stats.empty_videos, 1u);
  const auto s = sample_frames(m, Split::kTest);
  EXPECT_EQ(s.skipped_videos, 1u);
  EXPECT_EQ(s.frames.size(), 4u);
  EXPECT_FALSE(s.warnings.empty());
}

TEST(SampleFrames, RandomVideoLengthsProperty) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    json videos = json::array();
    std::vector<std::size_t> lengths;
    for (int v = 0; v < 6; ++v) {
      lengths.push_back(rng.index(220));
      videos.push_back(video_json("v" + std::to_string(v), v % 2 ? "real" : "fake", trial % 2 ? "test" : "train", lengths.back()));
    }
    const auto m = parse_loose(videos);
    const Split split = trial % 2 ? Split::kTest : Split::kTrain;
    const auto s = sample_frames(m, split);
    for (int v = 0; v < 6; ++v) {
      const auto id = "v" + std::to_string(v);
      const std::size_t quota = split == Split::kTest ? 16 : (v % 2 ? 150 : 50);
      const auto got = std::count_if(s.frames.begin(), s.frames.end(), [&](const FrameRef& f) { return f.video_id == id; });
      EXPECT_EQ(static_cast<std::size_t>(got), std::min(quota, lengths[v]));
    }
  }
}

TEST(SampleFrames, GlobalCapIsRoundRobin) {
  const auto m = parse_loose(json::array({video_json("a", "fake", "train", 10), video_json("b", "real", "train", 10)}));
  FramePolicy policy;
  policy.max_frames = 5;
  const auto s = sample_frames(m, Split::kTrain, policy);
  ASSERT_EQ(s.frames.size(), 5u);
  const auto from_a = std::count_if(s.frames.begin(), s.frames.end(), [](const FrameRef& f) { return f.video_id == "a"; });
  EXPECT_EQ(from_a, 3);
  // Still grouped by video in manifest order, prefix per video.
  EXPECT_EQ(s.frames[2].video_id, "a");
  EXPECT_EQ(s.frames[2].frame_index, 2u);
  EXPECT_EQ(s.frames[3].video_id, "b");
}

TEST(LoadFrames, DecodesWithLandmarksAndRejectsTinyFrames) {
  TempDir dir("loadframes");
  const auto path = deepfuse::testing::write_dataset(dir.path(), {{"a", "Deepfakes", Label::kFake, Split::kTrain, 4}});
  const auto sample = sample_frames(load_manifest(path), Split::kTrain);
  const auto frames = load_frames(sample.frames);
  ASSERT_EQ(frames.size(), 4u);
  EXPECT_EQ(frames[1].pixels.width, 40u);
  EXPECT_TRUE(frames[3].landmarks.has_value());
  EXPECT_EQ(frames[2].label, Label::kFake);

  Rng rng(1);
  write_ppm(dir / "tiny.ppm", deepfuse::testing::noise_image(16, 40, rng));
  FrameRef tiny{"t", "custom", Label::kReal, Split::kTrain, 0, dir / "tiny.ppm", std::nullopt};
  EXPECT_THROW(load_frame(tiny), DataError);
}

TEST(LoadFrames, ParallelDecodeMatchesSerial) {
  TempDir dir("parallel");
  const auto path = deepfuse::testing::write_dataset(dir.path(), {{"a", "Deepfakes", Label::kFake, Split::kTrain, 9}});
  const auto refs = sample_frames(load_manifest(path), Split::kTrain).frames;
  ::setenv("DEEPFUSE_WORKERS", "1", 1);
  const auto serial = load_frames(refs);
  ::setenv("DEEPFUSE_WORKERS", "3", 1);
  EXPECT_EQ(worker_count(), 3u);
  const auto parallel = load_frames(refs);
  ::setenv("DEEPFUSE_WORKERS", "zero", 1);
  EXPECT_THROW(worker_count(), ConfigError);
  ::unsetenv("DEEPFUSE_WORKERS");
  ASSERT_EQ(serial.size(), parallel.size());
  for (std::size_t i = 0; i < serial.size(); ++i) EXPECT_EQ(serial[i].pixels.pixels, parallel[i].pixels.pixels);
}

TEST(Batches, SizesAndOrder) {
  const auto eval = make_batches(10, 4, 0, BatchMode::kEval);
  ASSERT_EQ(eval.size(), 3u);
  EXPECT_EQ(eval[0].size(), 4u);
  EXPECT_EQ(eval[1].size(), 4u);
  EXPECT_EQ(eval[2].size(), 2u);
  EXPECT_EQ(eval[2][1], 9u);
  EXPECT_THROW(make_batches(10, 0, 0, BatchMode::kTrain), ConfigError);
  EXPECT_TRUE(make_batches(0, 3, 0, BatchMode::kTrain).empty());
}

TEST(Batches, ShuffleIsSeededPermutation) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto a = make_batches(37, 5, seed, BatchMode::kTrain);
    EXPECT_EQ(a, make_batches(37, 5, seed, BatchMode::kTrain));
    std::vector<std::size_t> flat;
    for (const auto& b : a) flat.insert(flat.end(), b.begin(), b.end());
    std::sort(flat.begin(), flat.end());
    for (std::size_t i = 0; i < flat.size(); ++i) EXPECT_EQ(flat[i], i);
  }
  EXPECT_NE(make_batches(37, 5, 1, BatchMode::kTrain), make_batches(37, 5, 2, BatchMode::kTrain));
}

TEST(Batches, IteratorAppliesPipelineOnlyInTrainMode) {
  const auto frames = deepfuse::testing::separable_corpus(6, 48, 2);
  augment::AugmentConfig cfg;
  cfg.out_height = cfg.out_width = 32;
  BatchIterator<float> train(frames, 4, 77, BatchMode::kTrain, augment::CutoutMode::kRandomCutout, cfg);
  BatchIterator<float> eval(frames, 4, 77, BatchMode::kEval, augment::CutoutMode::kRandomCutout, cfg);
  EXPECT_EQ(train.batch_count(), 2u);
  Batch<float> b;
  std::size_t seen = 0;
  while (eval.next(b)) {
    for (std::size_t i = 0; i < b.indices.size(); ++i) {
      EXPECT_EQ(b.plans[i].mode, augment::CutoutMode::kNone);
      EXPECT_EQ(b.inputs[i].shape(), (Shape{3, 32, 32}));
      EXPECT_EQ(b.targets[i], b.indices[i] % 2 == 0 ? 1.0f : 0.0f);
      EXPECT_EQ(b.indices[i], seen++);
    }
  }
  EXPECT_EQ(seen, 6u);
  BatchIterator<float> again(frames, 4, 77, BatchMode::kTrain, augment::CutoutMode::kRandomCutout, cfg);
  Batch<float> x, y;
  while (train.next(x)) {
    ASSERT_TRUE(again.next(y));
    EXPECT_EQ(x.indices, y.indices);
    for (std::size_t i = 0; i < x.inputs.size(); ++i) EXPECT_TRUE(std::ranges::equal(x.inputs[i].data(), y.inputs[i].data()));
  }
}
