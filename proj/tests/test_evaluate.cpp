#include <gtest/gtest.h>

#include <numeric>

#include "deepfuse/evaluate.hpp"
#include "support/fixtures.hpp"

using namespace deepfuse;
using namespace deepfuse::evaluate;

TEST(Aggregate, Examples) {
  EXPECT_DOUBLE_EQ(aggregate_video(std::vector<double>(16, 0.5)), 0.5);
  EXPECT_DOUBLE_EQ(aggregate_video(std::vector<double>{0.25, 0.75}), 0.5);
  EXPECT_THROW(aggregate_video(std::vector<double>{}), DataError);
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> p(16);
    for (auto& v : p) v = rng.uniform();
    const double oracle = std::accumulate(p.begin(), p.end(), 0.0) / 16.0;
    EXPECT_NEAR(aggregate_video(p), oracle, 1e-15);
  }
}

TEST(Decide, ThresholdIsInclusive) {
  EXPECT_EQ(decide(0.5), Label::kFake);
  EXPECT_EQ(decide(0.4999), Label::kReal);
  EXPECT_EQ(decide(0.7, 0.8), Label::kReal);
}

TEST(Accuracy, Examples) {
  std::vector<VideoPrediction> p{make_prediction("a", "Deepfakes", Label::kFake, {0.6}),
                                 make_prediction("b", "Pristine", Label::kReal, {0.4}),
                                 make_prediction("c", "Pristine", Label::kReal, {0.6})};
  EXPECT_NEAR(compute_accuracy(p), 2.0 / 3.0, 1e-15);
  p.pop_back();
  EXPECT_DOUBLE_EQ(compute_accuracy(p), 1.0);
}

TEST(Accuracy, MatchesCountingOracle) {
  Rng rng(9);
  std::vector<VideoPrediction> preds;
  std::size_t correct = 0;
  for (int i = 0; i < 1000; ++i) {
    const Label truth = rng.uniform() < 0.5 ? Label::kFake : Label::kReal;
    std::vector<double> probs(1 + rng.index(16));
    for (auto& v : probs) v = rng.uniform();
    double s = 0;
    for (double v : probs) s += v;
    correct += ((s / static_cast<double>(probs.size()) >= 0.5) == (truth == Label::kFake)) ? 1 : 0;
    preds.push_back(make_prediction("v" + std::to_string(i), "custom", truth, probs));
  }
  EXPECT_EQ(compute_accuracy(preds), static_cast<double>(correct) / 1000.0);
}

TEST(SubsetReport, PooledIsCountWeighted) {
  std::vector<VideoPrediction> preds;
  for (int i = 0; i < 10; ++i) preds.push_back(make_prediction("f" + std::to_string(i), "FaceSwap", Label::kFake, {i < 7 ? 0.9 : 0.1}));
  for (int i = 0; i < 30; ++i) preds.push_back(make_prediction("r" + std::to_string(i), "Pristine", Label::kReal, {i < 15 ? 0.2 : 0.8}));
  const auto report = subset_report(preds, {"Deepfakes", "FaceSwap", "Pristine"});
  ASSERT_EQ(report.rows.size(), 2u);
  EXPECT_EQ(report.rows[0].subset, "FaceSwap");
  EXPECT_DOUBLE_EQ(report.rows[0].accuracy, 0.7);
  EXPECT_DOUBLE_EQ(report.rows[1].accuracy, 0.5);
  EXPECT_EQ(report.pooled.subset, "Cumulative");
  EXPECT_DOUBLE_EQ(report.pooled.accuracy, 22.0 / 40.0);
  ASSERT_EQ(report.warnings.size(), 1u);
  EXPECT_NE(report.warnings[0].find("Deepfakes"), std::string::npos);
  EXPECT_NE(report.to_text().find("Cumulative"), std::string::npos);
  EXPECT_EQ(report.to_json()["cumulative"]["videos"], 40);
}

TEST(SubsetReport, SingleSubsetEqualsPooled) {
  std::vector<VideoPrediction> preds{make_prediction("a", "DFDC-fake", Label::kFake, {0.9}),
                                     make_prediction("b", "DFDC-fake", Label::kFake, {0.2})};
  const auto report = subset_report(preds);
  ASSERT_EQ(report.rows.size(), 1u);
  EXPECT_EQ(report.rows[0].accuracy, report.pooled.accuracy);
}

TEST(EvaluateSplit, ScoresEveryTestVideo) {
  deepfuse::testing::TempDir dir("evalsplit");
  using datapipe::Split;
  const auto path = deepfuse::testing::write_dataset(dir.path(), {{"a", "Deepfakes", Label::kFake, Split::kTest, 20},
                                                                  {"b", "Pristine", Label::kReal, Split::kTest, 3},
                                                                  {"c", "Pristine", Label::kReal, Split::kTrain, 2}});
  const auto manifest = datapipe::load_manifest(path);
  auto cfg = HybridModelConfig::preset("toy");
  cfg.input_size = 32;
  cfg.fusion.max_tokens = 9;
  HybridModel<float> model(cfg, 4);
  const auto preds = evaluate_split(model, manifest, Split::kTest);
  ASSERT_EQ(preds.size(), 2u);
  EXPECT_EQ(preds[0].frame_probs.size(), 16u);
  EXPECT_EQ(preds[1].frame_probs.size(), 3u);
  EXPECT_NEAR(preds[0].score, aggregate_video(preds[0].frame_probs), 1e-12);
  EXPECT_TRUE(missing_predictions(manifest, Split::kTest, preds).empty());
  EXPECT_EQ(missing_predictions(manifest, Split::kTest, std::span(preds).first(1)), std::vector<std::string>{"b"});
}
