#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "deepfuse/augment.hpp"
#include "deepfuse/datapipe.hpp"
#include "deepfuse/frame.hpp"
#include "deepfuse/model.hpp"

namespace deepfuse::evaluate {

inline constexpr double kDecisionThreshold = 0.5;

struct VideoPrediction {
  std::string video_id;
  std::string subset;
  std::vector<double> frame_probs;
  double score = 0.0;
  Label predicted = Label::kReal;
  Label truth = Label::kReal;

  bool correct() const { return predicted == truth; }
  nlohmann::json to_json() const;
};

/// Arithmetic mean of the frame probabilities.
double aggregate_video(std::span<const double> frame_probs);

/// score >= threshold is fake.
Label decide(double score, double threshold = kDecisionThreshold);

VideoPrediction make_prediction(std::string video_id, std::string subset, Label truth,
                                std::vector<double> frame_probs, double threshold = kDecisionThreshold);

/// Fraction of videos whose thresholded score matches the true label.
double compute_accuracy(std::span<const VideoPrediction> predictions, double threshold = kDecisionThreshold);

struct SubsetRow {
  std::string subset;
  std::size_t videos = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
};

struct SubsetReport {
  std::vector<SubsetRow> rows;  // table column order, then any other subsets alphabetically
  SubsetRow pooled;             // "Cumulative": all videos pooled
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
  /// Aligned plain-text table.
  std::string to_text() const;
};

/**
 * Per-subset accuracy plus the pooled accuracy (sum correct / sum videos).
 * Subsets named in `expected` that have no predictions are omitted with a
 * warning.
 */
SubsetReport subset_report(std::span<const VideoPrediction> predictions,
                           const std::vector<std::string>& expected = {});

/// Per-frame fake probabilities for one video (inference mode, no augmentation).
template <typename T>
std::vector<double> score_video(HybridModel<T>& model, const std::vector<FaceFrame>& frames);

/// Video ids in `split` with no entry in `predictions`.
std::vector<std::string> missing_predictions(const datapipe::DatasetManifest& manifest, datapipe::Split split,
                                             std::span<const VideoPrediction> predictions);

/**
 * Test protocol: first 16 frames per video, one probability per frame,
 * averaged into a video score. Videos without frames are skipped (they show
 * up in missing_predictions).
 */
template <typename T>
std::vector<VideoPrediction> evaluate_split(HybridModel<T>& model, const datapipe::DatasetManifest& manifest,
                                            datapipe::Split split, const datapipe::FramePolicy& policy = {});

}  // namespace deepfuse::evaluate
