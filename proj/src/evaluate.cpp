#include "deepfuse/evaluate.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

namespace deepfuse::evaluate {

using nlohmann::json;

json VideoPrediction::to_json() const {
  return {{"video_id", video_id},
          {"subset", subset},
          {"frames", frame_probs.size()},
          {"frame_probs", frame_probs},
          {"score", score},
          {"predicted", std::string(label_name(predicted))},
          {"label", std::string(label_name(truth))},
          {"correct", correct()}};
}

double aggregate_video(std::span<const double> frame_probs) {
  if (frame_probs.empty()) throw DataError("aggregate_video: no frame probabilities");
  double total = 0.0;
  for (double p : frame_probs) total += p;
  return total / static_cast<double>(frame_probs.size());
}

Label decide(double score, double threshold) { return score >= threshold ? Label::kFake : Label::kReal; }

VideoPrediction make_prediction(std::string video_id, std::string subset, Label truth,
                                std::vector<double> frame_probs, double threshold) {
  VideoPrediction p;
  p.video_id = std::move(video_id);
  p.subset = std::move(subset);
  p.score = aggregate_video(frame_probs);
  p.frame_probs = std::move(frame_probs);
  p.predicted = decide(p.score, threshold);
  p.truth = truth;
  return p;
}

double compute_accuracy(std::span<const VideoPrediction> predictions, double threshold) {
  if (predictions.empty()) throw DataError("compute_accuracy: no predictions");
  std::size_t correct = 0;
  for (const auto& p : predictions) correct += decide(p.score, threshold) == p.truth ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

namespace {

SubsetRow finish(SubsetRow row) {
  row.accuracy = row.videos == 0 ? 0.0 : static_cast<double>(row.correct) / static_cast<double>(row.videos);
  return row;
}

}  // namespace

SubsetReport subset_report(std::span<const VideoPrediction> predictions, const std::vector<std::string>& expected) {
  SubsetReport report;
  std::map<std::string, SubsetRow> groups;
  report.pooled.subset = "Cumulative";
  for (const auto& p : predictions) {
    SubsetRow& row = groups[p.subset];
    row.subset = p.subset;
    ++row.videos;
    ++report.pooled.videos;
    if (p.correct()) {
      ++row.correct;
      ++report.pooled.correct;
    }
  }
  report.pooled = finish(report.pooled);
  for (const auto& name : expected) {
    if (!groups.contains(name)) report.warnings.push_back("subset '" + name + "' has no predictions; omitted");
  }
  for (const auto& name : datapipe::known_subsets()) {
    if (auto it = groups.find(name); it != groups.end()) {
      report.rows.push_back(finish(it->second));
      groups.erase(it);
    }
  }
  for (auto& [name, row] : groups) report.rows.push_back(finish(row));
  return report;
}

json SubsetReport::to_json() const {
  auto row_json = [](const SubsetRow& r) {
    return json{{"subset", r.subset}, {"videos", r.videos}, {"correct", r.correct}, {"accuracy", r.accuracy}};
  };
  json j;
  j["subsets"] = json::array();
  for (const auto& r : rows) j["subsets"].push_back(row_json(r));
  j["cumulative"] = row_json(pooled);
  j["warnings"] = warnings;
  return j;
}

std::string SubsetReport::to_text() const {
  std::size_t width = pooled.subset.size();
  for (const auto& r : rows) width = std::max(width, r.subset.size());
  std::ostringstream out;
  auto line = [&](const SubsetRow& r) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "  %6zu  %6zu  %7.2f%%\n", r.videos, r.correct, 100.0 * r.accuracy);
    out << r.subset << std::string(width - r.subset.size(), ' ') << buf;
  };
  out << "subset" << std::string(width - 6, ' ') << "  videos  correct  accuracy\n";
  for (const auto& r : rows) line(r);
  line(pooled);
  for (const auto& w : warnings) out << "warning: " << w << '\n';
  return out.str();
}

template <typename T>
std::vector<double> score_video(HybridModel<T>& model, const std::vector<FaceFrame>& frames) {
  augment::AugmentConfig pre;
  pre.out_height = pre.out_width = model.config().input_size;
  std::vector<double> probs;
  probs.reserve(frames.size());
  for (const auto& f : frames) {
    auto input = augment::apply_pipeline<T>(f, augment::CutoutMode::kNone, 0, pre);
    probs.push_back(static_cast<double>(model.forward(input.tensor, NormMode::kInfer).item()));
  }
  return probs;
}

std::vector<std::string> missing_predictions(const datapipe::DatasetManifest& manifest, datapipe::Split split,
                                             std::span<const VideoPrediction> predictions) {
  std::set<std::string> have;
  for (const auto& p : predictions) have.insert(p.video_id);
  std::vector<std::string> missing;
  for (const auto* v : manifest.in_split(split)) {
    if (!have.contains(v->video_id)) missing.push_back(v->video_id);
  }
  return missing;
}

template <typename T>
std::vector<VideoPrediction> evaluate_split(HybridModel<T>& model, const datapipe::DatasetManifest& manifest,
                                            datapipe::Split split, const datapipe::FramePolicy& policy) {
  const auto sample = datapipe::sample_frames(manifest, split, policy);
  std::vector<VideoPrediction> out;
  std::size_t start = 0;
  while (start < sample.frames.size()) {
    std::size_t stop = start;
    while (stop < sample.frames.size() && sample.frames[stop].video_id == sample.frames[start].video_id) ++stop;
    std::vector<datapipe::FrameRef> refs(sample.frames.begin() + static_cast<std::ptrdiff_t>(start),
                                         sample.frames.begin() + static_cast<std::ptrdiff_t>(stop));
    const auto frames = datapipe::load_frames(refs);
    const auto& first = sample.frames[start];
    out.push_back(make_prediction(first.video_id, first.subset, first.label, score_video(model, frames)));
    start = stop;
  }
  return out;
}

template std::vector<double> score_video(HybridModel<float>&, const std::vector<FaceFrame>&);
template std::vector<double> score_video(HybridModel<double>&, const std::vector<FaceFrame>&);
template std::vector<VideoPrediction> evaluate_split(HybridModel<float>&, const datapipe::DatasetManifest&,
                                                     datapipe::Split, const datapipe::FramePolicy&);
template std::vector<VideoPrediction> evaluate_split(HybridModel<double>&, const datapipe::DatasetManifest&,
                                                     datapipe::Split, const datapipe::FramePolicy&);

}  // namespace deepfuse::evaluate
