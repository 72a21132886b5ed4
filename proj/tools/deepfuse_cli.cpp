// deepfuse: augmentation preview, training, evaluation and single-video prediction.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "deepfuse/augment.hpp"
#include "deepfuse/datapipe.hpp"
#include "deepfuse/evaluate.hpp"
#include "deepfuse/image_io.hpp"
#include "deepfuse/model.hpp"
#include "deepfuse/run_config.hpp"
#include "deepfuse/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace deepfuse;

namespace {

enum ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kConfig = 3,
  kData = 4,
  kCheckpoint = 5,
  kTraining = 6,
  kMissingPredictions = 7,
};

class UsageFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

void write_image(const fs::path& path, const Image8& img) {
  if (path.extension() == ".png") {
    datapipe::write_png(path, img);
  } else {
    datapipe::write_ppm(path, img);
  }
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory '" + dir.string() + "': " + ec.message());
}

// ---------------------------------------------------------------------------
// augment-preview

struct PreviewArgs {
  std::string image;
  std::string landmarks;
  std::string mode = "none";
  std::uint64_t seed = 0;
  std::string out;
  std::string plan;
  std::string config;
  std::size_t size = 0;
};

int run_preview(const PreviewArgs& a) {
  augment::AugmentConfig cfg;
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    if (!in) throw ConfigError("cannot open augment config '" + a.config + "'");
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError(a.config + ": invalid JSON: " + e.what());
    }
    if (j.contains("augment")) j = j.at("augment");
    j.erase("mode");
    cfg = augment::AugmentConfig::from_json(j);
  }
  FaceFrame frame;
  frame.pixels = datapipe::decode_image(a.image);
  frame.video_id = fs::path(a.image).stem().string();
  if (!a.landmarks.empty()) frame.landmarks = datapipe::load_landmarks(a.landmarks);
  const auto mode = augment::parse_cutout_mode(a.mode);
  if (mode == augment::CutoutMode::kFaceCutout && !frame.landmarks) {
    throw UsageFailure("--mode face_cutout needs --landmarks");
  }
  cfg.out_height = a.size ? a.size : frame.pixels.height;
  cfg.out_width = a.size ? a.size : frame.pixels.width;
  cfg.validate();

  const auto result = augment::apply_pipeline<float>(frame, mode, a.seed, cfg);
  const Image8 out = to_u8(augment::denormalize(result.tensor, cfg.mean, cfg.stddev));
  write_image(a.out, out);
  fs::path plan_path = a.plan.empty() ? fs::path(a.out).replace_extension(".json") : fs::path(a.plan);
  json plan = result.plan.to_json();
  plan["input"] = a.image;
  plan["output"] = a.out;
  plan["out_height"] = cfg.out_height;
  plan["out_width"] = cfg.out_width;
  write_json(plan_path, plan);
  std::cout << plan.dump() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string manifest;
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> preset;
  std::optional<std::string> mode;
  std::optional<std::string> dtype;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<double> lr;
  std::optional<double> momentum;
  std::optional<std::size_t> max_frames;
};

RunConfig resolve_run_config(const TrainArgs& a) {
  RunConfig rc = a.config.empty() ? RunConfig{} : RunConfig::load(a.config);
  if (!a.manifest.empty()) rc.manifest = a.manifest;
  if (!a.out.empty()) rc.out = a.out;
  if (a.seed) rc.seed = *a.seed;
  if (a.preset) {
    rc.preset = *a.preset;
    rc.model = HybridModelConfig::preset(*a.preset);
  }
  if (a.mode) rc.mode = augment::parse_cutout_mode(*a.mode);
  if (a.dtype) rc.dtype = parse_dtype(*a.dtype);
  if (a.epochs) rc.train.max_epochs = *a.epochs;
  if (a.batch_size) rc.train.batch_size = *a.batch_size;
  if (a.lr) rc.train.lr = *a.lr;
  if (a.momentum) rc.train.momentum = *a.momentum;
  if (a.max_frames) rc.frames.max_frames = *a.max_frames;
  if (rc.manifest.empty()) throw UsageFailure("train needs --manifest (or \"manifest\" in the config file)");
  if (rc.out.empty()) throw UsageFailure("train needs --out (or \"out\" in the config file)");
  rc.resolve();
  return rc;
}

std::vector<FaceFrame> load_split(const datapipe::DatasetManifest& m, datapipe::Split split,
                                  const datapipe::FramePolicy& policy) {
  auto sample = datapipe::sample_frames(m, split, policy);
  for (const auto& w : sample.warnings) std::cerr << "warning: " << w << '\n';
  return datapipe::load_frames(sample.frames);
}

template <typename T>
int train_typed(const RunConfig& rc, const std::vector<FaceFrame>& train, const std::vector<FaceFrame>& val) {
  const fs::path out(rc.out);
  HybridModel<T> model(rc.model, rc.seed);
  const fs::path metrics_path = out / "metrics.jsonl";
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw DataError("cannot write '" + metrics_path.string() + "'");

  training::FitOptions<T> opts;
  opts.mode = rc.mode;
  opts.augment = rc.augment;
  opts.best_checkpoint = out / "best.ckpt";
  const auto start = std::chrono::steady_clock::now();
  opts.on_epoch = [&](const training::EpochMetrics& m, const training::TrainState<T>&) {
    metrics << m.to_json().dump() << '\n';
    metrics.flush();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cerr << "epoch " << m.epoch << "  train_loss " << m.train_loss << "  train_acc " << m.train_acc
              << "  val_loss " << m.val_loss << "  val_acc " << m.val_acc << "  (" << secs << " s)\n";
  };
  const auto state = training::fit(model, train, val, rc.train, opts);
  const json summary = {{"epochs", state.epoch},
                        {"best_epoch", state.best_epoch},
                        {"best_val_loss", state.best_val_loss},
                        {"stop_reason", std::string(training::stop_reason_name(state.stop_reason))},
                        {"checkpoint", (out / "best.ckpt").string()},
                        {"config_hash", model.config().hash()}};
  std::cout << summary.dump() << '\n';
  return kOk;
}

int run_train(const TrainArgs& a) {
  const RunConfig rc = resolve_run_config(a);
  const auto manifest = datapipe::load_manifest(rc.manifest);
  if (rc.mode == augment::CutoutMode::kFaceCutout) datapipe::require_landmarks(manifest, datapipe::Split::kTrain);
  const auto train = load_split(manifest, datapipe::Split::kTrain, rc.frames);
  const auto val = load_split(manifest, datapipe::Split::kVal, rc.frames);
  if (train.empty()) throw DataError("manifest '" + rc.manifest + "' has no training frames");
  if (val.empty()) throw DataError("manifest '" + rc.manifest + "' has no validation frames");

  ensure_dir(rc.out);
  write_json(fs::path(rc.out) / "run_config.json", rc.to_json());
  std::cerr << "train: " << train.size() << " frames, val: " << val.size() << " frames, dtype "
            << dtype_name(rc.dtype) << ", config " << rc.model.hash() << '\n';
  return rc.dtype == DType::kFloat32 ? train_typed<float>(rc, train, val) : train_typed<double>(rc, train, val);
}

// ---------------------------------------------------------------------------
// eval / predict

DType checkpoint_dtype(const fs::path& path) {
  const json h = training::read_checkpoint_header(path);
  return parse_dtype(h.value("dtype", std::string("float32")));
}

template <typename T>
HybridModel<T> load_model(const fs::path& checkpoint) {
  HybridModel<T> model(training::checkpoint_config(checkpoint), 0);
  training::load_checkpoint(checkpoint, model);
  return model;
}

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::string split = "test";
  std::string out;
};

template <typename T>
int eval_typed(const EvalArgs& a, const datapipe::DatasetManifest& manifest, datapipe::Split split) {
  HybridModel<T> model = load_model<T>(a.checkpoint);
  const auto predictions = evaluate::evaluate_split(model, manifest, split);
  std::vector<std::string> in_split;
  for (const auto* v : manifest.in_split(split)) {
    if (std::find(in_split.begin(), in_split.end(), v->subset) == in_split.end()) in_split.push_back(v->subset);
  }
  const auto report = evaluate::subset_report(predictions, in_split);
  const auto missing = evaluate::missing_predictions(manifest, split, predictions);

  json j = report.to_json();
  j["checkpoint"] = a.checkpoint;
  j["config_hash"] = model.config().hash();
  j["split"] = a.split;
  j["threshold"] = evaluate::kDecisionThreshold;
  j["missing_videos"] = missing;
  j["videos"] = json::array();
  for (const auto& p : predictions) j["videos"].push_back(p.to_json());
  ensure_dir(a.out);
  write_json(fs::path(a.out) / "report.json", j);
  std::cout << report.to_text();
  if (!missing.empty()) {
    std::cerr << "error: " << missing.size() << " video(s) in split '" << a.split
              << "' have no predictions (no frames), first: '" << missing.front() << "'\n";
    return kMissingPredictions;
  }
  return kOk;
}

int run_eval(const EvalArgs& a) {
  const DType dtype = checkpoint_dtype(a.checkpoint);
  const auto manifest = datapipe::load_manifest(a.manifest);
  const auto split = datapipe::parse_split(a.split);
  return dtype == DType::kFloat32 ? eval_typed<float>(a, manifest, split) : eval_typed<double>(a, manifest, split);
}

struct PredictArgs {
  std::string checkpoint;
  std::vector<std::string> frames;
};

template <typename T>
int predict_typed(const PredictArgs& a) {
  HybridModel<T> model = load_model<T>(a.checkpoint);
  std::vector<FaceFrame> frames;
  for (std::size_t i = 0; i < a.frames.size(); ++i) {
    FaceFrame f;
    f.pixels = datapipe::decode_image(a.frames[i]);
    f.video_id = "cli";
    f.frame_index = i;
    frames.push_back(std::move(f));
  }
  const auto probs = evaluate::score_video(model, frames);
  const double score = evaluate::aggregate_video(probs);
  const json j = {{"score", score},
                  {"label", std::string(label_name(evaluate::decide(score)))},
                  {"frames", probs.size()},
                  {"frame_probs", probs}};
  std::cout << j.dump() << '\n';
  return kOk;
}

int run_predict(const PredictArgs& a) {
  if (a.frames.size() != 16) {
    std::cerr << "note: the standard protocol averages 16 frames; got " << a.frames.size() << '\n';
  }
  return checkpoint_dtype(a.checkpoint) == DType::kFloat32 ? predict_typed<float>(a) : predict_typed<double>(a);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid early-fusion deepfake frame classifier: augmentation preview, training, evaluation"};
  app.require_subcommand(1);

  PreviewArgs preview;
  auto* p = app.add_subcommand("augment-preview", "Augment one image and write it with its plan JSON");
  p->add_option("--image", preview.image, "Input frame (P6 or PNG)")->required()->check(CLI::ExistingFile);
  p->add_option("--landmarks", preview.landmarks, "81-point landmark sidecar JSON")->check(CLI::ExistingFile);
  p->add_option("--mode", preview.mode, "none | face_cutout | random_cutout");
  p->add_option("--seed", preview.seed, "Augmentation seed");
  p->add_option("--out", preview.out, "Output image (.png writes PNG, otherwise P6)")->required();
  p->add_option("--plan", preview.plan, "Plan JSON path (default: --out with .json extension)");
  p->add_option("--config", preview.config, "JSON with augmentation parameters (or a run config)");
  p->add_option("--size", preview.size, "Output side length (default: input size)");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train end to end and write checkpoint, metrics and resolved config");
  t->add_option("--manifest", train.manifest, "Dataset manifest JSON");
  t->add_option("--config", train.config, "Run config JSON (flags override it)")->check(CLI::ExistingFile);
  t->add_option("--out", train.out, "Output directory");
  t->add_option("--seed", train.seed, "Seed for initialization, shuffling and augmentation");
  t->add_option("--preset", train.preset, "Architecture preset: toy | small | paper");
  t->add_option("--mode", train.mode, "Cut-out mode: none | face_cutout | random_cutout");
  t->add_option("--dtype", train.dtype, "float32 | float64");
  t->add_option("--epochs", train.epochs, "Maximum epochs");
  t->add_option("--batch-size", train.batch_size, "Frames per SGD step");
  t->add_option("--lr", train.lr, "Learning rate");
  t->add_option("--momentum", train.momentum, "SGD momentum");
  t->add_option("--max-frames", train.max_frames, "Cap on frames per split");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Score a split with the 16-frame protocol and write report.json");
  e->add_option("--checkpoint", eval.checkpoint, "Checkpoint file")->required();
  e->add_option("--manifest", eval.manifest, "Dataset manifest JSON")->required();
  e->add_option("--split", eval.split, "train | val | test");
  e->add_option("--out", eval.out, "Output directory")->required();

  PredictArgs predict;
  auto* pr = app.add_subcommand("predict", "Average frame probabilities of one video and print score and label");
  pr->add_option("--checkpoint", predict.checkpoint, "Checkpoint file")->required();
  pr->add_option("--frames", predict.frames, "Frame files (16 for the standard protocol)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kUsage;
  }

  try {
    if (*p) return run_preview(preview);
    if (*t) return run_train(train);
    if (*e) return run_eval(eval);
    if (*pr) return run_predict(predict);
  } catch (const UsageFailure& err) {
    std::cerr << "usage error: " << err.what() << '\n';
    return kUsage;
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << '\n';
    return kUsage;
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << '\n';
    return kConfig;
  } catch (const CheckpointError& err) {
    std::cerr << "checkpoint error: " << err.what() << '\n';
    return kCheckpoint;
  } catch (const TrainingError& err) {
    std::cerr << "training error: " << err.what() << '\n';
    return kTraining;
  } catch (const DataError& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return kData;
  } catch (const DimensionError& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return kData;
  } catch (const fs::filesystem_error& err) {
    std::cerr << "io error: " << err.what() << '\n';
    return kData;
  } catch (const std::exception& err) {
    std::cerr << "internal error: " << err.what() << '\n';
    return kInternal;
  }
  return kUsage;
}
