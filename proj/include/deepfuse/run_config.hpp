#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "deepfuse/augment.hpp"
#include "deepfuse/datapipe.hpp"
#include "deepfuse/model.hpp"
#include "deepfuse/training.hpp"

namespace deepfuse {

enum class DType { kFloat32, kFloat64 };

DType parse_dtype(std::string_view text);
std::string_view dtype_name(DType dtype);

/**
 * Fully resolved settings of one training run.
 *
 * File layout (every section and key optional):
 *
 *   {"seed": 0, "dtype": "float32", "manifest": "data/manifest.json", "out": "runs/a",
 *    "model":   {"preset": "toy"}            // or a full architecture object
 *    "train":   {"lr": 0.003, "momentum": 0.9, "batch_size": 16, "max_epochs": 30, ...},
 *    "augment": {"mode": "random_cutout", "p_cutout": 0.5, ...},
 *    "frames":  {"fake_quota": 50, "real_quota": 150, "test_quota": 16, "max_frames": null}}
 *
 * Precedence: built-in defaults < config file < command-line flags. Unknown
 * keys are rejected. Relative manifest/out paths are taken as given (relative
 * to the working directory).
 */
struct RunConfig {
  std::uint64_t seed = 0;
  DType dtype = DType::kFloat32;
  std::string manifest;
  std::string out;
  std::string preset = "toy";
  HybridModelConfig model = HybridModelConfig::preset("toy");
  training::TrainConfig train;
  augment::CutoutMode mode = augment::CutoutMode::kRandomCutout;
  augment::AugmentConfig augment;
  datapipe::FramePolicy frames;

  /// Re-derives dependent fields (train seed, augment output size) and validates.
  void resolve();

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
};

}  // namespace deepfuse
