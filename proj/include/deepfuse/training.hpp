#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "deepfuse/augment.hpp"
#include "deepfuse/frame.hpp"
#include "deepfuse/model.hpp"

namespace deepfuse::training {

struct TrainConfig {
  double lr = 3e-3;
  double momentum = 0.9;  // tested range 0.6 .. 0.9, held constant
  std::size_t batch_size = 16;
  std::size_t max_epochs = 30;
  std::size_t patience = 3;  // consecutive val-loss increases before stopping
  double train_acc_stop = 0.995;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults.
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;

  nlohmann::json to_json() const;
  static EpochMetrics from_json(const nlohmann::json& j);
  bool operator==(const EpochMetrics&) const = default;
};

enum class StopReason { kNone, kValLossRising, kTrainAccuracy, kMaxEpochs };

std::string_view stop_reason_name(StopReason reason);
StopReason parse_stop_reason(std::string_view text);

struct StopDecision {
  bool stop = false;
  StopReason reason = StopReason::kNone;
};

/// Stops when the last `patience` epoch-over-epoch val-loss deltas are all
/// strictly positive, or when train_acc reaches the configured threshold.
/// The val-loss rule is checked first.
StopDecision early_stop_check(std::span<const double> val_losses, double train_acc, const TrainConfig& config);

/// Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7].
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& p, const std::vector<T>& targets);

/// v <- momentum * v + g; w <- w - lr * v.
template <typename T>
void sgd_momentum_step(std::span<T> weights, std::span<const T> grads, std::span<T> velocity, T lr, T momentum);

template <typename T>
struct TrainState {
  std::size_t epoch = 0;              // completed epochs
  std::vector<Tensor<T>> velocities;  // one per trainable parameter, in parameter order
  std::vector<EpochMetrics> history;
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  StopReason stop_reason = StopReason::kNone;
  std::uint64_t seed = 0;  // epoch e shuffles and augments with mix_seed(seed, e)

  static TrainState fresh(const ParameterSet<T>& params, std::uint64_t seed);
};

/// Applies one momentum step to every trainable parameter from its gradient buffer.
template <typename T>
void apply_sgd(ParameterSet<T>& params, TrainState<T>& state, const TrainConfig& config);

template <typename T>
struct FrameScores {
  std::vector<double> probabilities;
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Inference pass (no augmentation, running batch-norm statistics, no tape).
/// Never mutates the model.
template <typename T>
FrameScores<T> score_frames(HybridModel<T>& model, const std::vector<FaceFrame>& frames,
                            const augment::AugmentConfig& preprocess);

template <typename T>
struct FitOptions {
  augment::CutoutMode mode = augment::CutoutMode::kNone;
  augment::AugmentConfig augment;
  /// Written whenever val loss improves.
  std::optional<std::filesystem::path> best_checkpoint;
  /// Called after every epoch.
  std::function<void(const EpochMetrics&, const TrainState<T>&)> on_epoch;
};

/**
 * End-to-end training. Each epoch shuffles and augments with a seed derived
 * from the state, runs each batch as one stacked forward (batch-norm
 * statistics over the batch, mean BCE), steps SGD, then scores the
 * validation frames with mode none.
 * On return the model holds the parameters of the best val-loss epoch.
 * Pass a restored state to resume.
 */
template <typename T>
TrainState<T> fit(HybridModel<T>& model, const std::vector<FaceFrame>& train, const std::vector<FaceFrame>& val,
                  const TrainConfig& config, const FitOptions<T>& options = {},
                  std::optional<TrainState<T>> resume = std::nullopt);

// Checkpoint file layout (all integers little-endian):
//   8 bytes   magic "DFUSECK\0"
//   8 bytes   header length N
//   N bytes   JSON header: format_version, dtype, config, config_hash,
//             tensors [{name, shape, trainable, offset, nbytes}], payload_bytes,
//             payload_fnv1a, train_state
//   payload   raw IEEE-754 tensor data, little-endian, in manifest order
inline constexpr int kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const HybridModel<T>& model,
                     const TrainState<T>* state = nullptr);

/// Loads into an existing model. Refuses a different architecture or dtype;
/// on any error neither the model nor the state is modified.
template <typename T>
void load_checkpoint(const std::filesystem::path& path, HybridModel<T>& model, TrainState<T>* state = nullptr);

/// Parsed header only, for building the model before loading.
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);
HybridModelConfig checkpoint_config(const std::filesystem::path& path);

}  // namespace deepfuse::training
