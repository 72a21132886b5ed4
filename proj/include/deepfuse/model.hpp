#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

#include <json.hpp>

#include "deepfuse/backbones.hpp"
#include "deepfuse/fusion.hpp"
#include "deepfuse/parameters.hpp"

namespace deepfuse {

/// Architecture of the two-backbone early-fusion classifier.
struct HybridModelConfig {
  std::size_t input_size = 224;
  backbones::BackboneConfig xception;
  backbones::BackboneConfig efficientnet;
  fusion::FusionConfig fusion;

  /// "toy" (64x64 input), "small" or "paper" (224x224 input).
  static HybridModelConfig preset(std::string_view name);

  /// Cross-checks embed dims and positional capacity against the realized token count.
  void validate() const;

  /// Tokens contributed by each backbone at `input_size`.
  std::size_t xception_tokens() const;
  std::size_t efficientnet_tokens() const;

  nlohmann::json to_json() const;
  static HybridModelConfig from_json(const nlohmann::json& j);
  /// FNV-1a 64 over the canonical JSON serialization, as 16 hex digits.
  std::string hash() const;

  bool operator==(const HybridModelConfig&) const = default;
};

/// Tensor shapes observed during one forward pass.
struct ForwardTrace {
  Shape xception_features;
  Shape efficientnet_features;
  Shape xception_tokens;
  Shape efficientnet_tokens;
  Shape fused;
  Shape with_class;
  Shape encoded;
  Shape probability;
};

/**
 * Both backbones, the fusion encoder and the head, with every tensor
 * registered in one ParameterSet (trainable weights plus batch-norm buffers).
 * Not copyable: the set and the module structs share tensor storage.
 */
template <typename T>
class HybridModel {
 public:
  HybridModel(HybridModelConfig config, std::uint64_t seed);

  HybridModel(const HybridModel&) = delete;
  HybridModel& operator=(const HybridModel&) = delete;
  HybridModel(HybridModel&&) noexcept = default;
  HybridModel& operator=(HybridModel&&) noexcept = default;

  /// frame [3,H,W] -> fake probability as a [1] tensor.
  Tensor<T> forward(const Tensor<T>& frame, NormMode mode, ForwardTrace* trace = nullptr);

  /// Same-sized frames [3,H,W] -> probabilities [N]. The backbones see the
  /// whole stack, so train-mode batch norm uses statistics over all N frames.
  Tensor<T> forward_batch(const std::vector<Tensor<T>>& frames, NormMode mode);

  const HybridModelConfig& config() const { return config_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }

  backbones::BackboneParams<T>& xception() { return xception_; }
  backbones::BackboneParams<T>& efficientnet() { return efficientnet_; }
  fusion::FusionParams<T>& fusion() { return fusion_; }

 private:
  Tensor<T> head(const Tensor<T>& fx, const Tensor<T>& fe, ForwardTrace* trace);

  HybridModelConfig config_;
  backbones::BackboneParams<T> xception_;
  backbones::BackboneParams<T> efficientnet_;
  fusion::FusionParams<T> fusion_;
  ParameterSet<T> params_;
};

}  // namespace deepfuse
