#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "deepfuse/ops.hpp"
#include "deepfuse/parameters.hpp"
#include "deepfuse/random.hpp"

namespace deepfuse::backbones {

enum class Family { kXception, kEfficientNet };
enum class ScalePreset { kToy, kSmall, kPaper };

Family parse_family(std::string_view text);
std::string_view family_name(Family family);
ScalePreset parse_scale(std::string_view text);
std::string_view scale_name(ScalePreset scale);

struct StageConfig {
  std::size_t width = 0;
  std::size_t blocks = 1;
  std::size_t stride = 1;   // applied by the first block of the stage
  std::size_t expand = 1;   // MBConv expansion ratio (efficientnet only)
  std::size_t kernel = 3;   // depthwise kernel extent, odd

  bool operator==(const StageConfig&) const = default;
};

struct BackboneConfig {
  Family family = Family::kXception;
  std::size_t in_channels = 3;
  std::size_t stem_width = 8;
  std::size_t stem_stride = 2;
  std::vector<StageConfig> stages;
  std::size_t embed_dim = 768;
  Activation activation = Activation::kRelu;
  double se_ratio = 0.25;

  static BackboneConfig preset(Family family, ScalePreset scale, std::size_t embed_dim);

  std::size_t cumulative_stride() const;
  /// Final feature-grid extents for an input of the given size (pad = kernel / 2 everywhere).
  std::pair<std::size_t, std::size_t> grid(std::size_t height, std::size_t width) const;
  std::size_t out_channels() const { return stages.empty() ? stem_width : stages.back().width; }

  /// Throws ConfigError unless the stride divides `input_size` and the grid is non-empty.
  void validate(std::size_t input_size = 224) const;

  nlohmann::json to_json() const;
  static BackboneConfig from_json(const nlohmann::json& j);

  bool operator==(const BackboneConfig&) const = default;
};

template <typename T>
struct ConvBn {
  Tensor<T> weight;
  Tensor<T> gamma;
  Tensor<T> beta;
  BatchNormState<T> bn;
};

/// depthwise -> pointwise -> batch norm -> activation (+ identity residual).
template <typename T>
struct SeparableBlock {
  Tensor<T> depthwise;   // [C_in, k, k]
  Tensor<T> pointwise;   // [C_out, C_in, 1, 1]
  Tensor<T> gamma;
  Tensor<T> beta;
  BatchNormState<T> bn;
  std::size_t stride = 1;
  bool residual = false;
};

/// Inverted residual: expand 1x1 -> depthwise -> squeeze-excite -> project 1x1.
template <typename T>
struct MBConvBlock {
  ConvBn<T> expand;      // undefined weight when the expansion ratio is 1
  Tensor<T> depthwise;   // [C_exp, k, k]
  Tensor<T> dw_gamma;
  Tensor<T> dw_beta;
  BatchNormState<T> dw_bn;
  Tensor<T> se_reduce_w;  // [C_exp, R]
  Tensor<T> se_reduce_b;  // [R]
  Tensor<T> se_expand_w;  // [R, C_exp]
  Tensor<T> se_expand_b;  // [C_exp]
  ConvBn<T> project;
  std::size_t stride = 1;
  bool residual = false;
};

template <typename T>
struct BackboneParams {
  ConvBn<T> stem;
  std::vector<SeparableBlock<T>> separable;
  std::vector<MBConvBlock<T>> mbconv;
  Tensor<T> projection;  // [D, C, 1, 1]
};

template <typename T>
struct TokenSequence {
  Tensor<T> tokens;  // [L, D]
  std::string source;
};

/// Fan-in scaled normal for convolutions, gamma = 1, beta = 0, SE biases 0.
template <typename T>
BackboneParams<T> init_backbone(const BackboneConfig& config, Rng& rng);

template <typename T>
void register_backbone(ParameterSet<T>& set, BackboneParams<T>& params, const std::string& prefix);

template <typename T>
Tensor<T> separable_block_forward(const Tensor<T>& x, SeparableBlock<T>& block, Activation act, NormMode mode);

template <typename T>
Tensor<T> mbconv_forward(const Tensor<T>& x, MBConvBlock<T>& block, Activation act, NormMode mode);

/// Strided stem then depthwise-separable stages. x is [3,H,W] or [N,3,H,W].
template <typename T>
Tensor<T> xception_forward(const Tensor<T>& x, BackboneParams<T>& params, const BackboneConfig& config, NormMode mode);

/// Stem then MBConv stages with swish.
template <typename T>
Tensor<T> efficientnet_forward(const Tensor<T>& x, BackboneParams<T>& params, const BackboneConfig& config,
                               NormMode mode);

/// Dispatches on config.family.
template <typename T>
Tensor<T> backbone_forward(const Tensor<T>& x, BackboneParams<T>& params, const BackboneConfig& config, NormMode mode);

/// 1x1 convolution C -> D followed by row-major flattening of the grid: token
/// h * W' + w holds the projected vector at grid cell (h, w).
template <typename T>
TokenSequence<T> project_to_tokens(const Tensor<T>& feature_map, const Tensor<T>& projection, std::string source = {});

}  // namespace deepfuse::backbones
