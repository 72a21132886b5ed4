#pragma once

// Differentiable primitives. Every op is a pure function of its inputs (plus
// explicit state arguments) and records its backward step on the active tape.

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "deepfuse/tensor.hpp"

namespace deepfuse {

enum class Activation { kRelu, kGelu, kSwish };

/// Accepts "relu", "gelu", "swish"; anything else is a ConfigError.
Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation kind);

enum class NormMode { kTrain, kInfer };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kLayerNormEps = 1e-6;
inline constexpr double kBatchNormMomentum = 0.1;

/// Running statistics of one batch-norm layer. Not differentiable.
template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = static_cast<T>(kBatchNormMomentum);

  static BatchNormState fresh(std::size_t channels) {
    return {Tensor<T>::zeros({channels}), Tensor<T>::full({channels}, T{1}), static_cast<T>(kBatchNormMomentum)};
  }
};

// Elementwise arithmetic on identically shaped tensors.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T>
Tensor<T> sine(const Tensor<T>& x);

/// x[..., D] + bias[D], broadcast over every leading index.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

/// Reductions to a single-element tensor of shape [1].
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t count);
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t count);
template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);

/// Output extent of a strided, zero-padded window; throws DimensionError if not positive.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad);

/// x[C_in,H,W] * w[C_out,C_in,kh,kw], zero padding, no bias. A leading batch
/// axis x[N,C_in,H,W] convolves each sample with the same weights.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t pad);

/// Per-channel convolution: x[C,H,W] (or [N,C,H,W]) * w[C,kh,kw].
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t pad);

/// Normalizes x[N,C,H,W] (or x[C,H,W] as N=1) per channel. Train mode uses
/// batch statistics and updates `state`; infer mode reads `state` only.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                     NormMode mode, T eps = static_cast<T>(kBatchNormEps));

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = static_cast<T>(kLayerNormEps));

/// gelu is the tanh approximation 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

/// Softmax over the last axis with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x);

/// [C,H,W] -> [C], [N,C,H,W] -> [N,C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);
/// x[C,H,W] * s[C] per channel, or x[N,C,H,W] * s[N,C].
template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s);

/// Mean binary cross-entropy of probabilities p[N] against targets in {0,1}.
/// p is clamped to [eps, 1-eps]; the gradient is evaluated at the clamped value.
template <typename T>
Tensor<T> binary_cross_entropy(const Tensor<T>& p, const std::vector<T>& targets, T eps = static_cast<T>(1e-7));

}  // namespace deepfuse
