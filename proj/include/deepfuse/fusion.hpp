#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "deepfuse/backbones.hpp"
#include "deepfuse/ops.hpp"
#include "deepfuse/parameters.hpp"
#include "deepfuse/random.hpp"

namespace deepfuse::fusion {

struct FusionConfig {
  std::size_t embed_dim = 768;
  std::size_t n_blocks = 12;
  std::size_t n_heads = 12;
  std::size_t mlp_ratio = 4;
  std::size_t max_tokens = 325;  // capacity of the positional embedding, class token included

  /// ViT-Base/16 encoder sized for 2 x 162 fused tokens plus the class token.
  static FusionConfig paper();

  /// Throws ConfigError when embed_dim is not divisible by n_heads or any extent is zero.
  void validate() const;

  nlohmann::json to_json() const;
  static FusionConfig from_json(const nlohmann::json& j);

  bool operator==(const FusionConfig&) const = default;
};

template <typename T>
struct EncoderBlock {
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> wq, bq, wk, bk, wv, bv;  // [D, D] and [D]
  Tensor<T> wo, bo;
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> w1, b1;  // [D, mlp_ratio * D]
  Tensor<T> w2, b2;  // [mlp_ratio * D, D]
};

template <typename T>
struct FusionParams {
  Tensor<T> class_token;  // [1, D]
  Tensor<T> pos_embed;    // [max_tokens, D]
  std::vector<EncoderBlock<T>> blocks;
  Tensor<T> final_gamma, final_beta;
  Tensor<T> head_w;  // [D, 1]
  Tensor<T> head_b;  // [1]
};

/// Truncated normal (sigma 0.02) for tokens, embeddings and projections; zero biases; unit layer-norm gains.
template <typename T>
FusionParams<T> init_fusion(const FusionConfig& config, Rng& rng);

template <typename T>
void register_fusion(ParameterSet<T>& set, FusionParams<T>& params, const std::string& prefix);

/// Concatenates along the token axis, a's tokens first.
template <typename T>
Tensor<T> fuse_tokens(const backbones::TokenSequence<T>& a, const backbones::TokenSequence<T>& b);

/// Row 0 = class_token + pos[0]; row i = x[i-1] + pos[i].
template <typename T>
Tensor<T> prepend_class_and_pos(const Tensor<T>& x, const FusionParams<T>& params);

/// Multi-head scaled dot-product self-attention of h[L,D] including the output
/// projection. When `weights` is non-null the per-head attention matrices
/// [L, L] are appended to it.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& h, const EncoderBlock<T>& block, std::size_t n_heads,
                               std::vector<Tensor<T>>* weights = nullptr);

/// Pre-norm block: x + MHA(LN(x)), then x + MLP(LN(x)) with gelu.
template <typename T>
Tensor<T> encoder_block_forward(const Tensor<T>& x, const EncoderBlock<T>& block, const FusionConfig& config,
                                std::vector<Tensor<T>>* weights = nullptr);

/// All blocks followed by the final layer norm; sequence length is preserved.
template <typename T>
Tensor<T> encoder_forward(const Tensor<T>& x, const FusionParams<T>& params, const FusionConfig& config,
                          std::vector<Tensor<T>>* weights = nullptr);

/// sigmoid(encoded[0] . head_w + head_b) as a [1] tensor.
template <typename T>
Tensor<T> classify(const Tensor<T>& encoded, const FusionParams<T>& params);

}  // namespace deepfuse::fusion
