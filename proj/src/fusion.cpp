#include "deepfuse/fusion.hpp"

#include <cmath>

namespace deepfuse::fusion {

FusionConfig FusionConfig::paper() { return {768, 12, 12, 4, 325}; }

void FusionConfig::validate() const {
  if (embed_dim == 0 || n_blocks == 0 || n_heads == 0 || mlp_ratio == 0 || max_tokens == 0) {
    throw ConfigError("fusion config extents must be positive");
  }
  if (embed_dim % n_heads != 0) {
    throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by n_heads " +
                      std::to_string(n_heads));
  }
}

nlohmann::json FusionConfig::to_json() const {
  return {{"embed_dim", embed_dim},
          {"n_blocks", n_blocks},
          {"n_heads", n_heads},
          {"mlp_ratio", mlp_ratio},
          {"max_tokens", max_tokens}};
}

FusionConfig FusionConfig::from_json(const nlohmann::json& j) {
  try {
    FusionConfig c;
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.n_blocks = j.at("n_blocks").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.mlp_ratio = j.value("mlp_ratio", std::size_t{4});
    c.max_tokens = j.at("max_tokens").get<std::size_t>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("fusion config: ") + e.what());
  }
}

namespace {

constexpr double kInitSigma = 0.02;

template <typename T>
Tensor<T> trunc_normal(Shape shape, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(kInitSigma));
  return t;
}

}  // namespace

template <typename T>
FusionParams<T> init_fusion(const FusionConfig& config, Rng& rng) {
  config.validate();
  const std::size_t d = config.embed_dim, hidden = config.mlp_ratio * d;
  FusionParams<T> p;
  p.class_token = trunc_normal<T>({1, d}, rng);
  p.pos_embed = trunc_normal<T>({config.max_tokens, d}, rng);
  for (std::size_t i = 0; i < config.n_blocks; ++i) {
    EncoderBlock<T> b;
    b.ln1_gamma = Tensor<T>::full({d}, T{1});
    b.ln1_beta = Tensor<T>::zeros({d});
    b.wq = trunc_normal<T>({d, d}, rng);
    b.bq = Tensor<T>::zeros({d});
    b.wk = trunc_normal<T>({d, d}, rng);
    b.bk = Tensor<T>::zeros({d});
    b.wv = trunc_normal<T>({d, d}, rng);
    b.bv = Tensor<T>::zeros({d});
    b.wo = trunc_normal<T>({d, d}, rng);
    b.bo = Tensor<T>::zeros({d});
    b.ln2_gamma = Tensor<T>::full({d}, T{1});
    b.ln2_beta = Tensor<T>::zeros({d});
    b.w1 = trunc_normal<T>({d, hidden}, rng);
    b.b1 = Tensor<T>::zeros({hidden});
    b.w2 = trunc_normal<T>({hidden, d}, rng);
    b.b2 = Tensor<T>::zeros({d});
    p.blocks.push_back(std::move(b));
  }
  p.final_gamma = Tensor<T>::full({d}, T{1});
  p.final_beta = Tensor<T>::zeros({d});
  p.head_w = trunc_normal<T>({d, 1}, rng);
  p.head_b = Tensor<T>::zeros({1});
  return p;
}

template <typename T>
void register_fusion(ParameterSet<T>& set, FusionParams<T>& params, const std::string& prefix) {
  set.add(prefix + ".class_token", params.class_token);
  set.add(prefix + ".pos_embed", params.pos_embed);
  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    auto& b = params.blocks[i];
    const std::string p = prefix + ".block" + std::to_string(i);
    set.add(p + ".ln1.gamma", b.ln1_gamma);
    set.add(p + ".ln1.beta", b.ln1_beta);
    set.add(p + ".attn.wq", b.wq);
    set.add(p + ".attn.bq", b.bq);
    set.add(p + ".attn.wk", b.wk);
    set.add(p + ".attn.bk", b.bk);
    set.add(p + ".attn.wv", b.wv);
    set.add(p + ".attn.bv", b.bv);
    set.add(p + ".attn.wo", b.wo);
    set.add(p + ".attn.bo", b.bo);
    set.add(p + ".ln2.gamma", b.ln2_gamma);
    set.add(p + ".ln2.beta", b.ln2_beta);
    set.add(p + ".mlp.w1", b.w1);
    set.add(p + ".mlp.b1", b.b1);
    set.add(p + ".mlp.w2", b.w2);
    set.add(p + ".mlp.b2", b.b2);
  }
  set.add(prefix + ".final_ln.gamma", params.final_gamma);
  set.add(prefix + ".final_ln.beta", params.final_beta);
  set.add(prefix + ".head.weight", params.head_w);
  set.add(prefix + ".head.bias", params.head_b);
}

template <typename T>
Tensor<T> fuse_tokens(const backbones::TokenSequence<T>& a, const backbones::TokenSequence<T>& b) {
  if (a.tokens.rank() != 2 || b.tokens.rank() != 2 || a.tokens.extent(1) != b.tokens.extent(1)) {
    throw DimensionError("fuse_tokens: token widths differ " + shape_to_string(a.tokens.shape()) + " vs " +
                         shape_to_string(b.tokens.shape()));
  }
  return concat_rows(a.tokens, b.tokens);
}

template <typename T>
Tensor<T> prepend_class_and_pos(const Tensor<T>& x, const FusionParams<T>& params) {
  if (x.rank() != 2 || x.extent(1) != params.class_token.extent(1)) {
    throw DimensionError("prepend_class_and_pos: expected [L," + std::to_string(params.class_token.extent(1)) +
                         "], got " + shape_to_string(x.shape()));
  }
  const std::size_t length = x.extent(0) + 1;
  if (length > params.pos_embed.extent(0)) {
    throw DimensionError("sequence of " + std::to_string(length) + " tokens exceeds positional capacity " +
                         std::to_string(params.pos_embed.extent(0)));
  }
  return add(concat_rows(params.class_token, x), slice_rows(params.pos_embed, 0, length));
}

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& h, const EncoderBlock<T>& block, std::size_t n_heads,
                               std::vector<Tensor<T>>* weights) {
  const std::size_t d = h.extent(1);
  if (n_heads == 0 || d % n_heads != 0) {
    throw ConfigError("embed_dim " + std::to_string(d) + " is not divisible by n_heads " + std::to_string(n_heads));
  }
  const std::size_t head_dim = d / n_heads;
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(head_dim));
  Tensor<T> q = add_bias(matmul(h, block.wq), block.bq);
  Tensor<T> k = add_bias(matmul(h, block.wk), block.bk);
  Tensor<T> v = add_bias(matmul(h, block.wv), block.bv);
  std::vector<Tensor<T>> heads;
  heads.reserve(n_heads);
  for (std::size_t i = 0; i < n_heads; ++i) {
    const std::size_t off = i * head_dim;
    Tensor<T> scores = scale(matmul(slice_cols(q, off, head_dim), transpose(slice_cols(k, off, head_dim))), inv_sqrt);
    Tensor<T> attn = softmax(scores);
    if (weights != nullptr) weights->push_back(attn);
    heads.push_back(matmul(attn, slice_cols(v, off, head_dim)));
  }
  Tensor<T> merged = n_heads == 1 ? heads.front() : concat_cols(heads);
  return add_bias(matmul(merged, block.wo), block.bo);
}

template <typename T>
Tensor<T> encoder_block_forward(const Tensor<T>& x, const EncoderBlock<T>& block, const FusionConfig& config,
                                std::vector<Tensor<T>>* weights) {
  Tensor<T> y = add(x, multi_head_attention(layer_norm(x, block.ln1_gamma, block.ln1_beta), block, config.n_heads,
                                            weights));
  Tensor<T> hidden = activation(add_bias(matmul(layer_norm(y, block.ln2_gamma, block.ln2_beta), block.w1), block.b1),
                                Activation::kGelu);
  return add(y, add_bias(matmul(hidden, block.w2), block.b2));
}

template <typename T>
Tensor<T> encoder_forward(const Tensor<T>& x, const FusionParams<T>& params, const FusionConfig& config,
                          std::vector<Tensor<T>>* weights) {
  config.validate();
  if (x.rank() != 2 || x.extent(1) != config.embed_dim) {
    throw DimensionError("encoder_forward: expected [L," + std::to_string(config.embed_dim) + "], got " +
                         shape_to_string(x.shape()));
  }
  Tensor<T> y = x;
  for (const auto& block : params.blocks) y = encoder_block_forward(y, block, config, weights);
  return layer_norm(y, params.final_gamma, params.final_beta);
}

template <typename T>
Tensor<T> classify(const Tensor<T>& encoded, const FusionParams<T>& params) {
  if (encoded.rank() != 2 || encoded.extent(0) < 1) {
    throw DimensionError("classify: expected [L,D] with L >= 1, got " + shape_to_string(encoded.shape()));
  }
  Tensor<T> logit = add_bias(matmul(slice_rows(encoded, 0, 1), params.head_w), params.head_b);
  return reshape(sigmoid(logit), {1});
}

#define DEEPFUSE_INSTANTIATE_FUSION(T)                                                                           \
  template FusionParams<T> init_fusion<T>(const FusionConfig&, Rng&);                                            \
  template void register_fusion<T>(ParameterSet<T>&, FusionParams<T>&, const std::string&);                      \
  template Tensor<T> fuse_tokens<T>(const backbones::TokenSequence<T>&, const backbones::TokenSequence<T>&);      \
  template Tensor<T> prepend_class_and_pos<T>(const Tensor<T>&, const FusionParams<T>&);                         \
  template Tensor<T> multi_head_attention<T>(const Tensor<T>&, const EncoderBlock<T>&, std::size_t,              \
                                             std::vector<Tensor<T>>*);                                           \
  template Tensor<T> encoder_block_forward<T>(const Tensor<T>&, const EncoderBlock<T>&, const FusionConfig&,     \
                                              std::vector<Tensor<T>>*);                                          \
  template Tensor<T> encoder_forward<T>(const Tensor<T>&, const FusionParams<T>&, const FusionConfig&,           \
                                        std::vector<Tensor<T>>*);                                                \
  template Tensor<T> classify<T>(const Tensor<T>&, const FusionParams<T>&);

DEEPFUSE_INSTANTIATE_FUSION(float)
DEEPFUSE_INSTANTIATE_FUSION(double)

#undef DEEPFUSE_INSTANTIATE_FUSION

}  // namespace deepfuse::fusion
