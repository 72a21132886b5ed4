#include "deepfuse/model.hpp"

#include <algorithm>
#include <cstdio>

namespace deepfuse {

HybridModelConfig HybridModelConfig::preset(std::string_view name) {
  using backbones::BackboneConfig;
  using backbones::Family;
  HybridModelConfig c;
  const backbones::ScalePreset scale = backbones::parse_scale(name);
  switch (scale) {
    case backbones::ScalePreset::kToy:
      c.input_size = 64;
      c.fusion = {16, 2, 2, 4, 1 + 2 * 16};
      break;
    case backbones::ScalePreset::kSmall:
      c.fusion = {32, 2, 4, 4, 1 + 2 * 196};
      break;
    case backbones::ScalePreset::kPaper:
      c.fusion = fusion::FusionConfig::paper();
      break;
  }
  c.xception = BackboneConfig::preset(Family::kXception, scale, c.fusion.embed_dim);
  c.efficientnet = BackboneConfig::preset(Family::kEfficientNet, scale, c.fusion.embed_dim);
  return c;
}

std::size_t HybridModelConfig::xception_tokens() const {
  const auto [h, w] = xception.grid(input_size, input_size);
  return h * w;
}

std::size_t HybridModelConfig::efficientnet_tokens() const {
  const auto [h, w] = efficientnet.grid(input_size, input_size);
  return h * w;
}

void HybridModelConfig::validate() const {
  if (xception.family != backbones::Family::kXception) throw ConfigError("first backbone must be xception_style");
  if (efficientnet.family != backbones::Family::kEfficientNet) {
    throw ConfigError("second backbone must be efficientnet_style");
  }
  xception.validate(input_size);
  efficientnet.validate(input_size);
  fusion.validate();
  if (xception.embed_dim != fusion.embed_dim || efficientnet.embed_dim != fusion.embed_dim) {
    throw ConfigError("backbone embed_dim must equal the fusion embed_dim");
  }
  const std::size_t need = 1 + xception_tokens() + efficientnet_tokens();
  if (fusion.max_tokens < need) {
    throw ConfigError("positional capacity " + std::to_string(fusion.max_tokens) + " is below the " +
                      std::to_string(need) + " tokens produced at input size " + std::to_string(input_size));
  }
}

nlohmann::json HybridModelConfig::to_json() const {
  return {{"input_size", input_size},
          {"xception", xception.to_json()},
          {"efficientnet", efficientnet.to_json()},
          {"fusion", fusion.to_json()}};
}

HybridModelConfig HybridModelConfig::from_json(const nlohmann::json& j) {
  HybridModelConfig c;
  try {
    c.input_size = j.value("input_size", std::size_t{224});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  if (!j.contains("xception") || !j.contains("efficientnet") || !j.contains("fusion")) {
    throw ConfigError("model config needs xception, efficientnet and fusion sections");
  }
  c.xception = backbones::BackboneConfig::from_json(j.at("xception"));
  c.efficientnet = backbones::BackboneConfig::from_json(j.at("efficientnet"));
  c.fusion = fusion::FusionConfig::from_json(j.at("fusion"));
  c.validate();
  return c;
}

std::string HybridModelConfig::hash() const {
  const std::string text = to_json().dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

template <typename T>
HybridModel<T>::HybridModel(HybridModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  xception_ = backbones::init_backbone<T>(config_.xception, rng);
  efficientnet_ = backbones::init_backbone<T>(config_.efficientnet, rng);
  fusion_ = fusion::init_fusion<T>(config_.fusion, rng);
  backbones::register_backbone(params_, xception_, "xception");
  backbones::register_backbone(params_, efficientnet_, "efficientnet");
  fusion::register_fusion(params_, fusion_, "fusion");
}

template <typename T>
Tensor<T> HybridModel<T>::forward(const Tensor<T>& frame, NormMode mode, ForwardTrace* trace) {
  Tensor<T> fx = backbones::xception_forward(frame, xception_, config_.xception, mode);
  Tensor<T> fe = backbones::efficientnet_forward(frame, efficientnet_, config_.efficientnet, mode);
  return head(fx, fe, trace);
}

namespace {

// Sample i of x[N,C,H,W] as [C,H,W].
template <typename T>
Tensor<T> sample(const Tensor<T>& x, std::size_t i) {
  const Shape& s = x.shape();
  return reshape(slice_rows(reshape(x, {s[0], s[1] * s[2] * s[3]}), i, 1), {s[1], s[2], s[3]});
}

}  // namespace

template <typename T>
Tensor<T> HybridModel<T>::forward_batch(const std::vector<Tensor<T>>& frames, NormMode mode) {
  if (frames.empty()) throw UsageError("forward_batch: no frames");
  const Shape shape = frames.front().shape();
  if (shape.size() != 3) throw DimensionError("forward_batch: frames must be [3,H,W], got " + shape_to_string(shape));
  const std::size_t n = frames.size(), size = frames.front().numel();
  Tensor<T> stacked({n, shape[0], shape[1], shape[2]});
  for (std::size_t i = 0; i < n; ++i) {
    if (frames[i].shape() != shape) {
      throw DimensionError("forward_batch: frame " + std::to_string(i) + " is " + shape_to_string(frames[i].shape()) +
                           ", expected " + shape_to_string(shape));
    }
    std::copy_n(frames[i].ptr(), size, stacked.ptr() + i * size);
  }
  Tensor<T> fx = backbones::xception_forward(stacked, xception_, config_.xception, mode);
  Tensor<T> fe = backbones::efficientnet_forward(stacked, efficientnet_, config_.efficientnet, mode);
  Tensor<T> probs;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor<T> p = reshape(head(sample(fx, i), sample(fe, i), nullptr), {1, 1});
    probs = i == 0 ? p : concat_rows(probs, p);
  }
  return reshape(probs, {n});
}

template <typename T>
Tensor<T> HybridModel<T>::head(const Tensor<T>& fx, const Tensor<T>& fe, ForwardTrace* trace) {
  auto tx = backbones::project_to_tokens(fx, xception_.projection, "xception");
  auto te = backbones::project_to_tokens(fe, efficientnet_.projection, "efficientnet");
  Tensor<T> fused = fusion::fuse_tokens(tx, te);
  Tensor<T> seq = fusion::prepend_class_and_pos(fused, fusion_);
  Tensor<T> encoded = fusion::encoder_forward(seq, fusion_, config_.fusion);
  Tensor<T> prob = fusion::classify(encoded, fusion_);
  if (trace != nullptr) {
    *trace = {fx.shape(),    fe.shape(),  tx.tokens.shape(), te.tokens.shape(),
              fused.shape(), seq.shape(), encoded.shape(),   prob.shape()};
  }
  return prob;
}

template class HybridModel<float>;
template class HybridModel<double>;

}  // namespace deepfuse
