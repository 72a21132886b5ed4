#include "deepfuse/backbones.hpp"

#include <cmath>

namespace deepfuse::backbones {

Family parse_family(std::string_view text) {
  if (text == "xception_style") return Family::kXception;
  if (text == "efficientnet_style") return Family::kEfficientNet;
  throw ConfigError("backbone family must be xception_style or efficientnet_style, got '" + std::string(text) + "'");
}

std::string_view family_name(Family family) {
  return family == Family::kXception ? "xception_style" : "efficientnet_style";
}

ScalePreset parse_scale(std::string_view text) {
  if (text == "toy") return ScalePreset::kToy;
  if (text == "small") return ScalePreset::kSmall;
  if (text == "paper") return ScalePreset::kPaper;
  throw ConfigError("scale preset must be toy, small or paper, got '" + std::string(text) + "'");
}

std::string_view scale_name(ScalePreset scale) {
  switch (scale) {
    case ScalePreset::kToy:
      return "toy";
    case ScalePreset::kSmall:
      return "small";
    case ScalePreset::kPaper:
      return "paper";
  }
  return "?";
}

BackboneConfig BackboneConfig::preset(Family family, ScalePreset scale, std::size_t embed_dim) {
  BackboneConfig c;
  c.family = family;
  c.embed_dim = embed_dim;
  c.activation = family == Family::kXception ? Activation::kRelu : Activation::kSwish;
  const bool xc = family == Family::kXception;
  switch (scale) {
    case ScalePreset::kToy:
      c.stem_width = 8;
      c.stages = xc ? std::vector<StageConfig>{{16, 1, 2, 1, 3}, {24, 1, 2, 1, 3}, {32, 2, 2, 1, 3}}
                    : std::vector<StageConfig>{{16, 1, 2, 1, 3}, {24, 1, 2, 2, 3}, {32, 2, 2, 2, 3}};
      break;
    case ScalePreset::kSmall:
      c.stem_width = 16;
      c.stages = xc ? std::vector<StageConfig>{{32, 2, 2, 1, 3}, {48, 2, 2, 1, 3}, {64, 2, 2, 1, 3}}
                    : std::vector<StageConfig>{{24, 2, 2, 1, 3}, {40, 2, 2, 4, 5}, {64, 2, 2, 4, 3}};
      break;
    case ScalePreset::kPaper:
      if (xc) {
        // Entry flow 128/256/728 at stride 2, middle flow 8 x 728, exit 1024 -> 2048.
        c.stem_width = 64;
        c.stages = {{128, 2, 2, 1, 3}, {256, 2, 2, 1, 3}, {728, 2, 2, 1, 3},
                    {728, 8, 1, 1, 3}, {1024, 2, 2, 1, 3}, {2048, 1, 1, 1, 3}};
      } else {
        // EfficientNet-B4 stage widths, depths, strides, expansion ratios and kernels.
        c.stem_width = 48;
        c.stages = {{24, 2, 1, 1, 3},  {32, 4, 2, 6, 3},  {56, 4, 2, 6, 5},  {112, 6, 2, 6, 3},
                    {160, 6, 1, 6, 5}, {272, 8, 2, 6, 5}, {448, 2, 1, 6, 3}};
      }
      break;
  }
  return c;
}

std::size_t BackboneConfig::cumulative_stride() const {
  std::size_t s = stem_stride;
  for (const auto& st : stages) s *= st.stride;
  return s;
}

std::pair<std::size_t, std::size_t> BackboneConfig::grid(std::size_t height, std::size_t width) const {
  std::size_t h = conv_output_extent(height, 3, stem_stride, 1);
  std::size_t w = conv_output_extent(width, 3, stem_stride, 1);
  for (const auto& st : stages) {
    h = conv_output_extent(h, st.kernel, st.stride, st.kernel / 2);
    w = conv_output_extent(w, st.kernel, st.stride, st.kernel / 2);
  }
  return {h, w};
}

void BackboneConfig::validate(std::size_t input_size) const {
  if (in_channels == 0 || stem_width == 0 || stem_stride == 0) throw ConfigError("backbone stem must be non-empty");
  if (embed_dim == 0) throw ConfigError("backbone embed_dim must be positive");
  if (stages.empty()) throw ConfigError("backbone needs at least one stage");
  for (const auto& st : stages) {
    if (st.width == 0 || st.blocks == 0 || st.stride == 0 || st.expand == 0) {
      throw ConfigError("backbone stage width, blocks, stride and expand must be positive");
    }
    if (st.kernel % 2 == 0) throw ConfigError("depthwise kernel extent must be odd");
  }
  if (!(se_ratio > 0.0 && se_ratio <= 1.0)) throw ConfigError("se_ratio must lie in (0, 1]");
  const std::size_t s = cumulative_stride();
  if (input_size % s != 0) {
    throw ConfigError("cumulative stride " + std::to_string(s) + " does not divide input size " +
                      std::to_string(input_size));
  }
  if (input_size / s < 1) throw ConfigError("feature grid would be empty");
}

nlohmann::json BackboneConfig::to_json() const {
  nlohmann::json stages_json = nlohmann::json::array();
  for (const auto& st : stages) {
    stages_json.push_back(
        {{"width", st.width}, {"blocks", st.blocks}, {"stride", st.stride}, {"expand", st.expand}, {"kernel", st.kernel}});
  }
  return {{"family", std::string(family_name(family))},
          {"in_channels", in_channels},
          {"stem_width", stem_width},
          {"stem_stride", stem_stride},
          {"stages", stages_json},
          {"embed_dim", embed_dim},
          {"activation", std::string(activation_name(activation))},
          {"se_ratio", se_ratio}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
  try {
    BackboneConfig c;
    c.family = parse_family(j.at("family").get<std::string>());
    c.in_channels = j.value("in_channels", std::size_t{3});
    c.stem_width = j.at("stem_width").get<std::size_t>();
    c.stem_stride = j.value("stem_stride", std::size_t{2});
    for (const auto& s : j.at("stages")) {
      c.stages.push_back({s.at("width").get<std::size_t>(), s.value("blocks", std::size_t{1}),
                          s.value("stride", std::size_t{1}), s.value("expand", std::size_t{1}),
                          s.value("kernel", std::size_t{3})});
    }
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.activation = parse_activation(j.value("activation", std::string("relu")));
    c.se_ratio = j.value("se_ratio", 0.25);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("backbone config: ") + e.what());
  }
}

namespace {

template <typename T>
Tensor<T> fan_in_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double sigma = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(rng.normal() * sigma);
  return t;
}

template <typename T>
ConvBn<T> make_conv_bn(std::size_t out, std::size_t in, std::size_t k, Rng& rng) {
  return {fan_in_normal<T>({out, in, k, k}, in * k * k, rng), Tensor<T>::full({out}, T{1}), Tensor<T>::zeros({out}),
          BatchNormState<T>::fresh(out)};
}

template <typename T>
void register_conv_bn(ParameterSet<T>& set, ConvBn<T>& c, const std::string& prefix) {
  set.add(prefix + ".weight", c.weight);
  set.add(prefix + ".bn.gamma", c.gamma);
  set.add(prefix + ".bn.beta", c.beta);
  set.add(prefix + ".bn.running_mean", c.bn.running_mean, false);
  set.add(prefix + ".bn.running_var", c.bn.running_var, false);
}

template <typename T>
Tensor<T> conv_bn(const Tensor<T>& x, ConvBn<T>& c, std::size_t stride, NormMode mode) {
  const std::size_t k = c.weight.extent(2);
  return batch_norm(conv2d(x, c.weight, stride, k / 2), c.gamma, c.beta, c.bn, mode);
}

}  // namespace

template <typename T>
BackboneParams<T> init_backbone(const BackboneConfig& config, Rng& rng) {
  BackboneParams<T> p;
  p.stem = make_conv_bn<T>(config.stem_width, config.in_channels, 3, rng);
  std::size_t in = config.stem_width;
  for (const auto& st : config.stages) {
    for (std::size_t b = 0; b < st.blocks; ++b) {
      const std::size_t stride = b == 0 ? st.stride : 1;
      const bool residual = stride == 1 && in == st.width;
      if (config.family == Family::kXception) {
        SeparableBlock<T> blk;
        blk.depthwise = fan_in_normal<T>({in, st.kernel, st.kernel}, st.kernel * st.kernel, rng);
        blk.pointwise = fan_in_normal<T>({st.width, in, 1, 1}, in, rng);
        blk.gamma = Tensor<T>::full({st.width}, T{1});
        blk.beta = Tensor<T>::zeros({st.width});
        blk.bn = BatchNormState<T>::fresh(st.width);
        blk.stride = stride;
        blk.residual = residual;
        p.separable.push_back(std::move(blk));
      } else {
        MBConvBlock<T> blk;
        const std::size_t exp = in * st.expand;
        if (st.expand != 1) blk.expand = make_conv_bn<T>(exp, in, 1, rng);
        blk.depthwise = fan_in_normal<T>({exp, st.kernel, st.kernel}, st.kernel * st.kernel, rng);
        blk.dw_gamma = Tensor<T>::full({exp}, T{1});
        blk.dw_beta = Tensor<T>::zeros({exp});
        blk.dw_bn = BatchNormState<T>::fresh(exp);
        const auto reduced = std::max<std::size_t>(1, static_cast<std::size_t>(static_cast<double>(in) * config.se_ratio));
        blk.se_reduce_w = fan_in_normal<T>({exp, reduced}, exp, rng);
        blk.se_reduce_b = Tensor<T>::zeros({reduced});
        blk.se_expand_w = fan_in_normal<T>({reduced, exp}, reduced, rng);
        blk.se_expand_b = Tensor<T>::zeros({exp});
        blk.project = make_conv_bn<T>(st.width, exp, 1, rng);
        blk.stride = stride;
        blk.residual = residual;
        p.mbconv.push_back(std::move(blk));
      }
      in = st.width;
    }
  }
  p.projection = fan_in_normal<T>({config.embed_dim, in, 1, 1}, in, rng);
  return p;
}

template <typename T>
void register_backbone(ParameterSet<T>& set, BackboneParams<T>& params, const std::string& prefix) {
  register_conv_bn(set, params.stem, prefix + ".stem");
  for (std::size_t i = 0; i < params.separable.size(); ++i) {
    auto& b = params.separable[i];
    const std::string p = prefix + ".block" + std::to_string(i);
    set.add(p + ".depthwise", b.depthwise);
    set.add(p + ".pointwise", b.pointwise);
    set.add(p + ".bn.gamma", b.gamma);
    set.add(p + ".bn.beta", b.beta);
    set.add(p + ".bn.running_mean", b.bn.running_mean, false);
    set.add(p + ".bn.running_var", b.bn.running_var, false);
  }
  for (std::size_t i = 0; i < params.mbconv.size(); ++i) {
    auto& b = params.mbconv[i];
    const std::string p = prefix + ".block" + std::to_string(i);
    if (b.expand.weight.defined()) register_conv_bn(set, b.expand, p + ".expand");
    set.add(p + ".depthwise", b.depthwise);
    set.add(p + ".dw_bn.gamma", b.dw_gamma);
    set.add(p + ".dw_bn.beta", b.dw_beta);
    set.add(p + ".dw_bn.running_mean", b.dw_bn.running_mean, false);
    set.add(p + ".dw_bn.running_var", b.dw_bn.running_var, false);
    set.add(p + ".se.reduce.weight", b.se_reduce_w);
    set.add(p + ".se.reduce.bias", b.se_reduce_b);
    set.add(p + ".se.expand.weight", b.se_expand_w);
    set.add(p + ".se.expand.bias", b.se_expand_b);
    register_conv_bn(set, b.project, p + ".project");
  }
  set.add(prefix + ".projection", params.projection);
}

template <typename T>
Tensor<T> separable_block_forward(const Tensor<T>& x, SeparableBlock<T>& block, Activation act, NormMode mode) {
  const std::size_t k = block.depthwise.extent(1);
  Tensor<T> y = depthwise_conv2d(x, block.depthwise, block.stride, k / 2);
  y = conv2d(y, block.pointwise, 1, 0);
  y = activation(batch_norm(y, block.gamma, block.beta, block.bn, mode), act);
  return block.residual ? add(y, x) : y;
}

template <typename T>
Tensor<T> mbconv_forward(const Tensor<T>& x, MBConvBlock<T>& block, Activation act, NormMode mode) {
  Tensor<T> y = x;
  if (block.expand.weight.defined()) y = activation(conv_bn(y, block.expand, 1, mode), act);
  const std::size_t k = block.depthwise.extent(1);
  y = depthwise_conv2d(y, block.depthwise, block.stride, k / 2);
  y = activation(batch_norm(y, block.dw_gamma, block.dw_beta, block.dw_bn, mode), act);

  const bool batched = y.rank() == 4;
  const std::size_t samples = batched ? y.extent(0) : 1, channels = y.extent(y.rank() - 3);
  Tensor<T> s = reshape(global_avg_pool(y), {samples, channels});
  s = activation(add_bias(matmul(s, block.se_reduce_w), block.se_reduce_b), act);
  s = sigmoid(add_bias(matmul(s, block.se_expand_w), block.se_expand_b));
  y = scale_channels(y, batched ? s : reshape(s, {channels}));

  y = conv_bn(y, block.project, 1, mode);
  return block.residual ? add(y, x) : y;
}

namespace {

template <typename T>
void check_input(const Tensor<T>& x, const BackboneConfig& config, Family expected, BackboneParams<T>& params) {
  if (config.family != expected) {
    throw ConfigError(std::string("backbone forward called with family ") + std::string(family_name(config.family)));
  }
  if ((x.rank() != 3 && x.rank() != 4) || x.extent(x.rank() - 3) != config.in_channels) {
    throw DimensionError("backbone input must be [" + std::to_string(config.in_channels) + ",H,W] or [N," +
                         std::to_string(config.in_channels) + ",H,W], got " + shape_to_string(x.shape()));
  }
  const std::size_t blocks = expected == Family::kXception ? params.separable.size() : params.mbconv.size();
  std::size_t want = 0;
  for (const auto& st : config.stages) want += st.blocks;
  if (blocks != want) throw ConfigError("backbone parameters do not match the configuration");
}

}  // namespace

template <typename T>
Tensor<T> xception_forward(const Tensor<T>& x, BackboneParams<T>& params, const BackboneConfig& config,
                           NormMode mode) {
  check_input(x, config, Family::kXception, params);
  Tensor<T> y = activation(conv_bn(x, params.stem, config.stem_stride, mode), config.activation);
  for (auto& block : params.separable) y = separable_block_forward(y, block, config.activation, mode);
  return y;
}

template <typename T>
Tensor<T> efficientnet_forward(const Tensor<T>& x, BackboneParams<T>& params, const BackboneConfig& config,
                               NormMode mode) {
  check_input(x, config, Family::kEfficientNet, params);
  Tensor<T> y = activation(conv_bn(x, params.stem, config.stem_stride, mode), config.activation);
  for (auto& block : params.mbconv) y = mbconv_forward(y, block, config.activation, mode);
  return y;
}

template <typename T>
Tensor<T> backbone_forward(const Tensor<T>& x, BackboneParams<T>& params, const BackboneConfig& config,
                           NormMode mode) {
  return config.family == Family::kXception ? xception_forward(x, params, config, mode)
                                            : efficientnet_forward(x, params, config, mode);
}

template <typename T>
TokenSequence<T> project_to_tokens(const Tensor<T>& feature_map, const Tensor<T>& projection, std::string source) {
  if (feature_map.rank() != 3) {
    throw DimensionError("project_to_tokens: feature map must be [C,H,W], got " + shape_to_string(feature_map.shape()));
  }
  if (projection.rank() != 4 || projection.extent(2) != 1 || projection.extent(3) != 1) {
    throw DimensionError("project_to_tokens: projection must be [D,C,1,1], got " + shape_to_string(projection.shape()));
  }
  if (projection.extent(1) != feature_map.extent(0)) {
    throw DimensionError("project_to_tokens: projection expects " + std::to_string(projection.extent(1)) +
                         " channels, feature map has " + std::to_string(feature_map.extent(0)));
  }
  const std::size_t d = projection.extent(0);
  const std::size_t cells = feature_map.extent(1) * feature_map.extent(2);
  Tensor<T> projected = conv2d(feature_map, projection, 1, 0);
  return {transpose(reshape(projected, {d, cells})), std::move(source)};
}

#define DEEPFUSE_INSTANTIATE_BACKBONES(T)                                                                         \
  template BackboneParams<T> init_backbone<T>(const BackboneConfig&, Rng&);                                       \
  template void register_backbone<T>(ParameterSet<T>&, BackboneParams<T>&, const std::string&);                  \
  template Tensor<T> separable_block_forward<T>(const Tensor<T>&, SeparableBlock<T>&, Activation, NormMode);      \
  template Tensor<T> mbconv_forward<T>(const Tensor<T>&, MBConvBlock<T>&, Activation, NormMode);                  \
  template Tensor<T> xception_forward<T>(const Tensor<T>&, BackboneParams<T>&, const BackboneConfig&, NormMode);  \
  template Tensor<T> efficientnet_forward<T>(const Tensor<T>&, BackboneParams<T>&, const BackboneConfig&,         \
                                             NormMode);                                                           \
  template Tensor<T> backbone_forward<T>(const Tensor<T>&, BackboneParams<T>&, const BackboneConfig&, NormMode);  \
  template TokenSequence<T> project_to_tokens<T>(const Tensor<T>&, const Tensor<T>&, std::string);

DEEPFUSE_INSTANTIATE_BACKBONES(float)
DEEPFUSE_INSTANTIATE_BACKBONES(double)

#undef DEEPFUSE_INSTANTIATE_BACKBONES

}  // namespace deepfuse::backbones
