#include "deepfuse/run_config.hpp"

#include <fstream>
#include <initializer_list>

namespace deepfuse {

using nlohmann::json;

DType parse_dtype(std::string_view text) {
  if (text == "float32" || text == "float") return DType::kFloat32;
  if (text == "float64" || text == "double") return DType::kFloat64;
  throw ConfigError("dtype must be float32 or float64, got '" + std::string(text) + "'");
}

std::string_view dtype_name(DType dtype) { return dtype == DType::kFloat32 ? "float32" : "float64"; }

namespace {

void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename V>
void read(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key) || j.at(key).is_null()) return;
  try {
    j.at(key).get_to(out);
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace

void RunConfig::resolve() {
  train.seed = seed;
  augment.out_height = augment.out_width = model.input_size;
  model.validate();
  train.validate();
  augment.validate();
  if (frames.fake_quota == 0 || frames.real_quota == 0 || frames.test_quota == 0) {
    throw ConfigError("frames: quotas must be positive");
  }
  if (frames.max_frames && *frames.max_frames == 0) throw ConfigError("frames.max_frames must be positive");
}

json RunConfig::to_json() const {
  json model_json = model.to_json();
  model_json["preset"] = preset;
  json train_json = train.to_json();
  train_json.erase("seed");
  json augment_json = augment.to_json();
  augment_json["mode"] = std::string(augment::cutout_mode_name(mode));
  augment_json.erase("out_height");
  augment_json.erase("out_width");
  return {{"seed", seed},
          {"dtype", std::string(dtype_name(dtype))},
          {"manifest", manifest},
          {"out", out},
          {"model", std::move(model_json)},
          {"train", std::move(train_json)},
          {"augment", std::move(augment_json)},
          {"frames",
           {{"fake_quota", frames.fake_quota},
            {"real_quota", frames.real_quota},
            {"test_quota", frames.test_quota},
            {"max_frames", frames.max_frames ? json(*frames.max_frames) : json()}}}};
}

RunConfig RunConfig::from_json(const json& j) {
  reject_unknown(j, "config", {"seed", "dtype", "manifest", "out", "model", "train", "augment", "frames"});
  RunConfig c;
  read(j, "seed", c.seed, "config");
  read(j, "manifest", c.manifest, "config");
  read(j, "out", c.out, "config");
  if (j.contains("dtype")) c.dtype = parse_dtype(j.at("dtype").get<std::string>());

  if (j.contains("model")) {
    const json& m = j.at("model");
    reject_unknown(m, "model", {"preset", "input_size", "xception", "efficientnet", "fusion"});
    read(m, "preset", c.preset, "model");
    if (m.contains("xception") || m.contains("efficientnet") || m.contains("fusion")) {
      json full = m;
      full.erase("preset");
      c.model = HybridModelConfig::from_json(full);
    } else {
      c.model = HybridModelConfig::preset(c.preset);
      read(m, "input_size", c.model.input_size, "model");
    }
  }
  if (j.contains("train")) {
    reject_unknown(j.at("train"),
                   "train", {"lr", "momentum", "batch_size", "max_epochs", "patience", "train_acc_stop"});
    c.train = training::TrainConfig::from_json(j.at("train"));
  }
  if (j.contains("augment")) {
    json a = j.at("augment");
    reject_unknown(a, "augment",
                   {"mode", "max_rotate_deg", "max_translate_frac", "min_scale", "max_scale", "p_rotate",
                    "p_translate", "p_scale", "p_hflip", "p_cutout", "min_cutout_frac", "max_cutout_frac",
                    "fill_value", "mean", "std"});
    if (a.contains("mode")) {
      c.mode = augment::parse_cutout_mode(a.at("mode").get<std::string>());
      a.erase("mode");
    }
    c.augment = augment::AugmentConfig::from_json(a);
  }
  if (j.contains("frames")) {
    const json& f = j.at("frames");
    reject_unknown(f, "frames", {"fake_quota", "real_quota", "test_quota", "max_frames"});
    read(f, "fake_quota", c.frames.fake_quota, "frames");
    read(f, "real_quota", c.frames.real_quota, "frames");
    read(f, "test_quota", c.frames.test_quota, "frames");
    if (f.contains("max_frames") && !f.at("max_frames").is_null()) {
      std::size_t cap = 0;
      read(f, "max_frames", cap, "frames");
      c.frames.max_frames = cap;
    }
  }
  c.resolve();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  } catch (const json::type_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace deepfuse
