#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <variant>

#include "deepfuse/augment.hpp"
#include "deepfuse/datapipe.hpp"
#include "deepfuse/evaluate.hpp"
#include "deepfuse/image_io.hpp"
#include "deepfuse/model.hpp"
#include "deepfuse/run_config.hpp"
#include "deepfuse/training.hpp"

namespace py = pybind11;
using namespace deepfuse;

namespace {

using Pixels = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

// numpy arrays are HxWx3; the library works on planar 3xHxW.
Image8 from_numpy(const Pixels& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw DimensionError("expected an HxWx3 uint8 array");
  const auto h = static_cast<std::size_t>(a.shape(0));
  const auto w = static_cast<std::size_t>(a.shape(1));
  Image8 img(3, h, w);
  auto v = a.unchecked<3>();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = v(y, x, c);
    }
  }
  return img;
}

Pixels to_numpy(const Image8& img) {
  Pixels a({img.height, img.width, img.channels});
  auto v = a.mutable_unchecked<3>();
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < img.channels; ++c) v(y, x, c) = img.at(c, y, x);
    }
  }
  return a;
}

class Model {
 public:
  Model(const std::string& preset, std::uint64_t seed, const std::string& dtype)
      : model_(make(HybridModelConfig::preset(preset), seed, parse_dtype(dtype))) {}

  static Model load(const std::filesystem::path& path) {
    const auto header = training::read_checkpoint_header(path);
    Model m(make(training::checkpoint_config(path), 0, parse_dtype(header.value("dtype", std::string("float32")))));
    std::visit([&](auto& model) { training::load_checkpoint(path, model); }, m.model_);
    return m;
  }

  void save(const std::filesystem::path& path) const {
    std::visit([&](const auto& m) { training::save_checkpoint(path, m); }, model_);
  }

  std::vector<double> score_frames(const std::vector<Pixels>& images) {
    std::vector<FaceFrame> frames;
    for (std::size_t i = 0; i < images.size(); ++i) {
      FaceFrame f;
      f.pixels = from_numpy(images[i]);
      f.video_id = "python";
      f.frame_index = i;
      frames.push_back(std::move(f));
    }
    return std::visit([&](auto& m) { return evaluate::score_video(m, frames); }, model_);
  }

  std::string dtype() const { return model_.index() == 0 ? "float32" : "float64"; }
  std::string config_json() const {
    return std::visit([](const auto& m) { return m.config().to_json().dump(); }, model_);
  }
  std::string config_hash() const {
    return std::visit([](const auto& m) { return m.config().hash(); }, model_);
  }
  std::size_t num_parameters() const {
    return std::visit([](const auto& m) { return m.parameters().trainable_count(); }, model_);
  }

 private:
  using Variant = std::variant<HybridModel<float>, HybridModel<double>>;

  explicit Model(Variant model) : model_(std::move(model)) {}

  static Variant make(HybridModelConfig cfg, std::uint64_t seed, DType dtype) {
    if (dtype == DType::kFloat32) return Variant(std::in_place_index<0>, std::move(cfg), seed);
    return Variant(std::in_place_index<1>, std::move(cfg), seed);
  }

  Variant model_;
};

py::tuple augment_image(const Pixels& image, const std::string& mode, std::uint64_t seed,
                        const std::optional<std::vector<std::pair<double, double>>>& landmarks,
                        std::optional<std::size_t> size) {
  FaceFrame frame;
  frame.pixels = from_numpy(image);
  frame.video_id = "python";
  if (landmarks) {
    std::vector<Point> pts;
    for (const auto& [x, y] : *landmarks) pts.push_back({x, y});
    frame.landmarks = LandmarkSet(std::move(pts));
  }
  augment::AugmentConfig cfg;
  cfg.out_height = size.value_or(frame.pixels.height);
  cfg.out_width = size.value_or(frame.pixels.width);
  cfg.validate();
  const auto result = augment::apply_pipeline<float>(frame, augment::parse_cutout_mode(mode), seed, cfg);
  const Image8 out = to_u8(augment::denormalize(result.tensor, cfg.mean, cfg.stddev));
  return py::make_tuple(to_numpy(out), result.plan.to_json().dump());
}

py::tuple early_stop(const std::vector<double>& val_losses, double train_acc, std::size_t patience,
                     double train_acc_stop) {
  training::TrainConfig c;
  c.patience = patience;
  c.train_acc_stop = train_acc_stop;
  c.validate();
  const auto d = training::early_stop_check(val_losses, train_acc, c);
  return py::make_tuple(d.stop, std::string(training::stop_reason_name(d.reason)));
}

}  // namespace

PYBIND11_MODULE(_deepfuse, m) {
  m.doc() = "Hybrid early-fusion deepfake frame classifier";

  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);
  py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);

  py::class_<Model>(m, "Model")
      .def(py::init<const std::string&, std::uint64_t, const std::string&>(), py::arg("preset") = "toy",
           py::arg("seed") = 0, py::arg("dtype") = "float32")
      .def_static("load", &Model::load, py::arg("path"))
      .def("save", &Model::save, py::arg("path"))
      .def("score_frames", &Model::score_frames, py::arg("images"),
           "Per-frame fake probabilities for HxWx3 uint8 frames (mode none preprocessing).")
      .def_property_readonly("dtype", &Model::dtype)
      .def_property_readonly("config_hash", &Model::config_hash)
      .def_property_readonly("num_parameters", &Model::num_parameters)
      .def("_config_json", &Model::config_json);

  m.def("_augment", &augment_image, py::arg("image"), py::arg("mode"), py::arg("seed"),
        py::arg("landmarks") = py::none(), py::arg("size") = py::none());
  m.def("decode_image", [](const std::filesystem::path& p) { return to_numpy(datapipe::decode_image(p)); },
        py::arg("path"));
  m.def("write_png", [](const std::filesystem::path& p, const Pixels& a) { datapipe::write_png(p, from_numpy(a)); },
        py::arg("path"), py::arg("image"));
  m.def("aggregate_video", [](const std::vector<double>& probs) { return evaluate::aggregate_video(probs); },
        py::arg("frame_probs"));
  m.def("decide", [](double score, double threshold) { return std::string(label_name(evaluate::decide(score, threshold))); },
        py::arg("score"), py::arg("threshold") = evaluate::kDecisionThreshold);
  m.def("early_stop_check", &early_stop, py::arg("val_losses"), py::arg("train_acc"), py::arg("patience") = 3,
        py::arg("train_acc_stop") = 0.995);
  m.def("presets", [] {
    std::vector<std::string> out;
    for (auto s : {backbones::ScalePreset::kToy, backbones::ScalePreset::kSmall, backbones::ScalePreset::kPaper}) {
      out.emplace_back(backbones::scale_name(s));
    }
    return out;
  });
  m.attr("DECISION_THRESHOLD") = evaluate::kDecisionThreshold;
}
