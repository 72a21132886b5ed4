#include "deepfuse/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "deepfuse/datapipe.hpp"
#include "deepfuse/random.hpp"

namespace deepfuse::training {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must lie in [0, 1)");
  if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
  if (max_epochs < 1) throw ConfigError("train.max_epochs must be at least 1");
  if (patience < 1) throw ConfigError("train.patience must be at least 1");
  if (!(train_acc_stop > 0.0 && train_acc_stop <= 1.0)) throw ConfigError("train.train_acc_stop must lie in (0, 1]");
}

json TrainConfig::to_json() const {
  return {{"lr", lr},
          {"momentum", momentum},
          {"batch_size", batch_size},
          {"max_epochs", max_epochs},
          {"patience", patience},
          {"train_acc_stop", train_acc_stop},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  try {
    c.lr = j.value("lr", c.lr);
    c.momentum = j.value("momentum", c.momentum);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    c.train_acc_stop = j.value("train_acc_stop", c.train_acc_stop);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

json EpochMetrics::to_json() const {
  return {{"epoch", epoch},
          {"train_loss", train_loss},
          {"train_acc", train_acc},
          {"val_loss", val_loss},
          {"val_acc", val_acc}};
}

EpochMetrics EpochMetrics::from_json(const json& j) {
  return {j.at("epoch").get<std::size_t>(), j.at("train_loss").get<double>(), j.at("train_acc").get<double>(),
          j.at("val_loss").get<double>(), j.at("val_acc").get<double>()};
}

std::string_view stop_reason_name(StopReason reason) {
  switch (reason) {
    case StopReason::kNone:
      return "none";
    case StopReason::kValLossRising:
      return "val_loss_rising";
    case StopReason::kTrainAccuracy:
      return "train_accuracy";
    case StopReason::kMaxEpochs:
      return "max_epochs";
  }
  return "?";
}

StopReason parse_stop_reason(std::string_view text) {
  for (auto r : {StopReason::kNone, StopReason::kValLossRising, StopReason::kTrainAccuracy, StopReason::kMaxEpochs}) {
    if (stop_reason_name(r) == text) return r;
  }
  throw CheckpointError(CheckpointError::Kind::kCorrupt, "unknown stop reason '" + std::string(text) + "'");
}

StopDecision early_stop_check(std::span<const double> val_losses, double train_acc, const TrainConfig& config) {
  if (val_losses.empty()) throw UsageError("early_stop_check needs at least one epoch of history");
  const std::size_t n = val_losses.size();
  if (n > config.patience) {
    bool rising = true;
    for (std::size_t i = n - config.patience; i < n; ++i) rising = rising && val_losses[i] > val_losses[i - 1];
    if (rising) return {true, StopReason::kValLossRising};
  }
  if (train_acc >= config.train_acc_stop) return {true, StopReason::kTrainAccuracy};
  return {};
}

template <typename T>
Tensor<T> bce_loss(const Tensor<T>& p, const std::vector<T>& targets) {
  return binary_cross_entropy(p, targets, static_cast<T>(1e-7));
}

template <typename T>
void sgd_momentum_step(std::span<T> weights, std::span<const T> grads, std::span<T> velocity, T lr, T momentum) {
  if (weights.size() != grads.size() || weights.size() != velocity.size()) {
    throw DimensionError("sgd_momentum_step: " + std::to_string(weights.size()) + " weights, " +
                         std::to_string(grads.size()) + " grads, " + std::to_string(velocity.size()) +
                         " velocities");
  }
  for (std::size_t i = 0; i < weights.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grads[i];
    weights[i] -= lr * velocity[i];
  }
}

template <typename T>
TrainState<T> TrainState<T>::fresh(const ParameterSet<T>& params, std::uint64_t seed) {
  TrainState s;
  s.seed = seed;
  for (const auto& e : params.entries()) {
    if (e.trainable) s.velocities.push_back(Tensor<T>::zeros(e.tensor.shape()));
  }
  return s;
}

template <typename T>
void apply_sgd(ParameterSet<T>& params, TrainState<T>& state, const TrainConfig& config) {
  std::size_t k = 0;
  for (auto& e : params.entries()) {
    if (!e.trainable) continue;
    if (k >= state.velocities.size() || state.velocities[k].shape() != e.tensor.shape()) {
      throw DimensionError("velocity buffers do not mirror parameter '" + e.name + "'");
    }
    sgd_momentum_step<T>(e.tensor.data(), e.tensor.grad(), state.velocities[k].data(), static_cast<T>(config.lr),
                         static_cast<T>(config.momentum));
    ++k;
  }
  if (k != state.velocities.size()) throw DimensionError("velocity buffers do not mirror the parameter set");
}

namespace {

template <typename T>
T target_of(const FaceFrame& f) {
  return f.label == Label::kFake ? T{1} : T{0};
}

bool predicted_fake(double p) { return p >= 0.5; }

}  // namespace

template <typename T>
FrameScores<T> score_frames(HybridModel<T>& model, const std::vector<FaceFrame>& frames,
                            const augment::AugmentConfig& preprocess) {
  FrameScores<T> out;
  if (frames.empty()) return out;
  out.probabilities.resize(frames.size());
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    auto input = augment::apply_pipeline<T>(frames[i], augment::CutoutMode::kNone, 0, preprocess);
    const Tensor<T> p = model.forward(input.tensor, NormMode::kInfer);
    const T y = target_of<T>(frames[i]);
    out.probabilities[i] = static_cast<double>(p.item());
    loss += static_cast<double>(bce_loss(p, {y}).item());
    correct += predicted_fake(out.probabilities[i]) == (y == T{1}) ? 1 : 0;
  }
  out.loss = loss / static_cast<double>(frames.size());
  out.accuracy = static_cast<double>(correct) / static_cast<double>(frames.size());
  return out;
}

template <typename T>
TrainState<T> fit(HybridModel<T>& model, const std::vector<FaceFrame>& train, const std::vector<FaceFrame>& val,
                  const TrainConfig& config, const FitOptions<T>& options, std::optional<TrainState<T>> resume) {
  config.validate();
  if (train.empty()) throw DataError("training split has no frames");
  if (val.empty()) throw DataError("validation split has no frames");
  augment::AugmentConfig aug = options.augment;
  aug.out_height = aug.out_width = model.config().input_size;

  auto& params = model.parameters();
  TrainState<T> state = resume ? std::move(*resume) : TrainState<T>::fresh(params, config.seed);
  auto best = params.snapshot();
  std::vector<double> val_losses;
  for (const auto& m : state.history) val_losses.push_back(m.val_loss);

  while (state.epoch < config.max_epochs && state.stop_reason == StopReason::kNone) {
    const std::size_t epoch = state.epoch + 1;
    datapipe::BatchIterator<T> batches(train, config.batch_size, mix_seed(state.seed, epoch),
                                       datapipe::BatchMode::kTrain, options.mode, aug);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    datapipe::Batch<T> batch;
    std::size_t batch_no = 0;
    while (batches.next(batch)) {
      ++batch_no;
      params.zero_grad();
      Tape<T> tape;
      Tensor<T> loss;
      Tensor<T> p;
      {
        typename Tape<T>::Scope scope(tape);
        p = model.forward_batch(batch.inputs, NormMode::kTrain);
        loss = bce_loss(p, batch.targets);
      }
      for (std::size_t k = 0; k < batch.inputs.size(); ++k) {
        const double pk = static_cast<double>(p[k]);
        if (!std::isfinite(pk) || !std::isfinite(static_cast<double>(loss.item()))) {
          const FaceFrame& f = train[batch.indices[k]];
          std::ostringstream msg;
          msg << "non-finite loss at epoch " << epoch << ", batch " << batch_no << " (video '" << f.video_id
              << "', frame " << f.frame_index << "): p=" << pk << ", loss=" << loss.item();
          throw TrainingError(msg.str());
        }
        correct += predicted_fake(pk) == (batch.targets[k] == T{1}) ? 1 : 0;
      }
      backward(loss, tape);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(batch.inputs.size());
      apply_sgd(params, state, config);
    }
    params.zero_grad();

    const FrameScores<T> v = score_frames(model, val, aug);
    EpochMetrics m{epoch, loss_sum / static_cast<double>(train.size()),
                   static_cast<double>(correct) / static_cast<double>(train.size()), v.loss, v.accuracy};
    state.history.push_back(m);
    state.epoch = epoch;
    val_losses.push_back(m.val_loss);

    const StopDecision decision = early_stop_check(val_losses, m.train_acc, config);
    if (decision.stop) {
      state.stop_reason = decision.reason;
    } else if (state.epoch == config.max_epochs) {
      state.stop_reason = StopReason::kMaxEpochs;
    }
    if (m.val_loss < state.best_val_loss) {
      state.best_val_loss = m.val_loss;
      state.best_epoch = epoch;
      best = params.snapshot();
      if (options.best_checkpoint) save_checkpoint(*options.best_checkpoint, model, &state);
    }
    if (options.on_epoch) options.on_epoch(m, state);
  }
  if (state.best_epoch > 0) params.restore(best);
  return state;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'D', 'F', 'U', 'S', 'E', 'C', 'K', '\0'};

using Kind = CheckpointError::Kind;

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "float32" : "float64";
}

std::uint64_t fnv1a(std::span<const char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

template <typename T>
void append_le(std::string& out, std::span<const T> values) {
  const std::size_t at = out.size();
  out.resize(at + values.size_bytes());
  std::memcpy(out.data() + at, values.data(), values.size_bytes());
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      std::reverse(out.begin() + static_cast<std::ptrdiff_t>(at + i * sizeof(T)),
                   out.begin() + static_cast<std::ptrdiff_t>(at + (i + 1) * sizeof(T)));
    }
  }
}

template <typename T>
std::vector<T> read_le(const char* p, std::size_t count) {
  std::vector<T> out(count);
  std::memcpy(out.data(), p, count * sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    auto* bytes = reinterpret_cast<char*>(out.data());
    for (std::size_t i = 0; i < count; ++i) std::reverse(bytes + i * sizeof(T), bytes + (i + 1) * sizeof(T));
  }
  return out;
}

std::string read_all(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw CheckpointError(Kind::kNotFound, "checkpoint not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(Kind::kIo, "cannot open checkpoint '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

struct ParsedFile {
  json header;
  std::string_view payload;
};

ParsedFile parse_file(const std::string& bytes, const std::filesystem::path& path) {
  const std::string name = path.string();
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw CheckpointError(Kind::kCorrupt, name + ": not a checkpoint file (bad magic)");
  }
  const std::uint64_t header_len = get_u64(bytes.data() + 8);
  if (header_len > bytes.size() - 16) throw CheckpointError(Kind::kCorrupt, name + ": truncated header");
  ParsedFile f;
  try {
    f.header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::parse_error& e) {
    throw CheckpointError(Kind::kCorrupt, name + ": unreadable header: " + e.what());
  }
  const int version = f.header.value("format_version", -1);
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::kVersionMismatch, name + ": format version " + std::to_string(version) +
                                                      ", this build reads version " +
                                                      std::to_string(kCheckpointVersion));
  }
  f.payload = std::string_view(bytes).substr(16 + header_len);
  const auto expected = f.header.value("payload_bytes", std::uint64_t{0});
  if (f.payload.size() != expected) {
    throw CheckpointError(Kind::kCorrupt, name + ": payload is " + std::to_string(f.payload.size()) +
                                              " bytes, header promises " + std::to_string(expected) +
                                              " (truncated or padded file)");
  }
  if (f.header.value("payload_fnv1a", std::string()) != [&] {
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(f.payload)));
        return std::string(buf);
      }()) {
    throw CheckpointError(Kind::kCorrupt, name + ": payload checksum mismatch");
  }
  return f;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const HybridModel<T>& model, const TrainState<T>* state) {
  std::string payload;
  json tensors = json::array();
  auto add = [&](const std::string& name, const Tensor<T>& t, bool trainable) {
    tensors.push_back({{"name", name},
                       {"shape", t.shape()},
                       {"trainable", trainable},
                       {"offset", payload.size()},
                       {"nbytes", t.numel() * sizeof(T)}});
    append_le<T>(payload, t.data());
  };
  const auto& params = model.parameters();
  for (const auto& e : params.entries()) add(e.name, e.tensor, e.trainable);

  json train_state = nullptr;
  if (state != nullptr) {
    std::size_t k = 0;
    for (const auto& e : params.entries()) {
      if (!e.trainable) continue;
      if (k >= state->velocities.size()) throw UsageError("train state has fewer velocities than parameters");
      add("velocity/" + e.name, state->velocities[k++], false);
    }
    train_state = {{"epoch", state->epoch},
                   {"best_epoch", state->best_epoch},
                   {"best_val_loss", std::isfinite(state->best_val_loss) ? json(state->best_val_loss) : json()},
                   {"stop_reason", std::string(stop_reason_name(state->stop_reason))},
                   {"seed", state->seed},
                   {"history", json::array()}};
    for (const auto& m : state->history) train_state["history"].push_back(m.to_json());
  }
  char checksum[17];
  std::snprintf(checksum, sizeof checksum, "%016llx", static_cast<unsigned long long>(fnv1a(payload)));
  const json header = {{"format_version", kCheckpointVersion},
                       {"dtype", dtype_name<T>()},
                       {"config", model.config().to_json()},
                       {"config_hash", model.config().hash()},
                       {"tensors", std::move(tensors)},
                       {"payload_bytes", payload.size()},
                       {"payload_fnv1a", checksum},
                       {"train_state", std::move(train_state)}};
  const std::string text = header.dump();
  std::string file(kMagic, 8);
  put_u64(file, text.size());
  file += text;
  file += payload;

  // Write beside the target and rename so readers never see a partial file.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(Kind::kIo, "cannot write checkpoint '" + tmp.string() + "'");
    out.write(file.data(), static_cast<std::streamsize>(file.size()));
    if (!out) throw CheckpointError(Kind::kIo, "failed writing checkpoint '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(Kind::kIo, "cannot move checkpoint into place: " + ec.message());
}

template <typename T>
void load_checkpoint(const std::filesystem::path& path, HybridModel<T>& model, TrainState<T>* state) {
  const std::string bytes = read_all(path);
  const ParsedFile f = parse_file(bytes, path);
  const std::string name = path.string();
  const json& h = f.header;
  try {
    if (h.at("dtype").get<std::string>() != dtype_name<T>()) {
      throw CheckpointError(Kind::kConfigMismatch, name + ": checkpoint holds " + h.at("dtype").get<std::string>() +
                                                       " tensors, model is " + dtype_name<T>());
    }
    const std::string want = model.config().hash();
    const std::string have = h.at("config_hash").get<std::string>();
    if (have != want) {
      throw CheckpointError(Kind::kConfigMismatch, name + ": architecture hash " + have +
                                                       " does not match the model's " + want);
    }

    // Stage everything, then commit, so a failure leaves the model untouched.
    std::map<std::string, std::vector<T>> staged;
    for (const auto& t : h.at("tensors")) {
      const auto offset = t.at("offset").get<std::size_t>();
      const auto nbytes = t.at("nbytes").get<std::size_t>();
      if (offset > f.payload.size() || nbytes > f.payload.size() - offset || nbytes % sizeof(T) != 0) {
        throw CheckpointError(Kind::kCorrupt, name + ": tensor '" + t.at("name").get<std::string>() +
                                                  "' lies outside the payload");
      }
      const Shape shape = t.at("shape").get<Shape>();
      if (shape_numel(shape) * sizeof(T) != nbytes) {
        throw CheckpointError(Kind::kCorrupt, name + ": tensor '" + t.at("name").get<std::string>() +
                                                  "' size disagrees with its shape");
      }
      staged[t.at("name").get<std::string>()] = read_le<T>(f.payload.data() + offset, nbytes / sizeof(T));
    }
    auto take = [&](const std::string& key, const Shape& shape) -> std::vector<T>& {
      auto it = staged.find(key);
      if (it == staged.end()) throw CheckpointError(Kind::kCorrupt, name + ": missing tensor '" + key + "'");
      if (it->second.size() != shape_numel(shape)) {
        throw CheckpointError(Kind::kConfigMismatch, name + ": tensor '" + key + "' has the wrong size");
      }
      return it->second;
    };
    auto& params = model.parameters();
    std::vector<std::vector<T>> values;
    for (const auto& e : params.entries()) values.push_back(std::move(take(e.name, e.tensor.shape())));

    std::optional<TrainState<T>> loaded;
    if (state != nullptr) {
      const json& ts = h.at("train_state");
      if (ts.is_null()) throw CheckpointError(Kind::kCorrupt, name + ": checkpoint carries no training state");
      TrainState<T> s;
      s.epoch = ts.at("epoch").get<std::size_t>();
      s.best_epoch = ts.at("best_epoch").get<std::size_t>();
      s.best_val_loss = ts.at("best_val_loss").is_null() ? std::numeric_limits<double>::infinity()
                                                         : ts.at("best_val_loss").get<double>();
      s.stop_reason = parse_stop_reason(ts.at("stop_reason").get<std::string>());
      s.seed = ts.at("seed").get<std::uint64_t>();
      for (const auto& m : ts.at("history")) s.history.push_back(EpochMetrics::from_json(m));
      for (const auto& e : params.entries()) {
        if (!e.trainable) continue;
        s.velocities.emplace_back(e.tensor.shape(), std::move(take("velocity/" + e.name, e.tensor.shape())));
      }
      loaded = std::move(s);
    }
    params.restore(values);
    if (state != nullptr) *state = std::move(*loaded);
  } catch (const json::exception& e) {
    throw CheckpointError(Kind::kCorrupt, name + ": malformed header: " + e.what());
  }
}

json read_checkpoint_header(const std::filesystem::path& path) {
  const std::string bytes = read_all(path);
  return parse_file(bytes, path).header;
}

HybridModelConfig checkpoint_config(const std::filesystem::path& path) {
  const json h = read_checkpoint_header(path);
  try {
    HybridModelConfig c = HybridModelConfig::from_json(h.at("config"));
    if (c.hash() != h.at("config_hash").get<std::string>()) {
      throw CheckpointError(Kind::kCorrupt, path.string() + ": stored config does not match its hash");
    }
    return c;
  } catch (const json::exception& e) {
    throw CheckpointError(Kind::kCorrupt, path.string() + ": malformed header: " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(Kind::kCorrupt, path.string() + ": invalid stored config: " + e.what());
  }
}

#define DEEPFUSE_INSTANTIATE_TRAINING(T)                                                                      \
  template Tensor<T> bce_loss(const Tensor<T>&, const std::vector<T>&);                                       \
  template void sgd_momentum_step(std::span<T>, std::span<const T>, std::span<T>, T, T);                      \
  template struct TrainState<T>;                                                                              \
  template void apply_sgd(ParameterSet<T>&, TrainState<T>&, const TrainConfig&);                              \
  template FrameScores<T> score_frames(HybridModel<T>&, const std::vector<FaceFrame>&,                        \
                                       const augment::AugmentConfig&);                                        \
  template TrainState<T> fit(HybridModel<T>&, const std::vector<FaceFrame>&, const std::vector<FaceFrame>&,   \
                             const TrainConfig&, const FitOptions<T>&, std::optional<TrainState<T>>);         \
  template void save_checkpoint(const std::filesystem::path&, const HybridModel<T>&, const TrainState<T>*);   \
  template void load_checkpoint(const std::filesystem::path&, HybridModel<T>&, TrainState<T>*);

DEEPFUSE_INSTANTIATE_TRAINING(float)
DEEPFUSE_INSTANTIATE_TRAINING(double)

#undef DEEPFUSE_INSTANTIATE_TRAINING

}  // namespace deepfuse::training
