// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "deepfuse/evaluate.hpp"
#include "deepfuse/grad_check.hpp"
#include "deepfuse/training.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace deepfuse;
using deepfuse::testing::TempDir;
using nlohmann::json;

namespace {

constexpr double kGradTolerance = 1e-4;
constexpr double kGradStep = 1e-5;
constexpr std::uint64_t kGradSeeds = 20;
constexpr double kGradBudgetSeconds = 120.0;
constexpr double kEncoderTolerance = 1e-10;
constexpr std::size_t kOverfitCorpus = 32;
constexpr std::size_t kOverfitMaxEpochs = 200;
constexpr double kOverfitBudgetSeconds = 600.0;
constexpr int kGapSeeds = 5;
constexpr int kGapRequiredWins = 4;
constexpr std::size_t kGapTrainFrames = 16;
constexpr std::size_t kGapHoldoutFrames = 128;
constexpr std::size_t kGapPatch = 16;
constexpr std::size_t kGapEpochs = 80;
constexpr double kGapLr = 0.03;
constexpr double kMeanTolerance = 1e-12;
constexpr std::size_t kStopSequences = 10000;
constexpr double kReproTolerance = 1e-12;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Scalar probe sum(out * w) with w fixed by `seed`, so every output element
// contributes a distinct weight to the checked gradient.
Tensor<double> probe(const Tensor<double>& out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(out, random_tensor(out.shape(), rng)));
}

struct Primitive {
  std::string name;
  // Builds leaves from the seed and returns the scalar function over them.
  std::function<std::pair<std::vector<Tensor<double>>, std::function<Tensor<double>()>>(std::uint64_t)> make;
};

std::vector<Primitive> primitives() {
  using Leaves = std::vector<Tensor<double>>;
  using Fn = std::function<Tensor<double>()>;
  auto unary = [](std::string name, Shape shape, std::function<Tensor<double>(const Tensor<double>&)> op,
                  double lo = -1.0, double hi = 1.0) {
    return Primitive{name, [=](std::uint64_t seed) {
                       Rng rng(seed);
                       auto x = random_tensor(shape, rng, lo, hi);
                       return std::pair<Leaves, Fn>{{x}, [=] { return probe(op(x), seed + 1000); }};
                     }};
  };
  auto binary = [](std::string name, Shape sa, Shape sb,
                   std::function<Tensor<double>(const Tensor<double>&, const Tensor<double>&)> op) {
    return Primitive{name, [=](std::uint64_t seed) {
                       Rng rng(seed);
                       auto a = random_tensor(sa, rng);
                       auto b = random_tensor(sb, rng);
                       return std::pair<Leaves, Fn>{{a, b}, [=] { return probe(op(a, b), seed + 1000); }};
                     }};
  };
  std::vector<Primitive> p;
  p.push_back(binary("add", {3, 4}, {3, 4}, [](auto& a, auto& b) { return add(a, b); }));
  p.push_back(binary("sub", {3, 4}, {3, 4}, [](auto& a, auto& b) { return sub(a, b); }));
  p.push_back(binary("mul", {3, 4}, {3, 4}, [](auto& a, auto& b) { return mul(a, b); }));
  p.push_back(unary("scale", {5}, [](auto& x) { return scale(x, 1.7); }));
  p.push_back(unary("sine", {6}, [](auto& x) { return sine(x); }));
  p.push_back(binary("add_bias", {3, 4}, {4}, [](auto& a, auto& b) { return add_bias(a, b); }));
  p.push_back(unary("sum", {2, 3}, [](auto& x) { return reshape(sum(x), {1}); }));
  p.push_back(unary("mean", {2, 3}, [](auto& x) { return reshape(mean(x), {1}); }));
  p.push_back(binary("matmul", {3, 5}, {5, 2}, [](auto& a, auto& b) { return matmul(a, b); }));
  p.push_back(unary("transpose", {3, 5}, [](auto& x) { return transpose(x); }));
  p.push_back(unary("reshape", {3, 4}, [](auto& x) { return reshape(x, {2, 6}); }));
  p.push_back(binary("concat_rows", {2, 3}, {4, 3}, [](auto& a, auto& b) { return concat_rows(a, b); }));
  p.push_back(unary("slice_rows", {5, 3}, [](auto& x) { return slice_rows(x, 1, 3); }));
  p.push_back(unary("slice_cols", {3, 5}, [](auto& x) { return slice_cols(x, 2, 2); }));
  p.push_back(binary("concat_cols", {3, 2}, {3, 3}, [](auto& a, auto& b) { return concat_cols<double>({a, b}); }));
  p.push_back(binary("conv2d", {2, 6, 5}, {3, 2, 3, 3}, [](auto& a, auto& b) { return conv2d(a, b, 2, 1); }));
  p.push_back(binary("depthwise_conv2d", {3, 6, 6}, {3, 3, 3},
                     [](auto& a, auto& b) { return depthwise_conv2d(a, b, 1, 1); }));
  p.push_back(Primitive{"batch_norm", [](std::uint64_t seed) {
                          Rng rng(seed);
                          auto x = random_tensor({2, 3, 4}, rng);
                          auto gamma = random_tensor({2}, rng, 0.5, 1.5);
                          auto beta = random_tensor({2}, rng);
                          auto state = std::make_shared<BatchNormState<double>>(BatchNormState<double>::fresh(2));
                          return std::pair<Leaves, Fn>{{x, gamma, beta}, [=] {
                                                         return probe(batch_norm(x, gamma, beta, *state, NormMode::kTrain),
                                                                      seed + 1000);
                                                       }};
                        }});
  p.push_back(Primitive{"layer_norm", [](std::uint64_t seed) {
                          Rng rng(seed);
                          auto x = random_tensor({3, 5}, rng);
                          auto gamma = random_tensor({5}, rng, 0.5, 1.5);
                          auto beta = random_tensor({5}, rng);
                          return std::pair<Leaves, Fn>{
                              {x, gamma, beta}, [=] { return probe(layer_norm(x, gamma, beta), seed + 1000); }};
                        }});
  // Inputs kept at |x| >= 0.05 so no central difference straddles the kink.
  p.push_back(Primitive{"relu", [](std::uint64_t seed) {
                          Rng rng(seed);
                          auto x = random_tensor({12}, rng, 0.05, 1.0);
                          for (auto& v : x.data()) v = rng.uniform() < 0.5 ? -v : v;
                          return std::pair<Leaves, Fn>{
                              {x}, [=] { return probe(activation(x, Activation::kRelu), seed + 1000); }};
                        }});
  p.push_back(unary("gelu", {12}, [](auto& x) { return activation(x, Activation::kGelu); }, -3.0, 3.0));
  p.push_back(unary("swish", {12}, [](auto& x) { return activation(x, Activation::kSwish); }, -3.0, 3.0));
  p.push_back(unary("sigmoid", {8}, [](auto& x) { return sigmoid(x); }, -4.0, 4.0));
  p.push_back(unary("softmax", {3, 4}, [](auto& x) { return softmax(x); }, -2.0, 2.0));
  p.push_back(unary("global_avg_pool", {3, 4, 5}, [](auto& x) { return global_avg_pool(x); }));
  p.push_back(binary("scale_channels", {3, 4, 4}, {3}, [](auto& a, auto& b) { return scale_channels(a, b); }));
  p.push_back(Primitive{"binary_cross_entropy", [](std::uint64_t seed) {
                          Rng rng(seed);
                          auto x = random_tensor({6}, rng, 0.05, 0.95);
                          std::vector<double> y(6);
                          for (auto& v : y) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
                          return std::pair<Leaves, Fn>{{x}, [=] { return binary_cross_entropy(x, y); }};
                        }});
  return p;
}

Outcome criterion_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckOptions opts;
  opts.step = kGradStep;
  double worst = 0.0;
  std::string worst_name;
  std::size_t checks = 0;
  for (const auto& prim : primitives()) {
    for (std::uint64_t seed = 1; seed <= kGradSeeds; ++seed) {
      auto [leaves, f] = prim.make(seed);
      const double err = grad_check<double>(f, leaves, opts);
      ++checks;
      if (err > worst) {
        worst = err;
        worst_name = prim.name;
      }
    }
  }
  const auto cfg = HybridModelConfig::preset("toy");
  double model_worst = 0.0;
  for (std::uint64_t seed = 1; seed <= kGradSeeds; ++seed) {
    HybridModel<double> model(cfg, seed);
    Rng rng(500 + seed);
    const auto x = random_tensor({3, cfg.input_size, cfg.input_size}, rng);
    const std::vector<double> target{static_cast<double>(seed % 2)};
    GradCheckOptions mopts = opts;
    mopts.max_coords_per_leaf = 2;
    mopts.seed = seed;
    const double err = grad_check<double>(
        [&] { return binary_cross_entropy(model.forward(x, NormMode::kTrain), target); },
        model.parameters().trainable(), mopts);
    model_worst = std::max(model_worst, err);
    ++checks;
  }
  const double elapsed = seconds_since(t0);
  std::ostringstream d;
  d << checks << " checks, worst primitive " << worst << " (" << worst_name << "), worst toy model " << model_worst
    << ", " << elapsed << " s";
  return {worst <= kGradTolerance && model_worst <= kGradTolerance && elapsed < kGradBudgetSeconds, d.str()};
}

Outcome criterion_shape_chain() {
  const auto cfg = fusion::FusionConfig::paper();
  Rng rng(7);
  auto params = fusion::init_fusion<float>(cfg, rng);
  auto tokens = [&](const char* source) {
    Tensor<float> t({162, 768});
    for (auto& v : t.data()) v = static_cast<float>(rng.normal());
    return backbones::TokenSequence<float>{t, source};
  };
  const auto fused = fusion::fuse_tokens(tokens("xception"), tokens("efficientnet"));
  const auto seq = fusion::prepend_class_and_pos(fused, params);
  const auto encoded = fusion::encoder_forward(seq, params, cfg);
  const auto p = fusion::classify(encoded, params);
  const bool ok = fused.shape() == Shape{324, 768} && seq.shape() == Shape{325, 768} &&
                  encoded.shape() == Shape{325, 768} && p.shape() == Shape{1} && p.item() > 0.0f && p.item() < 1.0f;
  std::ostringstream d;
  d << "162+162 -> " << fused.extent(0) << " -> " << seq.extent(0) << " tokens of width " << seq.extent(1)
    << " -> p=" << p.item();
  return {ok, d.str()};
}

Outcome criterion_encoder_oracle() {
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    for (std::size_t L = 1; L <= 3; ++L) {
      fusion::FusionConfig cfg{6, 1, 1, 2, 4};
      Rng rng(seed * 10 + L);
      auto p = fusion::init_fusion<double>(cfg, rng);
      deepfuse::testing::randomize_block(p.blocks[0], rng);
      for (auto* t : {&p.final_gamma, &p.final_beta, &p.head_w, &p.head_b}) {
        for (auto& v : t->data()) v = rng.uniform(-0.8, 0.8);
      }
      const auto x = random_tensor({L, 6}, rng);
      const auto encoded = fusion::encoder_forward(x, p, cfg);
      const auto prob = fusion::classify(encoded, p);

      namespace o = deepfuse::testing;
      const auto want = o::layer_norm_rows(o::encoder_block_oracle(o::to_mat(x), p.blocks[0]), p.final_gamma,
                                           p.final_beta);
      double logit = p.head_b[0];
      for (std::size_t j = 0; j < 6; ++j) logit += want[0][j] * p.head_w[j];
      const double want_prob = 1.0 / (1.0 + std::exp(-logit));
      for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t j = 0; j < 6; ++j) worst = std::max(worst, std::abs(encoded[i * 6 + j] - want[i][j]));
      }
      worst = std::max(worst, std::abs(prob.item() - want_prob));
    }
  }
  std::ostringstream d;
  d << "max |diff| " << worst << " over L=1..3, 10 seeds";
  return {worst <= kEncoderTolerance, d.str()};
}

Outcome criterion_overfit() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cfg = HybridModelConfig::preset("toy");
  const auto train = deepfuse::testing::separable_corpus(kOverfitCorpus, cfg.input_size, 11);
  const auto val = deepfuse::testing::separable_corpus(8, cfg.input_size, 12);
  training::TrainConfig tc;
  tc.max_epochs = kOverfitMaxEpochs;
  tc.seed = 1;
  HybridModel<float> model(cfg, 1);
  training::FitOptions<float> opts;
  opts.mode = augment::CutoutMode::kNone;
  const auto state = training::fit(model, train, val, tc, opts);
  const double elapsed = seconds_since(t0);
  const auto& last = state.history.back();
  std::ostringstream d;
  d << "train_acc " << last.train_acc << " after " << state.history.size() << " epochs, stop "
    << training::stop_reason_name(state.stop_reason) << ", " << elapsed << " s";
  return {last.train_acc == 1.0 && state.stop_reason == training::StopReason::kTrainAccuracy &&
              state.history.size() <= kOverfitMaxEpochs && elapsed < kOverfitBudgetSeconds,
          d.str()};
}

// Train-vs-holdout accuracy gap, both measured without augmentation.
// Fake frames carry a bright 16x16 square at (20, 20) over dim noise.
std::vector<FaceFrame> gap_corpus(std::size_t n, std::uint64_t seed, std::size_t side) {
  return deepfuse::testing::patch_corpus(n, side, seed, kGapPatch, 20, 20, 255, 120);
}

double augmentation_gap(augment::CutoutMode mode, std::uint64_t seed) {
  const auto cfg = HybridModelConfig::preset("toy");
  const std::size_t side = cfg.input_size;
  const auto train = gap_corpus(kGapTrainFrames, 100 + seed, side);
  const auto val = gap_corpus(16, 200 + seed, side);
  const auto holdout = gap_corpus(kGapHoldoutFrames, 300 + seed, side);
  training::TrainConfig tc;
  tc.max_epochs = kGapEpochs;
  tc.lr = kGapLr;
  tc.batch_size = 8;
  tc.patience = 100;
  tc.train_acc_stop = 1.0;
  tc.seed = seed;
  HybridModel<float> model(cfg, seed);
  training::FitOptions<float> opts;
  opts.mode = mode;
  opts.augment.out_height = opts.augment.out_width = side;
  training::fit(model, train, val, tc, opts);
  const double train_acc = training::score_frames(model, train, opts.augment).accuracy;
  const double holdout_acc = training::score_frames(model, holdout, opts.augment).accuracy;
  return train_acc - holdout_acc;
}

Outcome criterion_augmentation_gap() {
  int wins = 0;
  double none_sum = 0.0, cut_sum = 0.0;
  std::ostringstream d;
  d << "gaps (none vs random_cutout):";
  for (int s = 1; s <= kGapSeeds; ++s) {
    const double none = augmentation_gap(augment::CutoutMode::kNone, s);
    const double cut = augmentation_gap(augment::CutoutMode::kRandomCutout, s);
    wins += cut <= none ? 1 : 0;
    none_sum += none;
    cut_sum += cut;
    d << " [" << none << " vs " << cut << "]";
  }
  d << "; mean " << none_sum / kGapSeeds << " vs " << cut_sum / kGapSeeds << "; cut-out gap <= baseline in " << wins
    << "/" << kGapSeeds;
  return {wins >= kGapRequiredWins, d.str()};
}

Outcome criterion_augmentation_locality() {
  using namespace augment;
  Rng rng(5);
  std::size_t violations = 0, pipeline_mismatches = 0, cutouts = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto pixels = deepfuse::testing::noise_image(48 + seed % 17, 48 + seed % 13, rng, 1, 255);
    const Image img = to_float(pixels);
    const long h = static_cast<long>(img.height), w = static_cast<long>(img.width);
    const auto rc = random_cutout(img, seed);
    const LandmarkSet lm(deepfuse::testing::face_landmarks(static_cast<double>(w), static_cast<double>(h), 1.0, seed));
    const auto fc = face_cutout(img, lm, seed);
    for (long y = 0; y < h; ++y) {
      for (long x = 0; x < w; ++x) {
        const bool sq = deepfuse::testing::in_square(rc.plan.squares[0], x, y) ||
                        deepfuse::testing::in_square(rc.plan.squares[1], x, y);
        const bool hull =
            deepfuse::testing::point_in_convex(fc.plan.hull, static_cast<double>(x), static_cast<double>(y));
        for (std::size_t c = 0; c < 3; ++c) {
          const float orig = img.at(c, y, x);
          violations += (sq ? rc.image.at(c, y, x) != 0.0f : rc.image.at(c, y, x) != orig) ? 1 : 0;
          violations += (hull ? fc.image.at(c, y, x) != 0.0f : fc.image.at(c, y, x) != orig) ? 1 : 0;
        }
      }
    }
    cutouts += 2;
    const auto frame = deepfuse::testing::make_frame(pixels, Label::kFake, "v", seed);
    AugmentConfig cfg;
    cfg.out_height = cfg.out_width = 32;
    for (auto mode : {CutoutMode::kNone, CutoutMode::kFaceCutout, CutoutMode::kRandomCutout}) {
      const auto a = apply_pipeline<double>(frame, mode, seed, cfg);
      const auto b = apply_pipeline<double>(frame, mode, seed, cfg);
      pipeline_mismatches += std::memcmp(a.tensor.ptr(), b.tensor.ptr(), a.tensor.numel() * sizeof(double)) != 0;
      pipeline_mismatches += a.plan.to_json() != b.plan.to_json();
    }
  }
  std::ostringstream d;
  d << cutouts << " cut-outs scanned, " << violations << " locality violations; " << pipeline_mismatches
    << " non-identical pipeline reruns out of 300";
  return {violations == 0 && pipeline_mismatches == 0, d.str()};
}

Outcome criterion_frame_policy() {
  Rng rng(31);
  std::size_t videos = 0, errors = 0;
  for (int trial = 0; trial < 200; ++trial) {
    json list = json::array();
    std::vector<std::tuple<std::string, std::size_t, bool, std::string>> expect;
    for (int v = 0; v < 8; ++v) {
      const bool fake = rng.uniform() < 0.5;
      const std::string split = std::array<const char*, 3>{"train", "val", "test"}[rng.index(3)];
      const std::size_t n = rng.index(260);
      const std::string id = "t" + std::to_string(trial) + "_" + std::to_string(v);
      json frames = json::array();
      for (std::size_t i = 0; i < n; ++i) frames.push_back(id + "/" + std::to_string(i) + ".ppm");
      list.push_back({{"video_id", id},
                      {"subset", fake ? "NeuralTextures" : "Pristine"},
                      {"label", fake ? "fake" : "real"},
                      {"split", split},
                      {"frames", frames}});
      expect.emplace_back(id, n, fake, split);
    }
    const auto m = datapipe::parse_manifest(json{{"schema_version", 1}, {"videos", list}}, "/fixture",
                                            {.check_files = false});
    std::map<std::string, std::vector<std::size_t>> got;
    for (auto split : {datapipe::Split::kTrain, datapipe::Split::kVal, datapipe::Split::kTest}) {
      for (const auto& f : datapipe::sample_frames(m, split).frames) got[f.video_id].push_back(f.frame_index);
    }
    for (const auto& [id, n, fake, split] : expect) {
      const std::size_t quota = split == "test" ? 16 : (fake ? 50 : 150);
      const auto& idx = got[id];
      bool ok = idx.size() == std::min(quota, n);
      for (std::size_t i = 0; ok && i < idx.size(); ++i) ok = idx[i] == i;
      errors += ok ? 0 : 1;
      ++videos;
    }
  }
  std::ostringstream d;
  d << videos << " videos over 200 fixture manifests, " << errors << " quota violations";
  return {errors == 0, d.str()};
}

Outcome criterion_aggregation() {
  TempDir dir("acc_agg");
  using datapipe::Split;
  std::vector<deepfuse::testing::VideoSpec> specs;
  for (int v = 0; v < 6; ++v) {
    specs.push_back({"v" + std::to_string(v), v % 2 ? "Pristine" : "FaceSwap", v % 2 ? Label::kReal : Label::kFake,
                     Split::kTest, static_cast<std::size_t>(5 + 4 * v)});
  }
  const auto manifest = datapipe::load_manifest(deepfuse::testing::write_dataset(dir.path(), specs));
  auto cfg = HybridModelConfig::preset("toy");
  HybridModel<double> model(cfg, 3);
  const auto preds = evaluate::evaluate_split(model, manifest, Split::kTest);
  double worst = 0.0;
  for (const auto& p : preds) {
    long double total = 0;
    for (double v : p.frame_probs) total += v;
    worst = std::max(worst, std::abs(p.score - static_cast<double>(total / p.frame_probs.size())));
  }
  Rng rng(77);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> probs(1 + rng.index(16));
    long double total = 0;
    for (auto& v : probs) total += v = rng.uniform();
    worst = std::max(worst, std::abs(evaluate::aggregate_video(probs) - static_cast<double>(total / probs.size())));
  }

  std::size_t disagreements = 0;
  training::TrainConfig tc;
  for (std::size_t t = 0; t < kStopSequences; ++t) {
    std::vector<double> losses(1 + rng.index(15));
    for (auto& v : losses) v = rng.uniform() < 0.3 ? static_cast<double>(rng.index(3)) : rng.uniform(0.0, 2.0);
    tc.patience = 1 + rng.index(5);
    tc.train_acc_stop = rng.uniform(0.9, 1.0);
    const double acc = rng.uniform(0.85, 1.0);
    std::size_t rises = 0;
    for (std::size_t i = 1; i < losses.size(); ++i) rises = losses[i] > losses[i - 1] ? rises + 1 : 0;
    const bool by_loss = rises >= tc.patience;
    const bool want_stop = by_loss || acc >= tc.train_acc_stop;
    const auto want_reason = by_loss ? training::StopReason::kValLossRising
                                     : (want_stop ? training::StopReason::kTrainAccuracy : training::StopReason::kNone);
    const auto got = training::early_stop_check(losses, acc, tc);
    disagreements += (got.stop != want_stop || got.reason != want_reason) ? 1 : 0;
  }
  std::ostringstream d;
  d << preds.size() << " videos + 1000 vectors, max |score - mean| " << worst << "; " << disagreements
    << " early-stop disagreements over " << kStopSequences << " sequences";
  return {preds.size() == specs.size() && worst <= kMeanTolerance && disagreements == 0, d.str()};
}

Outcome criterion_persistence() {
  TempDir dir("acc_ckpt");
  using datapipe::Split;
  const auto manifest = datapipe::load_manifest(deepfuse::testing::write_dataset(
      dir.path(), {{"a", "Deepfakes", Label::kFake, Split::kTest, 6}, {"b", "Pristine", Label::kReal, Split::kTest, 6}}));
  const auto cfg = HybridModelConfig::preset("toy");
  HybridModel<float> model(cfg, 21);
  const auto frames = deepfuse::testing::separable_corpus(8, cfg.input_size, 2);
  training::TrainConfig tc;
  tc.max_epochs = 2;
  tc.batch_size = 4;
  tc.seed = 21;
  training::FitOptions<float> opts;
  opts.mode = augment::CutoutMode::kRandomCutout;
  auto state = training::fit(model, frames, frames, tc, opts);
  training::save_checkpoint(dir / "m.ckpt", model, &state);

  HybridModel<float> reloaded(cfg, 999);
  training::TrainState<float> restored;
  training::load_checkpoint(dir / "m.ckpt", reloaded, &restored);
  std::size_t differing = 0, total = 0;
  const auto& ea = model.parameters().entries();
  const auto& eb = reloaded.parameters().entries();
  for (std::size_t i = 0; i < ea.size(); ++i) {
    ++total;
    differing += std::memcmp(ea[i].tensor.ptr(), eb[i].tensor.ptr(), ea[i].tensor.numel() * sizeof(float)) != 0;
  }
  for (std::size_t i = 0; i < state.velocities.size(); ++i) {
    ++total;
    differing += std::memcmp(state.velocities[i].ptr(), restored.velocities[i].ptr(),
                             state.velocities[i].numel() * sizeof(float)) != 0;
  }
  const auto before = evaluate::evaluate_split(model, manifest, Split::kTest);
  const auto after = evaluate::evaluate_split(reloaded, manifest, Split::kTest);
  bool same_scores = before.size() == after.size();
  for (std::size_t i = 0; same_scores && i < before.size(); ++i) {
    same_scores = before[i].frame_probs == after[i].frame_probs && before[i].score == after[i].score;
  }
  std::ostringstream d;
  d << total << " tensors compared, " << differing << " differ; evaluation scores "
    << (same_scores ? "identical" : "differ");
  return {differing == 0 && same_scores && restored.history == state.history, d.str()};
}

Outcome criterion_reproducibility() {
  const auto cfg = HybridModelConfig::preset("toy");
  const auto train = deepfuse::testing::separable_corpus(12, 48, 5);
  const auto val = deepfuse::testing::separable_corpus(6, 48, 6);
  auto run = [&] {
    training::TrainConfig tc;
    tc.max_epochs = 3;
    tc.batch_size = 4;
    tc.seed = 2024;
    HybridModel<double> model(cfg, tc.seed);
    training::FitOptions<double> opts;
    opts.mode = augment::CutoutMode::kFaceCutout;
    return training::fit(model, train, val, tc, opts).history;
  };
  const auto a = run(), b = run();
  double worst = a.size() == b.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
    for (auto field : {&training::EpochMetrics::train_loss, &training::EpochMetrics::train_acc,
                       &training::EpochMetrics::val_loss, &training::EpochMetrics::val_acc}) {
      worst = std::max(worst, std::abs(a[i].*field - b[i].*field));
    }
  }
  std::ostringstream d;
  d << a.size() << " epochs logged twice, max divergence " << worst;
  return {!a.empty() && worst <= kReproTolerance, d.str()};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", criterion_gradients},
      {"full-size shape chain", criterion_shape_chain},
      {"encoder oracle", criterion_encoder_oracle},
      {"overfit sanity", criterion_overfit},
      {"augmentation gap", criterion_augmentation_gap},
      {"augmentation determinism and locality", criterion_augmentation_locality},
      {"frame policy", criterion_frame_policy},
      {"aggregation exactness", criterion_aggregation},
      {"persistence", criterion_persistence},
      {"reproducibility", criterion_reproducibility},
  };
  // Optional argument: run only the given 1-based criterion.
  const int only = argc > 1 ? std::atoi(argv[1]) : 0;
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only != 0 && static_cast<int>(i) + 1 != only) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "[PASS]" : "[FAIL]") << " criterion " << i + 1 << ": " << criteria[i].first << ": "
              << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
