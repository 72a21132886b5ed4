#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "deepfuse/tensor.hpp"

namespace deepfuse {

struct GradCheckOptions {
  double step = 1e-5;
  /// Check at most this many coordinates per leaf (0 = all). Coordinates are
  /// drawn without replacement from `seed`.
  std::size_t max_coords_per_leaf = 0;
  std::uint64_t seed = 0;
};

/**
 * Compares reverse-mode gradients of a scalar function against central
 * differences. `f` must rebuild its graph from the current contents of
 * `leaves` on every call. Returns the largest
 * |analytic - numeric| / max(1, |analytic|) over the checked coordinates.
 */
template <typename T>
double grad_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> leaves,
                  const GradCheckOptions& options = {}) {
  if (!(options.step > 0.0)) throw ConfigError("grad_check: step must be positive");
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  {
    Tape<T> tape;
    Tensor<T> root;
    {
      typename Tape<T>::Scope scope(tape);
      root = f();
    }
    backward(root, tape);
  }
  std::vector<std::vector<T>> analytic;
  analytic.reserve(leaves.size());
  for (auto& leaf : leaves) {
    auto g = leaf.grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  const T h = static_cast<T>(options.step);
  std::mt19937_64 rng(options.seed);
  double worst = 0.0;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    Tensor<T>& leaf = leaves[l];
    std::vector<std::size_t> coords(leaf.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (options.max_coords_per_leaf != 0 && coords.size() > options.max_coords_per_leaf) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_leaf);
    }
    for (std::size_t i : coords) {
      const T saved = leaf[i];
      leaf[i] = saved + h;
      const double up = static_cast<double>(f().item());
      leaf[i] = saved - h;
      const double down = static_cast<double>(f().item());
      leaf[i] = saved;
      const double numeric = (up - down) / (2.0 * static_cast<double>(h));
      const double a = static_cast<double>(analytic[l][i]);
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

/// Single-leaf convenience form: f receives the leaf.
template <typename T>
double grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> x, double step = 1e-5) {
  GradCheckOptions options;
  options.step = step;
  return grad_check<T>([&]() { return f(x); }, std::vector<Tensor<T>>{x}, options);
}

}  // namespace deepfuse
