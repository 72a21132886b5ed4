#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "deepfuse/errors.hpp"

namespace deepfuse {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape);

/**
 * Dense row-major array that can take part in reverse-mode differentiation.
 *
 * A Tensor is a handle: copies share storage, and the autograd tape refers to
 * tensors through these handles. Use clone() for an independent deep copy.
 * The gradient buffer is allocated lazily and accumulates additively until
 * zero_grad() is called.
 */
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : impl_(std::make_shared<Impl>()) {
    for (std::size_t extent : shape) {
      if (extent == 0) throw DimensionError("tensor extents must be positive: " + shape_to_string(shape));
    }
    impl_->data.assign(shape_numel(shape), T{0});
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : Tensor(std::move(shape)) {
    if (values.size() != impl_->data.size()) {
      throw DimensionError("tensor of shape " + shape_to_string(impl_->shape) + " needs " +
                           std::to_string(impl_->data.size()) + " values, got " +
                           std::to_string(values.size()));
    }
    impl_->data = std::move(values);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
  }

  static Tensor scalar(T value) { return full({1}, value); }

  bool defined() const noexcept { return impl_ != nullptr; }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t extent(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T* ptr() { return impl_->data.data(); }
  const T* ptr() const { return impl_->data.data(); }

  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }

  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_to_string(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool value) {
    impl_->requires_grad = value;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }

  /// Gradient buffer, allocated as zeros on first access. Like the storage
  /// itself, the gradient belongs to the shared tensor, not to this handle,
  /// so it is writable through const handles.
  std::span<T> grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T{0});
    return impl_->grad;
  }

  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T{0});
  }

  /// Detached deep copy (no gradient, requires_grad cleared).
  Tensor clone() const {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    return t;
  }

  bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

/**
 * Ordered record of executed differentiable ops (the computation record).
 *
 * Ops append a backward closure when a tape is active on the current thread
 * and at least one input requires a gradient. backward() replays the closures
 * once, newest first, then clears the tape.
 */
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(BackwardFn fn) { entries_.push_back(std::move(fn)); }
  std::size_t size() const noexcept { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Makes a tape the active recorder for the current thread for its lifetime.
  class Scope {
   public:
    explicit Scope(Tape& tape) : previous_(active_) { active_ = &tape; }
    ~Scope() { active_ = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* active() noexcept { return active_; }

  /// Runs every recorded closure once, newest first, then clears the record.
  void sweep() {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    entries_.clear();
  }

 private:
  std::vector<BackwardFn> entries_;
  static thread_local Tape* active_;
};

template <typename T>
thread_local Tape<T>* Tape<T>::active_ = nullptr;

/**
 * Registers `fn` as the backward step producing `out` from `inputs`, if a tape
 * is active and any input requires a gradient. On success `out` is marked as
 * requiring a gradient. The closure should read `out.grad()` and accumulate
 * into the inputs that require gradients.
 */
template <typename T>
void record_op(Tensor<T>& out, std::initializer_list<const Tensor<T>*> inputs, typename Tape<T>::BackwardFn fn) {
  Tape<T>* tape = Tape<T>::active();
  if (tape == nullptr) return;
  bool any = false;
  for (const Tensor<T>* in : inputs) any = any || (in->defined() && in->requires_grad());
  if (!any) return;
  out.set_requires_grad(true);
  tape->record(std::move(fn));
}

/// Seeds d(root)/d(root) = 1 and sweeps the tape in reverse; clears the tape.
template <typename T>
void backward(Tensor<T> root, Tape<T>& tape) {
  if (root.numel() != 1) {
    throw UsageError("backward requires a scalar root, got shape " + shape_to_string(root.shape()));
  }
  root.grad()[0] += T{1};
  tape.sweep();
}

}  // namespace deepfuse
