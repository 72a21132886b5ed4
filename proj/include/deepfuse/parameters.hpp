#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "deepfuse/tensor.hpp"

namespace deepfuse {

/**
 * Ordered, named view over a model's tensors. Entries share storage with the
 * module structs that own them, so optimizer updates and checkpoint loads made
 * through the set are visible to the forward pass. Non-trainable entries are
 * buffers such as batch-norm running statistics.
 */
template <typename T>
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;
  };

  void add(std::string name, Tensor<T> tensor, bool trainable = true) {
    for (const auto& e : entries_) {
      if (e.name == name) throw UsageError("duplicate parameter name '" + name + "'");
    }
    if (trainable) tensor.set_requires_grad(true);
    entries_.push_back({std::move(name), std::move(tensor), trainable});
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  Tensor<T>* find(const std::string& name) {
    for (auto& e : entries_) {
      if (e.name == name) return &e.tensor;
    }
    return nullptr;
  }

  std::vector<Tensor<T>> trainable() const {
    std::vector<Tensor<T>> out;
    for (const auto& e : entries_) {
      if (e.trainable) out.push_back(e.tensor);
    }
    return out;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
      if (e.trainable) n += e.tensor.numel();
    }
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  /// Deep copy of every tensor's values, in entry order.
  std::vector<std::vector<T>> snapshot() const {
    std::vector<std::vector<T>> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.emplace_back(e.tensor.data().begin(), e.tensor.data().end());
    return out;
  }

  void restore(const std::vector<std::vector<T>>& values) {
    if (values.size() != entries_.size()) throw UsageError("restore: snapshot does not match parameter set");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      auto dst = entries_[i].tensor.data();
      if (values[i].size() != dst.size()) throw UsageError("restore: size mismatch for " + entries_[i].name);
      std::copy(values[i].begin(), values[i].end(), dst.begin());
    }
  }

 private:
  std::vector<Entry> entries_;
};

}  // namespace deepfuse
