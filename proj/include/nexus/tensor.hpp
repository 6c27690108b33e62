// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors and the reverse-mode gradient tape.

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstring>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nexus/error.hpp"

#ifndef NEXUS_DEFAULT_CHECK_FINITE
#ifdef NDEBUG
#define NEXUS_DEFAULT_CHECK_FINITE false
#else
#define NEXUS_DEFAULT_CHECK_FINITE true
#endif
#endif

namespace nexus {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

/// Process-wide numeric switches.
struct NumericsConfig {
  /// Check every op output for NaN/Inf. On in debug builds.
  bool check_finite = NEXUS_DEFAULT_CHECK_FINITE;
};

inline NumericsConfig& numerics() {
  static NumericsConfig config;
  return config;
}

namespace detail {

template <std::floating_point T>
struct Storage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

}  // namespace detail

template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : impl_(std::make_shared<detail::Storage<T>>()) {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
    }
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : impl_(std::make_shared<detail::Storage<T>>()) {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + to_string(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), T(0), requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), T(1), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, value, requires_grad);
  }
  static Tensor randn(Shape shape, T stddev, Rng& rng, bool requires_grad = false) {
    Tensor t(std::move(shape), T(0), requires_grad);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : t.impl_->data) v = static_cast<T>(dist(rng) * stddev);
    return t;
  }
  static Tensor uniform(Shape shape, T lo, T hi, Rng& rng, bool requires_grad = false) {
    Tensor t(std::move(shape), T(0), requires_grad);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t.impl_->data) v = static_cast<T>(dist(rng));
    return t;
  }

  bool defined() const noexcept { return static_cast<bool>(impl_); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  /// Direct write access; reserved for parameter updates and initialization.
  std::span<T> mutable_data() { return impl_->data; }
  T at(std::size_t flat) const { return impl_->data.at(flat); }

  T item() const {
    if (numel() != 1) throw ArgumentError("item() on tensor of shape " + to_string(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }
  void clear_grad() { impl_->grad.clear(); }

  /// Deep copy of shape, data and the requires_grad flag. Gradients are not copied.
  Tensor clone() const {
    Tensor t;
    t.impl_ = std::make_shared<detail::Storage<T>>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
  }

  /// Same values, cut from any gradient graph.
  Tensor detach() const {
    Tensor t = clone();
    t.impl_->requires_grad = false;
    return t;
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  /// Bitwise equality of shape and values.
  bool bit_equal(const Tensor& other) const {
    return shape() == other.shape() &&
           std::equal(impl_->data.begin(), impl_->data.end(), other.impl_->data.begin(),
                      [](T a, T b) { return std::memcmp(&a, &b, sizeof(T)) == 0; });
  }

  std::shared_ptr<detail::Storage<T>> storage() const { return impl_; }

 private:
  std::shared_ptr<detail::Storage<T>> impl_;
};

/// Ordered record of differentiable ops. Entries are appended in creation
/// order, so a reverse sweep is a valid topological traversal.
template <std::floating_point T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<detail::Storage<T>> output, std::function<void()> backward) {
    entries_.push_back({std::move(output), std::move(backward)});
  }

  std::size_t size() const noexcept { return entries_.size(); }

  void clear() { entries_.clear(); }

  /// Populates grads of every requires_grad tensor reachable from `loss`.
  /// Grads accumulate into existing buffers. The tape is consumed.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ArgumentError("backward expects a scalar loss, got shape " +
                          (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) {
      throw ArgumentError("backward: loss was not produced under an active tape");
    }
    auto root = loss.storage();
    root->ensure_grad();
    root->grad[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->output->grad.empty()) continue;
      it->backward();
    }
    entries_.clear();
  }

 private:
  struct Entry {
    std::shared_ptr<detail::Storage<T>> output;
    std::function<void()> backward;
  };
  std::vector<Entry> entries_;
};

template <std::floating_point T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

/// Makes `tape` the recording target for the current thread until destroyed.
template <std::floating_point T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(active_tape<T>()) { active_tape<T>() = &tape; }
  ~TapeScope() { active_tape<T>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording (inference) for the current thread.
template <std::floating_point T>
class NoGradScope {
 public:
  NoGradScope() : previous_(active_tape<T>()) { active_tape<T>() = nullptr; }
  ~NoGradScope() { active_tape<T>() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

}  // namespace nexus
