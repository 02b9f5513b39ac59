#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <type_traits>
#include <vector>

#include "nnm/common.hpp"
#include "nnm/rng.hpp"
#include "nnm/shape.hpp"

namespace nnm {

template <typename T>
class Tape;

/// Dense row-major N-d array over float or double. Storage is shared between
/// copies; tensors are treated as immutable once handed to an operation, the
/// one exception being the optimizer's in-place parameter update between
/// forward passes. A tensor may carry a handle into a Tape, in which case
/// gradients flow to it during backward().
template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_positive_extents(shape_);
    store_ = std::make_shared<std::vector<T>>(static_cast<std::size_t>(numel_of(shape_)), T(0));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    for (auto& v : *t.store_) v = value;
    return t;
  }

  static Tensor scalar(T value) { return full({}, value); }

  static Tensor from(Shape shape, std::vector<T> values) {
    check_positive_extents(shape);
    if (numel_of(shape) != static_cast<std::int64_t>(values.size()))
      throw ShapeError("data length " + std::to_string(values.size()) + " does not fill " +
                       shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.store_ = std::make_shared<std::vector<T>>(std::move(values));
    return t;
  }

  static Tensor from(Shape shape, std::initializer_list<T> values) {
    return from(std::move(shape), std::vector<T>(values));
  }

  /// I.i.d. uniform in [lo, hi).
  static Tensor uniform(Shape shape, Rng& rng, T lo, T hi) {
    Tensor t(std::move(shape));
    for (auto& v : *t.store_) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  /// I.i.d. normal(mean, stddev).
  static Tensor normal(Shape shape, Rng& rng, T mean = T(0), T stddev = T(1)) {
    Tensor t(std::move(shape));
    for (auto& v : *t.store_) v = static_cast<T>(rng.normal(mean, stddev));
    return t;
  }

  bool defined() const { return store_ != nullptr; }
  const Shape& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t numel() const { return store_ ? static_cast<std::int64_t>(store_->size()) : 0; }
  std::int64_t extent(std::int64_t axis) const { return shape_.at(static_cast<std::size_t>(axis)); }

  T* data() { return store_->data(); }
  const T* data() const { return store_->data(); }

  T& operator[](std::int64_t i) { return (*store_)[static_cast<std::size_t>(i)]; }
  T operator[](std::int64_t i) const { return (*store_)[static_cast<std::size_t>(i)]; }

  /// Multi-index access, mostly for tests and small tensors.
  T& at(std::initializer_list<std::int64_t> idx) { return (*store_)[offset_of(idx)]; }
  T at(std::initializer_list<std::int64_t> idx) const { return (*store_)[offset_of(idx)]; }

  T item() const {
    if (numel() != 1) throw ContractError("item() requires a single-element tensor");
    return (*store_)[0];
  }

  /// Deep copy with fresh storage, detached from any tape.
  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.store_ = std::make_shared<std::vector<T>>(*store_);
    return t;
  }

  /// Same storage, no tape handle.
  Tensor detached() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = -1;
    return t;
  }

  /// Same storage and shape reinterpretation; used by reshape.
  Tensor with_shape(Shape s) const {
    if (numel_of(s) != numel())
      throw ShapeError("cannot view " + shape_str(shape_) + " as " + shape_str(s));
    Tensor t = *this;
    t.shape_ = std::move(s);
    t.tape_ = nullptr;
    t.node_ = -1;
    return t;
  }

  bool on_tape() const { return tape_ != nullptr; }
  Tape<T>* tape() const { return tape_; }
  std::int32_t node() const { return node_; }

  /// Copy bound to a tape node; used by Tape when recording.
  Tensor bound(Tape<T>* tape, std::int32_t node) const {
    Tensor t = *this;
    t.tape_ = tape;
    t.node_ = node;
    return t;
  }

  bool all_finite() const {
    for (const T v : *store_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(store_->size());
    for (std::size_t i = 0; i < store_->size(); ++i) out[i] = static_cast<U>((*store_)[i]);
    return Tensor<U>::from(shape_, std::move(out));
  }

 private:
  std::size_t offset_of(std::initializer_list<std::int64_t> idx) const {
    if (idx.size() != shape_.size()) throw ShapeError("index rank mismatch");
    std::size_t off = 0;
    std::size_t d = 0;
    for (auto i : idx) {
      if (i < 0 || i >= shape_[d]) throw ShapeError("index out of range");
      off = off * static_cast<std::size_t>(shape_[d]) + static_cast<std::size_t>(i);
      ++d;
    }
    return off;
  }

  std::shared_ptr<std::vector<T>> store_;
  Shape shape_;
  Tape<T>* tape_ = nullptr;
  std::int32_t node_ = -1;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace nnm
