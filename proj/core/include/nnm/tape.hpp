#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "nnm/tensor.hpp"

namespace nnm {

/// Dynamic (define-by-run) reverse-mode tape. Primitives append entries in
/// execution order, so the entry list is topologically sorted by
/// construction; backward() walks it once in reverse. A tape serves exactly
/// one forward/backward pair, then must be clear()ed.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  /// Registers a value as a differentiable leaf and returns the bound copy.
  Tensor<T> leaf(const Tensor<T>& value) {
    check_open("leaf");
    entries_.push_back(Entry{});
    grads_.emplace_back();
    return value.bound(this, static_cast<std::int32_t>(entries_.size() - 1));
  }

  /// Records a primitive application. fn receives the gradient w.r.t. the
  /// recorded output and pushes gradients into operand nodes via
  /// accumulate(); it captures whatever forward values it needs.
  Tensor<T> record(const Tensor<T>& value, BackwardFn fn) {
    check_open("record");
    entries_.push_back(Entry{std::move(fn)});
    grads_.emplace_back();
    return value.bound(this, static_cast<std::int32_t>(entries_.size() - 1));
  }

  /// Adds delta into the gradient accumulator of a node.
  void accumulate(std::int32_t node, const Tensor<T>& delta) {
    Tensor<T>& g = grads_.at(static_cast<std::size_t>(node));
    if (!g.defined()) {
      g = delta.clone();
      return;
    }
    if (g.shape() != delta.shape()) throw ShapeError("gradient shape mismatch during accumulation");
    T* gd = g.data();
    const T* dd = delta.data();
    const std::int64_t n = g.numel();
    for (std::int64_t i = 0; i < n; ++i) gd[i] += dd[i];
  }

  /// Reverse sweep from a scalar loss recorded on this tape. Consumes the
  /// tape: a second backward (or further recording) requires clear().
  void backward(const Tensor<T>& loss) {
    check_open("backward");
    if (loss.tape() != this) throw ContractError("loss was not recorded on this tape");
    if (loss.numel() != 1) throw ContractError("backward() requires a scalar loss");
    consumed_ = true;
    grads_[static_cast<std::size_t>(loss.node())] = Tensor<T>::full(loss.shape(), T(1));
    for (std::int64_t i = static_cast<std::int64_t>(entries_.size()) - 1; i >= 0; --i) {
      auto& e = entries_[static_cast<std::size_t>(i)];
      auto& g = grads_[static_cast<std::size_t>(i)];
      if (g.defined() && e.fn) e.fn(*this, g);
    }
  }

  /// Gradient of a bound tensor, or nullptr when nothing flowed into it.
  const Tensor<T>* grad(const Tensor<T>& t) const {
    if (t.tape() != this || t.node() < 0 ||
        static_cast<std::size_t>(t.node()) >= grads_.size())
      return nullptr;
    const Tensor<T>& g = grads_[static_cast<std::size_t>(t.node())];
    return g.defined() ? &g : nullptr;
  }

  Tensor<T> grad_or_zero(const Tensor<T>& t) const {
    const Tensor<T>* g = grad(t);
    return g ? *g : Tensor<T>::zeros(t.shape());
  }

  /// Drops all entries and gradients and starts a new generation.
  void clear() {
    entries_.clear();
    grads_.clear();
    consumed_ = false;
    ++generation_;
  }

  std::size_t size() const { return entries_.size(); }
  std::uint64_t generation() const { return generation_; }
  bool consumed() const { return consumed_; }

 private:
  struct Entry {
    BackwardFn fn;  // empty for leaves
  };

  void check_open(const char* what) const {
    if (consumed_)
      throw ContractError(std::string(what) + " on a consumed tape; call clear() first");
  }

  std::vector<Entry> entries_;
  std::vector<Tensor<T>> grads_;
  bool consumed_ = false;
  std::uint64_t generation_ = 0;
};

}  // namespace nnm
