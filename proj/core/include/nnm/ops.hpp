#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "nnm/fastmath.hpp"
#include "nnm/parallel.hpp"
#include "nnm/shape.hpp"
#include "nnm/tape.hpp"
#include "nnm/tensor.hpp"

namespace nnm {

namespace detail {

template <typename T>
void check_strict_input(const Tensor<T>& t, const char* op) {
  if (strict_numerics() && !t.all_finite())
    throw NumericError(std::string("non-finite input to ") + op);
}

/// All on-tape operands must share one tape.
template <typename T>
Tape<T>* common_tape(std::initializer_list<const Tensor<T>*> ts) {
  Tape<T>* tape = nullptr;
  for (const Tensor<T>* t : ts) {
    if (!t || !t->on_tape()) continue;
    if (tape && tape != t->tape()) throw ContractError("operands recorded on different tapes");
    tape = t->tape();
  }
  return tape;
}

// Reductions fold through a fixed-width lane array: the loop body is lane-wise
// independent, so it vectorizes without reassociation and the fold order is a
// fixed function of n alone.
template <typename T>
inline constexpr std::int64_t kSumLanes = sizeof(T) == 4 ? 16 : 8;

template <typename T>
T lane_sum(const T* p, std::int64_t n) {
  constexpr std::int64_t L = kSumLanes<T>;
  T lanes[L] = {};
  std::int64_t i = 0;
  for (; i + L <= n; i += L)
    for (std::int64_t v = 0; v < L; ++v) lanes[v] += p[i + v];
  T tail = T(0);
  for (; i < n; ++i) tail += p[i];
  T acc = tail;
  for (std::int64_t v = 0; v < L; ++v) acc += lanes[v];
  return acc;
}

template <typename T>
T lane_dot(const T* a, const T* b, std::int64_t n) {
  constexpr std::int64_t L = kSumLanes<T>;
  T lanes[L] = {};
  std::int64_t i = 0;
  for (; i + L <= n; i += L)
    for (std::int64_t v = 0; v < L; ++v) lanes[v] += a[i + v] * b[i + v];
  T tail = T(0);
  for (; i < n; ++i) tail += a[i] * b[i];
  T acc = tail;
  for (std::int64_t v = 0; v < L; ++v) acc += lanes[v];
  return acc;
}

/// Deterministic full reduction: fixed-size block partials folded in block
/// order, so the result is independent of the thread count.
template <typename T>
T block_sum(const T* p, std::int64_t n) {
  constexpr std::int64_t kBlock = 4096;
  const std::int64_t nblocks = (n + kBlock - 1) / kBlock;
  if (nblocks <= 1) return lane_sum(p, n);
  std::vector<T> partial(static_cast<std::size_t>(nblocks));
  parallel_for(nblocks, [&](std::int64_t b) {
    const std::int64_t lo = b * kBlock;
    partial[static_cast<std::size_t>(b)] = lane_sum(p + lo, std::min(n - lo, kBlock));
  });
  T acc = T(0);
  for (auto v : partial) acc += v;
  return acc;
}

/// Sums g down to target_shape by reducing broadcast axes (the adjoint of
/// broadcasting g up from target_shape).
template <typename T>
Tensor<T> reduce_to_shape(const Tensor<T>& g, const Shape& target) {
  if (g.shape() == target) return g;
  const std::size_t rank = g.shape().size();
  Shape tpad(rank, 1);
  for (std::size_t i = 0; i < target.size(); ++i)
    tpad[rank - target.size() + i] = target[i];
  Tensor<T> out = Tensor<T>::zeros(tpad.empty() ? Shape{} : tpad);
  const Shape gstr = strides_of(g.shape());
  const Shape ostr = strides_of(tpad);
  const T* gp = g.data();
  T* op = out.data();
  const std::int64_t n = g.numel();
  // Sequential scatter-accumulate in linear order: deterministic.
  for (std::int64_t lin = 0; lin < n; ++lin) {
    std::int64_t rem = lin, off = 0;
    for (std::size_t d = 0; d < rank; ++d) {
      const std::int64_t id = rem / gstr[d];
      rem -= id * gstr[d];
      off += (tpad[d] == 1 ? 0 : id) * ostr[d];
    }
    op[off] += gp[lin];
  }
  return out.with_shape(target);
}

struct BcPlan {
  Shape out;
  Shape astr, bstr;  // zero stride on broadcast axes
};

template <typename T>
BcPlan make_bc_plan(const Tensor<T>& a, const Tensor<T>& b) {
  BcPlan plan;
  plan.out = broadcast_shapes(a.shape(), b.shape());
  const std::size_t rank = plan.out.size();
  Shape as(rank, 1), bs(rank, 1);
  for (std::size_t i = 0; i < a.shape().size(); ++i) as[rank - a.shape().size() + i] = a.shape()[i];
  for (std::size_t i = 0; i < b.shape().size(); ++i) bs[rank - b.shape().size() + i] = b.shape()[i];
  Shape ast = strides_of(as), bst = strides_of(bs);
  plan.astr.resize(rank);
  plan.bstr.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    plan.astr[i] = as[i] == 1 ? 0 : ast[i];
    plan.bstr[i] = bs[i] == 1 ? 0 : bst[i];
  }
  return plan;
}

/// Elementwise binary op over broadcast shapes. fn(a_val, b_val) -> out_val.
template <typename T, typename F>
Tensor<T> bc_map(const Tensor<T>& a, const Tensor<T>& b, F&& fn) {
  if (a.shape() == b.shape()) {  // fast path
    Tensor<T> out(a.shape());
    const T* ap = a.data();
    const T* bp = b.data();
    T* op = out.data();
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) op[i] = fn(ap[i], bp[i]);
    return out;
  }
  BcPlan plan = make_bc_plan(a, b);
  Tensor<T> out(plan.out);
  const std::size_t rank = plan.out.size();
  const T* ap = a.data();
  const T* bp = b.data();
  T* op = out.data();
  if (rank == 0) {
    op[0] = fn(ap[0], bp[0]);
    return out;
  }
  const std::int64_t inner = plan.out[rank - 1];
  const std::int64_t outer = out.numel() / inner;
  const std::int64_t ia = plan.astr[rank - 1], ib = plan.bstr[rank - 1];
  for (std::int64_t o = 0; o < outer; ++o) {
    std::int64_t rem = o, aoff = 0, boff = 0;
    for (std::size_t d = 0; d + 1 < rank; ++d) {
      std::int64_t extent_below = 1;
      for (std::size_t e = d + 1; e + 1 < rank; ++e) extent_below *= plan.out[e];
      const std::int64_t id = rem / extent_below;
      rem -= id * extent_below;
      aoff += id * plan.astr[d];
      boff += id * plan.bstr[d];
    }
    T* orow = op + o * inner;
    for (std::int64_t i = 0; i < inner; ++i)
      orow[i] = fn(ap[aoff + i * ia], bp[boff + i * ib]);
  }
  return out;
}

template <typename T, typename F>
Tensor<T> unary_map(const Tensor<T>& x, F&& fn) {
  Tensor<T> out(x.shape().empty() ? Shape{} : x.shape());
  const T* xp = x.data();
  T* op = out.data();
  const std::int64_t n = x.numel();
  parallel_for((n + 65535) / 65536, [&](std::int64_t blk) {
    const std::int64_t lo = blk * 65536;
    const std::int64_t hi = std::min(n, lo + 65536);
    for (std::int64_t i = lo; i < hi; ++i) op[i] = fn(xp[i]);
  });
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_strict_input(a, "add");
  detail::check_strict_input(b, "add");
  Tensor<T> out = detail::bc_map(a, b, [](T x, T y) { return x + y; });
  Tape<T>* tape = detail::common_tape<T>({&a, &b});
  if (!tape) return out;
  const auto ash = a.shape();
  const auto bsh = b.shape();
  const std::int32_t an = a.node(), bn = b.node();
  const bool at = a.on_tape(), bt = b.on_tape();
  return tape->record(out, [=](Tape<T>& tp, const Tensor<T>& g) {
    if (at) tp.accumulate(an, detail::reduce_to_shape(g, ash));
    if (bt) tp.accumulate(bn, detail::reduce_to_shape(g, bsh));
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_strict_input(a, "sub");
  detail::check_strict_input(b, "sub");
  Tensor<T> out = detail::bc_map(a, b, [](T x, T y) { return x - y; });
  Tape<T>* tape = detail::common_tape<T>({&a, &b});
  if (!tape) return out;
  const auto ash = a.shape();
  const auto bsh = b.shape();
  const std::int32_t an = a.node(), bn = b.node();
  const bool at = a.on_tape(), bt = b.on_tape();
  return tape->record(out, [=](Tape<T>& tp, const Tensor<T>& g) {
    if (at) tp.accumulate(an, detail::reduce_to_shape(g, ash));
    if (bt) {
      Tensor<T> ng = detail::unary_map(g, [](T v) { return -v; });
      tp.accumulate(bn, detail::reduce_to_shape(ng, bsh));
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_strict_input(a, "mul");
  detail::check_strict_input(b, "mul");
  Tensor<T> out = detail::bc_map(a, b, [](T x, T y) { return x * y; });
  Tape<T>* tape = detail::common_tape<T>({&a, &b});
  if (!tape) return out;
  const Tensor<T> av = a.detached(), bv = b.detached();
  const std::int32_t an = a.node(), bn = b.node();
  const bool at = a.on_tape(), bt = b.on_tape();
  return tape->record(out, [=](Tape<T>& tp, const Tensor<T>& g) {
    if (at) {
      Tensor<T> ga = detail::bc_map(g, bv, [](T x, T y) { return x * y; });
      tp.accumulate(an, detail::reduce_to_shape(ga, av.shape()));
    }
    if (bt) {
      Tensor<T> gb = detail::bc_map(g, av, [](T x, T y) { return x * y; });
      tp.accumulate(bn, detail::reduce_to_shape(gb, bv.shape()));
    }
  });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_strict_input(a, "div");
  detail::check_strict_input(b, "div");
  Tensor<T> out = detail::bc_map(a, b, [](T x, T y) { return x / y; });
  Tape<T>* tape = detail::common_tape<T>({&a, &b});
  if (!tape) return out;
  const Tensor<T> av = a.detached(), bv = b.detached();
  const std::int32_t an = a.node(), bn = b.node();
  const bool at = a.on_tape(), bt = b.on_tape();
  return tape->record(out, [=](Tape<T>& tp, const Tensor<T>& g) {
    if (at) {
      Tensor<T> ga = detail::bc_map(g, bv, [](T x, T y) { return x / y; });
      tp.accumulate(an, detail::reduce_to_shape(ga, av.shape()));
    }
    if (bt) {
      Tensor<T> q = detail::bc_map(av, bv, [](T x, T y) { return -x / (y * y); });
      Tensor<T> gb = detail::bc_map(g, q, [](T x, T y) { return x * y; });
      tp.accumulate(bn, detail::reduce_to_shape(gb, bv.shape()));
    }
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  detail::check_strict_input(a, "add_scalar");
  Tensor<T> out = detail::unary_map(a, [s](T x) { return x + s; });
  if (!a.on_tape()) return out;
  const std::int32_t an = a.node();
  return a.tape()->record(out, [an](Tape<T>& tp, const Tensor<T>& g) { tp.accumulate(an, g); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  detail::check_strict_input(a, "mul_scalar");
  Tensor<T> out = detail::unary_map(a, [s](T x) { return x * s; });
  if (!a.on_tape()) return out;
  const std::int32_t an = a.node();
  return a.tape()->record(out, [an, s](Tape<T>& tp, const Tensor<T>& g) {
    tp.accumulate(an, detail::unary_map(g, [s](T v) { return v * s; }));
  });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return mul_scalar(a, T(-1));
}

// ---------------------------------------------------------------------------
// elementwise unary
// ---------------------------------------------------------------------------

namespace detail {

/// Records a unary op whose backward is g * dfdx(x, y).
template <typename T, typename FwdF, typename GradF>
Tensor<T> unary_op(const Tensor<T>& x, const char* name, FwdF&& fwd, GradF&& dfdx) {
  check_strict_input(x, name);
  Tensor<T> out = unary_map(x, fwd);
  if (!x.on_tape()) return out;
  const Tensor<T> xv = x.detached();
  const Tensor<T> yv = out;
  const std::int32_t xn = x.node();
  return x.tape()->record(out, [=](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T> gx(xv.shape().empty() ? Shape{} : xv.shape());
    const T* xp = xv.data();
    const T* yp = yv.data();
    const T* gp = g.data();
    T* op = gx.data();
    const std::int64_t n = xv.numel();
    for (std::int64_t i = 0; i < n; ++i) op[i] = gp[i] * dfdx(xp[i], yp[i]);
    tp.accumulate(xn, gx);
  });
}

}  // namespace detail

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary_op(
      x, "exp", [](T v) { return vexp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary_op(
      x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary_op(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary_op(
      x, "sigmoid", [](T v) { return sigmoid_val(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary_op(
      x, "softplus", [](T v) { return softplus_val(v); }, [](T v, T) { return sigmoid_val(v); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::unary_op(
      x, "silu", [](T v) { return silu_val(v); },
      [](T v, T) {
        const T s = sigmoid_val(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

namespace detail {

inline Shape reduced_shape(const Shape& in, const std::vector<std::int64_t>& axes, bool keepdims) {
  std::vector<bool> red(in.size(), false);
  for (auto a : axes) {
    if (a < 0 || a >= static_cast<std::int64_t>(in.size()))
      throw ShapeError("reduction axis out of range for " + shape_str(in));
    red[static_cast<std::size_t>(a)] = true;
  }
  Shape out;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (red[i]) {
      if (keepdims) out.push_back(1);
    } else {
      out.push_back(in[i]);
    }
  }
  return out;
}

/// Axis-set reduction. Deterministic: every output element is reduced
/// sequentially in input linear order; parallelism is across outputs.
template <typename T>
Tensor<T> axis_sum(const Tensor<T>& x, const std::vector<std::int64_t>& axes, bool keepdims) {
  const Shape& in = x.shape();
  std::vector<bool> red(in.size(), false);
  for (auto a : axes) red[static_cast<std::size_t>(a)] = true;
  const Shape out_shape = reduced_shape(in, axes, keepdims);
  Tensor<T> out = Tensor<T>::zeros(out_shape.empty() ? Shape{} : out_shape);

  // Split axes into kept and reduced; iterate kept (parallel) x reduced (seq).
  std::vector<std::int64_t> kept_ext, kept_str, red_ext, red_str;
  const Shape str = strides_of(in);
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (red[i]) {
      red_ext.push_back(in[i]);
      red_str.push_back(str[i]);
    } else {
      kept_ext.push_back(in[i]);
      kept_str.push_back(str[i]);
    }
  }
  const std::int64_t nkept = out.numel();
  const std::int64_t nred = x.numel() / nkept;
  const T* xp = x.data();
  T* op = out.data();
  parallel_for(nkept, [&](std::int64_t k) {
    std::int64_t rem = k, base = 0;
    for (std::size_t d = 0, sub = static_cast<std::size_t>(nkept); d < kept_ext.size(); ++d) {
      sub /= static_cast<std::size_t>(kept_ext[d]);
      const std::int64_t id = rem / static_cast<std::int64_t>(sub);
      rem -= id * static_cast<std::int64_t>(sub);
      base += id * kept_str[d];
    }
    T acc = T(0);
    for (std::int64_t r = 0; r < nred; ++r) {
      std::int64_t rr = r, off = base;
      for (std::size_t d = 0, sub = static_cast<std::size_t>(nred); d < red_ext.size(); ++d) {
        sub /= static_cast<std::size_t>(red_ext[d]);
        const std::int64_t id = rr / static_cast<std::int64_t>(sub);
        rr -= id * static_cast<std::int64_t>(sub);
        off += id * red_str[d];
      }
      acc += xp[off];
    }
    op[k] = acc;
  });
  return out;
}

/// Broadcasts g (shaped like the reduction output) back over the reduced axes.
template <typename T>
Tensor<T> unreduce(const Tensor<T>& g, const Shape& in_shape,
                   const std::vector<std::int64_t>& axes, bool keepdims, T scale) {
  std::vector<bool> red(in_shape.size(), false);
  for (auto a : axes) red[static_cast<std::size_t>(a)] = true;
  Tensor<T> out(in_shape);
  const Shape istr = strides_of(in_shape);
  Shape gshape_full(in_shape.size());
  for (std::size_t i = 0; i < in_shape.size(); ++i) gshape_full[i] = red[i] ? 1 : in_shape[i];
  const Shape gstr_full = strides_of(gshape_full);
  const T* gp = g.data();
  T* op = out.data();
  const std::int64_t n = out.numel();
  (void)keepdims;
  parallel_for((n + 65535) / 65536, [&](std::int64_t blk) {
    const std::int64_t lo = blk * 65536;
    const std::int64_t hi = std::min(n, lo + 65536);
    for (std::int64_t lin = lo; lin < hi; ++lin) {
      std::int64_t rem = lin, goff = 0;
      for (std::size_t d = 0; d < in_shape.size(); ++d) {
        const std::int64_t id = rem / istr[d];
        rem -= id * istr[d];
        goff += (red[d] ? 0 : id) * gstr_full[d];
      }
      op[lin] = gp[goff] * scale;
    }
  });
  return out;
}

}  // namespace detail

/// Sum over all elements -> scalar.
template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  detail::check_strict_input(x, "sum");
  Tensor<T> out = Tensor<T>::scalar(detail::block_sum(x.data(), x.numel()));
  if (!x.on_tape()) return out;
  const Shape xs = x.shape();
  const std::int32_t xn = x.node();
  return x.tape()->record(out, [xs, xn](Tape<T>& tp, const Tensor<T>& g) {
    tp.accumulate(xn, Tensor<T>::full(xs, g[0]));
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, const std::vector<std::int64_t>& axes, bool keepdims = false) {
  detail::check_strict_input(x, "sum");
  Tensor<T> out = detail::axis_sum(x, axes, keepdims);
  if (!x.on_tape()) return out;
  const Shape xs = x.shape();
  const std::int32_t xn = x.node();
  return x.tape()->record(out, [xs, xn, axes, keepdims](Tape<T>& tp, const Tensor<T>& g) {
    tp.accumulate(xn, detail::unreduce(g, xs, axes, keepdims, T(1)));
  });
}

/// Mean over all elements -> scalar.
template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  detail::check_strict_input(x, "mean");
  const T inv = T(1) / static_cast<T>(x.numel());
  Tensor<T> out = Tensor<T>::scalar(detail::block_sum(x.data(), x.numel()) * inv);
  if (!x.on_tape()) return out;
  const Shape xs = x.shape();
  const std::int32_t xn = x.node();
  return x.tape()->record(out, [xs, xn, inv](Tape<T>& tp, const Tensor<T>& g) {
    tp.accumulate(xn, Tensor<T>::full(xs, g[0] * inv));
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, const std::vector<std::int64_t>& axes, bool keepdims = false) {
  detail::check_strict_input(x, "mean");
  Tensor<T> s = detail::axis_sum(x, axes, keepdims);
  std::int64_t count = x.numel() / (s.numel() > 0 ? s.numel() : 1);
  const T inv = T(1) / static_cast<T>(count);
  Tensor<T> out = detail::unary_map(s, [inv](T v) { return v * inv; });
  if (!x.on_tape()) return out;
  const Shape xs = x.shape();
  const std::int32_t xn = x.node();
  return x.tape()->record(out, [xs, xn, axes, keepdims, inv](Tape<T>& tp, const Tensor<T>& g) {
    tp.accumulate(xn, detail::unreduce(g, xs, axes, keepdims, inv));
  });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  // One extent may be -1 (inferred).
  std::int64_t known = 1, infer_at = -1;
  for (std::size_t i = 0; i < new_shape.size(); ++i) {
    if (new_shape[i] == -1) {
      if (infer_at >= 0) throw ShapeError("at most one -1 extent in reshape");
      infer_at = static_cast<std::int64_t>(i);
    } else {
      known *= new_shape[i];
    }
  }
  if (infer_at >= 0) {
    if (known == 0 || x.numel() % known != 0)
      throw ShapeError("cannot infer extent reshaping " + shape_str(x.shape()));
    new_shape[static_cast<std::size_t>(infer_at)] = x.numel() / known;
  }
  Tensor<T> out = x.with_shape(new_shape);
  if (!x.on_tape()) return out;
  const Shape xs = x.shape();
  const std::int32_t xn = x.node();
  return x.tape()->record(out, [xs, xn](Tape<T>& tp, const Tensor<T>& g) {
    tp.accumulate(xn, g.with_shape(xs));
  });
}

namespace detail {
template <typename T>
Tensor<T> permute_data(const Tensor<T>& x, const std::vector<std::int64_t>& perm) {
  const Shape& in = x.shape();
  Shape out_shape(in.size());
  for (std::size_t i = 0; i < in.size(); ++i)
    out_shape[i] = in[static_cast<std::size_t>(perm[i])];
  Tensor<T> out(out_shape.empty() ? Shape{} : out_shape);
  const Shape istr = strides_of(in);
  const Shape ostr = strides_of(out_shape);
  const T* xp = x.data();
  T* op = out.data();
  const std::int64_t n = x.numel();
  parallel_for((n + 65535) / 65536, [&](std::int64_t blk) {
    const std::int64_t lo = blk * 65536;
    const std::int64_t hi = std::min(n, lo + 65536);
    for (std::int64_t lin = lo; lin < hi; ++lin) {
      std::int64_t rem = lin, ioff = 0;
      for (std::size_t d = 0; d < out_shape.size(); ++d) {
        const std::int64_t id = rem / ostr[d];
        rem -= id * ostr[d];
        ioff += id * istr[static_cast<std::size_t>(perm[d])];
      }
      op[lin] = xp[ioff];
    }
  });
  return out;
}
}  // namespace detail

/// Axis permutation (materialized).
template <typename T>
Tensor<T> transpose(const Tensor<T>& x, const std::vector<std::int64_t>& perm) {
  if (perm.size() != x.shape().size()) throw ShapeError("transpose permutation rank mismatch");
  std::vector<bool> seen(perm.size(), false);
  for (auto p : perm) {
    if (p < 0 || p >= static_cast<std::int64_t>(perm.size()) || seen[static_cast<std::size_t>(p)])
      throw ShapeError("invalid transpose permutation");
    seen[static_cast<std::size_t>(p)] = true;
  }
  detail::check_strict_input(x, "transpose");
  Tensor<T> out = detail::permute_data(x, perm);
  if (!x.on_tape()) return out;
  std::vector<std::int64_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = i;
  const std::int32_t xn = x.node();
  return x.tape()->record(out, [inv, xn](Tape<T>& tp, const Tensor<T>& g) {
    tp.accumulate(xn, detail::permute_data(g, inv));
  });
}

/// Matrix transpose of a rank-2 tensor.
template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("transpose() without permutation requires rank 2");
  return transpose(x, {1, 0});
}

/// Half-open [start, stop) region copy per axis.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, const std::vector<std::int64_t>& starts,
                const std::vector<std::int64_t>& stops) {
  const Shape& in = x.shape();
  if (starts.size() != in.size() || stops.size() != in.size())
    throw ShapeError("slice bounds rank mismatch");
  Shape out_shape(in.size());
  for (std::size_t d = 0; d < in.size(); ++d) {
    if (starts[d] < 0 || stops[d] > in[d] || starts[d] >= stops[d])
      throw ShapeError("invalid slice [" + std::to_string(starts[d]) + "," +
                       std::to_string(stops[d]) + ") on axis " + std::to_string(d) + " of " +
                       shape_str(in));
    out_shape[d] = stops[d] - starts[d];
  }
  detail::check_strict_input(x, "slice");
  Tensor<T> out(out_shape.empty() ? Shape{} : out_shape);
  const Shape istr = strides_of(in);
  const Shape ostr = strides_of(out_shape);
  const T* xp = x.data();
  T* op = out.data();
  const std::int64_t n = out.numel();
  const std::size_t rank = in.size();
  const std::int64_t inner = rank ? out_shape[rank - 1] : 1;
  const std::int64_t outer = n / inner;
  parallel_for(outer, [&](std::int64_t o) {
    std::int64_t rem = o, ioff = 0;
    for (std::size_t d = 0; d + 1 < rank; ++d) {
      const std::int64_t sub = ostr[d] / inner;
      const std::int64_t id = rem / sub;
      rem -= id * sub;
      ioff += (id + starts[d]) * istr[d];
    }
    if (rank) ioff += starts[rank - 1] * istr[rank - 1];
    std::memcpy(op + o * inner, xp + ioff, static_cast<std::size_t>(inner) * sizeof(T));
  });
  if (!x.on_tape()) return out;
  const Shape xs = in;
  const std::int32_t xn = x.node();
  return x.tape()->record(out, [xs, xn, starts](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T> gx = Tensor<T>::zeros(xs);
    const Shape istr2 = strides_of(xs);
    const Shape gstr = strides_of(g.shape());
    const std::size_t rank2 = xs.size();
    const std::int64_t inner2 = rank2 ? g.shape()[rank2 - 1] : 1;
    const std::int64_t outer2 = g.numel() / inner2;
    const T* gp = g.data();
    T* xpd = gx.data();
    for (std::int64_t o = 0; o < outer2; ++o) {
      std::int64_t rem = o, ioff = 0;
      for (std::size_t d = 0; d + 1 < rank2; ++d) {
        const std::int64_t sub = gstr[d] / inner2;
        const std::int64_t id = rem / sub;
        rem -= id * sub;
        ioff += (id + starts[d]) * istr2[d];
      }
      if (rank2) ioff += starts[rank2 - 1] * istr2[rank2 - 1];
      std::memcpy(xpd + ioff, gp + o * inner2, static_cast<std::size_t>(inner2) * sizeof(T));
    }
    tp.accumulate(xn, gx);
  });
}

/// Concatenation along an existing axis.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::int64_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  if (axis < 0 || axis >= static_cast<std::int64_t>(first.size()))
    throw ShapeError("concat axis out of range");
  Shape out_shape = first;
  std::int64_t total = 0;
  for (const auto& p : parts) {
    detail::check_strict_input(p, "concat");
    if (p.shape().size() != first.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t d = 0; d < first.size(); ++d)
      if (d != static_cast<std::size_t>(axis) && p.shape()[d] != first[d])
        throw ShapeError("concat extent mismatch on axis " + std::to_string(d) + ": " +
                         shape_str(p.shape()) + " vs " + shape_str(first));
    total += p.shape()[static_cast<std::size_t>(axis)];
  }
  out_shape[static_cast<std::size_t>(axis)] = total;
  Tensor<T> out(out_shape);

  // outer x (axis extent) x inner layout
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t d = 0; d < axis; ++d) outer *= first[static_cast<std::size_t>(d)];
  for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < first.size(); ++d)
    inner *= first[d];
  T* op = out.data();
  std::int64_t off_axis = 0;
  for (const auto& p : parts) {
    const std::int64_t pa = p.shape()[static_cast<std::size_t>(axis)];
    const T* pp = p.data();
    parallel_for(outer, [&](std::int64_t o) {
      std::memcpy(op + (o * total + off_axis) * inner, pp + o * pa * inner,
                  static_cast<std::size_t>(pa * inner) * sizeof(T));
    });
    off_axis += pa;
  }

  Tape<T>* tape = nullptr;
  for (const auto& p : parts)
    if (p.on_tape()) {
      if (tape && tape != p.tape()) throw ContractError("operands recorded on different tapes");
      tape = p.tape();
    }
  if (!tape) return out;
  struct Piece {
    std::int32_t node;
    std::int64_t extent;
    bool on_tape;
  };
  std::vector<Piece> pieces;
  for (const auto& p : parts)
    pieces.push_back({p.node(), p.shape()[static_cast<std::size_t>(axis)], p.on_tape()});
  return tape->record(out, [pieces, axis, outer, inner, total](Tape<T>& tp, const Tensor<T>& g) {
    const T* gp = g.data();
    std::int64_t off = 0;
    for (const auto& piece : pieces) {
      if (piece.on_tape) {
        Shape ps = g.shape();
        ps[static_cast<std::size_t>(axis)] = piece.extent;
        Tensor<T> gpiece(ps);
        T* dst = gpiece.data();
        for (std::int64_t o = 0; o < outer; ++o)
          std::memcpy(dst + o * piece.extent * inner, gp + (o * total + off) * inner,
                      static_cast<std::size_t>(piece.extent * inner) * sizeof(T));
        tp.accumulate(piece.node, gpiece);
      }
      off += piece.extent;
    }
  });
}

template <typename T>
Tensor<T> concat(std::initializer_list<Tensor<T>> parts, std::int64_t axis) {
  return concat(std::vector<Tensor<T>>(parts), axis);
}

/// Zero padding, lo/hi amounts per axis.
template <typename T>
Tensor<T> pad(const Tensor<T>& x, const std::vector<std::int64_t>& lo,
              const std::vector<std::int64_t>& hi) {
  const Shape& in = x.shape();
  if (lo.size() != in.size() || hi.size() != in.size()) throw ShapeError("pad rank mismatch");
  Shape out_shape(in.size());
  for (std::size_t d = 0; d < in.size(); ++d) {
    if (lo[d] < 0 || hi[d] < 0) throw ShapeError("negative padding");
    out_shape[d] = in[d] + lo[d] + hi[d];
  }
  detail::check_strict_input(x, "pad");
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  // Copy interior region via the slice-backward trick in reverse.
  const Shape ostr = strides_of(out_shape);
  const std::size_t rank = in.size();
  const std::int64_t inner = rank ? in[rank - 1] : 1;
  const std::int64_t outer = x.numel() / inner;
  const T* xp = x.data();
  T* op = out.data();
  const Shape istr = strides_of(in);
  parallel_for(outer, [&](std::int64_t o) {
    std::int64_t rem = o, ooff = 0;
    for (std::size_t d = 0; d + 1 < rank; ++d) {
      const std::int64_t sub = istr[d] / inner;
      const std::int64_t id = rem / sub;
      rem -= id * sub;
      ooff += (id + lo[d]) * ostr[d];
    }
    if (rank) ooff += lo[rank - 1] * ostr[rank - 1];
    std::memcpy(op + ooff, xp + o * inner, static_cast<std::size_t>(inner) * sizeof(T));
  });
  if (!x.on_tape()) return out;
  const std::int32_t xn = x.node();
  const Shape xs = in;
  return x.tape()->record(out, [xs, xn, lo](Tape<T>& tp, const Tensor<T>& g) {
    std::vector<std::int64_t> starts(xs.size()), stops(xs.size());
    for (std::size_t d = 0; d < xs.size(); ++d) {
      starts[d] = lo[d];
      stops[d] = lo[d] + xs[d];
    }
    tp.accumulate(xn, slice(g.detached(), starts, stops));
  });
}

/// Materializes x broadcast up to target shape.
template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& target) {
  detail::check_strict_input(x, "broadcast_to");
  const Shape check = broadcast_shapes(x.shape(), target);
  if (check != target)
    throw ShapeError("cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(target));
  Tensor<T> helper = Tensor<T>::zeros(target);
  Tensor<T> out = detail::bc_map(x.detached(), helper, [](T a, T) { return a; });
  if (!x.on_tape()) return out;
  const Shape xs = x.shape();
  const std::int32_t xn = x.node();
  return x.tape()->record(out, [xs, xn](Tape<T>& tp, const Tensor<T>& g) {
    tp.accumulate(xn, detail::reduce_to_shape(g, xs));
  });
}

/// Reverses one axis.
template <typename T>
Tensor<T> flip(const Tensor<T>& x, std::int64_t axis) {
  const Shape& in = x.shape();
  if (axis < 0 || axis >= static_cast<std::int64_t>(in.size()))
    throw ShapeError("flip axis out of range");
  detail::check_strict_input(x, "flip");
  Tensor<T> out(in);
  std::int64_t outer = 1, inner = 1;
  const std::int64_t ax = in[static_cast<std::size_t>(axis)];
  for (std::int64_t d = 0; d < axis; ++d) outer *= in[static_cast<std::size_t>(d)];
  for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < in.size(); ++d) inner *= in[d];
  const T* xp = x.data();
  T* op = out.data();
  parallel_for(outer, [&](std::int64_t o) {
    for (std::int64_t a = 0; a < ax; ++a)
      std::memcpy(op + (o * ax + (ax - 1 - a)) * inner, xp + (o * ax + a) * inner,
                  static_cast<std::size_t>(inner) * sizeof(T));
  });
  if (!x.on_tape()) return out;
  const std::int32_t xn = x.node();
  return x.tape()->record(out, [xn, axis](Tape<T>& tp, const Tensor<T>& g) {
    tp.accumulate(xn, flip(g.detached(), axis));
  });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace detail {

/// C[M,N] = A[M,K] * B[K,N], row-major, accumulate into zeroed C.
/// i-k-j ordering so the inner loop runs contiguously over j and the k loop
/// stays sequential per row (deterministic for any parallel split over i).
template <typename T>
void gemm_nn(std::int64_t M, std::int64_t N, std::int64_t K, const T* A, const T* B, T* C) {
  parallel_for(M, [&](std::int64_t i) {
    T* crow = C + i * N;
    std::memset(crow, 0, static_cast<std::size_t>(N) * sizeof(T));
    const T* arow = A + i * K;
    for (std::int64_t k = 0; k < K; ++k) {
      const T a = arow[k];
      const T* brow = B + k * N;
      for (std::int64_t j = 0; j < N; ++j) crow[j] += a * brow[j];
    }
  });
}

template <typename T>
Tensor<T> transpose2d_data(const Tensor<T>& x) {
  const std::int64_t r = x.shape()[0], c = x.shape()[1];
  Tensor<T> out(Shape{c, r});
  const T* xp = x.data();
  T* op = out.data();
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) op[j * r + i] = xp[i * c + j];
  return out;
}

}  // namespace detail

/// 2-D matrix product [M,K] x [K,N] -> [M,N].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul requires rank-2 operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  if (a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  detail::check_strict_input(a, "matmul");
  detail::check_strict_input(b, "matmul");
  const std::int64_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
  Tensor<T> out(Shape{M, N});
  detail::gemm_nn(M, N, K, a.data(), b.data(), out.data());
  Tape<T>* tape = detail::common_tape<T>({&a, &b});
  if (!tape) return out;
  const Tensor<T> av = a.detached(), bv = b.detached();
  const std::int32_t an = a.node(), bn = b.node();
  const bool at = a.on_tape(), bt = b.on_tape();
  return tape->record(out, [=](Tape<T>& tp, const Tensor<T>& g) {
    if (at) {  // gA = g * B^T
      Tensor<T> btr = detail::transpose2d_data(bv);
      Tensor<T> ga(Shape{M, K});
      detail::gemm_nn(M, K, N, g.data(), btr.data(), ga.data());
      tp.accumulate(an, ga);
    }
    if (bt) {  // gB = A^T * g
      Tensor<T> atr = detail::transpose2d_data(av);
      Tensor<T> gb(Shape{K, N});
      detail::gemm_nn(K, N, M, atr.data(), g.data(), gb.data());
      tp.accumulate(bn, gb);
    }
  });
}

// ---------------------------------------------------------------------------
// log_softmax
// ---------------------------------------------------------------------------

/// Numerically stable log softmax along one axis.
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::int64_t axis) {
  const Shape& in = x.shape();
  if (axis < 0 || axis >= static_cast<std::int64_t>(in.size()))
    throw ShapeError("log_softmax axis out of range");
  detail::check_strict_input(x, "log_softmax");
  std::int64_t outer = 1, inner = 1;
  const std::int64_t ax = in[static_cast<std::size_t>(axis)];
  for (std::int64_t d = 0; d < axis; ++d) outer *= in[static_cast<std::size_t>(d)];
  for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < in.size(); ++d) inner *= in[d];
  Tensor<T> out(in);
  const T* xp = x.data();
  T* op = out.data();
  parallel_for(outer * inner, [&](std::int64_t oi) {
    const std::int64_t o = oi / inner, i = oi % inner;
    const T* xs = xp + o * ax * inner + i;
    T* os = op + o * ax * inner + i;
    T m = xs[0];
    for (std::int64_t k = 1; k < ax; ++k) m = std::max(m, xs[k * inner]);
    T z = T(0);
    for (std::int64_t k = 0; k < ax; ++k) z += vexp(xs[k * inner] - m);
    const T lz = std::log(z) + m;
    for (std::int64_t k = 0; k < ax; ++k) os[k * inner] = xs[k * inner] - lz;
  });
  if (!x.on_tape()) return out;
  const Tensor<T> yv = out;
  const std::int32_t xn = x.node();
  return x.tape()->record(out, [yv, xn, axis, outer, inner, ax](Tape<T>& tp, const Tensor<T>& g) {
    (void)axis;
    Tensor<T> gx(yv.shape());
    const T* yp = yv.data();
    const T* gp = g.data();
    T* xpd = gx.data();
    parallel_for(outer * inner, [&](std::int64_t oi) {
      const std::int64_t o = oi / inner, i = oi % inner;
      const std::int64_t base = o * ax * inner + i;
      T gsum = T(0);
      for (std::int64_t k = 0; k < ax; ++k) gsum += gp[base + k * inner];
      for (std::int64_t k = 0; k < ax; ++k)
        xpd[base + k * inner] = gp[base + k * inner] - vexp(yp[base + k * inner]) * gsum;
    });
    tp.accumulate(xn, gx);
  });
}

// ---------------------------------------------------------------------------
// operator sugar
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) {
  return div(a, b);
}
template <typename T>
Tensor<T> operator+(const Tensor<T>& a, T s) {
  return add_scalar(a, s);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, T s) {
  return mul_scalar(a, s);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a) {
  return neg(a);
}

}  // namespace nnm
