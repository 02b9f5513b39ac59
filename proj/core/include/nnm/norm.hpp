#pragma once
// Batch normalization over the channel axis of [B,C,D,H,W] volumes.

#include <cmath>

#include "nnm/common.hpp"
#include "nnm/ops.hpp"

namespace nnm {

/// Running statistics owned by a batch-norm layer. Updated as a side effect of
/// the forward pass in train mode; read in eval mode.
template <typename T>
struct BNState {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  BNState() = default;
  explicit BNState(std::int64_t channels)
      : running_mean(Tensor<T>::zeros({channels})),
        running_var(Tensor<T>::full({channels}, T(1))) {}

  std::int64_t channels() const { return running_mean.extent(0); }
};

namespace detail {

// Per-channel sums folded item by item in batch order: the value for a channel
// is a fixed function of the per-item slabs, independent of thread count.
template <typename T, typename PerItem>
void per_channel_fold(std::int64_t B, std::int64_t C, T* out, PerItem&& per_item) {
  parallel_for(C, [&](std::int64_t c) {
    T acc = T(0);
    for (std::int64_t b = 0; b < B; ++b) acc += per_item(b, c);
    out[c] = acc;
  });
}

}  // namespace detail

/// Batch norm with per-channel affine parameters gamma, beta (each [C]).
/// Train mode normalizes by batch statistics (population variance) and folds
/// them into `state` with the given momentum; eval mode normalizes by the
/// running statistics. Returns a tensor on the same tape as its inputs.
template <typename T>
Tensor<T> batchnorm3d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BNState<T>& state, Mode mode, T momentum = T(0.1),
                      T eps = T(1e-5)) {
  detail::check_strict_input(x, "batchnorm3d");
  if (x.rank() != 5)
    throw ShapeError("batchnorm3d: input must be [B,C,D,H,W], got " + shape_str(x.shape()));
  const std::int64_t B = x.extent(0), C = x.extent(1);
  const std::int64_t S = x.extent(2) * x.extent(3) * x.extent(4);
  if (gamma.rank() != 1 || gamma.extent(0) != C || beta.rank() != 1 || beta.extent(0) != C)
    throw ShapeError("batchnorm3d: gamma/beta must be [" + std::to_string(C) + "]");
  if (state.channels() != C)
    throw ShapeError("batchnorm3d: state holds " + std::to_string(state.channels()) +
                     " channels, input has " + std::to_string(C));
  const std::int64_t n = B * S;
  const T* xd = x.data();

  // Channel statistics for normalization: batch stats in train mode, running
  // stats in eval mode. Two-pass mean/variance, per-item partial folds.
  std::vector<T> mean(static_cast<std::size_t>(C)), invstd(static_cast<std::size_t>(C));
  if (mode == Mode::kTrain) {
    std::vector<T> var(static_cast<std::size_t>(C));
    detail::per_channel_fold<T>(B, C, mean.data(), [&](std::int64_t b, std::int64_t c) {
      return detail::lane_sum(xd + (b * C + c) * S, S);
    });
    for (auto& m : mean) m /= static_cast<T>(n);
    detail::per_channel_fold<T>(B, C, var.data(), [&](std::int64_t b, std::int64_t c) {
      const T* p = xd + (b * C + c) * S;
      const T mu = mean[static_cast<std::size_t>(c)];
      constexpr std::int64_t L = detail::kSumLanes<T>;
      T lanes[L] = {};
      std::int64_t i = 0;
      for (; i + L <= S; i += L)
        for (std::int64_t v = 0; v < L; ++v) {
          const T dvi = p[i + v] - mu;
          lanes[v] += dvi * dvi;
        }
      T tail = T(0);
      for (; i < S; ++i) { const T dv = p[i] - mu; tail += dv * dv; }
      T acc = tail;
      for (std::int64_t v = 0; v < L; ++v) acc += lanes[v];
      return acc;
    });
    for (auto& v : var) v /= static_cast<T>(n);
    T* rm = state.running_mean.data();
    T* rv = state.running_var.data();
    for (std::int64_t c = 0; c < C; ++c) {
      const std::size_t cs = static_cast<std::size_t>(c);
      rm[c] = (T(1) - momentum) * rm[c] + momentum * mean[cs];
      rv[c] = (T(1) - momentum) * rv[c] + momentum * var[cs];
      invstd[cs] = T(1) / std::sqrt(var[cs] + eps);
    }
  } else {
    const T* rm = state.running_mean.data();
    const T* rv = state.running_var.data();
    for (std::int64_t c = 0; c < C; ++c) {
      mean[static_cast<std::size_t>(c)] = rm[c];
      invstd[static_cast<std::size_t>(c)] = T(1) / std::sqrt(rv[c] + eps);
    }
  }

  Tensor<T> out(x.shape());
  T* od = out.data();
  const T* gm = gamma.data();
  const T* bt = beta.data();
  parallel_for(B * C, [&](std::int64_t task) {
    const std::int64_t c = task % C;
    const std::size_t cs = static_cast<std::size_t>(c);
    const T scale = gm[c] * invstd[cs];
    const T shift = bt[c] - mean[cs] * scale;
    const T* xi = xd + task * S;
    T* oi = od + task * S;
    for (std::int64_t i = 0; i < S; ++i) oi[i] = xi[i] * scale + shift;
  });

  Tape<T>* tape = detail::common_tape<T>({&x, &gamma, &beta});
  if (!tape) return out;
  const Tensor<T> xv = x.detached();
  const Tensor<T> gv = gamma.detached();
  const std::int32_t xn = x.node(), gn = gamma.node(), bn = beta.node();
  const bool batch_stats = (mode == Mode::kTrain);
  return tape->record(out, [=](Tape<T>& tp, const Tensor<T>& g) {
    const T* gd = g.data();
    const T* xp = xv.data();
    // Per-channel reductions of g and g * xhat.
    std::vector<T> sg(static_cast<std::size_t>(C)), sgx(static_cast<std::size_t>(C));
    detail::per_channel_fold<T>(B, C, sg.data(), [&](std::int64_t b, std::int64_t c) {
      return detail::lane_sum(gd + (b * C + c) * S, S);
    });
    detail::per_channel_fold<T>(B, C, sgx.data(), [&](std::int64_t b, std::int64_t c) {
      const T* gi = gd + (b * C + c) * S;
      const T* xi = xp + (b * C + c) * S;
      const T mu = mean[static_cast<std::size_t>(c)];
      const T is = invstd[static_cast<std::size_t>(c)];
      constexpr std::int64_t L = detail::kSumLanes<T>;
      T lanes[L] = {};
      std::int64_t i = 0;
      for (; i + L <= S; i += L)
        for (std::int64_t v = 0; v < L; ++v) lanes[v] += gi[i + v] * (xi[i + v] - mu) * is;
      T tail = T(0);
      for (; i < S; ++i) tail += gi[i] * (xi[i] - mu) * is;
      T acc = tail;
      for (std::int64_t v = 0; v < L; ++v) acc += lanes[v];
      return acc;
    });
    if (xn >= 0) {
      Tensor<T> gx(xv.shape());
      T* gxd = gx.data();
      const T* gmp = gv.data();
      parallel_for(B * C, [&](std::int64_t task) {
        const std::int64_t c = task % C;
        const std::size_t cs = static_cast<std::size_t>(c);
        const T mu = mean[cs], is = invstd[cs];
        const T* gi = gd + task * S;
        const T* xi = xp + task * S;
        T* gxi = gxd + task * S;
        if (batch_stats) {
          const T mg = sg[cs] / static_cast<T>(n);
          const T mgx = sgx[cs] / static_cast<T>(n);
          const T a = gmp[c] * is;
          for (std::int64_t i = 0; i < S; ++i) {
            const T xhat = (xi[i] - mu) * is;
            gxi[i] = a * (gi[i] - mg - xhat * mgx);
          }
        } else {
          const T a = gmp[c] * is;
          for (std::int64_t i = 0; i < S; ++i) gxi[i] = a * gi[i];
        }
      });
      tp.accumulate(xn, std::move(gx));
    }
    if (gn >= 0) {
      Tensor<T> gg({C});
      for (std::int64_t c = 0; c < C; ++c) gg.data()[c] = sgx[static_cast<std::size_t>(c)];
      tp.accumulate(gn, std::move(gg));
    }
    if (bn >= 0) {
      Tensor<T> gb({C});
      for (std::int64_t c = 0; c < C; ++c) gb.data()[c] = sg[static_cast<std::size_t>(c)];
      tp.accumulate(bn, std::move(gb));
    }
  });
}

}  // namespace nnm
