#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "nnm/common.hpp"
#include "nnm/fastmath.hpp"
#include "nnm/ops.hpp"
#include "nnm/parallel.hpp"
#include "nnm/rng.hpp"
#include "nnm/tensor.hpp"

namespace nnm {

// Selective state-space scan. Per token t, channel c and state index n:
//
//   abar = exp(delta[t,c] * A[c,n])          zero-order hold decay
//   h[n,c] <- abar * h[n,c] + delta[t,c] * B[t,n] * u[t,c]
//   y[t,c] = sum_n C[t,n] * h[n,c] + D[c] * u[t,c]
//
// delta, B and C are functions of the input (computed by selective_scan from
// SSMParams), which is what makes the scan selective. Two implementations are
// provided: scan_sequential, a plain left-to-right reference, and
// selective_scan_core, a chunked version with autodiff support. Both derive
// the decay through vexp() so a comparison between them isolates
// association-order effects rather than exp-approximation differences.

/// Chunk length for the blocked scan. Within a chunk the recurrence is run
/// directly; across chunks only the affine action (prod of decays, offset) is
/// composed, which changes summation order relative to the sequential scan.
inline constexpr std::int64_t kScanChunk = 64;

/// Zero-order-hold discretization of the diagonal system: for step sizes
/// `delta`, returns (exp(delta*A), delta*B) elementwise with broadcasting.
/// Differentiable; shares the same exp kernel as the scan itself.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> zoh_discretize(const Tensor<T>& delta, const Tensor<T>& A_diag,
                                               const Tensor<T>& B) {
  return {exp(mul(delta, A_diag)), mul(delta, B)};
}

/// Input-dependent projections and state matrices of one selective-scan unit
/// over `channels` channels with `state_size` states per channel.
template <typename T>
struct SSMParams {
  Tensor<T> A_log;   // [channels, N]; state matrix is diag(-exp(A_log)) per channel
  Tensor<T> W_B;     // [channels, N]; B_t = u_t . W_B
  Tensor<T> W_C;     // [channels, N]; C_t = u_t . W_C
  Tensor<T> W_dt;    // [channels, channels]; pre-activation step size
  Tensor<T> b_dt;    // [channels]; delta_t = softplus(u_t . W_dt + b_dt)
  Tensor<T> D_skip;  // [channels]; direct feedthrough

  std::int64_t channels() const { return A_log.rank() == 2 ? A_log.shape()[0] : 0; }
  std::int64_t state_size() const { return A_log.rank() == 2 ? A_log.shape()[1] : 0; }

  void validate() const {
    const std::int64_t c = channels(), n = state_size();
    if (c <= 0 || n <= 0) throw ShapeError("SSMParams: A_log must be [channels, N], got " + shape_str(A_log.shape()));
    auto want = [&](const Tensor<T>& t, const Shape& s, const char* name) {
      if (t.shape() != s)
        throw ShapeError(std::string("SSMParams: ") + name + " expected " + shape_str(s) + ", got " +
                         shape_str(t.shape()));
    };
    want(W_B, {c, n}, "W_B");
    want(W_C, {c, n}, "W_C");
    want(W_dt, {c, c}, "W_dt");
    want(b_dt, {c}, "b_dt");
    want(D_skip, {c}, "D_skip");
  }
};

/// Fresh parameters: A_n = -(n+1) per channel (so A_log = log(n+1)), small
/// random input projections, step-size bias chosen so the initial softplus
/// output is log-uniform in [1e-3, 1e-1], and unit feedthrough.
template <typename T>
SSMParams<T> make_ssm_params(std::int64_t channels, std::int64_t state_size, Rng& rng) {
  if (channels <= 0 || state_size <= 0)
    throw ConfigError("make_ssm_params: channels and state_size must be positive");
  SSMParams<T> p;
  p.A_log = Tensor<T>({channels, state_size});
  for (std::int64_t c = 0; c < channels; ++c)
    for (std::int64_t n = 0; n < state_size; ++n)
      p.A_log.data()[c * state_size + n] = static_cast<T>(std::log(static_cast<double>(n + 1)));
  const T wscale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(channels)));
  p.W_B = mul_scalar(Tensor<T>::normal({channels, state_size}, rng), wscale);
  p.W_C = mul_scalar(Tensor<T>::normal({channels, state_size}, rng), wscale);
  p.W_dt = mul_scalar(Tensor<T>::normal({channels, channels}, rng), wscale);
  p.b_dt = Tensor<T>({channels});
  const double lo = std::log(1e-3), hi = std::log(1e-1);
  for (std::int64_t c = 0; c < channels; ++c) {
    const double dt = std::exp(lo + rng.uniform() * (hi - lo));
    // inverse softplus so softplus(b_dt) == dt exactly at init
    p.b_dt.data()[c] = static_cast<T>(std::log(std::expm1(dt)));
  }
  p.D_skip = Tensor<T>::full({channels}, T(1));
  return p;
}

/// How a [B,C,D,H,W] volume is laid out as a token sequence.
enum class FlattenOrder { kRasterDHW };

struct MambaLayerConfig {
  std::int64_t channels = 0;
  std::int64_t state_size = 8;
  std::int64_t expand = 2;
  FlattenOrder flatten_order = FlattenOrder::kRasterDHW;
  bool bidirectional = false;
};

namespace detail {

struct ScanDims {
  std::int64_t B, L, C, N;
};

template <typename T>
ScanDims scan_dims(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& A,
                   const Tensor<T>& Bt, const Tensor<T>& Ct, const Tensor<T>& D) {
  if (u.rank() != 3) throw ShapeError("scan: u must be [B,L,C], got " + shape_str(u.shape()));
  ScanDims d{u.shape()[0], u.shape()[1], u.shape()[2], 0};
  if (d.L == 0) throw ShapeError("scan: empty sequence (L = 0)");
  if (A.rank() != 2 || A.shape()[0] != d.C)
    throw ShapeError("scan: A must be [C,N] with C=" + std::to_string(d.C) + ", got " + shape_str(A.shape()));
  d.N = A.shape()[1];
  if (delta.shape() != u.shape())
    throw ShapeError("scan: delta shape " + shape_str(delta.shape()) + " != u shape " + shape_str(u.shape()));
  const Shape bn{d.B, d.L, d.N};
  if (Bt.shape() != bn) throw ShapeError("scan: B must be [B,L,N], got " + shape_str(Bt.shape()));
  if (Ct.shape() != bn) throw ShapeError("scan: C must be [B,L,N], got " + shape_str(Ct.shape()));
  if (D.shape() != Shape{d.C}) throw ShapeError("scan: D must be [C], got " + shape_str(D.shape()));
  return d;
}

/// Affine action of one chunk on the entry state: running the recurrence over
/// [t0,t1) from entry state h gives h_out = P (*) h + q elementwise, where
/// P = prod_t decay and q is the chunk scan started from zero. Composition of
/// per-step actions (a2,b2)(a1,b1) = (a2*a1, a2*b1 + b2), accumulated in step
/// order. Pointers u/dlt/Bt are pre-offset to the batch item; At is the [N,C]
/// transpose of A; P and q are [N*C].
template <typename T>
void scan_chunk_affine(const T* __restrict u, const T* __restrict dlt, const T* __restrict At,
                       const T* __restrict Bt, const ScanDims& d, std::int64_t t0, std::int64_t t1,
                       T* __restrict P, T* __restrict q) {
  const std::int64_t C = d.C, N = d.N;
  std::fill(P, P + N * C, T(1));
  std::fill(q, q + N * C, T(0));
  for (std::int64_t t = t0; t < t1; ++t) {
    const T* __restrict dl = dlt + t * C;
    const T* __restrict ur = u + t * C;
    const T* __restrict Brow = Bt + t * d.N;
    for (std::int64_t n = 0; n < N; ++n) {
      const T Bn = Brow[n];
      const T* __restrict An = At + n * C;
      T* __restrict Pn = P + n * C;
      T* __restrict qn = q + n * C;
      for (std::int64_t c = 0; c < C; ++c) {
        const T a = vexp(dl[c] * An[c]);
        qn[c] = a * qn[c] + dl[c] * Bn * ur[c];
        Pn[c] *= a;
      }
    }
  }
}

/// Runs the recurrence over [t0,t1) from entry state h (updated in place to
/// the exit state) and writes outputs into y. Pointers pre-offset per batch
/// item as in scan_chunk_affine; y points at the batch item's [L,C] block.
template <typename T>
void scan_chunk_emit(const T* __restrict u, const T* __restrict dlt, const T* __restrict At,
                     const T* __restrict Bt, const T* __restrict Ct, const T* __restrict D,
                     const ScanDims& d, std::int64_t t0, std::int64_t t1, T* __restrict h,
                     T* __restrict y) {
  const std::int64_t C = d.C, N = d.N;
  for (std::int64_t t = t0; t < t1; ++t) {
    const T* __restrict dl = dlt + t * C;
    const T* __restrict ur = u + t * C;
    const T* __restrict Brow = Bt + t * N;
    const T* __restrict Crow = Ct + t * N;
    T* __restrict yr = y + t * C;
    for (std::int64_t c = 0; c < C; ++c) yr[c] = D[c] * ur[c];
    for (std::int64_t n = 0; n < N; ++n) {
      const T Bn = Brow[n];
      const T Cn = Crow[n];
      const T* __restrict An = At + n * C;
      T* __restrict hn = h + n * C;
      for (std::int64_t c = 0; c < C; ++c) {
        const T a = vexp(dl[c] * An[c]);
        hn[c] = a * hn[c] + dl[c] * Bn * ur[c];
        yr[c] += Cn * hn[c];
      }
    }
  }
}

/// Reverse sweep for one batch item. Chunk entry states come from the forward
/// checkpoint; within a chunk the states and decays are recomputed, then
/// gradients run backwards through the chunk. dAt ([N,C]) and dD ([C]) are
/// per-batch-item buffers the caller folds in batch order.
template <typename T>
void scan_backward_b(const T* __restrict u, const T* __restrict dlt, const T* __restrict At,
                     const T* __restrict Bt, const T* __restrict Ct, const T* __restrict D,
                     const T* __restrict g, const T* __restrict entry, const ScanDims& d,
                     std::int64_t nch, T* __restrict du, T* __restrict ddl, T* __restrict dBt,
                     T* __restrict dCt, T* __restrict dAt, T* __restrict dD) {
  const std::int64_t C = d.C, N = d.N, NC = N * C, K = kScanChunk;
  std::vector<T> dh(static_cast<std::size_t>(NC), T(0));
  std::vector<T> hs(static_cast<std::size_t>((K + 1) * NC));
  std::vector<T> ac(static_cast<std::size_t>(K * NC));
  std::vector<T> tmp(static_cast<std::size_t>(C));
  for (std::int64_t k = nch - 1; k >= 0; --k) {
    const std::int64_t t0 = k * K, t1 = std::min(d.L, t0 + K), len = t1 - t0;
    std::copy(entry + k * NC, entry + (k + 1) * NC, hs.begin());
    for (std::int64_t s = 0; s < len; ++s) {
      const std::int64_t t = t0 + s;
      const T* __restrict dl = dlt + t * C;
      const T* __restrict ur = u + t * C;
      const T* __restrict Brow = Bt + t * N;
      const T* __restrict hin = hs.data() + s * NC;
      T* __restrict hout = hs.data() + (s + 1) * NC;
      T* __restrict arow = ac.data() + s * NC;
      for (std::int64_t n = 0; n < N; ++n) {
        const T Bn = Brow[n];
        const T* __restrict An = At + n * C;
        const T* __restrict hi = hin + n * C;
        T* __restrict ho = hout + n * C;
        T* __restrict ar = arow + n * C;
        for (std::int64_t c = 0; c < C; ++c) {
          const T a = vexp(dl[c] * An[c]);
          ar[c] = a;
          ho[c] = a * hi[c] + dl[c] * Bn * ur[c];
        }
      }
    }
    for (std::int64_t s = len - 1; s >= 0; --s) {
      const std::int64_t t = t0 + s;
      const T* __restrict gr = g + t * C;
      const T* __restrict dl = dlt + t * C;
      const T* __restrict ur = u + t * C;
      const T* __restrict Brow = Bt + t * N;
      const T* __restrict Crow = Ct + t * N;
      const T* __restrict ht = hs.data() + (s + 1) * NC;
      const T* __restrict hp = hs.data() + s * NC;
      const T* __restrict arow = ac.data() + s * NC;
      T* __restrict dur = du + t * C;
      T* __restrict ddlr = ddl + t * C;
      for (std::int64_t c = 0; c < C; ++c) {
        tmp[c] = dl[c] * ur[c];
        dur[c] += gr[c] * D[c];
        dD[c] += gr[c] * ur[c];
      }
      for (std::int64_t n = 0; n < N; ++n) {
        const T Cn = Crow[n];
        const T Bn = Brow[n];
        T* __restrict dhn = dh.data() + n * C;
        dCt[t * N + n] += lane_dot(gr, ht + n * C, C);
        for (std::int64_t c = 0; c < C; ++c) dhn[c] += gr[c] * Cn;
        dBt[t * N + n] += lane_dot(dhn, tmp.data(), C);
        const T* __restrict An = At + n * C;
        const T* __restrict ar = arow + n * C;
        const T* __restrict hpn = hp + n * C;
        T* __restrict dAtn = dAt + n * C;
        for (std::int64_t c = 0; c < C; ++c) {
          const T dhc = dhn[c];
          const T ha = hpn[c] * ar[c];
          ddlr[c] += dhc * (ha * An[c] + Bn * ur[c]);
          dAtn[c] += dhc * ha * dl[c];
          dur[c] += dhc * dl[c] * Bn;
          dhn[c] = dhc * ar[c];
        }
      }
    }
  }
}

}  // namespace detail

/// Plain left-to-right reference scan, forward only, no autodiff. Loop nest
/// is channel-major (state vector h[N] per channel) with a serial reduction
/// for y -- deliberately a different association order from the chunked path.
template <typename T>
Tensor<T> scan_sequential(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& A,
                          const Tensor<T>& Bt, const Tensor<T>& Ct, const Tensor<T>& D) {
  const detail::ScanDims d = detail::scan_dims(u, delta, A, Bt, Ct, D);
  Tensor<T> out(u.shape());
  const T* up = u.data();
  const T* dp = delta.data();
  const T* Ap = A.data();
  const T* Bp = Bt.data();
  const T* Cp = Ct.data();
  const T* Dp = D.data();
  T* yp = out.data();
  parallel_for(d.B * d.C, [&](std::int64_t bc) {
    const std::int64_t b = bc / d.C, c = bc % d.C;
    const T* ub = up + b * d.L * d.C;
    const T* db = dp + b * d.L * d.C;
    const T* Bb = Bp + b * d.L * d.N;
    const T* Cb = Cp + b * d.L * d.N;
    T* yb = yp + b * d.L * d.C;
    std::vector<T> h(static_cast<std::size_t>(d.N), T(0));
    for (std::int64_t t = 0; t < d.L; ++t) {
      const T dl = db[t * d.C + c];
      const T uv = ub[t * d.C + c];
      T y = Dp[c] * uv;
      for (std::int64_t n = 0; n < d.N; ++n) {
        const T a = vexp(dl * Ap[c * d.N + n]);
        h[static_cast<std::size_t>(n)] = a * h[static_cast<std::size_t>(n)] + dl * Bb[t * d.N + n] * uv;
        y += Cb[t * d.N + n] * h[static_cast<std::size_t>(n)];
      }
      yb[t * d.C + c] = y;
    }
  });
  return out;
}

/// Chunked selective scan over pre-computed raw inputs, recorded as a single
/// autodiff node. Forward runs three passes: per-chunk affine actions
/// (parallel), sequential composition of chunk entry states, and per-chunk
/// output emission (parallel). Backward recomputes within-chunk states from
/// the checkpointed entry states and runs truncated-free BPTT chunk by chunk
/// in reverse. Gradients for the shared A and D are accumulated per batch
/// item and folded in batch order, so results are bit-identical for any
/// thread count.
template <typename T>
Tensor<T> selective_scan_core(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& A,
                              const Tensor<T>& Bt, const Tensor<T>& Ct, const Tensor<T>& D) {
  const detail::ScanDims d = detail::scan_dims(u, delta, A, Bt, Ct, D);
  const std::int64_t C = d.C, N = d.N, NC = N * C;
  const std::int64_t nch = (d.L + kScanChunk - 1) / kScanChunk;
  const std::int64_t LC = d.L * C, LN = d.L * N;

  auto At = std::make_shared<std::vector<T>>(static_cast<std::size_t>(NC));
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t n = 0; n < N; ++n) (*At)[static_cast<std::size_t>(n * C + c)] = A.data()[c * N + n];

  auto entry = std::make_shared<std::vector<T>>(static_cast<std::size_t>(d.B * nch * NC));
  Tensor<T> out(u.shape());
  {
    std::vector<T> P(static_cast<std::size_t>(d.B * nch * NC));
    std::vector<T> q(static_cast<std::size_t>(d.B * nch * NC));
    parallel_for(d.B * nch, [&](std::int64_t i) {
      const std::int64_t b = i / nch, k = i % nch;
      const std::int64_t t0 = k * kScanChunk, t1 = std::min(d.L, t0 + kScanChunk);
      detail::scan_chunk_affine(u.data() + b * LC, delta.data() + b * LC, At->data(),
                                Bt.data() + b * LN, d, t0, t1, P.data() + i * NC, q.data() + i * NC);
    });
    parallel_for(d.B, [&](std::int64_t b) {
      T* H = entry->data() + b * nch * NC;
      std::fill(H, H + NC, T(0));
      for (std::int64_t k = 0; k + 1 < nch; ++k) {
        const T* Pk = P.data() + (b * nch + k) * NC;
        const T* qk = q.data() + (b * nch + k) * NC;
        const T* Hk = H + k * NC;
        T* Hn = H + (k + 1) * NC;
        for (std::int64_t j = 0; j < NC; ++j) Hn[j] = Pk[j] * Hk[j] + qk[j];
      }
    });
    parallel_for(d.B * nch, [&](std::int64_t i) {
      const std::int64_t b = i / nch, k = i % nch;
      const std::int64_t t0 = k * kScanChunk, t1 = std::min(d.L, t0 + kScanChunk);
      std::vector<T> h(static_cast<std::size_t>(NC));
      std::copy(entry->data() + i * NC, entry->data() + (i + 1) * NC, h.begin());
      detail::scan_chunk_emit(u.data() + b * LC, delta.data() + b * LC, At->data(),
                              Bt.data() + b * LN, Ct.data() + b * LN, D.data(), d, t0, t1, h.data(),
                              out.data() + b * LC);
    });
  }

  Tape<T>* tape = detail::common_tape<T>({&u, &delta, &A, &Bt, &Ct, &D});
  if (!tape) return out;
  const std::int32_t un = u.node(), dn = delta.node(), an = A.node();
  const std::int32_t bn = Bt.node(), cn = Ct.node(), Dn = D.node();
  const bool uon = u.on_tape(), don = delta.on_tape(), aon = A.on_tape();
  const bool bon = Bt.on_tape(), con = Ct.on_tape(), Don = D.on_tape();
  Tensor<T> uv = u.detached(), dv = delta.detached(), Bv = Bt.detached(), Cv = Ct.detached(),
            Dv = D.detached();
  return tape->record(out, [=](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T> du(uv.shape()), ddl(uv.shape()), dBt(Bv.shape()), dCt(Bv.shape());
    std::vector<T> dAt_all(static_cast<std::size_t>(d.B * NC), T(0));
    std::vector<T> dD_all(static_cast<std::size_t>(d.B * C), T(0));
    parallel_for(d.B, [&](std::int64_t b) {
      detail::scan_backward_b(uv.data() + b * LC, dv.data() + b * LC, At->data(),
                              Bv.data() + b * LN, Cv.data() + b * LN, Dv.data(),
                              g.data() + b * LC, entry->data() + b * nch * NC, d, nch,
                              du.data() + b * LC, ddl.data() + b * LC, dBt.data() + b * LN,
                              dCt.data() + b * LN, dAt_all.data() + b * NC, dD_all.data() + b * C);
    });
    if (uon) tp.accumulate(un, std::move(du));
    if (don) tp.accumulate(dn, std::move(ddl));
    if (aon) {
      Tensor<T> dA({C, N});
      for (std::int64_t b = 0; b < d.B; ++b)
        for (std::int64_t n = 0; n < N; ++n)
          for (std::int64_t c = 0; c < C; ++c)
            dA.data()[c * N + n] += dAt_all[static_cast<std::size_t>(b * NC + n * C + c)];
      tp.accumulate(an, std::move(dA));
    }
    if (bon) tp.accumulate(bn, std::move(dBt));
    if (con) tp.accumulate(cn, std::move(dCt));
    if (Don) {
      Tensor<T> dD({C});
      for (std::int64_t b = 0; b < d.B; ++b)
        for (std::int64_t c = 0; c < C; ++c) dD.data()[c] += dD_all[static_cast<std::size_t>(b * C + c)];
      tp.accumulate(Dn, std::move(dD));
    }
  });
}

/// Full selective-scan unit: derives delta/B/C from the input through the
/// parameter projections, then runs the chunked scan. Accepts [B,L,C] or a
/// single [L,C] sequence. All differentiable.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& u, const SSMParams<T>& p) {
  p.validate();
  if (u.rank() != 2 && u.rank() != 3)
    throw ShapeError("selective_scan: u must be [L,C] or [B,L,C], got " + shape_str(u.shape()));
  const bool batched = u.rank() == 3;
  const std::int64_t B = batched ? u.shape()[0] : 1;
  const std::int64_t L = batched ? u.shape()[1] : u.shape()[0];
  const std::int64_t C = batched ? u.shape()[2] : u.shape()[1];
  if (L == 0) throw ShapeError("selective_scan: empty sequence (L = 0)");
  if (C != p.channels())
    throw ShapeError("selective_scan: input has " + std::to_string(C) + " channels, params have " +
                     std::to_string(p.channels()));
  const std::int64_t N = p.state_size();
  Tensor<T> u3 = batched ? u : reshape(u, {1, L, C});
  Tensor<T> flat = reshape(u3, {B * L, C});
  Tensor<T> Bt = reshape(matmul(flat, p.W_B), {B, L, N});
  Tensor<T> Ct = reshape(matmul(flat, p.W_C), {B, L, N});
  Tensor<T> dlt = reshape(softplus(add(matmul(flat, p.W_dt), p.b_dt)), {B, L, C});
  Tensor<T> A = neg(exp(p.A_log));
  Tensor<T> y = selective_scan_core(u3, dlt, A, Bt, Ct, p.D_skip);
  return batched ? y : reshape(y, {L, C});
}

}  // namespace nnm
