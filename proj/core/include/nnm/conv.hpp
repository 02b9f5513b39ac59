#pragma once
// 3-D convolution, 2x max pooling, and 2x trilinear upsampling with autodiff.
//
// Kernels are direct loops arranged so the innermost dimension is contiguous
// in memory for both source and destination (shift-and-accumulate form).
// Reductions are folded through fixed-width lane arrays so they vectorize
// without floating-point reassociation and stay bit-deterministic.

#include <algorithm>
#include <cstring>
#include <type_traits>
#include <vector>

#include "nnm/ops.hpp"

namespace nnm {
namespace detail {

inline std::int64_t div_floor(std::int64_t a, std::int64_t b) {
  return a >= 0 ? a / b : -((-a + b - 1) / b);
}
inline std::int64_t div_ceil(std::int64_t a, std::int64_t b) {
  return a >= 0 ? (a + b - 1) / b : -((-a) / b);
}

struct ConvDims {
  std::int64_t B = 0, Cin = 0, D = 0, H = 0, W = 0;
  std::int64_t Cout = 0, KD = 0, KH = 0, KW = 0;
  std::int64_t stride = 1, pad = 0;
  std::int64_t Do = 0, Ho = 0, Wo = 0;
};

template <typename T>
ConvDims conv3d_dims(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                     std::int64_t stride, std::int64_t pad) {
  if (x.rank() != 5) throw ShapeError("conv3d: input must be [B,C,D,H,W], got " + shape_str(x.shape()));
  if (w.rank() != 5) throw ShapeError("conv3d: weight must be [Co,Ci,kd,kh,kw], got " + shape_str(w.shape()));
  if (stride < 1) throw ShapeError("conv3d: stride must be >= 1");
  if (pad < 0) throw ShapeError("conv3d: padding must be >= 0");
  ConvDims d;
  d.B = x.extent(0); d.Cin = x.extent(1); d.D = x.extent(2); d.H = x.extent(3); d.W = x.extent(4);
  d.Cout = w.extent(0); d.KD = w.extent(2); d.KH = w.extent(3); d.KW = w.extent(4);
  d.stride = stride; d.pad = pad;
  if (w.extent(1) != d.Cin)
    throw ShapeError("conv3d: weight expects " + std::to_string(w.extent(1)) +
                     " input channels, input has " + std::to_string(d.Cin));
  if (bias && !(bias->rank() == 1 && bias->extent(0) == d.Cout))
    throw ShapeError("conv3d: bias must be [" + std::to_string(d.Cout) + "], got " +
                     shape_str(bias->shape()));
  d.Do = (d.D + 2 * pad - d.KD) / stride + 1;
  d.Ho = (d.H + 2 * pad - d.KH) / stride + 1;
  d.Wo = (d.W + 2 * pad - d.KW) / stride + 1;
  if (d.Do < 1 || d.Ho < 1 || d.Wo < 1)
    throw ShapeError("conv3d: kernel " + shape_str(w.shape()) + " does not fit input " +
                     shape_str(x.shape()) + " with stride " + std::to_string(stride) +
                     ", padding " + std::to_string(pad));
  return d;
}

// Valid output range along one axis for a given kernel offset: indices o with
// 0 <= o*stride + k - pad < in_extent.
inline void conv_axis_range(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride,
                            std::int64_t pad, std::int64_t& lo, std::int64_t& hi) {
  lo = std::max<std::int64_t>(0, div_ceil(pad - k, stride));
  hi = std::min(out - 1, div_floor(in - 1 + pad - k, stride));
}

// Loop order keeps one output plane (and the x planes feeding it) resident in
// L1 across the whole channel/tap accumulation instead of re-streaming the
// full slab from L2 for every tap.
template <typename T>
void conv3d_forward_kernel(const T* __restrict x, const T* __restrict w,
                           const T* __restrict bias, T* __restrict out, const ConvDims& d) {
  const std::int64_t HW = d.H * d.W, DHW = d.D * HW;
  const std::int64_t HoWo = d.Ho * d.Wo, DoHoWo = d.Do * HoWo;
  const std::int64_t KHW = d.KH * d.KW, K3 = d.KD * KHW;
  parallel_for(d.B * d.Cout, [&](std::int64_t task) {
    const std::int64_t b = task / d.Cout, co = task % d.Cout;
    T* __restrict o = out + task * DoHoWo;
    for (std::int64_t od = 0; od < d.Do; ++od) {
      T* __restrict oplane = o + od * HoWo;
      for (std::int64_t ci = 0; ci < d.Cin; ++ci) {
        const T* xi = x + (b * d.Cin + ci) * DHW;
        const T* wc = w + (co * d.Cin + ci) * K3;
        for (std::int64_t kd = 0; kd < d.KD; ++kd) {
          const std::int64_t id = od * d.stride + kd - d.pad;
          if (id < 0 || id >= d.D) continue;
          const T* xplane = xi + id * HW;
          for (std::int64_t kh = 0; kh < d.KH; ++kh) {
            std::int64_t oh_lo, oh_hi;
            conv_axis_range(d.H, d.Ho, kh, d.stride, d.pad, oh_lo, oh_hi);
            for (std::int64_t kw = 0; kw < d.KW; ++kw) {
              std::int64_t ow_lo, ow_hi;
              conv_axis_range(d.W, d.Wo, kw, d.stride, d.pad, ow_lo, ow_hi);
              if (ow_lo > ow_hi) continue;
              const T wv = wc[kd * KHW + kh * d.KW + kw];
              for (std::int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
                const T* __restrict xr = xplane + (oh * d.stride + kh - d.pad) * d.W;
                T* __restrict orow = oplane + oh * d.Wo;
                if (d.stride == 1) {
                  const T* __restrict xs = xr + kw - d.pad;
                  for (std::int64_t ow = ow_lo; ow <= ow_hi; ++ow) orow[ow] += wv * xs[ow];
                } else {
                  for (std::int64_t ow = ow_lo; ow <= ow_hi; ++ow)
                    orow[ow] += wv * xr[ow * d.stride + kw - d.pad];
                }
              }
            }
          }
        }
      }
    }
    if (bias) {
      const T bv = bias[co];
      for (std::int64_t i = 0; i < DoHoWo; ++i) o[i] += bv;
    }
  });
}

template <typename T>
void conv3d_backward_input_kernel(const T* __restrict g, const T* __restrict w,
                                  T* __restrict gx, const ConvDims& d) {
  const std::int64_t HW = d.H * d.W, DHW = d.D * HW;
  const std::int64_t HoWo = d.Ho * d.Wo, DoHoWo = d.Do * HoWo;
  const std::int64_t KHW = d.KH * d.KW, K3 = d.KD * KHW;
  parallel_for(d.B * d.Cin, [&](std::int64_t task) {
    const std::int64_t b = task / d.Cin, ci = task % d.Cin;
    T* gxi = gx + task * DHW;  // owned by this task; zero on entry
    for (std::int64_t id = 0; id < d.D; ++id) {
      T* __restrict gxplane = gxi + id * HW;
      for (std::int64_t co = 0; co < d.Cout; ++co) {
        const T* gi = g + (b * d.Cout + co) * DoHoWo;
        const T* wc = w + (co * d.Cin + ci) * K3;
        for (std::int64_t kd = 0; kd < d.KD; ++kd) {
          const std::int64_t num = id + d.pad - kd;
          if (num < 0 || num % d.stride != 0) continue;
          const std::int64_t od = num / d.stride;
          if (od >= d.Do) continue;
          const T* gplane = gi + od * HoWo;
          for (std::int64_t kh = 0; kh < d.KH; ++kh) {
            std::int64_t oh_lo, oh_hi;
            conv_axis_range(d.H, d.Ho, kh, d.stride, d.pad, oh_lo, oh_hi);
            for (std::int64_t kw = 0; kw < d.KW; ++kw) {
              std::int64_t ow_lo, ow_hi;
              conv_axis_range(d.W, d.Wo, kw, d.stride, d.pad, ow_lo, ow_hi);
              if (ow_lo > ow_hi) continue;
              const T wv = wc[kd * KHW + kh * d.KW + kw];
              for (std::int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
                T* __restrict gxr = gxplane + (oh * d.stride + kh - d.pad) * d.W;
                const T* __restrict grow = gplane + oh * d.Wo;
                if (d.stride == 1) {
                  T* __restrict gxs = gxr + kw - d.pad;
                  for (std::int64_t ow = ow_lo; ow <= ow_hi; ++ow) gxs[ow] += wv * grow[ow];
                } else {
                  for (std::int64_t ow = ow_lo; ow <= ow_hi; ++ow)
                    gxr[ow * d.stride + kw - d.pad] += wv * grow[ow];
                }
              }
            }
          }
        }
      }
    }
  });
}

template <typename T>
void conv3d_backward_weight_kernel(const T* __restrict g, const T* __restrict x,
                                   T* __restrict gw, const ConvDims& d) {
  constexpr std::int64_t kLanes = kSumLanes<T>;
  const std::int64_t HW = d.H * d.W, DHW = d.D * HW;
  const std::int64_t HoWo = d.Ho * d.Wo, DoHoWo = d.Do * HoWo;
  const std::int64_t KHW = d.KH * d.KW, K3 = d.KD * KHW;
  parallel_for(d.Cout * d.Cin, [&](std::int64_t task) {
    const std::int64_t co = task / d.Cin, ci = task % d.Cin;
    T* gwc = gw + task * K3;
    std::vector<T> acc(static_cast<std::size_t>(K3), T(0));
    for (std::int64_t b = 0; b < d.B; ++b) {
      const T* xi = x + (b * d.Cin + ci) * DHW;
      const T* gi = g + (b * d.Cout + co) * DoHoWo;
      for (std::int64_t od = 0; od < d.Do; ++od) {
        const T* gplane = gi + od * HoWo;
        for (std::int64_t kd = 0; kd < d.KD; ++kd) {
          const std::int64_t id = od * d.stride + kd - d.pad;
          if (id < 0 || id >= d.D) continue;
          const T* xplane = xi + id * HW;
          for (std::int64_t kh = 0; kh < d.KH; ++kh) {
            std::int64_t oh_lo, oh_hi;
            conv_axis_range(d.H, d.Ho, kh, d.stride, d.pad, oh_lo, oh_hi);
            for (std::int64_t kw = 0; kw < d.KW; ++kw) {
              std::int64_t ow_lo, ow_hi;
              conv_axis_range(d.W, d.Wo, kw, d.stride, d.pad, ow_lo, ow_hi);
              if (ow_lo > ow_hi) continue;
              // one plane-pair dot; lanes fold in a fixed order per (od, tap)
              T lanes[kLanes] = {};
              T tail = T(0);
              for (std::int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
                const T* __restrict xr = xplane + (oh * d.stride + kh - d.pad) * d.W;
                const T* __restrict grow = gplane + oh * d.Wo;
                if (d.stride == 1) {
                  const T* __restrict xs = xr + kw - d.pad;
                  std::int64_t ow = ow_lo;
                  for (; ow + kLanes <= ow_hi + 1; ow += kLanes)
                    for (std::int64_t v = 0; v < kLanes; ++v)
                      lanes[v] += grow[ow + v] * xs[ow + v];
                  for (; ow <= ow_hi; ++ow) tail += grow[ow] * xs[ow];
                } else {
                  for (std::int64_t ow = ow_lo; ow <= ow_hi; ++ow)
                    tail += grow[ow] * xr[ow * d.stride + kw - d.pad];
                }
              }
              T dot = tail;
              for (std::int64_t v = 0; v < kLanes; ++v) dot += lanes[v];
              acc[static_cast<std::size_t>(kd * KHW + kh * d.KW + kw)] += dot;
            }
          }
        }
      }
    }
    for (std::int64_t k = 0; k < K3; ++k) gwc[k] = acc[static_cast<std::size_t>(k)];
  });
}

// ---------------------------------------------------------------------------
// fast path for the dominant case: 3x3x3 kernel, stride 1, padding 1 ("same").
// Planes are copied once into zero-padded buffers with pitch W+2; every tap
// then acts on a plane as one long contiguous run with a constant offset, so
// the inner loop is a single ~H*W-element FMA sweep with nine taps fused.
// Padding columns absorb the would-be boundary handling: reads of pad cells
// contribute exact zeros, writes land in pad cells that are never read back.
// ---------------------------------------------------------------------------

inline bool conv3d_is_same3(const ConvDims& d) {
  return d.stride == 1 && d.pad == 1 && d.KD == 3 && d.KH == 3 && d.KW == 3;
}

// [n_slabs, D, H, W] -> zero-padded [n_slabs, D+2, H+2, W+2].
template <typename T>
std::vector<T> pad1_slabs(const T* x, std::int64_t n_slabs, std::int64_t D, std::int64_t H,
                          std::int64_t W) {
  const std::int64_t P = W + 2, PH = H + 2, PD = D + 2;
  std::vector<T> out(static_cast<std::size_t>(n_slabs * PD * PH * P), T(0));
  T* od = out.data();
  parallel_for(n_slabs, [&](std::int64_t s) {
    const T* xi = x + s * D * H * W;
    T* oi = od + s * PD * PH * P;
    for (std::int64_t dd = 0; dd < D; ++dd)
      for (std::int64_t h = 0; h < H; ++h)
        std::memcpy(oi + ((dd + 1) * PH + h + 1) * P + 1, xi + (dd * H + h) * W,
                    static_cast<std::size_t>(W) * sizeof(T));
  });
  return out;
}

// Linear extent of the fused run covering real elements (1,1)..(H,W) of a
// padded plane with pitch P = W + 2.
inline std::int64_t same3_run(std::int64_t H, std::int64_t W) { return (H - 1) * (W + 2) + W; }

// buf (padded out plane) += 3x3 taps of w9 applied to xp (padded in plane).
template <typename T>
void same3_plane_fma(T* __restrict buf, const T* __restrict xp, const T* w9, std::int64_t H,
                     std::int64_t W) {
  const std::int64_t P = W + 2;
  const std::int64_t start = P + 1;
  const std::int64_t n = same3_run(H, W);
  const T w00 = w9[0], w01 = w9[1], w02 = w9[2];
  const T w10 = w9[3], w11 = w9[4], w12 = w9[5];
  const T w20 = w9[6], w21 = w9[7], w22 = w9[8];
  const T* __restrict x0 = xp + start - P - 1;
  const T* __restrict x1 = xp + start - 1;
  const T* __restrict x2 = xp + start + P - 1;
  T* __restrict o = buf + start;
  for (std::int64_t i = 0; i < n; ++i) {
    const T a = w00 * x0[i] + w01 * x0[i + 1] + w02 * x0[i + 2];
    const T b = w10 * x1[i] + w11 * x1[i + 1] + w12 * x1[i + 2];
    const T c = w20 * x2[i] + w21 * x2[i + 1] + w22 * x2[i + 2];
    o[i] += a + b + c;
  }
}

template <typename T>
void conv3d_same3_forward(const T* x, const T* w, const T* bias, T* out, const ConvDims& d) {
  const std::int64_t H = d.H, W = d.W, P = W + 2, PH = H + 2;
  const std::int64_t plane = PH * P, slab = (d.D + 2) * plane;
  const std::int64_t HW = H * W;
  const std::vector<T> xp = pad1_slabs(x, d.B * d.Cin, d.D, H, W);
  const T* xpd = xp.data();
  parallel_for(d.B * d.Cout, [&](std::int64_t task) {
    const std::int64_t b = task / d.Cout, co = task % d.Cout;
    std::vector<T> buf(static_cast<std::size_t>(plane));
    T* o = out + task * d.D * HW;
    for (std::int64_t od = 0; od < d.D; ++od) {
      std::fill(buf.begin(), buf.end(), T(0));
      for (std::int64_t ci = 0; ci < d.Cin; ++ci) {
        const T* xslab = xpd + (b * d.Cin + ci) * slab;
        const T* wc = w + ((co * d.Cin + ci) * 3) * 9;
        for (std::int64_t kd = 0; kd < 3; ++kd)
          same3_plane_fma(buf.data(), xslab + (od + kd) * plane, wc + kd * 9, H, W);
      }
      const T bv = bias ? bias[co] : T(0);
      T* oplane = o + od * HW;
      for (std::int64_t h = 0; h < H; ++h) {
        const T* br = buf.data() + (h + 1) * P + 1;
        T* orow = oplane + h * W;
        for (std::int64_t ww = 0; ww < W; ++ww) orow[ww] = br[ww] + bv;
      }
    }
  });
}

template <typename T>
void conv3d_same3_backward_input(const T* g, const T* w, T* gx, const ConvDims& d) {
  const std::int64_t H = d.H, W = d.W, P = W + 2, PH = H + 2;
  const std::int64_t plane = PH * P, slab = (d.D + 2) * plane;
  const std::int64_t HW = H * W;
  const std::vector<T> gp = pad1_slabs(g, d.B * d.Cout, d.D, H, W);
  const T* gpd = gp.data();
  parallel_for(d.B * d.Cin, [&](std::int64_t task) {
    const std::int64_t b = task / d.Cin, ci = task % d.Cin;
    std::vector<T> buf(static_cast<std::size_t>(plane));
    T w9f[9];
    T* gxi = gx + task * d.D * HW;
    for (std::int64_t id = 0; id < d.D; ++id) {
      std::fill(buf.begin(), buf.end(), T(0));
      for (std::int64_t co = 0; co < d.Cout; ++co) {
        const T* gslab = gpd + (b * d.Cout + co) * slab;
        const T* wc = w + ((co * d.Cin + ci) * 3) * 9;
        for (std::int64_t kd = 0; kd < 3; ++kd) {
          // transposed correlation: taps flipped on every axis
          const T* wk = wc + (2 - kd) * 9;
          for (std::int64_t kh = 0; kh < 3; ++kh)
            for (std::int64_t kw = 0; kw < 3; ++kw) w9f[kh * 3 + kw] = wk[(2 - kh) * 3 + (2 - kw)];
          same3_plane_fma(buf.data(), gslab + (id + kd) * plane, w9f, H, W);
        }
      }
      T* gxplane = gxi + id * HW;
      for (std::int64_t h = 0; h < H; ++h)
        std::memcpy(gxplane + h * W, buf.data() + (h + 1) * P + 1,
                    static_cast<std::size_t>(W) * sizeof(T));
    }
  });
}

template <typename T>
void conv3d_same3_backward_weight(const T* g, const T* x, T* gw, const ConvDims& d) {
  constexpr std::int64_t kLanes = kSumLanes<T>;
  const std::int64_t H = d.H, W = d.W, P = W + 2, PH = H + 2;
  const std::int64_t plane = PH * P, slab = (d.D + 2) * plane;
  const std::int64_t n = same3_run(H, W), start = P + 1;
  const std::vector<T> xp = pad1_slabs(x, d.B * d.Cin, d.D, H, W);
  const std::vector<T> gp = pad1_slabs(g, d.B * d.Cout, d.D, H, W);
  const T* xpd = xp.data();
  const T* gpd = gp.data();
  parallel_for(d.Cout * d.Cin, [&](std::int64_t task) {
    const std::int64_t co = task / d.Cin, ci = task % d.Cin;
    T acc[27] = {};
    for (std::int64_t b = 0; b < d.B; ++b) {
      const T* xslab = xpd + (b * d.Cin + ci) * slab;
      const T* gslab = gpd + (b * d.Cout + co) * slab;
      for (std::int64_t od = 0; od < d.D; ++od) {
        // pad cells of the g plane are zero, so the fused dot over the padded
        // run equals the exact tap correlation
        const T* __restrict gpl = gslab + (od + 1) * plane + start;
        for (std::int64_t kd = 0; kd < 3; ++kd) {
          const T* xpl = xslab + (od + kd) * plane + start;
          for (std::int64_t kh = 0; kh < 3; ++kh)
            for (std::int64_t kw = 0; kw < 3; ++kw) {
              const T* __restrict xs = xpl + (kh - 1) * P + (kw - 1);
              T lanes[kLanes] = {};
              std::int64_t i = 0;
              for (; i + kLanes <= n; i += kLanes)
                for (std::int64_t v = 0; v < kLanes; ++v) lanes[v] += gpl[i + v] * xs[i + v];
              T tail = T(0);
              for (; i < n; ++i) tail += gpl[i] * xs[i];
              T dot = tail;
              for (std::int64_t v = 0; v < kLanes; ++v) dot += lanes[v];
              acc[kd * 9 + kh * 3 + kw] += dot;
            }
        }
      }
    }
    T* gwc = gw + task * 27;
    for (std::int64_t k = 0; k < 27; ++k) gwc[k] = acc[k];
  });
}

// Dispatchers used by forward and the recorded backward closure.
template <typename T>
void conv3d_forward_any(const T* x, const T* w, const T* bias, T* out, const ConvDims& d) {
  if (conv3d_is_same3(d))
    conv3d_same3_forward(x, w, bias, out, d);
  else
    conv3d_forward_kernel(x, w, bias, out, d);
}

template <typename T>
void conv3d_backward_input_any(const T* g, const T* w, T* gx, const ConvDims& d) {
  if (conv3d_is_same3(d))
    conv3d_same3_backward_input(g, w, gx, d);
  else
    conv3d_backward_input_kernel(g, w, gx, d);
}

template <typename T>
void conv3d_backward_weight_any(const T* g, const T* x, T* gw, const ConvDims& d) {
  if (conv3d_is_same3(d))
    conv3d_same3_backward_weight(g, x, gw, d);
  else
    conv3d_backward_weight_kernel(g, x, gw, d);
}

template <typename T>
void conv3d_backward_bias_kernel(const T* g, T* gb, const ConvDims& d) {
  const std::int64_t DoHoWo = d.Do * d.Ho * d.Wo;
  parallel_for(d.Cout, [&](std::int64_t co) {
    T acc = T(0);
    for (std::int64_t b = 0; b < d.B; ++b) {
      const T* gi = g + (b * d.Cout + co) * DoHoWo;
      acc += block_sum(gi, DoHoWo);
    }
    gb[co] = acc;
  });
}

}  // namespace detail

/// 3-D convolution over [B,Cin,D,H,W] with weight [Cout,Cin,kd,kh,kw] and
/// optional bias [Cout]. Zero padding, equal stride/padding on all axes.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w,
                 std::type_identity_t<const Tensor<T>*> bias, std::int64_t stride = 1,
                 std::int64_t padding = 0) {
  detail::check_strict_input(x, "conv3d");
  detail::check_strict_input(w, "conv3d");
  if (bias) detail::check_strict_input(*bias, "conv3d");
  const detail::ConvDims d = detail::conv3d_dims(x, w, bias, stride, padding);
  Tensor<T> out({d.B, d.Cout, d.Do, d.Ho, d.Wo});
  detail::conv3d_forward_any(x.data(), w.data(), bias ? bias->data() : nullptr, out.data(), d);

  Tape<T>* tape = detail::common_tape<T>({&x, &w, bias});
  if (!tape) return out;
  const Tensor<T> xv = x.detached(), wv = w.detached();
  const std::int32_t xn = x.node(), wn = w.node();
  const std::int32_t bn = bias ? bias->node() : -1;
  const Shape bias_shape = bias ? bias->shape() : Shape{};
  return tape->record(out, [=](Tape<T>& tp, const Tensor<T>& g) {
    if (xn >= 0) {
      Tensor<T> gx(xv.shape());
      detail::conv3d_backward_input_any(g.data(), wv.data(), gx.data(), d);
      tp.accumulate(xn, std::move(gx));
    }
    if (wn >= 0) {
      Tensor<T> gw(wv.shape());
      detail::conv3d_backward_weight_any(g.data(), xv.data(), gw.data(), d);
      tp.accumulate(wn, std::move(gw));
    }
    if (bn >= 0) {
      Tensor<T> gb(bias_shape);
      detail::conv3d_backward_bias_kernel(g.data(), gb.data(), d);
      tp.accumulate(bn, std::move(gb));
    }
  });
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::int64_t stride = 1, std::int64_t padding = 0) {
  return conv3d(x, w, &bias, stride, padding);
}

/// 2x2x2 max pooling with stride 2 over [B,C,D,H,W]. Odd trailing extents are
/// truncated. Ties pick the first element in (d,h,w) scan order.
template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& x) {
  detail::check_strict_input(x, "maxpool3d");
  if (x.rank() != 5) throw ShapeError("maxpool3d: input must be [B,C,D,H,W], got " + shape_str(x.shape()));
  const std::int64_t B = x.extent(0), C = x.extent(1);
  const std::int64_t D = x.extent(2), H = x.extent(3), W = x.extent(4);
  const std::int64_t Do = D / 2, Ho = H / 2, Wo = W / 2;
  if (Do < 1 || Ho < 1 || Wo < 1)
    throw ShapeError("maxpool3d: spatial extents must be >= 2, got " + shape_str(x.shape()));
  Tensor<T> out({B, C, Do, Ho, Wo});
  auto indices = std::make_shared<std::vector<std::int64_t>>(out.numel());
  const std::int64_t HW = H * W, DHW = D * HW;
  const std::int64_t HoWo = Ho * Wo, DoHoWo = Do * HoWo;
  const T* xd = x.data();
  T* od_ = out.data();
  std::int64_t* idx = indices->data();
  parallel_for(B * C, [&](std::int64_t task) {
    const T* xi = xd + task * DHW;
    T* oi = od_ + task * DoHoWo;
    std::int64_t* ii = idx + task * DoHoWo;
    for (std::int64_t od = 0; od < Do; ++od)
      for (std::int64_t oh = 0; oh < Ho; ++oh)
        for (std::int64_t ow = 0; ow < Wo; ++ow) {
          T best{};
          std::int64_t best_at = -1;
          for (std::int64_t kd = 0; kd < 2; ++kd)
            for (std::int64_t kh = 0; kh < 2; ++kh)
              for (std::int64_t kw = 0; kw < 2; ++kw) {
                const std::int64_t at = (od * 2 + kd) * HW + (oh * 2 + kh) * W + (ow * 2 + kw);
                const T v = xi[at];
                if (best_at < 0 || v > best) { best = v; best_at = at; }
              }
          const std::int64_t o = od * HoWo + oh * Wo + ow;
          oi[o] = best;
          ii[o] = task * DHW + best_at;
        }
  });
  if (!x.on_tape()) return out;
  const Shape xs = x.shape();
  const std::int32_t xn = x.node();
  const std::int64_t n_out = out.numel();
  return x.tape()->record(out, [=](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T> gx(xs);
    T* gxd = gx.data();
    const T* gd = g.data();
    const std::int64_t* ix = indices->data();
    for (std::int64_t i = 0; i < n_out; ++i) gxd[ix[i]] += gd[i];
    tp.accumulate(xn, std::move(gx));
  });
}

namespace detail {

// Source taps for one upsampled axis: out extent = 2*in, half-pixel centers
// (align_corners = false). lo/hi are clamped source indices, t the blend.
template <typename T>
struct UpAxis {
  std::vector<std::int64_t> lo, hi;
  std::vector<T> t;
};

template <typename T>
UpAxis<T> upsample_axis(std::int64_t in) {
  UpAxis<T> a;
  const std::int64_t out = in * 2;
  a.lo.resize(out); a.hi.resize(out); a.t.resize(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double s = (static_cast<double>(o) + 0.5) * 0.5 - 0.5;
    if (s < 0.0) s = 0.0;
    const std::int64_t lo = static_cast<std::int64_t>(s);
    a.lo[o] = lo;
    a.hi[o] = std::min(lo + 1, in - 1);
    a.t[o] = static_cast<T>(s - static_cast<double>(lo));
  }
  return a;
}

}  // namespace detail

/// Trilinear upsampling by exactly 2x on each spatial axis of [B,C,D,H,W],
/// with half-pixel alignment.
template <typename T>
Tensor<T> upsample_trilinear2x(const Tensor<T>& x) {
  detail::check_strict_input(x, "upsample_trilinear2x");
  if (x.rank() != 5)
    throw ShapeError("upsample_trilinear2x: input must be [B,C,D,H,W], got " + shape_str(x.shape()));
  const std::int64_t B = x.extent(0), C = x.extent(1);
  const std::int64_t D = x.extent(2), H = x.extent(3), W = x.extent(4);
  const std::int64_t Do = D * 2, Ho = H * 2, Wo = W * 2;
  Tensor<T> out({B, C, Do, Ho, Wo});
  const auto ad = detail::upsample_axis<T>(D);
  const auto ah = detail::upsample_axis<T>(H);
  const auto aw = detail::upsample_axis<T>(W);
  const std::int64_t HW = H * W, DHW = D * HW;
  const std::int64_t HoWo = Ho * Wo, DoHoWo = Do * HoWo;
  const T* xd = x.data();
  T* od_ = out.data();
  parallel_for(B * C, [&](std::int64_t task) {
    const T* xi = xd + task * DHW;
    T* oi = od_ + task * DoHoWo;
    for (std::int64_t od = 0; od < Do; ++od) {
      const T td = ad.t[od];
      const T* x0 = xi + ad.lo[od] * HW;
      const T* x1 = xi + ad.hi[od] * HW;
      for (std::int64_t oh = 0; oh < Ho; ++oh) {
        const T th = ah.t[oh];
        const std::int64_t h0 = ah.lo[oh] * W, h1 = ah.hi[oh] * W;
        T* orow = oi + od * HoWo + oh * Wo;
        for (std::int64_t ow = 0; ow < Wo; ++ow) {
          const T tw = aw.t[ow];
          const std::int64_t w0 = aw.lo[ow], w1 = aw.hi[ow];
          const T c00 = x0[h0 + w0] + tw * (x0[h0 + w1] - x0[h0 + w0]);
          const T c01 = x0[h1 + w0] + tw * (x0[h1 + w1] - x0[h1 + w0]);
          const T c10 = x1[h0 + w0] + tw * (x1[h0 + w1] - x1[h0 + w0]);
          const T c11 = x1[h1 + w0] + tw * (x1[h1 + w1] - x1[h1 + w0]);
          const T c0 = c00 + th * (c01 - c00);
          const T c1 = c10 + th * (c11 - c10);
          orow[ow] = c0 + td * (c1 - c0);
        }
      }
    }
  });
  if (!x.on_tape()) return out;
  const Shape xs = x.shape();
  const std::int32_t xn = x.node();
  return x.tape()->record(out, [=](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T> gx(xs);
    const T* gd = g.data();
    T* gxd = gx.data();
    parallel_for(B * C, [&](std::int64_t task) {
      const T* gi = gd + task * DoHoWo;
      T* gxi = gxd + task * DHW;  // owned slab, zero on entry
      for (std::int64_t od = 0; od < Do; ++od) {
        const T td = ad.t[od];
        T* g0 = gxi + ad.lo[od] * HW;
        T* g1 = gxi + ad.hi[od] * HW;
        for (std::int64_t oh = 0; oh < Ho; ++oh) {
          const T th = ah.t[oh];
          const std::int64_t h0 = ah.lo[oh] * W, h1 = ah.hi[oh] * W;
          const T* grow = gi + od * HoWo + oh * Wo;
          for (std::int64_t ow = 0; ow < Wo; ++ow) {
            const T tw = aw.t[ow];
            const std::int64_t w0 = aw.lo[ow], w1 = aw.hi[ow];
            const T gv = grow[ow];
            const T gd0 = gv * (T(1) - td), gd1 = gv * td;
            g0[h0 + w0] += gd0 * (T(1) - th) * (T(1) - tw);
            g0[h0 + w1] += gd0 * (T(1) - th) * tw;
            g0[h1 + w0] += gd0 * th * (T(1) - tw);
            g0[h1 + w1] += gd0 * th * tw;
            g1[h0 + w0] += gd1 * (T(1) - th) * (T(1) - tw);
            g1[h0 + w1] += gd1 * (T(1) - th) * tw;
            g1[h1 + w0] += gd1 * th * (T(1) - tw);
            g1[h1 + w1] += gd1 * th * tw;
          }
        }
      }
    });
    tp.accumulate(xn, std::move(gx));
  });
}

/// Mean over the spatial axes of [B,C,D,H,W] -> [B,C].
template <typename T>
Tensor<T> global_avg_pool3d(const Tensor<T>& x) {
  if (x.rank() != 5)
    throw ShapeError("global_avg_pool3d: input must be [B,C,D,H,W], got " + shape_str(x.shape()));
  return mean(x, {2, 3, 4}, false);
}

}  // namespace nnm
