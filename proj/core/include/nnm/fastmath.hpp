#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>

namespace nnm {

/// Branch-free exp approximation for float, ~2e-7 max relative error.
/// Vectorizes under -O3; used in f32 inner loops (scan decays, gates) where
/// libm exp would dominate the runtime. The float64 path always uses the
/// libm exp, which is what the discretization accuracy tests check against.
inline float fast_expf(float x) {
  x = x < 88.0f ? x : 88.0f;
  x = x > -87.0f ? x : -87.0f;
  const float log2e = 1.442695041f;
  const float ln2_hi = 0.693359375f;
  const float ln2_lo = -2.12194440e-4f;
  float n = x * log2e;
  n = n >= 0.f ? static_cast<float>(static_cast<int>(n + 0.5f))
               : static_cast<float>(static_cast<int>(n - 0.5f));
  float r = x - n * ln2_hi;
  r = r - n * ln2_lo;
  // degree-6 Taylor on |r| <= ln2/2
  float p = 1.0f / 720.0f;
  p = p * r + 1.0f / 120.0f;
  p = p * r + 1.0f / 24.0f;
  p = p * r + 1.0f / 6.0f;
  p = p * r + 0.5f;
  p = p * r + 1.0f;
  p = p * r + 1.0f;
  const std::int32_t bits = (static_cast<std::int32_t>(n) + 127) << 23;
  float scale;
  std::memcpy(&scale, &bits, sizeof(scale));
  return p * scale;
}

template <typename T>
inline T vexp(T x) {
  if constexpr (sizeof(T) == sizeof(float))
    return fast_expf(x);
  else
    return std::exp(x);
}

template <typename T>
inline T sigmoid_val(T x) {
  const T e = vexp(-(x < T(0) ? -x : x));
  const T s = T(1) / (T(1) + e);
  return x >= T(0) ? s : T(1) - s;
}

template <typename T>
inline T softplus_val(T x) {
  // max(x,0) + log1p(exp(-|x|)) is stable at both tails
  const T ax = x < T(0) ? -x : x;
  const T base = x > T(0) ? x : T(0);
  return base + std::log1p(vexp(-ax));
}

template <typename T>
inline T silu_val(T x) {
  return x * sigmoid_val(x);
}

}  // namespace nnm
