#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "nnm/common.hpp"
#include "nnm/ops.hpp"
#include "nnm/tensor.hpp"

namespace nnm {

inline constexpr double kDiceSmooth = 1e-5;

/// target: integer-valued class indices, any shape; returns one-hot with the
/// class axis inserted at position 1 (so [B,...] -> [B,K,...]).
template <typename T>
Tensor<T> one_hot(const Tensor<T>& target, std::int64_t num_classes) {
  const Shape& s = target.shape();
  if (s.empty()) throw ShapeError("one_hot: target must have a batch axis");
  Shape out_shape;
  out_shape.push_back(s[0]);
  out_shape.push_back(num_classes);
  for (std::size_t i = 1; i < s.size(); ++i) out_shape.push_back(s[i]);
  Tensor<T> out(out_shape);
  const std::int64_t B = s[0];
  const std::int64_t inner = target.numel() / B;
  const T* tp = target.data();
  T* op = out.data();
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t cls = static_cast<std::int64_t>(tp[b * inner + i]);
      if (cls < 0 || cls >= num_classes)
        throw ShapeError("one_hot: class index " + std::to_string(cls) + " out of range [0, " +
                         std::to_string(num_classes) + ")");
      op[(b * num_classes + cls) * inner + i] = T(1);
    }
  }
  return out;
}

/// Mean voxel cross-entropy between logits [B,K,...] and integer targets
/// [B,...].
template <typename T>
Tensor<T> ce_seg_loss(const Tensor<T>& logits, const Tensor<T>& target) {
  const std::int64_t K = logits.extent(1);
  Tensor<T> oh = one_hot(target, K);
  if (oh.shape() != logits.shape())
    throw ShapeError("ce_seg_loss: logits " + shape_str(logits.shape()) + " vs target-derived " +
                     shape_str(oh.shape()));
  const T inv = T(1) / static_cast<T>(logits.numel() / K);
  return mul_scalar(neg(sum(mul(oh, log_softmax(logits, 1)))), inv);
}

/// Soft multi-class Dice loss: 1 - mean_k dice_k with batch-pooled per-class
/// overlap sums and the standard smooth term.
template <typename T>
Tensor<T> soft_dice_loss(const Tensor<T>& logits, const Tensor<T>& target) {
  const std::int64_t K = logits.extent(1);
  Tensor<T> oh = one_hot(target, K);
  if (oh.shape() != logits.shape())
    throw ShapeError("soft_dice_loss: logits " + shape_str(logits.shape()) +
                     " vs target-derived " + shape_str(oh.shape()));
  Tensor<T> probs = exp(log_softmax(logits, 1));
  Shape starts(logits.rank(), 0), stops = logits.shape();
  Tensor<T> acc = Tensor<T>::scalar(T(0));
  const T smooth = static_cast<T>(kDiceSmooth);
  for (std::int64_t k = 0; k < K; ++k) {
    starts[1] = k;
    stops[1] = k + 1;
    Tensor<T> pk = slice(probs, starts, stops);
    Tensor<T> tk = slice(oh, starts, stops);
    Tensor<T> inter = sum(mul(pk, tk));
    Tensor<T> denom = add(sum(pk), sum(tk));
    Tensor<T> dk = div(add_scalar(mul_scalar(inter, T(2)), smooth), add_scalar(denom, smooth));
    acc = add(acc, dk);
  }
  return add_scalar(mul_scalar(acc, T(-1) / static_cast<T>(K)), T(1));
}

/// Equal-weight mean of cross-entropy and soft Dice.
template <typename T>
Tensor<T> dice_ce_loss(const Tensor<T>& logits, const Tensor<T>& target) {
  return mul_scalar(add(ce_seg_loss(logits, target), soft_dice_loss(logits, target)), T(0.5));
}

/// Mean squared error over every channel and voxel.
template <typename T>
Tensor<T> heatmap_mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape())
    throw ShapeError("heatmap_mse_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                     shape_str(target.shape()));
  Tensor<T> d = sub(pred, target);
  return mean(mul(d, d));
}

/// Mean cross-entropy for classification logits [B,K] and integer labels
/// [B].
template <typename T>
Tensor<T> ce_cls_loss(const Tensor<T>& logits, const Tensor<T>& labels) {
  if (logits.rank() != 2 || labels.rank() != 1 || labels.extent(0) != logits.extent(0))
    throw ShapeError("ce_cls_loss: want logits [B,K], labels [B], got " +
                     shape_str(logits.shape()) + " and " + shape_str(labels.shape()));
  Tensor<T> oh = one_hot(labels, logits.extent(1));
  const T inv = T(1) / static_cast<T>(logits.extent(0));
  return mul_scalar(neg(sum(mul(oh, log_softmax(logits, 1)))), inv);
}

/// Gaussian heatmap targets, one channel per landmark: peak 1.0 at the
/// landmark, sigma in voxels, coordinates in mm ((d,h,w) order).
template <typename T>
Tensor<T> make_heatmap_target(const std::vector<std::array<float, 3>>& lm_mm, std::int64_t D,
                              std::int64_t H, std::int64_t W, double sigma = 2.0,
                              double spacing = 1.0) {
  const std::int64_t K = static_cast<std::int64_t>(lm_mm.size());
  Tensor<T> out({K, D, H, W});
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  for (std::int64_t k = 0; k < K; ++k) {
    const double cd = lm_mm[static_cast<std::size_t>(k)][0] / spacing;
    const double ch = lm_mm[static_cast<std::size_t>(k)][1] / spacing;
    const double cw = lm_mm[static_cast<std::size_t>(k)][2] / spacing;
    T* p = out.data() + k * D * H * W;
    for (std::int64_t d = 0; d < D; ++d)
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w) {
          const double r2 = (d - cd) * (d - cd) + (h - ch) * (h - ch) + (w - cw) * (w - cw);
          p[(d * H + h) * W + w] = static_cast<T>(std::exp(-r2 * inv2s2));
        }
  }
  return out;
}

}  // namespace nnm
