#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "nnm/common.hpp"
#include "nnm/model.hpp"
#include "nnm/rng.hpp"
#include "nnm/tensor.hpp"

namespace nnm {

/// One synthetic volume with its task-specific label. `image` is [C,D,H,W];
/// exactly one of mask / label / landmarks is meaningful depending on `task`.
/// Landmark coordinates are (d,h,w) in mm.
struct VolumeSample {
  Task task = Task::kSegmentation;
  Tensor<float> image;
  std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
  Tensor<float> mask;  // [D,H,W], integer class ids stored as floats
  std::int64_t label = -1;
  std::vector<std::array<float, 3>> landmarks;
};

struct DatasetSpec {
  Task task = Task::kSegmentation;
  std::int64_t n_samples = 100;
  std::int64_t size = 32;  // cubic edge, voxels
  double noise_sigma = 0.05;
  std::array<double, 3> ratios{0.7, 0.1, 0.2};  // train/val/test
  std::uint64_t seed = 0;
};

struct SplitIndices {
  std::vector<std::int64_t> train, val, test;
};

inline constexpr std::int64_t kSegClasses = 4;  // background + 3 nested shells
inline constexpr std::int64_t kNumLandmarks = 6;

/// Nested concentric ellipsoid shells; voxel class by normalized radius,
/// one intensity level per class plus optional Gaussian noise.
VolumeSample gen_seg_sample(std::int64_t size, double noise_sigma, Rng& rng);

/// Two disjoint equal-intensity blobs, one in the front half and one in the
/// back half along d; the label says which has the larger analytic volume
/// (1 = front). Blob volumes are resampled until they differ by >= 1.3x.
VolumeSample gen_cls_sample(std::int64_t size, double noise_sigma, Rng& rng);

/// A single axis-aligned ellipsoid; the six landmarks are its axis endpoints
/// in the order -d,+d,-h,+h,-w,+w, snapped to a quarter-voxel grid.
VolumeSample gen_landmark_sample(std::int64_t size, double noise_sigma, Rng& rng);

/// n_samples volumes, sample i drawn from Rng::derive(spec.seed, i).
std::vector<VolumeSample> gen_dataset(const DatasetSpec& spec);

/// Deterministic shuffled split into contiguous ranges of the permutation.
/// Boundary k sits at ceil(n * cumulative_ratio_k), so every ratio gets at
/// least one sample whenever n * ratio > 0. Ratios must be nonnegative and
/// sum to 1.
SplitIndices split_indices(std::int64_t n, const std::array<double, 3>& ratios,
                           std::uint64_t seed);

/// Mirrors a sample along spatial axis 0..2 (d,h,w). Landmark channels are
/// swapped in (-,+) pairs for the flipped axis and the cls label inverts on a
/// d flip, so flipping twice returns the original sample bit for bit.
VolumeSample flip_sample(const VolumeSample& s, std::int64_t axis);

/// Single-volume container format, magic "NMV1", little-endian.
void write_volume(const std::string& path, const VolumeSample& s);
VolumeSample read_volume(const std::string& path);

/// Gathers samples[idx] into batch tensors.
Tensor<float> batch_images(const std::vector<VolumeSample>& samples,
                           const std::vector<std::int64_t>& idx);
Tensor<float> batch_masks(const std::vector<VolumeSample>& samples,
                          const std::vector<std::int64_t>& idx);
Tensor<float> batch_labels(const std::vector<VolumeSample>& samples,
                           const std::vector<std::int64_t>& idx);

}  // namespace nnm
