#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nnm/common.hpp"
#include "nnm/tensor.hpp"

namespace nnm {

/// Ordered name -> value map plus confusion counts for classification.
struct MetricReport {
  std::vector<std::pair<std::string, double>> values;
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  bool has_counts = false;

  void set(const std::string& name, double v);
  bool has(const std::string& name) const;
  double get(const std::string& name) const;  // MetricError if absent
  std::string to_json() const;
};

/// Dice overlap 2|P∩G|/(|P|+|G|) between binary masks (nonzero =
/// foreground). Both empty -> 1.0; exactly one empty -> 0.0.
double dice(const Tensor<float>& pred, const Tensor<float>& gt);

/// 95th percentile (linear interpolation) of the pooled bidirectional
/// boundary nearest-neighbor distances between nonempty 3-D masks [D,H,W],
/// scaled by voxel spacing. Boundary = mask voxel with a 6-neighbor outside
/// the mask (volume border counts as outside). Throws MetricError on an
/// empty mask: the distance set is undefined.
double hd95(const Tensor<float>& pred, const Tensor<float>& gt, double spacing = 1.0);

/// Landmark localization error: per-heatmap argmax voxel (ties -> lowest
/// linear index) scaled to mm, against ground-truth coordinates (d,h,w mm).
struct MreResult {
  std::vector<double> per_landmark;
  double mean = 0.0;
};
MreResult mre(const Tensor<float>& heatmaps,  // [K, D, H, W]
              const std::vector<std::array<float, 3>>& gt_mm, double spacing = 1.0);

/// Binary-classification metrics from scores in [0,1] and 0/1 labels.
/// Threshold 0.5 for the confusion counts; AUC via the Mann-Whitney rank
/// statistic with ties counting 1/2. A single-class label set has no ROC:
/// MetricError. A zero denominator reports the metric as 0 and sets the
/// companion "<name>_undefined" flag to 1.
MetricReport cls_metrics(const std::vector<double>& scores, const std::vector<int>& labels);

namespace detail {
/// Squared Euclidean distance transform of a 3-D 0/1 seed mask (distance to
/// the nearest seed), exact, via per-axis lower-envelope passes.
void edt3_sq(const std::vector<float>& seeds, std::int64_t D, std::int64_t H, std::int64_t W,
             std::vector<double>& out);
}  // namespace detail

}  // namespace nnm
