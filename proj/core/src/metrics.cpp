#include "nnm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace nnm {

void MetricReport::set(const std::string& name, double v) {
  for (auto& [n, old] : values) {
    if (n == name) {
      old = v;
      return;
    }
  }
  values.emplace_back(name, v);
}

bool MetricReport::has(const std::string& name) const {
  for (const auto& [n, v] : values)
    if (n == name) return true;
  return false;
}

double MetricReport::get(const std::string& name) const {
  for (const auto& [n, v] : values)
    if (n == name) return v;
  throw MetricError("metric not present in report: " + name);
}

std::string MetricReport::to_json() const {
  std::string out = "{";
  bool first = true;
  char buf[64];
  for (const auto& [n, v] : values) {
    if (!first) out += ", ";
    first = false;
    std::snprintf(buf, sizeof buf, "%.10g", v);
    out += "\"" + n + "\": " + buf;
  }
  if (has_counts) {
    if (!first) out += ", ";
    out += "\"tp\": " + std::to_string(tp) + ", \"fp\": " + std::to_string(fp) +
           ", \"tn\": " + std::to_string(tn) + ", \"fn\": " + std::to_string(fn);
  }
  out += "}";
  return out;
}

double dice(const Tensor<float>& pred, const Tensor<float>& gt) {
  if (pred.shape() != gt.shape())
    throw ShapeError("dice: shape mismatch " + shape_str(pred.shape()) + " vs " +
                     shape_str(gt.shape()));
  std::int64_t p = 0, g = 0, both = 0;
  const float* pp = pred.data();
  const float* gp = gt.data();
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const bool pv = pp[i] != 0.0f, gv = gp[i] != 0.0f;
    p += pv;
    g += gv;
    both += pv && gv;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

namespace detail {

namespace {

// One lower-envelope pass of the squared-distance transform along a line:
// out[q] = min_p (f[p] + (q-p)^2).
void dt1(const double* f, std::int64_t n, std::int64_t stride, double* out, std::int64_t* v,
         double* z) {
  std::int64_t k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (std::int64_t q = 1; q < n; ++q) {
    const double fq = f[q * stride] + static_cast<double>(q) * q;
    while (true) {
      const std::int64_t p = v[k];
      const double s =
          (fq - (f[p * stride] + static_cast<double>(p) * p)) / (2.0 * (q - p));
      if (s <= z[k]) {
        --k;
        continue;
      }
      ++k;
      v[k] = q;
      z[k] = s;
      z[k + 1] = std::numeric_limits<double>::infinity();
      break;
    }
  }
  k = 0;
  for (std::int64_t q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const std::int64_t p = v[k];
    const double d = static_cast<double>(q - p);
    out[q * stride] = d * d + f[p * stride];
  }
}

}  // namespace

void edt3_sq(const std::vector<float>& seeds, std::int64_t D, std::int64_t H, std::int64_t W,
             std::vector<double>& out) {
  // Large finite sentinel: lines with no seed keep finite parabola heights,
  // so the envelope intersections never hit inf - inf. Any real squared
  // distance in a <= 4096^3 volume stays far below it.
  const double inf = 1e20;
  out.assign(static_cast<std::size_t>(D * H * W), inf);
  for (std::int64_t i = 0; i < D * H * W; ++i)
    if (seeds[static_cast<std::size_t>(i)] != 0.0f) out[static_cast<std::size_t>(i)] = 0.0;
  const std::int64_t n_max = std::max({D, H, W});
  std::vector<double> f(static_cast<std::size_t>(n_max));
  std::vector<double> tmp(static_cast<std::size_t>(n_max));
  std::vector<std::int64_t> v(static_cast<std::size_t>(n_max));
  std::vector<double> z(static_cast<std::size_t>(n_max + 1));
  // along W
  for (std::int64_t d = 0; d < D; ++d)
    for (std::int64_t h = 0; h < H; ++h) {
      double* row = out.data() + (d * H + h) * W;
      std::copy(row, row + W, f.data());
      dt1(f.data(), W, 1, row, v.data(), z.data());
    }
  // along H
  for (std::int64_t d = 0; d < D; ++d)
    for (std::int64_t w = 0; w < W; ++w) {
      double* col = out.data() + d * H * W + w;
      for (std::int64_t h = 0; h < H; ++h) f[static_cast<std::size_t>(h)] = col[h * W];
      dt1(f.data(), H, 1, tmp.data(), v.data(), z.data());
      for (std::int64_t h = 0; h < H; ++h) col[h * W] = tmp[static_cast<std::size_t>(h)];
    }
  // along D
  for (std::int64_t h = 0; h < H; ++h)
    for (std::int64_t w = 0; w < W; ++w) {
      double* col = out.data() + h * W + w;
      for (std::int64_t d = 0; d < D; ++d) f[static_cast<std::size_t>(d)] = col[d * H * W];
      dt1(f.data(), D, 1, tmp.data(), v.data(), z.data());
      for (std::int64_t d = 0; d < D; ++d) col[d * H * W] = tmp[static_cast<std::size_t>(d)];
    }
}

namespace {

std::vector<float> boundary_mask(const Tensor<float>& mask, std::int64_t D, std::int64_t H,
                                 std::int64_t W) {
  std::vector<float> out(static_cast<std::size_t>(D * H * W), 0.0f);
  const float* m = mask.data();
  auto inside = [&](std::int64_t d, std::int64_t h, std::int64_t w) {
    if (d < 0 || d >= D || h < 0 || h >= H || w < 0 || w >= W) return false;
    return m[(d * H + h) * W + w] != 0.0f;
  };
  for (std::int64_t d = 0; d < D; ++d)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w) {
        if (m[(d * H + h) * W + w] == 0.0f) continue;
        const bool b = !inside(d - 1, h, w) || !inside(d + 1, h, w) || !inside(d, h - 1, w) ||
                       !inside(d, h + 1, w) || !inside(d, h, w - 1) || !inside(d, h, w + 1);
        if (b) out[static_cast<std::size_t>((d * H + h) * W + w)] = 1.0f;
      }
  return out;
}

// Percentile with linear interpolation on the sorted sample, q in [0,1].
double percentile(std::vector<double>& xs, double q) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  if (n == 1) return xs[0];
  const double rank = q * static_cast<double>(n - 1);
  const std::size_t lo = static_cast<std::size_t>(rank);
  const std::size_t hi = std::min(lo + 1, n - 1);
  const double frac = rank - static_cast<double>(lo);
  return xs[lo] + frac * (xs[hi] - xs[lo]);
}

}  // namespace

}  // namespace detail

double hd95(const Tensor<float>& pred, const Tensor<float>& gt, double spacing) {
  if (pred.shape() != gt.shape())
    throw ShapeError("hd95: shape mismatch " + shape_str(pred.shape()) + " vs " +
                     shape_str(gt.shape()));
  if (pred.rank() != 3)
    throw ShapeError("hd95: masks must be [D,H,W], got " + shape_str(pred.shape()));
  const std::int64_t D = pred.extent(0), H = pred.extent(1), W = pred.extent(2);
  bool any_p = false, any_g = false;
  for (std::int64_t i = 0; i < pred.numel() && !(any_p && any_g); ++i) {
    any_p = any_p || pred.data()[i] != 0.0f;
    any_g = any_g || gt.data()[i] != 0.0f;
  }
  if (!any_p || !any_g) throw MetricError("hd95: undefined distance for an empty mask");
  const std::vector<float> bp = detail::boundary_mask(pred, D, H, W);
  const std::vector<float> bg = detail::boundary_mask(gt, D, H, W);
  std::vector<double> dp, dg;
  detail::edt3_sq(bg, D, H, W, dg);  // distance to gt boundary
  detail::edt3_sq(bp, D, H, W, dp);  // distance to pred boundary
  std::vector<double> pooled;
  for (std::int64_t i = 0; i < D * H * W; ++i) {
    if (bp[static_cast<std::size_t>(i)] != 0.0f)
      pooled.push_back(std::sqrt(dg[static_cast<std::size_t>(i)]));
    if (bg[static_cast<std::size_t>(i)] != 0.0f)
      pooled.push_back(std::sqrt(dp[static_cast<std::size_t>(i)]));
  }
  return detail::percentile(pooled, 0.95) * spacing;
}

MreResult mre(const Tensor<float>& heatmaps, const std::vector<std::array<float, 3>>& gt_mm,
              double spacing) {
  if (heatmaps.rank() != 4)
    throw ShapeError("mre: heatmaps must be [K,D,H,W], got " + shape_str(heatmaps.shape()));
  const std::int64_t K = heatmaps.extent(0);
  if (static_cast<std::size_t>(K) != gt_mm.size())
    throw ShapeError("mre: " + std::to_string(K) + " heatmaps vs " + std::to_string(gt_mm.size()) +
                     " ground-truth landmarks");
  const std::int64_t D = heatmaps.extent(1), H = heatmaps.extent(2), W = heatmaps.extent(3);
  const std::int64_t V = D * H * W;
  MreResult res;
  res.per_landmark.reserve(static_cast<std::size_t>(K));
  double total = 0.0;
  for (std::int64_t k = 0; k < K; ++k) {
    const float* hp = heatmaps.data() + k * V;
    std::int64_t best = 0;
    for (std::int64_t i = 1; i < V; ++i)
      if (hp[i] > hp[best]) best = i;  // strict: ties keep the lowest index
    const double pd = static_cast<double>(best / (H * W)) * spacing;
    const double ph = static_cast<double>((best / W) % H) * spacing;
    const double pw = static_cast<double>(best % W) * spacing;
    const auto& g = gt_mm[static_cast<std::size_t>(k)];
    const double dd = pd - g[0], dh = ph - g[1], dw = pw - g[2];
    const double err = std::sqrt(dd * dd + dh * dh + dw * dw);
    res.per_landmark.push_back(err);
    total += err;
  }
  res.mean = total / static_cast<double>(K);
  return res;
}

MetricReport cls_metrics(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw MetricError("cls_metrics: scores and labels differ in length");
  if (scores.empty()) throw MetricError("cls_metrics: empty input");
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0, n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pos = labels[i] != 0;
    const bool pred = scores[i] >= 0.5;
    n_pos += pos;
    n_neg += !pos;
    tp += pos && pred;
    fn += pos && !pred;
    tn += !pos && !pred;
    fp += !pos && pred;
  }
  if (n_pos == 0 || n_neg == 0)
    throw MetricError("cls_metrics: AUC undefined for a single-class label set");
  MetricReport rep;
  rep.has_counts = true;
  rep.tp = tp;
  rep.fp = fp;
  rep.tn = tn;
  rep.fn = fn;

  // Mann-Whitney AUC from mid-ranks (ties contribute 1/2)
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] != 0) rank_sum_pos += mid_rank;
    i = j;
  }
  const double auc = (rank_sum_pos - 0.5 * static_cast<double>(n_pos) *
                                         static_cast<double>(n_pos + 1)) /
                     (static_cast<double>(n_pos) * static_cast<double>(n_neg));

  auto ratio = [&rep](const char* name, std::int64_t num, std::int64_t den) {
    if (den == 0) {
      rep.set(name, 0.0);
      rep.set(std::string(name) + "_undefined", 1.0);
      return 0.0;
    }
    const double v = static_cast<double>(num) / static_cast<double>(den);
    rep.set(name, v);
    return v;
  };
  rep.set("auc", auc);
  ratio("accuracy", tp + tn, tp + tn + fp + fn);
  const double recall = ratio("recall", tp, tp + fn);
  ratio("specificity", tn, tn + fp);
  const double precision = ratio("precision", tp, tp + fp);
  if (precision + recall == 0.0) {
    rep.set("f1", 0.0);
    rep.set("f1_undefined", 1.0);
  } else {
    rep.set("f1", 2.0 * precision * recall / (precision + recall));
  }
  return rep;
}

}  // namespace nnm
