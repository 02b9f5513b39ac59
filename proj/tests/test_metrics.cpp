#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "nnm/metrics.hpp"
#include "nnm/rng.hpp"
#include "nnm/tensor.hpp"

using namespace nnm;

namespace {

// Oracle: all-pairs boundary distance percentile, no distance transform.
// Boundary voxel = foreground voxel with a background (or out-of-volume)
// 6-neighbor. Distances between voxel centers.
std::vector<std::array<std::int64_t, 3>> boundary_voxels(const TensorF& m) {
  const std::int64_t D = m.extent(0), H = m.extent(1), W = m.extent(2);
  auto fg = [&](std::int64_t d, std::int64_t h, std::int64_t w) {
    if (d < 0 || d >= D || h < 0 || h >= H || w < 0 || w >= W) return false;
    return m.data()[(d * H + h) * W + w] != 0.0f;
  };
  std::vector<std::array<std::int64_t, 3>> out;
  for (std::int64_t d = 0; d < D; ++d)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w) {
        if (!fg(d, h, w)) continue;
        if (!fg(d - 1, h, w) || !fg(d + 1, h, w) || !fg(d, h - 1, w) || !fg(d, h + 1, w) ||
            !fg(d, h, w - 1) || !fg(d, h, w + 1))
          out.push_back({d, h, w});
      }
  return out;
}

double brute_hd95(const TensorF& a, const TensorF& b, double spacing) {
  const auto ba = boundary_voxels(a), bb = boundary_voxels(b);
  REQUIRE(!ba.empty());
  REQUIRE(!bb.empty());
  std::vector<double> pool;
  auto push_dir = [&](const auto& from, const auto& to) {
    for (const auto& p : from) {
      double best = 1e300;
      for (const auto& q : to) {
        const double dd = static_cast<double>(p[0] - q[0]);
        const double dh = static_cast<double>(p[1] - q[1]);
        const double dw = static_cast<double>(p[2] - q[2]);
        best = std::min(best, dd * dd + dh * dh + dw * dw);
      }
      pool.push_back(std::sqrt(best));
    }
  };
  push_dir(ba, bb);
  push_dir(bb, ba);
  std::sort(pool.begin(), pool.end());
  const double rank = 0.95 * static_cast<double>(pool.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(rank);
  const double frac = rank - static_cast<double>(lo);
  const double v =
      lo + 1 < pool.size() ? pool[lo] * (1.0 - frac) + pool[lo + 1] * frac : pool[lo];
  return v * spacing;
}

TensorF random_blob_mask(std::int64_t n, Rng& rng) {
  // A random ellipsoid plus salt so boundaries are irregular.
  TensorF m({n, n, n});
  const double cd = rng.uniform(4.0, n - 4.0), ch = rng.uniform(4.0, n - 4.0),
               cw = rng.uniform(4.0, n - 4.0);
  const double ad = rng.uniform(2.0, 5.0), ah = rng.uniform(2.0, 5.0),
               aw = rng.uniform(2.0, 5.0);
  for (std::int64_t d = 0; d < n; ++d)
    for (std::int64_t h = 0; h < n; ++h)
      for (std::int64_t w = 0; w < n; ++w) {
        const double x = (d - cd) / ad, y = (h - ch) / ah, z = (w - cw) / aw;
        if (x * x + y * y + z * z <= 1.0) m.data()[(d * n + h) * n + w] = 1.0f;
      }
  for (int k = 0; k < 5; ++k) {
    const auto i = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n * n * n)));
    m.data()[i] = 1.0f;
  }
  return m;
}

}  // namespace

TEST_CASE("dice on hand-built masks") {
  TensorF p = TensorF::zeros({2, 3, 4});
  TensorF g = TensorF::zeros({2, 3, 4});
  for (int i = 0; i < 8; ++i) p.data()[i] = 1.0f;   // |P| = 8
  for (int i = 6; i < 10; ++i) g.data()[i] = 2.0f;  // |G| = 4, overlap 2
  CHECK(dice(p, g) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(dice(g, p) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  TensorF e = TensorF::zeros({2, 3, 4});
  CHECK(dice(e, e) == 1.0);  // both empty: perfect agreement
  CHECK(dice(p, e) == 0.0);
  CHECK(dice(e, g) == 0.0);
}

TEST_CASE("hd95 equals the all-pairs oracle on random blobs") {
  Rng rng(402);
  for (int inst = 0; inst < 30; ++inst) {
    const std::int64_t n = 12 + static_cast<std::int64_t>(rng.below(5));
    TensorF a = random_blob_mask(n, rng);
    TensorF b = random_blob_mask(n, rng);
    const double spacing = inst % 3 == 0 ? 1.0 : 0.7;
    const double got = hd95(a, b, spacing);
    const double want = brute_hd95(a, b, spacing);
    CHECK(std::abs(got - want) <= 1e-9);
  }
}

TEST_CASE("hd95 on two single voxels is their center distance") {
  TensorF a = TensorF::zeros({8, 8, 8});
  TensorF b = TensorF::zeros({8, 8, 8});
  a.data()[(0 * 8 + 0) * 8 + 0] = 1.0f;
  b.data()[(0 * 8 + 0) * 8 + 5] = 1.0f;
  CHECK(hd95(a, b, 1.0) == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(hd95(a, b, 2.0) == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(hd95(a, a, 1.0) == 0.0);
}

TEST_CASE("hd95 rejects empty masks") {
  TensorF a = TensorF::zeros({4, 4, 4});
  TensorF b = TensorF::full({4, 4, 4}, 1.0f);
  CHECK_THROWS_AS(hd95(a, b, 1.0), MetricError);
  CHECK_THROWS_AS(hd95(b, a, 1.0), MetricError);
  TensorF c = TensorF::full({4, 4, 5}, 1.0f);
  CHECK_THROWS_AS(hd95(b, c, 1.0), ShapeError);  // shape mismatch
}

TEST_CASE("mre picks the argmax voxel and measures in mm") {
  TensorF hm = TensorF::zeros({1, 6, 6, 6});
  hm.data()[(3 * 6 + 4) * 6 + 0] = 5.0f;  // peak at voxel (3,4,0)
  const MreResult r = mre(hm, {{0.0f, 0.0f, 0.0f}}, 1.0);
  CHECK(r.per_landmark.size() == 1);
  CHECK(r.mean == doctest::Approx(5.0).epsilon(1e-12));  // sqrt(9+16+0)

  // spacing scales both the voxel coordinate and the error
  const MreResult r2 = mre(hm, {{6.0f, 8.0f, 0.0f}}, 2.0);
  CHECK(r2.mean == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("mre argmax tie resolves to the lowest linear index") {
  TensorF hm = TensorF::full({1, 4, 4, 4}, 0.5f);  // every voxel ties
  const MreResult r = mre(hm, {{0.0f, 0.0f, 0.0f}}, 1.0);
  CHECK(r.mean == 0.0);  // winner is voxel (0,0,0)
}

TEST_CASE("mre validates landmark count") {
  TensorF hm = TensorF::zeros({2, 4, 4, 4});
  CHECK_THROWS_AS(mre(hm, {{0.0f, 0.0f, 0.0f}}, 1.0), ShapeError);
}

TEST_CASE("cls_metrics reproduces the worked confusion example") {
  // 8 TP, 2 FN, 7 TN, 3 FP
  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 8; ++i) scores.push_back(0.9), labels.push_back(1);
  for (int i = 0; i < 2; ++i) scores.push_back(0.1), labels.push_back(1);
  for (int i = 0; i < 7; ++i) scores.push_back(0.1), labels.push_back(0);
  for (int i = 0; i < 3; ++i) scores.push_back(0.9), labels.push_back(0);
  MetricReport r = cls_metrics(scores, labels);
  CHECK(r.tp == 8);
  CHECK(r.fn == 2);
  CHECK(r.tn == 7);
  CHECK(r.fp == 3);
  CHECK(r.get("accuracy") == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(r.get("recall") == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(r.get("specificity") == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(r.get("precision") == doctest::Approx(8.0 / 11.0).epsilon(1e-12));
  CHECK(r.get("f1") == doctest::Approx(0.761904762).epsilon(1e-8));
  // mid-rank AUC: ties at .1 and .9 -> (2*5 + 8*15 - 55) / 100
  CHECK(r.get("auc") == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("auc is invariant under monotone score transforms") {
  Rng rng(77);
  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 60; ++i) {
    scores.push_back(rng.uniform(0.0, 1.0));
    labels.push_back(static_cast<int>(rng.below(2)));
  }
  labels[0] = 1;
  labels[1] = 0;  // guarantee both classes
  std::vector<double> cubed;
  for (double s : scores) cubed.push_back(s * s * s);
  const double a1 = cls_metrics(scores, labels).get("auc");
  const double a2 = cls_metrics(cubed, labels).get("auc");
  CHECK(a1 == a2);  // ranks unchanged, value must match exactly
}

TEST_CASE("auc of random scores sits near one half") {
  Rng rng(1234);
  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 2000; ++i) {
    scores.push_back(rng.uniform(0.0, 1.0));
    labels.push_back(static_cast<int>(rng.below(2)));
  }
  const double a = cls_metrics(scores, labels).get("auc");
  CHECK(a > 0.45);
  CHECK(a < 0.55);
}

TEST_CASE("perfect and inverted separations hit the AUC extremes") {
  std::vector<double> s{0.9, 0.8, 0.2, 0.1};
  std::vector<int> pos_first{1, 1, 0, 0}, neg_first{0, 0, 1, 1};
  CHECK(cls_metrics(s, pos_first).get("auc") == 1.0);
  CHECK(cls_metrics(s, neg_first).get("auc") == 0.0);
}

TEST_CASE("cls_metrics flags undefined ratios instead of dividing by zero") {
  // every prediction negative: no positive predictions -> precision undefined
  std::vector<double> s{0.1, 0.2, 0.3, 0.4};
  std::vector<int> l{1, 0, 1, 0};
  MetricReport r = cls_metrics(s, l);
  CHECK(r.tp == 0);
  CHECK(r.fp == 0);
  CHECK(r.has("precision_undefined"));
  CHECK(r.get("precision") == 0.0);
  CHECK(r.get("accuracy") == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("cls_metrics rejects degenerate inputs") {
  CHECK_THROWS_AS(cls_metrics({}, {}), MetricError);
  CHECK_THROWS_AS(cls_metrics({0.5, 0.5}, {1}), MetricError);
  CHECK_THROWS_AS(cls_metrics({0.5, 0.6}, {1, 1}), MetricError);  // single class
  CHECK_THROWS_AS(cls_metrics({0.5, 0.6}, {0, 0}), MetricError);
}

TEST_CASE("metric report accessors and json") {
  MetricReport r;
  r.set("dice", 0.5);
  r.set("hd95", 2.25);
  CHECK(r.get("dice") == 0.5);
  CHECK(r.has("hd95"));
  CHECK(!r.has("auc"));
  CHECK_THROWS_AS(r.get("auc"), MetricError);
  const std::string j = r.to_json();
  CHECK(j.find("\"dice\"") != std::string::npos);
  CHECK(j.find("2.25") != std::string::npos);
  // set() on an existing key overwrites in place
  r.set("dice", 0.75);
  CHECK(r.get("dice") == 0.75);
}
