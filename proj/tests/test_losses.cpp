#include <cmath>
#include <vector>

#include "doctest.h"
#include "nnm/gradcheck.hpp"
#include "nnm/losses.hpp"
#include "nnm/rng.hpp"

using namespace nnm;

namespace {

// Oracle: per-position softmax cross-entropy accumulated in plain doubles.
double naive_ce(const TensorD& logits, const TensorD& target) {
  const std::int64_t B = logits.extent(0), K = logits.extent(1);
  const std::int64_t S = logits.numel() / (B * K);
  double total = 0.0;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t i = 0; i < S; ++i) {
      double mx = -1e300;
      for (std::int64_t k = 0; k < K; ++k)
        mx = std::max(mx, logits.data()[(b * K + k) * S + i]);
      double z = 0.0;
      for (std::int64_t k = 0; k < K; ++k)
        z += std::exp(logits.data()[(b * K + k) * S + i] - mx);
      const auto cls = static_cast<std::int64_t>(target.data()[b * S + i]);
      total -= logits.data()[(b * K + cls) * S + i] - mx - std::log(z);
    }
  return total / static_cast<double>(B * S);
}

// Oracle: soft Dice from explicitly computed softmax probabilities.
double naive_soft_dice(const TensorD& logits, const TensorD& target) {
  const std::int64_t B = logits.extent(0), K = logits.extent(1);
  const std::int64_t S = logits.numel() / (B * K);
  double mean_dice = 0.0;
  for (std::int64_t k = 0; k < K; ++k) {
    double inter = 0.0, denom = 0.0;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t i = 0; i < S; ++i) {
        double mx = -1e300;
        for (std::int64_t c = 0; c < K; ++c)
          mx = std::max(mx, logits.data()[(b * K + c) * S + i]);
        double z = 0.0;
        for (std::int64_t c = 0; c < K; ++c)
          z += std::exp(logits.data()[(b * K + c) * S + i] - mx);
        const double p = std::exp(logits.data()[(b * K + k) * S + i] - mx) / z;
        const double t = target.data()[b * S + i] == static_cast<double>(k) ? 1.0 : 0.0;
        inter += p * t;
        denom += p + t;
      }
    mean_dice += (2.0 * inter + kDiceSmooth) / (denom + kDiceSmooth);
  }
  return 1.0 - mean_dice / static_cast<double>(K);
}

TensorD random_target(Shape shape, std::int64_t K, Rng& rng) {
  TensorD t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<double>(rng.below(static_cast<std::uint64_t>(K)));
  return t;
}

}  // namespace

TEST_CASE("one_hot layout and validation") {
  TensorD t = TensorD::from({2, 2}, {0.0, 2.0, 1.0, 0.0});
  TensorD oh = one_hot(t, 3);
  REQUIRE(oh.shape() == Shape{2, 3, 2});
  // element (b=0,i=1) has class 2
  CHECK(oh.at({0, 2, 1}) == 1.0);
  CHECK(oh.at({0, 0, 1}) == 0.0);
  CHECK(oh.at({1, 1, 0}) == 1.0);
  double s = 0.0;
  for (std::int64_t i = 0; i < oh.numel(); ++i) s += oh.data()[i];
  CHECK(s == 4.0);  // exactly one hot per position

  TensorD bad = TensorD::from({1, 1}, {3.0});
  CHECK_THROWS_AS(one_hot(bad, 3), ShapeError);
  TensorD neg = TensorD::from({1, 1}, {-1.0});
  CHECK_THROWS_AS(one_hot(neg, 3), ShapeError);
}

TEST_CASE("uniform two-class cross-entropy is ln 2") {
  TensorD logits = TensorD::zeros({2, 2, 3, 3, 3});
  Rng rng(5);
  TensorD target = random_target({2, 3, 3, 3}, 2, rng);
  CHECK(ce_seg_loss(logits, target).data()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  TensorD cl = TensorD::zeros({4, 2});
  TensorD lab = TensorD::from({4}, {0.0, 1.0, 1.0, 0.0});
  CHECK(ce_cls_loss(cl, lab).data()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("saturated logits drive cross-entropy toward zero") {
  Rng rng(6);
  TensorD target = random_target({2, 4, 4, 4}, 3, rng);
  TensorD logits = TensorD::zeros({2, 3, 4, 4, 4});
  const std::int64_t S = 64;
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t i = 0; i < S; ++i) {
      const auto cls = static_cast<std::int64_t>(target.data()[b * S + i]);
      logits.data()[(b * 3 + cls) * S + i] = 20.0;
    }
  CHECK(ce_seg_loss(logits, target).data()[0] < 0.01);
  CHECK(soft_dice_loss(logits, target).data()[0] < 0.01);
  CHECK(dice_ce_loss(logits, target).data()[0] < 0.01);
}

TEST_CASE("cross-entropy and soft dice match their oracles on random input") {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    TensorD logits = TensorD::normal({2, 4, 3, 2, 3}, rng, 0.0, 2.0);
    TensorD target = random_target({2, 3, 2, 3}, 4, rng);
    const double ce = ce_seg_loss(logits, target).data()[0];
    CHECK(ce == doctest::Approx(naive_ce(logits, target)).epsilon(1e-9));
    const double sd = soft_dice_loss(logits, target).data()[0];
    CHECK(sd == doctest::Approx(naive_soft_dice(logits, target)).epsilon(1e-9));
    const double both = dice_ce_loss(logits, target).data()[0];
    CHECK(both == doctest::Approx(0.5 * (ce + sd)).epsilon(1e-12));
  }
}

TEST_CASE("heatmap mse of a constant offset is the squared offset") {
  Rng rng(8);
  TensorD target = TensorD::uniform({2, 6, 4, 4, 4}, rng, 0.0, 1.0);
  TensorD pred = add_scalar(target, 0.5);
  CHECK(heatmap_mse_loss(pred, target).data()[0] == 0.25);
  CHECK(heatmap_mse_loss(target, target).data()[0] == 0.0);
  TensorD odd = TensorD::zeros({2, 6, 4, 4, 5});
  CHECK_THROWS_AS(heatmap_mse_loss(odd, target), ShapeError);
}

TEST_CASE("seg losses pass gradient checks") {
  Rng rng(9);
  TensorD target = random_target({2, 3, 2, 2}, 3, rng);
  for (int seed = 0; seed < 3; ++seed) {
    TensorD logits = TensorD::normal({2, 3, 3, 2, 2}, rng, 0.0, 1.5);
    auto r1 = grad_check<double>(
        [&](const std::vector<TensorD>& in) { return ce_seg_loss(in[0], target); }, {logits});
    CHECK_MESSAGE(r1.ok, r1.describe());
    auto r2 = grad_check<double>(
        [&](const std::vector<TensorD>& in) { return soft_dice_loss(in[0], target); }, {logits});
    CHECK_MESSAGE(r2.ok, r2.describe());
    auto r3 = grad_check<double>(
        [&](const std::vector<TensorD>& in) { return dice_ce_loss(in[0], target); }, {logits});
    CHECK_MESSAGE(r3.ok, r3.describe());
  }
}

TEST_CASE("cls and heatmap losses pass gradient checks") {
  Rng rng(10);
  TensorD lab = TensorD::from({3}, {0.0, 1.0, 1.0});
  TensorD hm_target = TensorD::uniform({2, 2, 3, 3, 3}, rng, 0.0, 1.0);
  for (int seed = 0; seed < 3; ++seed) {
    TensorD logits = TensorD::normal({3, 2}, rng, 0.0, 2.0);
    auto r1 = grad_check<double>(
        [&](const std::vector<TensorD>& in) { return ce_cls_loss(in[0], lab); }, {logits});
    CHECK_MESSAGE(r1.ok, r1.describe());
    TensorD pred = TensorD::normal({2, 2, 3, 3, 3}, rng, 0.0, 1.0);
    auto r2 = grad_check<double>(
        [&](const std::vector<TensorD>& in) { return heatmap_mse_loss(in[0], hm_target); },
        {pred});
    CHECK_MESSAGE(r2.ok, r2.describe());
  }
}

TEST_CASE("heatmap targets peak at the landmark with unit height") {
  const std::vector<std::array<float, 3>> lms = {{3.0f, 4.0f, 5.0f}, {0.0f, 0.0f, 0.0f}};
  TensorF hm = make_heatmap_target<float>(lms, 8, 8, 8, 2.0, 1.0);
  REQUIRE(hm.shape() == Shape{2, 8, 8, 8});
  CHECK(hm.at({0, 3, 4, 5}) == doctest::Approx(1.0).epsilon(1e-7));
  // one voxel away along one axis: exp(-1/(2*4))
  CHECK(hm.at({0, 3, 4, 6}) == doctest::Approx(std::exp(-0.125)).epsilon(1e-6));
  CHECK(hm.at({1, 0, 0, 0}) == doctest::Approx(1.0).epsilon(1e-7));
  // distance scales with spacing: landmark at 4mm with spacing 2 sits at voxel 2
  TensorF hs = make_heatmap_target<float>({{4.0f, 0.0f, 0.0f}}, 4, 1, 1, 2.0, 2.0);
  CHECK(hs.at({0, 2, 0, 0}) == doctest::Approx(1.0).epsilon(1e-7));
}
