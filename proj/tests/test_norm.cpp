#include <cmath>
#include <vector>

#include "doctest.h"
#include "nnm/gradcheck.hpp"
#include "nnm/norm.hpp"
#include "nnm/rng.hpp"

using namespace nnm;

namespace {

// Oracle: recompute batch statistics with plain accumulation.
void naive_stats(const TensorD& x, std::vector<double>& mean, std::vector<double>& var) {
  const std::int64_t B = x.extent(0), C = x.extent(1);
  const std::int64_t S = x.extent(2) * x.extent(3) * x.extent(4);
  mean.assign(static_cast<std::size_t>(C), 0.0);
  var.assign(static_cast<std::size_t>(C), 0.0);
  for (std::int64_t c = 0; c < C; ++c) {
    double s = 0;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t i = 0; i < S; ++i) s += x.data()[(b * C + c) * S + i];
    const double mu = s / static_cast<double>(B * S);
    double v = 0;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t i = 0; i < S; ++i) {
        const double d = x.data()[(b * C + c) * S + i] - mu;
        v += d * d;
      }
    mean[static_cast<std::size_t>(c)] = mu;
    var[static_cast<std::size_t>(c)] = v / static_cast<double>(B * S);  // population
  }
}

}  // namespace

TEST_CASE("batchnorm3d train mode normalizes with batch statistics") {
  Rng rng(21);
  auto x = TensorD::uniform({2, 3, 2, 3, 2}, rng, -2.0, 5.0);
  auto gamma = TensorD::full({3}, 1.0);
  auto beta = TensorD::zeros({3});
  BNState<double> state(3);

  auto y = batchnorm3d(x, gamma, beta, state, Mode::kTrain);
  REQUIRE(y.shape() == x.shape());

  std::vector<double> mu, var;
  naive_stats(x, mu, var);
  const std::int64_t B = 2, C = 3, S = 12;
  // normalized output under the oracle statistics
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < S; ++i) {
        const double xv = x.data()[(b * C + c) * S + i];
        const double expect = (xv - mu[static_cast<std::size_t>(c)]) /
                              std::sqrt(var[static_cast<std::size_t>(c)] + 1e-5);
        CHECK(y.data()[(b * C + c) * S + i] == doctest::Approx(expect).epsilon(1e-9));
      }

  // output statistics are standardized (population variance)
  std::vector<double> ymu, yvar;
  naive_stats(y, ymu, yvar);
  for (std::int64_t c = 0; c < C; ++c) {
    CHECK(ymu[static_cast<std::size_t>(c)] == doctest::Approx(0.0).scale(1.0).epsilon(1e-9));
    CHECK(yvar[static_cast<std::size_t>(c)] == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("batchnorm3d running statistics follow the momentum update") {
  Rng rng(22);
  auto x = TensorD::uniform({2, 2, 2, 2, 2}, rng, -1.0, 3.0);
  auto gamma = TensorD::full({2}, 1.0);
  auto beta = TensorD::zeros({2});
  BNState<double> state(2);

  std::vector<double> mu, var;
  naive_stats(x, mu, var);

  batchnorm3d(x, gamma, beta, state, Mode::kTrain, 0.1);
  for (std::int64_t c = 0; c < 2; ++c) {
    // starting from running_mean 0, running_var 1
    CHECK(state.running_mean[c] ==
          doctest::Approx(0.1 * mu[static_cast<std::size_t>(c)]).epsilon(1e-12));
    CHECK(state.running_var[c] ==
          doctest::Approx(0.9 + 0.1 * var[static_cast<std::size_t>(c)]).epsilon(1e-12));
  }

  const double rm0 = state.running_mean[0];
  batchnorm3d(x, gamma, beta, state, Mode::kTrain, 0.1);
  CHECK(state.running_mean[0] == doctest::Approx(0.9 * rm0 + 0.1 * mu[0]).epsilon(1e-12));
}

TEST_CASE("batchnorm3d eval mode uses running statistics and is state-pure") {
  Rng rng(23);
  auto x = TensorD::uniform({1, 2, 2, 2, 2}, rng, -1.0, 1.0);
  auto gamma = TensorD::from({2}, {2.0, 0.5});
  auto beta = TensorD::from({2}, {1.0, -1.0});
  BNState<double> state(2);
  state.running_mean.data()[0] = 0.3;
  state.running_mean.data()[1] = -0.2;
  state.running_var.data()[0] = 2.0;
  state.running_var.data()[1] = 0.5;
  const auto rm_before = state.running_mean.clone();

  auto y = batchnorm3d(x, gamma, beta, state, Mode::kEval);
  for (std::int64_t c = 0; c < 2; ++c)
    for (std::int64_t i = 0; i < 8; ++i) {
      const double xv = x.data()[c * 8 + i];
      const double expect = gamma[c] * (xv - state.running_mean[c]) /
                                std::sqrt(state.running_var[c] + 1e-5) +
                            beta[c];
      CHECK(y.data()[c * 8 + i] == doctest::Approx(expect).epsilon(1e-12));
    }
  // eval does not touch the running stats
  CHECK(state.running_mean[0] == rm_before[0]);
  CHECK(state.running_mean[1] == rm_before[1]);
}

TEST_CASE("gradcheck batchnorm3d in both modes") {
  Rng rng(24);
  auto x = TensorD::uniform({2, 2, 2, 2, 2}, rng, -1.0, 1.0);
  auto gamma = TensorD::uniform({2}, rng, 0.5, 1.5);
  auto beta = TensorD::uniform({2}, rng, -0.5, 0.5);
  auto w = TensorD::uniform({2, 2, 2, 2, 2}, rng, -1.0, 1.0);

  SUBCASE("train mode") {
    auto res = grad_check<double>(
        [&](const std::vector<TensorD>& in) {
          BNState<double> st(2);  // fresh state: the loss stays a pure function
          return sum(mul(batchnorm3d(in[0], in[1], in[2], st, Mode::kTrain), in[3]));
        },
        {x, gamma, beta, w});
    CHECK_MESSAGE(res.ok, res.describe());
  }

  SUBCASE("eval mode") {
    auto res = grad_check<double>(
        [&](const std::vector<TensorD>& in) {
          BNState<double> st(2);
          st.running_mean.data()[0] = 0.2;
          st.running_mean.data()[1] = -0.1;
          st.running_var.data()[0] = 1.5;
          st.running_var.data()[1] = 0.7;
          return sum(mul(batchnorm3d(in[0], in[1], in[2], st, Mode::kEval), in[3]));
        },
        {x, gamma, beta, w});
    CHECK_MESSAGE(res.ok, res.describe());
  }
}

TEST_CASE("batchnorm3d validates shapes") {
  auto x = TensorD::zeros({1, 3, 2, 2, 2});
  auto g2 = TensorD::zeros({2});
  auto b3 = TensorD::zeros({3});
  BNState<double> st3(3), st2(2);
  CHECK_THROWS_AS(batchnorm3d(x, g2, b3, st3, Mode::kTrain), ShapeError);
  CHECK_THROWS_AS(batchnorm3d(x, b3, b3, st2, Mode::kTrain), ShapeError);
  auto x4 = TensorD::zeros({3, 2, 2, 2});
  CHECK_THROWS_AS(batchnorm3d(x4, b3, b3, st3, Mode::kTrain), ShapeError);
}
