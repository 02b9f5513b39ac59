#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "nnm/optim.hpp"

using namespace nnm;

namespace {

Param<double> make_p(const char* name, TensorD value) {
  Param<double> p;
  p.name = name;
  p.value = std::move(value);
  p.bound = p.value;
  return p;
}

}  // namespace

TEST_CASE("first adam step moves each weight by almost exactly lr") {
  Param<double> p = make_p("w", TensorD::from({4}, {1.0, -2.0, 0.5, 3.0}));
  TensorD dir = TensorD::from({4}, {1.0, -1.0, 2.0, 0.5});  // induced gradient
  AdamState<double> st;
  st.init({&p});
  Tape<double> tape;
  p.bind(&tape);
  tape.backward(sum(mul(p.bound, dir)));

  TensorD before = p.value.clone();
  adam_step<double>({&p}, tape, st, 0.01, 0.0);
  CHECK(st.t == 1);
  for (std::int64_t i = 0; i < 4; ++i) {
    const double step = std::abs(p.value.data()[i] - before.data()[i]);
    CHECK(step <= 0.01);
    CHECK(step >= 0.999 * 0.01);
    // direction opposes the gradient
    CHECK((p.value.data()[i] - before.data()[i]) * dir.data()[i] < 0.0);
  }
}

TEST_CASE("a parameter the loss never touches stays put") {
  Param<double> used = make_p("used", TensorD::from({2}, {1.0, 2.0}));
  Param<double> idle = make_p("idle", TensorD::from({3}, {5.0, 6.0, 7.0}));
  AdamState<double> st;
  st.init({&used, &idle});
  Tape<double> tape;
  used.bind(&tape);
  idle.bind(&tape);
  tape.backward(sum(used.bound));
  adam_step<double>({&used, &idle}, tape, st, 0.1, 0.0);
  CHECK(idle.value.data()[0] == 5.0);
  CHECK(idle.value.data()[1] == 6.0);
  CHECK(idle.value.data()[2] == 7.0);
  CHECK(used.value.data()[0] != 1.0);
}

TEST_CASE("adam minimizes a quadratic") {
  Param<double> p = make_p("x", TensorD::from({1}, {0.0}));
  AdamState<double> st;
  st.init({&p});
  Tape<double> tape;
  for (int step = 0; step < 100; ++step) {
    tape.clear();
    p.bind(&tape);
    TensorD d = add_scalar(p.bound, -3.0);
    tape.backward(sum(mul(d, d)));  // (x-3)^2
    adam_step<double>({&p}, tape, st, 0.1, 0.0);
  }
  CHECK(std::abs(p.value.data()[0] - 3.0) < 0.5);
}

TEST_CASE("decoupled weight decay is a pure multiplicative shrink") {
  Param<double> p = make_p("w", TensorD::from({2}, {4.0, -8.0}));
  Param<double> replica = make_p("r", TensorD::from({2}, {4.0, -8.0}));
  AdamState<double> st;
  st.init({&p});
  const double lr = 0.1, wd = 0.01;
  Tape<double> tape;
  for (int step = 0; step < 10; ++step) {
    tape.clear();
    p.bind(&tape);
    tape.backward(sum(mul(p.bound, TensorD::zeros({2}))));  // gradient identically zero
    adam_step<double>({&p}, tape, st, lr, wd);
    for (std::int64_t i = 0; i < 2; ++i)
      replica.value.data()[i] -= lr * wd * replica.value.data()[i];
  }
  CHECK(p.value.data()[0] == replica.value.data()[0]);  // same fp recurrence, bit for bit
  CHECK(p.value.data()[1] == replica.value.data()[1]);
}

TEST_CASE("a non-finite gradient aborts the step before touching any state") {
  Param<double> p = make_p("w", TensorD::from({2}, {1.0, 2.0}));
  AdamState<double> st;
  st.init({&p});
  Tape<double> tape;
  p.bind(&tape);
  TensorD inf_dir = TensorD::from({2}, {1.0, std::numeric_limits<double>::quiet_NaN()});
  tape.backward(sum(mul(p.bound, inf_dir)));
  CHECK_THROWS_AS(adam_step<double>({&p}, tape, st, 0.1, 0.0), NumericError);
  CHECK(p.value.data()[0] == 1.0);
  CHECK(p.value.data()[1] == 2.0);
  CHECK(st.t == 0);
  CHECK(st.m[0].data()[0] == 0.0);
}

TEST_CASE("adam_step validates state against the param list") {
  Param<double> p = make_p("w", TensorD::from({2}, {1.0, 2.0}));
  AdamState<double> st;  // never initialized
  Tape<double> tape;
  p.bind(&tape);
  tape.backward(sum(p.bound));
  CHECK_THROWS_AS(adam_step<double>({&p}, tape, st, 0.1, 0.0), ContractError);
}
