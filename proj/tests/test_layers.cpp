#include <cmath>
#include <vector>

#include "doctest.h"
#include "nnm/gradcheck.hpp"
#include "nnm/layers.hpp"

using namespace nnm;

namespace {

// Gradient-checks a layer by exposing its parameters (plus the input) as
// grad_check inputs: each call rebinds the params' bound slots to the
// perturbed leaves before running the forward.
template <typename Forward>
GradCheckResult<double> check_with_params(ParamRefs<double> ps, const TensorD& x, Forward fwd) {
  std::vector<TensorD> inputs{x};
  for (Param<double>* p : ps) inputs.push_back(p->value);
  return grad_check<double>(
      [&](const std::vector<TensorD>& in) {
        for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->bound = in[i + 1];
        TensorD y = fwd(in[0]);
        return sum(mul(y, y));
      },
      inputs);
}

void zero_param(Param<double>& p) { p.value = TensorD::zeros(p.value.shape()); }
void zero_param(Param<float>& p) { p.value = TensorF::zeros(p.value.shape()); }

}  // namespace

TEST_CASE("linear and conv layers run and collect params") {
  Rng rng(61);
  auto lin = Linear<double>::make("l", 3, 5, rng);
  TensorD x = TensorD::uniform({4, 3}, rng, -1.0, 1.0);
  lin.bind(nullptr);
  CHECK(lin(x).shape() == Shape{4, 5});
  ParamRefs<double> ps;
  lin.collect(ps);
  REQUIRE(ps.size() == 2);
  CHECK(ps[0]->name == "l.W");
  CHECK(ps[1]->name == "l.b");
  // fresh bias is zero, so the layer is the bare matmul at init
  CHECK(ps[1]->value.data()[0] == 0.0);

  auto zl = Linear<double>::make("z", 3, 2, rng, true, true);
  zl.bind(nullptr);
  TensorD zy = zl(x);
  for (std::int64_t i = 0; i < zy.numel(); ++i) CHECK(zy.data()[i] == 0.0);

  auto conv = Conv3dLayer<double>::make("c", 2, 4, 3, 2, 1, rng);
  TensorD v = TensorD::uniform({1, 2, 8, 8, 8}, rng, -1.0, 1.0);
  conv.bind(nullptr);
  CHECK(conv(v).shape() == Shape{1, 4, 4, 4, 4});
}

TEST_CASE("res block with all-zero kernels is relu of the identity") {
  Rng rng(62);
  auto blk = ResBlock<double>::make("r", 3, 3, 1, rng);
  zero_param(blk.conv1.W);
  zero_param(blk.conv2.W);
  REQUIRE(!blk.has_proj);
  blk.bind(nullptr);
  TensorD x = TensorD::uniform({2, 3, 4, 4, 4}, rng, -1.0, 1.0);
  TensorD y = blk(x, Mode::kTrain);
  for (std::int64_t i = 0; i < x.numel(); ++i)
    CHECK(y.data()[i] == std::max(x.data()[i], 0.0));
}

TEST_CASE("res block shapes, projection, and downsampling") {
  Rng rng(63);
  auto down = ResBlock<float>::make("d", 32, 64, 2, rng);
  REQUIRE(down.has_proj);
  down.bind(nullptr);
  TensorF x = TensorF::uniform({1, 32, 16, 16, 16}, rng, -1.0f, 1.0f);
  CHECK(down(x, Mode::kEval).shape() == Shape{1, 64, 8, 8, 8});

  // channel change alone also needs the projection
  CHECK(ResBlock<float>::make("p", 4, 8, 1, rng).has_proj);
  // all-zero kernels including the projection collapse to zero output
  auto z = ResBlock<float>::make("z", 4, 8, 2, rng);
  zero_param(z.conv1.W);
  zero_param(z.conv2.W);
  zero_param(z.proj.W);
  z.bind(nullptr);
  TensorF v = TensorF::uniform({1, 4, 4, 4, 4}, rng, -1.0f, 1.0f);
  TensorF y = z(v, Mode::kTrain);
  for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.0f);
}

TEST_CASE("res block passes a full gradient check") {
  Rng rng(64);
  auto blk = ResBlock<double>::make("g", 2, 3, 2, rng);
  ParamRefs<double> ps;
  blk.collect(ps);
  TensorD x = TensorD::uniform({2, 2, 4, 4, 4}, rng, 0.5, 1.5);
  auto r = check_with_params(ps, x, [&](const TensorD& in) { return blk(in, Mode::kTrain); });
  CHECK_MESSAGE(r.ok, r.describe());
}

TEST_CASE("fresh mamba layer is exactly the zero function") {
  Rng rng(65);
  MambaLayerConfig mc;
  mc.channels = 4;
  mc.state_size = 4;
  auto m = MambaLayer<float>::make("m", mc, rng);
  m.bind(nullptr);
  TensorF x = TensorF::uniform({2, 4, 3, 3, 3}, rng, -2.0f, 2.0f);
  TensorF y = m(x);
  REQUIRE(y.shape() == x.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.0f);
}

TEST_CASE("res-mamba block at init matches the plain res block bit for bit") {
  Rng rng(66);
  auto rm = ResMambaBlock<float>::make("b", 3, 6, 2, 4, false, rng);
  rm.bind(nullptr);
  TensorF x = TensorF::uniform({2, 3, 8, 8, 8}, rng, -1.0f, 1.0f);
  TensorF full = rm(x, Mode::kEval);
  TensorF res_only = rm.res(x, Mode::kEval);
  REQUIRE(full.shape() == res_only.shape());
  for (std::int64_t i = 0; i < full.numel(); ++i) CHECK(full.data()[i] == res_only.data()[i]);
}

TEST_CASE("trained-state mamba layer respects raster causality") {
  Rng rng(67);
  MambaLayerConfig mc;
  mc.channels = 3;
  mc.state_size = 4;
  auto m = MambaLayer<float>::make("m", mc, rng);
  // make the output projection nontrivial so the layer actually mixes
  m.out_proj.W.value = TensorF::normal({6, 3}, rng, 0.0f, 0.3f);
  m.bind(nullptr);

  TensorF x = TensorF::uniform({1, 3, 2, 3, 4}, rng, -1.0f, 1.0f);
  TensorF y0 = m(x);
  // perturb voxel (d,h,w) = (1,0,2): raster position 14 of 24
  const std::int64_t tp = (1 * 3 + 0) * 4 + 2;
  TensorF x2 = x.clone();
  x2.at({0, 1, 1, 0, 2}) += 0.5f;
  TensorF y1 = m(x2);
  const std::int64_t D = 2, H = 3, W = 4;
  bool later_changed = false;
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t t = 0; t < D * H * W; ++t) {
      const std::int64_t d = t / (H * W), h = (t / W) % H, w = t % W;
      const float a = y0.at({0, c, d, h, w});
      const float b = y1.at({0, c, d, h, w});
      if (t < tp) {
        CHECK(a == b);  // strictly earlier raster positions must be untouched
      } else if (a != b) {
        later_changed = true;
      }
    }
  CHECK(later_changed);
}

TEST_CASE("bidirectional mamba reacts on both sides of a perturbation") {
  Rng rng(68);
  MambaLayerConfig mc;
  mc.channels = 2;
  mc.state_size = 4;
  mc.bidirectional = true;
  auto m = MambaLayer<float>::make("m", mc, rng);
  m.out_proj.W.value = TensorF::normal({4, 2}, rng, 0.0f, 0.3f);
  m.bind(nullptr);
  TensorF x = TensorF::uniform({1, 2, 1, 1, 9}, rng, -1.0f, 1.0f);
  TensorF y0 = m(x);
  TensorF x2 = x.clone();
  x2.at({0, 0, 0, 0, 4}) += 0.5f;
  TensorF y1 = m(x2);
  bool before = false, after = false;
  for (std::int64_t w = 0; w < 9; ++w)
    for (std::int64_t c = 0; c < 2; ++c) {
      if (y0.at({0, c, 0, 0, w}) != y1.at({0, c, 0, 0, w})) {
        if (w < 4) before = true;
        if (w > 4) after = true;
      }
    }
  CHECK(before);
  CHECK(after);
}

TEST_CASE("mamba layer passes a full gradient check") {
  Rng rng(69);
  MambaLayerConfig mc;
  mc.channels = 3;
  mc.state_size = 2;
  auto m = MambaLayer<double>::make("m", mc, rng);
  m.out_proj.W.value = TensorD::normal({6, 3}, rng, 0.0, 0.4);
  ParamRefs<double> ps;
  m.collect(ps);
  TensorD x = TensorD::uniform({2, 3, 2, 2, 2}, rng, -1.0, 1.0);
  auto r = check_with_params(ps, x, [&](const TensorD& in) { return m(in); });
  CHECK_MESSAGE(r.ok, r.describe());
}

TEST_CASE("bidirectional mamba gradient check") {
  Rng rng(70);
  MambaLayerConfig mc;
  mc.channels = 2;
  mc.state_size = 2;
  mc.bidirectional = true;
  auto m = MambaLayer<double>::make("m", mc, rng);
  m.out_proj.W.value = TensorD::normal({4, 2}, rng, 0.0, 0.4);
  ParamRefs<double> ps;
  m.collect(ps);
  TensorD x = TensorD::uniform({1, 2, 1, 2, 4}, rng, -1.0, 1.0);
  auto r = check_with_params(ps, x, [&](const TensorD& in) { return m(in); });
  CHECK_MESSAGE(r.ok, r.describe());
}

TEST_CASE("decoder block fuses the skip path at doubled resolution") {
  Rng rng(71);
  auto d = DecoderBlock<float>::make("dec", 8, 4, 4, rng);
  d.bind(nullptr);
  TensorF deep = TensorF::uniform({1, 8, 4, 4, 4}, rng, -1.0f, 1.0f);
  TensorF skip = TensorF::uniform({1, 4, 8, 8, 8}, rng, -1.0f, 1.0f);
  CHECK(d(deep, skip, Mode::kEval).shape() == Shape{1, 4, 8, 8, 8});
  ParamRefs<float> ps;
  d.collect(ps);
  CHECK(ps.size() == 3);  // conv W + bn gamma/beta
  BufferRefs<float> bs;
  d.buffers(bs);
  CHECK(bs.size() == 2);
}

TEST_CASE("decoder block gradient check") {
  Rng rng(72);
  auto d = DecoderBlock<double>::make("dec", 3, 2, 2, rng);
  ParamRefs<double> ps;
  d.collect(ps);
  TensorD deep = TensorD::uniform({1, 3, 2, 2, 2}, rng, 0.2, 1.2);
  TensorD skip = TensorD::uniform({1, 2, 4, 4, 4}, rng, 0.2, 1.2);
  auto r = check_with_params(ps, deep,
                             [&](const TensorD& in) { return d(in, skip, Mode::kTrain); });
  CHECK_MESSAGE(r.ok, r.describe());
}

TEST_CASE("batch elements do not interact in eval mode") {
  Rng rng(73);
  auto blk = ResMambaBlock<float>::make("b", 2, 4, 1, 4, false, rng);
  blk.mamba.out_proj.W.value = TensorF::normal({8, 4}, rng, 0.0f, 0.3f);
  blk.bind(nullptr);
  TensorF x = TensorF::uniform({2, 2, 4, 4, 4}, rng, -1.0f, 1.0f);
  TensorF y = blk(x, Mode::kEval);
  // swap the two batch elements and rerun
  TensorF xs(x.shape());
  const std::int64_t per = x.numel() / 2;
  std::copy(x.data() + per, x.data() + 2 * per, xs.data());
  std::copy(x.data(), x.data() + per, xs.data() + per);
  TensorF ys = blk(xs, Mode::kEval);
  const std::int64_t per_out = y.numel() / 2;  // output has more channels
  for (std::int64_t i = 0; i < per_out; ++i) {
    REQUIRE(ys.data()[i] == y.data()[per_out + i]);
    REQUIRE(ys.data()[per_out + i] == y.data()[i]);
  }
}
