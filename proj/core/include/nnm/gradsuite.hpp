#pragma once
// Named finite-difference checks covering every differentiable primitive,
// the composite layers, and the task losses. Each case is a pure function of
// a seed, so callers choose their own coverage/runtime trade-off by looping
// seeds. Shapes are kept tiny: the cost of one case is 2 * (total input
// elements) forward passes.

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "nnm/conv.hpp"
#include "nnm/gradcheck.hpp"
#include "nnm/layers.hpp"
#include "nnm/losses.hpp"
#include "nnm/norm.hpp"
#include "nnm/ops.hpp"
#include "nnm/rng.hpp"
#include "nnm/ssm.hpp"
#include "nnm/tensor.hpp"

namespace nnm {

struct GradSuiteCase {
  std::string name;
  std::function<GradCheckResult<double>(std::uint64_t seed)> run;
};

namespace detail {

// eps 1e-6 keeps the central-difference window well away from the relu kink
// for any reasonable pre-activation density while staying far above f64
// roundoff for these loss magnitudes.
inline GradCheckConfig<double> suite_cfg() {
  GradCheckConfig<double> cfg;
  cfg.eps = 1e-6;
  cfg.rel_tol = 1e-4;
  cfg.abs_floor = 1e-7;
  return cfg;
}

// Magnitudes in [lo, hi] with random signs: exercises both relu branches
// while keeping every element a safe distance from the kink.
inline Tensor<double> signed_away(const Shape& shape, Rng& rng, double lo, double hi) {
  Tensor<double> t(shape);
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = (rng.below(2) ? 1.0 : -1.0) * rng.uniform(lo, hi);
  return t;
}

inline Tensor<double> class_mask(const Shape& shape, std::int64_t num_classes, Rng& rng) {
  Tensor<double> t(shape);
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<double>(rng.below(static_cast<std::uint64_t>(num_classes)));
  return t;
}

// Scalar reduction used to close non-scalar outputs: sum(y*y) feeds a
// nontrivial upstream gradient into every output element.
inline Tensor<double> close_loss(const Tensor<double>& y) { return sum(mul(y, y)); }

// Checks d(loss)/d(inputs) where fwd maps the bound inputs to any tensor.
template <typename F>
GradCheckResult<double> check_fn(F&& fwd, const std::vector<Tensor<double>>& inputs) {
  return grad_check<double>(
      [&](const std::vector<Tensor<double>>& in) { return close_loss(fwd(in)); }, inputs,
      suite_cfg());
}

// Layer-parameter variant: perturbs x plus every collected parameter; the
// loss closure re-binds perturbed values before each forward.
template <typename F>
GradCheckResult<double> check_layer(ParamRefs<double> ps, const Tensor<double>& x, F&& fwd) {
  std::vector<Tensor<double>> inputs{x};
  for (Param<double>* p : ps) inputs.push_back(p->value);
  return grad_check<double>(
      [&](const std::vector<Tensor<double>>& in) {
        for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->bound = in[i + 1];
        return close_loss(fwd(in[0]));
      },
      inputs, suite_cfg());
}

inline Rng case_rng(std::uint64_t seed, std::uint64_t index) {
  return Rng::derive(seed, UINT64_C(0x67726164) + index);  // "grad" + case index
}

}  // namespace detail

/// The full named check list. Case order is stable; every case at every seed
/// is deterministic.
inline std::vector<GradSuiteCase> gradient_suite() {
  using detail::case_rng;
  using detail::check_fn;
  using detail::check_layer;
  std::vector<GradSuiteCase> cases;
  std::uint64_t idx = 0;
  auto reg = [&](const std::string& name,
                 std::function<GradCheckResult<double>(Rng&)> body) {
    const std::uint64_t ci = idx++;
    cases.push_back(GradSuiteCase{
        name, [body = std::move(body), ci](std::uint64_t seed) {
          Rng rng = case_rng(seed, ci);
          return body(rng);
        }});
  };

  // Elementwise binary, with broadcasting on the second operand.
  reg("add", [](Rng& rng) {
    TensorD a = TensorD::normal({2, 3, 4}, rng), b = TensorD::normal({3, 1}, rng);
    return check_fn([](const std::vector<TensorD>& in) { return add(in[0], in[1]); }, {a, b});
  });
  reg("sub", [](Rng& rng) {
    TensorD a = TensorD::normal({2, 3, 4}, rng), b = TensorD::normal({4}, rng);
    return check_fn([](const std::vector<TensorD>& in) { return sub(in[0], in[1]); }, {a, b});
  });
  reg("mul", [](Rng& rng) {
    TensorD a = TensorD::normal({2, 3, 4}, rng), b = TensorD::normal({2, 1, 4}, rng);
    return check_fn([](const std::vector<TensorD>& in) { return mul(in[0], in[1]); }, {a, b});
  });
  reg("div", [](Rng& rng) {
    TensorD a = TensorD::normal({2, 3, 4}, rng);
    TensorD b = detail::signed_away({3, 4}, rng, 0.5, 1.5);  // away from 0
    return check_fn([](const std::vector<TensorD>& in) { return div(in[0], in[1]); }, {a, b});
  });
  reg("add_scalar", [](Rng& rng) {
    TensorD a = TensorD::normal({3, 5}, rng);
    return check_fn([](const std::vector<TensorD>& in) { return add_scalar(in[0], 0.7); }, {a});
  });
  reg("mul_scalar", [](Rng& rng) {
    TensorD a = TensorD::normal({3, 5}, rng);
    return check_fn([](const std::vector<TensorD>& in) { return mul_scalar(in[0], -1.3); }, {a});
  });
  reg("neg", [](Rng& rng) {
    TensorD a = TensorD::normal({3, 5}, rng);
    return check_fn([](const std::vector<TensorD>& in) { return neg(in[0]); }, {a});
  });

  // Elementwise unary.
  reg("exp", [](Rng& rng) {
    TensorD a = TensorD::uniform({3, 5}, rng, -2.0, 2.0);
    return check_fn([](const std::vector<TensorD>& in) { return exp(in[0]); }, {a});
  });
  reg("log", [](Rng& rng) {
    TensorD a = TensorD::uniform({3, 5}, rng, 0.2, 3.0);
    return check_fn([](const std::vector<TensorD>& in) { return log(in[0]); }, {a});
  });
  reg("relu", [](Rng& rng) {
    TensorD a = detail::signed_away({3, 5}, rng, 0.2, 1.2);
    return check_fn([](const std::vector<TensorD>& in) { return relu(in[0]); }, {a});
  });
  reg("sigmoid", [](Rng& rng) {
    TensorD a = TensorD::uniform({3, 5}, rng, -3.0, 3.0);
    return check_fn([](const std::vector<TensorD>& in) { return sigmoid(in[0]); }, {a});
  });
  reg("softplus", [](Rng& rng) {
    TensorD a = TensorD::uniform({3, 5}, rng, -3.0, 3.0);
    return check_fn([](const std::vector<TensorD>& in) { return softplus(in[0]); }, {a});
  });
  reg("silu", [](Rng& rng) {
    TensorD a = TensorD::uniform({3, 5}, rng, -3.0, 3.0);
    return check_fn([](const std::vector<TensorD>& in) { return silu(in[0]); }, {a});
  });

  // Reductions. close_loss squares the reduced value, so the constant-factor
  // chain rule through sum/mean is exercised, not just pass-through.
  reg("sum_all", [](Rng& rng) {
    TensorD a = TensorD::normal({2, 3, 4}, rng);
    return check_fn([](const std::vector<TensorD>& in) { return sum(in[0]); }, {a});
  });
  reg("sum_axes", [](Rng& rng) {
    TensorD a = TensorD::normal({2, 3, 4}, rng);
    return check_fn([](const std::vector<TensorD>& in) { return sum(in[0], {0, 2}, false); }, {a});
  });
  reg("sum_axes_keepdims", [](Rng& rng) {
    TensorD a = TensorD::normal({2, 3, 4}, rng);
    return check_fn([](const std::vector<TensorD>& in) { return sum(in[0], {1}, true); }, {a});
  });
  reg("mean_all", [](Rng& rng) {
    TensorD a = TensorD::normal({2, 3, 4}, rng);
    return check_fn([](const std::vector<TensorD>& in) { return mean(in[0]); }, {a});
  });
  reg("mean_axes", [](Rng& rng) {
    TensorD a = TensorD::normal({2, 3, 4}, rng);
    return check_fn([](const std::vector<TensorD>& in) { return mean(in[0], {1}, false); }, {a});
  });

  // Shape movement.
  reg("reshape", [](Rng& rng) {
    TensorD a = TensorD::normal({2, 3, 4}, rng);
    return check_fn([](const std::vector<TensorD>& in) { return reshape(in[0], {4, 6}); }, {a});
  });
  reg("transpose", [](Rng& rng) {
    TensorD a = TensorD::normal({2, 3, 4}, rng);
    return check_fn([](const std::vector<TensorD>& in) { return transpose(in[0], {2, 0, 1}); },
                    {a});
  });
  reg("slice", [](Rng& rng) {
    TensorD a = TensorD::normal({3, 5, 4}, rng);
    return check_fn(
        [](const std::vector<TensorD>& in) { return slice(in[0], {1, 0, 1}, {3, 4, 3}); }, {a});
  });
  reg("concat", [](Rng& rng) {
    TensorD a = TensorD::normal({2, 2, 3}, rng), b = TensorD::normal({2, 4, 3}, rng);
    return check_fn([](const std::vector<TensorD>& in) { return concat({in[0], in[1]}, 1); },
                    {a, b});
  });
  reg("pad", [](Rng& rng) {
    TensorD a = TensorD::normal({2, 3, 3}, rng);
    return check_fn([](const std::vector<TensorD>& in) { return pad(in[0], {0, 1, 2}, {1, 0, 1}); },
                    {a});
  });
  reg("broadcast_to", [](Rng& rng) {
    TensorD a = TensorD::normal({3, 1}, rng);
    return check_fn(
        [](const std::vector<TensorD>& in) { return broadcast_to(in[0], Shape{3, 4}); }, {a});
  });
  reg("flip", [](Rng& rng) {
    TensorD a = TensorD::normal({2, 3, 4}, rng);
    return check_fn([](const std::vector<TensorD>& in) { return flip(in[0], 1); }, {a});
  });
  reg("matmul", [](Rng& rng) {
    TensorD a = TensorD::normal({3, 4}, rng), b = TensorD::normal({4, 2}, rng);
    return check_fn([](const std::vector<TensorD>& in) { return matmul(in[0], in[1]); }, {a, b});
  });
  reg("log_softmax", [](Rng& rng) {
    TensorD a = TensorD::normal({3, 5}, rng);
    return check_fn([](const std::vector<TensorD>& in) { return log_softmax(in[0], 1); }, {a});
  });
  reg("upsample_trilinear2x", [](Rng& rng) {
    TensorD a = TensorD::normal({1, 2, 2, 3, 2}, rng);
    return check_fn([](const std::vector<TensorD>& in) { return upsample_trilinear2x(in[0]); },
                    {a});
  });

  // Convolution / normalization primitives.
  reg("conv3d_s1p1", [](Rng& rng) {
    TensorD x = TensorD::normal({1, 2, 4, 4, 4}, rng);
    TensorD w = TensorD::normal({3, 2, 3, 3, 3}, rng, 0.0, 0.3);
    TensorD b = TensorD::normal({3}, rng);
    return check_fn(
        [](const std::vector<TensorD>& in) { return conv3d(in[0], in[1], in[2], 1, 1); },
        {x, w, b});
  });
  reg("conv3d_s2p0", [](Rng& rng) {
    TensorD x = TensorD::normal({2, 2, 5, 5, 5}, rng);
    TensorD w = TensorD::normal({3, 2, 3, 3, 3}, rng, 0.0, 0.3);
    TensorD b = TensorD::normal({3}, rng);
    return check_fn(
        [](const std::vector<TensorD>& in) { return conv3d(in[0], in[1], in[2], 2, 0); },
        {x, w, b});
  });
  reg("batchnorm3d_train", [](Rng& rng) {
    auto bn = BatchNorm3dLayer<double>::make("bn", 3);
    bn.gamma.value = TensorD::uniform({3}, rng, 0.5, 1.5);
    bn.beta.value = TensorD::normal({3}, rng);
    ParamRefs<double> ps;
    bn.collect(ps);
    TensorD x = TensorD::normal({2, 3, 3, 3, 3}, rng);
    // Normalization pins the output's norm, so sum(y^2) is nearly invariant
    // to x and its finite difference drowns in loss quantization. A fixed
    // random linear functional keeps the input gradient O(1).
    TensorD r = TensorD::normal(x.shape(), rng);
    std::vector<TensorD> inputs{x};
    for (Param<double>* p : ps) inputs.push_back(p->value);
    return grad_check<double>(
        [&](const std::vector<TensorD>& in) {
          for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->bound = in[i + 1];
          return sum(mul(bn(in[0], Mode::kTrain), r));
        },
        inputs, detail::suite_cfg());
  });
  reg("selective_scan", [](Rng& rng) {
    SSMParams<double> p = make_ssm_params<double>(3, 2, rng);
    TensorD u = TensorD::normal({1, 9, 3}, rng);
    return grad_check<double>(
        [&](const std::vector<TensorD>& in) {
          SSMParams<double> q;
          q.A_log = in[1];
          q.W_B = in[2];
          q.W_C = in[3];
          q.W_dt = in[4];
          q.b_dt = in[5];
          q.D_skip = in[6];
          return detail::close_loss(selective_scan(in[0], q));
        },
        {u, p.A_log, p.W_B, p.W_C, p.W_dt, p.b_dt, p.D_skip}, detail::suite_cfg());
  });

  // Composite blocks, parameters included.
  reg("res_block", [](Rng& rng) {
    auto blk = ResBlock<double>::make("rb", 2, 3, 1, rng);
    ParamRefs<double> ps;
    blk.collect(ps);
    TensorD x = detail::signed_away({1, 2, 4, 4, 4}, rng, 0.3, 1.3);
    return check_layer(ps, x, [&](const TensorD& in) { return blk(in, Mode::kTrain); });
  });
  reg("res_block_stride2", [](Rng& rng) {
    auto blk = ResBlock<double>::make("rb", 2, 4, 2, rng);
    ParamRefs<double> ps;
    blk.collect(ps);
    TensorD x = detail::signed_away({1, 2, 4, 4, 4}, rng, 0.3, 1.3);
    return check_layer(ps, x, [&](const TensorD& in) { return blk(in, Mode::kTrain); });
  });
  reg("mamba_block", [](Rng& rng) {
    MambaLayerConfig mc;
    mc.channels = 3;
    mc.state_size = 2;
    auto m = MambaLayer<double>::make("m", mc, rng);
    m.out_proj.W.value = TensorD::normal({6, 3}, rng, 0.0, 0.3);  // zero-init would hide params
    ParamRefs<double> ps;
    m.collect(ps);
    TensorD x = TensorD::normal({1, 3, 2, 2, 2}, rng);
    return check_layer(ps, x, [&](const TensorD& in) { return m(in); });
  });
  reg("mamba_block_bidirectional", [](Rng& rng) {
    MambaLayerConfig mc;
    mc.channels = 2;
    mc.state_size = 2;
    mc.bidirectional = true;
    auto m = MambaLayer<double>::make("m", mc, rng);
    m.out_proj.W.value = TensorD::normal({4, 2}, rng, 0.0, 0.3);
    ParamRefs<double> ps;
    m.collect(ps);
    TensorD x = TensorD::normal({1, 2, 2, 2, 2}, rng);
    return check_layer(ps, x, [&](const TensorD& in) { return m(in); });
  });
  reg("decoder_block", [](Rng& rng) {
    auto d = DecoderBlock<double>::make("dec", 3, 2, 2, rng);
    ParamRefs<double> ps;
    d.collect(ps);
    TensorD deep = TensorD::normal({1, 3, 2, 2, 2}, rng);
    TensorD skip = TensorD::normal({1, 2, 4, 4, 4}, rng);
    return check_layer(ps, deep, [&](const TensorD& in) { return d(in, skip, Mode::kTrain); });
  });

  // Task losses (already scalar: checked directly, no closing reduction).
  reg("loss_ce_seg", [](Rng& rng) {
    TensorD logits = TensorD::normal({1, 3, 2, 2, 2}, rng);
    TensorD target = detail::class_mask({1, 2, 2, 2}, 3, rng);
    return grad_check<double>(
        [&](const std::vector<TensorD>& in) { return ce_seg_loss(in[0], target); }, {logits},
        detail::suite_cfg());
  });
  reg("loss_soft_dice", [](Rng& rng) {
    TensorD logits = TensorD::normal({1, 3, 2, 2, 2}, rng);
    TensorD target = detail::class_mask({1, 2, 2, 2}, 3, rng);
    return grad_check<double>(
        [&](const std::vector<TensorD>& in) { return soft_dice_loss(in[0], target); }, {logits},
        detail::suite_cfg());
  });
  reg("loss_dice_ce", [](Rng& rng) {
    TensorD logits = TensorD::normal({1, 3, 2, 2, 2}, rng);
    TensorD target = detail::class_mask({1, 2, 2, 2}, 3, rng);
    return grad_check<double>(
        [&](const std::vector<TensorD>& in) { return dice_ce_loss(in[0], target); }, {logits},
        detail::suite_cfg());
  });
  reg("loss_ce_cls", [](Rng& rng) {
    TensorD logits = TensorD::normal({3, 2}, rng);
    TensorD labels = detail::class_mask({3}, 2, rng);
    return grad_check<double>(
        [&](const std::vector<TensorD>& in) { return ce_cls_loss(in[0], labels); }, {logits},
        detail::suite_cfg());
  });
  reg("loss_heatmap_mse", [](Rng& rng) {
    TensorD pred = TensorD::normal({1, 2, 3, 3, 3}, rng);
    TensorD target = TensorD::uniform({1, 2, 3, 3, 3}, rng, 0.0, 1.0);
    return grad_check<double>(
        [&](const std::vector<TensorD>& in) { return heatmap_mse_loss(in[0], target); }, {pred},
        detail::suite_cfg());
  });

  return cases;
}

}  // namespace nnm
