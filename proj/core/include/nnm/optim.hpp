#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "nnm/common.hpp"
#include "nnm/layers.hpp"
#include "nnm/tape.hpp"
#include "nnm/tensor.hpp"

namespace nnm {

/// Adam with decoupled weight decay. Moment buffers are keyed by position in
/// the ParamRefs vector, so the caller must collect params in a stable order.
template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m, v;
  std::int64_t t = 0;
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);

  void init(const ParamRefs<T>& params) {
    m.clear();
    v.clear();
    m.reserve(params.size());
    v.reserve(params.size());
    for (const Param<T>* p : params) {
      m.push_back(Tensor<T>::zeros(p->value.shape()));
      v.push_back(Tensor<T>::zeros(p->value.shape()));
    }
    t = 0;
  }
};

/// One optimizer step. Gradients are read from the tape via each param's
/// bound leaf; a param the loss never touched contributes a zero gradient.
/// Every gradient is checked finite before any state is mutated, so a NaN
/// loss leaves params and moments untouched.
template <typename T>
void adam_step(const ParamRefs<T>& params, const Tape<T>& tape, AdamState<T>& state, T lr,
               T weight_decay) {
  if (state.m.size() != params.size())
    throw ContractError("adam_step: state holds " + std::to_string(state.m.size()) +
                        " moment buffers for " + std::to_string(params.size()) + " params");
  std::vector<const Tensor<T>*> grads(params.size(), nullptr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Param<T>* p = params[i];
    if (state.m[i].shape() != p->value.shape())
      throw ContractError("adam_step: moment shape mismatch for param " + p->name);
    const Tensor<T>* g = tape.grad(p->bound);
    if (g != nullptr) {
      if (g->shape() != p->value.shape())
        throw ContractError("adam_step: gradient shape mismatch for param " + p->name);
      const T* gp = g->data();
      for (std::int64_t k = 0; k < g->numel(); ++k)
        if (!std::isfinite(static_cast<double>(gp[k])))
          throw NumericError("adam_step: non-finite gradient in param " + p->name);
    }
    grads[i] = g;
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(static_cast<double>(state.beta1), static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(static_cast<double>(state.beta2), static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param<T>* p = params[i];
    T* pv = p->value.data();
    T* mv = state.m[i].data();
    T* vv = state.v[i].data();
    const std::int64_t n = p->value.numel();
    const T* gp = grads[i] ? grads[i]->data() : nullptr;
    for (std::int64_t k = 0; k < n; ++k) {
      const T g = gp ? gp[k] : T(0);
      mv[k] = state.beta1 * mv[k] + (T(1) - state.beta1) * g;
      vv[k] = state.beta2 * vv[k] + (T(1) - state.beta2) * g * g;
      const T mhat = static_cast<T>(static_cast<double>(mv[k]) / bc1);
      const T vhat = static_cast<T>(static_cast<double>(vv[k]) / bc2);
      pv[k] -= lr * mhat / (std::sqrt(vhat) + state.eps) + lr * weight_decay * pv[k];
    }
  }
}

}  // namespace nnm
