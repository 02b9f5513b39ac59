#pragma once
// Central-difference gradient verification for scalar-valued tensor programs.

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "nnm/tape.hpp"
#include "nnm/tensor.hpp"

namespace nnm {

template <typename T>
struct GradCheckConfig {
  T eps = static_cast<T>(1e-5);        // central-difference step
  T rel_tol = static_cast<T>(1e-4);    // |a - n| <= rel_tol * max(|a|,|n|) + abs_floor
  T abs_floor = static_cast<T>(1e-7);
};

template <typename T>
struct GradCheckResult {
  bool ok = true;
  T worst_err = T(0);       // worst |a - n| - rel_tol * max(|a|,|n|), clamped at 0
  T worst_analytic = T(0);
  T worst_numeric = T(0);
  std::string worst_at;     // "input 2, element 17" for the worst element

  std::string describe() const {
    std::ostringstream os;
    os << (ok ? "ok" : "FAIL") << " (worst " << worst_at << ": analytic " << worst_analytic
       << ", numeric " << worst_numeric << ")";
    return os.str();
  }
};

/// Checks the tape gradient of `make_loss` against central differences at the
/// given inputs. `make_loss` must map the (possibly tape-bound) inputs to a
/// scalar and be evaluable repeatedly; it sees perturbed copies during the
/// finite-difference sweep.
template <typename T, typename F>
GradCheckResult<T> grad_check(F&& make_loss, const std::vector<Tensor<T>>& inputs,
                              GradCheckConfig<T> cfg = {}) {
  // Analytic pass on a fresh tape.
  Tape<T> tape;
  std::vector<Tensor<T>> bound;
  bound.reserve(inputs.size());
  for (const auto& in : inputs) bound.push_back(tape.leaf(in));
  Tensor<T> loss = make_loss(bound);
  if (loss.numel() != 1) throw ContractError("grad_check: loss must be scalar");
  tape.backward(loss);
  std::vector<Tensor<T>> analytic;
  analytic.reserve(inputs.size());
  for (const auto& b : bound) analytic.push_back(tape.grad_or_zero(b));

  // Numeric pass: perturb one element at a time on detached clones.
  std::vector<Tensor<T>> probe;
  probe.reserve(inputs.size());
  for (const auto& in : inputs) probe.push_back(in.clone());

  GradCheckResult<T> res;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    T* p = probe[i].data();
    const T* a = analytic[i].data();
    for (std::int64_t j = 0; j < probe[i].numel(); ++j) {
      const T saved = p[j];
      p[j] = saved + cfg.eps;
      const T up = make_loss(probe).item();
      p[j] = saved - cfg.eps;
      const T dn = make_loss(probe).item();
      p[j] = saved;
      const T numeric = (up - dn) / (T(2) * cfg.eps);
      const T err = std::abs(a[j] - numeric);
      const T bound_ = cfg.rel_tol * std::max(std::abs(a[j]), std::abs(numeric)) + cfg.abs_floor;
      const T excess = err > bound_ ? err - bound_ : T(0);
      if (excess > res.worst_err || (res.worst_at.empty() && excess == T(0) && j == 0 && i == 0)) {
        res.worst_err = excess;
        res.worst_analytic = a[j];
        res.worst_numeric = numeric;
        res.worst_at = "input " + std::to_string(i) + ", element " + std::to_string(j);
      }
      if (excess > T(0)) res.ok = false;
    }
  }
  return res;
}

}  // namespace nnm
