#pragma once

#include <atomic>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace nnm {

// All recoverable failures are reported through these exception types. The CLI
// maps them onto process exit codes (runtime/numeric -> 1, usage -> 2,
// data format -> 3).

/// Operand shapes are incompatible with the requested operation.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

/// A numeric failure: non-finite values under strict mode, NaN gradients, ...
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

/// An API contract was violated (non-scalar loss, consumed tape reused, ...).
class ContractError : public std::logic_error {
 public:
  explicit ContractError(const std::string& msg) : std::logic_error("contract error: " + msg) {}
};

/// Malformed or truncated file content.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& msg) : std::runtime_error("format error: " + msg) {}
};

/// Invalid configuration (indivisible extents, empty dataset, bad ratios, ...).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

/// A metric is undefined for the given input (empty mask, single-class labels).
class MetricError : public std::runtime_error {
 public:
  explicit MetricError(const std::string& msg) : std::runtime_error("metric error: " + msg) {}
};

enum class Mode { kTrain, kEval };

namespace detail {
inline std::atomic<bool>& strict_flag() {
  static std::atomic<bool> f{false};
  return f;
}
}  // namespace detail

/// When strict numerics is on, primitives reject non-finite inputs with a
/// NumericError instead of propagating them.
inline void set_strict_numerics(bool on) { detail::strict_flag().store(on, std::memory_order_relaxed); }
inline bool strict_numerics() { return detail::strict_flag().load(std::memory_order_relaxed); }

/// RAII toggle used by tests.
class StrictNumericsGuard {
 public:
  explicit StrictNumericsGuard(bool on) : prev_(strict_numerics()) { set_strict_numerics(on); }
  ~StrictNumericsGuard() { set_strict_numerics(prev_); }

 private:
  bool prev_;
};

}  // namespace nnm
