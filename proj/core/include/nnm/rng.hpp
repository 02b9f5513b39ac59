#pragma once

#include <cstdint>

namespace nnm {

/// Counter-based generator: output i is a pure function of (key, i), so
/// parallel producers can derive independent streams with derive() and a
/// sample index. SplitMix64 finalizer over a Weyl sequence.
class Rng {
 public:
  Rng() = default;
  explicit Rng(std::uint64_t key) : key_(key) {}

  /// Independent stream for (seed, stream); used to give every sample /
  /// epoch / layer its own generator.
  static Rng derive(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t next_u64();

  /// Uniform in [0, 1).
  double uniform();
  /// Uniform in [lo, hi).
  double uniform(double lo, double hi);
  /// Standard normal via Box-Muller (two uniforms per draw, no cached spare).
  double normal();
  double normal(double mean, double stddev);
  /// Uniform integer in [0, n); n > 0.
  std::uint64_t below(std::uint64_t n);

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_ = 0x9e3779b97f4a7c15ull;
  std::uint64_t counter_ = 0;
};

/// Deterministic in-place Fisher-Yates shuffle of [0, n) index arrays.
template <typename Vec>
void shuffle_indices(Vec& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    auto tmp = v[i - 1];
    v[i - 1] = v[j];
    v[j] = tmp;
  }
}

}  // namespace nnm
