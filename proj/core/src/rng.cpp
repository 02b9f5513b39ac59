#include "nnm/rng.hpp"

#include <cmath>

namespace nnm {

namespace {

constexpr std::uint64_t kWeyl = 0x9e3779b97f4a7c15ull;

std::uint64_t splitmix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

Rng Rng::derive(std::uint64_t seed, std::uint64_t stream) {
  // Two mixing rounds so (seed, stream) and (seed', stream') collisions need
  // a full 64-bit match.
  return Rng(splitmix(splitmix(seed + kWeyl) ^ (stream * 0xda942042e4dd58b5ull)));
}

std::uint64_t Rng::next_u64() { return splitmix(key_ + (++counter_) * kWeyl); }

double Rng::uniform() {
  // 53 random bits into [0, 1).
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  // Box-Muller; u1 in (0, 1] avoids log(0).
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

double Rng::normal(double mean, double stddev) { return mean + stddev * normal(); }

std::uint64_t Rng::below(std::uint64_t n) {
  // Rejection-free multiply-shift; bias is negligible for n << 2^64.
  unsigned __int128 m = static_cast<unsigned __int128>(next_u64());
  m *= n;
  return static_cast<std::uint64_t>(m >> 64);
}

}  // namespace nnm
