#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "nnm/common.hpp"

namespace nnm {

/// Extents of an N-d tensor. Rank 0 is a scalar.
using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

/// Row-major strides; stride of the last axis is 1.
inline Shape strides_of(const Shape& s) {
  Shape st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

inline void check_positive_extents(const Shape& s) {
  for (auto e : s)
    if (e <= 0) throw ShapeError("extents must be positive, got " + shape_str(s));
}

/// Standard broadcasting with trailing-dim alignment. Throws when shapes are
/// incompatible.
inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = a.size() > b.size() ? a.size() : b.size();
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::int64_t ea = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::int64_t eb = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (ea != eb && ea != 1 && eb != 1)
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[rank - 1 - i] = ea == 1 ? eb : ea;
  }
  return out;
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

}  // namespace nnm
