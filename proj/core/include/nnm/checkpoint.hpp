#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "nnm/common.hpp"
#include "nnm/model.hpp"
#include "nnm/tensor.hpp"

namespace nnm {

// Tensor bundle file, format "NMB1" (little-endian throughout):
//   magic "NMB1"
//   u32 tensor count
//   per tensor:
//     u16 name length, name bytes
//     u8 dtype (0 = float32, 1 = float64)
//     u8 rank, then rank x u32 extents
//     payload: numel * sizeof(dtype) bytes
// Payloads are raw bit patterns, so save -> load round-trips exactly.

namespace detail {

inline void put_u16(std::ostream& os, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

inline std::uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

template <typename T>
constexpr std::uint8_t dtype_code() {
  return sizeof(T) == 4 ? 0 : 1;
}

}  // namespace detail

template <typename T>
struct TensorBundle {
  std::vector<std::pair<std::string, Tensor<T>>> items;

  const Tensor<T>* find(const std::string& name) const {
    for (const auto& [n, t] : items)
      if (n == name) return &t;
    return nullptr;
  }
};

template <typename T>
void save_bundle(const std::string& path,
                 const std::vector<std::pair<std::string, const Tensor<T>*>>& items) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open for writing: " + path);
  os.write("NMB1", 4);
  detail::put_u32(os, static_cast<std::uint32_t>(items.size()));
  for (const auto& [name, t] : items) {
    if (name.size() > 0xffff) throw FormatError("tensor name too long: " + name);
    detail::put_u16(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    os.put(static_cast<char>(detail::dtype_code<T>()));
    os.put(static_cast<char>(t->rank()));
    for (std::int64_t e : t->shape()) detail::put_u32(os, static_cast<std::uint32_t>(e));
    os.write(reinterpret_cast<const char*>(t->data()),
             static_cast<std::streamsize>(t->numel() * static_cast<std::int64_t>(sizeof(T))));
  }
  if (!os) throw FormatError("write failed: " + path);
}

template <typename T>
TensorBundle<T> load_bundle(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "NMB1") throw FormatError("not an NMB1 file: " + path);
  const std::uint32_t count = detail::get_u32(is);
  TensorBundle<T> bundle;
  bundle.items.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t nlen = detail::get_u16(is);
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    const int dtype = is.get();
    const int rank = is.get();
    if (!is || rank < 0 || rank > 8) throw FormatError("corrupt NMB1 record in " + path);
    if (dtype != detail::dtype_code<T>())
      throw FormatError("dtype mismatch in " + path + " for tensor " + name);
    Shape shape(static_cast<std::size_t>(rank));
    for (int r = 0; r < rank; ++r) shape[static_cast<std::size_t>(r)] = detail::get_u32(is);
    Tensor<T> t = rank == 0 ? Tensor<T>::scalar(T(0)) : Tensor<T>(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * static_cast<std::int64_t>(sizeof(T))));
    if (!is) throw FormatError("truncated NMB1 file: " + path);
    bundle.items.emplace_back(std::move(name), std::move(t));
  }
  return bundle;
}

/// Collects a model's parameters and BN buffers as named tensor views, in
/// network order.
template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> model_state(Model<T>& m) {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  ParamRefs<T> ps;
  m.collect(ps);
  for (Param<T>* p : ps) out.emplace_back(p->name, &p->value);
  BufferRefs<T> bs;
  m.buffers(bs);
  for (auto& [n, t] : bs) out.emplace_back(n, t);
  return out;
}

template <typename T>
void save_model(const std::string& path, Model<T>& m) {
  std::vector<std::pair<std::string, const Tensor<T>*>> items;
  for (auto& [n, t] : model_state(m)) items.emplace_back(n, t);
  save_bundle<T>(path, items);
}

/// Loads a bundle saved by save_model into an already-built model. Every
/// model tensor must be present with a matching shape, and the file must not
/// carry extras.
template <typename T>
void load_model(const std::string& path, Model<T>& m) {
  TensorBundle<T> bundle = load_bundle<T>(path);
  auto state = model_state(m);
  if (bundle.items.size() != state.size())
    throw FormatError(path + ": bundle has " + std::to_string(bundle.items.size()) +
                      " tensors, model expects " + std::to_string(state.size()));
  for (auto& [name, dst] : state) {
    const Tensor<T>* src = bundle.find(name);
    if (!src) throw FormatError(path + ": missing tensor " + name);
    if (src->shape() != dst->shape())
      throw FormatError(path + ": shape mismatch for " + name + ": file has " +
                        shape_str(src->shape()) + ", model has " + shape_str(dst->shape()));
    *dst = src->clone();
  }
}

}  // namespace nnm
