#include "nnm/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <utility>

namespace nnm {
namespace {

float snap_quarter(double x) { return static_cast<float>(std::round(x * 4.0) / 4.0); }

void add_noise(Tensor<float>& img, double sigma, Rng& rng) {
  if (sigma <= 0.0) return;
  float* p = img.data();
  for (std::int64_t i = 0; i < img.numel(); ++i)
    p[i] += static_cast<float>(rng.normal(0.0, sigma));
}

struct Ellipsoid {
  double cd, ch, cw;  // center, voxels
  double ad, ah, aw;  // semi-axes, voxels

  double r2(std::int64_t d, std::int64_t h, std::int64_t w) const {
    const double x = (d - cd) / ad, y = (h - ch) / ah, z = (w - cw) / aw;
    return x * x + y * y + z * z;
  }
};

void check_size(std::int64_t size) {
  if (size < 8 || size > 256)
    throw ConfigError("volume size " + std::to_string(size) + " outside [8, 256]");
}

}  // namespace

VolumeSample gen_seg_sample(std::int64_t size, double noise_sigma, Rng& rng) {
  check_size(size);
  const double S = static_cast<double>(size);
  Ellipsoid e;
  e.ad = rng.uniform(0.20, 0.30) * S;
  e.ah = rng.uniform(0.20, 0.30) * S;
  e.aw = rng.uniform(0.20, 0.30) * S;
  e.cd = rng.uniform(e.ad + 1.0, S - 2.0 - e.ad);
  e.ch = rng.uniform(e.ah + 1.0, S - 2.0 - e.ah);
  e.cw = rng.uniform(e.aw + 1.0, S - 2.0 - e.aw);
  const double f3 = rng.uniform(0.30, 0.45);  // innermost shell boundary
  const double f2 = rng.uniform(0.55, 0.70);
  static constexpr float kLevel[4] = {0.05f, 0.35f, 0.65f, 0.95f};

  VolumeSample s;
  s.task = Task::kSegmentation;
  s.image = Tensor<float>({1, size, size, size});
  s.mask = Tensor<float>({size, size, size});
  float* ip = s.image.data();
  float* mp = s.mask.data();
  std::int64_t i = 0;
  for (std::int64_t d = 0; d < size; ++d)
    for (std::int64_t h = 0; h < size; ++h)
      for (std::int64_t w = 0; w < size; ++w, ++i) {
        const double r = std::sqrt(e.r2(d, h, w));
        const int cls = r <= f3 ? 3 : r <= f2 ? 2 : r <= 1.0 ? 1 : 0;
        mp[i] = static_cast<float>(cls);
        ip[i] = kLevel[cls];
      }
  add_noise(s.image, noise_sigma, rng);
  return s;
}

VolumeSample gen_cls_sample(std::int64_t size, double noise_sigma, Rng& rng) {
  check_size(size);
  const double S = static_cast<double>(size);
  Ellipsoid front, back;
  double vf = 0.0, vb = 0.0;
  do {
    auto blob = [&](double c_lo, double c_hi) {
      Ellipsoid b;
      b.ad = rng.uniform(0.11, 0.172) * S;
      b.ah = rng.uniform(0.11, 0.172) * S;
      b.aw = rng.uniform(0.11, 0.172) * S;
      b.cd = rng.uniform(c_lo, c_hi) * S;
      b.ch = rng.uniform(0.28, 0.72) * S;
      b.cw = rng.uniform(0.28, 0.72) * S;
      return b;
    };
    front = blob(0.215, 0.31);
    back = blob(0.66, 0.79);
    vf = front.ad * front.ah * front.aw;
    vb = back.ad * back.ah * back.aw;
  } while (std::max(vf, vb) < 1.3 * std::min(vf, vb));

  VolumeSample s;
  s.task = Task::kClassification;
  s.label = vf > vb ? 1 : 0;
  s.image = Tensor<float>({1, size, size, size});
  float* ip = s.image.data();
  std::int64_t i = 0;
  for (std::int64_t d = 0; d < size; ++d)
    for (std::int64_t h = 0; h < size; ++h)
      for (std::int64_t w = 0; w < size; ++w, ++i) {
        const bool in = front.r2(d, h, w) <= 1.0 || back.r2(d, h, w) <= 1.0;
        ip[i] = in ? 0.8f : 0.05f;
      }
  add_noise(s.image, noise_sigma, rng);
  return s;
}

VolumeSample gen_landmark_sample(std::int64_t size, double noise_sigma, Rng& rng) {
  check_size(size);
  const double S = static_cast<double>(size);
  Ellipsoid e;
  e.cd = snap_quarter(rng.uniform(0.40, 0.60) * S);
  e.ch = snap_quarter(rng.uniform(0.40, 0.60) * S);
  e.cw = snap_quarter(rng.uniform(0.40, 0.60) * S);
  e.ad = snap_quarter(rng.uniform(0.16, 0.34) * S);
  e.ah = snap_quarter(rng.uniform(0.16, 0.34) * S);
  e.aw = snap_quarter(rng.uniform(0.16, 0.34) * S);

  VolumeSample s;
  s.task = Task::kLandmark;
  s.image = Tensor<float>({1, size, size, size});
  float* ip = s.image.data();
  std::int64_t i = 0;
  for (std::int64_t d = 0; d < size; ++d)
    for (std::int64_t h = 0; h < size; ++h)
      for (std::int64_t w = 0; w < size; ++w, ++i)
        ip[i] = e.r2(d, h, w) <= 1.0 ? 0.8f : 0.05f;
  add_noise(s.image, noise_sigma, rng);

  const float cd = static_cast<float>(e.cd), ch = static_cast<float>(e.ch),
              cw = static_cast<float>(e.cw);
  const float ad = static_cast<float>(e.ad), ah = static_cast<float>(e.ah),
              aw = static_cast<float>(e.aw);
  s.landmarks = {{cd - ad, ch, cw}, {cd + ad, ch, cw}, {cd, ch - ah, cw},
                 {cd, ch + ah, cw}, {cd, ch, cw - aw}, {cd, ch, cw + aw}};
  return s;
}

std::vector<VolumeSample> gen_dataset(const DatasetSpec& spec) {
  if (spec.n_samples < 0) throw ConfigError("n_samples must be nonnegative");
  if (spec.noise_sigma < 0.0) throw ConfigError("noise_sigma must be nonnegative");
  check_size(spec.size);
  std::vector<VolumeSample> out;
  out.reserve(static_cast<std::size_t>(spec.n_samples));
  for (std::int64_t i = 0; i < spec.n_samples; ++i) {
    Rng rng = Rng::derive(spec.seed, static_cast<std::uint64_t>(i));
    switch (spec.task) {
      case Task::kSegmentation: out.push_back(gen_seg_sample(spec.size, spec.noise_sigma, rng)); break;
      case Task::kClassification: out.push_back(gen_cls_sample(spec.size, spec.noise_sigma, rng)); break;
      case Task::kLandmark: out.push_back(gen_landmark_sample(spec.size, spec.noise_sigma, rng)); break;
    }
  }
  return out;
}

SplitIndices split_indices(std::int64_t n, const std::array<double, 3>& ratios,
                           std::uint64_t seed) {
  if (n < 0) throw ConfigError("split_indices: negative n");
  double sum = 0.0;
  for (double r : ratios) {
    if (r < 0.0) throw ConfigError("split_indices: negative ratio");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split_indices: ratios must sum to 1");

  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  Rng rng = Rng::derive(seed, UINT64_C(0x73706c6974));  // dedicated stream for the split
  for (std::int64_t i = n - 1; i > 0; --i) {
    const std::int64_t j =
        static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }

  const auto bound = [n](double cum) {
    auto b = static_cast<std::int64_t>(std::ceil(static_cast<double>(n) * cum));
    return std::clamp<std::int64_t>(b, 0, n);
  };
  const std::int64_t b1 = bound(ratios[0]);
  const std::int64_t b2 = std::max(b1, bound(ratios[0] + ratios[1]));

  SplitIndices out;
  out.train.assign(perm.begin(), perm.begin() + b1);
  out.val.assign(perm.begin() + b1, perm.begin() + b2);
  out.test.assign(perm.begin() + b2, perm.end());
  return out;
}

VolumeSample flip_sample(const VolumeSample& s, std::int64_t axis) {
  if (axis < 0 || axis > 2) throw ConfigError("flip_sample: axis must be 0..2");
  VolumeSample out;
  out.task = s.task;
  out.spacing = s.spacing;
  out.image = flip(s.image, axis + 1);  // image is [C,D,H,W]
  if (s.mask.defined()) out.mask = flip(s.mask, axis);
  out.label = s.label;
  if (s.task == Task::kClassification && axis == 0 && s.label >= 0)
    out.label = 1 - s.label;  // front/back swap
  if (!s.landmarks.empty()) {
    const float edge =
        static_cast<float>(s.image.extent(axis + 1) - 1) * s.spacing[static_cast<std::size_t>(axis)];
    out.landmarks = s.landmarks;
    for (auto& lm : out.landmarks)
      lm[static_cast<std::size_t>(axis)] = edge - lm[static_cast<std::size_t>(axis)];
    if (out.landmarks.size() == static_cast<std::size_t>(kNumLandmarks)) {
      const std::size_t lo = static_cast<std::size_t>(2 * axis);
      std::swap(out.landmarks[lo], out.landmarks[lo + 1]);  // -end and +end trade places
    }
  }
  return out;
}

namespace {

void put_u32(std::ofstream& f, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::ifstream& f) {
  unsigned char b[4];
  if (!f.read(reinterpret_cast<char*>(b), 4)) throw FormatError("volume file truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ofstream& f, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(f, u);
}

float get_f32(std::ifstream& f) {
  const std::uint32_t u = get_u32(f);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

}  // namespace

void write_volume(const std::string& path, const VolumeSample& s) {
  if (!s.image.defined() || s.image.rank() != 4)
    throw FormatError("write_volume: image must be [C,D,H,W]");
  if (s.image.extent(0) > 16) throw FormatError("write_volume: too many channels");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open " + path + " for writing");
  f.write("NMV1", 4);
  f.put(static_cast<char>(static_cast<int>(s.task)));
  f.put(static_cast<char>(s.image.extent(0)));
  for (int a = 1; a <= 3; ++a) put_u32(f, static_cast<std::uint32_t>(s.image.extent(a)));
  for (float sp : s.spacing) put_f32(f, sp);
  for (std::int64_t i = 0; i < s.image.numel(); ++i) put_f32(f, s.image.data()[i]);
  const std::int64_t vox = s.image.numel() / s.image.extent(0);
  switch (s.task) {
    case Task::kSegmentation: {
      if (!s.mask.defined() || s.mask.numel() != vox)
        throw FormatError("write_volume: segmentation sample needs a full-size mask");
      for (std::int64_t i = 0; i < vox; ++i) {
        const long v = std::lround(static_cast<double>(s.mask.data()[i]));
        if (v < 0 || v > 127) throw FormatError("write_volume: mask value out of int8 range");
        f.put(static_cast<char>(v));
      }
      break;
    }
    case Task::kClassification: {
      if (s.label < 0) throw FormatError("write_volume: classification sample needs a label");
      put_u32(f, static_cast<std::uint32_t>(s.label));
      break;
    }
    case Task::kLandmark: {
      put_u32(f, static_cast<std::uint32_t>(s.landmarks.size()));
      for (const auto& lm : s.landmarks)
        for (float c : lm) put_f32(f, c);
      break;
    }
  }
  if (!f) throw FormatError("write failed for " + path);
}

VolumeSample read_volume(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, "NMV1", 4) != 0)
    throw FormatError(path + " is not an NMV1 volume");
  const int task_code = f.get();
  const int channels = f.get();
  if (task_code < 0 || task_code > 2 || channels < 1 || channels > 16)
    throw FormatError("corrupt NMV1 header in " + path);
  VolumeSample s;
  s.task = static_cast<Task>(task_code);
  Shape shape{channels, 0, 0, 0};
  for (int a = 1; a <= 3; ++a) {
    const std::uint32_t e = get_u32(f);
    if (e < 1 || e > 4096) throw FormatError("corrupt NMV1 extents in " + path);
    shape[static_cast<std::size_t>(a)] = e;
  }
  for (auto& sp : s.spacing) sp = get_f32(f);
  s.image = Tensor<float>(shape);
  for (std::int64_t i = 0; i < s.image.numel(); ++i) s.image.data()[i] = get_f32(f);
  const std::int64_t vox = s.image.numel() / channels;
  switch (s.task) {
    case Task::kSegmentation: {
      s.mask = Tensor<float>({shape[1], shape[2], shape[3]});
      for (std::int64_t i = 0; i < vox; ++i) {
        char c;
        if (!f.get(c)) throw FormatError("volume file truncated");
        s.mask.data()[i] = static_cast<float>(static_cast<signed char>(c));
      }
      break;
    }
    case Task::kClassification: s.label = get_u32(f); break;
    case Task::kLandmark: {
      const std::uint32_t count = get_u32(f);
      if (count > 1024) throw FormatError("corrupt NMV1 landmark count in " + path);
      s.landmarks.resize(count);
      for (auto& lm : s.landmarks)
        for (auto& c : lm) c = get_f32(f);
      break;
    }
  }
  return s;
}

namespace {

const VolumeSample& pick(const std::vector<VolumeSample>& samples, std::int64_t i) {
  if (i < 0 || i >= static_cast<std::int64_t>(samples.size()))
    throw ConfigError("batch index " + std::to_string(i) + " out of range");
  return samples[static_cast<std::size_t>(i)];
}

}  // namespace

Tensor<float> batch_images(const std::vector<VolumeSample>& samples,
                           const std::vector<std::int64_t>& idx) {
  if (idx.empty()) throw ConfigError("batch_images: empty batch");
  const Tensor<float>& first = pick(samples, idx[0]).image;
  Shape shape{static_cast<std::int64_t>(idx.size())};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  Tensor<float> out(shape);
  const std::int64_t per = first.numel();
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const Tensor<float>& img = pick(samples, idx[b]).image;
    if (img.shape() != first.shape())
      throw ShapeError("batch_images: mixed shapes in one batch");
    std::copy(img.data(), img.data() + per, out.data() + static_cast<std::int64_t>(b) * per);
  }
  return out;
}

Tensor<float> batch_masks(const std::vector<VolumeSample>& samples,
                          const std::vector<std::int64_t>& idx) {
  if (idx.empty()) throw ConfigError("batch_masks: empty batch");
  const Tensor<float>& first = pick(samples, idx[0]).mask;
  if (!first.defined()) throw ConfigError("batch_masks: sample has no mask");
  Shape shape{static_cast<std::int64_t>(idx.size())};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  Tensor<float> out(shape);
  const std::int64_t per = first.numel();
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const Tensor<float>& m = pick(samples, idx[b]).mask;
    if (!m.defined() || m.shape() != first.shape())
      throw ShapeError("batch_masks: missing mask or mixed shapes");
    std::copy(m.data(), m.data() + per, out.data() + static_cast<std::int64_t>(b) * per);
  }
  return out;
}

Tensor<float> batch_labels(const std::vector<VolumeSample>& samples,
                           const std::vector<std::int64_t>& idx) {
  if (idx.empty()) throw ConfigError("batch_labels: empty batch");
  Tensor<float> out({static_cast<std::int64_t>(idx.size())});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const VolumeSample& s = pick(samples, idx[b]);
    if (s.label < 0) throw ConfigError("batch_labels: sample has no label");
    out.data()[b] = static_cast<float>(s.label);
  }
  return out;
}

}  // namespace nnm
