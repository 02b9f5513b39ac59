#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "nnm/common.hpp"
#include "nnm/layers.hpp"

namespace nnm {

enum class Task { kSegmentation, kClassification, kLandmark };

inline const char* task_name(Task t) {
  switch (t) {
    case Task::kSegmentation: return "segmentation";
    case Task::kClassification: return "classification";
    case Task::kLandmark: return "landmark";
  }
  return "?";
}

inline Task task_from_name(const std::string& s) {
  if (s == "segmentation" || s == "seg") return Task::kSegmentation;
  if (s == "classification" || s == "cls") return Task::kClassification;
  if (s == "landmark" || s == "lmk") return Task::kLandmark;
  throw ConfigError("unknown task: " + s);
}

struct ModelConfig {
  Task task = Task::kSegmentation;
  std::int64_t in_channels = 1;
  std::vector<std::int64_t> stage_channels{16, 32, 64, 128};
  std::int64_t state_size = 8;
  std::int64_t num_classes = 2;    // segmentation / classification classes
  std::int64_t num_landmarks = 6;  // landmark heatmap channels
  std::array<std::int64_t, 3> input_spatial{32, 32, 32};
  bool use_mamba = true;  // ablation switch: false removes every Mamba layer
  bool bidirectional = false;

  std::int64_t stages() const { return static_cast<std::int64_t>(stage_channels.size()); }

  /// Total downsampling factor between input and the deepest feature map.
  std::int64_t downsample_factor() const {
    // encoder stages 1..S-1 stride; the classification stem strides too
    return std::int64_t(1) << (stages() - 1 + (task == Task::kClassification ? 1 : 0));
  }

  void validate() const {
    if (stages() < 2) throw ConfigError("ModelConfig: need at least 2 stages");
    for (std::int64_t c : stage_channels)
      if (c < 1) throw ConfigError("ModelConfig: stage channels must be positive");
    if (in_channels < 1) throw ConfigError("ModelConfig: in_channels must be positive");
    if (state_size < 1) throw ConfigError("ModelConfig: state_size must be positive");
    if (task == Task::kLandmark) {
      if (num_landmarks < 1) throw ConfigError("ModelConfig: num_landmarks must be positive");
    } else if (num_classes < 2) {
      throw ConfigError("ModelConfig: num_classes must be at least 2");
    }
    const std::int64_t f = downsample_factor();
    for (std::int64_t e : input_spatial) {
      if (e % f != 0 || e / f < 1)
        throw ConfigError("ModelConfig: spatial extent " + std::to_string(e) +
                          " not divisible by the downsampling factor " + std::to_string(f));
    }
  }
};

struct MambaPlacement {
  std::int64_t stage = 0;
  std::int64_t channels = 0;
};

/// One network for all three tasks; which members are populated depends on
/// cfg.task. Segmentation and landmark use the encoder-decoder path (the only
/// difference is which encoder stages carry a Mamba layer); classification
/// uses a strided stem, one Mamba layer after it, plain residual stages, and
/// a pooled linear head.
template <typename T>
struct Model {
  ModelConfig cfg;

  Conv3dLayer<T> stem;
  BatchNorm3dLayer<T> stem_bn;

  // encoder stages; kind 1 stages live in enc_mamba, kind 0 in enc_plain
  std::vector<std::int8_t> stage_kind;
  std::vector<std::int32_t> stage_index;
  std::vector<ResBlock<T>> enc_plain;
  std::vector<ResMambaBlock<T>> enc_mamba;

  // encoder-decoder tasks
  std::vector<DecoderBlock<T>> dec;  // dec[i] consumes stage i+1 output, emits stage i width
  Conv3dLayer<T> head;

  // classification task
  bool cls_mamba = false;
  MambaLayer<T> cls_mamba_layer;
  Linear<T> cls_head;

  bool is_encdec() const { return cfg.task != Task::kClassification; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    check_input(x);
    Tensor<T> h = relu(stem_bn(stem(x), mode));
    if (is_encdec()) {
      const std::int64_t S = cfg.stages();
      std::vector<Tensor<T>> e(static_cast<std::size_t>(S));
      for (std::int64_t s = 0; s < S; ++s) {
        h = stage_forward(s, h, mode);
        e[static_cast<std::size_t>(s)] = h;
      }
      Tensor<T> d = e[static_cast<std::size_t>(S - 1)];
      for (std::int64_t i = S - 2; i >= 0; --i)
        d = dec[static_cast<std::size_t>(i)](d, e[static_cast<std::size_t>(i)], mode);
      return head(d);
    }
    if (cls_mamba) h = add(h, cls_mamba_layer(h));
    for (std::int64_t s = 1; s < cfg.stages(); ++s) h = stage_forward(s, h, mode);
    return cls_head(global_avg_pool3d(h));
  }

  std::vector<MambaPlacement> mamba_placements() const {
    std::vector<MambaPlacement> out;
    if (is_encdec()) {
      for (std::size_t s = 0; s < stage_kind.size(); ++s)
        if (stage_kind[s] == 1)
          out.push_back({static_cast<std::int64_t>(s), cfg.stage_channels[s]});
    } else if (cls_mamba) {
      out.push_back({0, cfg.stage_channels[0]});
    }
    return out;
  }

  std::int64_t parameter_count() {
    ParamRefs<T> ps;
    collect(ps);
    std::int64_t n = 0;
    for (const Param<T>* p : ps) n += p->value.numel();
    return n;
  }

  std::vector<std::string> describe() {
    std::vector<std::string> out;
    out.push_back(std::string("task: ") + task_name(cfg.task));
    const std::int64_t c0 = cfg.stage_channels[0];
    out.push_back("stem: conv3 " + std::to_string(cfg.in_channels) + "->" + std::to_string(c0) +
                  (cfg.task == Task::kClassification ? " /2 + bn + relu" : " + bn + relu"));
    if (!is_encdec() && cls_mamba)
      out.push_back("mamba: channels " + std::to_string(c0) + ", N=" +
                    std::to_string(cfg.state_size) + ", residual bypass");
    for (std::int64_t s = is_encdec() ? 0 : 1; s < cfg.stages(); ++s) {
      const std::int64_t ci = cfg.stage_channels[static_cast<std::size_t>(s)];
      const std::int64_t cp = s == 0 ? c0 : cfg.stage_channels[static_cast<std::size_t>(s - 1)];
      std::string line = "enc" + std::to_string(s) + ": res " + std::to_string(cp) + "->" +
                         std::to_string(ci) + (s == 0 ? " /1" : " /2");
      if (is_encdec() && stage_kind[static_cast<std::size_t>(s)] == 1)
        line += " + mamba(N=" + std::to_string(cfg.state_size) + ")";
      out.push_back(line);
    }
    if (is_encdec()) {
      for (std::int64_t i = cfg.stages() - 2; i >= 0; --i) {
        const std::size_t si = static_cast<std::size_t>(i);
        out.push_back("dec" + std::to_string(i) + ": up2 + conv " +
                      std::to_string(cfg.stage_channels[si + 1]) + "+" +
                      std::to_string(cfg.stage_channels[si]) + "->" +
                      std::to_string(cfg.stage_channels[si]));
      }
      const std::int64_t k = cfg.task == Task::kLandmark ? cfg.num_landmarks : cfg.num_classes;
      out.push_back("head: conv1 " + std::to_string(c0) + "->" + std::to_string(k));
    } else {
      out.push_back("head: gap + linear " + std::to_string(cfg.stage_channels.back()) + "->" +
                    std::to_string(cfg.num_classes));
    }
    out.push_back("parameters: " + std::to_string(parameter_count()));
    return out;
  }

  void bind(Tape<T>* t) {
    stem.bind(t);
    stem_bn.bind(t);
    for (auto& b : enc_plain) b.bind(t);
    for (auto& b : enc_mamba) b.bind(t);
    for (auto& d : dec) d.bind(t);
    if (is_encdec()) head.bind(t);
    if (cls_mamba) cls_mamba_layer.bind(t);
    if (!is_encdec()) cls_head.bind(t);
  }

  void collect(ParamRefs<T>& out) {
    stem.collect(out);
    stem_bn.collect(out);
    // walk stages in network order so parameter order is reproducible
    for (std::size_t s = 0; s < stage_kind.size(); ++s) {
      if (stage_index[s] < 0) continue;  // classification has no stage-0 block
      if (stage_kind[s] == 1)
        enc_mamba[static_cast<std::size_t>(stage_index[s])].collect(out);
      else
        enc_plain[static_cast<std::size_t>(stage_index[s])].collect(out);
    }
    if (cls_mamba) cls_mamba_layer.collect(out);
    for (auto& d : dec) d.collect(out);
    if (is_encdec()) head.collect(out);
    if (!is_encdec()) cls_head.collect(out);
  }

  void buffers(BufferRefs<T>& out) {
    stem_bn.buffers(out);
    for (std::size_t s = 0; s < stage_kind.size(); ++s) {
      if (stage_index[s] < 0) continue;  // classification has no stage-0 block
      if (stage_kind[s] == 1)
        enc_mamba[static_cast<std::size_t>(stage_index[s])].buffers(out);
      else
        enc_plain[static_cast<std::size_t>(stage_index[s])].buffers(out);
    }
    for (auto& d : dec) d.buffers(out);
  }

 private:
  Tensor<T> stage_forward(std::int64_t s, const Tensor<T>& x, Mode mode) {
    const std::size_t si = static_cast<std::size_t>(s);
    if (stage_kind[si] == 1) return enc_mamba[static_cast<std::size_t>(stage_index[si])](x, mode);
    return enc_plain[static_cast<std::size_t>(stage_index[si])](x, mode);
  }

  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 5)
      throw ShapeError("model: input must be [B,C,D,H,W], got " + shape_str(x.shape()));
    if (x.shape()[1] != cfg.in_channels)
      throw ShapeError("model: expected " + std::to_string(cfg.in_channels) + " input channels, got " +
                       std::to_string(x.shape()[1]));
    const std::int64_t f = cfg.downsample_factor();
    for (int i = 2; i < 5; ++i)
      if (x.shape()[i] % f != 0 || x.shape()[i] / f < 1)
        throw ShapeError("model: spatial extent " + std::to_string(x.shape()[i]) +
                         " not divisible by the downsampling factor " + std::to_string(f));
  }
};

/// Builds the network for cfg.task. The same seed gives identical parameter
/// streams layer by layer; models differing only in Mamba placement share the
/// construction path.
template <typename T>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model<T> m;
  m.cfg = cfg;
  Rng rng = Rng::derive(seed, 17);
  const std::int64_t S = cfg.stages();
  const std::int64_t c0 = cfg.stage_channels[0];
  const bool encdec = cfg.task != Task::kClassification;
  const std::int64_t stem_stride = encdec ? 1 : 2;
  m.stem = Conv3dLayer<T>::make("stem", cfg.in_channels, c0, 3, stem_stride, 1, rng);
  m.stem_bn = BatchNorm3dLayer<T>::make("stem_bn", c0);

  m.stage_kind.assign(static_cast<std::size_t>(S), 0);
  m.stage_index.assign(static_cast<std::size_t>(S), -1);
  if (!encdec) {
    m.cls_mamba = cfg.use_mamba;
    if (m.cls_mamba) {
      MambaLayerConfig mc;
      mc.channels = c0;
      mc.state_size = cfg.state_size;
      mc.bidirectional = cfg.bidirectional;
      m.cls_mamba_layer = MambaLayer<T>::make("mamba0", mc, rng);
    }
  }
  for (std::int64_t s = encdec ? 0 : 1; s < S; ++s) {
    const std::size_t si = static_cast<std::size_t>(s);
    const std::int64_t in = s == 0 ? c0 : cfg.stage_channels[si - 1];
    const std::int64_t out = cfg.stage_channels[si];
    const std::int64_t stride = s == 0 ? 1 : 2;
    const bool with_mamba =
        encdec && cfg.use_mamba && (cfg.task == Task::kSegmentation || s == 0);
    const std::string name = "enc" + std::to_string(s);
    if (with_mamba) {
      m.stage_kind[si] = 1;
      m.stage_index[si] = static_cast<std::int32_t>(m.enc_mamba.size());
      m.enc_mamba.push_back(ResMambaBlock<T>::make(name, in, out, stride, cfg.state_size,
                                                   cfg.bidirectional, rng));
    } else {
      m.stage_kind[si] = 0;
      m.stage_index[si] = static_cast<std::int32_t>(m.enc_plain.size());
      m.enc_plain.push_back(ResBlock<T>::make(name, in, out, stride, rng));
    }
  }
  if (encdec) {
    m.dec.reserve(static_cast<std::size_t>(S - 1));
    for (std::int64_t i = 0; i + 1 < S; ++i) {
      const std::size_t si = static_cast<std::size_t>(i);
      m.dec.push_back(DecoderBlock<T>::make("dec" + std::to_string(i), cfg.stage_channels[si + 1],
                                            cfg.stage_channels[si], cfg.stage_channels[si], rng));
    }
    const std::int64_t k = cfg.task == Task::kLandmark ? cfg.num_landmarks : cfg.num_classes;
    m.head = Conv3dLayer<T>::make("head", c0, k, 1, 1, 0, rng, true);
  } else {
    m.cls_head = Linear<T>::make("cls_head", cfg.stage_channels.back(), cfg.num_classes, rng);
  }
  return m;
}

template <typename T>
Model<T> build_seg_model(ModelConfig cfg, std::uint64_t seed) {
  cfg.task = Task::kSegmentation;
  return build_model<T>(cfg, seed);
}

template <typename T>
Model<T> build_landmark_model(ModelConfig cfg, std::uint64_t seed) {
  cfg.task = Task::kLandmark;
  return build_model<T>(cfg, seed);
}

template <typename T>
Model<T> build_cls_model(ModelConfig cfg, std::uint64_t seed) {
  cfg.task = Task::kClassification;
  return build_model<T>(cfg, seed);
}

}  // namespace nnm
