#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "nnm/common.hpp"
#include "nnm/data.hpp"
#include "nnm/losses.hpp"
#include "nnm/metrics.hpp"
#include "nnm/model.hpp"
#include "nnm/optim.hpp"
#include "nnm/parallel.hpp"
#include "nnm/tape.hpp"

namespace nnm {

struct TrainConfig {
  double lr = 2e-3;
  double weight_decay = 1e-3;
  std::int64_t batch_size = 2;
  std::int64_t epochs = 100;
  std::uint64_t seed = 0;
  bool deterministic = false;
  double heatmap_sigma = 2.0;
};

struct TrainResult {
  std::vector<double> step_loss;    // one entry per optimizer step
  std::vector<double> val_primary;  // primary validation metric per epoch
  MetricReport final_val;
  double final_loss = 0.0;
  std::int64_t steps = 0;
};

/// Primary headline metric name for a task (higher-better except mre).
inline const char* primary_metric(Task task) {
  switch (task) {
    case Task::kSegmentation: return "dice";
    case Task::kClassification: return "auc";
    case Task::kLandmark: return "mre";
  }
  return "";
}

namespace detail {

inline std::string fmt_g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

/// [B,K,D,H,W] heatmap targets for a batch of landmark samples.
inline Tensor<float> batch_heatmaps(const std::vector<VolumeSample>& samples,
                                    const std::vector<std::int64_t>& idx, double sigma) {
  if (idx.empty()) throw ConfigError("batch_heatmaps: empty batch");
  const VolumeSample& first = samples.at(static_cast<std::size_t>(idx[0]));
  const std::int64_t D = first.image.extent(1), H = first.image.extent(2),
                     W = first.image.extent(3);
  const std::int64_t K = static_cast<std::int64_t>(first.landmarks.size());
  Tensor<float> out({static_cast<std::int64_t>(idx.size()), K, D, H, W});
  const std::int64_t per = K * D * H * W;
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const VolumeSample& s = samples.at(static_cast<std::size_t>(idx[b]));
    if (static_cast<std::int64_t>(s.landmarks.size()) != K)
      throw ShapeError("batch_heatmaps: landmark count mismatch");
    Tensor<float> hm = make_heatmap_target<float>(s.landmarks, D, H, W, sigma,
                                                  static_cast<double>(s.spacing[0]));
    std::copy(hm.data(), hm.data() + per, out.data() + static_cast<std::int64_t>(b) * per);
  }
  return out;
}

/// Channel-argmax of logits[b] -> [D,H,W] class-id floats (ties: lowest id).
inline Tensor<float> argmax_channel(const Tensor<float>& logits, std::int64_t b) {
  const std::int64_t K = logits.extent(1), D = logits.extent(2), H = logits.extent(3),
                     W = logits.extent(4);
  const std::int64_t vox = D * H * W;
  Tensor<float> out({D, H, W});
  const float* base = logits.data() + b * K * vox;
  float* op = out.data();
  for (std::int64_t v = 0; v < vox; ++v) {
    std::int64_t best = 0;
    float bv = base[v];
    for (std::int64_t k = 1; k < K; ++k) {
      const float x = base[k * vox + v];
      if (x > bv) {
        bv = x;
        best = k;
      }
    }
    op[v] = static_cast<float>(best);
  }
  return out;
}

inline Tensor<float> equals_class(const Tensor<float>& ids, float cls) {
  Tensor<float> out(ids.shape());
  const float* p = ids.data();
  float* o = out.data();
  for (std::int64_t i = 0; i < ids.numel(); ++i) o[i] = p[i] == cls ? 1.0f : 0.0f;
  return out;
}

inline Tensor<float> nonzero_mask(const Tensor<float>& ids) {
  Tensor<float> out(ids.shape());
  const float* p = ids.data();
  float* o = out.data();
  for (std::int64_t i = 0; i < ids.numel(); ++i) o[i] = p[i] != 0.0f ? 1.0f : 0.0f;
  return out;
}

/// Stable softmax probability of class 1 from a two-logit row.
inline double binary_score(float l0, float l1) {
  const double m = std::max(l0, l1);
  const double e0 = std::exp(static_cast<double>(l0) - m);
  const double e1 = std::exp(static_cast<double>(l1) - m);
  return e1 / (e0 + e1);
}

inline std::vector<std::vector<std::int64_t>> make_batches(const std::vector<std::int64_t>& order,
                                                           std::int64_t batch_size) {
  std::vector<std::vector<std::int64_t>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
    const std::size_t j = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(j));
  }
  return out;
}

}  // namespace detail

/// Runs the model over `samples` in eval mode and aggregates task metrics.
/// Segmentation: "dice" = foreground-class mean Dice, per-class values,
/// "hd95" averaged over samples where it is defined. Classification: the
/// confusion-matrix family plus AUC on softmax scores. Landmark: mean and
/// per-landmark radial error in mm.
inline MetricReport evaluate(Model<float>& model, const std::vector<VolumeSample>& samples,
                             std::int64_t batch_size = 2) {
  if (samples.empty()) throw ConfigError("evaluate: empty dataset");
  if (batch_size < 1) throw ConfigError("evaluate: batch_size must be positive");
  model.bind(nullptr);
  std::vector<std::int64_t> order(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) order[i] = static_cast<std::int64_t>(i);
  const auto batches = detail::make_batches(order, batch_size);

  MetricReport rep;
  const Task task = model.cfg.task;
  if (task == Task::kClassification) {
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& idx : batches) {
      Tensor<float> logits = model.forward(batch_images(samples, idx), Mode::kEval);
      for (std::size_t b = 0; b < idx.size(); ++b) {
        const float* row = logits.data() + static_cast<std::int64_t>(b) * logits.extent(1);
        scores.push_back(detail::binary_score(row[0], row[1]));
        labels.push_back(static_cast<int>(samples[static_cast<std::size_t>(idx[b])].label));
      }
    }
    try {
      rep = cls_metrics(scores, labels);
    } catch (const MetricError&) {
      // single-class set: AUC is undefined, report plain accuracy only
      std::int64_t correct = 0;
      for (std::size_t i = 0; i < scores.size(); ++i)
        correct += (scores[i] >= 0.5 ? 1 : 0) == labels[i] ? 1 : 0;
      rep.set("accuracy", static_cast<double>(correct) / static_cast<double>(scores.size()));
      rep.set("auc_undefined", 1.0);
    }
    return rep;
  }

  if (task == Task::kSegmentation) {
    const std::int64_t K = model.cfg.num_classes;
    std::vector<double> class_sum(static_cast<std::size_t>(K), 0.0);
    double hd_sum = 0.0;
    std::int64_t n_done = 0, hd_defined = 0;
    for (const auto& idx : batches) {
      Tensor<float> logits = model.forward(batch_images(samples, idx), Mode::kEval);
      for (std::size_t b = 0; b < idx.size(); ++b) {
        const VolumeSample& s = samples[static_cast<std::size_t>(idx[b])];
        Tensor<float> pred = detail::argmax_channel(logits, static_cast<std::int64_t>(b));
        for (std::int64_t k = 1; k < K; ++k)
          class_sum[static_cast<std::size_t>(k)] +=
              dice(detail::equals_class(pred, static_cast<float>(k)),
                   detail::equals_class(s.mask, static_cast<float>(k)));
        try {
          hd_sum += hd95(detail::nonzero_mask(pred), detail::nonzero_mask(s.mask),
                         static_cast<double>(s.spacing[0]));
          hd_defined += 1;
        } catch (const MetricError&) {
          // empty prediction or mask: boundary distance undefined for this sample
        }
        n_done += 1;
      }
    }
    double fg = 0.0;
    for (std::int64_t k = 1; k < K; ++k) {
      const double mean_k = class_sum[static_cast<std::size_t>(k)] / static_cast<double>(n_done);
      rep.set("dice_c" + std::to_string(k), mean_k);
      fg += mean_k;
    }
    rep.set("dice", fg / static_cast<double>(K - 1));
    if (hd_defined > 0) rep.set("hd95", hd_sum / static_cast<double>(hd_defined));
    rep.set("hd95_undefined", static_cast<double>(n_done - hd_defined));
    // keep "dice" first in serialized order
    return rep;
  }

  // landmark
  const std::int64_t K = model.cfg.num_landmarks;
  std::vector<double> lm_sum(static_cast<std::size_t>(K), 0.0);
  double total = 0.0;
  std::int64_t n_done = 0;
  for (const auto& idx : batches) {
    Tensor<float> logits = model.forward(batch_images(samples, idx), Mode::kEval);
    const std::int64_t per = K * logits.extent(2) * logits.extent(3) * logits.extent(4);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const VolumeSample& s = samples[static_cast<std::size_t>(idx[b])];
      Tensor<float> hm({K, logits.extent(2), logits.extent(3), logits.extent(4)});
      std::copy(logits.data() + static_cast<std::int64_t>(b) * per,
                logits.data() + static_cast<std::int64_t>(b + 1) * per, hm.data());
      const MreResult r = mre(hm, s.landmarks, static_cast<double>(s.spacing[0]));
      for (std::int64_t k = 0; k < K; ++k)
        lm_sum[static_cast<std::size_t>(k)] += r.per_landmark[static_cast<std::size_t>(k)];
      total += r.mean;
      n_done += 1;
    }
  }
  rep.set("mre", total / static_cast<double>(n_done));
  for (std::int64_t k = 0; k < K; ++k)
    rep.set("mre_l" + std::to_string(k), lm_sum[static_cast<std::size_t>(k)] / n_done);
  return rep;
}

namespace detail {

inline std::vector<std::string> val_columns(Task task) {
  switch (task) {
    case Task::kSegmentation: return {"dice", "hd95"};
    case Task::kClassification: return {"auc", "accuracy"};
    case Task::kLandmark: return {"mre"};
  }
  return {};
}

}  // namespace detail

/// Adam training loop. One CSV row per optimizer step goes to `log` when
/// given: epoch,step,loss and — on each epoch's last step — the validation
/// metrics. All numbers print via %.9g so two identical runs emit identical
/// bytes.
inline TrainResult train(Model<float>& model, const std::vector<VolumeSample>& train_set,
                         const std::vector<VolumeSample>& val_set, const TrainConfig& cfg,
                         std::ostream* log = nullptr) {
  if (train_set.empty()) throw ConfigError("train: empty training set");
  if (cfg.batch_size < 1 || cfg.epochs < 1)
    throw ConfigError("train: batch_size and epochs must be positive");
  if (cfg.deterministic) set_deterministic(true);

  ParamRefs<float> params;
  model.collect(params);
  AdamState<float> opt;
  opt.init(params);
  Tape<float> tape;

  const auto cols = detail::val_columns(model.cfg.task);
  if (log) {
    *log << "epoch,step,loss";
    for (const auto& c : cols) *log << ",val_" << c;
    *log << "\n";
  }

  TrainResult res;
  const std::int64_t n = static_cast<std::int64_t>(train_set.size());
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng shuf = Rng::derive(cfg.seed, UINT64_C(0x65706f6368) + static_cast<std::uint64_t>(epoch));
    for (std::int64_t i = n - 1; i > 0; --i) {
      const std::int64_t j = static_cast<std::int64_t>(shuf.below(static_cast<std::uint64_t>(i + 1)));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    const auto batches = detail::make_batches(order, cfg.batch_size);

    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& idx = batches[bi];
      tape.clear();
      model.bind(&tape);
      Tensor<float> x = batch_images(train_set, idx);
      Tensor<float> out = model.forward(x, Mode::kTrain);
      Tensor<float> loss;
      switch (model.cfg.task) {
        case Task::kSegmentation:
          loss = dice_ce_loss(out, batch_masks(train_set, idx));
          break;
        case Task::kClassification:
          loss = ce_cls_loss(out, batch_labels(train_set, idx));
          break;
        case Task::kLandmark:
          loss = heatmap_mse_loss(out, detail::batch_heatmaps(train_set, idx, cfg.heatmap_sigma));
          break;
      }
      tape.backward(loss);
      adam_step(params, tape, opt, static_cast<float>(cfg.lr),
                static_cast<float>(cfg.weight_decay));
      const double lval = static_cast<double>(loss.data()[0]);
      res.step_loss.push_back(lval);
      res.steps += 1;
      res.final_loss = lval;

      const bool last_in_epoch = bi + 1 == batches.size();
      std::string row = std::to_string(epoch) + "," + std::to_string(static_cast<std::int64_t>(bi)) +
                        "," + detail::fmt_g9(lval);
      if (last_in_epoch && !val_set.empty()) {
        MetricReport vr = evaluate(model, val_set, cfg.batch_size);
        for (const auto& c : cols)
          row += "," + (vr.has(c) ? detail::fmt_g9(vr.get(c)) : std::string("nan"));
        res.val_primary.push_back(vr.has(primary_metric(model.cfg.task))
                                      ? vr.get(primary_metric(model.cfg.task))
                                      : std::nan(""));
        res.final_val = vr;
      } else if (log) {
        for (std::size_t c = 0; c < cols.size(); ++c) row += ",";
      }
      if (log) *log << row << "\n";
    }
  }
  model.bind(nullptr);
  return res;
}

}  // namespace nnm
