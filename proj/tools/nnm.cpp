// nnm -- synthetic-volume training, evaluation, and verification toolkit.
//
// Subcommands: gen-data, train, eval, gradcheck, scan-bench, ablate.
// Option precedence: command-line flags > --config JSON file > built-in
// defaults. Exit codes: 0 success, 1 runtime/numeric failure, 2 usage,
// 3 data-format error.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "nnm/checkpoint.hpp"
#include "nnm/data.hpp"
#include "nnm/gradsuite.hpp"
#include "nnm/metrics.hpp"
#include "nnm/model.hpp"
#include "nnm/parallel.hpp"
#include "nnm/ssm.hpp"
#include "nnm/train.hpp"
#include "nnm/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nnm;

namespace {

std::string iso_utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << content;
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

std::string fmt_g(double v, const char* spec = "%.6g") {
  char buf[48];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

// All run-affecting knobs for the data-generating / training subcommands.
// Field defaults are the built-in layer of the option precedence.
struct RunOpts {
  std::string task;
  std::string config_path;
  std::string out;
  std::string data_dir;
  std::uint64_t seed = 0;
  bool deterministic = false;
  bool no_mamba = false;
  bool bidirectional = false;
  std::int64_t epochs = 100;
  double lr = 2e-3;
  std::int64_t batch_size = 2;
  double weight_decay = 1e-3;
  std::int64_t n = 100;
  std::int64_t size = 32;
  double noise = 0.05;
  std::vector<double> ratios{0.7, 0.1, 0.2};
  std::vector<std::int64_t> stages{8, 16, 32};
  std::int64_t state_size = 8;
  double heatmap_sigma = 2.0;
};

void add_data_flags(CLI::App* sub, RunOpts& o) {
  sub->add_option("--task", o.task, "task: seg, cls, or landmark");
  sub->add_option("--config", o.config_path, "JSON config file (flags win over its keys)");
  sub->add_option("--seed", o.seed, "master seed for data, model init, and shuffling");
  sub->add_option("--n", o.n, "number of synthetic volumes");
  sub->add_option("--size", o.size, "cubic volume edge in voxels");
  sub->add_option("--noise", o.noise, "additive Gaussian noise sigma");
  sub->add_option("--ratios", o.ratios, "train/val/test fractions")->delimiter(',')->expected(3);
}

void add_model_flags(CLI::App* sub, RunOpts& o) {
  sub->add_option("--stages", o.stages, "encoder stage widths")->delimiter(',');
  sub->add_option("--state-size", o.state_size, "SSM state dimension N");
  sub->add_flag("--bidirectional", o.bidirectional, "scan the token sequence both ways");
  sub->add_flag("--no-mamba", o.no_mamba, "ablation: drop every Mamba layer");
}

void add_train_flags(CLI::App* sub, RunOpts& o) {
  sub->add_option("--epochs", o.epochs, "training epochs");
  sub->add_option("--lr", o.lr, "Adam learning rate");
  sub->add_option("--batch-size", o.batch_size, "mini-batch size");
  sub->add_option("--weight-decay", o.weight_decay, "decoupled weight decay");
  sub->add_option("--heatmap-sigma", o.heatmap_sigma, "landmark target Gaussian sigma (voxels)");
  sub->add_flag("--deterministic", o.deterministic, "single-threaded bit-reproducible kernels");
  sub->add_option("--data", o.data_dir, "evaluate/train on a gen-data directory");
}

// Applies config-file values underneath any explicitly passed flags.
void apply_config_file(CLI::App* sub, RunOpts& o) {
  if (o.config_path.empty()) return;
  std::ifstream is(o.config_path, std::ios::binary);
  if (!is) throw ConfigError("config: cannot open " + o.config_path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config: " + o.config_path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  auto flag_absent = [&](const char* name) {
    const CLI::Option* opt = sub->get_option_no_throw(name);
    return opt == nullptr || opt->count() == 0;
  };
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "task") {
        if (flag_absent("--task")) o.task = v.get<std::string>();
      } else if (k == "seed") {
        if (flag_absent("--seed")) o.seed = v.get<std::uint64_t>();
      } else if (k == "epochs") {
        if (flag_absent("--epochs")) o.epochs = v.get<std::int64_t>();
      } else if (k == "lr") {
        if (flag_absent("--lr")) o.lr = v.get<double>();
      } else if (k == "batch_size") {
        if (flag_absent("--batch-size")) o.batch_size = v.get<std::int64_t>();
      } else if (k == "weight_decay") {
        if (flag_absent("--weight-decay")) o.weight_decay = v.get<double>();
      } else if (k == "n") {
        if (flag_absent("--n")) o.n = v.get<std::int64_t>();
      } else if (k == "size") {
        if (flag_absent("--size")) o.size = v.get<std::int64_t>();
      } else if (k == "noise") {
        if (flag_absent("--noise")) o.noise = v.get<double>();
      } else if (k == "ratios") {
        if (flag_absent("--ratios")) o.ratios = v.get<std::vector<double>>();
      } else if (k == "stages") {
        if (flag_absent("--stages")) o.stages = v.get<std::vector<std::int64_t>>();
      } else if (k == "state_size") {
        if (flag_absent("--state-size")) o.state_size = v.get<std::int64_t>();
      } else if (k == "bidirectional") {
        if (flag_absent("--bidirectional")) o.bidirectional = v.get<bool>();
      } else if (k == "deterministic") {
        if (flag_absent("--deterministic")) o.deterministic = v.get<bool>();
      } else if (k == "no_mamba") {
        if (flag_absent("--no-mamba")) o.no_mamba = v.get<bool>();
      } else if (k == "heatmap_sigma") {
        if (flag_absent("--heatmap-sigma")) o.heatmap_sigma = v.get<double>();
      } else if (k == "data") {
        if (flag_absent("--data")) o.data_dir = v.get<std::string>();
      } else {
        throw ConfigError("config: unknown key '" + k + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError("config: " + o.config_path + ": " + e.what());
  }
}

std::array<double, 3> ratios_array(const std::vector<double>& r) {
  if (r.size() != 3) throw ConfigError("ratios: want exactly 3 fractions");
  return {r[0], r[1], r[2]};
}

DatasetSpec dataset_spec_from(Task task, const RunOpts& o) {
  DatasetSpec ds;
  ds.task = task;
  ds.n_samples = o.n;
  ds.size = o.size;
  ds.noise_sigma = o.noise;
  ds.ratios = ratios_array(o.ratios);
  ds.seed = o.seed;
  return ds;
}

ModelConfig model_cfg_from(Task task, const RunOpts& o) {
  ModelConfig mc;
  mc.task = task;
  mc.in_channels = 1;
  mc.stage_channels = o.stages;
  mc.state_size = o.state_size;
  mc.num_classes = task == Task::kSegmentation ? kSegClasses : 2;
  mc.num_landmarks = kNumLandmarks;
  mc.input_spatial = {o.size, o.size, o.size};
  mc.use_mamba = !o.no_mamba;
  mc.bidirectional = o.bidirectional;
  return mc;
}

struct DataBundle {
  DatasetSpec spec;
  std::vector<VolumeSample> train, val, test;
};

DataBundle make_bundle(const DatasetSpec& spec) {
  DataBundle b;
  b.spec = spec;
  std::vector<VolumeSample> all = gen_dataset(spec);
  SplitIndices idx = split_indices(spec.n_samples, spec.ratios, spec.seed);
  auto gather = [&](const std::vector<std::int64_t>& which) {
    std::vector<VolumeSample> out;
    out.reserve(which.size());
    for (std::int64_t i : which) out.push_back(all[static_cast<std::size_t>(i)]);
    return out;
  };
  b.train = gather(idx.train);
  b.val = gather(idx.val);
  b.test = gather(idx.test);
  return b;
}

json load_json_or_format_error(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  try {
    json j;
    is >> j;
    return j;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// Reads a gen-data directory back into train/val/test vectors using the
// split recorded in its manifest.
DataBundle load_data_dir(const fs::path& dir, Task expect_task) {
  const json m = load_json_or_format_error(dir / "manifest.json");
  try {
    if (m.at("command").get<std::string>() != "gen-data")
      throw FormatError(dir.string() + ": manifest is not a gen-data manifest");
    DataBundle b;
    b.spec.task = task_from_name(m.at("task").get<std::string>());
    if (b.spec.task != expect_task)
      throw FormatError(dir.string() + ": dataset task is " + m.at("task").get<std::string>());
    b.spec.n_samples = m.at("n").get<std::int64_t>();
    b.spec.size = m.at("size").get<std::int64_t>();
    b.spec.noise_sigma = m.at("noise").get<double>();
    const auto rr = m.at("ratios").get<std::vector<double>>();
    b.spec.ratios = ratios_array(rr);
    b.spec.seed = m.at("seed").get<std::uint64_t>();
    const auto files = m.at("files").get<std::vector<std::string>>();
    std::vector<VolumeSample> all;
    all.reserve(files.size());
    for (const std::string& f : files) all.push_back(read_volume((dir / f).string()));
    auto gather = [&](const char* key) {
      std::vector<VolumeSample> out;
      for (std::int64_t i : m.at("split").at(key).get<std::vector<std::int64_t>>()) {
        if (i < 0 || i >= static_cast<std::int64_t>(all.size()))
          throw FormatError(dir.string() + ": split index out of range");
        out.push_back(all[static_cast<std::size_t>(i)]);
      }
      return out;
    };
    b.train = gather("train");
    b.val = gather("val");
    b.test = gather("test");
    return b;
  } catch (const json::exception& e) {
    throw FormatError(dir.string() + "/manifest.json: " + e.what());
  }
}

DataBundle resolve_bundle(Task task, const RunOpts& o) {
  if (!o.data_dir.empty()) return load_data_dir(o.data_dir, task);
  return make_bundle(dataset_spec_from(task, o));
}

json metrics_json(const MetricReport& r) { return json::parse(r.to_json()); }

json resolved_config_json(Task task, const RunOpts& o) {
  return json{{"task", task_name(task)},
              {"seed", o.seed},
              {"epochs", o.epochs},
              {"lr", o.lr},
              {"batch_size", o.batch_size},
              {"weight_decay", o.weight_decay},
              {"n", o.n},
              {"size", o.size},
              {"noise", o.noise},
              {"ratios", o.ratios},
              {"stages", o.stages},
              {"state_size", o.state_size},
              {"bidirectional", o.bidirectional},
              {"deterministic", o.deterministic},
              {"no_mamba", o.no_mamba},
              {"heatmap_sigma", o.heatmap_sigma},
              {"data", o.data_dir}};
}

// Step-loss polyline (left axis) plus the per-epoch validation metric on its
// own right-hand scale. Pure text SVG, deterministic formatting.
std::string loss_curve_svg(const std::vector<double>& loss, const std::vector<double>& val,
                           const std::string& val_name) {
  const double W = 720, H = 400, L = 64, R = 64, T = 24, B = 40;
  const double pw = W - L - R, ph = H - T - B;
  auto span = [](const std::vector<double>& v) {
    double lo = v[0], hi = v[0];
    for (double x : v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
    if (hi - lo < 1e-12) hi = lo + 1.0;
    return std::pair<double, double>(lo, hi);
  };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" viewBox=\"0 0 " << W << " " << H << "\">\n"
     << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"#ffffff\"/>\n";
  if (!loss.empty()) {
    auto [lo, hi] = span(loss);
    const double n = static_cast<double>(loss.size());
    auto px = [&](double i) { return L + (n > 1 ? i / (n - 1) : 0.5) * pw; };
    auto py = [&](double v) { return T + (1.0 - (v - lo) / (hi - lo)) * ph; };
    for (int g = 0; g <= 4; ++g) {
      const double gv = lo + (hi - lo) * g / 4.0, gy = py(gv);
      os << "<line x1=\"" << L << "\" y1=\"" << fmt_g(gy, "%.1f") << "\" x2=\"" << W - R
         << "\" y2=\"" << fmt_g(gy, "%.1f") << "\" stroke=\"#dddddd\"/>\n"
         << "<text x=\"" << L - 6 << "\" y=\"" << fmt_g(gy + 4, "%.1f")
         << "\" text-anchor=\"end\" font-size=\"11\" fill=\"#444444\">" << fmt_g(gv, "%.4g")
         << "</text>\n";
    }
    os << "<polyline fill=\"none\" stroke=\"#2266cc\" stroke-width=\"1.2\" points=\"";
    for (std::size_t i = 0; i < loss.size(); ++i)
      os << fmt_g(px(static_cast<double>(i)), "%.1f") << ","
         << fmt_g(py(loss[i]), "%.1f") << (i + 1 < loss.size() ? " " : "");
    os << "\"/>\n"
       << "<text x=\"" << L << "\" y=\"16\" font-size=\"12\" fill=\"#2266cc\">training loss ("
       << loss.size() << " steps)</text>\n";
    if (!val.empty()) {
      auto [vlo, vhi] = span(val);
      const double spe = n / static_cast<double>(val.size());
      auto vy = [&](double v) { return T + (1.0 - (v - vlo) / (vhi - vlo)) * ph; };
      os << "<polyline fill=\"none\" stroke=\"#cc6622\" stroke-width=\"1.5\" points=\"";
      for (std::size_t e = 0; e < val.size(); ++e)
        os << fmt_g(px(spe * static_cast<double>(e + 1) - 1.0), "%.1f") << ","
           << fmt_g(vy(val[e]), "%.1f") << (e + 1 < val.size() ? " " : "");
      os << "\"/>\n"
         << "<text x=\"" << W - R << "\" y=\"16\" text-anchor=\"end\" font-size=\"12\" "
            "fill=\"#cc6622\">val "
         << val_name << " " << fmt_g(vlo, "%.4g") << ".." << fmt_g(vhi, "%.4g") << "</text>\n";
    }
  }
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
     << "\" stroke=\"#000000\"/>\n"
     << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"#000000\"/>\n</svg>\n";
  return os.str();
}

struct RunArtifacts {
  TrainResult result;
  MetricReport test;
  std::int64_t parameters = 0;
};

// One full training run with every artifact the manifest promises. The
// manifest lands on disk before the first optimizer step.
RunArtifacts run_training(const RunOpts& o, Task task, bool use_mamba, const DataBundle& data,
                          const fs::path& out_dir) {
  fs::create_directories(out_dir);
  ModelConfig mc = model_cfg_from(task, o);
  mc.use_mamba = use_mamba;
  mc.validate();

  json manifest{{"command", "train"},
                {"version", version()},
                {"started", iso_utc_now()},
                {"finished", nullptr},
                {"task", task_name(task)},
                {"seed", o.seed},
                {"config", resolved_config_json(task, o)},
                {"outputs",
                 {{"manifest", "manifest.json"},
                  {"log", "train.csv"},
                  {"curve", "loss_curve.svg"},
                  {"checkpoint", "model.nmb"},
                  {"model_config", "model.json"},
                  {"metrics", "final_metrics.json"}}}};
  manifest["config"]["no_mamba"] = !use_mamba;
  write_text_file(out_dir / "manifest.json", manifest.dump(2) + "\n");

  Model<float> model = build_model<float>(mc, o.seed);
  RunArtifacts art;
  art.parameters = model.parameter_count();
  std::cout << task_name(task) << ": " << data.train.size() << "/" << data.val.size() << "/"
            << data.test.size() << " train/val/test, " << art.parameters << " parameters"
            << (use_mamba ? "" : " (no mamba)") << "\n";

  TrainConfig tc;
  tc.lr = o.lr;
  tc.weight_decay = o.weight_decay;
  tc.batch_size = o.batch_size;
  tc.epochs = o.epochs;
  tc.seed = o.seed;
  tc.deterministic = o.deterministic;
  tc.heatmap_sigma = o.heatmap_sigma;

  {
    std::ofstream log(out_dir / "train.csv", std::ios::binary);
    if (!log) throw std::runtime_error("cannot open " + (out_dir / "train.csv").string());
    art.result = train(model, data.train, data.val, tc, &log);
  }

  save_model((out_dir / "model.nmb").string(), model);
  json mj{{"task", task_name(task)},
          {"seed", o.seed},
          {"version", version()},
          {"model",
           {{"in_channels", mc.in_channels},
            {"stage_channels", mc.stage_channels},
            {"state_size", mc.state_size},
            {"num_classes", mc.num_classes},
            {"num_landmarks", mc.num_landmarks},
            {"input_spatial", mc.input_spatial},
            {"use_mamba", mc.use_mamba},
            {"bidirectional", mc.bidirectional}}},
          {"dataset",
           {{"n", data.spec.n_samples},
            {"size", data.spec.size},
            {"noise", data.spec.noise_sigma},
            {"ratios", data.spec.ratios},
            {"seed", data.spec.seed}}}};
  write_text_file(out_dir / "model.json", mj.dump(2) + "\n");

  art.test = evaluate(model, data.test, o.batch_size);
  json fm{{"final_loss", art.result.final_loss},
          {"steps", art.result.steps},
          {"val", metrics_json(art.result.final_val)},
          {"test", metrics_json(art.test)}};
  write_text_file(out_dir / "final_metrics.json", fm.dump(2) + "\n");
  write_text_file(out_dir / "loss_curve.svg",
                  loss_curve_svg(art.result.step_loss, art.result.val_primary,
                                 primary_metric(task)));

  manifest["finished"] = iso_utc_now();
  write_text_file(out_dir / "manifest.json", manifest.dump(2) + "\n");

  const char* pm = primary_metric(task);
  std::cout << "steps " << art.result.steps << ", final loss " << fmt_g(art.result.final_loss)
            << ", val " << pm << " "
            << (art.result.final_val.has(pm) ? fmt_g(art.result.final_val.get(pm)) : "n/a")
            << ", test " << pm << " " << (art.test.has(pm) ? fmt_g(art.test.get(pm)) : "n/a")
            << "\n";
  return art;
}

int cmd_gen_data(const RunOpts& o) {
  if (o.task.empty()) throw ConfigError("gen-data: --task is required");
  const Task task = task_from_name(o.task);
  const DatasetSpec ds = dataset_spec_from(task, o);
  const fs::path dir(o.out);
  fs::create_directories(dir);
  std::vector<VolumeSample> all = gen_dataset(ds);
  SplitIndices idx = split_indices(ds.n_samples, ds.ratios, ds.seed);
  std::vector<std::string> files;
  files.reserve(all.size());
  for (std::size_t i = 0; i < all.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%04zu.nmv", i);
    write_volume((dir / name).string(), all[i]);
    files.emplace_back(name);
  }
  json m{{"command", "gen-data"}, {"version", version()},
         {"task", task_name(task)}, {"n", ds.n_samples},
         {"size", ds.size},        {"noise", ds.noise_sigma},
         {"ratios", ds.ratios},    {"seed", ds.seed},
         {"files", files},         {"written", iso_utc_now()},
         {"split", {{"train", idx.train}, {"val", idx.val}, {"test", idx.test}}}};
  write_text_file(dir / "manifest.json", m.dump(2) + "\n");
  std::cout << "wrote " << all.size() << " volumes (" << idx.train.size() << "/"
            << idx.val.size() << "/" << idx.test.size() << " train/val/test) to " << dir.string()
            << "\n";
  return 0;
}

int cmd_train(const RunOpts& o) {
  if (o.task.empty()) throw ConfigError("train: --task is required");
  set_deterministic(o.deterministic);
  const Task task = task_from_name(o.task);
  const DataBundle data = resolve_bundle(task, o);
  run_training(o, task, !o.no_mamba, data, fs::path(o.out));
  return 0;
}

struct EvalOpts {
  RunOpts run;
  std::string run_dir;
  std::string split = "test";
  std::string out_path;
};

int cmd_eval(const EvalOpts& e) {
  set_deterministic(e.run.deterministic);
  if (e.split != "train" && e.split != "val" && e.split != "test")
    throw ConfigError("eval: --split must be train, val, or test");

  Task task;
  ModelConfig mc;
  DatasetSpec ds;
  std::uint64_t model_seed;
  bool trained = !e.run_dir.empty();
  if (trained) {
    const fs::path dir(e.run_dir);
    const json mj = load_json_or_format_error(dir / "model.json");
    try {
      task = task_from_name(mj.at("task").get<std::string>());
      model_seed = mj.at("seed").get<std::uint64_t>();
      const json& m = mj.at("model");
      mc.task = task;
      mc.in_channels = m.at("in_channels").get<std::int64_t>();
      mc.stage_channels = m.at("stage_channels").get<std::vector<std::int64_t>>();
      mc.state_size = m.at("state_size").get<std::int64_t>();
      mc.num_classes = m.at("num_classes").get<std::int64_t>();
      mc.num_landmarks = m.at("num_landmarks").get<std::int64_t>();
      const auto sp = m.at("input_spatial").get<std::vector<std::int64_t>>();
      if (sp.size() != 3) throw FormatError("model.json: input_spatial must have 3 extents");
      mc.input_spatial = {sp[0], sp[1], sp[2]};
      mc.use_mamba = m.at("use_mamba").get<bool>();
      mc.bidirectional = m.at("bidirectional").get<bool>();
      const json& d = mj.at("dataset");
      ds.task = task;
      ds.n_samples = d.at("n").get<std::int64_t>();
      ds.size = d.at("size").get<std::int64_t>();
      ds.noise_sigma = d.at("noise").get<double>();
      const auto rr = d.at("ratios").get<std::vector<double>>();
      ds.ratios = ratios_array(rr);
      ds.seed = d.at("seed").get<std::uint64_t>();
    } catch (const json::exception& ex) {
      throw FormatError((dir / "model.json").string() + ": " + ex.what());
    }
  } else {
    if (e.run.task.empty()) throw ConfigError("eval: pass --run DIR or --task");
    task = task_from_name(e.run.task);
    mc = model_cfg_from(task, e.run);
    ds = dataset_spec_from(task, e.run);
    model_seed = e.run.seed;
  }
  mc.validate();

  Model<float> model = build_model<float>(mc, model_seed);
  if (trained) load_model((fs::path(e.run_dir) / "model.nmb").string(), model);

  DataBundle data = e.run.data_dir.empty() ? make_bundle(ds)
                                           : load_data_dir(e.run.data_dir, task);
  const std::vector<VolumeSample>& samples =
      e.split == "train" ? data.train : (e.split == "val" ? data.val : data.test);
  if (samples.empty()) throw ConfigError("eval: split '" + e.split + "' is empty");

  MetricReport r = evaluate(model, samples, e.run.batch_size);
  json out{{"task", task_name(task)},
           {"split", e.split},
           {"n", samples.size()},
           {"trained", trained},
           {"metrics", metrics_json(r)}};
  std::cout << out.dump(2) << "\n";
  std::string path = e.out_path;
  if (path.empty() && trained) path = (fs::path(e.run_dir) / ("eval_" + e.split + ".json")).string();
  if (!path.empty()) write_text_file(path, out.dump(2) + "\n");
  return 0;
}

struct GradcheckOpts {
  std::int64_t seeds = 3;
  std::string filter;
};

int cmd_gradcheck(const GradcheckOpts& g) {
  if (g.seeds < 1) throw ConfigError("gradcheck: --seeds must be >= 1");
  int failures = 0, ran = 0;
  for (const GradSuiteCase& c : gradient_suite()) {
    if (!g.filter.empty() && c.name.find(g.filter) == std::string::npos) continue;
    ++ran;
    bool ok = true;
    std::string detail;
    for (std::int64_t s = 0; s < g.seeds && ok; ++s) {
      GradCheckResult<double> r = c.run(static_cast<std::uint64_t>(s));
      if (!r.ok) {
        ok = false;
        detail = "seed " + std::to_string(s) + ": " + r.describe();
      }
    }
    std::printf("%-28s %s\n", c.name.c_str(), ok ? "ok" : detail.c_str());
    failures += !ok;
  }
  if (ran == 0) throw ConfigError("gradcheck: no case matches filter '" + g.filter + "'");
  std::printf("gradcheck: %d cases x %lld seeds, %d failed\n", ran,
              static_cast<long long>(g.seeds), failures);
  if (failures) throw NumericError("gradcheck: " + std::to_string(failures) + " case(s) failed");
  return 0;
}

struct ScanBenchOpts {
  std::vector<std::int64_t> lengths{256, 1024, 4096, 16384, 65536};
  std::int64_t channels = 8;
  std::int64_t state = 16;
  std::uint64_t seed = 0;
  std::string out;
};

double max_scale_rel_diff(const TensorF& a, const TensorF& b) {
  double gmax = 0.0, diff = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double av = a.data()[i], bv = b.data()[i];
    gmax = std::max(gmax, std::max(std::abs(av), std::abs(bv)));
    diff = std::max(diff, std::abs(av - bv));
  }
  return diff / std::max(gmax, 1e-30);
}

int cmd_scan_bench(const ScanBenchOpts& s) {
  using clock = std::chrono::steady_clock;
  std::ostringstream csv;
  csv << "L,C,N,seq_tok_per_s,chunked_tok_per_s,speedup,rel_diff\n";
  std::printf("%8s %10s %14s %14s %9s %11s\n", "L", "C x N", "seq tok/s", "chunked tok/s",
              "speedup", "rel diff");
  for (std::int64_t L : s.lengths) {
    if (L < 1) throw ConfigError("scan-bench: lengths must be >= 1");
    Rng rng = Rng::derive(s.seed, static_cast<std::uint64_t>(L));
    TensorF u = TensorF::normal({1, L, s.channels}, rng);
    TensorF delta = TensorF::uniform({1, L, s.channels}, rng, 0.01f, 1.0f);
    TensorF A = TensorF::uniform({s.channels, s.state}, rng, -4.0f, -0.05f);
    TensorF Bt = TensorF::normal({1, L, s.state}, rng);
    TensorF Ct = TensorF::normal({1, L, s.state}, rng);
    TensorF D = TensorF::normal({s.channels}, rng);
    const std::int64_t reps = std::max<std::int64_t>(1, (1 << 20) / L);
    auto bench = [&](auto&& fn) {
      fn();  // warm up
      const auto t0 = clock::now();
      for (std::int64_t r = 0; r < reps; ++r) fn();
      const double sec = std::chrono::duration<double>(clock::now() - t0).count();
      return static_cast<double>(L * reps) / std::max(sec, 1e-12);
    };
    TensorF y_seq, y_chk;
    const double seq_tps = bench([&] { y_seq = scan_sequential(u, delta, A, Bt, Ct, D); });
    const double chk_tps = bench([&] { y_chk = selective_scan_core(u, delta, A, Bt, Ct, D); });
    const double rel = max_scale_rel_diff(y_seq, y_chk);
    std::printf("%8lld %6lldx%-3lld %14.3g %14.3g %8.2fx %11.2e\n", static_cast<long long>(L),
                static_cast<long long>(s.channels), static_cast<long long>(s.state), seq_tps,
                chk_tps, chk_tps / seq_tps, rel);
    csv << L << "," << s.channels << "," << s.state << "," << fmt_g(seq_tps) << ","
        << fmt_g(chk_tps) << "," << fmt_g(chk_tps / seq_tps) << "," << fmt_g(rel, "%.3e") << "\n";
    if (rel > 1e-5) throw NumericError("scan-bench: chunked/sequential diverged at L=" +
                                       std::to_string(L));
  }
  if (!s.out.empty()) {
    const fs::path p(s.out);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    write_text_file(p, csv.str());
    std::cout << "wrote " << p.string() << "\n";
  }
  return 0;
}

int cmd_ablate(const RunOpts& o_in) {
  RunOpts o = o_in;
  if (o.task.empty()) o.task = "cls";
  set_deterministic(o.deterministic);
  const Task task = task_from_name(o.task);
  const fs::path dir(o.out);
  fs::create_directories(dir);
  const DataBundle data = resolve_bundle(task, o);

  RunArtifacts with = run_training(o, task, true, data, dir / "with_mamba");
  RunArtifacts without = run_training(o, task, false, data, dir / "no_mamba");

  const char* pm = primary_metric(task);
  auto grab = [&](const MetricReport& r) { return r.has(pm) ? r.get(pm) : 0.0; };
  const double mw = grab(with.test), mo = grab(without.test);

  std::ostringstream csv;
  csv << "variant,parameters,steps,final_loss," << pm << "\n"
      << "with_mamba," << with.parameters << "," << with.result.steps << ","
      << fmt_g(with.result.final_loss, "%.9g") << "," << fmt_g(mw, "%.9g") << "\n"
      << "no_mamba," << without.parameters << "," << without.result.steps << ","
      << fmt_g(without.result.final_loss, "%.9g") << "," << fmt_g(mo, "%.9g") << "\n";
  write_text_file(dir / "ablate.csv", csv.str());
  json aj{{"task", task_name(task)},
          {"seed", o.seed},
          {"primary_metric", pm},
          {"with_mamba",
           {{"parameters", with.parameters},
            {"final_loss", with.result.final_loss},
            {"test", metrics_json(with.test)}}},
          {"no_mamba",
           {{"parameters", without.parameters},
            {"final_loss", without.result.final_loss},
            {"test", metrics_json(without.test)}}},
          {"delta", mw - mo}};
  write_text_file(dir / "ablate.json", aj.dump(2) + "\n");

  std::printf("\n%-12s %10s %12s %10s\n", "variant", "params", "final_loss", pm);
  std::printf("%-12s %10lld %12s %10s\n", "with_mamba", static_cast<long long>(with.parameters),
              fmt_g(with.result.final_loss).c_str(), fmt_g(mw).c_str());
  std::printf("%-12s %10lld %12s %10s\n", "no_mamba", static_cast<long long>(without.parameters),
              fmt_g(without.result.final_loss).c_str(), fmt_g(mo).c_str());
  std::printf("delta %s: %+.6g\n", pm, mw - mo);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic 3-D volume training, evaluation, and verification toolkit"};
  app.set_version_flag("--version", version());
  app.require_subcommand(1);

  RunOpts gen_o;
  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic volume dataset");
  add_data_flags(gen, gen_o);
  gen->add_option("--out", gen_o.out, "output directory")->required();

  RunOpts train_o;
  CLI::App* tr = app.add_subcommand("train", "train a model on synthetic volumes");
  add_data_flags(tr, train_o);
  add_model_flags(tr, train_o);
  add_train_flags(tr, train_o);
  tr->add_option("--out", train_o.out, "run output directory")->required();

  EvalOpts eval_o;
  CLI::App* ev = app.add_subcommand("eval", "evaluate a trained or fresh model");
  add_data_flags(ev, eval_o.run);
  add_model_flags(ev, eval_o.run);
  ev->add_option("--run", eval_o.run_dir, "training run directory (model.json + model.nmb)");
  ev->add_option("--split", eval_o.split, "dataset split: train, val, or test");
  ev->add_option("--data", eval_o.run.data_dir, "evaluate on a gen-data directory");
  ev->add_option("--batch-size", eval_o.run.batch_size, "evaluation batch size");
  ev->add_option("--out", eval_o.out_path, "write the metric report JSON here");
  ev->add_flag("--deterministic", eval_o.run.deterministic,
               "single-threaded bit-reproducible kernels");

  GradcheckOpts grad_o;
  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  gc->add_option("--seeds", grad_o.seeds, "seeds per case");
  gc->add_option("--filter", grad_o.filter, "run only cases whose name contains this");

  ScanBenchOpts sb_o;
  CLI::App* sb = app.add_subcommand("scan-bench", "sequential vs chunked scan throughput");
  sb->add_option("--lengths", sb_o.lengths, "sequence lengths")->delimiter(',');
  sb->add_option("--channels", sb_o.channels, "scan channels C");
  sb->add_option("--state", sb_o.state, "state dimension N");
  sb->add_option("--seed", sb_o.seed, "input seed");
  sb->add_option("--out", sb_o.out, "write CSV here");

  RunOpts abl_o;
  CLI::App* ab = app.add_subcommand("ablate", "matched with/without-Mamba comparison");
  add_data_flags(ab, abl_o);
  add_model_flags(ab, abl_o);
  add_train_flags(ab, abl_o);
  ab->add_option("--out", abl_o.out, "comparison output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      apply_config_file(gen, gen_o);
      return cmd_gen_data(gen_o);
    }
    if (*tr) {
      apply_config_file(tr, train_o);
      return cmd_train(train_o);
    }
    if (*ev) {
      apply_config_file(ev, eval_o.run);
      return cmd_eval(eval_o);
    }
    if (*gc) return cmd_gradcheck(grad_o);
    if (*sb) return cmd_scan_bench(sb_o);
    if (*ab) {
      apply_config_file(ab, abl_o);
      return cmd_ablate(abl_o);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
