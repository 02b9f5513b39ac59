#include <cstdio>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "nnm/checkpoint.hpp"

using namespace nnm;

namespace {

ModelConfig tiny_cfg(Task task) {
  ModelConfig c;
  c.task = task;
  c.stage_channels = {4, 8};
  c.state_size = 4;
  c.input_spatial = {8, 8, 8};
  return c;
}

}  // namespace

TEST_CASE("tensor bundles round-trip bit for bit") {
  const char* path = "bundle_tmp.nmb";
  Rng rng(90);
  TensorF a = TensorF::normal({3, 4}, rng);
  TensorF b = TensorF::uniform({2, 2, 2}, rng, -5.0f, 5.0f);
  TensorF s = TensorF::scalar(2.5f);
  save_bundle<float>(path, {{"a", &a}, {"b", &b}, {"s", &s}});
  auto loaded = load_bundle<float>(path);
  REQUIRE(loaded.items.size() == 3);
  CHECK(loaded.items[0].first == "a");
  const TensorF* la = loaded.find("a");
  REQUIRE(la != nullptr);
  REQUIRE(la->shape() == a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) REQUIRE(la->data()[i] == a.data()[i]);
  const TensorF* ls = loaded.find("s");
  REQUIRE(ls != nullptr);
  CHECK(ls->rank() == 0);
  CHECK(ls->data()[0] == 2.5f);
  CHECK(loaded.find("missing") == nullptr);
  std::remove(path);
}

TEST_CASE("bundle loader rejects foreign and damaged files") {
  const char* path = "bad_tmp.nmb";
  {
    std::ofstream f(path, std::ios::binary);
    f.write("ELF\x7f____", 8);
  }
  CHECK_THROWS_AS(load_bundle<float>(path), FormatError);

  Rng rng(91);
  TensorF a = TensorF::normal({4, 4}, rng);
  save_bundle<float>(path, {{"a", &a}});
  CHECK_THROWS_AS(load_bundle<double>(path), FormatError);  // dtype mismatch
  {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    const auto half = static_cast<std::streamoff>(in.tellg()) / 2;
    std::vector<char> head(static_cast<std::size_t>(half));
    in.seekg(0);
    in.read(head.data(), half);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(head.data(), half);
  }
  CHECK_THROWS_AS(load_bundle<float>(path), FormatError);
  CHECK_THROWS_AS(load_bundle<float>("no_such_file.nmb"), FormatError);
  std::remove(path);
}

TEST_CASE("model checkpoints restore forward behavior exactly") {
  const char* path = "model_tmp.nmb";
  auto cfg = tiny_cfg(Task::kSegmentation);
  auto m = build_model<float>(cfg, 1);
  Rng rng(92);
  TensorF x = TensorF::uniform({2, 1, 8, 8, 8}, rng, 0.0f, 1.0f);
  // push the BN running stats away from init so buffers matter
  m.bind(nullptr);
  (void)m.forward(x, Mode::kTrain);
  TensorF y = m.forward(x, Mode::kEval);
  save_model(path, m);

  auto m2 = build_model<float>(cfg, 999);  // different weights until loaded
  load_model(path, m2);
  m2.bind(nullptr);
  TensorF y2 = m2.forward(x, Mode::kEval);
  REQUIRE(y2.shape() == y.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) REQUIRE(y2.data()[i] == y.data()[i]);
  std::remove(path);
}

TEST_CASE("model loading is strict about architecture") {
  const char* path = "strict_tmp.nmb";
  auto m = build_model<float>(tiny_cfg(Task::kSegmentation), 1);
  save_model(path, m);

  // different stage widths: shape mismatch
  ModelConfig other = tiny_cfg(Task::kSegmentation);
  other.stage_channels = {8, 16};
  auto mo = build_model<float>(other, 1);
  CHECK_THROWS_AS(load_model(path, mo), FormatError);

  // different task: tensor-count/name mismatch
  auto mc = build_model<float>(tiny_cfg(Task::kClassification), 1);
  CHECK_THROWS_AS(load_model(path, mc), FormatError);
  std::remove(path);
}
