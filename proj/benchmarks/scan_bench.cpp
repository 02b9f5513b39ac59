#include <benchmark/benchmark.h>

#include "nnm/ops.hpp"
#include "nnm/rng.hpp"
#include "nnm/ssm.hpp"
#include "nnm/tape.hpp"

using namespace nnm;

namespace {

struct Inputs {
  TensorF u, delta, A, Bt, Ct, D;
};

Inputs make_inputs(std::int64_t B, std::int64_t L, std::int64_t C, std::int64_t N) {
  Rng rng = Rng::derive(7, 0);
  Inputs in;
  in.u = TensorF::normal({B, L, C}, rng);
  in.delta = TensorF::uniform({B, L, C}, rng, 0.01f, 0.5f);
  in.A = TensorF::uniform({C, N}, rng, -4.0f, -0.1f);
  in.Bt = TensorF::normal({B, L, N}, rng);
  in.Ct = TensorF::normal({B, L, N}, rng);
  in.D = TensorF::normal({C}, rng);
  return in;
}

}  // namespace

static void BM_ScanSequential(benchmark::State& state) {
  const std::int64_t L = state.range(0), C = state.range(1);
  Inputs in = make_inputs(2, L, C, 8);
  for (auto _ : state) {
    TensorF y = scan_sequential(in.u, in.delta, in.A, in.Bt, in.Ct, in.D);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * L * C * 8);
}
BENCHMARK(BM_ScanSequential)->Args({4096, 32})->Unit(benchmark::kMillisecond);

static void BM_ScanChunkedForward(benchmark::State& state) {
  const std::int64_t L = state.range(0), C = state.range(1);
  Inputs in = make_inputs(2, L, C, 8);
  for (auto _ : state) {
    TensorF y = selective_scan_core(in.u, in.delta, in.A, in.Bt, in.Ct, in.D);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * L * C * 8);
}
BENCHMARK(BM_ScanChunkedForward)->Args({4096, 32})->Args({32768, 32})->Unit(benchmark::kMillisecond);

static void BM_ScanTrainStep(benchmark::State& state) {
  const std::int64_t L = state.range(0), C = state.range(1);
  Inputs in = make_inputs(2, L, C, 8);
  for (auto _ : state) {
    Tape<float> tape;
    TensorF u = tape.leaf(in.u), d = tape.leaf(in.delta), A = tape.leaf(in.A);
    TensorF Bt = tape.leaf(in.Bt), Ct = tape.leaf(in.Ct), D = tape.leaf(in.D);
    TensorF loss = sum(selective_scan_core(u, d, A, Bt, Ct, D));
    tape.backward(loss);
    benchmark::DoNotOptimize(tape.grad_or_zero(u).data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * L * C * 8);
}
BENCHMARK(BM_ScanTrainStep)->Args({4096, 32})->Args({32768, 32})->Unit(benchmark::kMillisecond);
