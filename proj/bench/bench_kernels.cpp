// Serial reference vs OpenMP kernels. Run with e.g. OMP_NUM_THREADS=4.
#include <benchmark/benchmark.h>
#include <omp.h>

#include <vector>

#include "cdr/kernels.hpp"
#include "cdr/rng.hpp"
#include "cdr/scorer.hpp"
#include "cdr/trainer.hpp"

namespace {

using cdr::kernels::ConvShape;

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  cdr::Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

// A wider layer than the reference scorer so the parallel path engages.
const ConvShape kShape{16, 64, 32, 3, 1};

struct ConvData {
  std::vector<double> in = random_vec(kShape.in_len(), 1);
  std::vector<double> w = random_vec(kShape.weight_len(), 2);
  std::vector<double> b = random_vec(kShape.out_channels, 3);
  std::vector<double> gout = random_vec(kShape.out_len(), 4);
  std::vector<double> out = std::vector<double>(kShape.out_len());
  std::vector<double> gin = std::vector<double>(kShape.in_len());
  std::vector<double> gw = std::vector<double>(kShape.weight_len());
  std::vector<double> gb = std::vector<double>(kShape.out_channels);
};

void BM_ConvForwardReference(benchmark::State& state) {
  ConvData d;
  for (auto _ : state) {
    cdr::kernels::reference::conv_forward(kShape, d.in, d.w, d.b, d.out);
    benchmark::DoNotOptimize(d.out.data());
  }
}

void BM_ConvForwardParallel(benchmark::State& state) {
  ConvData d;
  omp_set_num_threads(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    cdr::kernels::conv_forward(kShape, d.in, d.w, d.b, d.out);
    benchmark::DoNotOptimize(d.out.data());
  }
}

void BM_ConvBackwardReference(benchmark::State& state) {
  ConvData d;
  for (auto _ : state) {
    cdr::kernels::reference::conv_backward(kShape, d.in, d.w, d.gout, d.gin, d.gw, d.gb);
    benchmark::DoNotOptimize(d.gw.data());
  }
}

void BM_ConvBackwardParallel(benchmark::State& state) {
  ConvData d;
  omp_set_num_threads(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    cdr::kernels::conv_backward(kShape, d.in, d.w, d.gout, d.gin, d.gw, d.gb);
    benchmark::DoNotOptimize(d.gw.data());
  }
}

struct PairBatch {
  cdr::ScorerParams params = cdr::init_params(cdr::ScorerConfig{}, 7);
  std::vector<cdr::Patch> patches;
  std::vector<cdr::PairRef> refs;

  PairBatch() {
    cdr::Rng rng(11);
    for (int i = 0; i < 64; ++i) {
      cdr::Patch p{32, 1, std::vector<double>(32 * 32), "p" + std::to_string(i), false};
      for (auto& v : p.pixels) v = rng.uniform();
      patches.push_back(std::move(p));
    }
    for (int i = 0; i < 32; ++i) refs.push_back({&patches[2 * i], &patches[2 * i + 1], rng.uniform()});
  }
};

void BM_PairGradientSerial(benchmark::State& state) {
  PairBatch b;
  for (auto _ : state) benchmark::DoNotOptimize(cdr::serial::batch_pair_gradient(b.params, b.refs).loss);
}

void BM_PairGradientParallel(benchmark::State& state) {
  PairBatch b;
  omp_set_num_threads(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(cdr::batch_pair_gradient(b.params, b.refs).loss);
}

}  // namespace

BENCHMARK(BM_ConvForwardReference);
BENCHMARK(BM_ConvForwardParallel)->Arg(1)->Arg(2)->Arg(4);
BENCHMARK(BM_ConvBackwardReference);
BENCHMARK(BM_ConvBackwardParallel)->Arg(1)->Arg(2)->Arg(4);
BENCHMARK(BM_PairGradientSerial);
BENCHMARK(BM_PairGradientParallel)->Arg(1)->Arg(2)->Arg(4);

BENCHMARK_MAIN();
