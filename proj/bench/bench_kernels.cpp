// Reference (serial) vs OpenMP kernels on the shapes the cnn4 preset and a
// desk-scale feature table actually produce.
//
//   ./bench_kernels --benchmark_counters_tabular=true
//   OMP_NUM_THREADS=4 ./bench_kernels --benchmark_filter=conv

#include <benchmark/benchmark.h>
#include <omp.h>

#include <random>
#include <vector>

#include "idt/dtree.hpp"
#include "idt/kernels.hpp"

using namespace idt;
using namespace idt::kernels;

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

// (in_h, in_w, in_c, out_c, pad): first and last cnn4 blocks.
struct ConvCase {
  std::vector<double> in, w, b, out;
  ConvGeometry g;
  explicit ConvCase(const benchmark::State& s) {
    g = ConvGeometry::make({int(s.range(0)), int(s.range(1)), int(s.range(2))}, int(s.range(3)), 3, 1,
                           int(s.range(4)));
    in = random_values(g.in.size(), 1);
    w = random_values(g.weight_count(), 2);
    b = random_values(g.out.channels, 3);
    out.resize(g.out.size());
  }
};

void conv_args(benchmark::internal::Benchmark* b) {
  b->Args({100, 100, 3, 16, 1})->Args({50, 50, 16, 32, 1})->Args({12, 12, 64, 128, 0});
  b->Unit(benchmark::kMicrosecond);
}

void BM_conv_forward_reference(benchmark::State& state) {
  ConvCase c(state);
  for (auto _ : state) {
    kernels::reference::conv2d_forward(c.g, c.in, c.w, c.b, c.out);
    benchmark::DoNotOptimize(c.out.data());
  }
  state.counters["flops"] = benchmark::Counter(2.0 * c.g.out.size() * c.g.kernel * c.g.kernel * c.g.in.channels,
                                               benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_conv_forward_reference)->Apply(conv_args);

void BM_conv_forward_parallel(benchmark::State& state) {
  ConvCase c(state);
  for (auto _ : state) {
    conv2d_forward(c.g, c.in, c.w, c.b, c.out);
    benchmark::DoNotOptimize(c.out.data());
  }
  state.counters["flops"] = benchmark::Counter(2.0 * c.g.out.size() * c.g.kernel * c.g.kernel * c.g.in.channels,
                                               benchmark::Counter::kIsIterationInvariantRate);
  state.counters["threads"] = omp_get_max_threads();
}
BENCHMARK(BM_conv_forward_parallel)->Apply(conv_args)->UseRealTime();

void BM_conv_backward_reference(benchmark::State& state) {
  ConvCase c(state);
  const auto d_out = random_values(c.g.out.size(), 4);
  std::vector<double> d_in(c.g.in.size()), d_w(c.w.size()), d_b(c.b.size());
  for (auto _ : state) {
    kernels::reference::conv2d_backward_data(c.g, c.w, d_out, d_in);
    kernels::reference::conv2d_backward_weights(c.g, c.in, d_out, d_w, d_b);
    benchmark::DoNotOptimize(d_in.data());
    benchmark::DoNotOptimize(d_w.data());
  }
}
BENCHMARK(BM_conv_backward_reference)->Apply(conv_args);

void BM_conv_backward_parallel(benchmark::State& state) {
  ConvCase c(state);
  const auto d_out = random_values(c.g.out.size(), 4);
  std::vector<double> d_in(c.g.in.size()), d_w(c.w.size()), d_b(c.b.size());
  for (auto _ : state) {
    conv2d_backward_data(c.g, c.w, d_out, d_in);
    conv2d_backward_weights(c.g, c.in, d_out, d_w, d_b);
    benchmark::DoNotOptimize(d_in.data());
    benchmark::DoNotOptimize(d_w.data());
  }
  state.counters["threads"] = omp_get_max_threads();
}
BENCHMARK(BM_conv_backward_parallel)->Apply(conv_args)->UseRealTime();

// Root split on an (n rows) x 12800 table, the 10x10x128 layer.
struct SplitCase {
  std::vector<double> values;
  std::vector<int> labels;
  SampleView view;
  explicit SplitCase(std::size_t rows) {
    constexpr std::size_t cols = 12800;
    values = random_values(rows * cols, 5);
    for (double& v : values) v = std::max(0.0, v);  // ReLU-like, many ties at 0
    std::mt19937_64 rng(6);
    labels.resize(rows);
    for (int& l : labels) l = int(rng() % 2);
    view = SampleView{values, cols, labels, 2};
  }
};

void BM_best_split_reference(benchmark::State& state) {
  SplitCase c(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(idt::reference::best_split(c.view, {}));
}
BENCHMARK(BM_best_split_reference)->Arg(80)->Arg(320)->Unit(benchmark::kMillisecond);

void BM_best_split_parallel(benchmark::State& state) {
  SplitCase c(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(best_split(c.view, {}));
  state.counters["threads"] = omp_get_max_threads();
}
BENCHMARK(BM_best_split_parallel)->Arg(80)->Arg(320)->Unit(benchmark::kMillisecond)->UseRealTime();

}  // namespace

BENCHMARK_MAIN();
