// Serial reference vs OpenMP kernels. Set OMP_NUM_THREADS to vary the
// parallel side.

#include "osrm/kernels.hpp"

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

namespace {

using namespace osrm;

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

std::vector<Matrix> random_layers(int tasks, Eigen::Index n) {
  std::vector<Matrix> out;
  for (int t = 0; t < tasks; ++t) out.push_back(random_matrix(n, n, 100 + t));
  return out;
}

kernels::ConstSpans spans(const std::vector<Matrix>& ms) {
  kernels::ConstSpans out;
  for (const auto& m : ms) out.emplace_back(m.data(), static_cast<std::size_t>(m.size()));
  return out;
}

template <Matrix (*Gram)(const Matrix&)>
void BM_Gram(benchmark::State& state) {
  const Matrix h = random_matrix(state.range(0), state.range(1), 1);
  for (auto _ : state) benchmark::DoNotOptimize(Gram(h));
  state.SetItemsProcessed(state.iterations() * state.range(0) * state.range(1) * state.range(1));
}
BENCHMARK(BM_Gram<kernels::reference::gram>)->Args({100, 16})->Args({1000, 128})->Args({2000, 256});
BENCHMARK(BM_Gram<kernels::gram>)->Args({100, 16})->Args({1000, 128})->Args({2000, 256});

template <auto Merge>
void BM_TiesMerge(benchmark::State& state) {
  const auto layers = random_layers(4, state.range(0));
  const auto views = spans(layers);
  Matrix out(state.range(0), state.range(0));
  for (auto _ : state) {
    Merge(views, std::span<double>(out.data(), static_cast<std::size_t>(out.size())));
    benchmark::ClobberMemory();
  }
}
BENCHMARK(BM_TiesMerge<kernels::reference::ties_disjoint_merge>)->Arg(256)->Arg(1024);
BENCHMARK(BM_TiesMerge<kernels::ties_disjoint_merge>)->Arg(256)->Arg(1024);

template <auto Trim>
void BM_TiesTrim(benchmark::State& state) {
  const Matrix tau = random_matrix(state.range(0), state.range(0), 7);
  Matrix out(tau.rows(), tau.cols());
  const std::span<const double> in(tau.data(), static_cast<std::size_t>(tau.size()));
  for (auto _ : state) {
    Trim(in, 0.2, std::span<double>(out.data(), static_cast<std::size_t>(out.size())));
    benchmark::ClobberMemory();
  }
}
BENCHMARK(BM_TiesTrim<kernels::reference::ties_trim>)->Arg(256)->Arg(1024);
BENCHMARK(BM_TiesTrim<kernels::ties_trim>)->Arg(256)->Arg(1024);

template <auto Fisher>
void BM_Fisher(benchmark::State& state) {
  const auto models = random_layers(4, state.range(0));
  auto fishers = random_layers(4, state.range(0));
  for (auto& f : fishers) f = f.cwiseAbs();
  const auto mv = spans(models), fv = spans(fishers);
  Matrix out(state.range(0), state.range(0));
  for (auto _ : state) {
    Fisher(mv, fv, 1e-12, std::span<double>(out.data(), static_cast<std::size_t>(out.size())));
    benchmark::ClobberMemory();
  }
}
BENCHMARK(BM_Fisher<kernels::reference::fisher_weighted_mean>)->Arg(256)->Arg(1024);
BENCHMARK(BM_Fisher<kernels::fisher_weighted_mean>)->Arg(256)->Arg(1024);

template <auto Unify>
void BM_EmrUnify(benchmark::State& state) {
  const auto layers = random_layers(4, state.range(0));
  const auto views = spans(layers);
  Matrix out(state.range(0), state.range(0));
  for (auto _ : state) {
    Unify(views, std::span<double>(out.data(), static_cast<std::size_t>(out.size())));
    benchmark::ClobberMemory();
  }
}
BENCHMARK(BM_EmrUnify<kernels::reference::emr_unify>)->Arg(256)->Arg(1024);
BENCHMARK(BM_EmrUnify<kernels::emr_unify>)->Arg(256)->Arg(1024);

}  // namespace

BENCHMARK_MAIN();
