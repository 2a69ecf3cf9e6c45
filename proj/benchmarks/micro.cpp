#include <benchmark/benchmark.h>

#include <numeric>
#include <vector>

#include "fedrank/agent.hpp"
#include "fedrank/data.hpp"
#include "fedrank/rng.hpp"
#include "fedrank/trainer.hpp"

using namespace fedrank;

namespace {

void BM_ProbeEpoch(benchmark::State& state) {
  SyntheticSpec s;
  s.dims = 10;
  s.samples = static_cast<std::size_t>(state.range(0));
  const auto ds = make_synthetic(s);
  ClientShard shard;
  shard.example_indices.resize(ds.size());
  std::iota(shard.example_indices.begin(), shard.example_indices.end(), std::size_t{0});
  const auto params = init_params(ModelKind::kSoftmaxRegression, s.dims, 10, 0, 1);
  TrainConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(probe_epoch(params, ds, shard, cfg));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ProbeEpoch)->Arg(100)->Arg(1000);

void BM_QForward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  QNetwork net(64, 64, 1);
  Rng r(2);
  StateMatrix s;
  s.values.resize(n * kStateDims);
  for (auto& v : s.values) v = r.normal();
  for (auto _ : state) benchmark::DoNotOptimize(net.forward_all(s));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_QForward)->Arg(100);

void BM_RankLoss(benchmark::State& state) {
  const std::size_t n = 100;
  Rng r(3);
  std::vector<double> qp(n), qt(n);
  for (auto& q : qp) q = r.normal();
  for (auto& q : qt) q = r.normal();
  std::vector<std::uint8_t> mask(n, 0);
  for (std::size_t i = 0; i < 10; ++i) mask[i * 7] = 1;
  const auto pairs = boundary_pairs(mask, 256, r);
  for (auto _ : state) benchmark::DoNotOptimize(rank_loss(qp, qt, pairs));
}
BENCHMARK(BM_RankLoss);

void BM_DirichletPartition(benchmark::State& state) {
  SyntheticSpec s;
  s.samples = 20000;
  const auto ds = make_synthetic(s);
  for (auto _ : state) {
    benchmark::DoNotOptimize(partition(ds, {100, PartitionRegime::kDirichlet, 0.1, 7}));
  }
}
BENCHMARK(BM_DirichletPartition);

}  // namespace
BENCHMARK_MAIN();
