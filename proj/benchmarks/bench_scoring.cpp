#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "kgrag/scorer.hpp"
#include "kgrag/structural_features.hpp"

using namespace kgrag;

static void BM_ScoreTriples(benchmark::State& state) {
  const auto rows = static_cast<Eigen::Index>(state.range(0));
  const auto workers = static_cast<std::size_t>(state.range(1));
  std::vector<std::size_t> hidden = {256};
  Mlp m = Mlp::random(4 * 256 + 10, hidden, 1, Activation::Relu, 1);
  Eigen::MatrixXd x = Eigen::MatrixXd::Random(rows, 4 * 256 + 10);
  for (auto _ : state) benchmark::DoNotOptimize(score_triples(m, x, workers));
  state.SetItemsProcessed(state.iterations() * rows);
}
BENCHMARK(BM_ScoreTriples)->Args({5000, 1})->Args({5000, 4})->Unit(benchmark::kMillisecond);

static void BM_SelectTopK(benchmark::State& state) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u;
  std::vector<double> s(static_cast<std::size_t>(state.range(0)));
  std::vector<TripleId> h(s.size());
  for (std::uint32_t i = 0; i < s.size(); ++i) s[i] = u(rng), h[i] = TripleId{i};
  for (auto _ : state) benchmark::DoNotOptimize(select_top_k(s, h, 100));
}
BENCHMARK(BM_SelectTopK)->Arg(10000)->Arg(100000);

static void BM_Dde(benchmark::State& state) {
  std::mt19937_64 rng(3);
  const auto n = static_cast<std::uint32_t>(state.range(0));
  std::vector<Triple> t;
  for (std::uint32_t i = 0; i < 4 * n; ++i)
    t.push_back({EntityId{static_cast<std::uint32_t>(rng() % n)}, RelationId{0},
                 EntityId{static_cast<std::uint32_t>(rng() % n)}});
  std::vector<EntityId> topics = {EntityId{0}};
  for (auto _ : state) benchmark::DoNotOptimize(compute_dde(t, topics, {2}));
}
BENCHMARK(BM_Dde)->Arg(1000)->Arg(10000);
