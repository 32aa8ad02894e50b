#include <benchmark/benchmark.h>

#include <filesystem>
#include <random>
#include <unistd.h>

#include "optimerge/distribution_vectors.hpp"
#include "optimerge/merge_methods.hpp"
#include "optimerge/search.hpp"
#include "optimerge/tensor_store.hpp"
#include "optimerge/tpe.hpp"

using namespace optimerge;

namespace {

TensorMap model(std::size_t params, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  TensorMap tm;
  const std::size_t per = params / 4;
  for (int i = 0; i < 4; ++i) {
    std::vector<float> v(per);
    for (auto& x : v) x = n(rng);
    tm.insert("layers." + std::to_string(i) + ".weight", Tensor::from_f32(v, {per}));
  }
  return tm;
}

std::vector<DistributionVector> vectors(const TensorMap& base, std::size_t count) {
  std::vector<DistributionVector> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(extract(model(base.parameter_count(), 100 + i), base, {}));
  return out;
}

void BM_Compose(benchmark::State& state) {
  const auto base = model(static_cast<std::size_t>(state.range(0)), 1);
  const auto vecs = vectors(base, 3);
  const WeightVector w({0.3, 0.7, 0.5});
  for (auto _ : state) benchmark::DoNotOptimize(compose(base, nullptr, vecs, w));
  state.SetItemsProcessed(state.iterations() * state.range(0) * 3);
}
BENCHMARK(BM_Compose)->Arg(1 << 16)->Arg(1 << 20);

void BM_DareSparsify(benchmark::State& state) {
  const auto delta = model(static_cast<std::size_t>(state.range(0)), 2);
  const SparsifierConfig cfg{SparsifierConfig::Method::DareRandomDrop, 0.5, 7};
  for (auto _ : state) benchmark::DoNotOptimize(dare_sparsify(delta, cfg));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_DareSparsify)->Arg(1 << 16)->Arg(1 << 20);

void BM_TiesMerge(benchmark::State& state) {
  const auto base = model(static_cast<std::size_t>(state.range(0)), 3);
  const auto vecs = vectors(base, 3);
  std::vector<const DistributionVector*> ptrs;
  for (const auto& v : vecs) ptrs.push_back(&v);
  for (auto _ : state) benchmark::DoNotOptimize(ties_merge(base, ptrs, TiesConfig{0.2, {}}));
  state.SetItemsProcessed(state.iterations() * state.range(0) * 3);
}
BENCHMARK(BM_TiesMerge)->Arg(1 << 16);

// One TPE suggestion after `range(0)` scored trials in a 4-D space.
void BM_TpeSuggest(benchmark::State& state) {
  Study st;
  for (const char* n : {"it", "ja", "zh", "en"}) st.space.dims.push_back({n, 0.0, 1.0});
  st.batch_size = 1;
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::int64_t i = 0; i < state.range(0); ++i) {
    Trial t;
    t.index = static_cast<std::size_t>(i);
    t.batch_id = t.index;
    t.point = {u(rng), u(rng), u(rng), u(rng)};
    t.state = TrialState::Scored;
    t.score = u(rng);
    record(st, t);
  }
  for (auto _ : state) benchmark::DoNotOptimize(suggest(st));
}
BENCHMARK(BM_TpeSuggest)->Arg(25)->Arg(100)->Arg(400);

void BM_ContainerWriteRead(benchmark::State& state) {
  const auto tm = model(static_cast<std::size_t>(state.range(0)), 5);
  const auto path = std::filesystem::temp_directory_path() / ("optimerge-bench-" + std::to_string(getpid()));
  for (auto _ : state) {
    write_container(tm, path);
    benchmark::DoNotOptimize(read_container(path));
  }
  std::filesystem::remove(path);
  state.SetBytesProcessed(state.iterations() * state.range(0) * 4 * 2);
}
BENCHMARK(BM_ContainerWriteRead)->Arg(1 << 20);

}  // namespace

BENCHMARK_MAIN();
