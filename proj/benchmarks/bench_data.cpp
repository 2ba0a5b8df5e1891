#include "shiftlab/corruption_data.hpp"
#include "shiftlab/evil.hpp"

#include <benchmark/benchmark.h>

using namespace shiftlab;

static void BM_BuildCorruptedDataset(benchmark::State& state) {
  Rng rng(1);
  const auto src = data::make_toy_images(static_cast<std::size_t>(state.range(0)), data::ToyImageSpec{}, rng);
  for (auto _ : state) {
    auto ds = data::build_corrupted_dataset(src, data::CorruptionKind::gaussian, 1.0, 7);
    benchmark::DoNotOptimize(ds.x.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_BuildCorruptedDataset)->Arg(2000)->Arg(20000);

static void BM_AssignSeverities(benchmark::State& state) {
  const auto dist = data::make_severity_distribution(1.0, 5);
  for (auto _ : state) benchmark::DoNotOptimize(data::assign_severities(100000, dist, 3));
}
BENCHMARK(BM_AssignSeverities);

static void BM_UpdateMask(benchmark::State& state) {
  const auto n = state.range(0);
  Rng rng(2);
  std::normal_distribution<double> nd;
  evil::Vector theta(n), gt(n), gd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    theta(i) = nd(rng);
    gt(i) = nd(rng);
    gd(i) = nd(rng);
  }
  const auto mask = evil::init_mask_by_magnitude(theta, 0.8);
  const models::GradientSnapshot task{gt, models::GradientSource::task, 0};
  const models::GradientSnapshot dom{gd, models::GradientSource::domain, 0};
  for (auto _ : state) benchmark::DoNotOptimize(evil::update_mask(mask, task, dom, n / 20));
}
BENCHMARK(BM_UpdateMask)->Arg(320)->Arg(100000);
