#include "shiftlab/diagnostics.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace shiftlab;

static void BM_LanczosTop5(benchmark::State& state) {
  const auto n = state.range(0);
  std::mt19937_64 g(1);
  std::normal_distribution<double> nd;
  Eigen::MatrixXd a(n, n);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = nd(g);
  const Eigen::MatrixXd m = a * a.transpose();
  const diagnostics::Hvp op = [&](const Eigen::VectorXd& v) { return Eigen::VectorXd(m * v); };
  for (auto _ : state) benchmark::DoNotOptimize(diagnostics::lanczos_top_k(op, n, 5, 30).eigenvalues);
}
BENCHMARK(BM_LanczosTop5)->Arg(200)->Arg(1000)->Unit(benchmark::kMillisecond);

static void BM_SharpnessBySeverity(benchmark::State& state) {
  Rng rng(1);
  const auto src = data::make_toy_images(3000, data::ToyImageSpec{}, rng);
  const auto ds = data::build_corrupted_dataset(src, data::CorruptionKind::gaussian, 1.0, 2);
  Rng init(3);
  models::DualHeadModel model({models::ExtractorKind::mlp, 64, 32, 2, 1}, init);
  for (auto _ : state) benchmark::DoNotOptimize(diagnostics::sharpness_by_severity(model, ds, 0.01).value);
}
BENCHMARK(BM_SharpnessBySeverity)->Unit(benchmark::kMillisecond);
