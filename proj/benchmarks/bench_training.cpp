#include "shiftlab/corruption_data.hpp"
#include "shiftlab/hood.hpp"
#include "shiftlab/sharpdro.hpp"

#include <benchmark/benchmark.h>

using namespace shiftlab;

namespace {

sharpdro::Batch severity_batch() {
  Rng rng(1);
  const auto src = data::make_toy_images(2000, data::ToyImageSpec{}, rng);
  return sharpdro::to_batch(data::build_corrupted_dataset(src, data::CorruptionKind::gaussian, 1.0, 2));
}

}  // namespace

static void BM_ErmStep(benchmark::State& state) {
  const auto batch = severity_batch();
  Rng init(3);
  models::DualHeadModel model({models::ExtractorKind::mlp, 64, 32, 2, 1}, init);
  optim::Sgd opt(0.01);
  for (auto _ : state) benchmark::DoNotOptimize(sharpdro::erm_step(model, batch, opt).mean_loss);
}
BENCHMARK(BM_ErmStep)->Unit(benchmark::kMillisecond);

static void BM_SharpDroAwareStep(benchmark::State& state) {
  const auto batch = severity_batch();
  Rng init(3);
  models::DualHeadModel model({models::ExtractorKind::mlp, 64, 32, 2, 1}, init);
  optim::Sgd opt(0.01);
  auto w = sharpdro::WorstCaseWeights::uniform_groups(6);
  sharpdro::StepConfig cfg;
  cfg.rho = 0.01;
  for (auto _ : state) benchmark::DoNotOptimize(sharpdro::sharpdro_step(model, batch, w, cfg, opt).sharpness);
}
BENCHMARK(BM_SharpDroAwareStep)->Unit(benchmark::kMillisecond);

static void BM_SharpDroAgnosticStep(benchmark::State& state) {
  const auto batch = severity_batch();
  Rng init(3);
  models::DualHeadModel model({models::ExtractorKind::mlp, 64, 32, 2, 1}, init);
  optim::Sgd opt(0.01);
  auto w = sharpdro::WorstCaseWeights::uniform_examples(batch.size(), false);
  w.mode = sharpdro::WeightMode::agnostic;
  sharpdro::StepConfig cfg;
  cfg.rho = 0.01;
  for (auto _ : state) benchmark::DoNotOptimize(sharpdro::sharpdro_step(model, batch, w, cfg, opt).sharpness);
}
BENCHMARK(BM_SharpDroAgnosticStep)->Unit(benchmark::kMillisecond);

static void BM_NegativeAugment(benchmark::State& state) {
  const auto toy = hood::make_toy(256, hood::ToySpec{}, 1);
  Rng init(2);
  hood::VibModel model(hood::VibSpec{}, init);
  for (auto _ : state) benchmark::DoNotOptimize(hood::negative_augment(model, toy.x, toy.y).data());
}
BENCHMARK(BM_NegativeAugment)->Unit(benchmark::kMillisecond);
