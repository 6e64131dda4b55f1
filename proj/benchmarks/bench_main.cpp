#include <benchmark/benchmark.h>

#include <numeric>

#include "pera/objective.hpp"
#include "pera/trainer.hpp"
#include "pera/views.hpp"

using namespace pera;

namespace {

ImageBatch batch_for(const RunConfig& cfg) {
  const Dataset ds = generate_synthetic_dataset(cfg.trainer.batch_size, cfg.backbone.image_size, 4, 0);
  ImageBatch b;
  b.images = ds.images;
  b.labels = ds.labels;
  b.indices.resize(ds.size());
  std::iota(b.indices.begin(), b.indices.end(), std::size_t{0});
  return b;
}

void BM_SampleTriMask(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng{1};
  for (auto _ : state) benchmark::DoNotOptimize(sample_trimask(n, MaskRatios{0.3, 0.2, 0.5}, rng));
}
BENCHMARK(BM_SampleTriMask)->Arg(64)->Arg(196)->Arg(1024);

void BM_ClsLoss(benchmark::State& state) {
  const int k = static_cast<int>(state.range(0));
  const MatF s = MatF::Random(32, k), t = MatF::Random(32, k), c = MatF::Zero(1, k);
  MatF grad;
  for (auto _ : state) benchmark::DoNotOptimize(cls_loss(s, t, c, {0.1, 0.03}, &grad));
}
BENCHMARK(BM_ClsLoss)->Arg(256)->Arg(4096);

// Arg 0: dense baseline (DM and PP off), 1: disjoint masks with pixel prediction.
void BM_TrainStep(benchmark::State& state) {
  RunConfig cfg;
  const bool sparse = state.range(0) == 1;
  cfg.trainer.toggles.disjoint_mask = sparse;
  cfg.trainer.toggles.pixel_prediction = sparse;
  cfg.trainer.epochs = 1000;
  const ImageBatch batch = batch_for(cfg);
  const ScheduleShape shape = schedule_shape(cfg.trainer, batch.size());
  ModelState model = init_state(cfg);
  for (auto _ : state) benchmark::DoNotOptimize(train_step(model, batch, cfg, shape));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch.size()));
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
