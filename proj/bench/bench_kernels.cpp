#include <benchmark/benchmark.h>

#include "manipshield/corpus_stats.hpp"
#include "manipshield/lds_probe.hpp"
#include "manipshield/parallel.hpp"
#include "manipshield/synthetic.hpp"

using namespace manipshield;

namespace {

const synthetic::LabeledDump& fixture() {
  static const auto fx = [] {
    synthetic::PlantedLayerSpec spec;
    spec.layers = 32;
    spec.dim = 128;
    spec.per_class = 400;
    return synthetic::planted_layer(spec);
  }();
  return fx;
}

const std::vector<corpus::RgbImage>& images() {
  static const auto imgs = [] {
    std::vector<corpus::RgbImage> v;
    for (std::uint64_t s = 0; s < 16; ++s) v.push_back(synthetic::random_image(256, 256, s));
    return v;
  }();
  return imgs;
}

void BM_LayerMetricsSerial(benchmark::State& state) {
  const auto& fx = fixture();
  const auto flags = lds::class_flags(fx.labels);
  for (auto _ : state) benchmark::DoNotOptimize(lds::layer_metrics_serial(fx.dump, flags, {}));
}

void BM_LayerMetricsParallel(benchmark::State& state) {
  const auto& fx = fixture();
  const auto flags = lds::class_flags(fx.labels);
  set_threads(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(lds::layer_metrics(fx.dump, flags, {}));
}

void BM_ImageStatsReference(benchmark::State& state) {
  const auto& img = images().front();
  for (auto _ : state) benchmark::DoNotOptimize(corpus::image_stats_reference(img));
}

void BM_ImageStats(benchmark::State& state) {
  const auto& img = images().front();
  set_threads(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(corpus::image_stats(img));
}

void BM_BatchStatsSerial(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(corpus::batch_stats_serial(images()));
}

void BM_BatchStatsParallel(benchmark::State& state) {
  set_threads(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(corpus::batch_stats(images()));
}

}  // namespace

BENCHMARK(BM_LayerMetricsSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_LayerMetricsParallel)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ImageStatsReference)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ImageStats)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_BatchStatsSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_BatchStatsParallel)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
