#include <benchmark/benchmark.h>

#include "mmfusion/pipeline.hpp"

namespace mmfusion {
namespace {

Tensor<float> uniform(const Shape& dims, std::uint64_t seed) {
  Tensor<float> t(dims);
  SplitMix64 rng(seed);
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform(-1, 1));
  return t;
}

PointCloud frame(std::size_t points) {
  const PipelineConfig d = PipelineConfig::defaults();
  const SceneOptions o = scene_options_for(d);
  return synth_scene(0, 10, points - 10 * o.points_per_object, o).cloud;
}

void BM_Voxelize(benchmark::State& state) {
  const PipelineConfig d = PipelineConfig::defaults();
  const PointCloud cloud = frame(static_cast<std::size_t>(state.range(0)));
  const auto workers = static_cast<std::size_t>(state.range(1));
  for (auto _ : state) benchmark::DoNotOptimize(voxelize(cloud, d.voxel, workers));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(cloud.size()));
}
BENCHMARK(BM_Voxelize)->Args({120000, 1})->Args({120000, 4})->Unit(benchmark::kMillisecond);

void BM_VlpmForward(benchmark::State& state) {
  const PipelineConfig d = PipelineConfig::defaults();
  const VoxelBatch batch = voxelize(frame(120000), d.voxel);
  ParamStore<float> params(1);
  init_vlpm_params(params, d.vlpm);
  for (auto _ : state) {
    Tape<float> tape(false);
    benchmark::DoNotOptimize(vlpm_forward(tape, batch, d.vlpm, params).value().data());
  }
  state.counters["voxels"] = static_cast<double>(batch.size());
}
BENCHMARK(BM_VlpmForward)->Unit(benchmark::kMillisecond);

void BM_CrossAttention(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto c = static_cast<std::size_t>(state.range(1));
  const auto q = uniform({n, c}, 1), k = uniform({n, c}, 2), v = uniform({n, c}, 3);
  for (auto _ : state) {
    Tape<float> tape(false);
    benchmark::DoNotOptimize(
        cross_attention(tape.constant(q), tape.constant(k), tape.constant(v)).attended.value().data());
  }
}
BENCHMARK(BM_CrossAttention)->Args({9, 8})->Args({550, 256})->Unit(benchmark::kMillisecond);

void BM_Conv2d(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto x = uniform({c, 64, 64}, 4), w = uniform({c, c, 3, 3}, 5);
  const Tensor<float> b({c});
  for (auto _ : state) {
    Tape<float> tape(false);
    benchmark::DoNotOptimize(conv2d(tape.constant(x), tape.constant(w), tape.constant(b), 1, 1).value().data());
  }
}
BENCHMARK(BM_Conv2d)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace mmfusion

BENCHMARK_MAIN();
