#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "probanet/gate.hpp"
#include "probanet/rng.hpp"
#include "probanet/sim.hpp"
#include "probanet/tensor.hpp"
#include "probanet/training.hpp"

using namespace probanet;

namespace {

FeatureMap random_map(Shape shape, Rng& rng) {
    FeatureMap m(shape);
    for (std::size_t n = 0; n < m.size(); ++n) m[n] = rng.uniform(0.0, 1.0);
    return m;
}

// Args: channels. Geometry of the VGG16 conv5 map: 38 x 50, 18 anchors, r = 16.
void BM_GateForward(benchmark::State& state) {
    const int c = static_cast<int>(state.range(0));
    Rng rng(1);
    const GateParams p = GateParams::initialize(c, 18, 16, 0.5, rng);
    const FeatureMap x = random_map({38, 50, c}, rng);
    const FeatureMap a = random_map({38, 50, 18}, rng);
    for (auto _ : state) benchmark::DoNotOptimize(gate_forward(x, a, p, GateMode::train));
    state.SetItemsProcessed(state.iterations() * mac_count(38, 50, c, 18, 16));
}
BENCHMARK(BM_GateForward)->Arg(64)->Arg(512)->Unit(benchmark::kMicrosecond);

void BM_GateBackward(benchmark::State& state) {
    const int c = static_cast<int>(state.range(0));
    Rng rng(2);
    const GateParams p = GateParams::initialize(c, 18, 16, 0.5, rng);
    const FeatureMap x = random_map({38, 50, c}, rng);
    const FeatureMap a = random_map({38, 50, 18}, rng);
    const GateOutput out = gate_forward(x, a, p, GateMode::train);
    const FeatureMap grad_b = random_map({38, 50, 18}, rng);
    for (auto _ : state) benchmark::DoNotOptimize(gate_backward(out, x, a, p, grad_b));
}
BENCHMARK(BM_GateBackward)->Arg(64)->Arg(512)->Unit(benchmark::kMicrosecond);

void BM_SampleMinibatch(benchmark::State& state) {
    const SimConfig sim;
    const auto labels = label_anchors(generate_scene(sim, 3), AnchorGrid::from_config(sim), sim.thresholds);
    Rng rng(3);
    std::vector<std::uint8_t> mask(labels.size());
    for (auto& m : mask) m = rng.uniform() < 0.5 ? 1 : 0;
    for (auto _ : state) benchmark::DoNotOptimize(sample_minibatch(labels, mask, rng));
}
BENCHMARK(BM_SampleMinibatch);

// Arg: 1 = gated variant, 0 = baseline.
void BM_TrainStep(benchmark::State& state) {
    const SimConfig sim;
    TrainConfig tc;
    tc.probanet_enabled = state.range(0) != 0;
    TrainState s = initial_state(sim, tc, 4);
    const auto scenes = scenes_for_step(sim, tc, 4, 0);
    const StepInputs in = stack_scenes(scenes, AnchorGrid::from_config(sim), sim.thresholds);
    for (auto _ : state) benchmark::DoNotOptimize(train_step(s, in, tc));
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);

void BM_GenerateScene(benchmark::State& state) {
    const SimConfig sim;
    std::uint64_t seed = 0;
    for (auto _ : state) benchmark::DoNotOptimize(generate_scene(sim, seed++));
}
BENCHMARK(BM_GenerateScene)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
