#include <benchmark/benchmark.h>

#include "geofuse/attention.hpp"
#include "geofuse/fusion.hpp"
#include "geofuse/synthdata.hpp"
#include "geofuse/trainer.hpp"

namespace {

using namespace geofuse;

Tensor rand_tensor(std::vector<int> shape, uint64_t seed) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (int i = 0; i < t.size(); ++i) t.at(i) = rng.normal();
    return t;
}

void BM_MatmulForwardBackward(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    Tensor a = rand_tensor({n, n}, 1);
    Tensor b = rand_tensor({n, n}, 2);
    for (auto _ : state) {
        Graph g;
        Value av = g.leaf(a, true);
        Value bv = g.leaf(b, true);
        Value loss = g.sum_all(g.matmul(av, bv));
        g.backward(loss);
        benchmark::DoNotOptimize(g.grad(av).at(0));
    }
}
BENCHMARK(BM_MatmulForwardBackward)->Arg(32)->Arg(64)->Arg(128);

void BM_CrossAttention(benchmark::State& state) {
    Rng rng(3);
    AttentionParams params = AttentionParams::create(32, 4, rng);
    Tensor q = rand_tensor({64, 32}, 4);
    Tensor kv = rand_tensor({64, 32}, 5);
    for (auto _ : state) {
        AttentionRecord rec = cross_attention(params, q, kv);
        benchmark::DoNotOptimize(rec.context.at(0));
    }
}
BENCHMARK(BM_CrossAttention);

void BM_DynamicPipelineForward(benchmark::State& state) {
    FusionParams params = FusionParams::create(Family::QFormer, Variant::A, FusionDims{32, 6, 4, 8}, 6);
    TokenSequence f_v{rand_tensor({64, 32}, 7), GridShape{4, 4, 4}, StreamTag::Vision};
    TokenSequence f_g{rand_tensor({64, 6}, 8), GridShape{4, 4, 4}, StreamTag::Geometry};
    TokenSequence f_p{rand_tensor({4, 32}, 9), std::nullopt, StreamTag::Prompt};
    PipelineSpec spec{Family::QFormer, Variant::A, MaskPlan{MaskMode::RelevanceTopK, 0.8, 1.0}};
    for (auto _ : state) {
        Graph g;
        ParamBinder bind(g);
        Rng mask_rng(10);
        FuseInputs in{&f_v, &f_g, &f_p};
        FusedResult out = fuse_variant(bind, params, spec, in, &mask_rng);
        benchmark::DoNotOptimize(out.fused.tensor().at(0));
    }
}
BENCHMARK(BM_DynamicPipelineForward);

void BM_TrainStep(benchmark::State& state) {
    SceneConfig scene;
    TrainConfig tc;
    tc.steps = 1;
    tc.batch_size = 8;
    tc.warmup_steps = 0;
    tc.eval_samples = 8;
    tc.seed = 11;
    Dataset data = make_dataset(scene, 64, 8, 11);
    for (auto _ : state) {
        TrainOutcome out = train(scene, data, tc);
        benchmark::DoNotOptimize(out.final_test_acc);
    }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
