#include <benchmark/benchmark.h>

#include "octseg/kernels.hpp"
#include "octseg/losses.hpp"
#include "octseg/rng.hpp"

// Parallel kernels against their serial reference implementations at
// training-sized shapes.

using namespace octseg;
namespace K = octseg::kernels;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, uint64_t seed) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (auto& x : t.v) x = rng.uniform(-1.0, 1.0);
    return t;
}

void conv_args(benchmark::internal::Benchmark* b) {
    // ci, co, kd (decoder stage and encoder block shapes)
    b->Args({24, 8, 3})->Args({8, 8, 3})->Args({8, 8, 1})->Args({1, 8, 1});
}

} // namespace

static void BM_conv3d_forward(benchmark::State& state) {
    const int64_t ci = state.range(0), co = state.range(1), kd = state.range(2);
    const Tensor in = random_tensor({ci, 12, 64, 64}, 1);
    const Tensor w = random_tensor({co, ci, kd, 3, 3}, 2);
    const Tensor b = random_tensor({co}, 3);
    Tensor out({co, 12, 64, 64});
    for (auto _ : state) {
        K::conv3d_forward(in, w, b, out);
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(state.iterations() * co * 12 * 64 * 64 * ci * kd * 9);
}
BENCHMARK(BM_conv3d_forward)->Apply(conv_args)->Unit(benchmark::kMillisecond);

static void BM_conv3d_forward_serial_ref(benchmark::State& state) {
    const int64_t ci = state.range(0), co = state.range(1), kd = state.range(2);
    const Tensor in = random_tensor({ci, 12, 64, 64}, 1);
    const Tensor w = random_tensor({co, ci, kd, 3, 3}, 2);
    const Tensor b = random_tensor({co}, 3);
    Tensor out({co, 12, 64, 64});
    for (auto _ : state) {
        K::ref::conv3d_forward(in, w, b, out);
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(state.iterations() * co * 12 * 64 * 64 * ci * kd * 9);
}
BENCHMARK(BM_conv3d_forward_serial_ref)->Apply(conv_args)->Unit(benchmark::kMillisecond);

static void BM_warp_rows(benchmark::State& state) {
    const Tensor in = random_tensor({8, 12, 96, 128}, 4);
    std::vector<double> shifts(12);
    Rng rng(5);
    for (auto& s : shifts) s = rng.uniform(-6.0, 6.0);
    Tensor out(in.shape);
    for (auto _ : state) {
        K::warp_rows_forward(in, shifts, out);
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(state.iterations() * in.numel());
}
BENCHMARK(BM_warp_rows)->Unit(benchmark::kMillisecond);

static void BM_warp_rows_serial_ref(benchmark::State& state) {
    const Tensor in = random_tensor({8, 12, 96, 128}, 4);
    std::vector<double> shifts(12);
    Rng rng(5);
    for (auto& s : shifts) s = rng.uniform(-6.0, 6.0);
    Tensor out(in.shape);
    for (auto _ : state) {
        K::ref::warp_rows_forward(in, shifts, out);
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(state.iterations() * in.numel());
}
BENCHMARK(BM_warp_rows_serial_ref)->Unit(benchmark::kMillisecond);

static void BM_maxpool(benchmark::State& state) {
    const Tensor in = random_tensor({8, 12, 96, 128}, 6);
    Tensor out({8, 12, 48, 64});
    std::vector<int32_t> argmax;
    for (auto _ : state) {
        K::maxpool2_forward(in, out, argmax);
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(state.iterations() * in.numel());
}
BENCHMARK(BM_maxpool)->Unit(benchmark::kMillisecond);

static void BM_maxpool_serial_ref(benchmark::State& state) {
    const Tensor in = random_tensor({8, 12, 96, 128}, 6);
    Tensor out({8, 12, 48, 64});
    std::vector<int32_t> argmax;
    for (auto _ : state) {
        K::ref::maxpool2_forward(in, out, argmax);
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(state.iterations() * in.numel());
}
BENCHMARK(BM_maxpool_serial_ref)->Unit(benchmark::kMillisecond);

static void BM_local_ncc_loss(benchmark::State& state) {
    const Tensor img = random_tensor({1, 12, 96, 128}, 7);
    DisplacementVector d(12);
    Rng rng(8);
    for (auto& x : d.d) x = rng.uniform(-4.0, 4.0);
    std::vector<double> grad;
    for (auto _ : state) {
        const double loss = losses::local_ncc_loss(img, d, 9, &grad);
        benchmark::DoNotOptimize(loss);
    }
}
BENCHMARK(BM_local_ncc_loss)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
