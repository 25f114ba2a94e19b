// Copyright 2026 The ssmvla Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Micro-benchmark for sizing models on the local machine: raw gemm throughput
// and the cost of one transformer block forward+backward at candidate widths.

#include <chrono>
#include <cstdio>

#include "ssmvla/nn/layers.hpp"
#include "ssmvla/nn/optim.hpp"

using namespace ssmvla;
namespace ag = ssmvla::ag;

static double now_s() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

static void bench_gemm(int64_t m, int64_t k, int64_t n, int iters) {
    Rng rng(1);
    Tensor<float> a({m, k}), b({k, n}), c({m, n});
    rng.fill_normal(a, 1.0f);
    rng.fill_normal(b, 1.0f);
    ag::gemm(a, b, c, false, false, false);
    const double t0 = now_s();
    for (int i = 0; i < iters; ++i) ag::gemm(a, b, c, false, false, false);
    const double dt = (now_s() - t0) / iters;
    const double gflops = 2.0 * m * k * n / dt * 1e-9;
    std::printf("gemm %4lldx%4lldx%4lld  %8.3f ms  %6.2f gflop/s\n", (long long)m, (long long)k,
                (long long)n, dt * 1e3, gflops);
}

static void bench_block(int64_t tokens, int64_t width, int64_t heads, int iters) {
    Rng rng(2);
    nn::ParamStore params;
    nn::TransformerBlock blk(params, "blk", width, heads, rng);
    Tensor<float> xin({tokens, width});
    rng.fill_normal(xin, 1.0f);

    ag::BoolMask mask(tokens, tokens);
    for (int64_t i = 0; i < tokens; ++i)
        for (int64_t j = 0; j <= i; ++j) mask.set(i, j, true);

    const double t0 = now_s();
    for (int it = 0; it < iters; ++it) {
        auto out = blk(ag::constant(Tensor<float>(xin)), mask);
        auto loss = ag::mean_all(ag::mul(out, out));
        ag::GradTable<float> grads;
        ag::backward(loss, grads);
    }
    const double dt = (now_s() - t0) / iters;
    std::printf("block tokens=%3lld width=%3lld heads=%lld  fwd+bwd %8.3f ms\n", (long long)tokens,
                (long long)width, (long long)heads, dt * 1e3);
}

int main() {
    bench_gemm(64, 64, 64, 200);
    bench_gemm(256, 64, 64, 200);
    bench_gemm(256, 128, 128, 100);
    bench_gemm(1024, 256, 256, 20);
    bench_block(76, 64, 4, 50);
    bench_block(128, 64, 4, 50);
    bench_block(268, 64, 4, 20);
    bench_block(80, 128, 4, 50);
    bench_block(145, 128, 4, 20);
    bench_block(208, 128, 4, 20);
    bench_block(208, 256, 8, 10);
    return 0;
}
