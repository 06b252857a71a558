// Serial reference kernels against the OpenMP/BLAS versions, plus one full
// prediction at the compact size. Thread count follows OMP_NUM_THREADS.
#include <benchmark/benchmark.h>

#include <random>

#include "refcut/model.hpp"
#include "refcut/nn/kernels.hpp"

using namespace refcut;
using nn::Matrix;
namespace k = refcut::nn::kernels;

namespace {

Matrix<float> randn(int r, int c, std::uint64_t seed) {
  Matrix<float> m(r, c);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n;
  for (float& v : m.data) v = n(rng);
  return m;
}

void BM_gemm(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto a = randn(n, n, 1), b = randn(n, n, 2);
  Matrix<float> c(n, n);
  for (auto _ : state) {
    k::gemm(k::Trans::No, k::Trans::Yes, n, n, n, 1.0f, a.data.data(), n, b.data.data(), n, 0.0f,
            c.data.data(), n);
    benchmark::DoNotOptimize(c.data.data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * n * n * n);
}

void BM_gemm_serial(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto a = randn(n, n, 1), b = randn(n, n, 2);
  Matrix<float> c(n, n);
  for (auto _ : state) {
    k::serial::gemm(k::Trans::No, k::Trans::Yes, n, n, n, 1.0f, a.data.data(), n, b.data.data(), n,
                    0.0f, c.data.data(), n);
    benchmark::DoNotOptimize(c.data.data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * n * n * n);
}

void BM_attention(benchmark::State& state) {
  const int tokens = static_cast<int>(state.range(0));
  const auto qkv = randn(tokens, 3 * 96, 3);
  for (auto _ : state)
    benchmark::DoNotOptimize(k::attention(qkv, 4, static_cast<std::vector<Matrix<float>>*>(nullptr)));
}

void BM_attention_serial(benchmark::State& state) {
  const int tokens = static_cast<int>(state.range(0));
  const auto qkv = randn(tokens, 3 * 96, 3);
  for (auto _ : state) benchmark::DoNotOptimize(k::serial::attention(qkv, 4));
}

void BM_layer_norm(benchmark::State& state) {
  const auto x = randn(static_cast<int>(state.range(0)), 96, 4);
  const std::vector<float> g(96, 1.0f), b(96, 0.0f);
  for (auto _ : state)
    benchmark::DoNotOptimize(k::layer_norm(x, g, b, 1e-6f, static_cast<k::LayerNormStats<float>*>(nullptr)));
}

void BM_layer_norm_serial(benchmark::State& state) {
  const auto x = randn(static_cast<int>(state.range(0)), 96, 4);
  const std::vector<float> g(96, 1.0f), b(96, 0.0f);
  for (auto _ : state) benchmark::DoNotOptimize(k::serial::layer_norm(x, g, b, 1e-6f));
}

void BM_resize(benchmark::State& state) {
  const int s = static_cast<int>(state.range(0));
  const auto x = randn(s * s, 32, 5);
  for (auto _ : state) benchmark::DoNotOptimize(k::resize_bilinear(x, s, s, 4 * s, 4 * s));
}

void BM_resize_serial(benchmark::State& state) {
  const int s = static_cast<int>(state.range(0));
  const auto x = randn(s * s, 32, 5);
  for (auto _ : state) benchmark::DoNotOptimize(k::serial::resize_bilinear(x, s, s, 4 * s, 4 * s));
}

void BM_im2col(benchmark::State& state) {
  const int s = static_cast<int>(state.range(0));
  const auto x = randn(s * s, 32, 6);
  for (auto _ : state) benchmark::DoNotOptimize(k::im2col3x3(x, s, s));
}

void BM_im2col_serial(benchmark::State& state) {
  const int s = static_cast<int>(state.range(0));
  const auto x = randn(s * s, 32, 6);
  for (auto _ : state) benchmark::DoNotOptimize(k::serial::im2col3x3(x, s, s));
}

void BM_predict_compact(benchmark::State& state) {
  const ModelConfig cfg = ModelConfig::compact();
  const RefCutNet<float> net(cfg, init_params<float>(cfg, 1));
  Image image(cfg.input_size, cfg.input_size, 0.4f);
  const std::vector<Click> clicks{{20, 30, Polarity::Positive, 1}};
  const SoftMask prev(cfg.input_size, cfg.input_size);
  for (auto _ : state) benchmark::DoNotOptimize(net.predict(image, clicks, prev, {}));
}

}  // namespace

BENCHMARK(BM_gemm)->Arg(64)->Arg(196);
BENCHMARK(BM_gemm_serial)->Arg(64)->Arg(196);
BENCHMARK(BM_attention)->Arg(64)->Arg(196);
BENCHMARK(BM_attention_serial)->Arg(64)->Arg(196);
BENCHMARK(BM_layer_norm)->Arg(196)->Arg(3136);
BENCHMARK(BM_layer_norm_serial)->Arg(196)->Arg(3136);
BENCHMARK(BM_resize)->Arg(14)->Arg(56);
BENCHMARK(BM_resize_serial)->Arg(14)->Arg(56);
BENCHMARK(BM_im2col)->Arg(28)->Arg(56);
BENCHMARK(BM_im2col_serial)->Arg(28)->Arg(56);
BENCHMARK(BM_predict_compact);

BENCHMARK_MAIN();
