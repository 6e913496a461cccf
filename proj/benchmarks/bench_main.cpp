#include <benchmark/benchmark.h>

#include <vector>

#include "qttt/attention.hpp"
#include "qttt/numeric.hpp"
#include "qttt/qttt.hpp"
#include "qttt/tasks.hpp"
#include "qttt/transformer.hpp"

using namespace qttt;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(r, c);
  for (double& x : m.values()) x = rng.normal();
  return m;
}

ModelConfig toy_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 32;
  c.max_context = 8192;
  return c;
}

std::vector<int> random_tokens(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> t(n);
  for (int& x : t) x = static_cast<int>(rng.uniform_int(0, 255));
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_AttentionForward(benchmark::State& state) {
  const auto T = static_cast<std::size_t>(state.range(0));
  const Matrix k = random_matrix(T, 16, 3), v = random_matrix(T, 16, 4);
  const std::vector<double> q(16, 0.1);
  for (auto _ : state) benchmark::DoNotOptimize(attention_forward(q, k, v));
}
BENCHMARK(BM_AttentionForward)->Range(64, 16384);

void BM_Prefill(benchmark::State& state) {
  const auto p = init_params(toy_config(), 0);
  const auto toks = random_tokens(static_cast<std::size_t>(state.range(0)), 5);
  for (auto _ : state) benchmark::DoNotOptimize(prefill_and_cache(p, toks));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Prefill)->Arg(256)->Arg(1024)->Arg(4096)->Unit(benchmark::kMillisecond);

void BM_SpanGradient(benchmark::State& state) {
  const auto p = init_params(toy_config(), 0);
  const auto toks = random_tokens(2048, 6);
  const auto cache = prefill_and_cache(p, toks);
  const Span span{1000, static_cast<std::size_t>(state.range(0))};
  for (auto _ : state) benchmark::DoNotOptimize(grad_wq_span(p, cache, toks, span));
}
BENCHMARK(BM_SpanGradient)->Arg(16)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_Decode(benchmark::State& state) {
  const auto p = init_params(toy_config(), 0);
  const auto toks = random_tokens(1024, 7);
  const auto cache = prefill_and_cache(p, toks);
  for (auto _ : state) benchmark::DoNotOptimize(decode(p, cache, toks.size(), 64, SamplerConfig{}));
}
BENCHMARK(BM_Decode)->Unit(benchmark::kMillisecond);

void BM_VerifyLog(benchmark::State& state) {
  const auto t = gen_transaction_task(static_cast<std::size_t>(state.range(0)), BugType::LostUpdate, 11);
  for (auto _ : state) benchmark::DoNotOptimize(verify_transaction_log(t));
}
BENCHMARK(BM_VerifyLog)->Arg(25)->Arg(500);

}  // namespace

BENCHMARK_MAIN();
