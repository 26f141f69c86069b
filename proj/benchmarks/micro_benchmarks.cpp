#include <benchmark/benchmark.h>

#include <vector>

#include "dlab/decode.hpp"
#include "dlab/eval_scaling.hpp"
#include "dlab/models.hpp"
#include "dlab/tensor.hpp"

namespace {

void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::vector<double> a(n * n, 0.5), b(n * n, 0.25), c(n * n);
  for (auto _ : state) {
    dlab::gemm(a.data(), b.data(), c.data(), n, n, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 2 * n * n * n));
}
BENCHMARK(BM_Gemm)->Arg(32)->Arg(128);

dlab::ModelSpec spec_for(dlab::LayerKind kind) {
  dlab::ModelSpec s;
  s.layer_kinds.assign(static_cast<std::size_t>(s.n_layers), kind);
  return s;
}

// One decode step at batch 16 after `range(1)` cached positions.
void BM_DecodeStep(benchmark::State& state) {
  const auto kind = static_cast<dlab::LayerKind>(state.range(0));
  const auto context = static_cast<std::size_t>(state.range(1));
  const dlab::Model model = dlab::init_model(spec_for(kind), 7);
  dlab::DecodeState base(model, 1);
  const std::vector<int> prompt(context, 5);
  dlab::prefill(model, base, prompt);
  const std::vector<int> tokens(16, 7);
  for (auto _ : state) {
    state.PauseTiming();
    dlab::DecodeState s = base.replicate(16);
    state.ResumeTiming();
    benchmark::DoNotOptimize(dlab::decode_step(model, s, tokens));
  }
}
BENCHMARK(BM_DecodeStep)
    ->ArgNames({"kind", "context"})
    ->Args({0, 1})
    ->Args({0, 512})
    ->Args({1, 512})
    ->Args({2, 512});

void BM_PassAtK(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(dlab::pass_at_k(10000, 1, 100));
}
BENCHMARK(BM_PassAtK);

void BM_ForwardBackward(benchmark::State& state) {
  const dlab::Model model = dlab::init_model(spec_for(dlab::LayerKind::attention), 3);
  dlab::TokenBatch batch{8, 96, std::vector<int>(8 * 96, 9)};
  for (auto _ : state) {
    dlab::Tensor loss = dlab::mean(dlab::forward(model, batch));
    dlab::backward(loss);
    model.zero_grad();
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 8 * 96));
}
BENCHMARK(BM_ForwardBackward)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
