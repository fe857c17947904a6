#include <benchmark/benchmark.h>

#include "prompt_evolve/autodiff.hpp"
#include "prompt_evolve/param_space.hpp"
#include "prompt_evolve/prompting.hpp"
#include "prompt_evolve/random.hpp"

using namespace prompt_evolve;

static void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = random_normal({n, n}, 1.0, rng), b = random_normal({n, n}, 1.0, rng);
  for (auto _ : state) {
    Tape tape;
    benchmark::DoNotOptimize(matmul(tape.constant(a), tape.constant(b)).value());
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Matmul)->RangeMultiplier(2)->Range(8, 128)->Complexity();

// Forward and backward through one prompted attention layer.
static void BM_PromptedAttention(benchmark::State& state) {
  const auto nq = static_cast<std::size_t>(state.range(0));
  const std::size_t C = 32, heads = 4, lp = 8;
  Rng rng(2);
  const auto w = AttentionWeights::random(C, heads, 0.3, rng);
  const auto gen = PromptGenerator::random(C, 8, lp, 0.1, rng);
  const Tensor q = random_normal({nq, C}, 1.0, rng);
  for (auto _ : state) {
    Tape tape;
    const GeneratorVars vars = variable_vars(tape, gen);
    const Var q_o = tape.constant(q);
    const Var out = prompted_attention(w, q_o, generate_prompt(vars, query_function(q_o), lp));
    tape.backward(sum(out));
    benchmark::DoNotOptimize(tape.grad(vars.w1));
  }
}
BENCHMARK(BM_PromptedAttention)->Arg(10)->Arg(32)->Arg(64);

static void BM_Fuse(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  ParameterVector curr, prev, init;
  curr.add("w", random_normal({1, n}, 1.0, rng));
  prev.add("w", random_normal({1, n}, 1.0, rng));
  init.add("w", random_normal({1, n}, 1.0, rng));
  for (auto _ : state) benchmark::DoNotOptimize(fuse(curr, prev, init, FusionConfig{}));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(n));
}
BENCHMARK(BM_Fuse)->RangeMultiplier(8)->Range(64, 1 << 18);

BENCHMARK_MAIN();
