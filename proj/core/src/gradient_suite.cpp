#include "prompt_evolve/gradient_suite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <utility>

#include "prompt_evolve/gradcheck.hpp"
#include "prompt_evolve/incremental.hpp"
#include "prompt_evolve/param_space.hpp"
#include "prompt_evolve/prompting.hpp"
#include "prompt_evolve/random.hpp"

namespace prompt_evolve {

namespace {

struct Instance {
  ScalarFunction f;
  std::vector<Tensor> inputs;
};

using InstanceFactory = std::function<Instance(Rng&)>;

// Normal entries pushed at least `margin` away from zero, for ops with a kink there.
Tensor away_from_zero(Shape shape, Rng& rng, double margin = 0.05) {
  Tensor t = random_normal(std::move(shape), 1.0, rng);
  for (double& v : t.mutable_data())
    if (std::fabs(v) < margin) v = v < 0 ? v - margin : v + margin;
  return t;
}

// Contracts a tensor-valued result with fixed random weights.
Var weighted(Var y, const Tensor& r) { return sum(mul(y, y.tape()->constant(r))); }

Instance unary(Tensor x, std::function<Var(Var)> op, Rng& rng) {
  Tape probe;
  const Tensor r = random_normal(op(probe.constant(x)).value().shape(), 1.0, rng);
  return Instance{[op, r](Tape&, std::span<const Var> in) { return weighted(op(in[0]), r); }, {std::move(x)}};
}

Instance binary(Tensor a, Tensor b, std::function<Var(Var, Var)> op, Rng& rng) {
  Tape probe;
  const Tensor r = random_normal(op(probe.constant(a), probe.constant(b)).value().shape(), 1.0, rng);
  return Instance{[op, r](Tape&, std::span<const Var> in) { return weighted(op(in[0], in[1]), r); },
                  {std::move(a), std::move(b)}};
}

OpCheckResult check(const std::string& name, double tolerance, std::size_t points, uint64_t seed,
                    const InstanceFactory& factory) {
  OpCheckResult result{name, tolerance, 0.0, 0, true};
  GradCheckOptions opts;
  opts.tolerance = tolerance;
  for (std::size_t p = 0; p < points; ++p) {
    Rng rng(mix_seed(seed, p));
    const Instance inst = factory(rng);
    const GradCheckReport report = check_gradients(inst.f, inst.inputs, opts);
    result.max_relative_error = std::max(result.max_relative_error, report.max_relative_error);
    result.passed = result.passed && report.passed;
    ++result.points;
  }
  return result;
}

uint64_t name_seed(uint64_t seed, const std::string& name) {
  uint64_t h = seed;
  for (char c : name) h = mix_seed(h, static_cast<unsigned char>(c));
  return h;
}

}  // namespace

std::vector<OpCheckResult> run_gradient_suite(uint64_t seed, std::size_t points) {
  std::vector<std::pair<std::string, std::pair<double, InstanceFactory>>> cases;
  auto smooth = [&](std::string name, InstanceFactory f) {
    cases.push_back({std::move(name), {kSmoothOpTolerance, std::move(f)}});
  };
  auto composite = [&](std::string name, InstanceFactory f) {
    cases.push_back({std::move(name), {kCompositeTolerance, std::move(f)}});
  };

  smooth("matmul", [](Rng& rng) {
    return binary(random_normal({3, 4}, 1.0, rng), random_normal({4, 2}, 1.0, rng), matmul, rng);
  });
  smooth("transpose", [](Rng& rng) { return unary(random_normal({3, 4}, 1.0, rng), transpose, rng); });
  smooth("add", [](Rng& rng) { return binary(random_normal({2, 3}, 1.0, rng), random_normal({2, 3}, 1.0, rng), add, rng); });
  smooth("sub", [](Rng& rng) { return binary(random_normal({2, 3}, 1.0, rng), random_normal({2, 3}, 1.0, rng), sub, rng); });
  smooth("mul", [](Rng& rng) { return binary(random_normal({2, 3}, 1.0, rng), random_normal({2, 3}, 1.0, rng), mul, rng); });
  smooth("scale", [](Rng& rng) { return unary(random_normal({2, 3}, 1.0, rng), [](Var x) { return scale(x, -1.7); }, rng); });
  smooth("add_scalar",
         [](Rng& rng) { return unary(random_normal({2, 3}, 1.0, rng), [](Var x) { return add_scalar(x, 0.3); }, rng); });
  smooth("add_rowwise", [](Rng& rng) {
    return binary(random_normal({3, 4}, 1.0, rng), random_normal({1, 4}, 1.0, rng), add_rowwise, rng);
  });
  smooth("softmax_rows",
         [](Rng& rng) { return unary(random_normal({3, 5}, 1.5, rng), [](Var x) { return softmax(x, 1); }, rng); });
  smooth("softmax_cols",
         [](Rng& rng) { return unary(random_normal({4, 3}, 1.5, rng), [](Var x) { return softmax(x, 0); }, rng); });
  smooth("log", [](Rng& rng) { return unary(random_uniform({2, 3}, 0.5, 2.0, rng), [](Var x) { return log(x); }, rng); });
  smooth("pow_scalar", [](Rng& rng) {
    return unary(random_uniform({2, 3}, 0.5, 2.0, rng), [](Var x) { return pow_scalar(x, 2.5); }, rng);
  });
  smooth("concat", [](Rng& rng) {
    return binary(random_normal({2, 3}, 1.0, rng), random_normal({2, 2}, 1.0, rng),
                  [](Var a, Var b) { return concat(a, b, 1); }, rng);
  });
  smooth("slice", [](Rng& rng) { return unary(random_normal({4, 5}, 1.0, rng), [](Var x) { return slice(x, 1, 1, 4); }, rng); });
  smooth("reshape",
         [](Rng& rng) { return unary(random_normal({2, 6}, 1.0, rng), [](Var x) { return reshape(x, {3, 4}); }, rng); });
  smooth("sum", [](Rng& rng) { return unary(random_normal({3, 3}, 1.0, rng), [](Var x) { return sum(x); }, rng); });
  smooth("mean", [](Rng& rng) { return unary(random_normal({3, 3}, 1.0, rng), [](Var x) { return mean(x); }, rng); });
  smooth("mean_rows", [](Rng& rng) { return unary(random_normal({4, 3}, 1.0, rng), mean_rows, rng); });
  smooth("sum_cols", [](Rng& rng) { return unary(random_normal({4, 3}, 1.0, rng), sum_cols, rng); });

  composite("relu", [](Rng& rng) { return unary(away_from_zero({3, 4}, rng), relu, rng); });
  composite("abs", [](Rng& rng) { return unary(away_from_zero({3, 4}, rng), [](Var x) { return abs(x); }, rng); });
  composite("abs_sum", [](Rng& rng) { return unary(away_from_zero({3, 4}, rng), abs_sum, rng); });

  composite("prompt_generator", [](Rng& rng) {
    const std::size_t D = 8, d = 4, L = 4;
    const auto gen = PromptGenerator::random(D, d, L, 1.0, rng);
    Tensor q = random_normal({1, D}, 1.0, rng);
    const Tensor r = random_normal({L, D}, 1.0, rng);
    ScalarFunction f = [r, L](Tape&, std::span<const Var> in) {
      return weighted(generate_prompt(GeneratorVars{in[1], in[2]}, in[0], L).p, r);
    };
    return Instance{f, {q, gen.w1(), gen.w2()}};
  });

  for (int variant = 0; variant < 2; ++variant) {
    const bool projected = variant == 1;
    composite(projected ? "prompted_attention_projected" : "prompted_attention", [projected](Rng& rng) {
      const std::size_t C = 8, M = 2, n = 5, d = 4, L = 4;
      const auto weights = AttentionWeights::random(C, M, 0.5, rng);
      const auto gen = PromptGenerator::random(C, d, L, 1.0, rng);
      Tensor q_o = random_normal({n, C}, 1.0, rng);
      const Tensor r = random_normal({n, C}, 1.0, rng);
      PromptedAttentionOptions opts;
      opts.project_prompt_keys = projected;
      opts.project_prompt_values = projected;
      ScalarFunction f = [weights, r, opts, L](Tape&, std::span<const Var> in) {
        const Prompt prompt = generate_prompt(GeneratorVars{in[1], in[2]}, query_function(in[0]), L);
        return weighted(prompted_attention(weights, in[0], prompt, opts), r);
      };
      return Instance{f, {q_o, gen.w1(), gen.w2()}};
    });
  }

  composite("multi_head_attention", [](Rng& rng) {
    const std::size_t C = 8, M = 2;
    const auto weights = AttentionWeights::random(C, M, 0.5, rng);
    return binary(random_normal({4, C}, 1.0, rng), random_normal({6, C}, 1.0, rng),
                  [weights](Var z, Var x) { return multi_head_attention(weights, z, x); }, rng);
  });

  composite("detection_loss", [](Rng& rng) {
    const std::size_t slots = 4, classes = 3;
    Tensor logits = random_normal({slots, classes + 1}, 1.0, rng);
    Tensor boxes = random_uniform({slots, 4}, 0.2, 0.8, rng);
    std::vector<Target> targets;
    for (int i = 0; i < 2; ++i) {
      // Keep every box coordinate clear of its target so |.| stays smooth.
      Box b{boxes.at(i, 0) + 0.05, boxes.at(i, 1) - 0.05, boxes.at(i, 2) + 0.07, boxes.at(i, 3) - 0.06};
      targets.push_back(Target{static_cast<int>(rng() % classes), b});
    }
    const std::vector<int> assignment = {0, 1, -1, -1};
    ScalarFunction f = [targets, assignment](Tape&, std::span<const Var> in) {
      return detection_loss(in[0], in[1], assignment, targets, 3, LossOptions{});
    };
    return Instance{f, {logits, boxes}};
  });

  composite("sparse_loss", [](Rng& rng) {
    ScalarFunction f = [](Tape&, std::span<const Var> in) {
      const std::vector<Var> params(in.begin(), in.end());
      return sparse_loss(params, 0.1);
    };
    return Instance{f, {away_from_zero({3, 4}, rng), away_from_zero({4, 2}, rng)}};
  });

  std::vector<OpCheckResult> results;
  for (const auto& [name, spec] : cases) results.push_back(check(name, spec.first, points, name_seed(seed, name), spec.second));
  return results;
}

}  // namespace prompt_evolve
