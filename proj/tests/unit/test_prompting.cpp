#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "prompt_evolve/errors.hpp"
#include "prompt_evolve/prompting.hpp"

using namespace prompt_evolve;

namespace {

// Loop-level prompted self-attention: keys/values are the projected queries
// followed by each head's column slice of the prompt halves.
Tensor prompted_attention_loops(const AttentionWeights& w, const Tensor& x, const Tensor& pk, const Tensor& pv) {
  const std::size_t n = x.rows(), C = w.model_dim, cv = w.head_dim(), L = pk.rows();
  Tensor out = Tensor::zeros({n, C});
  for (std::size_t m = 0; m < w.heads; ++m) {
    const Tensor q = oracle::matmul(x, [&] {
      Tensor t = Tensor::zeros({C, cv});
      for (std::size_t r = 0; r < cv; ++r)
        for (std::size_t c = 0; c < C; ++c) t.at(c, r) = w.query_proj[m].at(r, c);
      return t;
    }());
    std::vector<std::vector<double>> keys, values;
    for (std::size_t j = 0; j < n; ++j) {
      std::vector<double> k(cv, 0.0), v(cv, 0.0);
      for (std::size_t r = 0; r < cv; ++r)
        for (std::size_t c = 0; c < C; ++c) {
          k[r] += w.key_proj[m].at(r, c) * x.at(j, c);
          v[r] += w.value_proj[m].at(r, c) * x.at(j, c);
        }
      keys.push_back(k);
      values.push_back(v);
    }
    for (std::size_t j = 0; j < L; ++j) {
      std::vector<double> k(cv), v(cv);
      for (std::size_t r = 0; r < cv; ++r) {
        k[r] = pk.at(j, m * cv + r);
        v[r] = pv.at(j, m * cv + r);
      }
      keys.push_back(k);
      values.push_back(v);
    }
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> logits(keys.size());
      double mx = -INFINITY;
      for (std::size_t j = 0; j < keys.size(); ++j) {
        double s = 0.0;
        for (std::size_t r = 0; r < cv; ++r) s += q.at(i, r) * keys[j][r];
        logits[j] = s / std::sqrt(static_cast<double>(cv));
        mx = std::max(mx, logits[j]);
      }
      double z = 0.0;
      for (double& l : logits) z += (l = std::exp(l - mx));
      std::vector<double> mixed(cv, 0.0);
      for (std::size_t j = 0; j < keys.size(); ++j)
        for (std::size_t r = 0; r < cv; ++r) mixed[r] += logits[j] / z * values[j][r];
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t r = 0; r < cv; ++r) out.at(i, c) += w.output_proj[m].at(c, r) * mixed[r];
    }
  }
  return out;
}

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

Tensor random_map(std::size_t C, std::size_t H, std::size_t W, Rng& rng) {
  return random_normal({C, H, W}, 1.0, rng);
}

}  // namespace

TEST(PromptGenerator, ShapesFollowBottleneck) {
  Rng rng(1);
  const auto gen = PromptGenerator::random(16, 4, 6, 1.0, rng);
  EXPECT_EQ(gen.parameter_count(), 16u * 4 + 4u * 16 * 6);
  Tape tape;
  const Prompt p = generate_prompt(tape, gen, tape.constant(random_normal({1, 16}, 1.0, rng)));
  EXPECT_EQ(p.p.shape(), (Shape{6, 16}));
  EXPECT_EQ(p.p_k.shape(), (Shape{3, 16}));
  EXPECT_EQ(p.p_v.shape(), (Shape{3, 16}));
}

TEST(PromptGenerator, OddLengthRejected) {
  Rng rng(2);
  EXPECT_THROW(PromptGenerator::random(8, 2, 3, 1.0, rng), ConfigError);
  EXPECT_THROW(PromptGenerator::random(8, 2, 0, 1.0, rng), ConfigError);
}

TEST(PromptGenerator, MatchesReluBottleneckByHand) {
  const Tensor w1 = Tensor::matrix({{1, -1}, {0, 2}});
  const Tensor w2 = Tensor::matrix({{1, 0, 0, 1}, {2, 1, -1, 0}});
  const PromptGenerator gen(w1, w2, 2);
  Tape tape;
  // hidden = relu([1, 1] W1) = relu([1, 1]) = [1, 1]; flat = [3, 1, -1, 1].
  const Prompt p = generate_prompt(tape, gen, tape.constant(Tensor::matrix({{1, 1}})));
  EXPECT_EQ(p.p.value(), Tensor::matrix({{3, 1}, {-1, 1}}));
  EXPECT_EQ(p.p_k.value(), Tensor::matrix({{3, 1}}));
  EXPECT_EQ(p.p_v.value(), Tensor::matrix({{-1, 1}}));
}

TEST(QueryFunction, IsMeanOfProposals) {
  Tape tape;
  const Var q = query_function(tape.constant(Tensor::matrix({{1, 2}, {3, 6}})));
  EXPECT_EQ(q.value(), Tensor::matrix({{2, 4}}));
  EXPECT_THROW(query_function(tape.constant(Tensor::zeros({0, 2}))), DimensionError);
}

TEST(PromptedAttention, MatchesLoopReference) {
  Rng rng(3);
  const auto w = AttentionWeights::random(8, 2, 0.5, rng);
  const Tensor x = random_normal({5, 8}, 1.0, rng);
  const Tensor p = random_normal({6, 8}, 1.0, rng);
  Tape tape;
  const Prompt prompt = Prompt::split(tape.constant(p));
  const Tensor got = prompted_attention(w, tape.constant(x), prompt).value();
  const Tensor ref = prompted_attention_loops(w, x, prompt.p_k.value(), prompt.p_v.value());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], ref[i], 1e-12);
}

TEST(PromptedAttention, MaskedPromptsReduceToPlainAttentionBitwise) {
  Rng rng(4);
  const auto w = AttentionWeights::random(8, 4, 0.5, rng);
  const Tensor x = random_normal({7, 8}, 1.0, rng);
  Tape tape;
  const Var q = tape.constant(x);
  PromptedAttentionOptions opts;
  opts.mask_prompt_keys = true;
  const Prompt prompt = Prompt::split(tape.constant(random_normal({4, 8}, 3.0, rng)));
  const Tensor masked = prompted_attention(w, q, prompt, opts).value();
  EXPECT_EQ(masked, multi_head_attention(w, q, q).value());
}

TEST(PromptedAttention, ZeroPromptStillTakesAttentionMass) {
  Rng rng(5);
  const auto w = AttentionWeights::random(8, 2, 0.5, rng);
  Tape tape;
  const Var q = tape.constant(random_normal({3, 8}, 1.0, rng));
  const Prompt zero = Prompt::split(tape.constant(Tensor::zeros({4, 8})));
  const Tensor prompted = prompted_attention(w, q, zero).value();
  EXPECT_NE(prompted, multi_head_attention(w, q, q).value());
}

TEST(PromptedAttention, RowCountAndSoftmaxRows) {
  Rng rng(6);
  const auto w = AttentionWeights::random(8, 2, 0.5, rng);
  for (std::size_t n : {1, 3, 17})
    for (std::size_t L : {2, 8}) {
      Tape tape;
      AttentionTrace trace;
      const Prompt prompt = Prompt::split(tape.constant(random_normal({L, 8}, 1.0, rng)));
      const Var out = prompted_attention(w, tape.constant(random_normal({n, 8}, 1.0, rng)), prompt, {}, &trace);
      EXPECT_EQ(out.value().rows(), n);
      ASSERT_EQ(trace.attention.size(), 2u);
      for (const Var& a : trace.attention) {
        EXPECT_EQ(a.value().cols(), n + L / 2);
        for (std::size_t r = 0; r < n; ++r) {
          double s = 0.0;
          for (std::size_t c = 0; c < a.value().cols(); ++c) s += a.value().at(r, c);
          EXPECT_NEAR(s, 1.0, 1e-12);
        }
      }
    }
}

TEST(PromptedAttention, QueryLogitsDoNotDependOnPrompt) {
  Rng rng(7);
  const auto w = AttentionWeights::random(8, 2, 0.5, rng);
  const auto gen = PromptGenerator::random(8, 4, 4, 1.0, rng);
  for (bool projected : {false, true}) {
    Tape tape;
    const GeneratorVars vars = variable_vars(tape, gen);
    const Var q_o = tape.constant(random_normal({5, 8}, 1.0, rng));
    AttentionTrace trace;
    PromptedAttentionOptions opts;
    opts.project_prompt_keys = opts.project_prompt_values = projected;
    prompted_attention(w, q_o, generate_prompt(vars, query_function(q_o), 4), opts, &trace);
    tape.backward(sum(trace.query_logits[0]));
    EXPECT_EQ(tape.grad(vars.w1), Tensor::zeros(gen.w1().shape()));
    EXPECT_EQ(tape.grad(vars.w2), Tensor::zeros(gen.w2().shape()));
  }
}

TEST(PromptedAttention, PromptDimMismatchThrows) {
  Rng rng(8);
  const auto w = AttentionWeights::random(8, 2, 0.5, rng);
  Tape tape;
  const Prompt prompt = Prompt::split(tape.constant(Tensor::zeros({2, 6})));
  EXPECT_THROW(prompted_attention(w, tape.constant(Tensor::zeros({3, 8})), prompt), DimensionError);
  EXPECT_THROW(AttentionWeights::random(10, 4, 0.5, rng), ConfigError);
}

TEST(Deformable, BilinearMatchesReference) {
  Rng rng(9);
  const Tensor map = random_map(3, 5, 6, rng);
  for (int trial = 0; trial < 50; ++trial) {
    const Point2 p{uniform(rng, -1.0, 7.0), uniform(rng, -1.0, 6.0)};
    const auto got = bilinear_sample(map, p);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(got[c], oracle::bilinear(map, c, p.x, p.y), 1e-12);
  }
}

TEST(Deformable, IntegerPointsWithZeroOffsetAreDirectLookups) {
  Rng rng(10);
  const Tensor map = random_map(2, 4, 4, rng);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) {
      const auto got = bilinear_sample(map, Point2{static_cast<double>(x), static_cast<double>(y)});
      for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(got[c], map.data()[(c * 4 + y) * 4 + x]);
    }
}

TEST(Deformable, MatchesNestedLoopReference) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t M = 2, K = 3, C = 4, H = 5, W = 6, nq = 3;
    const auto w = AttentionWeights::random(C, M, 0.7, rng);
    const Tensor map = random_map(C, H, W, rng);
    const Tensor z = random_normal({nq, C}, 1.0, rng);
    const auto proj = DeformableProjection::random(C, M, K, 2.0, rng);
    std::vector<Point2> refs;
    std::vector<double> rx, ry;
    for (std::size_t q = 0; q < nq; ++q) {
      refs.push_back({uniform(rng, 0.0, W - 1.0), uniform(rng, 0.0, H - 1.0)});
      rx.push_back(refs.back().x);
      ry.push_back(refs.back().y);
    }
    const DeformableSampling s = project_sampling(z, proj, M, K);
    std::vector<double> ox, oy;
    for (const Point2& o : s.offsets) {
      ox.push_back(o.x);
      oy.push_back(o.y);
    }
    const Tensor got = deformable_attention(z, refs, map, proj, w, K);
    const Tensor ref = oracle::deformable(rx, ry, map, ox, oy, s.weights, M, K, w.value_proj, w.output_proj);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], ref[i], 1e-10);
  }
}

TEST(Deformable, SamplingWeightsNormalizePerHead) {
  Rng rng(12);
  const auto proj = DeformableProjection::random(8, 4, 3, 1.0, rng);
  const DeformableSampling s = project_sampling(random_normal({5, 8}, 1.0, rng), proj, 4, 3);
  for (std::size_t q = 0; q < 5; ++q)
    for (std::size_t m = 0; m < 4; ++m) {
      double total = 0.0;
      for (std::size_t k = 0; k < 3; ++k) total += s.weights[s.index(q, m, k)];
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  EXPECT_THROW(project_sampling(random_normal({1, 8}, 1.0, rng), proj, 4, 0), ConfigError);
}

TEST(Decoder, EachLayerUsesItsOwnPrompt) {
  Rng rng(13);
  std::vector<PromptGenerator> gens;
  for (int j = 0; j < 3; ++j) gens.push_back(PromptGenerator::random(8, 4, 4, 1.0, rng));
  const DecoderStack stack = build_decoder_stack(3, 8, 2, 16, gens, DecoderOptions{}, rng);
  Tape tape;
  const Var q_o = tape.constant(random_normal({6, 8}, 1.0, rng));
  DecoderTrace trace;
  const Var out = stack.forward(tape, q_o, query_function(q_o), &trace);
  EXPECT_EQ(out.value().rows(), 6u);
  ASSERT_EQ(trace.prompts.size(), 3u);
  EXPECT_NE(trace.prompts[0], trace.prompts[1]);
  EXPECT_NE(trace.prompts[1], trace.prompts[2]);
  EXPECT_THROW(build_decoder_stack(2, 8, 2, 16, gens, DecoderOptions{}, rng), ConfigError);
}

TEST(Decoder, PromptsOffIgnoresGenerators) {
  Rng rng(14);
  DecoderOptions opts;
  opts.use_prompts = false;
  const DecoderStack stack = build_decoder_stack(2, 8, 2, 16, {}, opts, rng);
  Tape tape;
  const Var q_o = tape.constant(random_normal({4, 8}, 1.0, rng));
  EXPECT_EQ(stack.forward(tape, q_o, query_function(q_o)).value().rows(), 4u);
}

TEST(SinusoidalEmbedding, FirstRowAlternatesZeroOne) {
  const Tensor pe = sinusoidal_embedding(3, 4);
  EXPECT_EQ(pe.at(0, 0), 0.0);
  EXPECT_EQ(pe.at(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(pe.at(1, 0), std::sin(1.0));
}
