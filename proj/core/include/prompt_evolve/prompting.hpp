#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "prompt_evolve/autodiff.hpp"
#include "prompt_evolve/random.hpp"
#include "prompt_evolve/tensor.hpp"

namespace prompt_evolve {

// Two-layer MLP bottleneck: prompt = ReLU(query * W1) * W2, reshaped to
// prompt_length x embed_dim.
class PromptGenerator {
 public:
  PromptGenerator(Tensor w1, Tensor w2, std::size_t prompt_length);

  static PromptGenerator random(std::size_t embed_dim, std::size_t hidden_dim, std::size_t prompt_length,
                                double stddev, Rng& rng);

  const Tensor& w1() const { return w1_; }
  const Tensor& w2() const { return w2_; }
  std::size_t embed_dim() const { return w1_.rows(); }
  std::size_t hidden_dim() const { return w1_.cols(); }
  std::size_t prompt_length() const { return prompt_length_; }
  std::size_t parameter_count() const { return w1_.size() + w2_.size(); }

 private:
  Tensor w1_;  // D x d
  Tensor w2_;  // d x (D * L_p)
  std::size_t prompt_length_;
};

// Tape handles for one generator's weights.
struct GeneratorVars {
  Var w1;
  Var w2;
};

GeneratorVars constant_vars(Tape& tape, const PromptGenerator& gen);
GeneratorVars variable_vars(Tape& tape, const PromptGenerator& gen);

// p [L_p x D] split row-wise into key half p_k and value half p_v.
struct Prompt {
  Var p;
  Var p_k;
  Var p_v;

  static Prompt split(Var p);
};

// Mean over the N proposal rows: [N x D] -> [1 x D].
Var query_function(Var proposals);

Prompt generate_prompt(GeneratorVars gen, Var query, std::size_t prompt_length);
Prompt generate_prompt(Tape& tape, const PromptGenerator& gen, Var query);

// Per-head projections. U, V, W' are [C_v x C]; W is [C x C_v]; C_v = C / M.
struct AttentionWeights {
  std::size_t model_dim = 0;
  std::size_t heads = 0;
  std::vector<Tensor> query_proj;   // U_m
  std::vector<Tensor> key_proj;     // V_m
  std::vector<Tensor> value_proj;   // W'_m
  std::vector<Tensor> output_proj;  // W_m

  std::size_t head_dim() const { return model_dim / heads; }
  void validate() const;

  static AttentionWeights random(std::size_t model_dim, std::size_t heads, double stddev, Rng& rng);
};

struct PromptedAttentionOptions {
  // Pass prompt keys through V_m instead of using each head's column slice
  // of p_k directly as a projected key.
  bool project_prompt_keys = false;
  // Same choice for p_v and W'_m.
  bool project_prompt_values = false;
  // Force prompt-key logits to -inf; the layer then reduces to plain MHA.
  bool mask_prompt_keys = false;
};

// Optional per-head observations collected during a forward pass.
struct AttentionTrace {
  std::vector<Var> attention;      // [n_q x n_keys] softmax rows
  std::vector<Var> query_logits;   // [n_q x C_v] query-side U projection
};

// sum_m W_m [ sum_k softmax_k((z U_m^T)(V_m x_k) / sqrt(C_v)) W'_m x_k ].
Var multi_head_attention(const AttentionWeights& weights, Var z_q, Var x, AttentionTrace* trace = nullptr);

// Self-attention over q_o with prompt keys/values appended on the key side;
// the query projection and the output length n_q are unchanged.
Var prompted_attention(const AttentionWeights& weights, Var q_o, const Prompt& prompt,
                       const PromptedAttentionOptions& options = {}, AttentionTrace* trace = nullptr);

// Standard sin/cos table, [n x dim].
Tensor sinusoidal_embedding(std::size_t n, std::size_t dim);

// ---------------------------------------------------------------------------
// Deformable attention (reference evaluator, values only).

struct Point2 {
  double x = 0.0;  // column coordinate, pixels
  double y = 0.0;  // row coordinate, pixels
};

// Bilinear sample of a [C x H x W] map at (x, y); coordinates outside the map
// are clamped to its border.
std::vector<double> bilinear_sample(const Tensor& feature_map, Point2 at);

// Sampling offsets and normalized attention weights for every
// (query, head, point); offsets in pixels.
struct DeformableSampling {
  std::size_t queries = 0;
  std::size_t heads = 0;
  std::size_t points = 0;
  std::vector<Point2> offsets;   // index ((q * heads) + m) * points + k
  std::vector<double> weights;   // same indexing, sums to 1 over k

  std::size_t index(std::size_t q, std::size_t m, std::size_t k) const { return (q * heads + m) * points + k; }
};

// Linear projections of z_q producing offsets and attention logits.
struct DeformableProjection {
  Tensor offset_weight;     // C x (M * K * 2)
  Tensor offset_bias;       // 1 x (M * K * 2)
  Tensor attention_weight;  // C x (M * K)
  Tensor attention_bias;    // 1 x (M * K)

  static DeformableProjection random(std::size_t model_dim, std::size_t heads, std::size_t points,
                                     double offset_scale, Rng& rng);
};

DeformableSampling project_sampling(const Tensor& z_q, const DeformableProjection& proj, std::size_t heads,
                                    std::size_t points);

Tensor deformable_attention(std::span<const Point2> ref_points, const Tensor& feature_map,
                            const DeformableSampling& sampling, const AttentionWeights& weights);

Tensor deformable_attention(const Tensor& z_q, std::span<const Point2> ref_points, const Tensor& feature_map,
                            const DeformableProjection& proj, const AttentionWeights& weights, std::size_t points);

// ---------------------------------------------------------------------------
// Decoder stack: prompted self-attention + two-layer feed-forward, both with
// residual connections. Layer j consumes layer j-1's output and injects its
// own prompt.

struct DecoderLayerWeights {
  AttentionWeights attention;
  Tensor ffn_in;   // C x F
  Tensor ffn_out;  // F x C
};

struct DecoderOptions {
  PromptedAttentionOptions attention;
  bool use_prompts = true;
  bool positional_embedding = false;
};

struct DecoderTrace {
  std::vector<Tensor> prompts;  // per layer, [L_p x D]
  std::vector<AttentionTrace> attention;
};

class DecoderStack {
 public:
  DecoderStack(std::vector<DecoderLayerWeights> layers, std::vector<PromptGenerator> generators,
               DecoderOptions options);

  std::size_t layer_count() const { return layers_.size(); }
  const std::vector<DecoderLayerWeights>& layers() const { return layers_; }
  const std::vector<PromptGenerator>& generators() const { return generators_; }
  std::vector<PromptGenerator>& generators() { return generators_; }
  const DecoderOptions& options() const { return options_; }

  // `gens` supplies per-layer generator weights already on the tape.
  Var forward(Var q_o, Var query, std::span<const GeneratorVars> gens, DecoderTrace* trace = nullptr) const;
  // Uses the stack's own generators as constants.
  Var forward(Tape& tape, Var q_o, Var query, DecoderTrace* trace = nullptr) const;

 private:
  std::vector<DecoderLayerWeights> layers_;
  std::vector<PromptGenerator> generators_;
  DecoderOptions options_;
};

DecoderLayerWeights random_decoder_layer(std::size_t model_dim, std::size_t heads, std::size_t ffn_dim, Rng& rng);

// Throws ConfigError when the generator count differs from layer_count.
DecoderStack build_decoder_stack(std::size_t layer_count, std::size_t model_dim, std::size_t heads,
                                 std::size_t ffn_dim, std::vector<PromptGenerator> generators,
                                 DecoderOptions options, Rng& rng);

}  // namespace prompt_evolve
