#include "prompt_evolve/prompting.hpp"

#include <cmath>
#include <limits>

#include "prompt_evolve/errors.hpp"

namespace prompt_evolve {

namespace {

Tensor transposed(const Tensor& t) {
  Tensor out = Tensor::zeros({t.cols(), t.rows()});
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) out.at(j, i) = t.at(i, j);
  return out;
}

// Shared by plain and prompted attention so that the masked prompted variant
// reproduces plain attention bit for bit.
Var attention_core(const AttentionWeights& w, Var query_src, Var key_src, Var value_src, const Prompt* prompt,
                   const PromptedAttentionOptions& options, AttentionTrace* trace) {
  w.validate();
  const std::size_t C = w.model_dim;
  const std::size_t cv = w.head_dim();
  for (Var v : {query_src, key_src, value_src}) {
    if (v.value().rank() != 2 || v.value().cols() != C) {
      throw DimensionError("attention input " + shape_string(v.shape()) + " does not have model dim " +
                           std::to_string(C));
    }
  }
  const std::size_t n_q = query_src.value().rows();
  const std::size_t n_k = key_src.value().rows();
  if (value_src.value().rows() != n_k) throw DimensionError("attention keys and values differ in length");
  std::size_t n_prompt = 0;
  if (prompt) {
    if (prompt->p_k.value().cols() != C || prompt->p_v.value().cols() != C) {
      throw DimensionError("prompt dim " + std::to_string(prompt->p_k.value().cols()) + " != model dim " +
                           std::to_string(C));
    }
    n_prompt = prompt->p_k.value().rows();
  }

  Tape& tape = *query_src.tape();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cv));
  Var out;
  for (std::size_t m = 0; m < w.heads; ++m) {
    const Var ut = tape.constant(transposed(w.query_proj[m]));
    const Var vt = tape.constant(transposed(w.key_proj[m]));
    const Var wvt = tape.constant(transposed(w.value_proj[m]));
    const Var wot = tape.constant(transposed(w.output_proj[m]));

    const Var q = matmul(query_src, ut);
    Var keys = matmul(key_src, vt);
    Var values = matmul(value_src, wvt);
    if (prompt) {
      const Var pk = options.project_prompt_keys ? matmul(prompt->p_k, vt) : slice(prompt->p_k, 1, m * cv, (m + 1) * cv);
      const Var pv =
          options.project_prompt_values ? matmul(prompt->p_v, wvt) : slice(prompt->p_v, 1, m * cv, (m + 1) * cv);
      keys = concat(keys, pk, 0);
      values = concat(values, pv, 0);
    }
    Var logits = scale(matmul(q, transpose(keys)), inv_sqrt);
    if (prompt && options.mask_prompt_keys) {
      Tensor mask = Tensor::zeros({n_q, n_k + n_prompt});
      for (std::size_t i = 0; i < n_q; ++i)
        for (std::size_t j = n_k; j < n_k + n_prompt; ++j) mask.at(i, j) = -std::numeric_limits<double>::infinity();
      logits = add(logits, tape.constant(std::move(mask)));
    }
    const Var attn = softmax(logits, 1);
    const Var head = matmul(matmul(attn, values), wot);
    out = m == 0 ? head : add(out, head);
    if (trace) {
      trace->attention.push_back(attn);
      trace->query_logits.push_back(q);
    }
  }
  return out;
}

}  // namespace

PromptGenerator::PromptGenerator(Tensor w1, Tensor w2, std::size_t prompt_length)
    : w1_(std::move(w1)), w2_(std::move(w2)), prompt_length_(prompt_length) {
  if (prompt_length_ == 0 || prompt_length_ % 2 != 0) {
    throw ConfigError("prompt length must be a positive even number, got " + std::to_string(prompt_length_));
  }
  if (w1_.rank() != 2 || w2_.rank() != 2) throw DimensionError("prompt generator weights must be matrices");
  if (w2_.rows() != w1_.cols()) {
    throw DimensionError("W2 rows " + std::to_string(w2_.rows()) + " != bottleneck dim " + std::to_string(w1_.cols()));
  }
  if (w2_.cols() != w1_.rows() * prompt_length_) {
    throw DimensionError("W2 width " + std::to_string(w2_.cols()) + " != D * L_p = " +
                         std::to_string(w1_.rows() * prompt_length_));
  }
}

PromptGenerator PromptGenerator::random(std::size_t embed_dim, std::size_t hidden_dim, std::size_t prompt_length,
                                        double stddev, Rng& rng) {
  Tensor w1 = random_normal({embed_dim, hidden_dim}, stddev / std::sqrt(static_cast<double>(embed_dim)), rng);
  Tensor w2 = random_normal({hidden_dim, embed_dim * prompt_length},
                            stddev / std::sqrt(static_cast<double>(hidden_dim)), rng);
  return PromptGenerator(std::move(w1), std::move(w2), prompt_length);
}

GeneratorVars constant_vars(Tape& tape, const PromptGenerator& gen) {
  return {tape.constant(gen.w1()), tape.constant(gen.w2())};
}

GeneratorVars variable_vars(Tape& tape, const PromptGenerator& gen) {
  return {tape.variable(gen.w1()), tape.variable(gen.w2())};
}

Prompt Prompt::split(Var p) {
  const std::size_t rows = p.value().rows();
  if (rows % 2 != 0) throw ConfigError("prompt length must be even to split into key/value halves");
  return Prompt{p, slice(p, 0, 0, rows / 2), slice(p, 0, rows / 2, rows)};
}

Var query_function(Var proposals) {
  if (proposals.value().rank() != 2 || proposals.value().rows() == 0) {
    throw DimensionError("query function needs at least one proposal, got " + shape_string(proposals.shape()));
  }
  return mean_rows(proposals);
}

Prompt generate_prompt(GeneratorVars gen, Var query, std::size_t prompt_length) {
  const Tensor& q = query.value();
  const std::size_t D = gen.w1.value().rows();
  if (q.rank() != 2 || q.rows() != 1 || q.cols() != D) {
    throw DimensionError("query " + shape_string(q.shape()) + " does not match generator input dim " +
                         std::to_string(D));
  }
  const Var hidden = relu(matmul(query, gen.w1));
  const Var flat = matmul(hidden, gen.w2);
  return Prompt::split(reshape(flat, {prompt_length, D}));
}

Prompt generate_prompt(Tape& tape, const PromptGenerator& gen, Var query) {
  return generate_prompt(constant_vars(tape, gen), query, gen.prompt_length());
}

void AttentionWeights::validate() const {
  if (heads == 0 || model_dim % heads != 0) {
    throw ConfigError("model dim " + std::to_string(model_dim) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  const std::size_t cv = head_dim();
  if (query_proj.size() != heads || key_proj.size() != heads || value_proj.size() != heads ||
      output_proj.size() != heads) {
    throw ConfigError("attention weights must provide one projection per head");
  }
  for (std::size_t m = 0; m < heads; ++m) {
    for (const Tensor* t : {&query_proj[m], &key_proj[m], &value_proj[m]}) {
      if (t->shape() != Shape{cv, model_dim}) throw DimensionError("head projection must be C_v x C");
    }
    if (output_proj[m].shape() != Shape{model_dim, cv}) throw DimensionError("output projection must be C x C_v");
  }
}

AttentionWeights AttentionWeights::random(std::size_t model_dim, std::size_t heads, double stddev, Rng& rng) {
  AttentionWeights w;
  w.model_dim = model_dim;
  w.heads = heads;
  if (heads == 0 || model_dim % heads != 0) {
    throw ConfigError("model dim " + std::to_string(model_dim) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  const std::size_t cv = model_dim / heads;
  for (std::size_t m = 0; m < heads; ++m) {
    w.query_proj.push_back(random_normal({cv, model_dim}, stddev, rng));
    w.key_proj.push_back(random_normal({cv, model_dim}, stddev, rng));
    w.value_proj.push_back(random_normal({cv, model_dim}, stddev, rng));
    w.output_proj.push_back(random_normal({model_dim, cv}, stddev, rng));
  }
  return w;
}

Var multi_head_attention(const AttentionWeights& weights, Var z_q, Var x, AttentionTrace* trace) {
  return attention_core(weights, z_q, x, x, nullptr, {}, trace);
}

Var prompted_attention(const AttentionWeights& weights, Var q_o, const Prompt& prompt,
                       const PromptedAttentionOptions& options, AttentionTrace* trace) {
  return attention_core(weights, q_o, q_o, q_o, &prompt, options, trace);
}

Tensor sinusoidal_embedding(std::size_t n, std::size_t dim) {
  Tensor pe = Tensor::zeros({n, dim});
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      const double angle = static_cast<double>(pos) * freq;
      pe.at(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

std::vector<double> bilinear_sample(const Tensor& feature_map, Point2 at) {
  if (feature_map.rank() != 3) throw DimensionError("feature map must be C x H x W");
  const std::size_t C = feature_map.dim(0), H = feature_map.dim(1), W = feature_map.dim(2);
  const double x = std::clamp(at.x, 0.0, static_cast<double>(W - 1));
  const double y = std::clamp(at.y, 0.0, static_cast<double>(H - 1));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const std::size_t x1 = std::min(x0 + 1, W - 1);
  const std::size_t y1 = std::min(y0 + 1, H - 1);
  const double fx = x - static_cast<double>(x0);
  const double fy = y - static_cast<double>(y0);
  std::vector<double> out(C);
  const auto data = feature_map.data();
  for (std::size_t c = 0; c < C; ++c) {
    const std::size_t base = c * H * W;
    const double v00 = data[base + y0 * W + x0];
    if (fx == 0.0 && fy == 0.0) {
      out[c] = v00;
      continue;
    }
    const double v01 = data[base + y0 * W + x1];
    const double v10 = data[base + y1 * W + x0];
    const double v11 = data[base + y1 * W + x1];
    out[c] = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
  }
  return out;
}

DeformableProjection DeformableProjection::random(std::size_t model_dim, std::size_t heads, std::size_t points,
                                                  double offset_scale, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(model_dim));
  return DeformableProjection{
      random_normal({model_dim, heads * points * 2}, offset_scale * s, rng),
      random_normal({1, heads * points * 2}, offset_scale, rng),
      random_normal({model_dim, heads * points}, s, rng),
      random_normal({1, heads * points}, 0.1, rng),
  };
}

DeformableSampling project_sampling(const Tensor& z_q, const DeformableProjection& proj, std::size_t heads,
                                    std::size_t points) {
  if (points == 0) throw ConfigError("deformable attention needs at least one sampling point");
  Tape tape;
  const Var z = tape.constant(z_q);
  const Var offsets = add_rowwise(matmul(z, tape.constant(proj.offset_weight)), tape.constant(proj.offset_bias));
  const Var logits = add_rowwise(matmul(z, tape.constant(proj.attention_weight)), tape.constant(proj.attention_bias));
  const std::size_t n_q = z_q.rows();
  // [n_q, M, K] so the softmax runs over the K sampling points of each head.
  const Var attn = softmax(reshape(logits, {n_q, heads, points}), 2);

  DeformableSampling s;
  s.queries = n_q;
  s.heads = heads;
  s.points = points;
  s.offsets.resize(n_q * heads * points);
  s.weights = attn.value().values();
  const Tensor& off = offsets.value();
  for (std::size_t i = 0; i < s.offsets.size(); ++i) s.offsets[i] = Point2{off[2 * i], off[2 * i + 1]};
  return s;
}

Tensor deformable_attention(std::span<const Point2> ref_points, const Tensor& feature_map,
                            const DeformableSampling& sampling, const AttentionWeights& weights) {
  weights.validate();
  if (feature_map.rank() != 3 || feature_map.dim(0) != weights.model_dim) {
    throw DimensionError("feature map " + shape_string(feature_map.shape()) + " does not match model dim");
  }
  if (ref_points.size() != sampling.queries || sampling.heads != weights.heads) {
    throw DimensionError("deformable sampling does not match queries/heads");
  }
  const std::size_t C = weights.model_dim, cv = weights.head_dim();
  Tensor out = Tensor::zeros({sampling.queries, C});
  std::vector<double> pooled(C), projected(cv);
  for (std::size_t q = 0; q < sampling.queries; ++q) {
    for (std::size_t m = 0; m < sampling.heads; ++m) {
      std::fill(pooled.begin(), pooled.end(), 0.0);
      for (std::size_t k = 0; k < sampling.points; ++k) {
        const std::size_t idx = sampling.index(q, m, k);
        const Point2 p{ref_points[q].x + sampling.offsets[idx].x, ref_points[q].y + sampling.offsets[idx].y};
        const auto sample = bilinear_sample(feature_map, p);
        for (std::size_t c = 0; c < C; ++c) pooled[c] += sampling.weights[idx] * sample[c];
      }
      const Tensor& wv = weights.value_proj[m];
      const Tensor& wo = weights.output_proj[m];
      for (std::size_t r = 0; r < cv; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < C; ++c) acc += wv.at(r, c) * pooled[c];
        projected[r] = acc;
      }
      for (std::size_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (std::size_t r = 0; r < cv; ++r) acc += wo.at(c, r) * projected[r];
        out.at(q, c) += acc;
      }
    }
  }
  return out;
}

Tensor deformable_attention(const Tensor& z_q, std::span<const Point2> ref_points, const Tensor& feature_map,
                            const DeformableProjection& proj, const AttentionWeights& weights, std::size_t points) {
  return deformable_attention(ref_points, feature_map, project_sampling(z_q, proj, weights.heads, points), weights);
}

DecoderStack::DecoderStack(std::vector<DecoderLayerWeights> layers, std::vector<PromptGenerator> generators,
                           DecoderOptions options)
    : layers_(std::move(layers)), generators_(std::move(generators)), options_(options) {
  if (options_.use_prompts && generators_.size() != layers_.size()) {
    throw ConfigError("decoder has " + std::to_string(layers_.size()) + " layers but " +
                      std::to_string(generators_.size()) + " prompt generators");
  }
  for (const auto& l : layers_) l.attention.validate();
}

Var DecoderStack::forward(Var q_o, Var query, std::span<const GeneratorVars> gens, DecoderTrace* trace) const {
  if (options_.use_prompts && gens.size() != layers_.size()) {
    throw ConfigError("decoder forward got " + std::to_string(gens.size()) + " generators for " +
                      std::to_string(layers_.size()) + " layers");
  }
  Tape& tape = *q_o.tape();
  Var x = q_o;
  std::optional<Var> pos;
  if (options_.positional_embedding) {
    pos = tape.constant(sinusoidal_embedding(q_o.value().rows(), q_o.value().cols()));
  }
  for (std::size_t j = 0; j < layers_.size(); ++j) {
    const auto& layer = layers_[j];
    const Var qk = pos ? add(x, *pos) : x;
    AttentionTrace* attn_trace = nullptr;
    if (trace) attn_trace = &trace->attention.emplace_back();
    Var attn;
    if (options_.use_prompts) {
      const Prompt prompt = generate_prompt(gens[j], query, generators_[j].prompt_length());
      if (trace) trace->prompts.push_back(prompt.p.value());
      attn = attention_core(layer.attention, qk, qk, x, &prompt, options_.attention, attn_trace);
    } else {
      attn = attention_core(layer.attention, qk, qk, x, nullptr, options_.attention, attn_trace);
    }
    const Var h = add(x, attn);
    const Var ff = matmul(relu(matmul(h, tape.constant(layer.ffn_in))), tape.constant(layer.ffn_out));
    x = add(h, ff);
  }
  return x;
}

Var DecoderStack::forward(Tape& tape, Var q_o, Var query, DecoderTrace* trace) const {
  std::vector<GeneratorVars> gens;
  if (options_.use_prompts) {
    for (const auto& g : generators_) gens.push_back(constant_vars(tape, g));
  }
  return forward(q_o, query, gens, trace);
}

DecoderLayerWeights random_decoder_layer(std::size_t model_dim, std::size_t heads, std::size_t ffn_dim, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(model_dim));
  DecoderLayerWeights layer{AttentionWeights::random(model_dim, heads, s, rng), {}, {}};
  layer.ffn_in = random_normal({model_dim, ffn_dim}, s, rng);
  layer.ffn_out = random_normal({ffn_dim, model_dim}, 0.5 / std::sqrt(static_cast<double>(ffn_dim)), rng);
  return layer;
}

DecoderStack build_decoder_stack(std::size_t layer_count, std::size_t model_dim, std::size_t heads,
                                 std::size_t ffn_dim, std::vector<PromptGenerator> generators,
                                 DecoderOptions options, Rng& rng) {
  if (options.use_prompts && generators.size() != layer_count) {
    throw ConfigError("build_decoder_stack: " + std::to_string(generators.size()) + " generators for " +
                      std::to_string(layer_count) + " layers");
  }
  std::vector<DecoderLayerWeights> layers;
  layers.reserve(layer_count);
  for (std::size_t j = 0; j < layer_count; ++j) layers.push_back(random_decoder_layer(model_dim, heads, ffn_dim, rng));
  return DecoderStack(std::move(layers), std::move(generators), options);
}

}  // namespace prompt_evolve
