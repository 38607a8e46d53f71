// SPDX-License-Identifier: Apache-2.0
//
// Trainable building blocks. Every block operates on stacked sequences: a
// (B·T)×D matrix holding B sequences of seq_len = T rows each. Attention,
// temporal convolution and pooling never mix rows of different sequences.
#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "ear/autodiff.hpp"
#include "ear/error.hpp"
#include "ear/tensor.hpp"

namespace ear::nn {

struct ParameterRef {
  std::string name;
  Var var;
};

struct BufferRef {
  std::string name;
  Tensor* tensor;
};

/// Flat view over a model's trainable parameters and non-trainable buffers,
/// in a stable order. Names are dotted paths, e.g. "audio.layer0.attn.q.weight".
struct ModuleState {
  std::vector<ParameterRef> params;
  std::vector<BufferRef> buffers;

  void param(const std::string& name, const Var& v) { params.push_back({name, v}); }
  void buffer(const std::string& name, Tensor& t) { buffers.push_back({name, &t}); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.var.size();
    return n;
  }
  void zero_grad() const {
    for (const auto& p : params) p.var.zero_grad();
  }
};

/// Per-call forward settings. Dropout only applies in training with an rng.
struct Context {
  bool training = false;
  std::mt19937_64* rng = nullptr;

  static Context eval() { return {}; }
  static Context train(std::mt19937_64& rng) { return {true, &rng}; }
};

inline Tensor xavier_uniform(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor w = Tensor::matrix(in, out);
  for (auto& v : w.values()) v = dist(rng);
  return w;
}

inline Var maybe_dropout(const Var& x, double p, const Context& ctx) {
  if (!ctx.training || !ctx.rng || p <= 0.0) return x;
  return dropout(x, p, *ctx.rng);
}

struct Linear {
  Var weight;  // in×out
  Var bias;    // 1×out, absent when constructed without bias

  Linear() = default;
  Linear(std::size_t in, std::size_t out, std::mt19937_64& rng, bool with_bias = true)
      : weight(parameter(xavier_uniform(in, out, rng))) {
    if (with_bias) bias = parameter(Tensor::matrix(1, out));
  }

  std::size_t in_features() const { return weight.rows(); }
  std::size_t out_features() const { return weight.cols(); }

  Var operator()(const Var& x) const {
    if (x.cols() != weight.rows()) {
      throw ShapeError("linear: input " + dims_to_string(x.dims()) + " vs weight " + dims_to_string(weight.dims()));
    }
    Var y = matmul(x, weight);
    return bias ? add_row(y, bias) : y;
  }

  void zero() const {
    for (auto& v : weight.mutable_value().values()) v = 0.0;
    if (bias)
      for (auto& v : bias.mutable_value().values()) v = 0.0;
  }

  void collect(const std::string& prefix, ModuleState& s) const {
    s.param(prefix + ".weight", weight);
    if (bias) s.param(prefix + ".bias", bias);
  }
};

struct LayerNorm {
  Var gain;
  Var bias;
  double eps = 1e-5;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim) : gain(parameter(Tensor::matrix(1, dim, 1.0))), bias(parameter(Tensor::matrix(1, dim))) {}

  Var operator()(const Var& x) const { return layer_norm(x, gain, bias, eps); }

  void collect(const std::string& prefix, ModuleState& s) const {
    s.param(prefix + ".gain", gain);
    s.param(prefix + ".bias", bias);
  }
};

/// Position-wise Linear → ReLU → dropout → Linear.
struct FeedForward {
  Linear fc1;
  Linear fc2;
  double dropout = 0.0;

  FeedForward() = default;
  FeedForward(std::size_t dim, std::size_t hidden, double dropout_p, std::mt19937_64& rng)
      : fc1(dim, hidden, rng), fc2(hidden, dim, rng), dropout(dropout_p) {}

  Var operator()(const Var& x, const Context& ctx) const {
    return fc2(maybe_dropout(relu(fc1(x)), dropout, ctx));
  }

  void collect(const std::string& prefix, ModuleState& s) const {
    fc1.collect(prefix + ".fc1", s);
    fc2.collect(prefix + ".fc2", s);
  }
};

/// Multi-head attention without residual or normalization: the query stream
/// attends to the key/value stream of the same sequence.
struct MultiHeadAttention {
  Linear q, k, v, o;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t dim, std::size_t num_heads, std::mt19937_64& rng)
      : q(dim, dim, rng), k(dim, dim, rng), v(dim, dim, rng), o(dim, dim, rng), heads(num_heads) {
    if (num_heads == 0 || dim % num_heads != 0) {
      throw ConfigError("attention: model width " + std::to_string(dim) + " is not divisible by " +
                        std::to_string(num_heads) + " heads");
    }
  }

  std::size_t dim() const { return q.in_features(); }

  Var operator()(const Var& query, const Var& key_value, std::size_t seq_len) const {
    if (query.dims() != key_value.dims()) {
      throw ShapeError("cross-attention: query " + dims_to_string(query.dims()) + " vs key/value " +
                       dims_to_string(key_value.dims()));
    }
    return o(scaled_dot_attention(q(query), k(key_value), v(key_value), heads, seq_len));
  }

  std::vector<Tensor> weights(const Var& query, const Var& key_value, std::size_t seq_len) const {
    return attention_weights(q(query).value(), k(key_value).value(), heads, seq_len);
  }

  void collect(const std::string& prefix, ModuleState& s) const {
    q.collect(prefix + ".q", s);
    k.collect(prefix + ".k", s);
    v.collect(prefix + ".v", s);
    o.collect(prefix + ".o", s);
  }
};

struct AttentionConfig {
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t ffn_expansion = 4;
  double dropout = 0.1;
};

/// Post-norm encoder unit: h = LN(q + MHA(q, kv)); y = LN(h + FFN(h)).
/// With kv == q this is the self-attention (MSA) + FFN block, otherwise the
/// cross-attention (MCA) + FFN block.
struct AttentionBlock {
  MultiHeadAttention attn;
  LayerNorm norm1, norm2;
  FeedForward ffn;
  double dropout = 0.0;

  AttentionBlock() = default;
  AttentionBlock(const AttentionConfig& cfg, std::mt19937_64& rng)
      : attn(cfg.dim, cfg.heads, rng),
        norm1(cfg.dim),
        norm2(cfg.dim),
        ffn(cfg.dim, cfg.dim * cfg.ffn_expansion, cfg.dropout, rng),
        dropout(cfg.dropout) {}

  Var cross(const Var& query, const Var& key_value, std::size_t seq_len, const Context& ctx) const {
    Var h = norm1(add(query, maybe_dropout(attn(query, key_value, seq_len), dropout, ctx)));
    return norm2(add(h, maybe_dropout(ffn(h, ctx), dropout, ctx)));
  }

  Var self(const Var& x, std::size_t seq_len, const Context& ctx) const { return cross(x, x, seq_len, ctx); }

  void collect(const std::string& prefix, ModuleState& s) const {
    attn.collect(prefix + ".attn", s);
    norm1.collect(prefix + ".norm1", s);
    norm2.collect(prefix + ".norm2", s);
    ffn.collect(prefix + ".ffn", s);
  }
};

/// Stack of self-attention blocks.
struct TemporalEncoder {
  std::vector<AttentionBlock> layers;

  TemporalEncoder() = default;
  TemporalEncoder(std::size_t depth, const AttentionConfig& cfg, std::mt19937_64& rng) {
    for (std::size_t i = 0; i < depth; ++i) layers.emplace_back(cfg, rng);
  }

  Var operator()(Var x, std::size_t seq_len, const Context& ctx) const {
    for (const auto& l : layers) x = l.self(x, seq_len, ctx);
    return x;
  }

  void collect(const std::string& prefix, ModuleState& s) const {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(prefix + ".layer" + std::to_string(i), s);
  }
};

/// Event relationship unit: y = LeakyReLU(BN(Conv_T(x) · A)).
///
/// Conv_T is a same-padded temporal convolution of kernel 3 over the rows of
/// each sequence mixing all K channels; A is a learnable K×K adjacency over
/// event categories applied on the right.
struct ErmUnit {
  static constexpr std::size_t kKernel = 3;

  std::vector<Var> conv;  // kKernel taps, each K×K; tap i reads row t + i - 1
  Var conv_bias;          // 1×K
  Var adjacency;          // K×K
  Var gamma, beta;        // 1×K
  BatchNormState bn;
  double slope = 0.01;

  ErmUnit() = default;
  ErmUnit(std::size_t side, std::mt19937_64& rng, double negative_slope = 0.01) : slope(negative_slope) {
    // Near-identity start: a deep stack of these units otherwise scrambles
    // the category axis before training has a chance to shape it.
    std::normal_distribution<double> noise(0.0, 0.01);
    for (std::size_t i = 0; i < kKernel; ++i) {
      Tensor w = i == 1 ? Tensor::identity(side) : Tensor::matrix(side, side);
      for (auto& v : w.values()) v += noise(rng);
      conv.push_back(parameter(std::move(w)));
    }
    conv_bias = parameter(Tensor::matrix(1, side));
    Tensor a = Tensor::identity(side);
    for (auto& v : a.values()) v += noise(rng);
    adjacency = parameter(std::move(a));
    gamma = parameter(Tensor::matrix(1, side, 1.0));
    beta = parameter(Tensor::matrix(1, side));
    bn.running_mean = Tensor::matrix(1, side);
    bn.running_var = Tensor::matrix(1, side, 1.0);
  }

  std::size_t side() const { return adjacency.rows(); }

  /// Silences the unit's output at start-up; used when it sits on a skip path.
  void zero_gamma() { gamma.mutable_value() = Tensor::matrix(1, side()); }

  /// Identity convolution (center tap = I, others 0, zero bias).
  void set_identity_conv() {
    const std::size_t k = side();
    for (std::size_t i = 0; i < kKernel; ++i) conv[i].mutable_value() = i == 1 ? Tensor::identity(k) : Tensor::matrix(k, k);
    conv_bias.mutable_value() = Tensor::matrix(1, k);
  }

  Var operator()(const Var& x, std::size_t seq_len, const Context& ctx) {
    if (x.cols() != side()) {
      throw ConfigError("erm unit: adjacency side " + std::to_string(side()) + " does not match input " +
                        dims_to_string(x.dims()));
    }
    Var acc = add_row(matmul(x, conv[1]), conv_bias);
    acc = add(acc, matmul(shift_rows(x, -1, seq_len), conv[0]));
    acc = add(acc, matmul(shift_rows(x, +1, seq_len), conv[2]));
    Var mixed = matmul(acc, adjacency);
    return leaky_relu(batch_norm(mixed, gamma, beta, bn, ctx.training), slope);
  }

  void collect(const std::string& prefix, ModuleState& s) {
    for (std::size_t i = 0; i < conv.size(); ++i) s.param(prefix + ".conv" + std::to_string(i), conv[i]);
    s.param(prefix + ".conv_bias", conv_bias);
    s.param(prefix + ".adjacency", adjacency);
    s.param(prefix + ".bn.gamma", gamma);
    s.param(prefix + ".bn.beta", beta);
    s.buffer(prefix + ".bn.running_mean", bn.running_mean);
    s.buffer(prefix + ".bn.running_var", bn.running_var);
  }
};

struct MmilWeights {
  Tensor temporal_audio, temporal_visual;  // softmax over time per (sequence, category)
  Tensor modal_audio, modal_visual;        // softmax over {audio, visual} per (segment, category)
};

/// Attentive multi-modal multiple-instance pooling.
///
/// Temporal and modality attention logits come from linear maps of the
/// segment features shared by both modalities. The joint weight of
/// (t, m, c) is w_temporal·w_modal, renormalized over (t, m) so the
/// video probability is a convex combination of segment probabilities.
struct MmilPool {
  Linear temporal;
  Linear modal;

  MmilPool() = default;
  MmilPool(std::size_t feature_dim, std::size_t categories, std::mt19937_64& rng)
      : temporal(feature_dim, categories, rng), modal(feature_dim, categories, rng) {}

  Var operator()(const Var& p_a, const Var& p_v, const Var& f_a, const Var& f_v, std::size_t seq_len) const {
    check(p_a, p_v, f_a, f_v);
    Var wt_a = sequence_softmax(temporal(f_a), seq_len);
    Var wt_v = sequence_softmax(temporal(f_v), seq_len);
    Var la = modal(f_a), lv = modal(f_v);
    Var wm_a = sigmoid(sub(la, lv));
    Var wm_v = sigmoid(sub(lv, la));
    Var u_a = mul(wt_a, wm_a);
    Var u_v = mul(wt_v, wm_v);
    Var num = sequence_sum(add(mul(u_a, p_a), mul(u_v, p_v)), seq_len);
    Var den = sequence_sum(add(u_a, u_v), seq_len);
    return div(num, den);
  }

  MmilWeights weights(const Var& f_a, const Var& f_v, std::size_t seq_len) const {
    Var la = modal(f_a), lv = modal(f_v);
    return {sequence_softmax(temporal(f_a), seq_len).value(), sequence_softmax(temporal(f_v), seq_len).value(),
            sigmoid(sub(la, lv)).value(), sigmoid(sub(lv, la)).value()};
  }

  void collect(const std::string& prefix, ModuleState& s) const {
    temporal.collect(prefix + ".temporal", s);
    modal.collect(prefix + ".modal", s);
  }

 private:
  void check(const Var& p_a, const Var& p_v, const Var& f_a, const Var& f_v) const {
    if (p_a.dims() != p_v.dims() || f_a.dims() != f_v.dims() || p_a.rows() != f_a.rows() ||
        p_a.cols() != temporal.out_features() || f_a.cols() != temporal.in_features()) {
      throw ShapeError("mmil_pool: probabilities " + dims_to_string(p_a.dims()) + "/" + dims_to_string(p_v.dims()) +
                       ", features " + dims_to_string(f_a.dims()) + "/" + dims_to_string(f_v.dims()));
    }
  }
};

}  // namespace ear::nn
