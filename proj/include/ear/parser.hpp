// SPDX-License-Identifier: Apache-2.0
//
// Stage-3 parsing model.
//
// Both modalities are projected to a shared width and temporally encoded;
// each temporal stream then queries the other modality's projected static
// stream (asymmetric fusion). Cross-modal decoders map the fused streams to
// category space, a stack of event-relationship units mixes categories
// within and across modalities, and per-modality classifiers give segment
// probabilities that attentive MIL pooling turns into video probabilities.
#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ear/autodiff.hpp"
#include "ear/error.hpp"
#include "ear/io.hpp"
#include "ear/nn.hpp"
#include "ear/training.hpp"

namespace ear::parser {

using json = nlohmann::json;

enum class Fusion { Amdf, MsaMca, Han };
enum class ErmMode { Interleaved, Stacked, Off };

inline const char* fusion_name(Fusion f) {
  switch (f) {
    case Fusion::Amdf: return "amdf";
    case Fusion::MsaMca: return "msa-mca";
    case Fusion::Han: return "han";
  }
  return "?";
}

inline Fusion parse_fusion(const std::string& s) {
  if (s == "amdf") return Fusion::Amdf;
  if (s == "msa-mca") return Fusion::MsaMca;
  if (s == "han") return Fusion::Han;
  throw ConfigError("unknown fusion '" + s + "' (expected amdf, msa-mca or han)");
}

inline const char* erm_name(ErmMode m) {
  switch (m) {
    case ErmMode::Interleaved: return "interleaved";
    case ErmMode::Stacked: return "stacked";
    case ErmMode::Off: return "off";
  }
  return "?";
}

inline ErmMode parse_erm(const std::string& s) {
  if (s == "interleaved") return ErmMode::Interleaved;
  if (s == "stacked") return ErmMode::Stacked;
  if (s == "off") return ErmMode::Off;
  throw ConfigError("unknown erm mode '" + s + "' (expected interleaved, stacked or off)");
}

struct ParserConfig {
  std::size_t width = 32;
  std::size_t heads = 4;
  std::size_t ffn_expansion = 4;
  std::size_t temporal_depth = 1;
  double dropout = 0.1;
  Fusion fusion = Fusion::Amdf;
  ErmMode erm = ErmMode::Interleaved;
  std::size_t m_layers = 3;
  std::size_t mlp_hidden = 32;  // 0: the decoder MLP is a single affine map
  bool zero_init_classifier = false;
  bool visual_units_read_audio = false;  // visual-side units read the audio stream
  double erm_slope = 0.01;
  bool erm_residual = true;  // F ← F + unit(F), unit BN scale starting at 0

  void validate() const {
    if (width == 0) throw ConfigError("parser: width must be positive");
    if (erm != ErmMode::Off && m_layers == 0) throw ConfigError("parser: relationship modeling needs at least one layer");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("parser: dropout must lie in [0, 1)");
  }
};

inline void to_json(json& j, const ParserConfig& c) {
  j = {{"width", c.width},
       {"heads", c.heads},
       {"ffn_expansion", c.ffn_expansion},
       {"temporal_depth", c.temporal_depth},
       {"dropout", c.dropout},
       {"fusion", fusion_name(c.fusion)},
       {"erm", erm_name(c.erm)},
       {"m_layers", c.m_layers},
       {"mlp_hidden", c.mlp_hidden},
       {"zero_init_classifier", c.zero_init_classifier},
       {"visual_units_read_audio", c.visual_units_read_audio},
       {"erm_slope", c.erm_slope},
       {"erm_residual", c.erm_residual}};
}

inline void from_json(const json& j, ParserConfig& c) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("width", c.width);
  get("heads", c.heads);
  get("ffn_expansion", c.ffn_expansion);
  get("temporal_depth", c.temporal_depth);
  get("dropout", c.dropout);
  if (j.contains("fusion")) c.fusion = parse_fusion(j.at("fusion").get<std::string>());
  if (j.contains("erm")) c.erm = parse_erm(j.at("erm").get<std::string>());
  get("m_layers", c.m_layers);
  get("mlp_hidden", c.mlp_hidden);
  get("zero_init_classifier", c.zero_init_classifier);
  get("visual_units_read_audio", c.visual_units_read_audio);
  get("erm_slope", c.erm_slope);
  get("erm_residual", c.erm_residual);
}

/// Affine map into category space, optionally through one ReLU hidden layer.
struct Mlp {
  nn::Linear fc1, fc2;
  bool hidden = false;

  Mlp() = default;
  Mlp(std::size_t in, std::size_t hidden_dim, std::size_t out, std::mt19937_64& rng) : hidden(hidden_dim > 0) {
    if (hidden) {
      fc1 = nn::Linear(in, hidden_dim, rng);
      fc2 = nn::Linear(hidden_dim, out, rng);
    } else {
      fc1 = nn::Linear(in, out, rng);
    }
  }

  Var operator()(const Var& x) const { return hidden ? fc2(relu(fc1(x))) : fc1(x); }

  void collect(const std::string& prefix, nn::ModuleState& s) const {
    fc1.collect(prefix + ".fc1", s);
    if (hidden) fc2.collect(prefix + ".fc2", s);
  }
};

/// Hybrid attention unit: h = LN(x + MSA(x) + MCA(x, other)); y = LN(h + FFN(h)).
struct HanUnit {
  nn::MultiHeadAttention self_attn, cross_attn;
  nn::LayerNorm norm1, norm2;
  nn::FeedForward ffn;
  double dropout = 0.0;

  HanUnit() = default;
  HanUnit(const nn::AttentionConfig& cfg, std::mt19937_64& rng)
      : self_attn(cfg.dim, cfg.heads, rng),
        cross_attn(cfg.dim, cfg.heads, rng),
        norm1(cfg.dim),
        norm2(cfg.dim),
        ffn(cfg.dim, cfg.dim * cfg.ffn_expansion, cfg.dropout, rng),
        dropout(cfg.dropout) {}

  Var operator()(const Var& x, const Var& other, std::size_t seq_len, const nn::Context& ctx) const {
    Var mixed = add(nn::maybe_dropout(self_attn(x, x, seq_len), dropout, ctx),
                    nn::maybe_dropout(cross_attn(x, other, seq_len), dropout, ctx));
    Var h = norm1(add(x, mixed));
    return norm2(add(h, nn::maybe_dropout(ffn(h, ctx), dropout, ctx)));
  }

  void collect(const std::string& prefix, nn::ModuleState& s) const {
    self_attn.collect(prefix + ".self", s);
    cross_attn.collect(prefix + ".cross", s);
    norm1.collect(prefix + ".norm1", s);
    norm2.collect(prefix + ".norm2", s);
    ffn.collect(prefix + ".ffn", s);
  }
};

struct FusedStreams {
  Var audio_static, visual_static;      // projected F_A, F_V
  Var audio_temporal, visual_temporal;  // F_At, F_Vt
  Var audio, visual;                    // F'_At, F'_Vt
};

struct ParseOutput {
  Var p_a, p_v;    // (B·T)×C segment probabilities
  Var p;           // B×C video probabilities
  Var f_ae, f_ve;  // relation-aware features, (B·T)×C
  std::size_t seq_len = 0;
};

class ParserModel {
 public:
  ParserConfig cfg;
  std::size_t dim_audio = 0, dim_visual = 0, categories = 0;

  nn::Linear proj_a, proj_v;
  nn::TemporalEncoder temporal_a, temporal_v;
  nn::AttentionBlock fuse_a, fuse_v;  // amdf and msa-mca
  HanUnit han_a, han_v;               // han only
  nn::AttentionBlock dec_a, dec_v;
  Mlp mlp_a, mlp_v;
  std::vector<nn::ErmUnit> erm_a, erm_v, erm_av;
  nn::Linear cls_a, cls_v;
  nn::MmilPool pool;

  ParserModel() = default;
  ParserModel(const ParserConfig& c, std::size_t d_audio, std::size_t d_visual, std::size_t num_categories,
              std::uint64_t seed)
      : cfg(c), dim_audio(d_audio), dim_visual(d_visual), categories(num_categories) {
    cfg.validate();
    if (num_categories == 0) throw ConfigError("parser: no categories");
    std::mt19937_64 rng(seed);
    const nn::AttentionConfig att{cfg.width, cfg.heads, cfg.ffn_expansion, cfg.dropout};
    proj_a = nn::Linear(d_audio, cfg.width, rng);
    proj_v = nn::Linear(d_visual, cfg.width, rng);
    if (cfg.fusion == Fusion::Han) {
      han_a = HanUnit(att, rng);
      han_v = HanUnit(att, rng);
    } else {
      temporal_a = nn::TemporalEncoder(cfg.temporal_depth, att, rng);
      temporal_v = nn::TemporalEncoder(cfg.temporal_depth, att, rng);
      fuse_a = nn::AttentionBlock(att, rng);
      fuse_v = nn::AttentionBlock(att, rng);
    }
    dec_a = nn::AttentionBlock(att, rng);
    dec_v = nn::AttentionBlock(att, rng);
    mlp_a = Mlp(cfg.width, cfg.mlp_hidden, categories, rng);
    mlp_v = Mlp(cfg.width, cfg.mlp_hidden, categories, rng);
    if (cfg.erm != ErmMode::Off) {
      for (std::size_t i = 0; i < cfg.m_layers; ++i) {
        erm_a.emplace_back(categories, rng, cfg.erm_slope);
        erm_v.emplace_back(categories, rng, cfg.erm_slope);
        erm_av.emplace_back(2 * categories, rng, cfg.erm_slope);
        if (cfg.erm_residual) {
          erm_a.back().zero_gamma();
          erm_v.back().zero_gamma();
          erm_av.back().zero_gamma();
        }
      }
    }
    cls_a = nn::Linear(categories, categories, rng);
    cls_v = nn::Linear(categories, categories, rng);
    if (cfg.zero_init_classifier) {
      cls_a.zero();
      cls_v.zero();
    }
    pool = nn::MmilPool(categories, categories, rng);
  }

  void collect(nn::ModuleState& s) {
    proj_a.collect("proj_a", s);
    proj_v.collect("proj_v", s);
    if (cfg.fusion == Fusion::Han) {
      han_a.collect("han_a", s);
      han_v.collect("han_v", s);
    } else {
      temporal_a.collect("temporal_a", s);
      temporal_v.collect("temporal_v", s);
      fuse_a.collect("fuse_a", s);
      fuse_v.collect("fuse_v", s);
    }
    dec_a.collect("dec_a", s);
    dec_v.collect("dec_v", s);
    mlp_a.collect("mlp_a", s);
    mlp_v.collect("mlp_v", s);
    for (std::size_t i = 0; i < erm_a.size(); ++i) {
      const std::string k = std::to_string(i);
      erm_a[i].collect("erm" + k + ".a", s);
      erm_v[i].collect("erm" + k + ".v", s);
      erm_av[i].collect("erm" + k + ".av", s);
    }
    cls_a.collect("cls_a", s);
    cls_v.collect("cls_v", s);
    pool.collect("pool", s);
  }

  /// Parameter and buffer handles. Buffers point into this object, so the
  /// state must not outlive it or survive a move.
  nn::ModuleState state() {
    nn::ModuleState s;
    collect(s);
    return s;
  }

  FusedStreams fuse(const Var& f_a, const Var& f_v, std::size_t seq_len, const nn::Context& ctx) const {
    check_inputs(f_a, f_v, seq_len);
    FusedStreams o;
    o.audio_static = proj_a(f_a);
    o.visual_static = proj_v(f_v);
    switch (cfg.fusion) {
      case Fusion::Amdf:
        o.audio_temporal = temporal_a(o.audio_static, seq_len, ctx);
        o.visual_temporal = temporal_v(o.visual_static, seq_len, ctx);
        o.audio = fuse_a.cross(o.audio_temporal, o.visual_static, seq_len, ctx);
        o.visual = fuse_v.cross(o.visual_temporal, o.audio_static, seq_len, ctx);
        break;
      case Fusion::MsaMca:
        o.audio_temporal = temporal_a(o.audio_static, seq_len, ctx);
        o.visual_temporal = temporal_v(o.visual_static, seq_len, ctx);
        o.audio = fuse_a.cross(o.audio_temporal, o.visual_temporal, seq_len, ctx);
        o.visual = fuse_v.cross(o.visual_temporal, o.audio_temporal, seq_len, ctx);
        break;
      case Fusion::Han:
        o.audio_temporal = o.audio_static;
        o.visual_temporal = o.visual_static;
        o.audio = han_a(o.audio_static, o.visual_static, seq_len, ctx);
        o.visual = han_v(o.visual_static, o.audio_static, seq_len, ctx);
        break;
    }
    return o;
  }

  /// F_AV = MLP(MCA(F'_At, F'_Vt)); F_VA = MLP(MCA(F'_Vt, F'_At)).
  std::pair<Var, Var> decode(const Var& fa, const Var& fv, std::size_t seq_len, const nn::Context& ctx) const {
    return {mlp_a(dec_a.cross(fa, fv, seq_len, ctx)), mlp_v(dec_v.cross(fv, fa, seq_len, ctx))};
  }

  /// Relationship stack over category space; [audio | visual] column order
  /// for the joint units.
  std::pair<Var, Var> relate(Var fa, Var fv, std::size_t seq_len, const nn::Context& ctx) {
    if (fa.cols() != categories || fv.cols() != categories) {
      throw ConfigError("erm: adjacency side " + std::to_string(categories) + " does not match inputs " +
                        dims_to_string(fa.dims()) + "/" + dims_to_string(fv.dims()));
    }
    auto apply = [&](nn::ErmUnit& unit, const Var& x) {
      Var y = unit(x, seq_len, ctx);
      return cfg.erm_residual ? add(x, y) : y;
    };
    auto unimodal = [&](std::size_t i) {
      Var a = apply(erm_a[i], fa);
      Var v = apply(erm_v[i], cfg.visual_units_read_audio ? fa : fv);
      fa = a;
      fv = v;
    };
    auto joint = [&](std::size_t i) {
      Var z = apply(erm_av[i], concat_cols({fa, fv}));
      fa = slice_cols(z, 0, categories);
      fv = slice_cols(z, categories, categories);
    };
    switch (cfg.erm) {
      case ErmMode::Interleaved:
        for (std::size_t i = 0; i < erm_a.size(); ++i) {
          unimodal(i);
          joint(i);
        }
        break;
      case ErmMode::Stacked:
        for (std::size_t i = 0; i < erm_a.size(); ++i) unimodal(i);
        for (std::size_t i = 0; i < erm_av.size(); ++i) joint(i);
        break;
      case ErmMode::Off:
        break;
    }
    return {fa, fv};
  }

  ParseOutput forward(const Var& f_a, const Var& f_v, std::size_t seq_len, const nn::Context& ctx) {
    const FusedStreams fused = fuse(f_a, f_v, seq_len, ctx);
    auto [f_av, f_va] = decode(fused.audio, fused.visual, seq_len, ctx);
    auto [f_ae, f_ve] = relate(f_av, f_va, seq_len, ctx);
    ParseOutput o;
    o.f_ae = f_ae;
    o.f_ve = f_ve;
    o.p_a = sigmoid(cls_a(f_ae));
    o.p_v = sigmoid(cls_v(f_ve));
    o.p = pool(o.p_a, o.p_v, f_ae, f_ve, seq_len);
    o.seq_len = seq_len;
    return o;
  }

  json to_json() {
    return {{"format", "ear-model"},   {"kind", "parser"},         {"config", cfg},
            {"dim_audio", dim_audio},  {"dim_visual", dim_visual}, {"categories", categories},
            {"state", train::state_json(state())}};
  }

  static ParserModel from_json(const json& j) {
    if (j.value("kind", "") != "parser") throw FormatError("model file is not a parser");
    ParserModel m(j.at("config").get<ParserConfig>(), j.at("dim_audio").get<std::size_t>(),
                  j.at("dim_visual").get<std::size_t>(), j.at("categories").get<std::size_t>(), 0);
    train::load_state_json(m.state(), j.at("state"));
    return m;
  }

  void save(const std::filesystem::path& path) { io::write_json(path, to_json()); }
  static ParserModel load(const std::filesystem::path& path) { return from_json(io::read_json(path)); }

 private:
  void check_inputs(const Var& f_a, const Var& f_v, std::size_t seq_len) const {
    if (f_a.cols() != dim_audio || f_v.cols() != dim_visual || f_a.rows() != f_v.rows() || seq_len == 0 ||
        f_a.rows() % seq_len != 0) {
      throw ShapeError("parser: features " + dims_to_string(f_a.dims()) + "/" + dims_to_string(f_v.dims()) +
                       " do not fit dims " + std::to_string(dim_audio) + "/" + std::to_string(dim_visual) +
                       " with sequence length " + std::to_string(seq_len));
    }
  }
};

}  // namespace ear::parser
