// SPDX-License-Identifier: Apache-2.0
//
// Temporal-aware pseudo-label generator.
//
// Each modality runs its segment features through a self-attention stack and
// scores the result against frozen text-label features (dynamic
// probabilities); the raw features scored the same way give static
// probabilities. Audio-visual probabilities pair the dynamic stream of one
// modality with the static stream of the other. After pre-training on a
// corpus with audio-visual segment labels, the frozen generator emits soft
// uni-modal pseudo-labels for a weakly labeled corpus.
#pragma once

#include <cmath>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "ear/autodiff.hpp"
#include "ear/error.hpp"
#include "ear/io.hpp"
#include "ear/migration.hpp"
#include "ear/nn.hpp"
#include "ear/training.hpp"

namespace ear::generator {

using json = nlohmann::json;
using migration::Modality;

struct GeneratorConfig {
  std::size_t width = 32;  // shared attention width per modality
  std::size_t depth = 2;   // L_g
  std::size_t heads = 4;
  std::size_t ffn_expansion = 4;
  double dropout = 0.1;
  double lambda_a = 0.05;
  double lambda_v = 0.15;
  double mu_a = migration::kDefaultMuAudio;
  double mu_v = migration::kDefaultMuVisual;
  bool per_video_migration = false;
  double theta_a = 0.5;
  double theta_v = 0.5;

  void validate() const {
    if (!(lambda_a >= 0.0) || !(lambda_v >= 0.0)) {
      throw ConfigError("generator: loss weights must be nonnegative, got lambda_a=" + std::to_string(lambda_a) +
                        " lambda_v=" + std::to_string(lambda_v));
    }
    for (double mu : {mu_a, mu_v})
      if (!(mu >= 0.0 && mu <= 1.0)) throw ConfigError("generator: migration thresholds must lie in [0, 1]");
    for (double th : {theta_a, theta_v})
      if (!(th > 0.0 && th < 1.0)) throw ConfigError("generator: pseudo-label thresholds must lie in (0, 1)");
    if (depth == 0 || width == 0) throw ConfigError("generator: depth and width must be positive");
  }
};

inline void to_json(json& j, const GeneratorConfig& c) {
  j = {{"width", c.width},     {"depth", c.depth},         {"heads", c.heads},
       {"ffn_expansion", c.ffn_expansion}, {"dropout", c.dropout}, {"lambda_a", c.lambda_a},
       {"lambda_v", c.lambda_v}, {"mu_a", c.mu_a},         {"mu_v", c.mu_v},
       {"per_video_migration", c.per_video_migration}, {"theta_a", c.theta_a}, {"theta_v", c.theta_v}};
}

inline void from_json(const json& j, GeneratorConfig& c) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("width", c.width);
  get("depth", c.depth);
  get("heads", c.heads);
  get("ffn_expansion", c.ffn_expansion);
  get("dropout", c.dropout);
  get("lambda_a", c.lambda_a);
  get("lambda_v", c.lambda_v);
  get("mu_a", c.mu_a);
  get("mu_v", c.mu_v);
  get("per_video_migration", c.per_video_migration);
  get("theta_a", c.theta_a);
  get("theta_v", c.theta_v);
}

/// Input projection, temporal stack, and output projection into text space.
/// A bridge maps raw features into text space for the static stream when the
/// two dims differ.
struct Branch {
  nn::Linear in_proj;
  nn::TemporalEncoder encoder;
  nn::Linear out_proj;
  std::optional<nn::Linear> bridge;

  Branch() = default;
  Branch(std::size_t feature_dim, std::size_t text_dim, const GeneratorConfig& cfg, std::mt19937_64& rng)
      : in_proj(feature_dim, cfg.width, rng),
        encoder(cfg.depth, {cfg.width, cfg.heads, cfg.ffn_expansion, cfg.dropout}, rng),
        out_proj(cfg.width, text_dim, rng) {
    if (feature_dim != text_dim) bridge.emplace(feature_dim, text_dim, rng);
  }

  void collect(const std::string& prefix, nn::ModuleState& s) const {
    in_proj.collect(prefix + ".in_proj", s);
    encoder.collect(prefix + ".encoder", s);
    out_proj.collect(prefix + ".out_proj", s);
    if (bridge) bridge->collect(prefix + ".bridge", s);
  }
};

struct GeneratorOutput {
  Var p_at, p_vt;    // dynamic
  Var p_a, p_v;      // static
  Var p_av1, p_av2;  // P_Vt ⊙ P_A and P_At ⊙ P_V
};

/// P_AV1 = P_Vt ⊙ P_A; P_AV2 = P_At ⊙ P_V.
inline std::pair<Var, Var> av_probs(const Var& p_at, const Var& p_vt, const Var& p_a, const Var& p_v) {
  if (p_at.dims() != p_vt.dims() || p_at.dims() != p_a.dims() || p_at.dims() != p_v.dims()) {
    throw ShapeError("av_probs: " + dims_to_string(p_at.dims()) + ", " + dims_to_string(p_vt.dims()) + ", " +
                     dims_to_string(p_a.dims()) + ", " + dims_to_string(p_v.dims()));
  }
  return {mul(p_vt, p_a), mul(p_at, p_v)};
}

struct PretrainTerms {
  Var total;
  double av1 = 0, av2 = 0, audio = 0, visual = 0;
};

/// BCE(P_AV1, Y_AV) + BCE(P_AV2, Y_AV) + λ_A·BCE(P_At, Y_As) + λ_V·BCE(P_Vt, Y_Vs).
inline PretrainTerms pretrain_loss(const Var& p_av1, const Var& p_av2, const Var& p_at, const Var& p_vt,
                                   const Tensor& y_av, const Tensor& y_as, const Tensor& y_vs, double lambda_a,
                                   double lambda_v) {
  if (!(lambda_a >= 0.0) || !(lambda_v >= 0.0)) {
    throw ConfigError("pretrain_loss: loss weights must be nonnegative, got lambda_a=" + std::to_string(lambda_a) +
                      " lambda_v=" + std::to_string(lambda_v));
  }
  Var l1 = bce(p_av1, y_av), l2 = bce(p_av2, y_av);
  Var la = bce(p_at, y_as), lv = bce(p_vt, y_vs);
  PretrainTerms t;
  t.total = add(add(l1, l2), add(scale(la, lambda_a), scale(lv, lambda_v)));
  t.av1 = l1.value()[0];
  t.av2 = l2.value()[0];
  t.audio = la.value()[0];
  t.visual = lv.value()[0];
  return t;
}

/// P̂ = sigmoid(P_t − θ) ⊙ Y, with Y a 1×C video label broadcast over rows.
inline Tensor emit_pseudo_labels(const Tensor& p_t, double theta, const Tensor& y) {
  if (y.size() != p_t.cols()) {
    throw ShapeError("emit_pseudo_labels: probabilities " + dims_to_string(p_t.dims()) + " vs video label " +
                     dims_to_string(y.dims()));
  }
  Tensor out(p_t.dims());
  for (std::size_t t = 0; t < p_t.rows(); ++t)
    for (std::size_t c = 0; c < p_t.cols(); ++c)
      out(t, c) = y[c] != 0.0 ? detail::sigmoid_scalar(p_t(t, c) - theta) * y[c] : 0.0;
  return out;
}

class GeneratorModel {
 public:
  GeneratorConfig cfg;
  std::size_t dim_audio = 0, dim_visual = 0;
  Branch audio, visual;

  GeneratorModel() = default;
  GeneratorModel(const GeneratorConfig& c, std::size_t d_audio, std::size_t d_visual, Tensor text_audio,
                 Tensor text_visual, std::uint64_t seed)
      : cfg(c), dim_audio(d_audio), dim_visual(d_visual) {
    cfg.validate();
    if (text_audio.rows() != text_visual.rows()) {
      throw ShapeError("generator: text features disagree on the category count: " + dims_to_string(text_audio.dims()) +
                       " vs " + dims_to_string(text_visual.dims()));
    }
    std::mt19937_64 rng(seed);
    audio = Branch(d_audio, text_audio.cols(), cfg, rng);
    visual = Branch(d_visual, text_visual.cols(), cfg, rng);
    text_audio_ = std::move(text_audio);
    text_visual_ = std::move(text_visual);
  }

  const Tensor& text(Modality m) const { return m == Modality::Audio ? text_audio_ : text_visual_; }
  std::size_t num_categories() const { return text_audio_.rows(); }

  /// Swaps in text features for another category set; model weights are
  /// category-agnostic.
  void set_text(Tensor text_audio, Tensor text_visual) {
    if (text_audio.cols() != text_audio_.cols() || text_visual.cols() != text_visual_.cols() ||
        text_audio.rows() != text_visual.rows()) {
      throw ShapeError("generator: replacement text features " + dims_to_string(text_audio.dims()) + "/" +
                       dims_to_string(text_visual.dims()) + " do not fit text dims " + std::to_string(text_audio_.cols()) +
                       "/" + std::to_string(text_visual_.cols()));
    }
    text_audio_ = std::move(text_audio);
    text_visual_ = std::move(text_visual);
  }

  void collect(nn::ModuleState& s) const {
    audio.collect("audio", s);
    visual.collect("visual", s);
  }

  nn::ModuleState state() const {
    nn::ModuleState s;
    collect(s);
    return s;
  }

  /// sigmoid(Stack(G_m) · G_Tmᵀ) over stacked sequences of seq_len rows.
  Var dynamic_probs(const Var& g, Modality m, std::size_t seq_len, const nn::Context& ctx) const {
    const Branch& b = branch(m);
    check_input(g, m);
    Var h = b.out_proj(b.encoder(b.in_proj(g), seq_len, ctx));
    return sigmoid(matmul_nt(h, constant(text(m))));
  }

  /// sigmoid(G_m · G_Tmᵀ), row by row.
  Var static_probs(const Var& g, Modality m) const {
    const Branch& b = branch(m);
    check_input(g, m);
    Var x = b.bridge ? (*b.bridge)(g) : g;
    return sigmoid(matmul_nt(x, constant(text(m))));
  }

  GeneratorOutput forward(const Var& g_a, const Var& g_v, std::size_t seq_len, const nn::Context& ctx) const {
    GeneratorOutput o;
    o.p_at = dynamic_probs(g_a, Modality::Audio, seq_len, ctx);
    o.p_vt = dynamic_probs(g_v, Modality::Visual, seq_len, ctx);
    o.p_a = static_probs(g_a, Modality::Audio);
    o.p_v = static_probs(g_v, Modality::Visual);
    std::tie(o.p_av1, o.p_av2) = av_probs(o.p_at, o.p_vt, o.p_a, o.p_v);
    return o;
  }

  json to_json() const {
    return {{"format", "ear-model"},
            {"kind", "generator"},
            {"config", cfg},
            {"dim_audio", dim_audio},
            {"dim_visual", dim_visual},
            {"text_audio", train::tensor_json(text_audio_)},
            {"text_visual", train::tensor_json(text_visual_)},
            {"state", train::state_json(state())}};
  }

  static GeneratorModel from_json(const json& j) {
    if (j.value("kind", "") != "generator") throw FormatError("model file is not a generator");
    GeneratorModel m(j.at("config").get<GeneratorConfig>(), j.at("dim_audio").get<std::size_t>(),
                     j.at("dim_visual").get<std::size_t>(), train::tensor_from_json(j.at("text_audio")),
                     train::tensor_from_json(j.at("text_visual")), 0);
    train::load_state_json(m.state(), j.at("state"));
    return m;
  }

  void save(const std::filesystem::path& path) const { io::write_json(path, to_json()); }
  static GeneratorModel load(const std::filesystem::path& path) { return from_json(io::read_json(path)); }

 private:
  Tensor text_audio_, text_visual_;

  const Branch& branch(Modality m) const { return m == Modality::Audio ? audio : visual; }

  void check_input(const Var& g, Modality m) const {
    const std::size_t want = m == Modality::Audio ? dim_audio : dim_visual;
    if (g.cols() != want) {
      throw ShapeError(std::string("generator: ") + (m == Modality::Audio ? "audio" : "visual") + " features " +
                       dims_to_string(g.dims()) + " do not match feature dim " + std::to_string(want));
    }
  }
};

// ---------------------------------------------------------------------------
// Batching and pre-training

struct StackedBatch {
  Tensor audio, visual;  // (B·T)×D_m
  Tensor y_av;           // (B·T)×C
  std::vector<std::size_t> video;  // per-row batch-local video index
  std::size_t seq_len = 0;
};

inline StackedBatch stack_videos(const io::Corpus& corpus, std::span<const std::size_t> idx, bool with_av = true) {
  if (idx.empty()) throw ContractError("stack_videos: empty batch");
  StackedBatch b;
  b.seq_len = corpus.videos[idx[0]].segments;
  std::vector<Tensor> a, v, y;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto& rec = corpus.videos[idx[k]];
    if (rec.segments != b.seq_len) {
      throw ShapeError("batch mixes video lengths " + std::to_string(b.seq_len) + " and " + std::to_string(rec.segments) +
                       " (video " + rec.id + ")");
    }
    a.push_back(rec.audio);
    v.push_back(rec.visual);
    if (with_av) y.push_back(rec.av_ground_truth());
    for (std::size_t t = 0; t < rec.segments; ++t) b.video.push_back(k);
  }
  b.audio = concat_rows(a);
  b.visual = concat_rows(v);
  if (with_av) b.y_av = concat_rows(y);
  return b;
}

struct MigratedTargets {
  Tensor y_as, y_vs;
};

inline MigratedTargets migrate_targets(const StackedBatch& b, const GeneratorConfig& cfg) {
  migration::SegmentBatch sa{b.audio, b.y_av, Modality::Audio, b.video};
  migration::SegmentBatch sv{b.visual, b.y_av, Modality::Visual, b.video};
  return {migration::migrate_batch(sa, cfg.mu_a, cfg.per_video_migration).labels,
          migration::migrate_batch(sv, cfg.mu_v, cfg.per_video_migration).labels};
}

struct PretrainResult {
  GeneratorModel model;
  train::History history;
};

inline train::LossTerms pretrain_batch_loss(const GeneratorModel& model, const StackedBatch& b,
                                            const MigratedTargets& targets, const nn::Context& ctx) {
  const auto o = model.forward(constant(b.audio), constant(b.visual), b.seq_len, ctx);
  const auto t = pretrain_loss(o.p_av1, o.p_av2, o.p_at, o.p_vt, b.y_av, targets.y_as, targets.y_vs,
                               model.cfg.lambda_a, model.cfg.lambda_v);
  return {t.total, {{"av1", t.av1}, {"av2", t.av2}, {"audio", t.audio}, {"visual", t.visual}}};
}

/// Pre-trains on a corpus with audio-visual segment labels. Text features
/// come from the corpus and stay frozen.
inline PretrainResult pretrain(const io::Corpus& corpus, const GeneratorConfig& cfg, const train::TrainConfig& tcfg,
                               const train::FitOptions& opts = {}) {
  cfg.validate();
  if (!corpus.text_audio || !corpus.text_visual) throw IngestionError("pretrain: corpus has no text features");
  GeneratorModel model(cfg, corpus.dim_audio, corpus.dim_visual, *corpus.text_audio, *corpus.text_visual, tcfg.seed);
  nn::ModuleState state = model.state();
  auto loss = [&](std::span<const std::size_t> idx, const nn::Context& ctx) {
    const StackedBatch b = stack_videos(corpus, idx);
    return pretrain_batch_loss(model, b, migrate_targets(b, cfg), ctx);
  };
  PretrainResult r{model, {}};
  r.history = train::fit(state, corpus.videos.size(), tcfg, loss, opts);
  r.model = model;
  return r;
}

/// Dynamic probabilities of every video in eval mode, chunked.
inline std::vector<std::pair<Tensor, Tensor>> dynamic_probs_all(const GeneratorModel& model, const io::Corpus& corpus,
                                                                std::size_t chunk = 64) {
  std::vector<std::pair<Tensor, Tensor>> out;
  std::vector<std::size_t> idx;
  auto flush = [&] {
    if (idx.empty()) return;
    const StackedBatch b = stack_videos(corpus, idx, false);
    const Tensor pa = model.dynamic_probs(constant(b.audio), Modality::Audio, b.seq_len, nn::Context::eval()).value();
    const Tensor pv = model.dynamic_probs(constant(b.visual), Modality::Visual, b.seq_len, nn::Context::eval()).value();
    for (std::size_t k = 0; k < idx.size(); ++k) out.emplace_back(pa.row_slice(k * b.seq_len, b.seq_len), pv.row_slice(k * b.seq_len, b.seq_len));
    idx.clear();
  };
  for (std::size_t i = 0; i < corpus.videos.size(); ++i) {
    if (!idx.empty() && (idx.size() == chunk || corpus.videos[i].segments != corpus.videos[idx[0]].segments)) flush();
    idx.push_back(i);
  }
  flush();
  return out;
}

/// Soft uni-modal pseudo-labels for a weakly labeled corpus. The corpus'
/// own text features replace the pre-training ones when present.
inline io::LabelSet generate_pseudo_labels(GeneratorModel model, const io::Corpus& corpus) {
  if (corpus.text_audio && corpus.text_visual) model.set_text(*corpus.text_audio, *corpus.text_visual);
  if (model.num_categories() != corpus.num_categories()) {
    throw ShapeError("genlabels: generator scores " + std::to_string(model.num_categories()) + " categories, corpus has " +
                     std::to_string(corpus.num_categories()));
  }
  const auto probs = dynamic_probs_all(model, corpus);
  io::LabelSet s{"pseudo", corpus.categories, {}};
  for (std::size_t i = 0; i < corpus.videos.size(); ++i) {
    const auto& v = corpus.videos[i];
    s.videos.push_back({v.id, emit_pseudo_labels(probs[i].first, model.cfg.theta_a, v.labels),
                        emit_pseudo_labels(probs[i].second, model.cfg.theta_v, v.labels)});
  }
  return s;
}

}  // namespace ear::generator
