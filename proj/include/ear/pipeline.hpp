// SPDX-License-Identifier: Apache-2.0
//
// Stage-3 training, corpus-wide parsing, and evaluation glue shared by the
// CLI, the ablation runner, and the acceptance checks.
#pragma once

#include <algorithm>
#include <chrono>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ear/generator.hpp"
#include "ear/io.hpp"
#include "ear/losses.hpp"
#include "ear/metrics.hpp"
#include "ear/parser.hpp"
#include "ear/training.hpp"

namespace ear::pipeline {

using json = nlohmann::json;

struct ParserBatch {
  Tensor audio, visual;  // (B·T)×D_m
  losses::Targets targets;
  std::size_t seq_len = 0;
};

/// Stacks features, pseudo-labels, and video labels for a batch of videos.
inline ParserBatch parser_batch(const io::Corpus& corpus, std::span<const std::size_t> idx) {
  const generator::StackedBatch b = generator::stack_videos(corpus, idx, false);
  ParserBatch out{b.audio, b.visual, {}, b.seq_len};
  std::vector<Tensor> pa, pv, y;
  for (std::size_t i : idx) {
    const auto& v = corpus.videos[i];
    if (!v.pseudo_audio || !v.pseudo_visual) throw IngestionError("video " + v.id + " has no pseudo-labels");
    pa.push_back(*v.pseudo_audio);
    pv.push_back(*v.pseudo_visual);
    y.push_back(v.labels);
  }
  out.targets = {concat_rows(pa), concat_rows(pv), concat_rows(y)};
  return out;
}

inline std::vector<Tensor> pseudo_tensors(const io::Corpus& corpus, bool audio) {
  std::vector<Tensor> out;
  for (const auto& v : corpus.videos) {
    const auto& t = audio ? v.pseudo_audio : v.pseudo_visual;
    if (!t) throw IngestionError("video " + v.id + " has no pseudo-labels");
    out.push_back(*t);
  }
  return out;
}

struct ParserTrainResult {
  parser::ParserModel model;
  train::History history;
  losses::BalanceWeights weights;
};

/// Trains the parser on a corpus carrying pseudo-labels. Balance weights are
/// computed once over the whole corpus before the first step.
inline ParserTrainResult train_parser(const io::Corpus& corpus, const parser::ParserConfig& pcfg,
                                      const losses::LossConfig& lcfg, const train::TrainConfig& tcfg,
                                      const train::FitOptions& opts = {}) {
  lcfg.validate();
  ParserTrainResult r;
  r.weights = losses::compute_balance_weights(pseudo_tensors(corpus, true), pseudo_tensors(corpus, false),
                                              lcfg.balance_scale);
  r.model = parser::ParserModel(pcfg, corpus.dim_audio, corpus.dim_visual, corpus.num_categories(), tcfg.seed);
  nn::ModuleState state = r.model.state();
  auto loss = [&](std::span<const std::size_t> idx, const nn::Context& ctx) {
    const ParserBatch b = parser_batch(corpus, idx);
    const auto out = r.model.forward(constant(b.audio), constant(b.visual), b.seq_len, ctx);
    return losses::total_loss(out, r.model, b.targets, r.weights, lcfg, ctx.rng);
  };
  r.history = train::fit(state, corpus.videos.size(), tcfg, loss, opts);
  return r;
}

struct VideoProbabilities {
  std::string id;
  Tensor audio, visual;  // T×C
  Tensor video;          // 1×C
};

/// Eval-mode parse of every video, chunked by equal length.
inline std::vector<VideoProbabilities> parse_corpus(parser::ParserModel& model, const io::Corpus& corpus,
                                                    std::size_t chunk = 64) {
  std::vector<VideoProbabilities> out;
  std::vector<std::size_t> idx;
  auto flush = [&] {
    if (idx.empty()) return;
    const auto b = generator::stack_videos(corpus, idx, false);
    const auto o = model.forward(constant(b.audio), constant(b.visual), b.seq_len, nn::Context::eval());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      out.push_back({corpus.videos[idx[k]].id, o.p_a.value().row_slice(k * b.seq_len, b.seq_len),
                     o.p_v.value().row_slice(k * b.seq_len, b.seq_len), o.p.value().row_slice(k, 1)});
    }
    idx.clear();
  };
  for (std::size_t i = 0; i < corpus.videos.size(); ++i) {
    if (!idx.empty() && (idx.size() == chunk || corpus.videos[i].segments != corpus.videos[idx[0]].segments)) flush();
    idx.push_back(i);
  }
  flush();
  return out;
}

/// Segment probabilities as a "prediction" label set.
inline io::LabelSet predictions(const std::vector<VideoProbabilities>& probs, const std::vector<std::string>& categories) {
  io::LabelSet s{"prediction", categories, {}};
  for (const auto& p : probs) s.videos.push_back({p.id, p.audio, p.visual});
  return s;
}

inline std::vector<metrics::VideoAnnotation> annotations(const io::LabelSet& s, double tau) {
  std::vector<metrics::VideoAnnotation> out;
  for (const auto& v : s.videos) out.push_back({v.id, metrics::binarize({v.audio, v.visual}, tau)});
  return out;
}

/// Binarizes predictions at τ (ground truth is already binary) and scores them.
inline metrics::MetricsReport evaluate(const io::LabelSet& pred, const io::LabelSet& gt, double tau = 0.5,
                                       const metrics::EvalOptions& opt = {}) {
  if (pred.categories != gt.categories) throw AlignmentError("prediction and ground-truth category lists differ");
  return metrics::evaluate_corpus(annotations(pred, tau), annotations(gt, 0.5), opt);
}

inline json level_json(const metrics::LevelScores& l) {
  return {{"audio", l.audio}, {"visual", l.visual}, {"audio_visual", l.audio_visual}, {"type", l.type}, {"event", l.event}};
}

inline json report_json(const metrics::MetricsReport& r) {
  return {{"segment", level_json(r.segment)}, {"event", level_json(r.event)}, {"average", r.average}, {"videos", r.videos}};
}

}  // namespace ear::pipeline

// Found by argument-dependent lookup, so they live beside EvalOptions.
namespace ear::metrics {

inline void to_json(nlohmann::json& j, const EvalOptions& o) {
  j = {{"iou_min", o.iou_min},
       {"matching", o.matching == Matching::Greedy ? "greedy" : "optimal"},
       {"averaging", o.averaging == Averaging::Macro ? "macro" : "micro"}};
}

inline void from_json(const nlohmann::json& j, EvalOptions& o) {
  if (j.contains("iou_min")) j.at("iou_min").get_to(o.iou_min);
  if (j.contains("matching")) {
    const auto m = j.at("matching").get<std::string>();
    if (m != "greedy" && m != "optimal") throw ConfigError("eval: matching must be greedy or optimal, got " + m);
    o.matching = m == "greedy" ? Matching::Greedy : Matching::Optimal;
  }
  if (j.contains("averaging")) {
    const auto a = j.at("averaging").get<std::string>();
    if (a != "macro" && a != "micro") throw ConfigError("eval: averaging must be macro or micro, got " + a);
    o.averaging = a == "macro" ? Averaging::Macro : Averaging::Micro;
  }
}

}  // namespace ear::metrics

namespace ear::pipeline {

/// Every knob of a synthetic three-stage run.
struct PipelineConfig {
  io::SyntheticSpec synthetic;
  generator::GeneratorConfig generator;
  parser::ParserConfig parser;
  losses::LossConfig loss;
  train::TrainConfig pretrain = train::desk_generator_preset();
  train::TrainConfig train = train::desk_parser_preset();
  double tau = 0.5;
  metrics::EvalOptions eval;
};

inline void to_json(json& j, const PipelineConfig& c) {
  j = {{"synthetic", c.synthetic}, {"generator", c.generator}, {"parser", c.parser}, {"loss", c.loss},
       {"pretrain", c.pretrain},   {"train", c.train},         {"tau", c.tau},       {"eval", c.eval}};
}

inline void from_json(const json& j, PipelineConfig& c) {
  static const char* known[] = {"synthetic", "generator", "parser", "loss", "pretrain", "train", "tau", "eval"};
  for (const auto& [key, _] : j.items())
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) == std::end(known))
      throw ConfigError("pipeline config: unknown key " + key);
  if (j.contains("synthetic")) j.at("synthetic").get_to(c.synthetic);
  if (j.contains("generator")) j.at("generator").get_to(c.generator);
  if (j.contains("parser")) j.at("parser").get_to(c.parser);
  if (j.contains("loss")) j.at("loss").get_to(c.loss);
  if (j.contains("pretrain")) j.at("pretrain").get_to(c.pretrain);
  if (j.contains("train")) j.at("train").get_to(c.train);
  if (j.contains("tau")) j.at("tau").get_to(c.tau);
  if (j.contains("eval")) j.at("eval").get_to(c.eval);
}

/// Deep-merges `patch` into `base` (objects recursively, everything else replaced).
inline void merge_json(json& base, const json& patch) {
  if (!patch.is_object() || !base.is_object()) {
    base = patch;
    return;
  }
  for (const auto& [k, v] : patch.items()) {
    if (base.contains(k)) merge_json(base[k], v);
    else base[k] = v;
  }
}

struct PipelineResult {
  metrics::MetricsReport pseudo;  // generator labels vs train ground truth
  metrics::MetricsReport parser;  // stage-3 predictions vs test ground truth
  double seconds = 0.0;
};

inline json result_json(const PipelineResult& r) {
  return {{"pseudo_labels", report_json(r.pseudo)}, {"parser", report_json(r.parser)}, {"seconds", r.seconds}};
}

/// Stage 1–2: pre-trains the generator on the pre-training split and labels
/// the training split. Seeds come from the config.
inline io::LabelSet pseudo_stage(const io::SyntheticCorpus& corpus, const PipelineConfig& cfg) {
  const auto gen = generator::pretrain(corpus.pretrain, cfg.generator, cfg.pretrain);
  return generator::generate_pseudo_labels(gen.model, corpus.train);
}

/// Stage 3 plus scoring of both the pseudo-labels and the parser.
inline PipelineResult parser_stage(io::SyntheticCorpus& corpus, const io::LabelSet& pseudo, const PipelineConfig& cfg) {
  io::attach_pseudo_labels(corpus.train, pseudo);
  PipelineResult r;
  r.pseudo = evaluate(pseudo, io::ground_truth_labels(corpus.train), cfg.tau, cfg.eval);
  auto trained = train_parser(corpus.train, cfg.parser, cfg.loss, cfg.train);
  const auto probs = parse_corpus(trained.model, corpus.test);
  r.parser = evaluate(predictions(probs, corpus.test.categories), io::ground_truth_labels(corpus.test), cfg.tau, cfg.eval);
  return r;
}

inline PipelineConfig seeded(PipelineConfig cfg, std::uint64_t seed) {
  cfg.synthetic.seed = seed;
  cfg.pretrain.seed = seed;
  cfg.train.seed = seed;
  return cfg;
}

/// Full synthetic run: corpus, generator, parser and scores, all from `seed`.
inline PipelineResult run_synthetic(const PipelineConfig& base, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  const PipelineConfig cfg = seeded(base, seed);
  auto corpus = io::synthesize_corpus(cfg.synthetic);
  PipelineResult r = parser_stage(corpus, pseudo_stage(corpus, cfg), cfg);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace ear::pipeline
