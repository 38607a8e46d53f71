// SPDX-License-Identifier: Apache-2.0
//
// Stage-3 objective: class-balanced soft BCE against pseudo-labels, feature
// mixup through the classifiers, and video-level BCE.
#pragma once

#include <algorithm>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ear/autodiff.hpp"
#include "ear/error.hpp"
#include "ear/io.hpp"
#include "ear/nn.hpp"
#include "ear/parser.hpp"
#include "ear/training.hpp"

namespace ear::losses {

/// Global positive/negative weights per modality. w_pos = mean(1 − ŷ)·W and
/// w_neg = mean(ŷ) over every (video, segment, category) cell.
struct BalanceWeights {
  double pos_a = 1.0, neg_a = 1.0;
  double pos_v = 1.0, neg_v = 1.0;
  double scale = 1.0;
};

inline BalanceWeights compute_balance_weights(std::span<const Tensor> audio, std::span<const Tensor> visual, double W) {
  if (audio.empty() || visual.empty()) throw ConfigError("balance weights: empty pseudo-label corpus");
  if (!(W > 0.0)) throw ConfigError("balance weights: scale W must be positive");
  auto mean_of = [](std::span<const Tensor> set) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& t : set) {
      for (double v : t.values()) s += v;
      n += t.size();
    }
    return s / static_cast<double>(n);
  };
  const double ma = mean_of(audio), mv = mean_of(visual);
  return {(1.0 - ma) * W, ma, (1.0 - mv) * W, mv, W};
}

inline BalanceWeights compute_balance_weights(const io::LabelSet& labels, double W) {
  std::vector<Tensor> a, v;
  for (const auto& e : labels.videos) {
    a.push_back(e.audio);
    v.push_back(e.visual);
  }
  return compute_balance_weights(a, v, W);
}

/// Which cells count as positives in the soft loss.
enum class Selector { Pseudo, VideoLabel };

inline Selector parse_selector(const std::string& s) {
  if (s == "pseudo") return Selector::Pseudo;
  if (s == "video") return Selector::VideoLabel;
  throw ConfigError("unknown soft-loss selector '" + s + "' (expected pseudo or video)");
}

inline const char* selector_name(Selector s) { return s == Selector::Pseudo ? "pseudo" : "video"; }

/// Binary selector y: ŷ ≥ 0.5, or the video label broadcast over segments.
inline Tensor positive_selector(const Tensor& pseudo, Selector sel, const Tensor& video_rows) {
  Tensor y(pseudo.dims());
  const Tensor& src = sel == Selector::Pseudo ? pseudo : video_rows;
  if (src.dims() != pseudo.dims()) {
    throw ShapeError("soft loss selector: " + dims_to_string(src.dims()) + " vs " + dims_to_string(pseudo.dims()));
  }
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = src[i] >= 0.5 ? 1.0 : 0.0;
  return y;
}

/// mean[(w_pos·y + w_neg·(1 − y)) · BCE(p, ŷ)].
inline Var soft_loss(const Var& p, const Tensor& pseudo, double w_pos, double w_neg, const Tensor& selector) {
  if (selector.dims() != pseudo.dims()) {
    throw ShapeError("soft loss: selector " + dims_to_string(selector.dims()) + " vs targets " +
                     dims_to_string(pseudo.dims()));
  }
  Tensor w(pseudo.dims());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = selector[i] * w_pos + (1.0 - selector[i]) * w_neg;
  return bce(p, pseudo, &w);
}

struct MixupConfig {
  double alpha = 0.5;
  std::optional<double> forced_gamma;  // deterministic γ for tests and probes

  void validate() const {
    if (!(alpha > 0.0)) throw ConfigError("mixup: alpha must be positive");
    if (forced_gamma && !(*forced_gamma >= 0.0 && *forced_gamma <= 1.0)) throw ConfigError("mixup: gamma must lie in [0, 1]");
  }
};

/// γ ~ Beta(α, α) via two Gamma draws.
inline double sample_gamma(const MixupConfig& cfg, std::mt19937_64& rng) {
  if (cfg.forced_gamma) return *cfg.forced_gamma;
  std::gamma_distribution<double> g(cfg.alpha, 1.0);
  const double x = g(rng), y = g(rng);
  return x + y > 0.0 ? x / (x + y) : 0.5;
}

inline std::vector<std::size_t> random_partners(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

/// BCE(sigmoid(cls(γf + (1−γ)f_π)), γŷ + (1−γ)ŷ_π) for segment rows paired
/// by `partner`. Mixed labels are constants.
inline Var mixup_loss(const Var& features, const Tensor& pseudo, const nn::Linear& classifier, double gamma,
                      std::span<const std::size_t> partner) {
  if (partner.size() != features.rows() || pseudo.dims() != features.value().dims()) {
    throw ShapeError("mixup: features " + dims_to_string(features.dims()) + ", targets " + dims_to_string(pseudo.dims()) +
                     ", " + std::to_string(partner.size()) + " partners");
  }
  Var mixed = add(scale(features, gamma), scale(gather_rows(features, partner), 1.0 - gamma));
  Tensor target(pseudo.dims());
  for (std::size_t i = 0; i < pseudo.rows(); ++i)
    for (std::size_t c = 0; c < pseudo.cols(); ++c)
      target(i, c) = gamma * pseudo(i, c) + (1.0 - gamma) * pseudo(partner[i], c);
  return bce(sigmoid(classifier(mixed)), target);
}

struct LossConfig {
  double balance_scale = 1.0;  // W
  MixupConfig mixup;
  Selector selector = Selector::Pseudo;
  bool use_mix = true;
  bool use_soft_a = true;
  bool use_soft_v = true;
  bool use_video = true;

  void validate() const {
    mixup.validate();
    if (!(balance_scale > 0.0)) throw ConfigError("loss: balance scale W must be positive");
    if (!use_mix && !use_soft_a && !use_soft_v && !use_video) throw ConfigError("loss: every term is disabled");
  }
};

inline void to_json(nlohmann::json& j, const LossConfig& c) {
  j = {{"balance_scale", c.balance_scale}, {"mixup_alpha", c.mixup.alpha}, {"selector", selector_name(c.selector)},
       {"use_mix", c.use_mix},             {"use_soft_a", c.use_soft_a},    {"use_soft_v", c.use_soft_v},
       {"use_video", c.use_video}};
  if (c.mixup.forced_gamma) j["mixup_gamma"] = *c.mixup.forced_gamma;
}

inline void from_json(const nlohmann::json& j, LossConfig& c) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("balance_scale", c.balance_scale);
  get("mixup_alpha", c.mixup.alpha);
  if (j.contains("mixup_gamma")) c.mixup.forced_gamma = j.at("mixup_gamma").get<double>();
  if (j.contains("selector")) c.selector = parse_selector(j.at("selector").get<std::string>());
  get("use_mix", c.use_mix);
  get("use_soft_a", c.use_soft_a);
  get("use_soft_v", c.use_soft_v);
  get("use_video", c.use_video);
}

/// Stacked per-batch supervision: pseudo-labels (B·T)×C and video labels B×C.
struct Targets {
  Tensor pseudo_a, pseudo_v;
  Tensor video;
};

inline Tensor broadcast_rows(const Tensor& video, std::size_t seq_len) {
  Tensor out = Tensor::matrix(video.rows() * seq_len, video.cols());
  for (std::size_t b = 0; b < video.rows(); ++b)
    for (std::size_t t = 0; t < seq_len; ++t)
      for (std::size_t c = 0; c < video.cols(); ++c) out(b * seq_len + t, c) = video(b, c);
  return out;
}

/// total = ℒ_mix^A + ℒ_mix^V + ℒ_soft^A + ℒ_soft^V + ℒ_video, disabled terms
/// dropped. One γ and one pairing per call, shared by both modalities.
inline train::LossTerms total_loss(const parser::ParseOutput& out, const parser::ParserModel& model, const Targets& tg,
                                   const BalanceWeights& w, const LossConfig& cfg, std::mt19937_64* rng) {
  cfg.validate();
  std::vector<Var> parts;
  train::LossTerms r;
  auto push = [&](const char* name, const Var& v) {
    parts.push_back(v);
    r.terms.emplace_back(name, v.value()[0]);
  };
  if (cfg.use_mix) {
    const std::size_t n = out.f_ae.rows();
    if (n < 2) {
      std::cerr << "warning: mixup skipped for a batch of " << n << " segment\n";
    } else {
      std::mt19937_64 fallback(0);
      std::mt19937_64& g = rng ? *rng : fallback;
      const double gamma = sample_gamma(cfg.mixup, g);
      const auto partner = random_partners(n, g);
      push("mix_a", mixup_loss(out.f_ae, tg.pseudo_a, model.cls_a, gamma, partner));
      push("mix_v", mixup_loss(out.f_ve, tg.pseudo_v, model.cls_v, gamma, partner));
    }
  }
  if (cfg.use_soft_a || cfg.use_soft_v) {
    const Tensor rows = broadcast_rows(tg.video, out.seq_len);
    if (cfg.use_soft_a)
      push("soft_a", soft_loss(out.p_a, tg.pseudo_a, w.pos_a, w.neg_a, positive_selector(tg.pseudo_a, cfg.selector, rows)));
    if (cfg.use_soft_v)
      push("soft_v", soft_loss(out.p_v, tg.pseudo_v, w.pos_v, w.neg_v, positive_selector(tg.pseudo_v, cfg.selector, rows)));
  }
  if (cfg.use_video) push("video", bce(out.p, tg.video));
  if (parts.empty()) {
    r.total = constant(Tensor::matrix(1, 1));
    return r;
  }
  r.total = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) r.total = add(r.total, parts[i]);
  return r;
}

}  // namespace ear::losses
