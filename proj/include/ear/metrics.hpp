// SPDX-License-Identifier: Apache-2.0
//
// Segment-level and event-level F-scores for audio, visual and audio-visual
// events, with the Type (mean of the three) and Event (modality-agnostic,
// audio and visual pooled) aggregates.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ear/error.hpp"
#include "ear/tensor.hpp"

namespace ear::metrics {

enum class Plane { Audio, Visual, AudioVisual };

inline const char* plane_name(Plane p) {
  switch (p) {
    case Plane::Audio: return "A";
    case Plane::Visual: return "V";
    case Plane::AudioVisual: return "AV";
  }
  return "?";
}

/// Binary T×C audio and visual planes; the audio-visual plane is always
/// derived as their intersection.
struct SegmentAnnotation {
  Tensor audio;
  Tensor visual;

  Tensor audio_visual() const {
    Tensor av(audio.dims());
    for (std::size_t i = 0; i < av.size(); ++i) av[i] = (audio[i] != 0.0 && visual[i] != 0.0) ? 1.0 : 0.0;
    return av;
  }

  Tensor plane(Plane p) const {
    switch (p) {
      case Plane::Audio: return audio;
      case Plane::Visual: return visual;
      case Plane::AudioVisual: return audio_visual();
    }
    return audio;
  }
};

inline Tensor binarize(const Tensor& p, double tau = 0.5) {
  Tensor out(p.dims());
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = p[i] >= tau ? 1.0 : 0.0;
  return out;
}

inline SegmentAnnotation binarize(const SegmentAnnotation& probs, double tau = 0.5) {
  return {binarize(probs.audio, tau), binarize(probs.visual, tau)};
}

struct Counts {
  std::size_t tp = 0, fp = 0, fn = 0;

  Counts& operator+=(const Counts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  friend Counts operator+(Counts a, const Counts& b) { return a += b; }

  /// 2TP / (2TP + FP + FN); 1 when both sides are empty.
  double f1() const {
    const std::size_t denom = 2 * tp + fp + fn;
    return denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  }
};

inline Counts cell_counts(const Tensor& pred, const Tensor& gt) {
  if (pred.dims() != gt.dims()) {
    throw ShapeError("segment metrics: prediction " + dims_to_string(pred.dims()) + " vs ground truth " +
                     dims_to_string(gt.dims()));
  }
  Counts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0.0, g = gt[i] != 0.0;
    c.tp += p && g;
    c.fp += p && !g;
    c.fn += !p && g;
  }
  return c;
}

inline double segment_f1(const SegmentAnnotation& pred, const SegmentAnnotation& gt, Plane plane) {
  return cell_counts(pred.plane(plane), gt.plane(plane)).f1();
}

struct EventSpan {
  std::size_t category = 0;
  std::size_t start = 0;  // inclusive
  std::size_t end = 0;    // exclusive
  Plane modality = Plane::Audio;

  friend bool operator==(const EventSpan&, const EventSpan&) = default;
};

/// Maximal runs of consecutive positive segments per category, ordered by
/// category then start.
inline std::vector<EventSpan> extract_events(const Tensor& plane, Plane modality = Plane::Audio) {
  std::vector<EventSpan> spans;
  const std::size_t t = plane.rows(), c = plane.cols();
  for (std::size_t k = 0; k < c; ++k) {
    std::size_t i = 0;
    while (i < t) {
      if (plane(i, k) == 0.0) {
        ++i;
        continue;
      }
      std::size_t j = i;
      while (j < t && plane(j, k) != 0.0) ++j;
      spans.push_back({k, i, j, modality});
      i = j;
    }
  }
  return spans;
}

inline double temporal_iou(const EventSpan& a, const EventSpan& b) {
  const std::size_t lo = std::max(a.start, b.start), hi = std::min(a.end, b.end);
  const std::size_t inter = hi > lo ? hi - lo : 0;
  const std::size_t uni = (a.end - a.start) + (b.end - b.start) - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

enum class Matching { Greedy, Optimal };

namespace detail {

inline bool augment(std::size_t u, const std::vector<std::vector<std::size_t>>& adj, std::vector<int>& match_g,
                    std::vector<char>& seen) {
  for (std::size_t g : adj[u]) {
    if (seen[g]) continue;
    seen[g] = 1;
    if (match_g[g] < 0 || augment(static_cast<std::size_t>(match_g[g]), adj, match_g, seen)) {
      match_g[g] = static_cast<int>(u);
      return true;
    }
  }
  return false;
}

/// Matched-pair count for one category.
inline std::size_t match_category(const std::vector<EventSpan>& pred, const std::vector<EventSpan>& gt, double iou_min,
                                  Matching policy) {
  if (pred.empty() || gt.empty()) return 0;
  if (policy == Matching::Greedy) {
    struct Pair {
      double iou;
      std::size_t p, g;
    };
    std::vector<Pair> pairs;
    for (std::size_t i = 0; i < pred.size(); ++i)
      for (std::size_t j = 0; j < gt.size(); ++j) {
        const double iou = temporal_iou(pred[i], gt[j]);
        if (iou >= iou_min) pairs.push_back({iou, i, j});
      }
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.iou > b.iou; });
    std::vector<char> used_p(pred.size(), 0), used_g(gt.size(), 0);
    std::size_t matched = 0;
    for (const auto& pr : pairs) {
      if (used_p[pr.p] || used_g[pr.g]) continue;
      used_p[pr.p] = used_g[pr.g] = 1;
      ++matched;
    }
    return matched;
  }
  std::vector<std::vector<std::size_t>> adj(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i)
    for (std::size_t j = 0; j < gt.size(); ++j)
      if (temporal_iou(pred[i], gt[j]) >= iou_min) adj[i].push_back(j);
  std::vector<int> match_g(gt.size(), -1);
  std::size_t matched = 0;
  for (std::size_t u = 0; u < pred.size(); ++u) {
    std::vector<char> seen(gt.size(), 0);
    if (augment(u, adj, match_g, seen)) ++matched;
  }
  return matched;
}

}  // namespace detail

/// One-to-one matching of same-category spans with IoU >= iou_min; matched
/// pairs count as true positives.
inline Counts event_counts(const std::vector<EventSpan>& pred, const std::vector<EventSpan>& gt, double iou_min = 0.5,
                           Matching policy = Matching::Greedy) {
  std::map<std::size_t, std::pair<std::vector<EventSpan>, std::vector<EventSpan>>> by_cat;
  for (const auto& e : pred) by_cat[e.category].first.push_back(e);
  for (const auto& e : gt) by_cat[e.category].second.push_back(e);
  Counts c;
  for (const auto& [cat, sides] : by_cat) {
    const std::size_t m = detail::match_category(sides.first, sides.second, iou_min, policy);
    c.tp += m;
    c.fp += sides.first.size() - m;
    c.fn += sides.second.size() - m;
  }
  return c;
}

inline double event_f1(const std::vector<EventSpan>& pred, const std::vector<EventSpan>& gt, double iou_min = 0.5,
                       Matching policy = Matching::Greedy) {
  return event_counts(pred, gt, iou_min, policy).f1();
}

struct LevelScores {
  double audio = 0, visual = 0, audio_visual = 0, type = 0, event = 0;
};

struct MetricsReport {
  LevelScores segment;
  LevelScores event;
  double average = 0;
  std::size_t videos = 0;
};

enum class Averaging { Macro, Micro };

struct EvalOptions {
  double iou_min = 0.5;
  Matching matching = Matching::Greedy;
  Averaging averaging = Averaging::Macro;
};

struct VideoAnnotation {
  std::string id;
  SegmentAnnotation labels;
};

/// Per-video counts for each plane, plus pooled audio+visual ("Event").
struct VideoCounts {
  Counts seg[3], seg_pooled, evt[3], evt_pooled;
};

inline VideoCounts video_counts(const SegmentAnnotation& pred, const SegmentAnnotation& gt, const EvalOptions& opt) {
  if (pred.audio.dims() != gt.audio.dims() || pred.visual.dims() != gt.visual.dims() ||
      pred.audio.dims() != pred.visual.dims()) {
    throw ShapeError("evaluate: prediction " + dims_to_string(pred.audio.dims()) + " vs ground truth " +
                     dims_to_string(gt.audio.dims()));
  }
  VideoCounts vc;
  const Plane planes[3] = {Plane::Audio, Plane::Visual, Plane::AudioVisual};
  for (int i = 0; i < 3; ++i) {
    const Tensor p = pred.plane(planes[i]), g = gt.plane(planes[i]);
    vc.seg[i] = cell_counts(p, g);
    vc.evt[i] = event_counts(extract_events(p, planes[i]), extract_events(g, planes[i]), opt.iou_min, opt.matching);
  }
  vc.seg_pooled = vc.seg[0] + vc.seg[1];
  vc.evt_pooled = vc.evt[0] + vc.evt[1];
  return vc;
}

inline void finalize(MetricsReport& r) {
  r.segment.type = (r.segment.audio + r.segment.visual + r.segment.audio_visual) / 3.0;
  r.event.type = (r.event.audio + r.event.visual + r.event.audio_visual) / 3.0;
  r.average = (r.segment.audio + r.segment.visual + r.segment.audio_visual + r.segment.type + r.segment.event +
               r.event.audio + r.event.visual + r.event.audio_visual + r.event.type + r.event.event) /
              10.0;
}

/// Aligns predictions and ground truth by video id and averages per-video
/// F-scores (macro) or pooled counts (micro).
inline MetricsReport evaluate_corpus(const std::vector<VideoAnnotation>& preds, const std::vector<VideoAnnotation>& gts,
                                     const EvalOptions& opt = {}) {
  std::map<std::string, const SegmentAnnotation*> gt_by_id;
  for (const auto& g : gts) gt_by_id[g.id] = &g.labels;
  std::map<std::string, const SegmentAnnotation*> pred_by_id;
  for (const auto& p : preds) pred_by_id[p.id] = &p.labels;

  std::vector<std::string> offenders;
  for (const auto& p : preds)
    if (!gt_by_id.count(p.id)) offenders.push_back(p.id + " (no ground truth)");
  for (const auto& g : gts)
    if (!pred_by_id.count(g.id)) offenders.push_back(g.id + " (no prediction)");
  if (preds.size() != pred_by_id.size() || gts.size() != gt_by_id.size()) offenders.push_back("<duplicate video ids>");
  if (!offenders.empty()) {
    std::string msg = "evaluate: misaligned corpora:";
    for (const auto& o : offenders) msg += " " + o;
    throw AlignmentError(msg);
  }
  if (gts.empty()) throw AlignmentError("evaluate: empty corpus");

  MetricsReport r;
  r.videos = gts.size();
  VideoCounts total{};
  for (const auto& g : gts) {
    const VideoCounts vc = video_counts(*pred_by_id.at(g.id), g.labels, opt);
    if (opt.averaging == Averaging::Macro) {
      r.segment.audio += vc.seg[0].f1();
      r.segment.visual += vc.seg[1].f1();
      r.segment.audio_visual += vc.seg[2].f1();
      r.segment.event += vc.seg_pooled.f1();
      r.event.audio += vc.evt[0].f1();
      r.event.visual += vc.evt[1].f1();
      r.event.audio_visual += vc.evt[2].f1();
      r.event.event += vc.evt_pooled.f1();
    } else {
      for (int i = 0; i < 3; ++i) {
        total.seg[i] += vc.seg[i];
        total.evt[i] += vc.evt[i];
      }
      total.seg_pooled += vc.seg_pooled;
      total.evt_pooled += vc.evt_pooled;
    }
  }
  if (opt.averaging == Averaging::Macro) {
    const double n = static_cast<double>(gts.size());
    for (double* v : {&r.segment.audio, &r.segment.visual, &r.segment.audio_visual, &r.segment.event, &r.event.audio,
                      &r.event.visual, &r.event.audio_visual, &r.event.event})
      *v /= n;
  } else {
    r.segment = {total.seg[0].f1(), total.seg[1].f1(), total.seg[2].f1(), 0.0, total.seg_pooled.f1()};
    r.event = {total.evt[0].f1(), total.evt[1].f1(), total.evt[2].f1(), 0.0, total.evt_pooled.f1()};
  }
  finalize(r);
  return r;
}

/// Segment-level F per category and plane, pooled over videos. Debug output.
inline std::vector<std::array<double, 3>> per_class_segment_f1(const std::vector<VideoAnnotation>& preds,
                                                               const std::vector<VideoAnnotation>& gts) {
  std::map<std::string, const SegmentAnnotation*> pred_by_id;
  for (const auto& p : preds) pred_by_id[p.id] = &p.labels;
  if (gts.empty()) return {};
  const std::size_t c = gts.front().labels.audio.cols();
  std::vector<std::array<Counts, 3>> counts(c);
  const Plane planes[3] = {Plane::Audio, Plane::Visual, Plane::AudioVisual};
  for (const auto& g : gts) {
    auto it = pred_by_id.find(g.id);
    if (it == pred_by_id.end()) throw AlignmentError("per-class: no prediction for " + g.id);
    for (int i = 0; i < 3; ++i) {
      const Tensor p = it->second->plane(planes[i]), t = g.labels.plane(planes[i]);
      for (std::size_t k = 0; k < c; ++k) {
        for (std::size_t s = 0; s < t.rows(); ++s) {
          const bool pv = p(s, k) != 0.0, gv = t(s, k) != 0.0;
          counts[k][i].tp += pv && gv;
          counts[k][i].fp += pv && !gv;
          counts[k][i].fn += !pv && gv;
        }
      }
    }
  }
  std::vector<std::array<double, 3>> out(c);
  for (std::size_t k = 0; k < c; ++k)
    for (int i = 0; i < 3; ++i) out[k][i] = counts[k][i].f1();
  return out;
}

/// Fixed-width table laid out as Segment-Level A V AV Type Event |
/// Event-Level A V AV Type Event | Avg., values in percent.
inline std::string format_table(const MetricsReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  os << "           Segment-Level                 | Event-Level                   |\n";
  os << "    A     V    AV  Type Event |     A     V    AV  Type Event |  Avg.\n";
  auto put = [&](double v) { os << std::setw(6) << v * 100.0; };
  for (double v : {r.segment.audio, r.segment.visual, r.segment.audio_visual, r.segment.type, r.segment.event}) put(v);
  os << " |";
  for (double v : {r.event.audio, r.event.visual, r.event.audio_visual, r.event.type, r.event.event}) put(v);
  os << " |";
  put(r.average);
  os << '\n';
  return os.str();
}

inline std::string csv_header() {
  return "seg_a,seg_v,seg_av,seg_type,seg_event,evt_a,evt_v,evt_av,evt_type,evt_event,avg";
}

inline std::string format_csv_row(const MetricsReport& r) {
  std::ostringstream os;
  os << std::setprecision(17);
  const double vals[] = {r.segment.audio, r.segment.visual, r.segment.audio_visual, r.segment.type, r.segment.event,
                         r.event.audio,   r.event.visual,   r.event.audio_visual,   r.event.type,   r.event.event,
                         r.average};
  for (std::size_t i = 0; i < 11; ++i) os << (i ? "," : "") << vals[i];
  return os.str();
}

}  // namespace ear::metrics
