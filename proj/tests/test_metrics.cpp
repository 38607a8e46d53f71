// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "ear/metrics.hpp"
#include "support/metrics_oracle.hpp"

namespace ear::metrics {
namespace {

using testing::Grid;

Tensor tensor_of(const Grid& g) {
  Tensor t = Tensor::matrix(g.size(), g[0].size());
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = 0; j < g[i].size(); ++j) t(i, j) = g[i][j];
  return t;
}

SegmentAnnotation annotation(const Grid& a, const Grid& v) { return {tensor_of(a), tensor_of(v)}; }

Grid perturb(const Grid& g, std::mt19937_64& rng, double flip) {
  std::bernoulli_distribution f(flip);
  Grid out = g;
  for (auto& r : out)
    for (auto& x : r)
      if (f(rng)) x = 1 - x;
  return out;
}

TEST(Binarize, BoundaryInclusiveAndLoopOracle) {
  EXPECT_EQ(binarize(Tensor::matrix({{0.5}}), 0.5)(0, 0), 1.0);
  EXPECT_EQ(binarize(Tensor::matrix(3, 2), 0.5), Tensor::matrix(3, 2));
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor p = Tensor::matrix(5, 4);
    for (auto& v : p.values()) v = u(rng);
    const double tau = u(rng);
    Tensor b = binarize(p, tau);
    for (std::size_t i = 0; i < p.size(); ++i) ASSERT_EQ(b[i], p[i] >= tau ? 1.0 : 0.0);
  }
}

TEST(SegmentF1, HandCases) {
  Tensor gt = Tensor::matrix({{1, 0}, {1, 1}, {0, 1}, {1, 0}});
  SegmentAnnotation g{gt, gt};
  EXPECT_EQ(segment_f1(g, g, Plane::Audio), 1.0);
  SegmentAnnotation empty{Tensor::matrix(4, 2), Tensor::matrix(4, 2)};
  EXPECT_EQ(segment_f1(empty, g, Plane::Audio), 0.0);
  EXPECT_EQ(segment_f1(empty, empty, Plane::AudioVisual), 1.0);
  // TP=3 (0,0) (1,1) (2,1); FP=1 (3,1); FN=2 (1,0) (3,0)
  Tensor pred = Tensor::matrix({{1, 0}, {0, 1}, {0, 1}, {0, 1}});
  SegmentAnnotation p{pred, pred};
  EXPECT_NEAR(segment_f1(p, g, Plane::Audio), 2.0 * 3 / (6 + 1 + 2), 1e-15);
  auto c = cell_counts(pred, gt);
  EXPECT_EQ(c.tp, 3u);
  EXPECT_EQ(c.fp, 1u);
  EXPECT_EQ(c.fn, 2u);
  EXPECT_THROW(segment_f1(SegmentAnnotation{Tensor::matrix(3, 2), Tensor::matrix(3, 2)}, g, Plane::Audio), ShapeError);
}

TEST(ExtractEvents, RunsAndRoundTrip) {
  auto spans = extract_events(Tensor::matrix({{1}, {1}, {0}, {1}}));
  ASSERT_EQ(spans.size(), 2u);
  EXPECT_EQ(spans[0].start, 0u);
  EXPECT_EQ(spans[0].end, 2u);
  EXPECT_EQ(spans[1].start, 3u);
  EXPECT_EQ(spans[1].end, 4u);
  auto full = extract_events(Tensor::matrix(7, 1, 1.0));
  ASSERT_EQ(full.size(), 1u);
  EXPECT_EQ(full[0].start, 0u);
  EXPECT_EQ(full[0].end, 7u);

  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor plane = tensor_of(testing::random_grid(rng, 1 + trial % 10, 1 + trial % 5, 0.5));
    Tensor rebuilt(plane.dims());
    for (const auto& s : extract_events(plane)) {
      ASSERT_LT(s.start, s.end);
      for (std::size_t t = s.start; t < s.end; ++t) {
        ASSERT_EQ(rebuilt(t, s.category), 0.0);
        rebuilt(t, s.category) = 1.0;
      }
    }
    ASSERT_EQ(rebuilt, plane);
  }
}

TEST(EventF1, HandCases) {
  std::vector<EventSpan> a{{0, 0, 3}, {1, 2, 5}};
  EXPECT_EQ(event_f1(a, a), 1.0);
  EXPECT_EQ(event_f1({}, {}), 1.0);
  EXPECT_EQ(event_f1({{0, 0, 5}}, {{0, 0, 10}}, 0.5), 1.0);
  EXPECT_EQ(event_f1({{0, 0, 4}}, {{0, 0, 10}}, 0.5), 0.0);
  // same span but wrong category never matches
  EXPECT_EQ(event_f1({{1, 0, 5}}, {{0, 0, 5}}), 0.0);
}

std::vector<EventSpan> random_spans(std::mt19937_64& rng, std::size_t max_per_cat, std::size_t c, std::size_t t) {
  std::uniform_int_distribution<std::size_t> count(0, max_per_cat), pos(0, t - 1);
  std::vector<EventSpan> out;
  for (std::size_t k = 0; k < c; ++k) {
    const std::size_t n = count(rng);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t s = pos(rng), e = pos(rng);
      if (s > e) std::swap(s, e);
      out.push_back({k, s, e + 1});
    }
  }
  return out;
}

std::vector<testing::OracleSpan> oracle_view(const std::vector<EventSpan>& spans, std::size_t cat) {
  std::vector<testing::OracleSpan> out;
  for (const auto& s : spans)
    if (s.category == cat) out.push_back({static_cast<int>(s.start), static_cast<int>(s.end)});
  return out;
}

TEST(EventF1, GreedyNeverBeatsExhaustiveMatching) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> thr(0.1, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t c = 1 + trial % 3, t = 2 + trial % 9;
    auto pred = random_spans(rng, 4, c, t), gt = random_spans(rng, 4, c, t);
    const double iou = thr(rng);
    std::size_t optimal = 0;
    for (std::size_t k = 0; k < c; ++k)
      optimal += testing::optimal_matching(oracle_view(pred, k), oracle_view(gt, k), iou);
    ASSERT_LE(event_counts(pred, gt, iou, Matching::Greedy).tp, optimal);
    ASSERT_EQ(event_counts(pred, gt, iou, Matching::Optimal).tp, optimal);
  }
}

TEST(EventF1, GreedyIsOptimalOnValidPlanes) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> thr(0.05, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t c = 1 + trial % 5, t = 1 + trial % 10;
    Tensor p = tensor_of(testing::random_grid(rng, t, c, 0.5)), g = tensor_of(testing::random_grid(rng, t, c, 0.5));
    const double iou = trial % 2 ? 0.5 : thr(rng);
    auto pe = extract_events(p), ge = extract_events(g);
    ASSERT_EQ(event_counts(pe, ge, iou, Matching::Greedy).tp, event_counts(pe, ge, iou, Matching::Optimal).tp);
  }
}

TEST(SegmentAnnotation, AudioVisualIsIntersection) {
  SegmentAnnotation s{Tensor::matrix({{1, 1, 0}}), Tensor::matrix({{1, 0, 0}})};
  EXPECT_EQ(s.audio_visual(), Tensor::matrix({{1, 0, 0}}));
}

std::vector<VideoAnnotation> to_corpus(const std::vector<testing::OracleVideo>& vs) {
  std::vector<VideoAnnotation> out;
  for (const auto& v : vs) out.push_back({v.id, annotation(v.a, v.v)});
  return out;
}

std::array<double, 11> flatten(const MetricsReport& r) {
  return {r.segment.audio, r.segment.visual, r.segment.audio_visual, r.segment.type, r.segment.event,
          r.event.audio,   r.event.visual,   r.event.audio_visual,   r.event.type,   r.event.event,
          r.average};
}

TEST(EvaluateCorpus, PerfectPredictionScoresOne) {
  std::mt19937_64 rng(5);
  std::vector<testing::OracleVideo> gts;
  for (int i = 0; i < 4; ++i)
    gts.push_back({"v" + std::to_string(i), testing::random_grid(rng, 10, 5, 0.3), testing::random_grid(rng, 10, 5, 0.3)});
  for (double x : flatten(evaluate_corpus(to_corpus(gts), to_corpus(gts)))) EXPECT_EQ(x, 1.0);
}

TEST(EvaluateCorpus, MisalignedIdsListOffenders) {
  std::vector<VideoAnnotation> p{{"a", {Tensor::matrix(2, 2), Tensor::matrix(2, 2)}},
                                 {"b", {Tensor::matrix(2, 2), Tensor::matrix(2, 2)}}};
  std::vector<VideoAnnotation> g{{"a", {Tensor::matrix(2, 2), Tensor::matrix(2, 2)}},
                                 {"c", {Tensor::matrix(2, 2), Tensor::matrix(2, 2)}}};
  try {
    evaluate_corpus(p, g);
    FAIL();
  } catch (const AlignmentError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("b"), std::string::npos);
    EXPECT_NE(msg.find("c (no prediction)"), std::string::npos);
  }
}

TEST(EvaluateCorpus, MatchesScalarOracleOnRandomCorpora) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<std::size_t> nv(1, 10), nt(1, 10), nc(1, 5);
  std::uniform_real_distribution<double> density(0.0, 0.7), flip(0.0, 0.4);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = nv(rng), t = nt(rng), c = nc(rng);
    std::vector<testing::OracleVideo> gts, preds;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = trial % 10 == 0 ? 0.0 : density(rng);
      testing::OracleVideo g{"vid" + std::to_string(i), testing::random_grid(rng, t, c, d),
                             testing::random_grid(rng, t, c, d)};
      const double f = trial % 10 == 0 ? 0.0 : flip(rng);
      preds.push_back({g.id, perturb(g.a, rng, f), perturb(g.v, rng, f)});
      gts.push_back(std::move(g));
    }
    std::shuffle(preds.begin(), preds.end(), rng);
    const auto oracle = testing::oracle_report(preds, gts);
    const auto pc = to_corpus(preds), gc = to_corpus(gts);
    const auto fast = flatten(evaluate_corpus(pc, gc));
    for (int k = 0; k < 11; ++k) ASSERT_NEAR(fast[k], oracle[k], 1e-12) << "trial " << trial << " metric " << k;

    for (const auto& v : gc) {
      // AV derivation and the empty-vs-empty convention on every video
      const Tensor av = v.labels.audio_visual();
      for (std::size_t i = 0; i < av.size(); ++i)
        ASSERT_EQ(av[i], v.labels.audio[i] * v.labels.visual[i]);
      const SegmentAnnotation empty{Tensor::matrix(t, c), Tensor::matrix(t, c)};
      ASSERT_EQ(segment_f1(empty, empty, Plane::AudioVisual), 1.0);
      ASSERT_EQ(event_f1(extract_events(empty.audio), extract_events(empty.audio)), 1.0);
    }
    if (trial % 10 == 0) {
      for (double x : fast) ASSERT_EQ(x, 1.0);
    }
  }
}

TEST(EvaluateCorpus, EventScoreEqualsDisjointUnionOfPlanes) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    Grid ga = testing::random_grid(rng, 8, 3, 0.4), gv = testing::random_grid(rng, 8, 3, 0.4);
    Grid pa = perturb(ga, rng, 0.2), pv = perturb(gv, rng, 0.2);
    auto r = evaluate_corpus({{"x", annotation(pa, pv)}}, {{"x", annotation(ga, gv)}});
    // union: stack A and V side by side as 2C categories
    Grid pu(8), gu(8);
    for (std::size_t i = 0; i < 8; ++i) {
      pu[i] = pa[i];
      pu[i].insert(pu[i].end(), pv[i].begin(), pv[i].end());
      gu[i] = ga[i];
      gu[i].insert(gu[i].end(), gv[i].begin(), gv[i].end());
    }
    EXPECT_NEAR(r.event.event, event_f1(extract_events(tensor_of(pu)), extract_events(tensor_of(gu))), 1e-15);
    EXPECT_NEAR(r.segment.event, cell_counts(tensor_of(pu), tensor_of(gu)).f1(), 1e-15);
  }
}

TEST(EvaluateCorpus, InvariantUnderCategoryPermutation) {
  std::mt19937_64 rng(8);
  std::vector<std::size_t> perm{2, 0, 3, 1};
  auto permute = [&](const Grid& g) {
    Grid out = g;
    for (std::size_t i = 0; i < g.size(); ++i)
      for (std::size_t k = 0; k < 4; ++k) out[i][k] = g[i][perm[k]];
    return out;
  };
  std::vector<testing::OracleVideo> gts, preds, pg, pp;
  for (int i = 0; i < 5; ++i) {
    testing::OracleVideo g{std::to_string(i), testing::random_grid(rng, 10, 4, 0.4), testing::random_grid(rng, 10, 4, 0.4)};
    testing::OracleVideo p{g.id, perturb(g.a, rng, 0.2), perturb(g.v, rng, 0.2)};
    pg.push_back({g.id, permute(g.a), permute(g.v)});
    pp.push_back({p.id, permute(p.a), permute(p.v)});
    gts.push_back(g);
    preds.push_back(p);
  }
  const auto a = flatten(evaluate_corpus(to_corpus(preds), to_corpus(gts)));
  const auto b = flatten(evaluate_corpus(to_corpus(pp), to_corpus(pg)));
  for (int k = 0; k < 11; ++k) EXPECT_NEAR(a[k], b[k], 1e-15);
}

TEST(EvaluateCorpus, MicroAveragingPoolsCounts) {
  // video 1: two true positives; video 2: two misses
  SegmentAnnotation g1{Tensor::matrix({{1}, {1}}), Tensor::matrix(2, 1)};
  SegmentAnnotation g2{Tensor::matrix({{1}, {1}}), Tensor::matrix(2, 1)};
  SegmentAnnotation p2{Tensor::matrix({{0}, {0}}), Tensor::matrix(2, 1)};
  std::vector<VideoAnnotation> preds{{"1", g1}, {"2", p2}}, gts{{"1", g1}, {"2", g2}};
  EXPECT_NEAR(evaluate_corpus(preds, gts).segment.audio, 0.5, 1e-15);
  EvalOptions micro;
  micro.averaging = Averaging::Micro;
  EXPECT_NEAR(evaluate_corpus(preds, gts, micro).segment.audio, 2.0 / 3.0, 1e-15);
}

TEST(Report, TableAndCsvLayout) {
  MetricsReport r;
  r.segment = {0.5, 0.6, 0.4, 0.5, 0.55};
  r.event = {0.4, 0.5, 0.3, 0.4, 0.45};
  finalize(r);
  EXPECT_NEAR(r.segment.type, 0.5, 1e-15);
  const std::string table = format_table(r);
  EXPECT_NE(table.find("Segment-Level"), std::string::npos);
  EXPECT_NE(table.find("Event-Level"), std::string::npos);
  EXPECT_NE(table.find("Avg."), std::string::npos);
  EXPECT_NE(table.find("55.0"), std::string::npos);
  const std::string row = format_csv_row(r);
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), 10);
}

}  // namespace
}  // namespace ear::metrics
