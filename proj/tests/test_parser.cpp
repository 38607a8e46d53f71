// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "ear/pipeline.hpp"
#include "support/gradcheck.hpp"
#include "support/nn_oracle.hpp"

namespace ear::parser {
namespace {

using testing::grad_check;
using testing::loop_add;
using testing::loop_attention_block;
using testing::loop_layer_norm;
using testing::loop_linear;
using testing::Mat;
using testing::random_normal;
using testing::to_mat;

ParserConfig toy_config() {
  ParserConfig c;
  c.width = 8;
  c.heads = 2;
  c.ffn_expansion = 2;
  c.mlp_hidden = 6;
  c.dropout = 0.0;
  c.m_layers = 2;
  return c;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double max_abs_diff(const Mat& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - b(i, j)));
  return m;
}

TEST(Amdf, NullVisualStaticStreamLeavesResidualAndFfn) {
  std::mt19937_64 rng(1);
  ParserModel m(toy_config(), 5, 6, 3, 2);
  m.proj_v.weight.mutable_value() = Tensor::matrix(6, 8);
  m.proj_v.bias.mutable_value() = Tensor::matrix(1, 8);
  m.fuse_a.attn.v.bias.mutable_value() = Tensor::matrix(1, 8);
  const auto fused = m.fuse(constant(random_normal({8, 5}, rng)), constant(random_normal({8, 6}, rng)), 4,
                            nn::Context::eval());
  // every value row is zero, so attention returns the output-projection bias
  const Mat at = to_mat(fused.audio_temporal.value());
  Mat attn(at.size(), std::vector<double>(8));
  for (auto& r : attn)
    for (std::size_t j = 0; j < 8; ++j) r[j] = m.fuse_a.attn.o.bias.value()(0, j);
  const Mat h = loop_layer_norm(loop_add(at, attn), m.fuse_a.norm1);
  Mat hidden = loop_linear(h, m.fuse_a.ffn.fc1);
  for (auto& r : hidden)
    for (auto& v : r) v = std::max(v, 0.0);
  const Mat want = loop_layer_norm(loop_add(h, loop_linear(hidden, m.fuse_a.ffn.fc2)), m.fuse_a.norm2);
  EXPECT_LT(max_abs_diff(want, fused.audio.value()), 1e-12);
}

TEST(Amdf, KeysAreStaticProjections) {
  std::mt19937_64 rng(2);
  ParserModel m(toy_config(), 5, 6, 3, 3);
  const Tensor a = random_normal({8, 5}, rng), v = random_normal({8, 6}, rng);
  const auto fused = m.fuse(constant(a), constant(v), 4, nn::Context::eval());
  const Mat want = loop_attention_block(to_mat(fused.audio_temporal.value()), to_mat(fused.visual_static.value()),
                                        m.fuse_a, 4);
  EXPECT_LT(max_abs_diff(want, fused.audio.value()), 1e-10);
  const Mat want_v = loop_attention_block(to_mat(fused.visual_temporal.value()), to_mat(fused.audio_static.value()),
                                          m.fuse_v, 4);
  EXPECT_LT(max_abs_diff(want_v, fused.visual.value()), 1e-10);
}

TEST(Amdf, SingleSegmentAndShapeErrors) {
  std::mt19937_64 rng(3);
  ParserModel m(toy_config(), 5, 6, 3, 4);
  const auto fused = m.fuse(constant(random_normal({1, 5}, rng)), constant(random_normal({1, 6}, rng)), 1,
                            nn::Context::eval());
  EXPECT_EQ(fused.audio.dims(), (Dims{1, 8}));
  EXPECT_EQ(fused.visual.dims(), (Dims{1, 8}));
  const auto out = m.forward(constant(random_normal({1, 5}, rng)), constant(random_normal({1, 6}, rng)), 1,
                             nn::Context::eval());
  EXPECT_EQ(out.p.dims(), (Dims{1, 3}));
  EXPECT_THROW(m.fuse(constant(random_normal({4, 4}, rng)), constant(random_normal({4, 6}, rng)), 4, nn::Context::eval()),
               ShapeError);
  EXPECT_THROW(m.fuse(constant(random_normal({4, 5}, rng)), constant(random_normal({3, 6}, rng)), 3, nn::Context::eval()),
               ShapeError);
  EXPECT_THROW(m.fuse(constant(random_normal({6, 5}, rng)), constant(random_normal({6, 6}, rng)), 4, nn::Context::eval()),
               ShapeError);
}

TEST(Amdf, GradientCheck) {
  std::mt19937_64 rng(4);
  ParserModel m(toy_config(), 5, 6, 3, 5);
  const Var a = constant(random_normal({4, 5}, rng)), v = constant(random_normal({4, 6}, rng));
  const Tensor wa = random_normal({4, 8}, rng), wv = random_normal({4, 8}, rng);
  nn::ModuleState s;
  m.proj_a.collect("proj_a", s);
  m.proj_v.collect("proj_v", s);
  m.temporal_a.collect("temporal_a", s);
  m.temporal_v.collect("temporal_v", s);
  m.fuse_a.collect("fuse_a", s);
  m.fuse_v.collect("fuse_v", s);
  const auto res = grad_check(
      [&] {
        const auto f = m.fuse(a, v, 4, nn::Context::eval());
        return add(sum(mul(f.audio, constant(wa))), sum(mul(f.visual, constant(wv))));
      },
      s.params);
  EXPECT_LE(res.max_rel_error, 1e-4) << res.worst;
}

TEST(Decode, MatchesCompositionOracle) {
  std::mt19937_64 rng(5);
  ParserModel m(toy_config(), 5, 6, 3, 6);
  const Tensor fa = random_normal({8, 8}, rng), fv = random_normal({8, 8}, rng);
  const auto [f_av, f_va] = m.decode(constant(fa), constant(fv), 4, nn::Context::eval());
  auto mlp = [](const Mat& x, const Mlp& head) {
    Mat h = loop_linear(x, head.fc1);
    for (auto& r : h)
      for (auto& v : r) v = std::max(v, 0.0);
    return loop_linear(h, head.fc2);
  };
  EXPECT_LT(max_abs_diff(mlp(loop_attention_block(to_mat(fa), to_mat(fv), m.dec_a, 4), m.mlp_a), f_av.value()), 1e-10);
  EXPECT_LT(max_abs_diff(mlp(loop_attention_block(to_mat(fv), to_mat(fa), m.dec_v, 4), m.mlp_v), f_va.value()), 1e-10);
}

TEST(Decode, TiedWeightsAreSymmetric) {
  std::mt19937_64 rng(6);
  ParserModel m(toy_config(), 5, 6, 3, 7);
  m.dec_v = m.dec_a;
  m.mlp_v = m.mlp_a;
  const Tensor x = random_normal({6, 8}, rng);
  const auto [f_av, f_va] = m.decode(constant(x), constant(x), 3, nn::Context::eval());
  EXPECT_EQ(f_av.value(), f_va.value());
}

TEST(Decode, OutputWidthIsCategoryCount) {
  std::mt19937_64 rng(7);
  for (std::size_t d : {4u, 8u, 16u}) {
    ParserConfig c = toy_config();
    c.width = d;
    ParserModel m(c, 5, 6, 7, 8);
    const auto [f_av, f_va] = m.decode(constant(random_normal({6, d}, rng)), constant(random_normal({6, d}, rng)), 3,
                                       nn::Context::eval());
    EXPECT_EQ(f_av.dims(), (Dims{6, 7}));
    EXPECT_EQ(f_va.dims(), (Dims{6, 7}));
  }
}

void identity_units(ParserModel& m) {
  for (auto* stack : {&m.erm_a, &m.erm_v, &m.erm_av})
    for (auto& u : *stack) {
      u.set_identity_conv();
      u.adjacency.mutable_value() = Tensor::identity(u.side());
      u.gamma.mutable_value() = Tensor::matrix(1, u.side(), 1.0);
      u.bn.eps = 0.0;
    }
}

double leaky(double x, int k) {
  for (int i = 0; i < k; ++i) x = x > 0 ? x : 0.01 * x;
  return x;
}

TEST(Erm, IdentityStackAppliesOneLeakyReluPerUnit) {
  ParserConfig c = toy_config();
  c.erm_residual = false;
  c.m_layers = 3;
  for (ErmMode mode : {ErmMode::Interleaved, ErmMode::Stacked}) {
    c.erm = mode;
    std::mt19937_64 rng(8);
    ParserModel m(c, 5, 6, 4, 9);
    identity_units(m);
    const Tensor fa = random_normal({6, 4}, rng), fv = random_normal({6, 4}, rng);
    const auto [a, v] = m.relate(constant(fa), constant(fv), 3, nn::Context::eval());
    // each stream passes through its unimodal unit and the joint unit per layer
    for (std::size_t i = 0; i < fa.size(); ++i) {
      EXPECT_DOUBLE_EQ(a.value()[i], leaky(fa[i], 6));
      EXPECT_DOUBLE_EQ(v.value()[i], leaky(fv[i], 6));
    }
  }
}

TEST(Erm, ResidualUnitsStartAsIdentity) {
  std::mt19937_64 rng(9);
  ParserModel m(toy_config(), 5, 6, 4, 10);
  const Tensor fa = random_normal({6, 4}, rng), fv = random_normal({6, 4}, rng);
  const auto [a, v] = m.relate(constant(fa), constant(fv), 3, nn::Context::eval());
  // zero BN scale: each unit emits LeakyReLU(0) = 0 on top of the skip path
  EXPECT_EQ(a.value(), fa);
  EXPECT_EQ(v.value(), fv);
}

TEST(Erm, BlockDiagonalJointAdjacencyIsolatesAudio) {
  for (bool residual : {false, true}) {
    ParserConfig c = toy_config();
    c.erm_residual = residual;
    c.m_layers = 3;
    std::mt19937_64 rng(10);
    ParserModel m(c, 5, 6, 4, 11);
    for (auto& u : m.erm_av) {
      u.set_identity_conv();
      Tensor adj = random_normal({8, 8}, rng);
      for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j)
          if ((i < 4) != (j < 4)) adj(i, j) = 0.0;
      u.adjacency.mutable_value() = adj;
      u.gamma.mutable_value() = testing::random_uniform({1, 8}, rng, 0.5, 1.5);
      u.bn.running_mean = random_normal({1, 8}, rng);
    }
    const Tensor fa = random_normal({6, 4}, rng);
    const Tensor base = m.relate(constant(fa), constant(random_normal({6, 4}, rng)), 3, nn::Context::eval()).first.value();
    for (int trial = 0; trial < 3; ++trial) {
      const Tensor other = m.relate(constant(fa), constant(random_normal({6, 4}, rng, 5.0)), 3, nn::Context::eval()).first.value();
      EXPECT_EQ(base, other);
    }
  }
}

TEST(Erm, AudioFedVisualUnits) {
  ParserConfig c = toy_config();
  c.visual_units_read_audio = true;
  c.erm_residual = false;
  c.m_layers = 1;
  std::mt19937_64 rng(11);
  ParserModel m(c, 5, 6, 4, 12);
  identity_units(m);
  const Tensor fa = random_normal({6, 4}, rng);
  const auto [a, v] = m.relate(constant(fa), constant(random_normal({6, 4}, rng)), 3, nn::Context::eval());
  EXPECT_EQ(a.value(), v.value());
}

TEST(Erm, ShapeAndConfigErrors) {
  std::mt19937_64 rng(12);
  ParserModel m(toy_config(), 5, 6, 4, 13);
  EXPECT_THROW(m.relate(constant(random_normal({6, 3}, rng)), constant(random_normal({6, 4}, rng)), 3, nn::Context::eval()),
               ConfigError);
  ParserConfig c = toy_config();
  c.m_layers = 0;
  EXPECT_THROW(ParserModel(c, 5, 6, 4, 0), ConfigError);
  c.erm = ErmMode::Off;
  EXPECT_NO_THROW(ParserModel(c, 5, 6, 4, 0));
  EXPECT_THROW(ParserModel(toy_config(), 5, 6, 0, 0), ConfigError);
  EXPECT_EQ(ParserConfig{}.m_layers, 3u);
  EXPECT_THROW(parse_fusion("concat"), ConfigError);
  EXPECT_THROW(parse_erm("sideways"), ConfigError);
}

TEST(Erm, ShapePreservedForAnyLengthAndDepth) {
  std::mt19937_64 rng(13);
  for (std::size_t layers : {1u, 2u, 4u}) {
    ParserConfig c = toy_config();
    c.m_layers = layers;
    ParserModel m(c, 5, 6, 3, 14);
    for (std::size_t t : {1u, 2u, 7u}) {
      std::mt19937_64 drop(0);
      const auto [a, v] = m.relate(constant(random_normal({2 * t, 3}, rng)), constant(random_normal({2 * t, 3}, rng)), t,
                                   nn::Context::train(drop));
      EXPECT_EQ(a.dims(), (Dims{2 * t, 3}));
      EXPECT_EQ(v.dims(), (Dims{2 * t, 3}));
    }
  }
}

TEST(Parse, ZeroClassifierGivesOneHalf) {
  std::mt19937_64 rng(14);
  ParserConfig c = toy_config();
  c.zero_init_classifier = true;
  ParserModel m(c, 5, 6, 3, 15);
  const auto out = m.forward(constant(random_normal({8, 5}, rng)), constant(random_normal({8, 6}, rng)), 4,
                             nn::Context::eval());
  for (const Var* p : {&out.p_a, &out.p_v, &out.p})
    for (double v : p->value().values()) EXPECT_EQ(v, 0.5);
  EXPECT_EQ(out.p.dims(), (Dims{2, 3}));
}

TEST(Parse, EvalIsDeterministicAndProbabilitiesBounded) {
  std::mt19937_64 rng(15);
  for (Fusion f : {Fusion::Amdf, Fusion::MsaMca, Fusion::Han}) {
    ParserConfig c;
    c.fusion = f;
    ParserModel m(c, 5, 6, 3, 16);
    const Var a = constant(random_normal({10, 5}, rng)), v = constant(random_normal({10, 6}, rng));
    const auto o1 = m.forward(a, v, 5, nn::Context::eval());
    const auto o2 = m.forward(a, v, 5, nn::Context::eval());
    EXPECT_EQ(o1.p_a.value(), o2.p_a.value());
    EXPECT_EQ(o1.p.value(), o2.p.value());
    for (const Var* p : {&o1.p_a, &o1.p_v, &o1.p})
      for (double x : p->value().values()) {
        EXPECT_GT(x, 0.0);
        EXPECT_LT(x, 1.0);
      }
    // video probability inside the hull of the pooled segment probabilities
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t k = 0; k < 3; ++k) {
        double lo = 1.0, hi = 0.0;
        for (std::size_t t = 0; t < 5; ++t)
          for (const Var* p : {&o1.p_a, &o1.p_v}) {
            lo = std::min(lo, p->value()(b * 5 + t, k));
            hi = std::max(hi, p->value()(b * 5 + t, k));
          }
        EXPECT_GE(o1.p.value()(b, k), lo - 1e-12);
        EXPECT_LE(o1.p.value()(b, k), hi + 1e-12);
      }
  }
}

nn::ModuleState whole_state(ParserModel& m) { return m.state(); }

TEST(Parse, WholeModelGradientCheck) {
  std::mt19937_64 rng(16);
  for (bool training : {false, true}) {
    ParserModel m(toy_config(), 4, 3, 2, 17);
    // zero BN scale puts every LeakyReLU input on its kink; move off it
    for (auto* stack : {&m.erm_a, &m.erm_v, &m.erm_av})
      for (auto& u : *stack) {
        u.gamma.mutable_value() = testing::random_uniform({1, u.side()}, rng, 0.5, 1.5);
        u.beta.mutable_value() = random_normal({1, u.side()}, rng, 0.1);
      }
    nn::ModuleState s = whole_state(m);
    const Var a = constant(random_normal({6, 4}, rng)), v = constant(random_normal({6, 3}, rng));
    const Tensor w1 = random_normal({6, 2}, rng), w2 = random_normal({6, 2}, rng), w3 = random_normal({2, 2}, rng);
    const auto res = grad_check(
        [&] {
          std::mt19937_64 drop(0);
          const auto ctx = training ? nn::Context::train(drop) : nn::Context::eval();
          const auto o = m.forward(a, v, 3, ctx);
          return add(add(sum(mul(o.p_a, constant(w1))), sum(mul(o.p_v, constant(w2)))), sum(mul(o.p, constant(w3))));
        },
        s.params);
    EXPECT_LE(res.max_rel_error, 1e-4) << (training ? "train: " : "eval: ") << res.worst;
  }
}

TEST(Parse, SaveLoadRoundTrip) {
  std::mt19937_64 rng(17);
  ParserConfig c = toy_config();
  c.fusion = Fusion::MsaMca;
  c.erm = ErmMode::Stacked;
  ParserModel m(c, 5, 6, 3, 18);
  const Var a = constant(random_normal({8, 5}, rng)), v = constant(random_normal({8, 6}, rng));
  std::mt19937_64 drop(0);
  m.forward(a, v, 4, nn::Context::train(drop));  // moves BN running statistics
  const auto path = std::filesystem::temp_directory_path() / "ear_parser_roundtrip.json";
  m.save(path);
  ParserModel back = ParserModel::load(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.cfg.fusion, Fusion::MsaMca);
  EXPECT_EQ(back.cfg.erm, ErmMode::Stacked);
  EXPECT_EQ(m.forward(a, v, 4, nn::Context::eval()).p.value(), back.forward(a, v, 4, nn::Context::eval()).p.value());
  json j = m.to_json();
  j["kind"] = "generator";
  EXPECT_THROW(ParserModel::from_json(j), FormatError);
}

TEST(Parse, ConfigJsonRoundTrip) {
  ParserConfig c;
  c.width = 12;
  c.fusion = Fusion::Han;
  c.erm = ErmMode::Off;
  c.erm_residual = false;
  c.visual_units_read_audio = true;
  const ParserConfig back = json(c).get<ParserConfig>();
  EXPECT_EQ(json(back), json(c));
}

TEST(Parse, OverfitsTwentyVideos) {
  io::SyntheticSpec spec;
  spec.seed = 5;
  spec.num_pretrain = 1;
  spec.num_train = 20;
  spec.num_test = 1;
  auto corpus = io::synthesize_corpus(spec).train;
  for (auto& v : corpus.videos) {
    v.pseudo_audio = v.gt_audio;
    v.pseudo_visual = v.gt_visual;
  }
  train::TrainConfig tcfg = train::desk_parser_preset();
  tcfg.epochs = 67;  // 3 batches of 8 per epoch: ~200 steps
  tcfg.optim.weight_decay = 0.0;
  ParserConfig pcfg;
  pcfg.dropout = 0.0;
  auto r = pipeline::train_parser(corpus, pcfg, {}, tcfg);
  ASSERT_GE(r.history.step_loss.size(), 200u);
  const auto probs = pipeline::parse_corpus(r.model, corpus);
  std::size_t hit = 0, cells = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto& v = corpus.videos[i];
    for (std::size_t k = 0; k < v.gt_audio->size(); ++k) {
      hit += ((probs[i].audio[k] >= 0.5) == ((*v.gt_audio)[k] != 0.0));
      hit += ((probs[i].visual[k] >= 0.5) == ((*v.gt_visual)[k] != 0.0));
      cells += 2;
    }
  }
  EXPECT_GT(static_cast<double>(hit) / static_cast<double>(cells), 0.95);
}

}  // namespace
}  // namespace ear::parser
