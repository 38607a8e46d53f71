// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ear/autodiff.hpp"
#include "support/gradcheck.hpp"

namespace ear {
namespace {

using testing::grad_check;
using testing::random_normal;

TEST(Matmul, IdentityAndProjector) {
  Var a = constant(Tensor::identity(2));
  Var b = constant(Tensor::matrix({{1, 2}, {3, 4}}));
  EXPECT_EQ(matmul(a, b).value(), b.value());

  Var p = constant(Tensor::matrix({{1, 0}, {0, 0}}));
  Var col = constant(Tensor::matrix({{5}, {7}}));
  EXPECT_EQ(matmul(p, col).value(), Tensor::matrix({{5}, {0}}));
}

TEST(Matmul, MatchesTripleLoop) {
  std::mt19937_64 rng(11);
  Tensor a = random_normal({3, 4}, rng), b = random_normal({4, 2}, rng);
  Tensor expected = Tensor::matrix(3, 2);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 4; ++k) s += a(i, k) * b(k, j);
      expected(i, j) = s;
    }
  EXPECT_LT(max_abs_diff(matmul(constant(a), constant(b)).value(), expected), 1e-12);
}

TEST(Matmul, ShapeErrorNamesBothOperands) {
  try {
    matmul(constant(Tensor::matrix(2, 3)), constant(Tensor::matrix(4, 2)));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x2]"), std::string::npos);
  }
}

TEST(Sigmoid, ReferenceValues) {
  Var x = constant(Tensor::row({0.0, 50.0, 1.0, -50.0}));
  const Tensor y = sigmoid(x).value();
  EXPECT_EQ(y[0], 0.5);
  EXPECT_NEAR(y[1], 1.0, 1e-15);
  EXPECT_NEAR(y[2], 0.7310585786300049, 1e-15);
  EXPECT_GT(y[3], 0.0);
}

TEST(Softmax, ReferenceValues) {
  Tensor y = softmax(constant(Tensor::row({0, 0, 0})), 1).value();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y[i], 1.0 / 3.0, 1e-15);

  y = softmax(constant(Tensor::row({1000, 0, 0})), 1).value();
  EXPECT_NEAR(y[0], 1.0, 1e-12);
  EXPECT_NEAR(y[1], 0.0, 1e-12);

  y = softmax(constant(Tensor::row({1, 2, 3})), 1).value();
  EXPECT_NEAR(y[0], 0.09003057317038046, 1e-15);
  EXPECT_NEAR(y[1], 0.24472847105479765, 1e-15);
  EXPECT_NEAR(y[2], 0.6652409557748219, 1e-15);
}

TEST(Softmax, RowsSumToOneForAnyFiniteInput) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor x = random_normal({5, 7}, rng, trial % 2 ? 1.0 : 300.0);
    for (std::size_t axis : {0u, 1u}) {
      Tensor y = softmax(constant(x), axis).value();
      const std::size_t outer = axis == 1 ? 5 : 7, inner = axis == 1 ? 7 : 5;
      for (std::size_t o = 0; o < outer; ++o) {
        double s = 0.0;
        for (std::size_t i = 0; i < inner; ++i) {
          const double v = axis == 1 ? y(o, i) : y(i, o);
          EXPECT_GE(v, 0.0);
          s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
    }
  }
}

TEST(Softmax, InvalidAxis) { EXPECT_THROW(softmax(constant(Tensor::matrix(2, 2)), 2), ShapeError); }

TEST(Bce, ClosedForms) {
  Tensor half = Tensor::matrix(2, 3, 0.5);
  Tensor ones = Tensor::matrix(2, 3, 1.0);
  EXPECT_NEAR(bce(constant(half), ones).value()[0], std::log(2.0), 1e-15);
  EXPECT_LE(bce(constant(ones), ones).value()[0], 1e-6);

  Tensor w = Tensor::row({2, 1});
  EXPECT_NEAR(bce(constant(Tensor::row({0.9, 0.1})), Tensor::row({1, 0}), &w).value()[0], 0.15804077348673945,
              1e-14);
}

TEST(Bce, ShapeMismatch) {
  EXPECT_THROW(bce(constant(Tensor::matrix(2, 2, 0.5)), Tensor::matrix(2, 3)), ShapeError);
}

TEST(Backward, LinearAndQuadratic) {
  Var x = parameter(Tensor::row({1.5, -2.0, 0.25}));
  {
    Tape tape;
    Var loss;
    {
      TapeScope scope(tape);
      loss = sum(x);
    }
    tape.backward(loss);
    EXPECT_EQ(x.grad(), Tensor::row({1, 1, 1}));
    EXPECT_EQ(tape.size(), 0u);
  }
  x.zero_grad();
  {
    Tape tape;
    Var loss;
    {
      TapeScope scope(tape);
      loss = scale(sum(mul(x, x)), 0.5);
    }
    tape.backward(loss);
    EXPECT_LT(max_abs_diff(x.grad(), x.value()), 1e-15);
  }
}

TEST(Backward, NonScalarLossIsContractError) {
  Var x = parameter(Tensor::row({1, 2}));
  Tape tape;
  Var y;
  {
    TapeScope scope(tape);
    y = scale(x, 2.0);
  }
  EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Backward, ReverseOrderReusesSharedSubexpressions) {
  // y = x*x used twice: d/dx sum(y + y) = 4x
  Var x = parameter(Tensor::row({3.0}));
  Tape tape;
  Var loss;
  {
    TapeScope scope(tape);
    Var y = mul(x, x);
    loss = sum(add(y, y));
  }
  tape.backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Backward, NoTapeNoRecording) {
  Var x = parameter(Tensor::row({1, 2}));
  Var y = sigmoid(x);
  EXPECT_FALSE(y.requires_grad());
}

// Finite-difference check of every primitive on random shapes.
class PrimitiveGrad : public ::testing::Test {
 protected:
  std::mt19937_64 rng{2024};
  Var a = parameter(random_normal({4, 3}, rng));
  Var b = parameter(random_normal({4, 3}, rng));
  Var w = parameter(random_normal({3, 5}, rng));
  Var row = parameter(random_normal({1, 3}, rng));

  void expect_ok(const std::function<Var()>& f, std::vector<nn::ParameterRef> params) {
    auto r = grad_check(f, params);
    EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
    EXPECT_GT(r.entries, 0u);
  }
};

TEST_F(PrimitiveGrad, Matmuls) {
  expect_ok([&] { return sum(sigmoid(matmul(a, w))); }, {{"a", a}, {"w", w}});
  expect_ok([&] { return sum(sigmoid(matmul_nt(a, b))); }, {{"a", a}, {"b", b}});
  expect_ok([&] { return sum(sigmoid(transpose(a))); }, {{"a", a}});
}

TEST_F(PrimitiveGrad, Elementwise) {
  expect_ok([&] { return sum(mul(add(a, b), sub(a, b))); }, {{"a", a}, {"b", b}});
  Var pos = parameter(testing::random_uniform({4, 3}, rng, 0.5, 2.0));
  expect_ok([&] { return sum(div(a, pos)); }, {{"a", a}, {"pos", pos}});
  expect_ok([&] { return sum(mul(add_row(a, row), a)); }, {{"a", a}, {"row", row}});
  expect_ok([&] { return sum(mul(leaky_relu(a, 0.01), relu(b))); }, {{"a", a}, {"b", b}});
  expect_ok([&] { return sum(mul(add_scalar(scale(a, -2.0), 0.3), b)); }, {{"a", a}, {"b", b}});
}

TEST_F(PrimitiveGrad, Softmaxes) {
  Tensor target = testing::random_uniform({4, 3}, rng);
  expect_ok([&] { return bce(softmax(a, 1), target); }, {{"a", a}});
  expect_ok([&] { return bce(softmax(a, 0), target); }, {{"a", a}});
  expect_ok([&] { return bce(sequence_softmax(a, 2), target); }, {{"a", a}});
}

TEST_F(PrimitiveGrad, Norms) {
  Var g = parameter(random_normal({1, 3}, rng));
  Var bb = parameter(random_normal({1, 3}, rng));
  Tensor weights = random_normal({4, 3}, rng);
  Var wv = constant(weights);
  expect_ok([&] { return sum(mul(layer_norm(a, g, bb), wv)); }, {{"a", a}, {"g", g}, {"b", bb}});
  BatchNormState st{Tensor::matrix(1, 3), Tensor::matrix(1, 3, 1.0)};
  expect_ok([&] { return sum(mul(batch_norm(a, g, bb, st, true), wv)); }, {{"a", a}, {"g", g}, {"b", bb}});
  expect_ok([&] { return sum(mul(batch_norm(a, g, bb, st, false), wv)); }, {{"a", a}, {"g", g}, {"b", bb}});
}

TEST_F(PrimitiveGrad, Structural) {
  Tensor weights = random_normal({4, 6}, rng);
  Var wv = constant(weights);
  expect_ok([&] { return sum(mul(concat_cols({a, b}), wv)); }, {{"a", a}, {"b", b}});
  expect_ok([&] { return sum(sigmoid(slice_cols(a, 1, 2))); }, {{"a", a}});
  expect_ok([&] { return sum(sigmoid(slice_rows(a, 1, 2))); }, {{"a", a}});
  std::vector<Var> parts{a, b};
  expect_ok([&] { return sum(sigmoid(concat_rows(std::span<const Var>(parts)))); }, {{"a", a}, {"b", b}});
  std::vector<std::size_t> idx{3, 0, 0, 2};
  expect_ok([&] { return sum(mul(gather_rows(a, idx), b)); }, {{"a", a}, {"b", b}});
  expect_ok([&] { return sum(mul(shift_rows(a, 1, 2), b)); }, {{"a", a}, {"b", b}});
  expect_ok([&] { return sum(mul(shift_rows(a, -1, 4), b)); }, {{"a", a}, {"b", b}});
  expect_ok([&] { return sum(sigmoid(sequence_sum(a, 2))); }, {{"a", a}});
}

TEST_F(PrimitiveGrad, AttentionAndBce) {
  Var q = parameter(random_normal({4, 4}, rng));
  Var k = parameter(random_normal({4, 4}, rng));
  Var v = parameter(random_normal({4, 4}, rng));
  Tensor weights = random_normal({4, 4}, rng);
  Var wv = constant(weights);
  expect_ok([&] { return sum(mul(scaled_dot_attention(q, k, v, 2, 2), wv)); }, {{"q", q}, {"k", k}, {"v", v}});
  expect_ok([&] { return sum(mul(scaled_dot_attention(q, k, v, 1, 4), wv)); }, {{"q", q}, {"k", k}, {"v", v}});
  Tensor target = testing::random_uniform({4, 3}, rng);
  Tensor bw = testing::random_uniform({4, 3}, rng, 0.5, 2.0);
  expect_ok([&] { return bce(sigmoid(a), target, &bw); }, {{"a", a}});
}

TEST(ShiftRows, ZeroPadsAtSequenceBoundaries) {
  Var x = constant(Tensor::matrix({{1}, {2}, {3}, {4}}));
  EXPECT_EQ(shift_rows(x, 1, 2).value(), Tensor::matrix({{2}, {0}, {4}, {0}}));
  EXPECT_EQ(shift_rows(x, -1, 2).value(), Tensor::matrix({{0}, {1}, {0}, {3}}));
}

TEST(Determinism, IdenticalSeedBitIdenticalForward) {
  auto run = [] {
    std::mt19937_64 rng(99);
    Var x = constant(random_normal({6, 4}, rng));
    Var w = constant(random_normal({4, 4}, rng));
    return scaled_dot_attention(matmul(x, w), x, x, 2, 3).value();
  };
  EXPECT_EQ(run(), run());
}

}  // namespace
}  // namespace ear
