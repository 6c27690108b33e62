// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nexus/nexus.hpp"
#include "support/gradcheck.hpp"

using namespace nexus;
using nexus::testkit::gradcheck;
using nexus::testkit::probe_sum;

namespace {

Tensor<double> T2(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor<double>({r, c}, std::move(v)); }

constexpr double kGradTol = 1e-4;

}  // namespace

TEST(Matmul, IdentityAndHandValues) {
  auto y = matmul(T2(2, 2, {1, 0, 0, 1}), T2(2, 1, {3, 4}));
  EXPECT_EQ(y.shape(), (Shape{2, 1}));
  EXPECT_EQ(y.data()[0], 3.0);
  EXPECT_EQ(y.data()[1], 4.0);
  EXPECT_EQ(matmul(T2(1, 2, {1, 2}), T2(2, 1, {3, 4})).item(), 11.0);
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  try {
    matmul(T2(2, 3, std::vector<double>(6, 1.0)), T2(2, 2, std::vector<double>(4, 1.0)));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2, 2]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradOfSumIsOnesTimesBTransposed) {
  Rng rng(1);
  auto a = Tensor<double>::randn({4, 5}, 1.0, rng, true);
  auto b = Tensor<double>::randn({5, 3}, 1.0, rng);
  Tape<double> tape;
  {
    TapeScope<double> s(tape);
    backward(sum(matmul(a, b)));
  }
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double want = 0;
      for (std::size_t c = 0; c < 3; ++c) want += b.data()[j * 3 + c];
      EXPECT_NEAR(a.grad()[i * 5 + j], want, 1e-12);
    }
  auto r = gradcheck([&] { return sum(matmul(a, b)); }, {{"a", a}, {"b", b}});
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST(Matmul, BatchedAndTransposedGradients) {
  Rng rng(2);
  auto a = Tensor<double>::randn({2, 3, 4}, 1.0, rng);
  auto b = Tensor<double>::randn({4, 5}, 1.0, rng);
  auto c = Tensor<double>::randn({6, 4}, 1.0, rng);
  auto r = gradcheck([&] { return probe_sum(matmul(a, b)); }, {{"a", a}, {"b", b}});
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
  r = gradcheck([&] { return probe_sum(matmul_transposed(a, c)); }, {{"a", a}, {"c", c}});
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST(Softmax, ClosedForms) {
  auto u = softmax(Tensor<double>({3}, std::vector<double>{0, 0, 0}), 0);
  for (double v : u.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  auto big = softmax(Tensor<double>({3}, std::vector<double>{1000, 1000, 1000}), 0);
  for (double v : big.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  auto two = softmax(Tensor<double>({2}, std::vector<double>{std::log(2.0), 0}), 0);
  EXPECT_NEAR(two.data()[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(two.data()[1], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t rows = 1 + trial % 7, n = 2 + trial % 9;
    auto x = Tensor<double>::randn({rows, n}, 0.5 + trial % 5, rng);
    const double c = std::uniform_real_distribution<double>(-100, 100)(rng);
    auto p = softmax(x, 1);
    auto q = softmax(add(x, Tensor<double>(x.shape(), c)), 1);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double v = p.data()[r * n + i];
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
        EXPECT_NEAR(v, q.data()[r * n + i], 1e-7);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, GradientAlongEitherAxis) {
  Rng rng(4);
  auto x = Tensor<double>::randn({3, 4}, 1.0, rng);
  for (std::size_t axis : {0u, 1u}) {
    auto r = gradcheck([&] { return probe_sum(softmax(x, axis)); }, {{"x", x}});
    EXPECT_LT(r.max_rel_error, kGradTol) << "axis " << axis << " " << r.worst;
  }
}

TEST(Swiglu, GateHalfZeroGivesZero) {
  auto y = swiglu(Tensor<double>({1, 4}, std::vector<double>{0, 0, 5, -7}));
  EXPECT_EQ(y.shape(), (Shape{1, 2}));
  EXPECT_EQ(y.data()[0], 0.0);
  EXPECT_EQ(y.data()[1], 0.0);
}

TEST(Swiglu, SaturatesToIdentity) {
  auto y = swiglu(Tensor<double>({2}, std::vector<double>{30.0, 1.0}));
  EXPECT_NEAR(y.item(), 30.0, 1e-9);
}

TEST(Swiglu, OddWidthIsShapeError) {
  EXPECT_THROW(swiglu(Tensor<double>({2, 3})), ShapeError);
}

TEST(Swiglu, Gradient) {
  Rng rng(5);
  auto x = Tensor<double>::randn({3, 8}, 2.0, rng);
  auto r = gradcheck([&] { return probe_sum(swiglu(x)); }, {{"x", x}});
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST(TopK, Examples) {
  auto r = top_k(Tensor<double>({3}, std::vector<double>{0.1, 0.7, 0.2}), 1);
  EXPECT_EQ(r.indices[0], 1u);
  EXPECT_EQ(r.values[0], 0.7);
  EXPECT_EQ(top_k(Tensor<double>({2}, std::vector<double>{0.5, 0.5}), 1).indices[0], 0u);
  auto all = top_k(Tensor<double>({4}, std::vector<double>{0.3, 0.9, 0.1, 0.5}), 4);
  EXPECT_EQ(all.indices, (std::vector<std::size_t>{1, 3, 0, 2}));
  EXPECT_THROW(top_k(Tensor<double>({2}), 3), ArgumentError);
}

TEST(TopK, PermutationConsistent) {
  Rng rng(6);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + trial % 7, k = 1 + trial % n;
    auto x = Tensor<double>::randn({n}, 1.0, rng);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> permuted(n);
    for (std::size_t i = 0; i < n; ++i) permuted[perm[i]] = x.data()[i];  // value i moves to slot perm[i]
    auto a = top_k(x, k), b = top_k(Tensor<double>({n}, permuted), k);
    for (std::size_t s = 0; s < k; ++s) EXPECT_EQ(perm[a.indices[s]], b.indices[s]);
  }
}

TEST(Backward, SumAndSquares) {
  Rng rng(7);
  auto w = Tensor<double>::randn({2, 3}, 1.0, rng, true);
  {
    Tape<double> tape;
    TapeScope<double> s(tape);
    backward(sum(w));
  }
  for (double g : w.grad()) EXPECT_EQ(g, 1.0);
  w.clear_grad();
  {
    Tape<double> tape;
    TapeScope<double> s(tape);
    backward(sum(mul(w, w)));
  }
  for (std::size_t i = 0; i < w.numel(); ++i) EXPECT_DOUBLE_EQ(w.grad()[i], 2.0 * w.data()[i]);
}

TEST(Backward, AccumulatesAcrossUses) {
  auto w = Tensor<double>({2}, std::vector<double>{1.5, -2.0}, true);
  Tape<double> tape;
  TapeScope<double> s(tape);
  backward(add(sum(w), sum(scale(w, 3.0))));
  EXPECT_EQ(w.grad()[0], 4.0);
  EXPECT_EQ(w.grad()[1], 4.0);
}

TEST(Backward, RejectsNonScalarAndUntapedLoss) {
  auto w = Tensor<double>({2}, std::vector<double>{1, 2}, true);
  Tape<double> tape;
  {
    TapeScope<double> s(tape);
    EXPECT_THROW(backward(mul(w, w)), ArgumentError);
  }
  auto untaped = sum(w);
  EXPECT_THROW(tape.backward(untaped), ArgumentError);
  EXPECT_THROW(backward(untaped), ArgumentError);  // no active tape
}

TEST(Backward, NoGradScopeRecordsNothing) {
  auto w = Tensor<double>({2}, std::vector<double>{1, 2}, true);
  Tape<double> tape;
  TapeScope<double> s(tape);
  {
    NoGradScope<double> ng;
    auto y = sum(mul(w, w));
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Ops, ElementwiseAndReductionGradients) {
  Rng rng(8);
  auto a = Tensor<double>::randn({3, 4}, 1.0, rng);
  auto b = Tensor<double>::randn({3, 4}, 1.0, rng);
  auto r = gradcheck(
      [&] { return add(probe_sum(sub(mul(a, b), scale(a, 0.5))), mean(reshape(b, Shape{12}))); },
      {{"a", a}, {"b", b}});
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST(Ops, RmsNormRotaryAttentionGradients) {
  Rng rng(9);
  auto x = Tensor<double>::randn({2, 5, 8}, 1.0, rng);
  auto w = Tensor<double>::uniform({8}, 0.5, 1.5, rng);
  auto r = gradcheck([&] { return probe_sum(rms_norm(x, w, 1e-5)); }, {{"x", x}, {"w", w}});
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
  r = gradcheck([&] { return probe_sum(rotary(x, 2, 10000.0)); }, {{"x", x}});
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
  auto k = Tensor<double>::randn({2, 5, 8}, 1.0, rng);
  auto v = Tensor<double>::randn({2, 5, 8}, 1.0, rng);
  r = gradcheck([&] { return probe_sum(causal_attention(x, k, v, 2)); }, {{"q", x}, {"k", k}, {"v", v}});
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST(Ops, EmbeddingCrossEntropyAndRowOpGradients) {
  Rng rng(10);
  auto table = Tensor<double>::randn({7, 4}, 1.0, rng);
  std::vector<std::int32_t> ids{3, 1, 3, 6, 0, 2};
  auto r = gradcheck([&] { return probe_sum(embedding(table, ids, Shape{2, 3})); }, {{"table", table}});
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;

  auto logits = Tensor<double>::randn({2, 3, 7}, 1.5, rng);
  std::vector<std::int32_t> targets{1, 6, -1, 0, 3, 3};
  r = gradcheck([&] { return cross_entropy(logits, targets, -1); }, {{"logits", logits}});
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;

  auto x = Tensor<double>::randn({5, 3}, 1.0, rng);
  auto g = Tensor<double>::randn({3}, 1.0, rng);
  std::vector<std::size_t> rows{4, 0, 4}, cols{2, 1, 0};
  r = gradcheck(
      [&] {
        auto picked = index_select_rows(x, rows);
        auto scaled = scale_rows(picked, gather_elements(x, rows, cols));
        return probe_sum(index_add_rows(x, rows, add(scaled, scale_rows(picked, g))));
      },
      {{"x", x}, {"g", g}});
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST(Ops, CrossEntropyMatchesLoopOracle) {
  Rng rng(11);
  auto logits = Tensor<double>::randn({4, 9}, 2.0, rng);
  std::vector<std::int32_t> targets{8, 0, 5, 5};
  double oracle = 0;
  for (std::size_t r = 0; r < 4; ++r) {
    double z = 0;
    for (std::size_t j = 0; j < 9; ++j) z += std::exp(logits.data()[r * 9 + j]);
    oracle += std::log(z) - logits.data()[r * 9 + targets[r]];
  }
  EXPECT_NEAR(cross_entropy(logits, targets, -1).item(), oracle / 4, 1e-12);
}

TEST(Determinism, SameSeedSameBits) {
  auto run = [] {
    Rng rng(12);
    auto a = Tensor<float>::randn({16, 16}, 1.0f, rng);
    auto b = Tensor<float>::randn({16, 16}, 1.0f, rng);
    return softmax(matmul(swiglu(matmul(a, Tensor<float>::randn({16, 32}, 1.0f, rng))), b), 1);
  };
  EXPECT_TRUE(run().bit_equal(run()));
}

TEST(TensorBasics, ConstructionErrorsAndClone) {
  EXPECT_THROW(Tensor<double>(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Tensor<double>(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  auto a = Tensor<double>({2}, std::vector<double>{1, 2}, true);
  auto c = a.clone();
  EXPECT_FALSE(c.same_storage(a));
  EXPECT_TRUE(c.bit_equal(a));
  EXPECT_TRUE(c.requires_grad());
  EXPECT_FALSE(a.detach().requires_grad());
  EXPECT_THROW(a.item(), ArgumentError);
}
