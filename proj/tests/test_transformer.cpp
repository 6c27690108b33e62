// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "nexus/nexus.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

using namespace nexus;

namespace {

Batch random_batch(std::size_t batch, std::size_t seq, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<TokenId> id(0, kPad - 1);
  Batch b;
  b.batch = batch;
  b.seq_len = seq;
  for (std::size_t i = 0; i < batch * seq; ++i) {
    b.token_ids.push_back(id(rng));
    b.targets.push_back(id(rng));
  }
  return b;
}

}  // namespace

TEST(DenseForward, ShapeAndSequenceLimit) {
  auto m = DenseModelState<float>::init(testkit::tiny_config(), 1);
  auto logits = forward(m, random_batch(2, 5, 1));
  EXPECT_EQ(logits.shape(), (Shape{2, 5, kVocabSize}));
  EXPECT_THROW(forward(m, random_batch(1, 17, 1)), ArgumentError);
}

TEST(DenseForward, Causal) {
  auto m = DenseModelState<double>::init(testkit::tiny_config(), 2);
  auto b = random_batch(1, 12, 3);
  auto base = forward(m, b);
  for (std::size_t t : {0u, 5u, 11u}) {
    auto p = b;
    p.token_ids[t] = (p.token_ids[t] + 7) % 256;
    auto out = forward(m, p);
    const std::size_t V = kVocabSize;
    for (std::size_t s = 0; s < t; ++s)
      for (std::size_t v = 0; v < V; ++v)
        ASSERT_EQ(base.data()[s * V + v], out.data()[s * V + v]) << "position " << s << " saw token " << t;
    bool changed = false;
    for (std::size_t v = 0; v < V; ++v) changed |= base.data()[t * V + v] != out.data()[t * V + v];
    EXPECT_TRUE(changed);
  }
}

TEST(DenseForward, ZeroOutputProjectionsLeaveResidualPath) {
  auto cfg = testkit::tiny_config();
  auto m = DenseModelState<double>::init(cfg, 4);
  for (auto& b : m.blocks) {
    std::fill(b.attn.wo.mutable_data().begin(), b.attn.wo.mutable_data().end(), 0.0);
    std::fill(b.ffn.down.mutable_data().begin(), b.ffn.down.mutable_data().end(), 0.0);
  }
  auto b = random_batch(1, 6, 5);
  auto logits = forward(m, b);
  const std::size_t h = cfg.d_model, V = kVocabSize;
  for (std::size_t t = 0; t < 6; ++t) {
    const double* e = m.tok_embeddings.data().data() + b.token_ids[t] * h;
    double ms = 0;
    for (std::size_t j = 0; j < h; ++j) ms += e[j] * e[j];
    const double inv = 1.0 / std::sqrt(ms / h + cfg.norm_eps);
    for (std::size_t v = 0; v < V; ++v) {
      double want = 0;
      for (std::size_t j = 0; j < h; ++j) want += e[j] * inv * m.final_norm.data()[j] * m.tok_embeddings.data()[v * h + j];
      ASSERT_NEAR(logits.data()[t * V + v], want, 1e-12);
    }
  }
}

TEST(DenseForward, GradientOfEveryParameter) {
  auto cfg = testkit::tiny_config();
  auto m = DenseModelState<double>::init(cfg, 6);
  testkit::jitter(m, 0.05, 7);  // move norms off 1 so their grads are generic
  auto b = random_batch(2, 5, 8);
  std::vector<std::pair<std::string, Tensor<double>>> params;
  m.for_each_parameter([&](const std::string& n, Tensor<double>& t) { params.emplace_back(n, t); });
  testkit::GradCheckOptions opt;
  opt.max_entries_per_param = 200;
  auto r = testkit::gradcheck([&] { return cross_entropy_loss(forward(m, b), b.targets); }, params, opt);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  EXPECT_GT(r.checked, 1000u);
}

TEST(CrossEntropy, ClosedForms) {
  Tensor<double> uniform({1, 3, kVocabSize});
  std::vector<TokenId> targets{5, 17, 200};
  EXPECT_NEAR(cross_entropy_loss(uniform, targets).item(), std::log(259.0), 1e-12);
  std::vector<double> v(3 * kVocabSize, 0.0);
  for (std::size_t i = 0; i < 3; ++i) v[i * kVocabSize + targets[i]] = 60.0;
  EXPECT_LT(cross_entropy_loss(Tensor<double>({3, kVocabSize}, v), targets).item(), 1e-20);
}

TEST(CrossEntropy, PadIgnoredAndAllPadRejected) {
  Rng rng(9);
  auto logits = Tensor<double>::randn({3, kVocabSize}, 1.0, rng);
  std::vector<TokenId> with_pad{4, kPad, 9}, only{4, 9};
  auto sub = Tensor<double>({2, kVocabSize}, [&] {
    std::vector<double> d(logits.data().begin(), logits.data().begin() + kVocabSize);
    d.insert(d.end(), logits.data().begin() + 2 * kVocabSize, logits.data().end());
    return d;
  }());
  EXPECT_NEAR(cross_entropy_loss(logits, with_pad).item(), cross_entropy_loss(sub, only).item(), 1e-12);
  std::vector<TokenId> all_pad{kPad, kPad, kPad};
  EXPECT_ANY_THROW(cross_entropy_loss(logits, all_pad));
}

TEST(DenseModel, DeterministicAndExpertInitMatchesSeed) {
  auto cfg = testkit::tiny_config();
  auto a = DenseModelState<float>::init(cfg, 11), b = DenseModelState<float>::init(cfg, 11);
  auto batch = random_batch(2, 8, 12);
  EXPECT_TRUE(forward(a, batch).bit_equal(forward(b, batch)));
  auto expert = a.clone();
  expert.domain = "alpha";
  EXPECT_TRUE(forward(expert, batch).bit_equal(forward(a, batch)));
  EXPECT_EQ(state_hash(expert), state_hash(a));
  EXPECT_NE(state_hash(DenseModelState<float>::init(cfg, 12)), state_hash(a));
}

TEST(DenseModel, ConfigValidation) {
  auto cfg = testkit::tiny_config();
  cfg.n_heads = 5;
  EXPECT_ANY_THROW(DenseModelState<float>::init(cfg, 1));
  cfg = testkit::tiny_config();
  auto other = cfg;
  other.d_ffn = 32;
  auto diff = config_diff(cfg, other);
  ASSERT_EQ(diff.size(), 1u);
  EXPECT_NE(diff[0].find("d_ffn"), std::string::npos);
}
