// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "nexus/nexus.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

using namespace nexus;

namespace {

MoELayerState<double> make_layer(std::size_t h, std::size_t n, RouterState<double> router, std::size_t k, Rng& rng) {
  MoELayerState<double> layer;
  layer.shared = ExpertFFN<double>::init(h, 12, 1, rng);
  for (std::size_t e = 0; e < n; ++e) layer.experts.push_back(ExpertFFN<double>::init(h, 12, 1, rng));
  layer.router = std::move(router);
  layer.k = k;
  return layer;
}

/// Random orthogonal matrix by Gram-Schmidt.
Tensor<double> random_rotation(std::size_t h, Rng& rng) {
  auto a = Tensor<double>::randn({h, h}, 1.0, rng);
  auto q = a.mutable_data();
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double d = 0;
      for (std::size_t c = 0; c < h; ++c) d += q[i * h + c] * q[j * h + c];
      for (std::size_t c = 0; c < h; ++c) q[i * h + c] -= d * q[j * h + c];
    }
    double n = 0;
    for (std::size_t c = 0; c < h; ++c) n += q[i * h + c] * q[i * h + c];
    for (std::size_t c = 0; c < h; ++c) q[i * h + c] /= std::sqrt(n);
  }
  return a;
}

DomainProjectionState<double> with_cached(const Tensor<double>& e, std::size_t m) {
  Rng rng(0);
  const std::size_t n = e.dim(0), h = e.dim(1);
  auto p = DomainProjectionState<double>::init(m, h, Tensor<double>({n, m}, 0.1), rng);
  p.cached_expert_embeddings = e;
  return p;
}

}  // namespace

TEST(LinearRouter, ZeroWeightsGiveUniform) {
  Rng rng(1);
  LinearRouterState<double> r{Tensor<double>({8, 4})};
  auto d = route_linear(r, Tensor<double>::randn({5, 8}, 1.0, rng), 1);
  for (double p : d.probs.data()) EXPECT_EQ(p, 0.25);
}

TEST(LinearRouter, PlusMinusDirectionHandOracle) {
  // W_r columns +u, -u and x = u with |u|^2 = ln 3: logits (ln3, -ln3),
  // so probs = (3, 1/3) / (10/3) = (0.9, 0.1).
  const double s = std::sqrt(std::log(3.0) / 2.0);
  LinearRouterState<double> r{Tensor<double>({2, 2}, std::vector<double>{s, -s, s, -s})};
  auto d = route_linear(r, Tensor<double>({1, 2}, std::vector<double>{s, s}), 1);
  EXPECT_NEAR(d.probs.data()[0], 0.9, 1e-12);
  EXPECT_NEAR(d.probs.data()[1], 0.1, 1e-12);
  EXPECT_EQ(d.top1(0), 0u);
  EXPECT_EQ(d.gates.item(), d.probs.data()[0]);
}

TEST(LinearRouter, WidthMismatch) {
  Rng rng(2);
  auto r = LinearRouterState<double>::init(8, 3, rng);
  EXPECT_THROW(route_linear(r, Tensor<double>({2, 7}), 1), ShapeError);
}

TEST(NexusRouter, ZeroW2GivesUniform) {
  Rng rng(3);
  auto p = DomainProjectionState<double>::init(6, 8, Tensor<double>::randn({4, 6}, 1.0, rng), rng);
  std::fill(p.w2.mutable_data().begin(), p.w2.mutable_data().end(), 0.0);
  const auto e = project_domains(p);
  for (double v : e.data()) EXPECT_EQ(v, 0.0);
  auto d = route_nexus(p, Tensor<double>::randn({3, 8}, 1.0, rng), 1);
  for (double v : d.probs.data()) EXPECT_EQ(v, 0.25);
}

TEST(NexusRouter, IdenticalDomainsProjectIdentically) {
  Rng rng(4);
  auto D = Tensor<double>::randn({3, 6}, 1.0, rng);
  std::copy_n(D.data().begin(), 6, D.mutable_data().begin() + 12);
  auto p = DomainProjectionState<double>::init(6, 8, D, rng);
  auto e = project_domains(p);
  EXPECT_TRUE(std::equal(e.data().begin(), e.data().begin() + 8, e.data().begin() + 16));
}

TEST(NexusRouter, ShapeAndFrozenChecks) {
  Rng rng(5);
  EXPECT_THROW(DomainProjectionState<double>::init(6, 8, Tensor<double>({3, 5}), rng), ShapeError);
  auto p = DomainProjectionState<double>::init(6, 8, Tensor<double>::randn({3, 6}, 1.0, rng), rng);
  EXPECT_FALSE(p.domain_embeddings.requires_grad());
  EXPECT_THROW(route_nexus(p, Tensor<double>({2, 7}), 1), ShapeError);
  p.domain_embeddings.set_requires_grad(true);
  EXPECT_THROW(project_domains(p), ArgumentError);
}

TEST(NexusRouter, OrthonormalEmbeddingsPickTheAlignedExpert) {
  Tensor<double> e({4, 4}, std::vector<double>{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  auto p = with_cached(e, 3);
  auto d = route_nexus(p, Tensor<double>({1, 4}, std::vector<double>{0, 5, 0, 0}), 1);
  EXPECT_EQ(d.top1(0), 1u);
  const double want = std::exp(5.0) / (std::exp(5.0) + 3.0);
  EXPECT_NEAR(d.probs.data()[1], want, 1e-12);
  EXPECT_GT(d.probs.data()[1], 0.9);
  auto zero = route_nexus(p, Tensor<double>({1, 4}), 1);
  for (double v : zero.probs.data()) EXPECT_EQ(v, 0.25);
}

TEST(NexusRouter, ArgmaxFollowsScaledEmbedding) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    auto q = random_rotation(6, rng);  // rows are mutually orthogonal unit vectors
    std::vector<double> rows(q.data().begin(), q.data().begin() + 4 * 6);
    auto p = with_cached(Tensor<double>({4, 6}, rows), 3);
    const std::size_t j = trial % 4;
    const double c = 0.5 + trial * 0.1;
    std::vector<double> x(rows.begin() + j * 6, rows.begin() + (j + 1) * 6);
    for (auto& v : x) v *= c;
    EXPECT_EQ(route_nexus(p, Tensor<double>({1, 6}, x), 1).top1(0), j);
  }
}

TEST(NexusRouter, RotationInvariance) {
  Rng rng(7);
  auto e = Tensor<double>::randn({4, 6}, 1.0, rng);
  auto x = Tensor<double>::randn({5, 6}, 1.0, rng);
  auto R = random_rotation(6, rng);
  auto a = route_nexus(with_cached(e, 3), x, 1);
  auto b = route_nexus(with_cached(matmul(e, R), 3), matmul(x, R), 1);
  for (std::size_t i = 0; i < a.probs.numel(); ++i) EXPECT_NEAR(a.probs.data()[i], b.probs.data()[i], 1e-6);
}

TEST(NexusRouter, CacheIsBitIdenticalAndIgnoredWhileTraining) {
  Rng rng(8);
  auto p = DomainProjectionState<double>::init(6, 8, Tensor<double>::randn({3, 6}, 1.0, rng), rng);
  auto x = Tensor<double>::randn({4, 8}, 1.0, rng);
  auto fresh = route_nexus(p, x, 2);
  cache_expert_embeddings(p);
  auto cached = route_nexus(p, x, 2);
  EXPECT_TRUE(fresh.probs.bit_equal(cached.probs));
  EXPECT_EQ(fresh.top_indices, cached.top_indices);
  // A stale cache must not be used while W1/W2 are being trained.
  p.cached_expert_embeddings = Tensor<double>({3, 8});
  Tape<double> tape;
  TapeScope<double> s(tape);
  auto taped = route_nexus(p, x, 2);
  EXPECT_TRUE(taped.probs.bit_equal(fresh.probs));
}

TEST(MoEForward, ZeroRoutedExpertsGiveSharedOnly) {
  Rng rng(9);
  auto layer = make_layer(8, 3, LinearRouterState<double>::init(8, 3, rng), 2, rng);
  for (auto& e : layer.experts) std::fill(e.down.mutable_data().begin(), e.down.mutable_data().end(), 0.0);
  auto x = Tensor<double>::randn({2, 3, 8}, 1.0, rng);
  auto out = moe_forward(layer, x);
  EXPECT_EQ(out.y.shape(), x.shape());
  EXPECT_TRUE(out.y.bit_equal(reshape(layer.shared(reshape(x, Shape{6, 8})), x.shape())));
}

TEST(MoEForward, IdenticalExpertsGiveOnePlusGateTimesShared) {
  Rng rng(10);
  auto layer = make_layer(8, 4, LinearRouterState<double>::init(8, 4, rng), 1, rng);
  for (auto& e : layer.experts) e = layer.shared.clone();
  auto x = Tensor<double>::randn({7, 8}, 1.0, rng);
  auto out = moe_forward(layer, x);
  auto fs = layer.shared(x);
  for (std::size_t t = 0; t < 7; ++t)
    for (std::size_t j = 0; j < 8; ++j)
      EXPECT_NEAR(out.y.data()[t * 8 + j], (1.0 + out.decision.gates.data()[t]) * fs.data()[t * 8 + j], 1e-6);
}

TEST(MoEForward, AllExpertsUniformRouterMatchesDenseOracle) {
  Rng rng(11);
  const std::size_t n = 4;
  auto layer = make_layer(8, n, LinearRouterState<double>{Tensor<double>({8, n})}, n, rng);
  auto x = Tensor<double>::randn({6, 8}, 1.0, rng);
  auto out = moe_forward(layer, x);
  auto want = layer.shared(x).detach();
  for (const auto& e : layer.experts) {
    auto y = e(x);
    for (std::size_t i = 0; i < want.numel(); ++i) want.mutable_data()[i] += y.data()[i] / double(n);
  }
  for (std::size_t i = 0; i < want.numel(); ++i) EXPECT_NEAR(out.y.data()[i], want.data()[i], 1e-6);
}

TEST(MoEForward, GradientFlowsOnlyToSelectedExperts) {
  Rng rng(12);
  auto layer = make_layer(8, 4, LinearRouterState<double>::init(8, 4, rng), 1, rng);
  for (auto* t : {&layer.shared.up, &layer.shared.down}) t->set_requires_grad(true);
  for (auto& e : layer.experts) {
    e.up.set_requires_grad(true);
    e.down.set_requires_grad(true);
  }
  auto& wr = std::get<LinearRouterState<double>>(layer.router).w_r;
  wr.set_requires_grad(true);
  auto x = Tensor<double>::randn({1, 8}, 1.0, rng);
  Tape<double> tape;
  std::size_t chosen;
  {
    TapeScope<double> s(tape);
    auto out = moe_forward(layer, x);
    chosen = out.decision.top1(0);
    backward(testkit::probe_sum(out.y));
  }
  auto nonzero = [](const Tensor<double>& t) {
    return t.has_grad() && std::any_of(t.grad().begin(), t.grad().end(), [](double g) { return g != 0.0; });
  };
  EXPECT_TRUE(nonzero(layer.shared.up));
  EXPECT_TRUE(nonzero(wr));
  for (std::size_t e = 0; e < 4; ++e) {
    EXPECT_EQ(nonzero(layer.experts[e].up), e == chosen) << "expert " << e;
    EXPECT_EQ(nonzero(layer.experts[e].down), e == chosen) << "expert " << e;
  }
}

TEST(MoEForward, GatesAreFullSoftmaxProbabilities) {
  Rng rng(13);
  auto D = Tensor<double>::randn({4, 6}, 1.0, rng);
  auto layer = make_layer(8, 4, DomainProjectionState<double>::init(6, 8, D, rng), 2, rng);
  auto out = moe_forward(layer, Tensor<double>::randn({9, 8}, 3.0, rng));
  const auto& d = out.decision;
  for (std::size_t t = 0; t < d.tokens; ++t) {
    double g = 0;
    for (std::size_t s = 0; s < 2; ++s) {
      EXPECT_EQ(d.gates.data()[t * 2 + s], d.probs.data()[t * 4 + d.top_indices[t * 2 + s]]);
      g += d.gates.data()[t * 2 + s];
    }
    EXPECT_LT(g, 1.0);  // never renormalized
  }
}

TEST(LoadBalance, MinimumOverMatchedAssignmentsIsUniform) {
  // Tokens assigned one-hot, so P == f; enumerate every split of N tokens.
  for (std::size_t n = 2; n <= 4; ++n) {
    const std::size_t N = 12;
    double best = 1e9;
    std::vector<std::size_t> best_counts;
    std::vector<std::size_t> counts(n, 0);
    std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t i, std::size_t left) {
      if (i + 1 == n) {
        counts[i] = left;
        RoutingDecision<double> d;
        d.n = n;
        d.k = 1;
        d.tokens = N;
        std::vector<double> probs(N * n, 0.0);
        std::size_t t = 0;
        for (std::size_t e = 0; e < n; ++e)
          for (std::size_t c = 0; c < counts[e]; ++c, ++t) {
            probs[t * n + e] = 1.0;
            d.top_indices.push_back(e);
          }
        d.probs = Tensor<double>({N, n}, probs);
        const double l = load_balance_loss(d).item();
        if (l < best) {
          best = l;
          best_counts = counts;
        }
        return;
      }
      for (std::size_t c = 0; c <= left; ++c) {
        counts[i] = c;
        rec(i + 1, left - c);
      }
    };
    rec(0, N);
    EXPECT_DOUBLE_EQ(best, 1.0) << "n=" << n;
    EXPECT_EQ(best_counts, std::vector<std::size_t>(n, N / n)) << "n=" << n;
  }
}

TEST(LoadBalance, EmptyDecisionRejected) {
  RoutingDecision<double> d;
  EXPECT_THROW(load_balance_loss(d), ArgumentError);
}

TEST(MoEModel, CachesAreInvalidatedAndModelForwardIsDeterministic) {
  auto cfg = testkit::tiny_config();
  auto seed = DenseModelState<float>::init(cfg, 1);
  auto ids = testkit::expert_ids(3);
  auto emb = testkit::random_embeddings(ids, cfg.d_model, 2);
  auto moe = upcycle<float>(seed, testkit::perturbed_experts(seed, ids, 0.02, 3), RouterKind::Nexus, &emb);
  Batch b;
  b.batch = 1;
  b.seq_len = 8;
  b.token_ids = tokenize("abcdefgh");
  b.targets = tokenize("bcdefghi");
  auto before = forward(moe, b);
  moe.cache_projections();
  auto cached = forward(moe, b);
  EXPECT_TRUE(before.logits.bit_equal(cached.logits));
  ASSERT_EQ(cached.decisions.size(), cfg.n_layers);
  moe.invalidate_caches();
  for (const auto& blk : moe.blocks)
    EXPECT_FALSE(std::get<DomainProjectionState<float>>(blk.moe.router).cached_expert_embeddings.has_value());
  EXPECT_NEAR(mean_load_balance(cached.decisions).item(),
              0.5f * (load_balance_loss(cached.decisions[0]).item() + load_balance_loss(cached.decisions[1]).item()), 1e-6);
}

TEST(MoEModel, RouterKindParsing) {
  EXPECT_EQ(parse_router_kind("nexus"), RouterKind::Nexus);
  EXPECT_EQ(parse_router_kind("linear"), RouterKind::Linear);
  EXPECT_ANY_THROW(parse_router_kind("switch"));
}
