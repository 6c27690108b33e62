// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "nexus/nexus.hpp"
#include "support/fixtures.hpp"

using namespace nexus;

namespace {

/// Four synthetic domains split into train/held-out, built once per binary.
const CorpusSet& four_domain_data() {
  static const CorpusSet data = [] {
    GenerationSpec s;
    const char* alphabets[] = {"etaonrsh", "etaludcm", "etaiwfgy", "etabvkpx"};
    for (int i = 0; i < 4; ++i) {
      DomainGrammar g;
      g.id = testkit::expert_ids(4)[i];
      g.alphabet = alphabets[i];
      g.tokens = 30'000;
      s.domains.push_back(g);
    }
    auto corpora = generate_synthetic_domains(s, 21);
    return CorpusSet::split(corpora, 10);
  }();
  return data;
}

TrainConfig small_config(std::size_t tokens) {
  TrainConfig c;
  c.total_tokens = tokens;
  c.batch_size = 8;
  c.seq_len = 16;
  c.eval_sequences = 16;
  c.routing_samples = 16;
  c.seed = 5;
  return c;
}

double mixed_perplexity(std::vector<DomainEval> evals) { return EvalRecord{0, std::move(evals)}.mixed_perplexity(); }

MoEModelState<float> toy_moe(RouterKind kind) {
  auto seed = DenseModelState<float>::init(testkit::tiny_config(), 3);
  auto ids = testkit::expert_ids(4);
  auto experts = testkit::perturbed_experts(seed, ids, 0.02, 4);
  auto emb = testkit::random_embeddings(ids, 8, 5);
  return upcycle<float>(seed, experts, kind, &emb);
}

}  // namespace

TEST(LrSchedule, EndpointsAndContinuity) {
  TrainConfig c;
  const std::size_t total = 1000;
  EXPECT_EQ(lr_schedule(0, total, c), 0.0);
  EXPECT_EQ(lr_schedule(100, total, c), c.max_lr);
  EXPECT_NEAR(lr_schedule(total, total, c), c.final_lr, 1e-12);
  EXPECT_NEAR(lr_schedule(99, total, c), lr_schedule(100, total, c), c.max_lr / 100 + 1e-15);
  EXPECT_NEAR(lr_schedule(101, total, c), lr_schedule(100, total, c), 1e-8);
  double prev = c.max_lr;
  for (std::size_t s = 100; s <= total; ++s) {
    const double lr = lr_schedule(s, total, c);
    EXPECT_LE(lr, prev + 1e-15);
    prev = lr;
  }
  EXPECT_THROW(lr_schedule(total + 1, total, c), ArgumentError);
}

TEST(TrainConfig, ValidationAndJson) {
  TrainConfig c;
  c.final_lr = 2e-3;
  EXPECT_THROW(c.validate(), ValidationError);
  c = TrainConfig{};
  c.warmup_fraction = 1.0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = TrainConfig{};
  c.lb_factor = -1;
  EXPECT_ANY_THROW(c.validate());
  c = TrainConfig{};
  c.mixture = MixtureSpec::only("alpha");
  c.seed = 77;
  nlohmann::json j = c;
  auto back = j.get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
}

TEST(TrainDense, ZeroLearningRateLeavesParamsBitIdentical) {
  auto m = DenseModelState<float>::init(testkit::tiny_config(), 1);
  auto c = small_config(2'000);
  c.max_lr = 0;
  c.final_lr = 0;
  auto r = train_dense(m, four_domain_data(), c);
  EXPECT_EQ(r.report.initial_hash, r.report.final_hash);
  EXPECT_EQ(state_hash(r.model), state_hash(m));
}

TEST(TrainDense, DeterministicGivenSeed) {
  auto m = DenseModelState<float>::init(testkit::tiny_config(), 2);
  auto c = small_config(4'000);
  auto a = train_dense(m, four_domain_data(), c), b = train_dense(m, four_domain_data(), c);
  EXPECT_TRUE(a.report.same_results(b.report));
  EXPECT_EQ(state_hash(a.model), state_hash(b.model));
  c.seed = 6;
  EXPECT_NE(state_hash(train_dense(m, four_domain_data(), c).model), state_hash(a.model));
}

TEST(TrainDense, PerplexityDropsOnOneDomain) {
  auto data = four_domain_data().select(std::vector<std::string>{"alpha"});
  auto m = DenseModelState<float>::init(testkit::tiny_config(), 3);
  auto c = small_config(60'000);
  auto r = train_dense(m, data, c);
  const double before = r.report.initial_eval().domains[0].perplexity;
  const double after = r.report.final_eval().domains[0].perplexity;
  EXPECT_LE(after, 0.8 * before) << before << " -> " << after;
  for (const auto& s : r.report.steps) EXPECT_TRUE(std::isfinite(s.loss));
  for (std::size_t i = 1; i < r.report.steps.size(); ++i) EXPECT_GT(r.report.steps[i].step, r.report.steps[i - 1].step);
}

TEST(TrainDense, DivergenceCarriesPartialReport) {
  auto m = DenseModelState<float>::init(testkit::tiny_config(), 4);
  m.final_norm.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    train_dense(m, four_domain_data(), small_config(2'000));
    FAIL() << "expected TrainingDiverged";
  } catch (const TrainingDiverged& e) {
    EXPECT_EQ(e.report().phase, "dense");
    EXPECT_EQ(e.report().evals.size(), 1u);
    EXPECT_TRUE(e.report().steps.empty());
  }
}

TEST(TrainMoE, ZeroAlphaContributesNothingToGradients) {
  auto moe = toy_moe(RouterKind::Nexus);
  moe.for_each_parameter([](const std::string& n, Tensor<float>& p) { p.set_requires_grad(n != "domain_embeddings"); });
  BatchSampler s(four_domain_data().train, MixtureSpec::uniform(), 4, 16, 1);
  auto b = s.next();
  auto grads = [&](bool with_lb) {
    std::vector<std::vector<float>> out;
    Tape<float> tape;
    {
      TapeScope<float> scope(tape);
      auto f = forward(moe, b);
      auto loss = cross_entropy_loss(f.logits, b.targets);
      if (with_lb) loss = add(loss, scale(mean_load_balance(f.decisions), 0.0f));
      tape.backward(loss);
    }
    moe.for_each_parameter([&](const std::string&, Tensor<float>& p) {
      out.emplace_back(p.grad().begin(), p.grad().end());
      p.clear_grad();
    });
    return out;
  };
  EXPECT_EQ(grads(true), grads(false));
}

TEST(TrainMoE, DomainEmbeddingsStayFrozen) {
  auto moe = toy_moe(RouterKind::Nexus);
  auto before = moe.domain_embeddings.clone();
  auto r = train_moe(moe, four_domain_data(), small_config(4'000));
  EXPECT_TRUE(r.model.domain_embeddings.bit_equal(before));
  EXPECT_FALSE(r.model.domain_embeddings.requires_grad());
  for (const auto& blk : r.model.blocks)
    EXPECT_TRUE(std::get<DomainProjectionState<float>>(blk.moe.router).domain_embeddings.bit_equal(before));
  EXPECT_NE(r.report.final_hash, r.report.initial_hash);
  ASSERT_FALSE(r.report.routing.empty());
  EXPECT_EQ(r.report.routing.back().cross_block_probs.size(), 4u);
}

TEST(TrainMoE, LargeAlphaFlattensDispatch) {
  auto max_dispatch = [](const MoEModelState<float>& m) {
    RoutingSampleOptions o{64, 16, 16, 1};
    auto st = collect_routing_stats(m, std::span<const DomainCorpus>(four_domain_data().heldout), o);
    double worst = 0;
    for (std::size_t b = 0; b < st.n_blocks; ++b)
      for (std::size_t e = 0; e < st.n_experts; ++e) {
        double f = 0;
        for (std::size_t d = 0; d < st.domains.size(); ++d) f += st.dispatch(d, b, e) / st.domains.size();
        worst = std::max(worst, f);
      }
    return worst;
  };
  auto c = small_config(40'000);
  c.lb_factor = 0.0;
  auto free = train_moe(toy_moe(RouterKind::Linear), four_domain_data(), c);
  c.lb_factor = 10.0;
  auto balanced = train_moe(toy_moe(RouterKind::Linear), four_domain_data(), c);
  EXPECT_LT(max_dispatch(balanced.model), max_dispatch(free.model));
}

TEST(TrainMoE, ToyMoEBeatsEverySingleExpertOnTheMix) {
  const auto& data = four_domain_data();
  auto cfg = testkit::tiny_config();
  auto seed = DenseModelState<float>::init(cfg, 7);
  auto c = small_config(20'000);
  std::vector<DenseModelState<float>> experts;
  double best_expert = 1e30;
  for (const auto& id : testkit::expert_ids(4)) {
    auto ec = c;
    ec.mixture = MixtureSpec::only(id);
    auto e = train_dense(seed, data, ec).model;
    e.domain = id;
    best_expert = std::min(best_expert, mixed_perplexity(evaluate(e, data.heldout, 16, 16)));
    experts.push_back(std::move(e));
  }
  EmbedOptions eo;
  eo.method = EmbedMethod::HashedNgram;
  auto emb = embed_query_set<float>(data.train, eo, nullptr);
  auto moe = upcycle<float>(seed, experts, RouterKind::Nexus, &emb);
  auto trained = train_moe(moe, data, small_config(40'000));
  EXPECT_LT(trained.report.final_eval().mixed_perplexity(), best_expert);
}

TEST(Finetune, MixtureIsHalfNewDomain) {
  EXPECT_THROW(extension_mixture("zeta", testkit::expert_ids(3)), ValidationError);
  auto moe = toy_moe(RouterKind::Linear);
  auto c = small_config(0);
  c.batch_size = 32;
  c.total_tokens = 8'000 * 16;
  c.routing_samples = 0;
  c.eval_sequences = 4;
  auto r = finetune_extended(moe, four_domain_data(), "delta", c);
  EXPECT_EQ(r.report.phase, "finetune");
  double total = 0;
  for (const auto& [_, n] : r.report.domain_sequences) total += n;
  EXPECT_NEAR(r.report.domain_sequences.at("delta") / total, 0.5, 0.02);
  for (const auto& id : {"alpha", "beta", "gamma"})
    EXPECT_NEAR(r.report.domain_sequences.at(id) / total, 0.5 / 3, 0.02) << id;
}

TEST(TrainReport, JsonlAndSummary) {
  testkit::TempDir dir("report");
  auto r = train_dense(DenseModelState<float>::init(testkit::tiny_config(), 8), four_domain_data(), small_config(2'000));
  r.report.write_jsonl(dir / "r.jsonl");
  r.report.write_summary(dir / "s.json");
  std::ifstream in(dir / "r.jsonl");
  std::size_t lines = 0, steps = 0;
  for (std::string line; std::getline(in, line); ++lines)
    if (nlohmann::json::parse(line).at("type") == "step") ++steps;
  EXPECT_EQ(steps, r.report.steps.size());
  EXPECT_EQ(lines, r.report.steps.size() + r.report.evals.size());
  std::ifstream s(dir / "s.json");
  auto j = nlohmann::json::parse(s);
  EXPECT_EQ(j.at("final_hash"), r.report.final_hash);
}
