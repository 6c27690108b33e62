// SPDX-License-Identifier: Apache-2.0
//
// End-to-end experiment: seed model -> domain experts -> upcycled MoE ->
// extension with a held-out domain -> finetune, with evaluation and routing
// analysis along the way. Used by the `pipeline` command and the experiment
// tests; the individual commands expose the same stages one at a time.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "nexus/analysis.hpp"
#include "nexus/checkpoint.hpp"
#include "nexus/domain_embeddings.hpp"
#include "nexus/text_data.hpp"
#include "nexus/training.hpp"
#include "nexus/upcycling.hpp"

namespace nexus {

/// Independent stream seed for a named stage.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
  const auto h = detail::fnv1a(reinterpret_cast<const unsigned char*>(tag.data()), tag.size(), 0);
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  std::array<std::uint32_t, 2> w;
  seq.generate(w.begin(), w.end());
  return (std::uint64_t{w[0]} << 32) | w[1];
}

struct PipelineOptions {
  ModelConfig model;
  GenerationSpec data;
  std::uint64_t data_seed = 1;
  std::uint64_t seed = 1;
  std::size_t heldout_every = 10;
  /// Domains that become routed experts; empty means every non-holdout domain.
  std::vector<std::string> expert_domains;
  /// Domain added by extension; empty means the first holdout domain, "-" skips extension.
  std::string new_domain;
  TrainConfig seed_train;
  TrainConfig expert_train;
  TrainConfig moe_train;
  TrainConfig finetune_train;
  EmbedOptions embed;
  std::size_t k = 1;
  bool include_seed_in_merge = false;
  RoutingSampleOptions routing;
  std::function<void(const std::string&)> log;

  void say(const std::string& msg) const {
    if (log) log(msg);
  }
};

/// Desk defaults: phase 1 2M tokens per model, phase 2 2M, phase 3 0.2M.
inline PipelineOptions desk_defaults() {
  PipelineOptions o;
  o.seed_train.total_tokens = 2'000'000;
  o.expert_train.total_tokens = 2'000'000;
  o.moe_train.total_tokens = 2'000'000;
  o.finetune_train.total_tokens = 200'000;
  return o;
}

template <std::floating_point T>
struct DenseStage {
  std::vector<DomainCorpus> corpora;
  CorpusSet data;
  std::vector<std::string> expert_domains;
  std::string new_domain;  // empty when extension is skipped
  DenseModelState<T> seed;
  std::vector<DenseModelState<T>> experts;  // in expert_domains order
  std::optional<DenseModelState<T>> new_expert;
  EmbeddingSet embeddings;  // experts, then the new domain
  TrainReport seed_report;
  std::vector<TrainReport> expert_reports;
  std::vector<DomainEval> merged_eval;  // dense-merge baseline on the expert domains

  /// Expert domains plus "general" when present: the phase-2 mix.
  std::vector<std::string> moe_mix() const {
    auto ids = expert_domains;
    for (const auto& c : corpora)
      if (c.domain_id == kGeneralDomain) ids.emplace_back(kGeneralDomain);
    return ids;
  }
};

template <std::floating_point T>
struct MoEStage {
  RouterKind router = RouterKind::Nexus;
  double lb_factor = 0.0;
  MoEModelState<T> trained;
  TrainReport moe_report;
  RoutingStats stats;  // trained MoE on held-out text of the expert domains
  std::optional<MoEModelState<T>> extended;
  std::optional<MoEModelState<T>> finetuned;
  std::optional<TrainReport> finetune_report;
  std::vector<DomainEval> before_extension;  // trained MoE on expert domains + new domain
  std::vector<DomainEval> before_finetune;   // extended MoE
  std::vector<DomainEval> after_finetune;
  std::optional<RoutingStats> final_stats;   // finetuned MoE, all domains incl. new

  static double mean_perplexity(const std::vector<DomainEval>& evals, std::span<const std::string> ids) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& e : evals)
      if (std::find(ids.begin(), ids.end(), e.domain) != ids.end()) {
        s += e.perplexity;
        ++n;
      }
    if (n == 0) throw ValidationError("mean_perplexity: no matching domains");
    return s / static_cast<double>(n);
  }
  static double perplexity_of(const std::vector<DomainEval>& evals, std::string_view id) {
    for (const auto& e : evals)
      if (e.domain == id) return e.perplexity;
    throw ValidationError("no evaluation for domain '" + std::string(id) + "'");
  }
};

namespace detail {

inline std::vector<std::string> resolve_expert_domains(const PipelineOptions& o) {
  if (!o.expert_domains.empty()) return o.expert_domains;
  std::vector<std::string> ids;
  for (const auto& g : o.data.domains)
    if (!g.holdout) ids.push_back(g.id);
  return ids;
}

inline std::string resolve_new_domain(const PipelineOptions& o) {
  if (o.new_domain == "-") return {};
  if (!o.new_domain.empty()) return o.new_domain;
  for (const auto& g : o.data.domains)
    if (g.holdout) return g.id;
  return {};
}

inline TrainConfig seeded(TrainConfig cfg, std::uint64_t base, const std::string& tag) {
  cfg.seed = derive_seed(base, tag);
  return cfg;
}

}  // namespace detail

/// Phase 1: data, seed model on "general" (or the expert mix when there is
/// no general corpus), one expert per domain, domain embeddings.
template <std::floating_point T>
DenseStage<T> run_dense_stage(const PipelineOptions& o) {
  DenseStage<T> s;
  s.corpora = generate_synthetic_domains(o.data, o.data_seed);
  s.data = CorpusSet::split(s.corpora, o.heldout_every);
  s.expert_domains = detail::resolve_expert_domains(o);
  s.new_domain = detail::resolve_new_domain(o);
  if (s.expert_domains.empty()) throw ValidationError("pipeline: no expert domains");

  std::vector<std::string> seed_ids;
  for (const auto& c : s.corpora)
    if (c.domain_id == kGeneralDomain) seed_ids.emplace_back(kGeneralDomain);
  if (seed_ids.empty()) seed_ids = s.expert_domains;
  o.say("training seed model on " + std::to_string(seed_ids.size()) + " corpus/corpora");
  auto seed_run = train_dense(DenseModelState<T>::init(o.model, derive_seed(o.seed, "init")),
                              s.data.select(seed_ids), detail::seeded(o.seed_train, o.seed, "seed"));
  s.seed = std::move(seed_run.model);
  s.seed_report = std::move(seed_run.report);

  auto all = s.expert_domains;
  if (!s.new_domain.empty()) all.push_back(s.new_domain);
  for (const auto& id : all) {
    o.say("training expert " + id);
    std::vector<std::string> one{id};
    auto run = train_dense(s.seed, s.data.select(one), detail::seeded(o.expert_train, o.seed, "expert/" + id));
    run.model.domain = id;
    s.expert_reports.push_back(std::move(run.report));
    if (id == s.new_domain) {
      s.new_expert = std::move(run.model);
    } else {
      s.experts.push_back(std::move(run.model));
    }
  }
  EmbedOptions eo = o.embed;
  eo.seed = derive_seed(o.seed, "embed");
  s.embeddings = embed_query_set<T>(std::span<const DomainCorpus>(s.data.select(all).train), eo, &s.seed);

  auto merged = dense_merge<T>(s.seed, s.experts);
  s.merged_eval = evaluate(merged, s.data.select(s.expert_domains).heldout, o.moe_train.eval_sequences,
                           o.moe_train.seq_len);
  return s;
}

/// Phases 2 and 3 for one router kind and load-balance factor.
template <std::floating_point T>
MoEStage<T> run_moe_stage(const PipelineOptions& o, const DenseStage<T>& dense, RouterKind router,
                          double lb_factor, bool extend = true) {
  MoEStage<T> s;
  s.router = router;
  s.lb_factor = lb_factor;
  const std::string tag = to_string(router);
  UpcycleOptions uo{o.k, lb_factor, derive_seed(o.seed, "router"), o.include_seed_in_merge};
  auto moe = upcycle<T>(dense.seed, std::span<const DenseModelState<T>>(dense.experts), router,
                        &dense.embeddings, uo);

  TrainConfig mc = detail::seeded(o.moe_train, o.seed, "moe");
  mc.lb_factor = lb_factor;
  o.say("training " + tag + " MoE (lb_factor " + std::to_string(lb_factor) + ")");
  auto run = train_moe(moe, dense.data.select(dense.moe_mix()), mc);
  s.trained = std::move(run.model);
  s.moe_report = std::move(run.report);

  RoutingSampleOptions ro = o.routing;
  ro.seed = derive_seed(o.seed, "routing");
  ro.seq_len = std::min(ro.seq_len, o.model.max_seq_len);
  s.stats = collect_routing_stats(s.trained, std::span<const DomainCorpus>(
                                                 dense.data.select(dense.expert_domains).heldout), ro);
  if (!extend || dense.new_domain.empty()) return s;

  auto eval_ids = dense.expert_domains;
  eval_ids.push_back(dense.new_domain);
  const auto eval_set = dense.data.select(eval_ids);
  const std::size_t seqs = o.finetune_train.eval_sequences, len = o.finetune_train.seq_len;
  s.before_extension = evaluate(s.trained, eval_set.heldout, seqs, len);

  if (router == RouterKind::Nexus) {
    s.extended = extend_moe(s.trained, *dense.new_expert, dense.embeddings.get(dense.new_domain));
  } else {
    o.say("linear router: router reset to " + std::to_string(s.trained.num_experts() + 1) + " columns");
    s.extended = extend_moe_linear(s.trained, *dense.new_expert, dense.new_domain, derive_seed(o.seed, "router-reset"));
  }
  s.before_finetune = evaluate(*s.extended, eval_set.heldout, seqs, len);

  auto ft_ids = dense.moe_mix();
  ft_ids.push_back(dense.new_domain);
  TrainConfig fc = detail::seeded(o.finetune_train, o.seed, "finetune");
  fc.lb_factor = lb_factor;
  o.say("finetuning extended " + tag + " MoE on " + dense.new_domain);
  auto ft = finetune_extended(*s.extended, dense.data.select(ft_ids), dense.new_domain, fc);
  s.finetuned = std::move(ft.model);
  s.finetune_report = std::move(ft.report);
  s.after_finetune = evaluate(*s.finetuned, eval_set.heldout, seqs, len);
  s.final_stats = collect_routing_stats(*s.finetuned, std::span<const DomainCorpus>(eval_set.heldout), ro);
  return s;
}

}  // namespace nexus
