// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. One subcommand per pipeline phase; every flag can
// also come from a TOML experiment file (--experiment), with flags on the
// command line taking precedence. Exit codes: 0 ok, 2 usage or validation
// error, 3 training divergence, 1 anything unexpected.

#pragma once

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "nexus/analysis.hpp"
#include "nexus/checkpoint.hpp"
#include "nexus/domain_embeddings.hpp"
#include "nexus/error.hpp"
#include "nexus/pipeline.hpp"
#include "nexus/text_data.hpp"
#include "nexus/training.hpp"
#include "nexus/upcycling.hpp"

namespace nexus::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitDiverged = 3;

struct Context {
  fs::path workdir = ".";
  int precision = 32;
  bool quiet = false;
  std::ostream* out = &std::cout;  // results
  std::ostream* err = &std::cerr;  // progress log

  fs::path resolve(const fs::path& p) const { return p.empty() || p.is_absolute() ? p : workdir / p; }
  void log(const std::string& msg) const {
    if (!quiet) *err << "[nexus] " << msg << '\n';
  }
};

/// "uniform", "proportional", or explicit "id=w,id=w".
inline MixtureSpec parse_mixture(const std::string& s) {
  if (s == "uniform") return MixtureSpec::uniform();
  if (s == "proportional") return MixtureSpec::proportional();
  MixtureSpec m{MixtureMode::Explicit, {}};
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError("bad mixture entry '" + item + "', want id=weight");
    try {
      m.weights.emplace_back(item.substr(0, eq), std::stod(item.substr(eq + 1)));
    } catch (const std::exception&) {
      throw ValidationError("bad mixture weight in '" + item + "'");
    }
  }
  if (m.weights.empty()) throw ValidationError("empty mixture '" + s + "'");
  return m;
}

struct TrainFlags {
  std::size_t tokens = 2'000'000;
  std::size_t batch_size = 8;
  std::size_t seq_len = 64;
  double max_lr = 1e-3;
  double final_lr = 3e-4;
  double warmup = 0.10;
  double lb_factor = 0.05;
  std::string mixture = "uniform";
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;
  std::size_t eval_sequences = 32;
  std::size_t log_every = 10;
  std::size_t heldout_every = 10;

  void add_to(CLI::App* app, bool moe) {
    app->add_option("--tokens", tokens, "training token budget")->capture_default_str();
    app->add_option("--batch-size", batch_size, "sequences per step")->capture_default_str();
    app->add_option("--seq-len", seq_len, "tokens per sequence")->capture_default_str();
    app->add_option("--max-lr", max_lr)->capture_default_str();
    app->add_option("--final-lr", final_lr)->capture_default_str();
    app->add_option("--warmup", warmup, "warmup fraction of total steps")->capture_default_str();
    app->add_option("--mixture", mixture, "uniform | proportional | id=w,id=w")->capture_default_str();
    app->add_option("--seed", seed)->capture_default_str();
    app->add_option("--eval-every", eval_every, "steps between evaluations (0: start and end)");
    app->add_option("--eval-sequences", eval_sequences, "held-out windows per domain")->capture_default_str();
    app->add_option("--log-every", log_every)->capture_default_str();
    app->add_option("--heldout-every", heldout_every, "every k-th document is held out")->capture_default_str();
    if (moe) app->add_option("--lb-factor", lb_factor, "load-balance loss weight")->capture_default_str();
  }

  TrainConfig config() const {
    TrainConfig c;
    c.total_tokens = tokens;
    c.batch_size = batch_size;
    c.seq_len = seq_len;
    c.max_lr = max_lr;
    c.final_lr = final_lr;
    c.warmup_fraction = warmup;
    c.lb_factor = lb_factor;
    c.mixture = parse_mixture(mixture);
    c.seed = seed;
    c.eval_every = eval_every;
    c.eval_sequences = eval_sequences;
    c.log_every = log_every;
    c.validate();
    return c;
  }
};

struct CorpusFlags {
  std::vector<std::string> paths;
  std::vector<std::string> domains;

  void add_to(CLI::App* app, bool required = true) {
    auto* o = app->add_option("--corpus", paths, "JSONL files or directories of them");
    if (required) o->required();
    app->add_option("--domain", domains, "restrict to these domain ids");
  }

  std::vector<DomainCorpus> load(const Context& ctx) const {
    std::vector<fs::path> resolved;
    for (const auto& p : paths) resolved.push_back(ctx.resolve(p));
    auto corpora = load_corpora(resolved);
    if (domains.empty()) return corpora;
    std::vector<DomainCorpus> out;
    for (const auto& id : domains) out.push_back(find_corpus(corpora, id));
    return out;
  }
};

namespace detail {

inline void write_reports(const Context& ctx, const fs::path& dir, const TrainReport& r) {
  fs::create_directories(dir);
  r.write_jsonl(dir / "train_report.jsonl");
  r.write_summary(dir / "train_summary.json");
  ctx.log("report written to " + (dir / "train_report.jsonl").string());
}

inline void print_eval(const Context& ctx, const std::string& label, const std::vector<DomainEval>& evals) {
  for (const auto& e : evals) {
    std::ostringstream os;
    os << label << ' ' << std::left << std::setw(12) << e.domain << " loss " << std::fixed << std::setprecision(4)
       << e.loss << "  ppl " << e.perplexity;
    *ctx.out << os.str() << '\n';
  }
}

inline ModelConfig read_model_config(const Context& ctx, const std::string& path) {
  if (path.empty()) return ModelConfig{};
  std::ifstream in(ctx.resolve(path));
  if (!in) throw IoError("cannot open model config " + ctx.resolve(path).string());
  try {
    auto j = nlohmann::json::parse(in);
    auto c = (j.contains("model") ? j.at("model") : j).get<ModelConfig>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("invalid model config: " + std::string(e.what()));
  }
}

/// Runs `train`; on divergence writes the partial report to `dir` first.
template <class F>
auto train_with_partial_report(const Context& ctx, const fs::path& dir, F&& train) {
  try {
    return train();
  } catch (const TrainingDiverged& e) {
    write_reports(ctx, dir, e.report());
    throw;
  }
}

inline void print_routing(const Context& ctx, const RoutingStats& s, const std::vector<std::string>& expert_names) {
  std::ostringstream os;
  os << std::left << std::setw(12) << "domain";
  for (const auto& e : expert_names) os << std::setw(10) << e.substr(0, 9);
  os << "argmax\n";
  for (std::size_t d = 0; d < s.domains.size(); ++d) {
    os << std::setw(12) << s.domains[d];
    for (std::size_t e = 0; e < s.n_experts; ++e) os << std::setw(10) << std::fixed << std::setprecision(4) << s.cross_block_prob(d, e);
    os << expert_names[s.argmax_expert(d)] << '\n';
  }
  *ctx.out << os.str();
}

}  // namespace detail

// ---------------------------------------------------------------- commands

struct GenDataArgs {
  std::string spec;
  std::string out = "data";
  std::uint64_t seed = 0;
};

inline int cmd_gen_data(const Context& ctx, const GenDataArgs& a) {
  auto spec = read_generation_spec(ctx.resolve(a.spec));
  auto corpora = generate_synthetic_domains(spec, a.seed);
  const auto dir = ctx.resolve(a.out);
  fs::create_directories(dir);
  for (const auto& c : corpora) {
    write_jsonl(c, dir / (c.domain_id + ".jsonl"));
    *ctx.out << c.domain_id << ": " << c.documents.size() << " documents, " << c.token_count << " tokens\n";
  }
  ctx.log("wrote " + std::to_string(corpora.size()) + " corpora to " + dir.string());
  return kExitOk;
}

struct TrainDenseArgs {
  TrainFlags train;
  CorpusFlags corpus;
  std::string config;
  std::string init;
  std::string out;
  bool expert = false;
};

template <std::floating_point T>
int cmd_train_dense(const Context& ctx, const TrainDenseArgs& a) {
  auto corpora = a.corpus.load(ctx);
  auto data = CorpusSet::split(corpora, a.train.heldout_every);
  TrainConfig cfg = a.train.config();
  DenseModelState<T> init;
  if (!a.init.empty()) {
    init = load_dense<T>(ctx.resolve(a.init));
    if (!a.config.empty()) {
      auto diff = config_diff(init.config, detail::read_model_config(ctx, a.config));
      if (!diff.empty()) throw ValidationError("--config disagrees with --init checkpoint");
    }
    ctx.log("init checkpoint " + a.init + " hash " + checkpoint_hash(ctx.resolve(a.init)));
  } else if (a.expert) {
    throw ValidationError("train-expert needs --init <seed checkpoint>");
  } else {
    init = DenseModelState<T>::init(detail::read_model_config(ctx, a.config), cfg.seed);
  }
  if (a.expert) {
    if (corpora.size() != 1) throw ValidationError("train-expert trains on exactly one domain; use --domain");
    init.domain = corpora.front().domain_id;
  }
  ctx.log("model init hash " + state_hash(init));
  ctx.log(std::to_string(cfg.total_steps()) + " steps of " + std::to_string(cfg.batch_tokens()) + " tokens");
  const auto out = ctx.resolve(a.out);
  auto r = detail::train_with_partial_report(ctx, out, [&] { return train_dense(init, data, cfg); });
  save_checkpoint(out, r.model);
  detail::write_reports(ctx, out, r.report);
  detail::print_eval(ctx, "before", r.report.initial_eval().domains);
  detail::print_eval(ctx, "after ", r.report.final_eval().domains);
  *ctx.out << "checkpoint " << out.string() << " hash " << checkpoint_hash(out) << '\n';
  return kExitOk;
}

struct UpcycleArgs {
  std::string seed_ckpt;
  std::vector<std::string> expert_ckpts;
  std::string router = "nexus";
  std::string embeddings;
  std::string out;
  std::size_t k = 1;
  double lb_factor = 0.05;
  std::uint64_t seed = 0;
  bool include_seed_in_merge = false;
};

template <std::floating_point T>
int cmd_upcycle(const Context& ctx, const UpcycleArgs& a) {
  const auto kind = parse_router_kind(a.router);
  if (kind == RouterKind::Nexus && a.embeddings.empty()) {
    throw ValidationError("the nexus router needs --embeddings");
  }
  auto seed = load_dense<T>(ctx.resolve(a.seed_ckpt));
  std::vector<DenseModelState<T>> experts;
  for (const auto& p : a.expert_ckpts) experts.push_back(load_dense<T>(ctx.resolve(p)));
  std::optional<EmbeddingSet> emb;
  if (!a.embeddings.empty()) emb = EmbeddingSet::load(ctx.resolve(a.embeddings));
  UpcycleOptions opt{a.k, a.lb_factor, a.seed, a.include_seed_in_merge};
  auto moe = upcycle<T>(seed, std::span<const DenseModelState<T>>(experts), kind, emb ? &*emb : nullptr, opt);
  const auto out = ctx.resolve(a.out);
  save_checkpoint(out, moe);
  *ctx.out << "upcycled " << moe.num_experts() << " experts, router=" << to_string(kind) << ", k=" << moe.k
           << " -> " << out.string() << " hash " << checkpoint_hash(out) << '\n';
  return kExitOk;
}

struct EmbedArgs {
  CorpusFlags corpus;
  std::string seed_ckpt;
  std::string method = "seed-model-mean";
  std::size_t m = 0;
  std::size_t samples = 512;
  std::uint64_t seed = 0;
  std::size_t heldout_every = 10;
  std::string out = "embeddings.json";
};

template <std::floating_point T>
int cmd_embed(const Context& ctx, const EmbedArgs& a) {
  auto data = CorpusSet::split(a.corpus.load(ctx), a.heldout_every);
  EmbedOptions opt{parse_embed_method(a.method), a.m, a.samples, a.seed};
  std::optional<DenseModelState<T>> seed;
  if (!a.seed_ckpt.empty()) seed = load_dense<T>(ctx.resolve(a.seed_ckpt));
  if (opt.method == EmbedMethod::SeedModelMean && !seed) {
    throw ValidationError("seed-model-mean embeddings need --seed-ckpt");
  }
  auto set = embed_query_set<T>(std::span<const DomainCorpus>(data.train), opt, seed ? &*seed : nullptr);
  set.save(ctx.resolve(a.out));
  for (const auto& r : set.rows()) *ctx.out << r.domain_id << ": m=" << r.dim() << '\n';
  return kExitOk;
}

struct TrainMoEArgs {
  TrainFlags train;
  CorpusFlags corpus;
  std::string init;
  std::string out;
  std::string new_domain;  // finetune only
};

template <std::floating_point T>
int cmd_train_moe(const Context& ctx, const TrainMoEArgs& a, bool finetune) {
  auto data = CorpusSet::split(a.corpus.load(ctx), a.train.heldout_every);
  auto moe = load_moe<T>(ctx.resolve(a.init));
  ctx.log("init checkpoint " + a.init + " hash " + checkpoint_hash(ctx.resolve(a.init)));
  TrainConfig cfg = a.train.config();
  const auto out = ctx.resolve(a.out);
  auto r = detail::train_with_partial_report(ctx, out, [&] {
    if (!finetune) return train_moe(moe, data, cfg);
    const std::string id = a.new_domain.empty() ? moe.domains.back() : a.new_domain;
    ctx.log("finetuning on 50% " + id + ", 50% other domains");
    return finetune_extended(moe, data, id, cfg);
  });
  save_checkpoint(out, r.model);
  detail::write_reports(ctx, out, r.report);
  detail::print_eval(ctx, "before", r.report.initial_eval().domains);
  detail::print_eval(ctx, "after ", r.report.final_eval().domains);
  for (const auto& [id, n] : r.report.domain_sequences) *ctx.out << "sequences " << id << ' ' << n << '\n';
  *ctx.out << "checkpoint " << out.string() << " hash " << checkpoint_hash(out) << '\n';
  return kExitOk;
}

struct ExtendArgs {
  std::string moe;
  std::string expert_ckpt;
  std::string embeddings;
  std::string domain;
  std::uint64_t seed = 0;
  std::string out;
};

template <std::floating_point T>
int cmd_extend(const Context& ctx, const ExtendArgs& a) {
  auto moe = load_moe<T>(ctx.resolve(a.moe));
  auto expert = load_dense<T>(ctx.resolve(a.expert_ckpt));
  const std::string id = a.domain.empty() ? expert.domain : a.domain;
  if (id.empty()) throw ValidationError("new expert has no domain label; pass --domain");
  MoEModelState<T> out_moe;
  if (moe.router_kind == RouterKind::Nexus) {
    if (a.embeddings.empty()) throw ValidationError("extending a nexus MoE needs --embeddings with the new domain");
    auto emb = EmbeddingSet::load(ctx.resolve(a.embeddings));
    out_moe = extend_moe(moe, expert, emb.get(id));
    *ctx.out << "appended expert " << id << " with its domain embedding; lambda=" << extension_weight(moe.num_experts())
             << '\n';
  } else {
    out_moe = extend_moe_linear(moe, expert, id, a.seed);
    *ctx.out << "router reset: W_r re-initialized with " << out_moe.num_experts() << " columns\n";
  }
  const auto out = ctx.resolve(a.out);
  save_checkpoint(out, out_moe);
  *ctx.out << "extended MoE has " << out_moe.num_experts() << " experts -> " << out.string() << '\n';
  return kExitOk;
}

struct AnalyzeArgs {
  std::string moe;
  CorpusFlags corpus;
  std::size_t samples = 512;
  std::size_t seq_len = 64;
  std::uint64_t seed = 0;
  std::size_t heldout_every = 10;
  bool all_documents = false;
  std::string tag = "analysis";
  std::string out = "analysis";
  std::optional<std::size_t> block;
};

template <std::floating_point T>
int cmd_analyze(const Context& ctx, const AnalyzeArgs& a) {
  auto moe = load_moe<T>(ctx.resolve(a.moe));
  auto corpora = a.corpus.load(ctx);
  auto data = CorpusSet::split(corpora, a.heldout_every);
  const auto& docs = a.all_documents ? corpora : data.heldout;
  RoutingSampleOptions opt{a.samples, std::min(a.seq_len, moe.config.max_seq_len), 16, a.seed};
  auto stats = collect_routing_stats(moe, std::span<const DomainCorpus>(docs), opt);
  const auto dir = ctx.resolve(a.out);
  fs::create_directories(dir);
  export_csv(stats, routing_stats_path(dir, a.tag));
  export_json(stats, dir / ("routing_stats_" + a.tag + ".json"));
  detail::print_routing(ctx, stats, moe.domains);
  if (moe.router_kind == RouterKind::Nexus) {
    auto rep = similarity_report(moe, a.block);
    export_json(rep, similarity_path(dir, rep.block));
    *ctx.out << "similarity (block " << rep.block << ") rank correlation "
             << (std::isfinite(rep.rank_correlation) ? std::to_string(rep.rank_correlation) : "n/a") << '\n';
  } else {
    ctx.log("linear router: no embedding similarity report");
  }
  *ctx.out << "wrote " << routing_stats_path(dir, a.tag).string() << '\n';
  return kExitOk;
}

struct DenseMergeArgs {
  std::string seed_ckpt;
  std::vector<std::string> expert_ckpts;
  std::string out;
};

template <std::floating_point T>
int cmd_dense_merge(const Context& ctx, const DenseMergeArgs& a) {
  auto seed = load_dense<T>(ctx.resolve(a.seed_ckpt));
  std::vector<DenseModelState<T>> experts;
  for (const auto& p : a.expert_ckpts) experts.push_back(load_dense<T>(ctx.resolve(p)));
  auto merged = dense_merge<T>(seed, std::span<const DenseModelState<T>>(experts));
  const auto out = ctx.resolve(a.out);
  save_checkpoint(out, merged);
  *ctx.out << "merged seed + " << experts.size() << " experts -> " << out.string() << '\n';
  return kExitOk;
}

struct EvalArgs {
  std::string ckpt;
  CorpusFlags corpus;
  std::size_t sequences = 32;
  std::size_t seq_len = 64;
  std::size_t heldout_every = 10;
};

template <std::floating_point T>
int cmd_eval(const Context& ctx, const EvalArgs& a) {
  auto data = CorpusSet::split(a.corpus.load(ctx), a.heldout_every);
  const auto dir = ctx.resolve(a.ckpt);
  const auto kind = read_model_kind(dir);
  std::vector<DomainEval> evals;
  if (kind == "dense") {
    evals = evaluate(load_dense<T>(dir), data.heldout, a.sequences, a.seq_len);
  } else {
    evals = evaluate(load_moe<T>(dir), data.heldout, a.sequences, a.seq_len);
  }
  detail::print_eval(ctx, "eval", evals);
  return kExitOk;
}

struct PipelineArgs {
  std::string spec;
  std::string out = "run";
  std::string config;
  std::uint64_t seed = 1;
  std::uint64_t data_seed = 1;
  std::size_t seed_tokens = 2'000'000;
  std::size_t expert_tokens = 2'000'000;
  std::size_t moe_tokens = 2'000'000;
  std::size_t finetune_tokens = 200'000;
  std::size_t batch_size = 8;
  std::size_t seq_len = 64;
  std::string router = "both";
  double lb_factor = 0.05;
  std::string mixture = "uniform";
  std::string embed_method = "seed-model-mean";
  std::size_t embed_dim = 0;
  std::size_t samples = 512;
  std::string new_domain;
};

inline PipelineOptions pipeline_options(const Context& ctx, const PipelineArgs& a) {
  PipelineOptions o = desk_defaults();
  o.model = detail::read_model_config(ctx, a.config);
  o.data = read_generation_spec(ctx.resolve(a.spec));
  o.data_seed = a.data_seed;
  o.seed = a.seed;
  o.new_domain = a.new_domain;
  for (auto* t : {&o.seed_train, &o.expert_train, &o.moe_train, &o.finetune_train}) {
    t->batch_size = a.batch_size;
    t->seq_len = a.seq_len;
  }
  o.seed_train.total_tokens = a.seed_tokens;
  o.expert_train.total_tokens = a.expert_tokens;
  o.moe_train.total_tokens = a.moe_tokens;
  o.finetune_train.total_tokens = a.finetune_tokens;
  o.moe_train.mixture = parse_mixture(a.mixture);
  o.embed.method = parse_embed_method(a.embed_method);
  o.embed.m = a.embed_dim;
  o.routing.samples_per_domain = a.samples;
  o.routing.seq_len = a.seq_len;
  o.log = [&ctx](const std::string& m) { ctx.log(m); };
  return o;
}

template <std::floating_point T>
int cmd_pipeline(const Context& ctx, const PipelineArgs& a) {
  std::vector<RouterKind> routers;
  if (a.router == "both") {
    routers = {RouterKind::Nexus, RouterKind::Linear};
  } else {
    routers = {parse_router_kind(a.router)};
  }
  const auto o = pipeline_options(ctx, a);
  const auto dir = ctx.resolve(a.out);
  fs::create_directories(dir / "data");
  auto dense = run_dense_stage<T>(o);
  for (const auto& c : dense.corpora) write_jsonl(c, dir / "data" / (c.domain_id + ".jsonl"));
  save_checkpoint(dir / "seed", dense.seed);
  detail::write_reports(ctx, dir / "seed", dense.seed_report);
  for (std::size_t i = 0; i < dense.experts.size(); ++i) {
    save_checkpoint(dir / ("expert_" + dense.expert_domains[i]), dense.experts[i]);
  }
  if (dense.new_expert) save_checkpoint(dir / ("expert_" + dense.new_domain), *dense.new_expert);
  dense.embeddings.save(dir / "embeddings.json");

  nlohmann::json summary{{"seed", a.seed}, {"data_seed", a.data_seed}, {"expert_domains", dense.expert_domains},
                         {"new_domain", dense.new_domain}};
  for (const auto& e : dense.merged_eval) summary["dense_merge"][e.domain] = e.perplexity;
  for (auto kind : routers) {
    const auto name = to_string(kind);
    auto s = run_moe_stage<T>(o, dense, kind, a.lb_factor);
    save_checkpoint(dir / ("moe_" + name), s.trained);
    detail::write_reports(ctx, dir / ("moe_" + name), s.moe_report);
    fs::create_directories(dir / "analysis");
    export_csv(s.stats, routing_stats_path(dir / "analysis", name));
    *ctx.out << "== " << name << " MoE routing (cross-block mean probability)\n";
    detail::print_routing(ctx, s.stats, s.trained.domains);
    nlohmann::json r{{"mixed_perplexity", s.moe_report.final_eval().mixed_perplexity()}};
    for (std::size_t d = 0; d < s.stats.domains.size(); ++d) {
      r["argmax_expert"][s.stats.domains[d]] = s.trained.domains[s.stats.argmax_expert(d)];
    }
    if (kind == RouterKind::Nexus) {
      auto rep = similarity_report(s.trained);
      export_json(rep, similarity_path(dir / "analysis", rep.block));
      r["rank_correlation"] = rep.rank_correlation;
    }
    if (s.finetuned) {
      save_checkpoint(dir / ("extended_" + name), *s.finetuned);
      detail::write_reports(ctx, dir / ("extended_" + name), *s.finetune_report);
      export_csv(*s.final_stats, routing_stats_path(dir / "analysis", name + "_extended"));
      *ctx.out << "== " << name << " MoE after extension + finetune\n";
      detail::print_routing(ctx, *s.final_stats, s.finetuned->domains);
      const auto& nd = dense.new_domain;
      r["new_domain_perplexity"] = {{"before_finetune", MoEStage<T>::perplexity_of(s.before_finetune, nd)},
                                    {"after_finetune", MoEStage<T>::perplexity_of(s.after_finetune, nd)}};
      r["old_domain_mean_perplexity"] = {
          {"before_extension", MoEStage<T>::mean_perplexity(s.before_extension, dense.expert_domains)},
          {"after_finetune", MoEStage<T>::mean_perplexity(s.after_finetune, dense.expert_domains)}};
    }
    summary["routers"][name] = r;
  }
  std::ofstream(dir / "summary.json") << summary.dump(2) << '\n';
  *ctx.out << summary.dump(2) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- driver

/// Calls fn.template operator()<T>() with T chosen by the precision.
template <class Fn>
int with_precision(int precision, Fn&& fn) {
  if (precision == 64) return fn.template operator()<double>();
  if (precision == 32) return fn.template operator()<float>();
  throw ValidationError("precision must be 32 or 64, got " + std::to_string(precision));
}

inline int default_precision() {
  const char* env = std::getenv("NEXUS_PRECISION");
  if (!env || !*env) return 32;
  try {
    return std::stoi(env);
  } catch (const std::exception&) {
    return -1;
  }
}

/// Parses argv and runs one command. Output streams are injectable for tests.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Context ctx;
  ctx.out = &out;
  ctx.err = &err;
  ctx.precision = default_precision();

  CLI::App app{"Sparse upcycling of dense domain experts into a mixture of experts"};
  app.require_subcommand(1);
  app.set_config("--experiment", "", "TOML experiment file; command-line flags override it");
  app.add_option("--workdir", ctx.workdir, "base directory for relative paths");
  app.add_option("--precision", ctx.precision, "32 or 64 (default: NEXUS_PRECISION or 32)");
  app.add_flag("--quiet", ctx.quiet, "no progress log");

  GenDataArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "generate synthetic domain corpora");
  c_gen->add_option("--spec", gen.spec, "generation spec (JSON)")->required();
  c_gen->add_option("--out", gen.out)->capture_default_str();
  c_gen->add_option("--seed", gen.seed)->capture_default_str();

  TrainDenseArgs seed_args, expert_args;
  expert_args.expert = true;
  auto* c_seed = app.add_subcommand("train-seed", "train a dense seed model");
  auto* c_expert = app.add_subcommand("train-expert", "train a dense domain expert from the seed");
  for (auto [cmd, args] : {std::pair{c_seed, &seed_args}, std::pair{c_expert, &expert_args}}) {
    args->train.add_to(cmd, false);
    args->corpus.add_to(cmd);
    cmd->add_option("--config", args->config, "model config JSON");
    cmd->add_option("--init", args->init, "initial dense checkpoint");
    cmd->add_option("--out", args->out, "output checkpoint directory")->required();
  }

  UpcycleArgs up;
  auto* c_up = app.add_subcommand("upcycle", "build an MoE from a seed and dense experts");
  c_up->add_option("--seed-ckpt", up.seed_ckpt)->required();
  c_up->add_option("--expert-ckpt", up.expert_ckpts, "expert checkpoints in routed order")->required();
  c_up->add_option("--router", up.router, "nexus | linear")->capture_default_str();
  c_up->add_option("--embeddings", up.embeddings, "domain embeddings file (nexus router)");
  c_up->add_option("--k", up.k, "experts per token")->capture_default_str();
  c_up->add_option("--lb-factor", up.lb_factor)->capture_default_str();
  c_up->add_option("--seed", up.seed, "router initialization seed")->capture_default_str();
  c_up->add_flag("--include-seed-in-merge", up.include_seed_in_merge, "average the seed into non-FFN parameters");
  c_up->add_option("--out", up.out)->required();

  EmbedArgs emb;
  auto* c_emb = app.add_subcommand("embed", "compute domain embeddings");
  emb.corpus.add_to(c_emb);
  c_emb->add_option("--seed-ckpt", emb.seed_ckpt, "seed checkpoint (seed-model-mean)");
  c_emb->add_option("--method", emb.method, "seed-model-mean | hashed-ngram")->capture_default_str();
  c_emb->add_option("--m", emb.m, "embedding width (0: method default)");
  c_emb->add_option("--samples", emb.samples, "documents per domain")->capture_default_str();
  c_emb->add_option("--seed", emb.seed)->capture_default_str();
  c_emb->add_option("--heldout-every", emb.heldout_every)->capture_default_str();
  c_emb->add_option("--out", emb.out)->capture_default_str();

  TrainMoEArgs moe_args, ft_args;
  auto* c_moe = app.add_subcommand("train-moe", "train an upcycled MoE on the domain mix");
  auto* c_ft = app.add_subcommand("finetune", "finetune an extended MoE on 50% new domain / 50% the rest");
  for (auto [cmd, args] : {std::pair{c_moe, &moe_args}, std::pair{c_ft, &ft_args}}) {
    args->train.add_to(cmd, true);
    args->corpus.add_to(cmd);
    cmd->add_option("--init", args->init, "MoE checkpoint")->required();
    cmd->add_option("--out", args->out)->required();
  }
  ft_args.train.tokens = 200'000;
  c_ft->add_option("--new-domain", ft_args.new_domain, "defaults to the last routed expert's domain");

  ExtendArgs ext;
  auto* c_ext = app.add_subcommand("extend", "append a new dense expert to a trained MoE");
  c_ext->add_option("--moe", ext.moe)->required();
  c_ext->add_option("--expert-ckpt", ext.expert_ckpt)->required();
  c_ext->add_option("--embeddings", ext.embeddings, "file holding the new domain's embedding (nexus)");
  c_ext->add_option("--domain", ext.domain, "new domain id (default: the expert's label)");
  c_ext->add_option("--seed", ext.seed, "router reset seed (linear)")->capture_default_str();
  c_ext->add_option("--out", ext.out)->required();

  AnalyzeArgs an;
  auto* c_an = app.add_subcommand("analyze", "routing statistics and embedding similarity");
  c_an->add_option("--moe", an.moe)->required();
  an.corpus.add_to(c_an);
  c_an->add_option("--samples", an.samples, "windows per domain")->capture_default_str();
  c_an->add_option("--seq-len", an.seq_len)->capture_default_str();
  c_an->add_option("--seed", an.seed)->capture_default_str();
  c_an->add_option("--heldout-every", an.heldout_every)->capture_default_str();
  c_an->add_flag("--all-documents", an.all_documents, "sample from all documents, not only held-out ones");
  c_an->add_option("--tag", an.tag)->capture_default_str();
  c_an->add_option("--block", an.block, "block for the similarity report (default: last)");
  c_an->add_option("--out", an.out)->capture_default_str();

  DenseMergeArgs dm;
  auto* c_dm = app.add_subcommand("dense-merge", "average seed and experts into one dense model");
  c_dm->add_option("--seed-ckpt", dm.seed_ckpt)->required();
  c_dm->add_option("--expert-ckpt", dm.expert_ckpts)->required();
  c_dm->add_option("--out", dm.out)->required();

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "held-out perplexity per domain");
  c_ev->add_option("--ckpt", ev.ckpt)->required();
  ev.corpus.add_to(c_ev);
  c_ev->add_option("--sequences", ev.sequences)->capture_default_str();
  c_ev->add_option("--seq-len", ev.seq_len)->capture_default_str();
  c_ev->add_option("--heldout-every", ev.heldout_every)->capture_default_str();

  PipelineArgs pl;
  auto* c_pl = app.add_subcommand("pipeline", "run every phase end to end");
  c_pl->add_option("--spec", pl.spec, "generation spec (JSON)")->required();
  c_pl->add_option("--out", pl.out)->capture_default_str();
  c_pl->add_option("--config", pl.config, "model config JSON");
  c_pl->add_option("--seed", pl.seed)->capture_default_str();
  c_pl->add_option("--data-seed", pl.data_seed)->capture_default_str();
  c_pl->add_option("--seed-tokens", pl.seed_tokens)->capture_default_str();
  c_pl->add_option("--expert-tokens", pl.expert_tokens)->capture_default_str();
  c_pl->add_option("--moe-tokens", pl.moe_tokens)->capture_default_str();
  c_pl->add_option("--finetune-tokens", pl.finetune_tokens)->capture_default_str();
  c_pl->add_option("--batch-size", pl.batch_size)->capture_default_str();
  c_pl->add_option("--seq-len", pl.seq_len)->capture_default_str();
  c_pl->add_option("--router", pl.router, "nexus | linear | both")->capture_default_str();
  c_pl->add_option("--lb-factor", pl.lb_factor)->capture_default_str();
  c_pl->add_option("--mixture", pl.mixture, "phase-2 mixture")->capture_default_str();
  c_pl->add_option("--embed-method", pl.embed_method)->capture_default_str();
  c_pl->add_option("--embed-dim", pl.embed_dim);
  c_pl->add_option("--samples", pl.samples, "routing-analysis windows per domain")->capture_default_str();
  c_pl->add_option("--new-domain", pl.new_domain, "domain added by extension ('-' to skip)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    return with_precision(ctx.precision, [&]<class T>() -> int {
      if (c_gen->parsed()) return cmd_gen_data(ctx, gen);
      if (c_seed->parsed()) return cmd_train_dense<T>(ctx, seed_args);
      if (c_expert->parsed()) return cmd_train_dense<T>(ctx, expert_args);
      if (c_up->parsed()) return cmd_upcycle<T>(ctx, up);
      if (c_emb->parsed()) return cmd_embed<T>(ctx, emb);
      if (c_moe->parsed()) return cmd_train_moe<T>(ctx, moe_args, false);
      if (c_ft->parsed()) return cmd_train_moe<T>(ctx, ft_args, true);
      if (c_ext->parsed()) return cmd_extend<T>(ctx, ext);
      if (c_an->parsed()) return cmd_analyze<T>(ctx, an);
      if (c_dm->parsed()) return cmd_dense_merge<T>(ctx, dm);
      if (c_ev->parsed()) return cmd_eval<T>(ctx, ev);
      if (c_pl->parsed()) return cmd_pipeline<T>(ctx, pl);
      return kExitValidation;
    });
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::invalid_argument& e) {  // ShapeError, ArgumentError
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}

}  // namespace nexus::cli
