// SPDX-License-Identifier: Apache-2.0
//
// AdamW, the warmup + cosine schedule, and the three phase drivers: dense
// expert training, MoE training on the domain mix, and the short finetune
// after extension.

#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"
#include "nexus/analysis.hpp"
#include "nexus/checkpoint.hpp"
#include "nexus/error.hpp"
#include "nexus/moe.hpp"
#include "nexus/text_data.hpp"
#include "nexus/transformer.hpp"

namespace nexus {

struct TrainConfig {
  std::size_t total_tokens = 2'000'000;
  std::size_t batch_size = 8;
  std::size_t seq_len = 64;
  double max_lr = 1e-3;
  double final_lr = 3e-4;
  double warmup_fraction = 0.10;
  double lb_factor = 0.05;
  MixtureSpec mixture = MixtureSpec::uniform();
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;       // steps; 0 evaluates only before and after training
  std::size_t eval_sequences = 32;  // held-out windows per domain
  std::size_t log_every = 1;
  std::size_t routing_samples = 64;  // per domain for MoE snapshots; 0 disables
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.1;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // 0 disables
  std::filesystem::path checkpoint_dir;  // written at eval boundaries when set

  std::size_t batch_tokens() const { return batch_size * seq_len; }
  std::size_t total_steps() const { return total_tokens / batch_tokens(); }

  void validate() const {
    if (batch_size == 0 || seq_len == 0) throw ValidationError("train config: batch shape must be positive");
    if (!(max_lr >= 0.0) || !(final_lr >= 0.0) || final_lr > max_lr) {
      throw ValidationError("train config: need 0 <= final_lr <= max_lr");
    }
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) {
      throw ValidationError("train config: warmup_fraction must be in [0, 1)");
    }
    if (!(lb_factor >= 0.0)) throw ValidationError("train config: lb_factor must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
      throw ValidationError("train config: betas must be in [0, 1)");
    }
    if (!(weight_decay >= 0.0) || !(adam_eps > 0.0) || !(grad_clip >= 0.0)) {
      throw ValidationError("train config: weight_decay, adam_eps and grad_clip must be non-negative");
    }
    if (eval_sequences == 0) throw ValidationError("train config: eval_sequences must be positive");
    if (log_every == 0) throw ValidationError("train config: log_every must be positive");
  }
};

inline void to_json(nlohmann::json& j, const MixtureSpec& m) {
  j = {{"mode", to_string(m.mode)}, {"weights", nlohmann::json::object()}};
  for (const auto& [id, w] : m.weights) j["weights"][id] = w;
}

inline void from_json(const nlohmann::json& j, MixtureSpec& m) {
  m.mode = parse_mixture_mode(j.at("mode").get<std::string>());
  m.weights.clear();
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    if (w.is_array()) {
      for (const auto& id : w) m.weights.emplace_back(id.get<std::string>(), 1.0);
    } else {
      for (auto it = w.begin(); it != w.end(); ++it) m.weights.emplace_back(it.key(), it.value().get<double>());
    }
  }
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"total_tokens", c.total_tokens},     {"batch_size", c.batch_size},
       {"seq_len", c.seq_len},               {"max_lr", c.max_lr},
       {"final_lr", c.final_lr},             {"warmup_fraction", c.warmup_fraction},
       {"lb_factor", c.lb_factor},           {"mixture", c.mixture},
       {"seed", c.seed},                     {"eval_every", c.eval_every},
       {"eval_sequences", c.eval_sequences}, {"log_every", c.log_every},
       {"routing_samples", c.routing_samples}, {"beta1", c.beta1},
       {"beta2", c.beta2},                   {"weight_decay", c.weight_decay},
       {"adam_eps", c.adam_eps},             {"grad_clip", c.grad_clip}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.total_tokens = j.value("total_tokens", d.total_tokens);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seq_len = j.value("seq_len", d.seq_len);
  c.max_lr = j.value("max_lr", d.max_lr);
  c.final_lr = j.value("final_lr", d.final_lr);
  c.warmup_fraction = j.value("warmup_fraction", d.warmup_fraction);
  c.lb_factor = j.value("lb_factor", d.lb_factor);
  c.mixture = j.contains("mixture") ? j.at("mixture").get<MixtureSpec>() : d.mixture;
  c.seed = j.value("seed", d.seed);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.eval_sequences = j.value("eval_sequences", d.eval_sequences);
  c.log_every = j.value("log_every", d.log_every);
  c.routing_samples = j.value("routing_samples", d.routing_samples);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
}

/// Linear warmup from 0 to max_lr, then cosine decay to final_lr.
inline double lr_schedule(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  if (step > total_steps) {
    throw ArgumentError("lr_schedule: step " + std::to_string(step) + " past total " + std::to_string(total_steps));
  }
  const auto warmup = static_cast<std::size_t>(std::floor(cfg.warmup_fraction * static_cast<double>(total_steps)));
  if (step < warmup) return cfg.max_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (step == warmup) return cfg.max_lr;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  return cfg.final_lr + 0.5 * (cfg.max_lr - cfg.final_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Adam with decoupled weight decay on the parameters added with decay=true.
template <std::floating_point T>
class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg) : cfg_(cfg) {}

  void add(Tensor<T>& p, bool decay) {
    slots_.push_back({&p, std::vector<double>(p.numel(), 0.0), std::vector<double>(p.numel(), 0.0), decay});
  }

  std::size_t size() const { return slots_.size(); }

  /// Global L2 norm of the current gradients.
  double grad_norm() const {
    double ss = 0.0;
    for (const auto& s : slots_)
      if (s.p->has_grad())
        for (T g : s.p->grad()) ss += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(ss);
  }

  void step(double lr) {
    ++t_;
    double clip = 1.0;
    if (cfg_.grad_clip > 0.0) {
      const double norm = grad_norm();
      if (norm > cfg_.grad_clip) clip = cfg_.grad_clip / norm;
    }
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (auto& s : slots_) {
      auto w = s.p->mutable_data();
      const bool has = s.p->has_grad();
      std::span<const T> g = has ? s.p->grad() : std::span<const T>{};
      const double wd = s.decay ? cfg_.weight_decay : 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = has ? static_cast<double>(g[i]) * clip : 0.0;
        s.m[i] = b1 * s.m[i] + (1.0 - b1) * gi;
        s.v[i] = b2 * s.v[i] + (1.0 - b2) * gi * gi;
        const double update = (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + cfg_.adam_eps) + wd * static_cast<double>(w[i]);
        w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * update);
      }
    }
  }

 private:
  struct Slot {
    Tensor<T>* p;
    std::vector<double> m, v;
    bool decay;
  };
  TrainConfig cfg_;
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------- reports

struct StepRecord {
  std::size_t step = 0;
  std::size_t tokens = 0;
  double lr = 0.0;
  double lm_loss = 0.0;
  double lb_loss = 0.0;
  double loss = 0.0;
  bool operator==(const StepRecord&) const = default;
};

struct DomainEval {
  std::string domain;
  double loss = 0.0;
  double perplexity = 0.0;
  std::size_t tokens = 0;
  bool operator==(const DomainEval&) const = default;
};

struct EvalRecord {
  std::size_t step = 0;
  std::vector<DomainEval> domains;

  const DomainEval& at(std::string_view id) const {
    for (const auto& d : domains)
      if (d.domain == id) return d;
    throw ValidationError("no evaluation for domain '" + std::string(id) + "'");
  }
  /// exp of the unweighted mean per-domain loss over `ids` (all when empty).
  double mixed_perplexity(std::span<const std::string> ids = {}) const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& d : domains) {
      if (!ids.empty() && std::find(ids.begin(), ids.end(), d.domain) == ids.end()) continue;
      s += d.loss;
      ++n;
    }
    if (n == 0) throw ValidationError("mixed_perplexity: no matching domains");
    return std::exp(s / static_cast<double>(n));
  }
  bool operator==(const EvalRecord&) const = default;
};

struct RoutingSnapshot {
  std::size_t step = 0;
  std::vector<std::string> domains;
  std::vector<std::vector<double>> cross_block_probs;  // [domain][expert]
  bool operator==(const RoutingSnapshot&) const = default;
};

struct TrainReport {
  std::string phase;
  TrainConfig config;
  std::size_t total_steps = 0;
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  std::vector<RoutingSnapshot> routing;
  std::map<std::string, std::size_t> domain_sequences;
  std::string initial_hash;
  std::string final_hash;
  double wall_clock_seconds = 0.0;

  const EvalRecord& initial_eval() const { return evals.front(); }
  const EvalRecord& final_eval() const { return evals.back(); }

  /// Equality of everything except wall-clock time.
  bool same_results(const TrainReport& o) const {
    nlohmann::json a = config, b = o.config;
    return phase == o.phase && a == b && total_steps == o.total_steps && steps == o.steps && evals == o.evals &&
           routing == o.routing && domain_sequences == o.domain_sequences && initial_hash == o.initial_hash &&
           final_hash == o.final_hash;
  }

  nlohmann::json summary() const {
    nlohmann::json j{{"phase", phase},
                     {"config", config},
                     {"total_steps", total_steps},
                     {"domain_sequences", domain_sequences},
                     {"initial_hash", initial_hash},
                     {"final_hash", final_hash},
                     {"wall_clock_seconds", wall_clock_seconds}};
    auto eval_json = [](const EvalRecord& e) {
      nlohmann::json d = nlohmann::json::object();
      for (const auto& x : e.domains) d[x.domain] = {{"loss", x.loss}, {"perplexity", x.perplexity}, {"tokens", x.tokens}};
      return nlohmann::json{{"step", e.step}, {"domains", d}};
    };
    if (!evals.empty()) {
      j["initial_eval"] = eval_json(initial_eval());
      j["final_eval"] = eval_json(final_eval());
    }
    if (!routing.empty()) {
      nlohmann::json r = nlohmann::json::object();
      const auto& last = routing.back();
      for (std::size_t d = 0; d < last.domains.size(); ++d) r[last.domains[d]] = last.cross_block_probs[d];
      j["final_routing"] = r;
    }
    return j;
  }

  /// One JSON record per line: logged steps, evaluations, routing snapshots.
  void write_jsonl(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    for (const auto& s : steps) {
      out << nlohmann::json{{"type", "step"},       {"step", s.step},       {"tokens", s.tokens}, {"lr", s.lr},
                            {"lm_loss", s.lm_loss}, {"lb_loss", s.lb_loss}, {"loss", s.loss}}
                 .dump()
          << '\n';
    }
    for (const auto& e : evals) {
      nlohmann::json d = nlohmann::json::object();
      for (const auto& x : e.domains) d[x.domain] = {{"loss", x.loss}, {"perplexity", x.perplexity}};
      out << nlohmann::json{{"type", "eval"}, {"step", e.step}, {"domains", d}}.dump() << '\n';
    }
    for (const auto& r : routing) {
      nlohmann::json d = nlohmann::json::object();
      for (std::size_t i = 0; i < r.domains.size(); ++i) d[r.domains[i]] = r.cross_block_probs[i];
      out << nlohmann::json{{"type", "routing"}, {"step", r.step}, {"cross_block_probs", d}}.dump() << '\n';
    }
    if (!out) throw IoError("write failed for " + path.string());
  }

  void write_summary(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << summary().dump(2) << '\n';
  }
};

/// Divergence with the report collected up to the failing step.
class TrainingDiverged : public DivergenceError {
 public:
  TrainingDiverged(const std::string& what, std::size_t step, TrainReport report)
      : DivergenceError(what, step), report_(std::move(report)) {}
  const TrainReport& report() const { return report_; }

 private:
  TrainReport report_;
};

template <class Model>
struct TrainResult {
  Model model;
  TrainReport report;
};

// ---------------------------------------------------------------- evaluation

namespace detail {

template <std::floating_point T>
Tensor<T> logits_of(const DenseModelState<T>& m, const Batch& b) {
  return forward(m, b);
}

template <std::floating_point T>
Tensor<T> logits_of(const MoEModelState<T>& m, const Batch& b) {
  return forward(m, b).logits;
}

template <class Model>
using scalar_of = std::remove_cvref_t<decltype(std::declval<Model>().final_norm.data()[0])>;

}  // namespace detail

/// Held-out next-token loss per domain over evenly spaced windows.
template <class Model>
std::vector<DomainEval> evaluate(const Model& model, std::span<const DomainCorpus> heldout,
                                 std::size_t sequences, std::size_t seq_len) {
  using T = detail::scalar_of<Model>;
  NoGradScope<T> no_grad;
  std::vector<DomainEval> out;
  for (const auto& c : heldout) {
    double sum = 0.0;
    std::size_t tokens = 0;
    for (const auto& b : fixed_windows(c, sequences, seq_len)) {
      const auto n = static_cast<std::size_t>(std::count_if(b.targets.begin(), b.targets.end(),
                                                            [](TokenId t) { return t != kPad; }));
      if (n == 0) continue;
      sum += static_cast<double>(cross_entropy_loss(detail::logits_of(model, b), b.targets).item()) *
             static_cast<double>(n);
      tokens += n;
    }
    if (tokens == 0) throw ValidationError("no held-out tokens for domain '" + c.domain_id + "'");
    const double loss = sum / static_cast<double>(tokens);
    out.push_back({c.domain_id, loss, std::exp(loss), tokens});
  }
  return out;
}

// ---------------------------------------------------------------- loop

namespace detail {

/// Weight decay applies to matrices, not to norm gains.
template <std::floating_point T>
bool decays(const std::string&, const Tensor<T>& p) {
  return p.rank() >= 2;
}

struct StepLoss {
  double lm = 0.0;
  double lb = 0.0;
};

/// Shared training loop. `compute_loss(model, batch)` builds the loss on the
/// active tape and returns it with its logged parts; `after_step(model)`
/// runs after every optimizer step.
template <class Model, class LossFn, class AfterStep>
TrainReport run_training(Model& model, const CorpusSet& data, const TrainConfig& cfg, const std::string& phase,
                         LossFn&& compute_loss, AfterStep&& after_step) {
  using T = scalar_of<Model>;
  cfg.validate();
  const auto clock_start = std::chrono::steady_clock::now();
  TrainReport report;
  report.phase = phase;
  report.config = cfg;
  report.total_steps = cfg.total_steps();
  report.initial_hash = state_hash(model);

  AdamW<T> opt(cfg);
  model.for_each_parameter([&](const std::string& name, Tensor<T>& p) {
    if (p.requires_grad()) opt.add(p, decays(name, p));
  });

  BatchSampler sampler(data.train, cfg.mixture, cfg.batch_size, cfg.seq_len, cfg.seed);
  for (const auto& id : data.domain_ids()) report.domain_sequences[id] = 0;

  auto do_eval = [&](std::size_t step) {
    report.evals.push_back({step, evaluate(model, data.heldout, cfg.eval_sequences, cfg.seq_len)});
    if constexpr (requires { model.router_kind; }) {
      if (cfg.routing_samples > 0) {
        RoutingSampleOptions ro{cfg.routing_samples, cfg.seq_len, 16, cfg.seed};
        auto stats = collect_routing_stats(model, std::span<const DomainCorpus>(data.heldout), ro);
        RoutingSnapshot snap{step, stats.domains, {}};
        for (std::size_t d = 0; d < stats.domains.size(); ++d) snap.cross_block_probs.push_back(stats.cross_block_probs(d));
        report.routing.push_back(std::move(snap));
      }
    }
    if (!cfg.checkpoint_dir.empty() && step > 0) {
      save_checkpoint(cfg.checkpoint_dir / ("step_" + std::to_string(step)), model);
    }
  };

  do_eval(0);
  const std::size_t total = report.total_steps;
  for (std::size_t step = 1; step <= total; ++step) {
    Batch batch = sampler.next();
    for (const auto& label : batch.domain_labels) ++report.domain_sequences[label];
    StepLoss parts;
    double loss_value = 0.0;
    try {
      Tape<T> tape;
      TapeScope<T> scope(tape);
      model.for_each_parameter([](const std::string&, Tensor<T>& p) { p.clear_grad(); });
      auto [loss, logged] = compute_loss(model, batch);
      parts = logged;
      loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value)) {
        throw NumericError("loss is " + std::to_string(loss_value));
      }
      tape.backward(loss);
    } catch (const NumericError& e) {
      report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
      throw TrainingDiverged(phase + " diverged at step " + std::to_string(step) + ": " + e.what(), step,
                             std::move(report));
    }
    const double lr = lr_schedule(step, total, cfg);
    opt.step(lr);
    model.for_each_parameter([](const std::string&, Tensor<T>& p) { p.clear_grad(); });
    after_step(model);
    if (step % cfg.log_every == 0 || step == total) {
      report.steps.push_back({step, step * cfg.batch_tokens(), lr, parts.lm, parts.lb, loss_value});
    }
    if (cfg.eval_every > 0 && step % cfg.eval_every == 0 && step != total) do_eval(step);
  }
  if (total > 0) do_eval(total);
  report.final_hash = state_hash(model);
  report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
  return report;
}

}  // namespace detail

/// Phase 1: next-token training of a dense model (seed or expert).
template <std::floating_point T>
TrainResult<DenseModelState<T>> train_dense(const DenseModelState<T>& init, const CorpusSet& data,
                                            const TrainConfig& cfg) {
  DenseModelState<T> model = init.clone();
  model.for_each_parameter([](const std::string&, Tensor<T>& p) { p.set_requires_grad(true); });
  auto report = detail::run_training(
      model, data, cfg, "dense",
      [](const DenseModelState<T>& m, const Batch& b) {
        auto loss = cross_entropy_loss(forward(m, b), b.targets);
        return std::pair{loss, detail::StepLoss{static_cast<double>(loss.item()), 0.0}};
      },
      [](DenseModelState<T>&) {});
  return {std::move(model), std::move(report)};
}

namespace detail {

template <std::floating_point T>
TrainResult<MoEModelState<T>> train_moe_impl(const MoEModelState<T>& init, const CorpusSet& data,
                                             const TrainConfig& cfg, const std::string& phase) {
  MoEModelState<T> model = init.clone();
  model.invalidate_caches();
  model.for_each_parameter([](const std::string& name, Tensor<T>& p) {
    p.set_requires_grad(name != "domain_embeddings");
  });
  model.lb_factor = cfg.lb_factor;
  const Tensor<T> frozen = model.domain_embeddings.defined() ? model.domain_embeddings.clone() : Tensor<T>{};
  const T alpha = static_cast<T>(cfg.lb_factor);
  auto report = run_training(
      model, data, cfg, phase,
      [alpha](const MoEModelState<T>& m, const Batch& b) {
        auto out = forward(m, b);
        auto lm = cross_entropy_loss(out.logits, b.targets);
        auto lb = mean_load_balance(out.decisions);
        StepLoss parts{static_cast<double>(lm.item()), static_cast<double>(lb.item())};
        return std::pair{add(lm, scale(lb, alpha)), parts};
      },
      [&frozen](MoEModelState<T>& m) {
        if (frozen.defined() && (m.domain_embeddings.requires_grad() || !m.domain_embeddings.bit_equal(frozen))) {
          throw ValidationError("domain embeddings changed during training");
        }
        m.invalidate_caches();
      });
  return {std::move(model), std::move(report)};
}

}  // namespace detail

/// Phase 2: train an upcycled MoE on the domain mix with
/// loss = LM + lb_factor * mean-over-blocks load balance.
template <std::floating_point T>
TrainResult<MoEModelState<T>> train_moe(const MoEModelState<T>& init, const CorpusSet& data,
                                        const TrainConfig& cfg) {
  return detail::train_moe_impl(init, data, cfg, "moe");
}

/// 50% `new_domain`, 50% spread uniformly over the other domains.
inline MixtureSpec extension_mixture(const std::string& new_domain, std::span<const std::string> domains) {
  std::vector<std::string> others;
  for (const auto& d : domains)
    if (d != new_domain) others.push_back(d);
  if (others.size() + 1 != domains.size()) {
    throw ValidationError("extension mixture: domain '" + new_domain + "' missing from the corpus set");
  }
  MixtureSpec m{MixtureMode::Explicit, {{new_domain, 0.5}}};
  if (others.empty()) {
    m.weights.front().second = 1.0;
    return m;
  }
  for (const auto& d : others) m.weights.emplace_back(d, 0.5 / static_cast<double>(others.size()));
  return m;
}

/// Phase 3: short finetune of an extended MoE on the 50/50 mixture of the
/// new domain and everything else in `data`.
template <std::floating_point T>
TrainResult<MoEModelState<T>> finetune_extended(const MoEModelState<T>& init, const CorpusSet& data,
                                                const std::string& new_domain, TrainConfig cfg) {
  auto ids = data.domain_ids();
  cfg.mixture = extension_mixture(new_domain, ids);
  return detail::train_moe_impl(init, data, cfg, "finetune");
}

}  // namespace nexus
