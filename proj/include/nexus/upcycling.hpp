// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint surgery: dense experts -> MoE, dense weight averaging, and
// appending a new expert to a trained MoE.

#pragma once

#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "nexus/domain_embeddings.hpp"
#include "nexus/error.hpp"
#include "nexus/moe.hpp"
#include "nexus/transformer.hpp"

namespace nexus {

namespace detail {

template <std::floating_point T>
void require_same_config(const ModelConfig& ref, const ModelConfig& other, const std::string& who) {
  auto diff = config_diff(ref, other);
  if (diff.empty()) return;
  std::string fields;
  for (const auto& f : diff) fields += (fields.empty() ? "" : ", ") + f;
  throw ValidationError(who + " config differs in: " + fields);
}

/// Running mean; exact when all inputs are identical.
template <std::floating_point T>
Tensor<T> mean_of(std::span<const Tensor<T>* const> parts) {
  Tensor<T> out = parts.front()->detach();
  auto o = out.mutable_data();
  for (std::size_t i = 1; i < parts.size(); ++i) {
    if (parts[i]->shape() != out.shape()) throw ShapeError("cannot average tensors of different shapes");
    auto x = parts[i]->data();
    const T inv = T(1) / static_cast<T>(i + 1);
    for (std::size_t j = 0; j < o.size(); ++j) o[j] += (x[j] - o[j]) * inv;
  }
  out.set_requires_grad(true);
  return out;
}

/// Non-FFN parameters shared by dense and MoE layouts.
template <std::floating_point T, class Model, class F>
void for_each_shared_parameter(Model& m, F&& f) {
  f(m.tok_embeddings);
  for (auto& b : m.blocks) {
    f(b.norm);
    f(b.attn.wq);
    f(b.attn.wk);
    f(b.attn.wv);
    f(b.attn.wo);
  }
  f(m.final_norm);
}

template <std::floating_point T, class Model>
std::vector<Tensor<T>*> shared_parameters(Model& m) {
  std::vector<Tensor<T>*> out;
  for_each_shared_parameter<T>(m, [&](Tensor<T>& t) { out.push_back(&t); });
  return out;
}

template <std::floating_point T, class Model>
std::vector<const Tensor<T>*> shared_parameters(const Model& m) {
  std::vector<const Tensor<T>*> out;
  for_each_shared_parameter<T>(m, [&](const Tensor<T>& t) { out.push_back(&t); });
  return out;
}

}  // namespace detail

struct UpcycleOptions {
  std::size_t k = 1;
  double lb_factor = 0.05;
  std::uint64_t seed = 0;  // router initialization
  /// Also average the seed into the non-FFN parameters (n+1 terms).
  bool include_seed_in_merge = false;
};

/// Builds an MoE whose block b has shared expert = seed FFN_b, routed
/// expert i = expert_i FFN_b (copied), and every non-FFN parameter set to
/// the elementwise mean over the experts. `domains` supplies the frozen
/// domain matrix for the projection router, one row per expert in order.
template <std::floating_point T>
MoEModelState<T> upcycle(const DenseModelState<T>& seed, std::span<const DenseModelState<T>> experts,
                         RouterKind router_kind, const EmbeddingSet* domains, const UpcycleOptions& opt = {}) {
  if (experts.empty()) throw ValidationError("upcycle needs at least one expert");
  for (std::size_t i = 0; i < experts.size(); ++i)
    detail::require_same_config<T>(seed.config, experts[i].config, "expert " + std::to_string(i));
  if (opt.k == 0 || opt.k > experts.size()) throw ValidationError("upcycle: k must be in [1, n]");

  MoEModelState<T> moe;
  moe.config = seed.config;
  moe.router_kind = router_kind;
  moe.k = opt.k;
  moe.lb_factor = opt.lb_factor;
  for (std::size_t i = 0; i < experts.size(); ++i) {
    moe.domains.push_back(experts[i].domain.empty() ? "expert" + std::to_string(i) : experts[i].domain);
  }
  {
    std::set<std::string> seen(moe.domains.begin(), moe.domains.end());
    if (seen.size() != moe.domains.size()) throw ValidationError("upcycle: experts share a domain id");
  }
  if (router_kind == RouterKind::Nexus) {
    if (!domains) throw ValidationError("the nexus router requires domain embeddings");
    moe.domain_embeddings = domains->select(moe.domains).template matrix<T>();
  }

  const std::size_t h = seed.config.d_model;
  Rng rng(opt.seed);
  for (std::size_t l = 0; l < seed.blocks.size(); ++l) {
    MoEBlock<T> b;
    b.moe.shared = seed.blocks[l].ffn.clone();
    for (const auto& e : experts) b.moe.experts.push_back(e.blocks[l].ffn.clone());
    b.moe.k = opt.k;
    if (router_kind == RouterKind::Linear) {
      b.moe.router = LinearRouterState<T>::init(h, experts.size(), rng);
    } else {
      b.moe.router = DomainProjectionState<T>::init(moe.domain_embeddings.dim(1), h, moe.domain_embeddings, rng);
    }
    moe.blocks.push_back(std::move(b));
  }

  auto targets = detail::shared_parameters<T>(moe);
  std::vector<std::vector<const Tensor<T>*>> sources(targets.size());
  if (opt.include_seed_in_merge) {
    auto s = detail::shared_parameters<T>(seed);
    for (std::size_t p = 0; p < targets.size(); ++p) sources[p].push_back(s[p]);
  }
  for (const auto& e : experts) {
    auto s = detail::shared_parameters<T>(e);
    for (std::size_t p = 0; p < targets.size(); ++p) sources[p].push_back(s[p]);
  }
  for (std::size_t p = 0; p < targets.size(); ++p)
    *targets[p] = detail::mean_of<T>(std::span<const Tensor<T>* const>(sources[p]));
  for (auto& b : moe.blocks) b.moe.validate();
  return moe;
}

/// Dense baseline: every parameter is the mean over {seed} and the experts.
template <std::floating_point T>
DenseModelState<T> dense_merge(const DenseModelState<T>& seed, std::span<const DenseModelState<T>> experts) {
  for (std::size_t i = 0; i < experts.size(); ++i)
    detail::require_same_config<T>(seed.config, experts[i].config, "expert " + std::to_string(i));
  DenseModelState<T> out = seed.clone();
  out.domain.clear();
  std::vector<std::vector<const Tensor<T>*>> sources;
  seed.for_each_parameter([&](const std::string&, const Tensor<T>& t) { sources.push_back({&t}); });
  for (const auto& e : experts) {
    std::size_t p = 0;
    e.for_each_parameter([&](const std::string&, const Tensor<T>& t) { sources[p++].push_back(&t); });
  }
  std::size_t p = 0;
  out.for_each_parameter([&](const std::string&, Tensor<T>& t) {
    t = detail::mean_of<T>(std::span<const Tensor<T>* const>(sources[p++]));
  });
  return out;
}

/// Blend weight for the incoming expert's non-FFN parameters.
inline double extension_weight(std::size_t n_experts_before) { return 1.0 / static_cast<double>(n_experts_before + 1); }

namespace detail {

template <std::floating_point T>
MoEModelState<T> extend_common(const MoEModelState<T>& moe, const DenseModelState<T>& new_expert,
                               const std::string& domain_id) {
  require_same_config<T>(moe.config, new_expert.config, "new expert");
  for (const auto& d : moe.domains)
    if (d == domain_id) throw ValidationError("MoE already has an expert for domain '" + domain_id + "'");
  MoEModelState<T> out = moe.clone();
  out.invalidate_caches();
  out.domains.push_back(domain_id);
  for (std::size_t l = 0; l < out.blocks.size(); ++l) out.blocks[l].moe.experts.push_back(new_expert.blocks[l].ffn.clone());

  const double lambda = extension_weight(moe.num_experts());
  auto dst = shared_parameters<T>(out);
  auto src = shared_parameters<T>(new_expert);
  for (std::size_t p = 0; p < dst.size(); ++p) {
    auto o = dst[p]->mutable_data();
    auto x = src[p]->data();
    for (std::size_t j = 0; j < o.size(); ++j) {
      o[j] = static_cast<T>((1.0 - lambda) * static_cast<double>(o[j]) + lambda * static_cast<double>(x[j]));
    }
  }
  return out;
}

}  // namespace detail

/// Appends `new_expert` as routed expert n and `d_new` as row n of the
/// domain matrix; non-FFN params become (1-l) phi_moe + l phi_new with
/// l = 1/(n+1). The projection weights carry over unchanged.
template <std::floating_point T>
MoEModelState<T> extend_moe(const MoEModelState<T>& moe, const DenseModelState<T>& new_expert,
                            const DomainEmbedding& d_new) {
  if (moe.router_kind != RouterKind::Nexus) {
    throw ValidationError("extend_moe needs a nexus router; use extend_moe_linear for the linear baseline");
  }
  if (d_new.dim() != moe.domain_embeddings.dim(1)) {
    throw ValidationError("new domain embedding has width " + std::to_string(d_new.dim()) + ", expected " +
                          std::to_string(moe.domain_embeddings.dim(1)));
  }
  MoEModelState<T> out = detail::extend_common(moe, new_expert, d_new.domain_id);
  const std::size_t n = moe.num_experts(), m = d_new.dim();
  std::vector<T> rows(moe.domain_embeddings.data().begin(), moe.domain_embeddings.data().end());
  for (double v : d_new.vector) rows.push_back(static_cast<T>(v));
  out.domain_embeddings = Tensor<T>(Shape{n + 1, m}, std::move(rows));
  for (auto& b : out.blocks) {
    std::get<DomainProjectionState<T>>(b.moe.router).domain_embeddings = out.domain_embeddings;
    b.moe.validate();
  }
  return out;
}

/// Linear-router baseline extension: same expert append and non-FFN blend,
/// then W_r is re-initialized with n+1 columns.
template <std::floating_point T>
MoEModelState<T> extend_moe_linear(const MoEModelState<T>& moe, const DenseModelState<T>& new_expert,
                                   const std::string& domain_id, std::uint64_t seed) {
  if (moe.router_kind != RouterKind::Linear) throw ValidationError("extend_moe_linear needs a linear router");
  MoEModelState<T> out = detail::extend_common(moe, new_expert, domain_id);
  Rng rng(seed);
  for (auto& b : out.blocks) {
    b.moe.router = LinearRouterState<T>::init(out.config.d_model, out.num_experts(), rng);
    b.moe.validate();
  }
  return out;
}

}  // namespace nexus
