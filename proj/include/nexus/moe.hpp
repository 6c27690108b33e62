// SPDX-License-Identifier: Apache-2.0
//
// MoE layer with an always-on shared expert, sparse top-k routed experts and
// two routers: a linear router (softmax(x W_r)) and the domain-projection
// router, which scores experts by x . e_i where e_i = W_2 swiglu(W_1 d_i) is
// projected from a frozen per-expert domain embedding d_i.

#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "nexus/ops.hpp"
#include "nexus/tensor.hpp"
#include "nexus/transformer.hpp"

namespace nexus {

enum class RouterKind { Linear, Nexus };

inline std::string to_string(RouterKind k) { return k == RouterKind::Linear ? "linear" : "nexus"; }

inline RouterKind parse_router_kind(std::string_view s) {
  if (s == "linear") return RouterKind::Linear;
  if (s == "nexus") return RouterKind::Nexus;
  throw ValidationError("unknown router kind '" + std::string(s) + "' (expected nexus|linear)");
}

template <std::floating_point T>
struct LinearRouterState {
  Tensor<T> w_r;  // [h, n]

  static LinearRouterState init(std::size_t h, std::size_t n, Rng& rng) {
    return {Tensor<T>::randn({h, n}, T(1.0 / std::sqrt(double(h))), rng, true)};
  }
  std::size_t num_experts() const { return w_r.dim(1); }
  LinearRouterState clone() const { return {w_r.clone()}; }
};

template <std::floating_point T>
struct DomainProjectionState {
  Tensor<T> w1;                 // [m, 2h]
  Tensor<T> w2;                 // [h, h]
  Tensor<T> domain_embeddings;  // [n, m], frozen
  std::optional<Tensor<T>> cached_expert_embeddings;  // [n, h]

  static DomainProjectionState init(std::size_t m, std::size_t h, Tensor<T> domains, Rng& rng) {
    if (domains.rank() != 2 || domains.dim(1) != m) {
      throw ShapeError("domain embeddings " + to_string(domains.shape()) + " do not have width " +
                       std::to_string(m));
    }
    domains.set_requires_grad(false);
    DomainProjectionState s;
    s.w1 = Tensor<T>::randn({m, 2 * h}, T(1.0 / std::sqrt(double(m))), rng, true);
    s.w2 = Tensor<T>::randn({h, h}, T(1.0 / std::sqrt(double(h))), rng, true);
    s.domain_embeddings = std::move(domains);
    return s;
  }
  std::size_t num_experts() const { return domain_embeddings.dim(0); }
  DomainProjectionState clone() const {
    DomainProjectionState s{w1.clone(), w2.clone(), domain_embeddings, std::nullopt};
    if (cached_expert_embeddings) s.cached_expert_embeddings = cached_expert_embeddings->clone();
    return s;
  }
};

template <std::floating_point T>
using RouterState = std::variant<LinearRouterState<T>, DomainProjectionState<T>>;

template <std::floating_point T>
struct MoELayerState {
  ExpertFFN<T> shared;
  std::vector<ExpertFFN<T>> experts;
  RouterState<T> router;
  std::size_t k = 1;

  std::size_t num_experts() const { return experts.size(); }
  RouterKind router_kind() const {
    return std::holds_alternative<LinearRouterState<T>>(router) ? RouterKind::Linear : RouterKind::Nexus;
  }

  void validate() const {
    if (experts.empty()) throw ValidationError("MoE layer needs at least one routed expert");
    if (k == 0 || k > experts.size()) {
      throw ValidationError("MoE layer: k=" + std::to_string(k) + " must be in [1, " +
                            std::to_string(experts.size()) + "]");
    }
    const std::size_t n = std::visit([](const auto& r) { return r.num_experts(); }, router);
    if (n != experts.size()) {
      throw ValidationError("router scores " + std::to_string(n) + " experts but layer has " +
                            std::to_string(experts.size()));
    }
  }

  MoELayerState clone() const {
    MoELayerState s;
    s.shared = shared.clone();
    for (const auto& e : experts) s.experts.push_back(e.clone());
    s.router = std::visit([](const auto& r) -> RouterState<T> { return r.clone(); }, router);
    s.k = k;
    return s;
  }
};

/// probs [..., n]; top_indices/gate values row-major [tokens, k]; gates are
/// the full-softmax probabilities at the selected indices.
template <std::floating_point T>
struct RoutingDecision {
  Tensor<T> probs;
  std::vector<std::size_t> top_indices;
  Tensor<T> gates;  // [tokens * k]
  std::size_t tokens = 0;
  std::size_t n = 0;
  std::size_t k = 0;

  std::size_t top1(std::size_t token) const { return top_indices[token * k]; }
};

namespace detail {

template <std::floating_point T>
RoutingDecision<T> decide(const Tensor<T>& logits, std::size_t k) {
  RoutingDecision<T> d;
  d.probs = softmax(logits, logits.rank() - 1);
  auto top = top_k(d.probs, k);
  d.tokens = top.rows;
  d.n = logits.shape().back();
  d.k = k;
  d.top_indices = std::move(top.indices);
  std::vector<std::size_t> rows(d.tokens * k);
  for (std::size_t t = 0; t < d.tokens; ++t)
    for (std::size_t s = 0; s < k; ++s) rows[t * k + s] = t;
  auto flat = reshape(d.probs, Shape{d.tokens, d.n});
  d.gates = gather_elements(flat, rows, d.top_indices);
  return d;
}

template <std::floating_point T>
void require_width(const Tensor<T>& x, std::size_t h, const char* who) {
  if (x.rank() < 1 || x.shape().back() != h) {
    throw ShapeError(std::string(who) + ": input " + to_string(x.shape()) + " does not have width " +
                     std::to_string(h));
  }
}

}  // namespace detail

template <std::floating_point T>
RoutingDecision<T> route_linear(const LinearRouterState<T>& router, const Tensor<T>& x, std::size_t k) {
  detail::require_width(x, router.w_r.dim(0), "route_linear");
  return detail::decide(matmul(x, router.w_r), k);
}

/// Expert embeddings [n, h]: e_i = W_2 . swiglu(W_1 . d_i) per row.
template <std::floating_point T>
Tensor<T> project_domains(const DomainProjectionState<T>& router) {
  if (!router.domain_embeddings.defined()) throw ArgumentError("project_domains: no domain embeddings");
  if (router.domain_embeddings.requires_grad()) {
    throw ArgumentError("project_domains: domain embeddings must be frozen");
  }
  return matmul(swiglu(matmul(router.domain_embeddings, router.w1)), router.w2);
}

/// Stores project_domains() for inference reuse.
template <std::floating_point T>
void cache_expert_embeddings(DomainProjectionState<T>& router) {
  NoGradScope<T> no_grad;
  router.cached_expert_embeddings = project_domains(router);
}

template <std::floating_point T>
RoutingDecision<T> route_nexus(const DomainProjectionState<T>& router, const Tensor<T>& x, std::size_t k) {
  detail::require_width(x, router.w2.dim(1), "route_nexus");
  // The cache carries no graph, so recompute whenever the projection is being trained.
  const bool training = active_tape<T>() != nullptr &&
                        (router.w1.requires_grad() || router.w2.requires_grad());
  if (router.cached_expert_embeddings && !training) {
    return detail::decide(matmul_transposed(x, *router.cached_expert_embeddings), k);
  }
  return detail::decide(matmul_transposed(x, project_domains(router)), k);
}

template <std::floating_point T>
RoutingDecision<T> route(const MoELayerState<T>& layer, const Tensor<T>& x) {
  return std::visit(
      [&](const auto& r) {
        if constexpr (std::is_same_v<std::decay_t<decltype(r)>, LinearRouterState<T>>) {
          return route_linear(r, x, layer.k);
        } else {
          return route_nexus(r, x, layer.k);
        }
      },
      layer.router);
}

template <std::floating_point T>
struct MoEOutput {
  Tensor<T> y;
  RoutingDecision<T> decision;
};

/// y = FFN_s(x) + sum_{j in topk(x)} gate_j * FFN_j(x). Each routed expert
/// only sees the tokens dispatched to it.
template <std::floating_point T>
MoEOutput<T> moe_forward(const MoELayerState<T>& layer, const Tensor<T>& x) {
  layer.validate();
  const std::size_t h = layer.shared.down.dim(1);
  detail::require_width(x, h, "moe_forward");
  auto decision = route(layer, x);
  const std::size_t tokens = decision.tokens, k = decision.k;
  Tensor<T> flat = reshape(x, Shape{tokens, h});
  Tensor<T> y = layer.shared(flat);
  for (std::size_t e = 0; e < layer.experts.size(); ++e) {
    std::vector<std::size_t> rows, slots;
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t s = 0; s < k; ++s)
        if (decision.top_indices[t * k + s] == e) {
          rows.push_back(t);
          slots.push_back(t * k + s);
        }
    if (rows.empty()) continue;
    Tensor<T> out = layer.experts[e](index_select_rows(flat, rows));
    std::vector<std::size_t> zeros(slots.size(), 0);
    Tensor<T> gate = gather_elements(reshape(decision.gates, Shape{tokens * k, 1}), slots, zeros);
    y = index_add_rows(y, rows, scale_rows(out, gate));
  }
  return {reshape(y, x.shape()), std::move(decision)};
}

/// Switch-style auxiliary loss n * sum_i f_i * P_i, where f_i is the
/// fraction of tokens whose top-1 expert is i and P_i the mean router
/// probability of expert i. Gradient flows through P only. Evaluated as
/// n * sum_i count_i * Psum_i / N^2 so balanced or collapsed routing is exact.
template <std::floating_point T>
Tensor<T> load_balance_loss(const RoutingDecision<T>& d) {
  if (d.tokens == 0) throw ArgumentError("load_balance_loss: decision covers zero tokens");
  const std::size_t N = d.tokens, n = d.n;
  std::vector<T> f(n, T(0)), P(n, T(0));
  for (std::size_t t = 0; t < N; ++t) f[d.top1(t)] += T(1);
  auto probs = d.probs.data();
  for (std::size_t t = 0; t < N; ++t)
    for (std::size_t i = 0; i < n; ++i) P[i] += probs[t * n + i];
  T loss = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    loss += f[i] * P[i];
    f[i] /= static_cast<T>(N);
  }
  loss = static_cast<T>(n) * loss / (static_cast<T>(N) * static_cast<T>(N));
  Tensor<T> out = Tensor<T>::scalar(loss);
  if (detail::wants_grad<T>({&d.probs})) {
    out.set_requires_grad(true);
    auto ps = d.probs.storage(), os = out.storage();
    detail::record(out, [ps, os, f = std::move(f), N, n] {
      ps->ensure_grad();
      const T g = os->grad[0] * static_cast<T>(n) / static_cast<T>(N);
      for (std::size_t t = 0; t < N; ++t)
        for (std::size_t i = 0; i < n; ++i) ps->grad[t * n + i] += g * f[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------- MoE model

template <std::floating_point T>
struct MoEBlock {
  Tensor<T> norm;
  AttentionState<T> attn;
  MoELayerState<T> moe;
};

/// Dense decoder whose per-block FFN is an MoE layer. For the projection
/// router every block shares one frozen domain-embedding matrix whose rows
/// follow `domains` (the routed-expert order).
template <std::floating_point T>
struct MoEModelState {
  ModelConfig config;
  RouterKind router_kind = RouterKind::Nexus;
  std::size_t k = 1;
  double lb_factor = 0.05;
  std::vector<std::string> domains;
  Tensor<T> tok_embeddings;
  std::vector<MoEBlock<T>> blocks;
  Tensor<T> final_norm;
  Tensor<T> domain_embeddings;  // [n, m]; undefined for the linear router

  std::size_t num_experts() const { return domains.size(); }

  MoEModelState clone() const {
    MoEModelState m;
    m.config = config;
    m.router_kind = router_kind;
    m.k = k;
    m.lb_factor = lb_factor;
    m.domains = domains;
    m.tok_embeddings = tok_embeddings.clone();
    if (domain_embeddings.defined()) m.domain_embeddings = domain_embeddings.clone();
    for (const auto& b : blocks) {
      MoEBlock<T> c{b.norm.clone(), b.attn.clone(), b.moe.clone()};
      if (auto* p = std::get_if<DomainProjectionState<T>>(&c.moe.router)) {
        p->domain_embeddings = m.domain_embeddings;
      }
      m.blocks.push_back(std::move(c));
    }
    m.final_norm = final_norm.clone();
    return m;
  }

  /// Drops every cached projection (after any parameter change).
  void invalidate_caches() {
    for (auto& b : blocks)
      if (auto* p = std::get_if<DomainProjectionState<T>>(&b.moe.router)) p->cached_expert_embeddings.reset();
  }

  void cache_projections() {
    for (auto& b : blocks)
      if (auto* p = std::get_if<DomainProjectionState<T>>(&b.moe.router)) cache_expert_embeddings(*p);
  }

  /// Every named tensor in checkpoint order, including the frozen domain
  /// embeddings (requires_grad == false).
  template <class F>
  void for_each_parameter(F&& f) { visit(*this, f); }
  template <class F>
  void for_each_parameter(F&& f) const { visit(*this, f); }

 private:
  template <class Self, class F>
  static void visit(Self& self, F& f) {
    f(std::string("tok_embeddings"), self.tok_embeddings);
    for (std::size_t l = 0; l < self.blocks.size(); ++l) {
      auto& b = self.blocks[l];
      const std::string p = "blocks." + std::to_string(l);
      f(p + ".norm", b.norm);
      AttentionState<T>::visit(b.attn, p + ".attn", f);
      b.moe.shared.visit(p + ".moe.shared", f);
      for (std::size_t e = 0; e < b.moe.experts.size(); ++e)
        b.moe.experts[e].visit(p + ".moe.experts." + std::to_string(e), f);
      if (auto* lin = std::get_if<LinearRouterState<T>>(&b.moe.router)) {
        f(p + ".moe.router.w_r", lin->w_r);
      } else {
        auto& proj = std::get<DomainProjectionState<T>>(b.moe.router);
        f(p + ".moe.router.w1", proj.w1);
        f(p + ".moe.router.w2", proj.w2);
      }
    }
    f(std::string("final_norm"), self.final_norm);
    if (self.domain_embeddings.defined()) f(std::string("domain_embeddings"), self.domain_embeddings);
  }
};

template <std::floating_point T>
struct MoEForward {
  Tensor<T> logits;
  std::vector<RoutingDecision<T>> decisions;  // one per block
};

template <std::floating_point T>
MoEForward<T> forward(const MoEModelState<T>& model, std::span<const TokenId> ids, std::size_t batch,
                      std::size_t seq_len) {
  MoEForward<T> out;
  out.logits = decoder_forward<T, MoEBlock<T>>(
      model.config, model.tok_embeddings, std::span<const MoEBlock<T>>(model.blocks), model.final_norm,
      ids, batch, seq_len, [&](std::size_t, const MoEBlock<T>& b, const Tensor<T>& xn) {
        auto r = moe_forward(b.moe, xn);
        out.decisions.push_back(std::move(r.decision));
        return r.y;
      });
  return out;
}

template <std::floating_point T>
MoEForward<T> forward(const MoEModelState<T>& model, const Batch& batch) {
  return forward(model, std::span<const TokenId>(batch.token_ids), batch.batch, batch.seq_len);
}

/// Mean of load_balance_loss over blocks.
template <std::floating_point T>
Tensor<T> mean_load_balance(const std::vector<RoutingDecision<T>>& decisions) {
  if (decisions.empty()) throw ArgumentError("mean_load_balance: no decisions");
  Tensor<T> total = load_balance_loss(decisions.front());
  for (std::size_t i = 1; i < decisions.size(); ++i) total = add(total, load_balance_loss(decisions[i]));
  return scale(total, T(1) / static_cast<T>(decisions.size()));
}

}  // namespace nexus
