// SPDX-License-Identifier: Apache-2.0
//
// Routing specialization statistics and domain/expert embedding similarity.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "nexus/domain_embeddings.hpp"
#include "nexus/error.hpp"
#include "nexus/moe.hpp"
#include "nexus/text_data.hpp"

namespace nexus {

/// Mean routed-expert probability and top-1 dispatch fraction per
/// (domain, block, expert), averaged over non-PAD tokens.
struct RoutingStats {
  std::vector<std::string> domains;
  std::size_t n_blocks = 0;
  std::size_t n_experts = 0;
  std::vector<double> mean_prob;      // [domain][block][expert]
  std::vector<double> dispatch_frac;  // [domain][block][expert]
  std::vector<std::size_t> token_counts;
  std::vector<std::size_t> sample_counts;

  bool empty() const { return domains.empty(); }

  std::size_t index(std::size_t d, std::size_t b, std::size_t e) const {
    return (d * n_blocks + b) * n_experts + e;
  }
  double prob(std::size_t d, std::size_t b, std::size_t e) const { return mean_prob[index(d, b, e)]; }
  double dispatch(std::size_t d, std::size_t b, std::size_t e) const { return dispatch_frac[index(d, b, e)]; }

  std::size_t domain_index(std::string_view id) const {
    for (std::size_t d = 0; d < domains.size(); ++d)
      if (domains[d] == id) return d;
    throw ValidationError("routing stats have no domain '" + std::string(id) + "'");
  }

  /// Unweighted mean over blocks of the per-block mean probability.
  double cross_block_prob(std::size_t d, std::size_t e) const {
    double s = 0.0;
    for (std::size_t b = 0; b < n_blocks; ++b) s += prob(d, b, e);
    return s / static_cast<double>(n_blocks);
  }

  double cross_block_dispatch(std::size_t d, std::size_t e) const {
    double s = 0.0;
    for (std::size_t b = 0; b < n_blocks; ++b) s += dispatch(d, b, e);
    return s / static_cast<double>(n_blocks);
  }

  std::vector<double> cross_block_probs(std::size_t d) const {
    std::vector<double> out(n_experts);
    for (std::size_t e = 0; e < n_experts; ++e) out[e] = cross_block_prob(d, e);
    return out;
  }

  /// Expert with the highest cross-block mean probability (lowest index on ties).
  std::size_t argmax_expert(std::size_t d) const {
    auto p = cross_block_probs(d);
    return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
  }
};

namespace detail {

struct RoutingAccumulator {
  std::size_t n_blocks = 0, n_experts = 0;
  std::vector<double> prob_sum, dispatch_sum;
  std::size_t tokens = 0, samples = 0;

  void init(std::size_t blocks, std::size_t experts) {
    n_blocks = blocks;
    n_experts = experts;
    prob_sum.assign(blocks * experts, 0.0);
    dispatch_sum.assign(blocks * experts, 0.0);
  }

  template <std::floating_point T>
  void add(const Batch& batch, const std::vector<RoutingDecision<T>>& decisions) {
    samples += batch.batch;
    for (std::size_t t = 0; t < batch.token_ids.size(); ++t) {
      if (batch.token_ids[t] == kPad) continue;
      ++tokens;
      for (std::size_t b = 0; b < decisions.size(); ++b) {
        const auto& dec = decisions[b];
        auto p = dec.probs.data().subspan(t * dec.n, dec.n);
        for (std::size_t e = 0; e < dec.n; ++e) prob_sum[b * n_experts + e] += static_cast<double>(p[e]);
        dispatch_sum[b * n_experts + dec.top1(t)] += 1.0;
      }
    }
  }
};

inline void append_domain(RoutingStats& stats, const std::string& id, const RoutingAccumulator& acc) {
  if (acc.tokens == 0) throw ValidationError("no routable tokens for domain '" + id + "'");
  stats.domains.push_back(id);
  stats.token_counts.push_back(acc.tokens);
  stats.sample_counts.push_back(acc.samples);
  const double inv = 1.0 / static_cast<double>(acc.tokens);
  for (std::size_t i = 0; i < acc.prob_sum.size(); ++i) {
    stats.mean_prob.push_back(acc.prob_sum[i] * inv);
    stats.dispatch_frac.push_back(acc.dispatch_sum[i] * inv);
  }
}

template <std::floating_point T>
RoutingStats empty_stats(const MoEModelState<T>& moe) {
  RoutingStats s;
  s.n_blocks = moe.blocks.size();
  s.n_experts = moe.num_experts();
  return s;
}

/// `count` windows at seeded random offsets of the corpus stream.
inline std::vector<Batch> random_windows(const DomainCorpus& corpus, std::size_t count, std::size_t seq_len,
                                         std::size_t batch_size, std::uint64_t seed) {
  if (corpus.token_count == 0) throw ValidationError("domain '" + corpus.domain_id + "' is empty");
  const auto stream = token_stream(corpus);
  Rng rng(seed);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < count; start += batch_size) {
    Batch b;
    b.batch = std::min(batch_size, count - start);
    b.seq_len = seq_len;
    b.token_ids.resize(b.batch * seq_len);
    b.targets.resize(b.batch * seq_len);
    for (std::size_t r = 0; r < b.batch; ++r) {
      std::size_t offset = 0;
      if (stream.size() > seq_len + 1) {
        offset = std::uniform_int_distribution<std::size_t>(0, stream.size() - seq_len - 1)(rng);
      }
      fill_row(b, r, stream, offset);
      b.domain_labels.push_back(corpus.domain_id);
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace detail

/// Routing stats for one domain over explicit batches.
template <std::floating_point T>
RoutingStats collect_on(const MoEModelState<T>& moe, const std::string& domain_id,
                        std::span<const Batch> batches) {
  NoGradScope<T> no_grad;
  detail::RoutingAccumulator acc;
  acc.init(moe.blocks.size(), moe.num_experts());
  for (const auto& b : batches) acc.add(b, forward(moe, b).decisions);
  RoutingStats stats = detail::empty_stats(moe);
  detail::append_domain(stats, domain_id, acc);
  return stats;
}

struct RoutingSampleOptions {
  std::size_t samples_per_domain = 512;
  std::size_t seq_len = 64;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
};

/// Forward passes over seeded random windows of each corpus (meant to be
/// held-out documents); no parameters change.
template <std::floating_point T>
RoutingStats collect_routing_stats(const MoEModelState<T>& moe, std::span<const DomainCorpus> corpora,
                                   const RoutingSampleOptions& opt = {}) {
  if (opt.samples_per_domain == 0) throw ArgumentError("samples_per_domain must be positive");
  require_unique_ids(corpora);
  RoutingStats stats = detail::empty_stats(moe);
  for (std::size_t i = 0; i < corpora.size(); ++i) {
    std::seed_seq seq{opt.seed, static_cast<std::uint64_t>(i)};
    std::array<std::uint32_t, 2> w;
    seq.generate(w.begin(), w.end());
    const std::uint64_t s = (std::uint64_t{w[0]} << 32) | w[1];
    auto batches = detail::random_windows(corpora[i], opt.samples_per_domain, opt.seq_len, opt.batch_size, s);
    auto one = collect_on(moe, corpora[i].domain_id, std::span<const Batch>(batches));
    stats.domains.push_back(one.domains[0]);
    stats.token_counts.push_back(one.token_counts[0]);
    stats.sample_counts.push_back(one.sample_counts[0]);
    stats.mean_prob.insert(stats.mean_prob.end(), one.mean_prob.begin(), one.mean_prob.end());
    stats.dispatch_frac.insert(stats.dispatch_frac.end(), one.dispatch_frac.begin(), one.dispatch_frac.end());
  }
  return stats;
}

/// Token-weighted union of two stats objects over the same model layout.
/// Domains present in both are merged; the rest are appended.
inline RoutingStats combine(const RoutingStats& a, const RoutingStats& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.n_blocks != b.n_blocks || a.n_experts != b.n_experts) {
    throw ValidationError("cannot combine routing stats of different layouts");
  }
  RoutingStats out = a;
  const std::size_t width = a.n_blocks * a.n_experts;
  for (std::size_t j = 0; j < b.domains.size(); ++j) {
    auto it = std::find(out.domains.begin(), out.domains.end(), b.domains[j]);
    if (it == out.domains.end()) {
      out.domains.push_back(b.domains[j]);
      out.token_counts.push_back(b.token_counts[j]);
      out.sample_counts.push_back(b.sample_counts[j]);
      out.mean_prob.insert(out.mean_prob.end(), b.mean_prob.begin() + j * width, b.mean_prob.begin() + (j + 1) * width);
      out.dispatch_frac.insert(out.dispatch_frac.end(), b.dispatch_frac.begin() + j * width,
                               b.dispatch_frac.begin() + (j + 1) * width);
      continue;
    }
    const std::size_t i = static_cast<std::size_t>(it - out.domains.begin());
    const double na = static_cast<double>(out.token_counts[i]), nb = static_cast<double>(b.token_counts[j]);
    if (na + nb == 0.0) throw ValidationError("cannot combine routing stats without token counts");
    for (std::size_t x = 0; x < width; ++x) {
      auto& p = out.mean_prob[i * width + x];
      auto& f = out.dispatch_frac[i * width + x];
      p = (p * na + b.mean_prob[j * width + x] * nb) / (na + nb);
      f = (f * na + b.dispatch_frac[j * width + x] * nb) / (na + nb);
    }
    out.token_counts[i] += b.token_counts[j];
    out.sample_counts[i] += b.sample_counts[j];
  }
  return out;
}

// ---------------------------------------------------------------- similarity

struct SimilarityReport {
  std::size_t block = 0;
  std::vector<std::string> domains;
  std::vector<std::vector<double>> domain_cosine;
  std::vector<std::vector<double>> expert_cosine;
  double rank_correlation = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline std::vector<std::vector<double>> cosine_matrix(const std::vector<std::vector<double>>& rows) {
  const std::size_t n = rows.size();
  std::vector<std::vector<double>> c(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) c[i][j] = c[j][i] = cosine(rows[i], rows[j]);
  return c;
}

inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j);
    for (std::size_t t = i; t <= j; ++t) rank[order[t]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace detail

/// Spearman correlation (Pearson on average ranks). NaN when undefined.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ArgumentError("spearman: length mismatch");
  if (a.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  auto ra = detail::average_ranks(a), rb = detail::average_ranks(b);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / ra.size();
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / rb.size();
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

/// Cosine matrices of the domain rows d_i and of the projected e_i at
/// `block` (default: last block).
template <std::floating_point T>
SimilarityReport similarity_report(const MoEModelState<T>& moe, std::optional<std::size_t> block = {}) {
  if (moe.router_kind != RouterKind::Nexus) {
    throw UnsupportedRouterError("similarity analysis needs a nexus router; model uses " +
                                 to_string(moe.router_kind));
  }
  const std::size_t b = block.value_or(moe.blocks.size() - 1);
  if (b >= moe.blocks.size()) throw ArgumentError("block " + std::to_string(b) + " out of range");
  NoGradScope<T> no_grad;
  const auto& router = std::get<DomainProjectionState<T>>(moe.blocks[b].moe.router);
  auto to_rows = [](const Tensor<T>& m) {
    std::vector<std::vector<double>> rows(m.dim(0), std::vector<double>(m.dim(1)));
    auto d = m.data();
    for (std::size_t i = 0; i < m.dim(0); ++i)
      for (std::size_t j = 0; j < m.dim(1); ++j) rows[i][j] = static_cast<double>(d[i * m.dim(1) + j]);
    return rows;
  };
  SimilarityReport r;
  r.block = b;
  r.domains = moe.domains;
  r.domain_cosine = detail::cosine_matrix(to_rows(moe.domain_embeddings));
  r.expert_cosine = detail::cosine_matrix(to_rows(project_domains(router)));
  std::vector<double> du, eu;
  for (std::size_t i = 0; i < r.domains.size(); ++i)
    for (std::size_t j = i + 1; j < r.domains.size(); ++j) {
      du.push_back(r.domain_cosine[i][j]);
      eu.push_back(r.expert_cosine[i][j]);
    }
  r.rank_correlation = spearman(du, eu);
  return r;
}

// ---------------------------------------------------------------- export

inline std::filesystem::path routing_stats_path(const std::filesystem::path& dir, const std::string& tag) {
  return dir / ("routing_stats_" + tag + ".csv");
}

inline std::filesystem::path similarity_path(const std::filesystem::path& dir, std::size_t block) {
  return dir / ("similarity_" + std::to_string(block) + ".json");
}

inline constexpr std::string_view kRoutingCsvHeader = "domain,block,expert,mean_prob,dispatch_frac";

inline void export_csv(const RoutingStats& s, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << kRoutingCsvHeader << '\n';
  char buf[64];
  for (std::size_t d = 0; d < s.domains.size(); ++d) {
    if (s.domains[d].find_first_of(",\"\n") != std::string::npos) {
      throw ValidationError("domain id '" + s.domains[d] + "' cannot be written to CSV");
    }
    for (std::size_t b = 0; b < s.n_blocks; ++b)
      for (std::size_t e = 0; e < s.n_experts; ++e) {
        out << s.domains[d] << ',' << b << ',' << e << ',';
        std::snprintf(buf, sizeof buf, "%.17g", s.prob(d, b, e));
        out << buf << ',';
        std::snprintf(buf, sizeof buf, "%.17g", s.dispatch(d, b, e));
        out << buf << '\n';
      }
  }
  if (!out) throw IoError("write failed for " + path.string());
}

/// Inverse of export_csv. Token and sample counts are not part of the CSV
/// schema and come back as zero.
inline RoutingStats import_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kRoutingCsvHeader) {
    throw IoError(path.string() + ": missing routing stats header");
  }
  struct Row {
    std::string domain;
    std::size_t block, expert;
    double prob, frac;
  };
  std::vector<Row> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    Row r;
    std::string field[5];
    for (int i = 0; i < 5; ++i)
      if (!std::getline(ss, field[i], ',')) throw IoError(path.string() + ":" + std::to_string(lineno) + ": short row");
    try {
      r = {field[0], std::stoul(field[1]), std::stoul(field[2]), std::stod(field[3]), std::stod(field[4])};
    } catch (const std::exception&) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": malformed number");
    }
    rows.push_back(std::move(r));
  }
  RoutingStats s;
  for (const auto& r : rows) {
    if (std::find(s.domains.begin(), s.domains.end(), r.domain) == s.domains.end()) s.domains.push_back(r.domain);
    s.n_blocks = std::max(s.n_blocks, r.block + 1);
    s.n_experts = std::max(s.n_experts, r.expert + 1);
  }
  const std::size_t cells = s.domains.size() * s.n_blocks * s.n_experts;
  if (rows.size() != cells) throw IoError(path.string() + ": incomplete routing stats table");
  s.mean_prob.assign(cells, 0.0);
  s.dispatch_frac.assign(cells, 0.0);
  s.token_counts.assign(s.domains.size(), 0);
  s.sample_counts.assign(s.domains.size(), 0);
  for (const auto& r : rows) {
    const auto i = s.index(s.domain_index(r.domain), r.block, r.expert);
    s.mean_prob[i] = r.prob;
    s.dispatch_frac[i] = r.frac;
  }
  return s;
}

inline void to_json(nlohmann::json& j, const RoutingStats& s) {
  j = nlohmann::json::object();
  j["n_blocks"] = s.n_blocks;
  j["n_experts"] = s.n_experts;
  j["domains"] = nlohmann::json::array();
  for (std::size_t d = 0; d < s.domains.size(); ++d) {
    nlohmann::json blocks = nlohmann::json::array();
    for (std::size_t b = 0; b < s.n_blocks; ++b) {
      std::vector<double> p, f;
      for (std::size_t e = 0; e < s.n_experts; ++e) {
        p.push_back(s.prob(d, b, e));
        f.push_back(s.dispatch(d, b, e));
      }
      blocks.push_back({{"mean_prob", p}, {"dispatch_frac", f}});
    }
    j["domains"].push_back({{"domain", s.domains[d]},
                            {"token_count", s.token_counts[d]},
                            {"sample_count", s.sample_counts[d]},
                            {"blocks", blocks},
                            {"cross_block_prob", s.cross_block_probs(d)},
                            {"argmax_expert", s.argmax_expert(d)}});
  }
}

inline void from_json(const nlohmann::json& j, RoutingStats& s) {
  s = RoutingStats{};
  s.n_blocks = j.at("n_blocks").get<std::size_t>();
  s.n_experts = j.at("n_experts").get<std::size_t>();
  for (const auto& d : j.at("domains")) {
    s.domains.push_back(d.at("domain").get<std::string>());
    s.token_counts.push_back(d.value("token_count", std::size_t{0}));
    s.sample_counts.push_back(d.value("sample_count", std::size_t{0}));
    const auto& blocks = d.at("blocks");
    if (blocks.size() != s.n_blocks) throw ValidationError("routing stats JSON: wrong block count");
    for (const auto& b : blocks) {
      auto p = b.at("mean_prob").get<std::vector<double>>();
      auto f = b.at("dispatch_frac").get<std::vector<double>>();
      if (p.size() != s.n_experts || f.size() != s.n_experts) {
        throw ValidationError("routing stats JSON: wrong expert count");
      }
      s.mean_prob.insert(s.mean_prob.end(), p.begin(), p.end());
      s.dispatch_frac.insert(s.dispatch_frac.end(), f.begin(), f.end());
    }
  }
}

namespace detail {

inline nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

inline void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const SimilarityReport& r) {
  j = {{"block", r.block},
       {"domains", r.domains},
       {"domain_cosine", r.domain_cosine},
       {"expert_cosine", r.expert_cosine},
       {"rank_correlation", detail::finite_or_null(r.rank_correlation)}};
}

inline void from_json(const nlohmann::json& j, SimilarityReport& r) {
  r.block = j.at("block").get<std::size_t>();
  r.domains = j.at("domains").get<std::vector<std::string>>();
  r.domain_cosine = j.at("domain_cosine").get<std::vector<std::vector<double>>>();
  r.expert_cosine = j.at("expert_cosine").get<std::vector<std::vector<double>>>();
  const auto& rc = j.at("rank_correlation");
  r.rank_correlation = rc.is_null() ? std::numeric_limits<double>::quiet_NaN() : rc.get<double>();
}

inline void export_json(const RoutingStats& s, const std::filesystem::path& path) {
  detail::write_json(nlohmann::json(s), path);
}

inline void export_json(const SimilarityReport& r, const std::filesystem::path& path) {
  detail::write_json(nlohmann::json(r), path);
}

inline RoutingStats import_stats_json(const std::filesystem::path& path) {
  try {
    return detail::read_json(path).get<RoutingStats>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

inline SimilarityReport import_similarity_json(const std::filesystem::path& path) {
  try {
    return detail::read_json(path).get<SimilarityReport>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace nexus
