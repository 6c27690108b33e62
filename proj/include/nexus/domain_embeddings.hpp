// SPDX-License-Identifier: Apache-2.0
//
// Frozen per-domain embedding vectors d_i computed from training corpora.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "nexus/error.hpp"
#include "nexus/tensor.hpp"
#include "nexus/text_data.hpp"
#include "nexus/transformer.hpp"

namespace nexus {

enum class EmbedMethod { SeedModelMean, HashedNgram };

inline std::string to_string(EmbedMethod m) {
  return m == EmbedMethod::SeedModelMean ? "seed-model-mean" : "hashed-ngram";
}

inline EmbedMethod parse_embed_method(std::string_view s) {
  if (s == "seed-model-mean") return EmbedMethod::SeedModelMean;
  if (s == "hashed-ngram") return EmbedMethod::HashedNgram;
  throw ValidationError("unknown embedding method '" + std::string(s) + "'");
}

/// Unit-norm domain vector plus how it was produced.
struct DomainEmbedding {
  std::string domain_id;
  std::string method;
  std::vector<double> vector;
  std::size_t sample_count = 0;
  std::uint64_t seed = 0;

  std::size_t dim() const { return vector.size(); }
  bool operator==(const DomainEmbedding&) const = default;
};

inline void to_json(nlohmann::json& j, const DomainEmbedding& e) {
  j = nlohmann::json{{"domain_id", e.domain_id}, {"method", e.method},       {"m", e.vector.size()},
                     {"vector", e.vector},       {"sample_count", e.sample_count}, {"seed", e.seed}};
}

inline void from_json(const nlohmann::json& j, DomainEmbedding& e) {
  e.domain_id = j.at("domain_id").get<std::string>();
  e.method = j.at("method").get<std::string>();
  e.vector = j.at("vector").get<std::vector<double>>();
  e.sample_count = j.value("sample_count", std::size_t{0});
  e.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("m") && j.at("m").get<std::size_t>() != e.vector.size()) {
    throw ValidationError("embedding '" + e.domain_id + "': m disagrees with vector length");
  }
}

namespace detail {

inline void l2_normalize(std::vector<double>& v, const std::string& id) {
  double ss = 0.0;
  for (double x : v) ss += x * x;
  if (!(ss > 0.0)) throw ValidationError("domain '" + id + "' produced a zero embedding");
  const double inv = 1.0 / std::sqrt(ss);
  for (double& x : v) x *= inv;
}

/// Up to `count` documents, all of them in order when the corpus is small,
/// otherwise a seeded sample without replacement (kept in corpus order).
inline std::vector<const std::string*> sample_documents(const DomainCorpus& corpus, std::size_t count,
                                                        std::uint64_t seed) {
  std::vector<std::size_t> idx(corpus.documents.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (idx.size() > count) {
    Rng rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
  }
  std::vector<const std::string*> out;
  for (auto i : idx)
    if (!corpus.documents[i].empty()) out.push_back(&corpus.documents[i]);
  return out;
}

inline std::uint64_t fnv1a(const unsigned char* p, std::size_t n, std::uint64_t salt) {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ (salt * 0x100000001b3ULL);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/// Feature-hashed byte n-gram (n = 1..3) frequency vector, L2-normalized.
inline DomainEmbedding embed_hashed_ngram(const DomainCorpus& corpus, std::size_t m,
                                          std::size_t sample_count, std::uint64_t seed) {
  if (m == 0) throw ArgumentError("embedding width m must be positive");
  if (corpus.documents.empty() || corpus.token_count == 0) {
    throw ValidationError("cannot embed empty domain '" + corpus.domain_id + "'");
  }
  std::vector<std::uint64_t> counts(m, 0);
  std::uint64_t total = 0;
  for (const auto* doc : detail::sample_documents(corpus, sample_count, seed)) {
    const auto* p = reinterpret_cast<const unsigned char*>(doc->data());
    for (std::size_t n = 1; n <= 3; ++n)
      for (std::size_t i = 0; i + n <= doc->size(); ++i) {
        ++counts[detail::fnv1a(p + i, n, n) % m];
        ++total;
      }
  }
  DomainEmbedding e{corpus.domain_id, to_string(EmbedMethod::HashedNgram), std::vector<double>(m), sample_count, seed};
  for (std::size_t i = 0; i < m; ++i) e.vector[i] = static_cast<double>(counts[i]) / static_cast<double>(total);
  detail::l2_normalize(e.vector, corpus.domain_id);
  return e;
}

/// Mean over sampled documents of the mean seed token embedding of each
/// document's bytes, L2-normalized. m must equal the seed's d_model.
template <std::floating_point T>
DomainEmbedding embed_seed_model_mean(const DomainCorpus& corpus, const DenseModelState<T>& seed_model,
                                      std::size_t m, std::size_t sample_count, std::uint64_t seed) {
  const std::size_t h = seed_model.config.d_model;
  if (m != h) {
    throw ArgumentError("seed-model-mean embeddings have width d_model=" + std::to_string(h) + ", got m=" +
                        std::to_string(m));
  }
  if (corpus.documents.empty() || corpus.token_count == 0) {
    throw ValidationError("cannot embed empty domain '" + corpus.domain_id + "'");
  }
  auto table = seed_model.tok_embeddings.data();
  std::vector<double> acc(h, 0.0);
  const auto docs = detail::sample_documents(corpus, sample_count, seed);
  for (const auto* doc : docs) {
    std::vector<double> pooled(h, 0.0);
    for (unsigned char c : *doc)
      for (std::size_t j = 0; j < h; ++j) pooled[j] += static_cast<double>(table[c * h + j]);
    for (std::size_t j = 0; j < h; ++j) acc[j] += pooled[j] / static_cast<double>(doc->size());
  }
  for (auto& v : acc) v /= static_cast<double>(docs.size());
  detail::l2_normalize(acc, corpus.domain_id);
  return {corpus.domain_id, to_string(EmbedMethod::SeedModelMean), std::move(acc), sample_count, seed};
}

struct EmbedOptions {
  EmbedMethod method = EmbedMethod::SeedModelMean;
  std::size_t m = 0;  // 0: d_model for seed-model-mean, 256 for hashed-ngram
  std::size_t sample_count = 512;
  std::uint64_t seed = 0;
};

template <std::floating_point T>
DomainEmbedding embed_domain(const DomainCorpus& corpus, const EmbedOptions& opt,
                             const DenseModelState<T>* seed_model) {
  if (opt.method == EmbedMethod::HashedNgram) {
    return embed_hashed_ngram(corpus, opt.m ? opt.m : 256, opt.sample_count, opt.seed);
  }
  if (!seed_model) throw ArgumentError("seed-model-mean embeddings need a seed model");
  return embed_seed_model_mean(corpus, *seed_model, opt.m ? opt.m : seed_model->config.d_model,
                               opt.sample_count, opt.seed);
}

/// Ordered set of domain embeddings; row i belongs to routed expert i.
class EmbeddingSet {
 public:
  EmbeddingSet() = default;
  explicit EmbeddingSet(std::vector<DomainEmbedding> rows) {
    for (auto& r : rows) append(std::move(r));
  }

  /// Adds one row at the end; existing rows are untouched.
  void append(DomainEmbedding e) {
    for (const auto& r : rows_)
      if (r.domain_id == e.domain_id) throw ValidationError("duplicate domain embedding '" + e.domain_id + "'");
    if (!rows_.empty() && e.dim() != rows_.front().dim()) {
      throw ValidationError("embedding '" + e.domain_id + "' has width " + std::to_string(e.dim()) +
                            ", expected " + std::to_string(rows_.front().dim()));
    }
    rows_.push_back(std::move(e));
  }

  std::size_t size() const { return rows_.size(); }
  std::size_t dim() const { return rows_.empty() ? 0 : rows_.front().dim(); }
  const std::vector<DomainEmbedding>& rows() const { return rows_; }

  const DomainEmbedding& get(std::string_view id) const {
    for (const auto& r : rows_)
      if (r.domain_id == id) return r;
    throw ValidationError("no embedding for domain '" + std::string(id) + "'");
  }

  /// Subset in the given domain order.
  EmbeddingSet select(std::span<const std::string> ids) const {
    EmbeddingSet out;
    for (const auto& id : ids) out.append(get(id));
    return out;
  }

  template <std::floating_point T>
  Tensor<T> matrix() const {
    if (rows_.empty()) throw ValidationError("empty embedding set");
    std::vector<T> data;
    for (const auto& r : rows_)
      for (double v : r.vector) data.push_back(static_cast<T>(v));
    return Tensor<T>(Shape{rows_.size(), dim()}, std::move(data));
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write embeddings file " + path.string());
    out << nlohmann::json(rows_).dump(2) << '\n';
  }

  static EmbeddingSet load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open embeddings file " + path.string());
    try {
      auto j = nlohmann::json::parse(in);
      if (j.is_object()) return EmbeddingSet({j.get<DomainEmbedding>()});
      return EmbeddingSet(j.get<std::vector<DomainEmbedding>>());
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("invalid embeddings file " + path.string() + ": " + e.what());
    }
  }

 private:
  std::vector<DomainEmbedding> rows_;
};

/// One embedding per corpus, in corpus order.
template <std::floating_point T>
EmbeddingSet embed_query_set(std::span<const DomainCorpus> corpora, const EmbedOptions& opt,
                             const DenseModelState<T>* seed_model) {
  require_unique_ids(corpora);
  EmbeddingSet set;
  for (const auto& c : corpora) set.append(embed_domain(c, opt, seed_model));
  return set;
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace nexus
