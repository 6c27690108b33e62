// SPDX-License-Identifier: Apache-2.0
//
// Small models, embeddings and corpora shared by the unit and acceptance tests.

#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <unistd.h>
#include <string>
#include <vector>

#include "nexus/nexus.hpp"

namespace nexus::testkit {

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 4;
  c.d_ffn = 24;
  c.max_seq_len = 16;
  return c;
}

/// Adds N(0, stddev) noise to every parameter in place.
template <class Model>
void jitter(Model& m, double stddev, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> dist(0.0, stddev);
  m.for_each_parameter([&](const std::string&, auto& t) {
    if (!t.requires_grad()) return;
    for (auto& v : t.mutable_data()) v += static_cast<typename std::decay_t<decltype(t)>::value_type>(dist(rng));
  });
}

template <std::floating_point T>
std::vector<DenseModelState<T>> perturbed_experts(const DenseModelState<T>& seed, const std::vector<std::string>& ids,
                                                  double stddev, std::uint64_t s) {
  std::vector<DenseModelState<T>> out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto e = seed.clone();
    e.domain = ids[i];
    if (stddev > 0) jitter(e, stddev, s + i);
    out.push_back(std::move(e));
  }
  return out;
}

inline DomainEmbedding random_embedding(const std::string& id, std::size_t m, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  DomainEmbedding e{id, "random", std::vector<double>(m), 0, 0};
  double n = 0;
  for (auto& v : e.vector) {
    v = dist(rng);
    n += v * v;
  }
  for (auto& v : e.vector) v /= std::sqrt(n);
  return e;
}

inline EmbeddingSet random_embeddings(const std::vector<std::string>& ids, std::size_t m, std::uint64_t seed) {
  Rng rng(seed);
  EmbeddingSet s;
  for (const auto& id : ids) s.append(random_embedding(id, m, rng));
  return s;
}

/// Corpus of documents drawn from `alphabet` with fixed length.
inline DomainCorpus letter_corpus(const std::string& id, const std::string& alphabet, std::size_t docs,
                                  std::size_t len, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1);
  DomainCorpus c;
  c.domain_id = id;
  for (std::size_t d = 0; d < docs; ++d) {
    std::string doc(len, ' ');
    for (auto& ch : doc) ch = alphabet[pick(rng)];
    c.token_count += doc.size();
    c.documents.push_back(std::move(doc));
  }
  return c;
}

inline std::vector<std::string> expert_ids(std::size_t n) {
  static const char* names[] = {"alpha", "beta", "gamma", "delta", "epsilon", "zeta"};
  return {names, names + n};
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::size_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("nexus_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

}  // namespace nexus::testkit
