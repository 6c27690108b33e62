// SPDX-License-Identifier: Apache-2.0
//
// Byte-level tokenization, multi-domain corpora, synthetic domain
// generation and mixture-weighted batch sampling.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "nexus/error.hpp"
#include "nexus/tensor.hpp"

namespace nexus {

using TokenId = std::int32_t;

inline constexpr TokenId kBos = 256;
inline constexpr TokenId kEos = 257;
inline constexpr TokenId kPad = 258;
inline constexpr std::size_t kVocabSize = 259;

/// One id per byte; length preserving.
inline std::vector<TokenId> tokenize(std::string_view text) {
  std::vector<TokenId> ids(text.size());
  for (std::size_t i = 0; i < text.size(); ++i)
    ids[i] = static_cast<TokenId>(static_cast<unsigned char>(text[i]));
  return ids;
}

/// Inverse of tokenize. Special ids carry no bytes and are dropped.
inline std::string detokenize(std::span<const TokenId> ids) {
  std::string out;
  out.reserve(ids.size());
  for (auto id : ids) {
    if (id < 0 || id > kPad) throw ArgumentError("detokenize: id " + std::to_string(id) + " outside vocab");
    if (id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

struct DomainCorpus {
  std::string domain_id;
  std::vector<std::string> documents;
  std::size_t token_count = 0;

  DomainCorpus() = default;
  DomainCorpus(std::string id, std::vector<std::string> docs)
      : domain_id(std::move(id)), documents(std::move(docs)) {
    for (const auto& d : documents) token_count += d.size();
  }

  bool operator==(const DomainCorpus&) const = default;
};

inline const DomainCorpus& find_corpus(std::span<const DomainCorpus> corpora, std::string_view id) {
  for (const auto& c : corpora)
    if (c.domain_id == id) return c;
  throw ValidationError("unknown domain '" + std::string(id) + "'");
}

inline void require_unique_ids(std::span<const DomainCorpus> corpora) {
  std::set<std::string> seen;
  for (const auto& c : corpora) {
    if (!seen.insert(c.domain_id).second) {
      throw ValidationError("duplicate domain id '" + c.domain_id + "'");
    }
  }
}

// ---------------------------------------------------------------- JSONL

/// Reads {"text": ..., "domain": ...} lines. Domains keep first-seen order.
inline std::vector<DomainCorpus> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus file " + path.string());
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::string>> docs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.contains("text") || !j["text"].is_string() || !j.contains("domain") ||
        !j["domain"].is_string()) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) +
                            ": expected string fields \"text\" and \"domain\"");
    }
    auto domain = j["domain"].get<std::string>();
    if (!docs.contains(domain)) order.push_back(domain);
    docs[domain].push_back(j["text"].get<std::string>());
  }
  std::vector<DomainCorpus> out;
  for (const auto& id : order) out.emplace_back(id, std::move(docs[id]));
  return out;
}

inline void write_jsonl(const DomainCorpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write corpus file " + path.string());
  for (const auto& doc : corpus.documents) {
    nlohmann::json j{{"text", doc}, {"domain", corpus.domain_id}};
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

/// Loads every corpus from a list of files or directories (directories
/// contribute their *.jsonl files in name order). Same-domain documents are
/// concatenated across files.
inline std::vector<DomainCorpus> load_corpora(std::span<const std::filesystem::path> inputs) {
  std::vector<std::filesystem::path> files;
  for (const auto& p : inputs) {
    if (std::filesystem::is_directory(p)) {
      std::vector<std::filesystem::path> found;
      for (const auto& e : std::filesystem::directory_iterator(p))
        if (e.path().extension() == ".jsonl") found.push_back(e.path());
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else if (std::filesystem::exists(p)) {
      files.push_back(p);
    } else {
      throw IoError("corpus path does not exist: " + p.string());
    }
  }
  std::vector<DomainCorpus> out;
  for (const auto& f : files) {
    for (auto& c : read_jsonl(f)) {
      auto it = std::find_if(out.begin(), out.end(),
                             [&](const DomainCorpus& x) { return x.domain_id == c.domain_id; });
      if (it == out.end()) {
        out.push_back(std::move(c));
      } else {
        for (auto& d : c.documents) it->documents.push_back(std::move(d));
        it->token_count += c.token_count;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------- unigram classifier

/// Multinomial naive Bayes over byte unigrams with add-one smoothing.
class UnigramClassifier {
 public:
  void fit(std::span<const DomainCorpus> corpora) {
    labels_.clear();
    log_probs_.clear();
    for (const auto& c : corpora) {
      std::vector<double> counts(256, 1.0);
      double total = 256.0;
      for (const auto& d : c.documents)
        for (unsigned char ch : d) {
          counts[ch] += 1.0;
          total += 1.0;
        }
      for (auto& v : counts) v = std::log(v / total);
      labels_.push_back(c.domain_id);
      log_probs_.push_back(std::move(counts));
    }
  }

  std::size_t predict(std::string_view doc) const {
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < labels_.size(); ++k) {
      double s = 0.0;
      for (unsigned char ch : doc) s += log_probs_[k][ch];
      if (s > best_score) {
        best_score = s;
        best = k;
      }
    }
    return best;
  }

  /// Fraction of documents assigned to their own corpus; corpora must be
  /// given in the order used for fit.
  double accuracy(std::span<const DomainCorpus> corpora) const {
    std::size_t correct = 0, total = 0;
    for (std::size_t k = 0; k < corpora.size(); ++k)
      for (const auto& d : corpora[k].documents) {
        correct += predict(d) == k ? 1 : 0;
        ++total;
      }
    return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  }

  const std::vector<std::string>& labels() const { return labels_; }

 private:
  std::vector<std::string> labels_;
  std::vector<std::vector<double>> log_probs_;
};

/// Held-out unigram accuracy: fit on even-indexed documents, score odd ones.
inline double unigram_separability(std::span<const DomainCorpus> corpora) {
  std::vector<DomainCorpus> fit_set, test_set;
  for (const auto& c : corpora) {
    std::vector<std::string> even, odd;
    for (std::size_t i = 0; i < c.documents.size(); ++i)
      (i % 2 == 0 ? even : odd).push_back(c.documents[i]);
    if (odd.empty()) odd = even;
    fit_set.emplace_back(c.domain_id, std::move(even));
    test_set.emplace_back(c.domain_id, std::move(odd));
  }
  UnigramClassifier clf;
  clf.fit(fit_set);
  return clf.accuracy(test_set);
}

// ---------------------------------------------------------------- synthetic domains

/// Grammar for one synthetic domain: a Zipf-weighted lexicon over a private
/// alphabet, chained by a sparse first-order word Markov model.
struct DomainGrammar {
  std::string id;
  std::string alphabet;
  std::size_t lexicon_size = 96;
  std::size_t min_word_len = 2;
  std::size_t max_word_len = 6;
  double zipf = 1.1;
  std::size_t branching = 4;
  /// Probability the next word follows the Markov successor table.
  double coherence = 0.85;
  std::size_t min_sentence_words = 4;
  std::size_t max_sentence_words = 12;
  std::size_t min_doc_sentences = 2;
  std::size_t max_doc_sentences = 6;
  std::size_t tokens = 100000;
  /// Lexicon words copied from another (earlier) domain.
  std::string borrow_from;
  double borrow_fraction = 0.0;
  /// Excluded from the "general" pseudo-domain mix.
  bool holdout = false;
};

struct GenerationSpec {
  std::vector<DomainGrammar> domains;
  /// Size of the "general" pseudo-domain drawn from all non-holdout domains; 0 disables it.
  std::size_t general_tokens = 0;
  double min_accuracy = 0.95;
};

inline constexpr std::string_view kGeneralDomain = "general";

inline void from_json(const nlohmann::json& j, DomainGrammar& g) {
  g.id = j.at("id").get<std::string>();
  g.alphabet = j.at("alphabet").get<std::string>();
  g.lexicon_size = j.value("lexicon_size", g.lexicon_size);
  g.min_word_len = j.value("min_word_len", g.min_word_len);
  g.max_word_len = j.value("max_word_len", g.max_word_len);
  g.zipf = j.value("zipf", g.zipf);
  g.branching = j.value("branching", g.branching);
  g.coherence = j.value("coherence", g.coherence);
  g.min_sentence_words = j.value("min_sentence_words", g.min_sentence_words);
  g.max_sentence_words = j.value("max_sentence_words", g.max_sentence_words);
  g.min_doc_sentences = j.value("min_doc_sentences", g.min_doc_sentences);
  g.max_doc_sentences = j.value("max_doc_sentences", g.max_doc_sentences);
  g.tokens = j.value("tokens", g.tokens);
  g.borrow_from = j.value("borrow_from", std::string{});
  g.borrow_fraction = j.value("borrow_fraction", 0.0);
  g.holdout = j.value("holdout", false);
}

inline void from_json(const nlohmann::json& j, GenerationSpec& s) {
  s.domains = j.at("domains").get<std::vector<DomainGrammar>>();
  s.general_tokens = j.value("general_tokens", std::size_t{0});
  s.min_accuracy = j.value("min_accuracy", 0.95);
}

inline GenerationSpec read_generation_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open generation spec " + path.string());
  try {
    return nlohmann::json::parse(in).get<GenerationSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("invalid generation spec " + path.string() + ": " + e.what());
  }
}

class DomainGenerator {
 public:
  DomainGenerator(const DomainGrammar& grammar, Rng& rng,
                  const std::vector<std::string>* borrow_lexicon = nullptr)
      : grammar_(grammar) {
    if (grammar.alphabet.empty()) throw ValidationError("domain '" + grammar.id + "' has an empty alphabet");
    if (grammar.lexicon_size == 0 || grammar.min_word_len == 0 ||
        grammar.min_word_len > grammar.max_word_len ||
        grammar.min_sentence_words == 0 || grammar.min_sentence_words > grammar.max_sentence_words ||
        grammar.min_doc_sentences == 0 || grammar.min_doc_sentences > grammar.max_doc_sentences) {
      throw ValidationError("domain '" + grammar.id + "' has inconsistent grammar ranges");
    }
    std::uniform_int_distribution<std::size_t> len(grammar.min_word_len, grammar.max_word_len);
    std::uniform_int_distribution<std::size_t> sym(0, grammar.alphabet.size() - 1);
    std::set<std::string> seen;
    std::size_t attempts = 0;
    std::size_t borrowed = 0;
    if (borrow_lexicon && grammar.borrow_fraction > 0.0) {
      borrowed = static_cast<std::size_t>(std::round(grammar.borrow_fraction *
                                                     static_cast<double>(grammar.lexicon_size)));
      borrowed = std::min({borrowed, borrow_lexicon->size(), grammar.lexicon_size});
      for (std::size_t i = 0; i < borrowed; ++i) {
        lexicon_.push_back((*borrow_lexicon)[i]);
        seen.insert(lexicon_.back());
      }
    }
    while (lexicon_.size() < grammar.lexicon_size) {
      if (++attempts > 100 * grammar.lexicon_size) {
        throw ValidationError("domain '" + grammar.id + "': alphabet too small for lexicon size");
      }
      std::string w(len(rng), ' ');
      for (auto& c : w) c = grammar.alphabet[sym(rng)];
      if (seen.insert(w).second) lexicon_.push_back(std::move(w));
    }
    // Interleave borrowed words with native ones so Zipf ranks mix both.
    std::shuffle(lexicon_.begin(), lexicon_.end(), rng);
    std::vector<double> weights(lexicon_.size());
    for (std::size_t r = 0; r < weights.size(); ++r)
      weights[r] = 1.0 / std::pow(static_cast<double>(r + 1), grammar.zipf);
    zipf_ = std::discrete_distribution<std::size_t>(weights.begin(), weights.end());
    successors_.resize(lexicon_.size());
    for (auto& s : successors_)
      for (std::size_t b = 0; b < std::max<std::size_t>(1, grammar.branching); ++b) s.push_back(zipf_(rng));
  }

  std::string document(Rng& rng) {
    std::uniform_int_distribution<std::size_t> n_sent(grammar_.min_doc_sentences, grammar_.max_doc_sentences);
    std::uniform_int_distribution<std::size_t> n_words(grammar_.min_sentence_words, grammar_.max_sentence_words);
    std::uniform_int_distribution<std::size_t> pick(0, successors_.front().size() - 1);
    std::bernoulli_distribution follow(grammar_.coherence);
    std::string doc;
    const std::size_t sentences = n_sent(rng);
    for (std::size_t s = 0; s < sentences; ++s) {
      if (s) doc.push_back(' ');
      std::size_t word = zipf_(rng);
      const std::size_t words = n_words(rng);
      for (std::size_t w = 0; w < words; ++w) {
        if (w) doc.push_back(' ');
        doc += lexicon_[word];
        word = follow(rng) ? successors_[word][pick(rng)] : zipf_(rng);
      }
      doc.push_back('.');
    }
    return doc;
  }

  const std::vector<std::string>& lexicon() const { return lexicon_; }
  const DomainGrammar& grammar() const { return grammar_; }

 private:
  DomainGrammar grammar_;
  std::vector<std::string> lexicon_;
  std::vector<std::vector<std::size_t>> successors_;
  std::discrete_distribution<std::size_t> zipf_;
};

/// Generates one corpus per grammar (plus "general" when requested) and
/// verifies the grammars are separable by a unigram classifier.
inline std::vector<DomainCorpus> generate_synthetic_domains(const GenerationSpec& spec, std::uint64_t seed) {
  if (spec.domains.size() < 2) {
    throw ValidationError("at least 2 domains are required to measure distinguishability, got " +
                          std::to_string(spec.domains.size()));
  }
  std::set<std::string> ids;
  for (const auto& g : spec.domains) {
    if (g.id.empty() || g.id == kGeneralDomain) throw ValidationError("invalid domain id '" + g.id + "'");
    if (!ids.insert(g.id).second) throw ValidationError("duplicate domain id '" + g.id + "'");
    if (g.tokens == 0) throw ValidationError("domain '" + g.id + "' has a zero token budget");
  }
  std::vector<DomainGenerator> generators;
  std::vector<DomainCorpus> corpora;
  for (std::size_t i = 0; i < spec.domains.size(); ++i) {
    const auto& g = spec.domains[i];
    std::seed_seq seq{seed, static_cast<std::uint64_t>(i), std::uint64_t{0x6e657875}};
    Rng rng(seq);
    const std::vector<std::string>* borrow = nullptr;
    if (!g.borrow_from.empty()) {
      auto it = std::find_if(generators.begin(), generators.end(),
                             [&](const DomainGenerator& d) { return d.grammar().id == g.borrow_from; });
      if (it == generators.end()) {
        throw ValidationError("domain '" + g.id + "' borrows from unknown or later domain '" + g.borrow_from + "'");
      }
      borrow = &it->lexicon();
    }
    generators.emplace_back(g, rng, borrow);
    std::vector<std::string> docs;
    std::size_t produced = 0;
    while (produced < g.tokens) {
      docs.push_back(generators.back().document(rng));
      produced += docs.back().size();
    }
    corpora.emplace_back(g.id, std::move(docs));
  }
  const double accuracy = unigram_separability(corpora);
  if (accuracy < spec.min_accuracy) {
    throw ValidationError("synthetic domains are not distinguishable: unigram classifier accuracy " +
                          std::to_string(accuracy) + " < " + std::to_string(spec.min_accuracy));
  }
  if (spec.general_tokens > 0) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < spec.domains.size(); ++i)
      if (!spec.domains[i].holdout) pool.push_back(i);
    if (pool.empty()) throw ValidationError("every domain is holdout; cannot build the general mix");
    std::seed_seq seq{seed, std::uint64_t{0x67656e}};
    Rng rng(seq);
    std::uniform_int_distribution<std::size_t> which(0, pool.size() - 1);
    std::vector<std::string> docs;
    std::size_t produced = 0;
    while (produced < spec.general_tokens) {
      docs.push_back(generators[pool[which(rng)]].document(rng));
      produced += docs.back().size();
    }
    corpora.emplace_back(std::string(kGeneralDomain), std::move(docs));
  }
  return corpora;
}

// ---------------------------------------------------------------- corpus split

/// Train/held-out partition of each corpus. Every `heldout_every`-th
/// document (1-based) is held out.
struct CorpusSet {
  std::vector<DomainCorpus> train;
  std::vector<DomainCorpus> heldout;

  static CorpusSet split(std::span<const DomainCorpus> corpora, std::size_t heldout_every = 10) {
    require_unique_ids(corpora);
    if (heldout_every < 2) throw ArgumentError("heldout_every must be >= 2");
    CorpusSet set;
    for (const auto& c : corpora) {
      std::vector<std::string> tr, ho;
      for (std::size_t i = 0; i < c.documents.size(); ++i)
        ((i + 1) % heldout_every == 0 ? ho : tr).push_back(c.documents[i]);
      if (tr.empty()) std::swap(tr, ho);
      set.train.emplace_back(c.domain_id, std::move(tr));
      set.heldout.emplace_back(c.domain_id, std::move(ho));
    }
    return set;
  }

  std::vector<std::string> domain_ids() const {
    std::vector<std::string> ids;
    for (const auto& c : train) ids.push_back(c.domain_id);
    return ids;
  }

  /// Subset restricted to the given ids, in the given order.
  CorpusSet select(std::span<const std::string> ids) const {
    CorpusSet out;
    for (const auto& id : ids) {
      out.train.push_back(find_corpus(train, id));
      out.heldout.push_back(find_corpus(heldout, id));
    }
    return out;
  }
};

// ---------------------------------------------------------------- mixtures

enum class MixtureMode { Proportional, Uniform, Explicit };

inline std::string to_string(MixtureMode m) {
  switch (m) {
    case MixtureMode::Proportional: return "proportional";
    case MixtureMode::Uniform: return "uniform";
    case MixtureMode::Explicit: return "explicit";
  }
  return "?";
}

inline MixtureMode parse_mixture_mode(std::string_view s) {
  if (s == "proportional") return MixtureMode::Proportional;
  if (s == "uniform") return MixtureMode::Uniform;
  if (s == "explicit") return MixtureMode::Explicit;
  throw ValidationError("unknown mixture mode '" + std::string(s) + "'");
}

/// Domain sampling weights. For proportional/uniform modes `weights` only
/// lists the participating domains (weights ignored); empty means all.
struct MixtureSpec {
  MixtureMode mode = MixtureMode::Uniform;
  std::vector<std::pair<std::string, double>> weights;

  static MixtureSpec uniform() { return {MixtureMode::Uniform, {}}; }
  static MixtureSpec proportional() { return {MixtureMode::Proportional, {}}; }
  static MixtureSpec only(std::string id) { return {MixtureMode::Explicit, {{std::move(id), 1.0}}}; }

  /// Normalized weights aligned with `corpora`; they sum to 1.
  std::vector<double> resolve(std::span<const DomainCorpus> corpora) const {
    std::vector<double> w(corpora.size(), 0.0);
    auto index_of = [&](const std::string& id) {
      for (std::size_t i = 0; i < corpora.size(); ++i)
        if (corpora[i].domain_id == id) return i;
      throw ValidationError("mixture references unknown domain '" + id + "'");
    };
    std::vector<bool> member(corpora.size(), weights.empty());
    for (const auto& [id, weight] : weights) {
      const auto i = index_of(id);
      if (!(weight >= 0.0) || !std::isfinite(weight)) {
        throw ValidationError("mixture weight for '" + id + "' must be a finite non-negative number");
      }
      member[i] = true;
      if (mode == MixtureMode::Explicit) w[i] += weight;
    }
    for (std::size_t i = 0; i < corpora.size(); ++i) {
      if (!member[i]) continue;
      if (mode == MixtureMode::Uniform) w[i] = 1.0;
      if (mode == MixtureMode::Proportional) w[i] = static_cast<double>(corpora[i].token_count);
    }
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    if (!(total > 0.0)) throw ValidationError("mixture weights sum to zero");
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] /= total;
      if (w[i] > 0.0 && corpora[i].token_count == 0) {
        throw ValidationError("domain '" + corpora[i].domain_id + "' has weight but an empty corpus");
      }
    }
    return w;
  }
};

// ---------------------------------------------------------------- batches

/// token_ids and targets are row-major [batch, seq_len].
struct Batch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<TokenId> token_ids;
  std::vector<TokenId> targets;
  std::vector<std::string> domain_labels;

  Shape shape() const { return {batch, seq_len}; }
};

/// BOS doc EOS BOS doc EOS ... for one corpus.
inline std::vector<TokenId> token_stream(const DomainCorpus& corpus) {
  std::vector<TokenId> stream;
  stream.reserve(corpus.token_count + 2 * corpus.documents.size());
  for (const auto& d : corpus.documents) {
    stream.push_back(kBos);
    for (unsigned char c : d) stream.push_back(static_cast<TokenId>(c));
    stream.push_back(kEos);
  }
  return stream;
}

/// Copies window [offset, offset+seq_len+1) of `stream` into row `row`,
/// padding past the end of the stream.
inline void fill_row(Batch& b, std::size_t row, std::span<const TokenId> stream, std::size_t offset) {
  for (std::size_t t = 0; t < b.seq_len; ++t) {
    const std::size_t i = offset + t;
    b.token_ids[row * b.seq_len + t] = i < stream.size() ? stream[i] : kPad;
    b.targets[row * b.seq_len + t] = i + 1 < stream.size() ? stream[i + 1] : kPad;
  }
}

/// Infinite deterministic stream of batches. Each sequence picks a domain by
/// mixture weight, then a uniformly random window of that domain's stream.
class BatchSampler {
 public:
  BatchSampler(std::span<const DomainCorpus> corpora, const MixtureSpec& mixture,
               std::size_t batch_size, std::size_t seq_len, std::uint64_t seed)
      : batch_size_(batch_size), seq_len_(seq_len), rng_(seed) {
    if (batch_size == 0 || seq_len == 0) throw ArgumentError("batch shape must be positive");
    weights_ = mixture.resolve(corpora);
    for (const auto& c : corpora) {
      ids_.push_back(c.domain_id);
      streams_.push_back(token_stream(c));
    }
    pick_ = std::discrete_distribution<std::size_t>(weights_.begin(), weights_.end());
  }

  Batch next() {
    Batch b;
    b.batch = batch_size_;
    b.seq_len = seq_len_;
    b.token_ids.resize(batch_size_ * seq_len_);
    b.targets.resize(batch_size_ * seq_len_);
    for (std::size_t r = 0; r < batch_size_; ++r) {
      const std::size_t d = pick_(rng_);
      const auto& s = streams_[d];
      std::size_t offset = 0;
      if (s.size() > seq_len_ + 1) {
        std::uniform_int_distribution<std::size_t> off(0, s.size() - seq_len_ - 1);
        offset = off(rng_);
      }
      fill_row(b, r, s, offset);
      b.domain_labels.push_back(ids_[d]);
    }
    return b;
  }

  const std::vector<double>& weights() const { return weights_; }
  const std::vector<std::string>& domain_ids() const { return ids_; }

 private:
  std::size_t batch_size_;
  std::size_t seq_len_;
  Rng rng_;
  std::vector<double> weights_;
  std::vector<std::string> ids_;
  std::vector<std::vector<TokenId>> streams_;
  std::discrete_distribution<std::size_t> pick_;
};

/// `count` evenly spaced windows of the corpus stream, grouped into batches
/// of at most `batch_size` rows.
inline std::vector<Batch> fixed_windows(const DomainCorpus& corpus, std::size_t count,
                                        std::size_t seq_len, std::size_t batch_size = 16) {
  if (corpus.token_count == 0) throw ValidationError("domain '" + corpus.domain_id + "' is empty");
  if (count == 0 || seq_len == 0 || batch_size == 0) throw ArgumentError("fixed_windows: zero size");
  const auto stream = token_stream(corpus);
  const std::size_t span = stream.size() > seq_len + 1 ? stream.size() - seq_len - 1 : 0;
  std::vector<Batch> out;
  for (std::size_t start = 0; start < count; start += batch_size) {
    Batch b;
    b.batch = std::min(batch_size, count - start);
    b.seq_len = seq_len;
    b.token_ids.resize(b.batch * seq_len);
    b.targets.resize(b.batch * seq_len);
    for (std::size_t r = 0; r < b.batch; ++r) {
      const std::size_t i = start + r;
      const std::size_t offset = count > 1 ? (span * i) / (count - 1) : 0;
      fill_row(b, r, stream, offset);
      b.domain_labels.push_back(corpus.domain_id);
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace nexus
