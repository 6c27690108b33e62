// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "nexus/nexus.hpp"
#include "support/fixtures.hpp"

using namespace nexus;

namespace {

EmbedOptions hashed(std::size_t m = 256) {
  EmbedOptions o;
  o.method = EmbedMethod::HashedNgram;
  o.m = m;
  o.sample_count = 64;
  o.seed = 3;
  return o;
}

double norm(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

TEST(EmbedDomain, DisjointVocabulariesAreOrthogonal) {
  // A wide table keeps the 84 n-grams of each four-letter alphabet from colliding.
  auto a = embed_domain<float>(testkit::letter_corpus("a", "abcd", 40, 60, 1), hashed(1 << 16), nullptr);
  auto b = embed_domain<float>(testkit::letter_corpus("b", "wxyz", 40, 60, 2), hashed(1 << 16), nullptr);
  EXPECT_LT(std::abs(cosine(a.vector, b.vector)), 0.1);
  EXPECT_EQ(a.method, "hashed-ngram");
  EXPECT_EQ(a.dim(), 1u << 16);
}

TEST(EmbedDomain, DeterministicAndFrequencyInvariant) {
  auto c = testkit::letter_corpus("a", "abcdefg", 30, 80, 4);
  auto x = embed_domain<float>(c, hashed(), nullptr), y = embed_domain<float>(c, hashed(), nullptr);
  EXPECT_EQ(x.vector, y.vector);
  std::vector<std::string> twice;
  for (const auto& d : c.documents) {
    twice.push_back(d);
    twice.push_back(d);
  }
  // Sampling every document keeps the duplicated corpus on equal footing.
  auto all = hashed();
  all.sample_count = 1000;
  auto once = embed_domain<float>(c, all, nullptr);
  auto dup = embed_domain<float>(DomainCorpus("a", twice), all, nullptr);
  ASSERT_EQ(once.vector.size(), dup.vector.size());
  for (std::size_t i = 0; i < once.vector.size(); ++i) EXPECT_NEAR(once.vector[i], dup.vector[i], 1e-12);
}

TEST(EmbedDomain, SeedModelMeanIsUnitNormAndChecksWidth) {
  auto seed = DenseModelState<float>::init(testkit::tiny_config(), 1);
  auto c = testkit::letter_corpus("a", "hello", 10, 20, 5);
  EmbedOptions o;
  auto e = embed_domain(c, o, &seed);
  EXPECT_EQ(e.dim(), seed.config.d_model);
  EXPECT_NEAR(norm(e.vector), 1.0, 1e-6);
  o.m = 7;
  EXPECT_THROW(embed_domain(c, o, &seed), ArgumentError);
  EXPECT_THROW(embed_domain<float>(c, EmbedOptions{}, nullptr), ArgumentError);
}

TEST(EmbedDomain, EmptyCorpusRejected) {
  EXPECT_THROW(embed_domain<float>(DomainCorpus("e", {}), hashed(), nullptr), ValidationError);
}

TEST(EmbeddingSet, UnitRowsAppendOnlyAndSymmetricCosines) {
  std::vector<DomainCorpus> cs;
  const char* alphabets[] = {"abcdef", "defghi", "ghijkl", "jklmno", "mnopqr"};
  for (int i = 0; i < 4; ++i) cs.push_back(testkit::letter_corpus(testkit::expert_ids(5)[i], alphabets[i], 20, 50, i));
  auto set = embed_query_set<float>(cs, hashed(), nullptr);
  auto D = set.matrix<double>();
  EXPECT_EQ(D.shape(), (Shape{4, 256}));
  for (const auto& r : set.rows()) EXPECT_NEAR(norm(r.vector), 1.0, 1e-6);
  auto before = D.clone();
  set.append(embed_domain<float>(testkit::letter_corpus("epsilon", alphabets[4], 20, 50, 9), hashed(), nullptr));
  auto after = set.matrix<double>();
  EXPECT_TRUE(std::equal(before.data().begin(), before.data().end(), after.data().begin()));
  for (std::size_t i = 0; i < set.size(); ++i) {
    EXPECT_NEAR(cosine(set.rows()[i].vector, set.rows()[i].vector), 1.0, 1e-6);
    for (std::size_t j = 0; j < set.size(); ++j)
      EXPECT_EQ(cosine(set.rows()[i].vector, set.rows()[j].vector), cosine(set.rows()[j].vector, set.rows()[i].vector));
  }
}

TEST(EmbeddingSet, DuplicatesAndWidthMismatchRejected) {
  std::vector<DomainCorpus> dup{testkit::letter_corpus("a", "ab", 3, 5, 1), testkit::letter_corpus("a", "cd", 3, 5, 2)};
  EXPECT_THROW(embed_query_set<float>(dup, hashed(), nullptr), ValidationError);
  EmbeddingSet set;
  set.append(embed_domain<float>(dup[0], hashed(), nullptr));
  EXPECT_THROW(set.append(embed_domain<float>(dup[0], hashed(), nullptr)), ValidationError);
  auto narrow = embed_domain<float>(dup[1], hashed(64), nullptr);
  narrow.domain_id = "b";
  EXPECT_THROW(set.append(narrow), ValidationError);
  EXPECT_THROW(set.get("zz"), ValidationError);
}

TEST(EmbeddingSet, SaveLoadRoundTrip) {
  testkit::TempDir dir("emb");
  auto set = testkit::random_embeddings(testkit::expert_ids(3), 12, 4);
  set.save(dir / "d.json");
  auto back = EmbeddingSet::load(dir / "d.json");
  ASSERT_EQ(back.size(), 3u);
  EXPECT_TRUE(back.matrix<double>().bit_equal(set.matrix<double>()));
  std::vector<std::string> order{"gamma", "alpha"};
  EXPECT_EQ(back.select(order).rows()[0].domain_id, "gamma");
}

TEST(EmbedProperties, CosineIncreasesWithVocabularyOverlap) {
  // Domain B shares a fraction rho of A's ten symbols and fills the rest from
  // a disjoint pool; checked over several corpus seeds.
  const std::string a_syms = "abcdefghij", other = "qrstuvwxyz";
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto a = embed_domain<float>(testkit::letter_corpus("a", a_syms, 40, 80, 100 + s), hashed(), nullptr);
    double prev = -2.0;
    for (double rho : {0.2, 0.5, 0.8}) {
      const auto shared = static_cast<std::size_t>(rho * 10 + 0.5);
      auto b_syms = a_syms.substr(0, shared) + other.substr(0, 10 - shared);
      auto b = embed_domain<float>(testkit::letter_corpus("b", b_syms, 40, 80, 200 + s), hashed(), nullptr);
      const double c = cosine(a.vector, b.vector);
      EXPECT_GT(c, prev) << "rho " << rho << " seed " << s;
      prev = c;
    }
  }
}

TEST(EmbedDomain, MethodNames) {
  EXPECT_EQ(parse_embed_method("hashed-ngram"), EmbedMethod::HashedNgram);
  EXPECT_EQ(parse_embed_method("seed-model-mean"), EmbedMethod::SeedModelMean);
  EXPECT_ANY_THROW(parse_embed_method("openai"));
}
