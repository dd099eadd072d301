#include <algorithm>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "kgrag/error.hpp"
#include "kgrag/structural_features.hpp"
#include "testing.hpp"

using namespace kgrag;

namespace {

std::vector<double> row(const EntityEncodings& enc, std::uint32_t e) {
  auto s = enc.at(EntityId{e});
  return {s.begin(), s.end()};
}

std::vector<Triple> triples(const kgrag::testing::EdgeList& edges) {
  std::vector<Triple> out;
  for (const auto& [h, r, t] : edges) out.push_back({EntityId{h}, RelationId{r}, EntityId{t}});
  return out;
}

const std::vector<EntityId> kTopicA = {EntityId{0}};

}  // namespace

TEST(Dde, SingleEdge) {
  auto enc = compute_dde(triples({{0, 0, 1}}), kTopicA, {1});
  EXPECT_EQ(enc.width(), 3u);
  EXPECT_EQ(row(enc, 0), (std::vector<double>{1, 0, 0}));
  EXPECT_EQ(row(enc, 1), (std::vector<double>{0, 1, 0}));
}

TEST(Dde, TwoCycle) {
  auto enc = compute_dde(triples({{0, 0, 1}, {1, 0, 0}}), kTopicA, {2});
  EXPECT_EQ(row(enc, 0), (std::vector<double>{1, 0, 1, 0, 1}));
  EXPECT_EQ(row(enc, 1), (std::vector<double>{0, 1, 0, 1, 0}));
}

TEST(Dde, ReverseRoundsSeedFromTopic) {
  // B -> A: A has no in-edges, B receives signal only against the edge.
  auto enc = compute_dde(triples({{1, 0, 0}}), kTopicA, {2});
  EXPECT_EQ(row(enc, 0), (std::vector<double>{1, 0, 0, 0, 0}));
  EXPECT_EQ(row(enc, 1), (std::vector<double>{0, 0, 0, 1, 0}));
}

TEST(Dde, MeanIsPerTriple) {
  // Two parallel edges from the topic and one from a non-topic into C.
  auto enc = compute_dde(triples({{0, 0, 2}, {0, 1, 2}, {1, 0, 2}}), kTopicA, {1});
  EXPECT_DOUBLE_EQ(row(enc, 2)[1], 2.0 / 3.0);
}

TEST(Dde, MatchesDenseOracle) {
  std::mt19937_64 rng(21);
  for (int round = 0; round < 100; ++round) {
    std::size_t n = std::uniform_int_distribution<std::size_t>(1, 20)(rng);
    std::size_t m = std::uniform_int_distribution<std::size_t>(0, 60)(rng);
    std::size_t L = std::uniform_int_distribution<std::size_t>(0, 4)(rng);
    auto cand = triples(kgrag::testing::random_edges(rng, n, m, 4));
    auto topics = kgrag::testing::random_subset(rng, n, 3);
    auto enc = compute_dde(cand, topics, {L});
    auto oracle = kgrag::testing::dense_dde(cand, topics, L);
    ASSERT_EQ(enc.size(), oracle.size());
    for (const auto& [e, expected] : oracle) {
      auto got = enc.at(e);
      for (std::size_t c = 0; c < expected.size(); ++c) {
        EXPECT_NEAR(got[c], expected[c], 1e-9);
        EXPECT_GE(got[c], 0.0);
        EXPECT_LE(got[c], 1.0);
      }
    }
  }
}

TEST(Dde, ReversingEdgesSwapsBlocks) {
  std::mt19937_64 rng(22);
  for (int round = 0; round < 50; ++round) {
    std::size_t n = 12, L = 3;
    auto edges = kgrag::testing::random_edges(rng, n, 25, 2);
    auto cand = triples(edges);
    std::vector<Triple> rev;
    for (const Triple& t : cand) rev.push_back({t.tail, t.relation, t.head});
    auto topics = kgrag::testing::random_subset(rng, n, 2);
    auto a = compute_dde(cand, topics, {L});
    auto b = compute_dde(rev, topics, {L});
    for (EntityId e : a.entities()) {
      auto x = a.at(e), y = b.at(e);
      EXPECT_EQ(x[0], y[0]);
      for (std::size_t l = 1; l <= L; ++l) {
        EXPECT_EQ(x[l], y[L + l]);
        EXPECT_EQ(x[L + l], y[l]);
      }
    }
  }
}

TEST(Dde, OrderAndRelationInvariant) {
  std::mt19937_64 rng(23);
  auto edges = kgrag::testing::random_edges(rng, 15, 40, 5);
  auto cand = triples(edges);
  std::vector<EntityId> topics = {EntityId{1}, EntityId{4}};
  auto a = compute_dde(cand, topics, {3});
  std::shuffle(cand.begin(), cand.end(), rng);
  for (Triple& t : cand) t.relation = RelationId{0};
  auto b = compute_dde(cand, topics, {3});
  for (EntityId e : a.entities()) {
    auto x = a.at(e), y = b.at(e);
    for (std::size_t c = 0; c < x.size(); ++c) EXPECT_NEAR(x[c], y[c], 1e-15);
  }
}

TEST(Dde, SignalDoesNotOutrunRounds) {
  std::mt19937_64 rng(24);
  for (int round = 0; round < 30; ++round) {
    std::size_t n = 16, L = 4;
    auto edges = kgrag::testing::random_edges(rng, n, 20, 1);
    KnowledgeGraph kg = kgrag::testing::graph_from_edges(n, 1, edges);
    auto topics = kgrag::testing::random_subset(rng, n, 2);
    std::vector<Triple> cand(kg.triples().begin(), kg.triples().end());
    auto enc = compute_dde(cand, topics, {L});
    auto dist = undirected_distances(kg, topics);
    for (EntityId e : enc.entities()) {
      auto s = enc.at(e);
      for (std::size_t l = 0; l <= L; ++l) {
        if (dist[e.value] <= l) continue;
        EXPECT_EQ(s[l], 0.0);
        if (l > 0) EXPECT_EQ(s[L + l], 0.0);
      }
    }
  }
}

TEST(TripleEncoding, Concatenation) {
  auto enc = compute_dde(triples({{0, 0, 1}}), kTopicA, {1});
  Triple t{EntityId{0}, RelationId{0}, EntityId{1}};
  EXPECT_EQ(triple_encoding(enc, t), (std::vector<double>{1, 0, 0, 0, 1, 0}));
  Triple loop{EntityId{0}, RelationId{0}, EntityId{0}};
  EXPECT_EQ(triple_encoding(enc, loop), (std::vector<double>{1, 0, 0, 1, 0, 0}));
  Triple missing{EntityId{0}, RelationId{0}, EntityId{9}};
  EXPECT_THROW(triple_encoding(enc, missing), MissingKeyError);
}

TEST(TopicOnehot, IsZeroRoundDde) {
  std::vector<EntityId> ents = {EntityId{0}, EntityId{1}};
  auto enc = topic_onehot(ents, kTopicA);
  EXPECT_EQ(row(enc, 0), std::vector<double>{1});
  EXPECT_EQ(row(enc, 1), std::vector<double>{0});
  auto dde = compute_dde(triples({{0, 0, 1}}), kTopicA, {0});
  EXPECT_EQ(row(dde, 0), row(enc, 0));
  EXPECT_EQ(row(dde, 1), row(enc, 1));
}

TEST(Ppr, IsolatedTopic) {
  auto s = ppr_scores({}, kTopicA);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_NEAR(s.at(EntityId{0}), 1.0, 1e-12);
}

TEST(Ppr, TwoCycleMatchesOracle) {
  auto cand = triples({{0, 0, 1}, {1, 0, 0}});
  auto s = ppr_scores(cand, kTopicA);
  auto oracle = kgrag::testing::dense_ppr(cand, kTopicA, 0.85, 10000);
  // Closed form: x_A = 0.15 + 0.85 x_B, x_B = 0.85 x_A.
  EXPECT_NEAR(oracle.at(EntityId{0}), 0.15 / (1 - 0.85 * 0.85), 1e-12);
  for (const auto& [e, v] : oracle) EXPECT_NEAR(s.at(e), v, 1e-8);
}

TEST(Ppr, UnreachableNodeGetsZero) {
  auto s = ppr_scores(triples({{0, 0, 1}, {2, 0, 3}}), kTopicA);
  EXPECT_EQ(s.at(EntityId{2}), 0.0);
  EXPECT_EQ(s.at(EntityId{3}), 0.0);
}

TEST(Ppr, EmptyTopicsThrow) { EXPECT_THROW(ppr_scores(triples({{0, 0, 1}}), {}), Error); }

TEST(Ppr, DistributionMatchesOracle) {
  std::mt19937_64 rng(25);
  for (int round = 0; round < 50; ++round) {
    std::size_t n = std::uniform_int_distribution<std::size_t>(1, 20)(rng);
    std::size_t m = std::uniform_int_distribution<std::size_t>(0, 40)(rng);
    auto cand = triples(kgrag::testing::random_edges(rng, n, m, 2));
    auto topics = kgrag::testing::random_subset(rng, n, 3);
    auto s = ppr_scores(cand, topics);
    auto oracle = kgrag::testing::dense_ppr(cand, topics, 0.85, 10000);
    double sum = 0.0;
    for (const auto& [e, v] : s) {
      EXPECT_GE(v, 0.0);
      sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
    for (const auto& [e, v] : oracle) EXPECT_NEAR(s.at(e), v, 1e-8);
  }
}

TEST(EntityEncodings, Concat) {
  EntityEncodings a(1), b(2);
  a.row(a.add(EntityId{3}))[0] = 1;
  auto r = b.row(b.add(EntityId{3}));
  r[0] = 2;
  r[1] = 3;
  auto c = a.concat(b);
  EXPECT_EQ(row(c, 3), (std::vector<double>{1, 2, 3}));
}
