#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "kgctx/kg_store.hpp"
#include "test_util.hpp"

using namespace kgctx;
using namespace kgctx::testing;

TEST(KnowledgeGraph, AssignsIdsInFirstSeenOrder) {
  auto kg = make_kg({{"b", "p", "a"}, {"a", "q", "c"}}, {{"d", "p", "b"}});
  EXPECT_EQ(kg.num_entities(), 4u);
  EXPECT_EQ(kg.entity_id("b"), 0u);
  EXPECT_EQ(kg.entity_id("a"), 1u);
  EXPECT_EQ(kg.entity_id("c"), 2u);
  EXPECT_EQ(kg.entity_id("d"), 3u);
  EXPECT_EQ(kg.relation_id("q"), 1u);
  EXPECT_EQ(kg.entity_name(2), "c");
  EXPECT_THROW(kg.entity_id("zz"), LookupError);
  EXPECT_THROW(kg.relation_id("zz"), LookupError);
  EXPECT_FALSE(kg.find_entity("zz").has_value());
}

TEST(KnowledgeGraph, CollapsesDuplicatesWithinSplit) {
  auto kg = make_kg({{"a", "p", "b"}, {"a", "p", "b"}, {"b", "p", "a"}}, {{"a", "p", "c"}, {"a", "p", "c"}});
  EXPECT_EQ(kg.triples(Split::train).size(), 2u);
  EXPECT_EQ(kg.triples(Split::valid).size(), 1u);
  EXPECT_EQ(kg.degree(kg.entity_id("a")), 2u);
}

TEST(KnowledgeGraph, EmptyTrainIsRejected) {
  EXPECT_THROW(make_kg({}, {{"a", "p", "b"}}), ValidationError);
}

TEST(KnowledgeGraph, AdjacencyComesFromTrainOnly) {
  auto kg = make_kg({{"a", "p", "b"}, {"c", "q", "a"}}, {{"a", "p", "c"}}, {{"b", "p", "c"}});
  const auto a = kg.entity_id("a"), b = kg.entity_id("b"), c = kg.entity_id("c");
  const auto p = kg.relation_id("p"), q = kg.relation_id("q");
  std::vector<Neighbor> got(kg.adjacency(a).begin(), kg.adjacency(a).end());
  std::sort(got.begin(), got.end());
  std::vector<Neighbor> want{{p, b, Direction::out}, {q, c, Direction::in}};
  std::sort(want.begin(), want.end());
  EXPECT_EQ(got, want);
  EXPECT_EQ(kg.degree(b), 1u);
  EXPECT_EQ(kg.degree(c), 1u);
}

TEST(KnowledgeGraph, DegreeSumIsTwiceTrainSize) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto kg = random_kg(rng, 1 + rng.below(30), 1 + rng.below(5), 1 + rng.below(100), 10, 10);
    std::size_t sum = 0;
    for (EntityId e = 0; e < kg.num_entities(); ++e) sum += kg.degree(e);
    EXPECT_EQ(sum, 2 * kg.triples(Split::train).size());
  }
}

TEST(KnowledgeGraph, SelfLoopAppearsInBothDirections) {
  auto kg = make_kg({{"a", "p", "a"}});
  EXPECT_EQ(kg.degree(0), 2u);
  const Triple t{0, 0, 0};
  EXPECT_EQ(own_edges(t, 0).size(), 2u);
  EXPECT_TRUE(neighborhood(kg, 0, 10, 1, own_edges(t, 0)).empty());
}

TEST(KnowledgeGraph, AnswersAreSortedPerSplit) {
  auto kg = make_kg({{"a", "p", "d"}, {"a", "p", "b"}, {"a", "p", "c"}}, {{"a", "p", "e"}});
  const Query q{kg.entity_id("a"), kg.relation_id("p"), Direction::out};
  auto ans = kg.answers(Split::train, q);
  EXPECT_TRUE(std::is_sorted(ans.begin(), ans.end()));
  EXPECT_EQ(ans.size(), 3u);
  EXPECT_EQ(kg.answers(Split::valid, q).size(), 1u);
  EXPECT_TRUE(kg.answers(Split::test, q).empty());
  const Query head{kg.entity_id("b"), kg.relation_id("p"), Direction::in};
  ASSERT_EQ(kg.answers(Split::train, head).size(), 1u);
  EXPECT_EQ(kg.answers(Split::train, head)[0], kg.entity_id("a"));
}

TEST(KnowledgeGraph, TsvRoundTrip) {
  auto dir = temp_dir("kg_tsv");
  auto kg = make_kg({{"a", "p", "b"}, {"b", "q", "c"}}, {{"a", "q", "c"}}, {{"c", "p", "a"}});
  write_file_atomic(dir / "train.tsv", kg.to_tsv(Split::train));
  write_file_atomic(dir / "valid.tsv", kg.to_tsv(Split::valid));
  write_file_atomic(dir / "test.tsv", kg.to_tsv(Split::test));
  auto back = load_kg(dir / "train.tsv", dir / "valid.tsv", dir / "test.tsv");
  for (auto s : kAllSplits) EXPECT_EQ(back.to_tsv(s), kg.to_tsv(s));
}

TEST(ReadTriples, ReportsLineOfMalformedRow) {
  auto dir = temp_dir("kg_bad");
  write_file_atomic(dir / "t.tsv", "a\tp\tb\n\nc\tq\n");
  try {
    read_triples(dir / "t.tsv");
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":3"), std::string::npos) << e.what();
  }
  write_file_atomic(dir / "crlf.tsv", "a\tp\tb\r\nb\tp\tc\r\n");
  EXPECT_EQ(read_triples(dir / "crlf.tsv").size(), 2u);
  EXPECT_EQ(read_triples(dir / "crlf.tsv")[1][2], "c");
}

TEST(Neighborhood, RespectsCapExclusionAndSeed) {
  Named train;
  for (int i = 0; i < 40; ++i) train.push_back({"hub", "p", "x" + std::to_string(i)});
  auto kg = make_kg(train);
  const EntityId hub = kg.entity_id("hub");
  for (std::size_t k : {0u, 1u, 5u, 40u, 100u}) {
    auto n = neighborhood(kg, hub, k, 7);
    EXPECT_EQ(n.size(), std::min<std::size_t>(k, 40));
    std::set<Neighbor> unique(n.begin(), n.end());
    EXPECT_EQ(unique.size(), n.size()) << "sampled with replacement";
  }
  EXPECT_EQ(neighborhood(kg, hub, 10, 7), neighborhood(kg, hub, 10, 7));
  EXPECT_NE(neighborhood(kg, hub, 10, 7), neighborhood(kg, hub, 10, 8));

  const Triple own{hub, 0, kg.entity_id("x3")};
  auto ex = own_edges(own, hub);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto n = neighborhood(kg, hub, 40, seed, ex);
    EXPECT_EQ(n.size(), 39u);
    EXPECT_EQ(std::find(n.begin(), n.end(), ex[0]), n.end());
  }
}

TEST(QueryFrequency, CountsTrainAnswersAndBuckets) {
  Named train;
  for (int i = 0; i < 12; ++i) train.push_back({"a", "p", "x" + std::to_string(i)});
  train.push_back({"b", "p", "x0"});
  auto kg = make_kg(train, {{"c", "p", "x1"}});
  const auto p = kg.relation_id("p");
  EXPECT_EQ(query_frequency(kg, {kg.entity_id("a"), p, Direction::out}), 12u);
  EXPECT_EQ(query_frequency(kg, {kg.entity_id("x0"), p, Direction::in}), 2u);
  EXPECT_EQ(query_frequency(kg, {kg.entity_id("c"), p, Direction::out}), 0u);  // valid-only
  EXPECT_THROW(query_frequency(kg, {999, p, Direction::out}), LookupError);

  EXPECT_EQ(frequency_bucket(0), FrequencyBucket::zero);
  EXPECT_EQ(frequency_bucket(1), FrequencyBucket::low);
  EXPECT_EQ(frequency_bucket(10), FrequencyBucket::low);
  EXPECT_EQ(frequency_bucket(11), FrequencyBucket::high);
}

TEST(FilterSet, UnionOfSplitsMinusGold) {
  auto kg = make_kg({{"a", "p", "b"}, {"a", "p", "c"}}, {{"a", "p", "d"}}, {{"a", "p", "b"}, {"a", "q", "e"}});
  const Query q{kg.entity_id("a"), kg.relation_id("p"), Direction::out};
  auto f = filter_set(kg, q, kg.entity_id("d"));
  std::vector<EntityId> want{kg.entity_id("b"), kg.entity_id("c")};
  std::sort(want.begin(), want.end());
  EXPECT_EQ(f, want);
  EXPECT_EQ(filter_set(kg, q, kg.entity_id("b")).size(), 2u);
}

TEST(Parsing, DirectionAndSplitNames) {
  EXPECT_EQ(parse_direction("out"), Direction::out);
  EXPECT_EQ(parse_direction("head"), Direction::in);
  EXPECT_THROW(parse_direction("up"), UsageError);
  EXPECT_EQ(parse_split("valid"), Split::valid);
  EXPECT_THROW(parse_split("dev"), UsageError);
}
