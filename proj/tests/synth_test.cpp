#include <gtest/gtest.h>

#include <set>

#include "kgctx/evaluator.hpp"
#include "kgctx/synth.hpp"
#include "test_util.hpp"

using namespace kgctx;
using namespace kgctx::testing;

TEST(Synth, HitRateIsExactFractionOfHeldOut) {
  for (double p : {0.0, 0.07, 0.5, 1.0}) {
    SynthSpec spec;
    spec.context_fraction = p;
    const auto [kg, store] = materialize(generate_synthetic_kg(spec, 3));
    EXPECT_EQ(kg.triples(Split::valid).size(), 100u);
    EXPECT_DOUBLE_EQ(context_hit_rate(kg, Split::valid), p) << p;
    EXPECT_DOUBLE_EQ(context_hit_rate(kg, Split::test), p) << p;
  }
}

TEST(Synth, InformativeAnswersAreTwinNeighbors) {
  SynthSpec spec;
  spec.context_fraction = 0.5;
  const auto data = generate_synthetic_kg(spec, 8);
  const auto [kg, store] = materialize(data);
  std::set<std::array<std::string, 3>> train(data.splits[0].begin(), data.splits[0].end());
  for (const auto& t : data.splits[1]) {
    const auto r = std::stoul(t[1].substr(1));
    ASSERT_EQ(r % 2, 0u) << "held-out facts use the first relation of a pair";
    auto twin = t;
    twin[1] = "R" + std::string(t[1].size() - 1 - std::to_string(r + 1).size(), '0') + std::to_string(r + 1);
    EXPECT_FALSE(train.contains(t));
    const bool informative = train.contains(twin);
    const auto adj = kg.adjacency(kg.entity_id(t[0]));
    const bool linked = std::any_of(adj.begin(), adj.end(),
                                    [&](const Neighbor& n) { return n.entity == kg.entity_id(t[2]); });
    EXPECT_EQ(informative, linked);
  }
}

TEST(Synth, DeterministicAndSeedSensitive) {
  SynthSpec spec;
  const auto a = generate_synthetic_kg(spec, 1), b = generate_synthetic_kg(spec, 1), c = generate_synthetic_kg(spec, 2);
  EXPECT_EQ(a.splits, b.splits);
  EXPECT_EQ(a.entity_mentions, b.entity_mentions);
  EXPECT_NE(a.splits, c.splits);
}

TEST(Synth, MentionsAreUnique) {
  SynthSpec spec;
  spec.descriptions = true;
  const auto data = generate_synthetic_kg(spec, 4);
  std::set<std::string> seen;
  for (const auto& [id, text] : data.entity_mentions) EXPECT_TRUE(seen.insert(text).second) << text;
  EXPECT_EQ(data.descriptions.size(), spec.entities);
  spec.mentions = parse_mention_scheme("numbered");
  EXPECT_EQ(generate_synthetic_kg(spec, 4).entity_mentions[3].second, "entity 3");
}

TEST(Synth, InfeasibleSpecsAreRejected) {
  SynthSpec spec;
  spec.context_fraction = 1.5;
  EXPECT_THROW(generate_synthetic_kg(spec, 0), ValidationError);
  spec = {};
  spec.relations = 1;
  EXPECT_THROW(generate_synthetic_kg(spec, 0), ValidationError);
  spec = {};
  spec.entities = 20;
  EXPECT_THROW(generate_synthetic_kg(spec, 0), ValidationError);
  EXPECT_THROW(parse_mention_scheme("words"), UsageError);
}

TEST(Synth, WrittenFilesLoadBack) {
  SynthSpec spec;
  spec.descriptions = true;
  const auto data = generate_synthetic_kg(spec, 5);
  const auto dir = temp_dir("synth_files");
  write_synthetic_kg(data, dir);
  auto kg = load_kg(dir / "train.tsv", dir / "valid.tsv", dir / "test.tsv");
  auto store = load_text(kg, dir / "entity_mentions.tsv", dir / "relation_mentions.tsv", dir / "descriptions.tsv");
  const auto [mkg, mstore] = materialize(data);
  for (auto s : kAllSplits) EXPECT_EQ(kg.to_tsv(s), mkg.to_tsv(s));
  for (EntityId e = 0; e < kg.num_entities(); ++e) EXPECT_EQ(store.entity_mention(e), mstore.entity_mention(e));
}
