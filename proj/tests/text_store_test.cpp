#include <gtest/gtest.h>

#include "kgctx/text_store.hpp"
#include "test_util.hpp"

using namespace kgctx;
using namespace kgctx::testing;

TEST(MentionTrie, ExactMatchOnly) {
  MentionTrie t;
  t.insert("new york", 1);
  t.insert("new", 2);
  t.insert("new york", 3);
  t.insert("new york", 1);
  auto hit = t.find("new york");
  ASSERT_EQ(hit.size(), 2u);
  EXPECT_EQ(hit[0], 1u);
  EXPECT_EQ(hit[1], 3u);
  EXPECT_EQ(t.find("new").size(), 1u);
  EXPECT_TRUE(t.find("new yor").empty());
  EXPECT_TRUE(t.find("new york city").empty());
  EXPECT_TRUE(t.find("New York").empty());
  EXPECT_TRUE(t.find("").empty());
}

TEST(MentionTrie, HandlesArbitraryBytes) {
  MentionTrie t;
  const std::string weird = std::string("caf\xc3\xa9") + '\0' + "\xff";
  t.insert(weird, 4);
  ASSERT_EQ(t.find(weird).size(), 1u);
  EXPECT_TRUE(t.find("caf\xc3\xa9").empty());
}

TEST(TextStore, TrimsAndResolves) {
  TextStore s({"  Paris ", "Lyon", "Paris"}, {"capital of"});
  EXPECT_EQ(s.entity_mention(0), "Paris");
  auto ids = resolve_mention(s, " Paris\t");
  ASSERT_EQ(ids.size(), 2u);  // ambiguous mention
  EXPECT_EQ(ids[0], 0u);
  EXPECT_EQ(ids[1], 2u);
  EXPECT_TRUE(resolve_mention(s, "paris").empty());
  EXPECT_FALSE(s.has_descriptions());
}

TEST(TextStore, RejectsEmptyMentions) {
  EXPECT_THROW(TextStore({"a", "  "}, {"r"}), ValidationError);
  EXPECT_THROW(TextStore({"a"}, {""}), ValidationError);
}

TEST(LoadText, MissingMentionListsOffenders) {
  auto dir = temp_dir("text_missing");
  auto kg = make_kg({{"Q1", "P1", "Q2"}, {"Q2", "P1", "Q3"}});
  write_file_atomic(dir / "ent.tsv", "Q1\tone\nQ9\tunused\n");
  write_file_atomic(dir / "rel.tsv", "P1\tlinks\n");
  try {
    load_text(kg, dir / "ent.tsv", dir / "rel.tsv");
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("Q2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("Q3"), std::string::npos) << msg;
  }
}

TEST(LoadText, FirstRowWinsAndDescriptionsAreOptional) {
  auto dir = temp_dir("text_ok");
  auto kg = make_kg({{"Q1", "P1", "Q2"}});
  write_file_atomic(dir / "ent.tsv", "Q1\tone\nQ2\ttwo\nQ1\tuno\n");
  write_file_atomic(dir / "rel.tsv", "P1\tlinks\n");
  write_file_atomic(dir / "desc.tsv", "Q2\t  second entity \n");
  auto s = load_text(kg, dir / "ent.tsv", dir / "rel.tsv", dir / "desc.tsv");
  EXPECT_EQ(s.entity_mention(kg.entity_id("Q1")), "one");
  EXPECT_FALSE(s.description(kg.entity_id("Q1")).has_value());
  ASSERT_TRUE(s.description(kg.entity_id("Q2")).has_value());
  EXPECT_EQ(*s.description(kg.entity_id("Q2")), "second entity");
  EXPECT_TRUE(s.has_descriptions());
  EXPECT_EQ(s.relation_mention(0), "links");
}

TEST(LoadText, MalformedRowIsAParseError) {
  auto dir = temp_dir("text_bad");
  auto kg = make_kg({{"Q1", "P1", "Q2"}});
  write_file_atomic(dir / "ent.tsv", "Q1\tone\textra\n");
  write_file_atomic(dir / "rel.tsv", "P1\tlinks\n");
  EXPECT_THROW(load_text(kg, dir / "ent.tsv", dir / "rel.tsv"), ParseError);
}
