#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kgctx/io.hpp"
#include "kgctx/kg_store.hpp"
#include "kgctx/text_store.hpp"
#include "kgctx/tokenizer.hpp"

namespace kgctx {

enum class VerbalizationMode : std::uint8_t { plain, context };

inline const char* to_string(VerbalizationMode m) {
  return m == VerbalizationMode::plain ? "plain" : "context";
}
inline VerbalizationMode parse_mode(std::string_view s) {
  if (s == "plain") return VerbalizationMode::plain;
  if (s == "context") return VerbalizationMode::context;
  throw UsageError("mode must be 'plain' or 'context', got '" + std::string(s) + "'");
}

struct VerbalizedExample {
  std::string input_text;
  std::string target_text;
  Query query{};
  EntityId gold = 0;
  std::vector<Neighbor> context_used;
  VerbalizationMode mode = VerbalizationMode::plain;
  bool with_description = false;
};

inline constexpr std::string_view kReversePrefix = "reverse of ";
inline constexpr std::string_view kSeparator = "<SEP>";

/// Relation mention as seen from the query entity: incoming edges are
/// marked with the `reverse of ` prefix.
inline std::string directed_relation(std::string_view mention, Direction d) {
  if (d == Direction::out) return std::string(mention);
  std::string out(kReversePrefix);
  out += mention;
  return out;
}

/// `predict tail: <s> | <r> |`. Head queries are verbalized as tail queries
/// from the object with a reversed relation.
inline std::string verbalize_plain(std::string_view subject_mention, std::string_view relation_mention,
                                   Direction direction) {
  std::string out = "predict tail: ";
  out += subject_mention;
  out += " | ";
  out += directed_relation(relation_mention, direction);
  out += " |";
  return out;
}

namespace detail {

inline std::string query_head(std::string_view entity, std::string_view relation,
                              const std::optional<std::string>& description) {
  std::string out = "query: ";
  out += entity;
  out += " | ";
  out += relation;
  out += " |";
  if (description) {
    out += " description: ";
    out += *description;
    out += " |";
  }
  out += " context:";
  return out;
}

inline std::string context_pair(std::string_view relation, std::string_view entity) {
  std::string out = " ";
  out += relation;
  out += " | ";
  out += entity;
  out += ' ';
  out += kSeparator;
  return out;
}

// Drops a trailing incomplete UTF-8 sequence left by a token-boundary cut.
inline void drop_partial_utf8(std::string& s) {
  if (s.empty()) return;
  std::size_t lead = s.size() - 1;
  while (lead > 0 && s.size() - lead < 4 && (static_cast<unsigned char>(s[lead]) & 0xC0) == 0x80) {
    --lead;
  }
  const auto c = static_cast<unsigned char>(s[lead]);
  std::size_t need = 1;
  if ((c & 0xE0) == 0xC0) need = 2;
  else if ((c & 0xF0) == 0xE0) need = 3;
  else if ((c & 0xF8) == 0xF0) need = 4;
  if (s.size() - lead < need) s.resize(lead);
}

// Cuts text to at most max_tokens tokens at a whole-token boundary.
inline std::string truncate_tokens(const SubwordVocab& vocab, std::string_view text,
                                   std::size_t max_tokens) {
  auto ids = vocab.encode(text);
  if (ids.size() <= max_tokens) return std::string(text);
  std::size_t keep = max_tokens;
  for (;;) {
    std::string cut = vocab.decode(std::span<const TokenId>(ids.data(), keep));
    drop_partial_utf8(cut);
    cut = std::string(trim(cut));
    if (vocab.count(cut) <= max_tokens || keep == 0) return cut;
    --keep;
  }
}

}  // namespace detail

/// Builds `query: <s> | <r> | [description: <d> |] context: <rel> | <ent> <SEP> ...`.
///
/// Pairs are appended in the given order; appending stops before the first
/// pair that would push the token count past token_budget. A description is
/// first cut to half the budget.
inline VerbalizedExample verbalize_context(const TextStore& store, const SubwordVocab& vocab,
                                           const Query& query, EntityId gold,
                                           std::span<const Neighbor> context,
                                           std::optional<std::string> description,
                                           std::size_t token_budget) {
  if (token_budget == 0) throw ValidationError("token budget must be positive");
  VerbalizedExample ex;
  ex.mode = VerbalizationMode::context;
  ex.query = query;
  ex.gold = gold;
  ex.target_text = store.entity_mention(gold);

  const auto relation = directed_relation(store.relation_mention(query.relation), query.direction);
  const auto& entity = store.entity_mention(query.entity);
  if (description) description = detail::truncate_tokens(vocab, *description, token_budget / 2);

  std::string text = detail::query_head(entity, relation, description);
  std::size_t used = vocab.count(text);
  while (used > token_budget && description && !description->empty()) {
    auto shorter = vocab.encode(*description);
    description = detail::truncate_tokens(vocab, *description, shorter.size() - 1);
    text = detail::query_head(entity, relation, description);
    used = vocab.count(text);
  }
  if (used > token_budget) {
    throw ValidationError("query alone needs " + std::to_string(used) + " tokens, budget is " +
                          std::to_string(token_budget));
  }
  ex.with_description = description.has_value();

  // Each pair starts with a space, so its tokens add independently of the
  // text before it.
  for (const auto& n : context) {
    auto pair = detail::context_pair(directed_relation(store.relation_mention(n.relation), n.direction),
                                     store.entity_mention(n.entity));
    const auto cost = vocab.count_continuation(pair);
    if (used + cost > token_budget) break;
    text += pair;
    used += cost;
    ex.context_used.push_back(n);
  }
  ex.input_text = std::move(text);
  return ex;
}

struct VerbalizerOptions {
  VerbalizationMode mode = VerbalizationMode::context;
  std::size_t k = 100;
  std::size_t token_budget = 512;
  bool use_descriptions = false;
  // Sample context once (epoch 0) instead of per epoch.
  bool freeze_context = false;
};

/// Verbalizes one query with an already sampled context.
inline VerbalizedExample verbalize_query(const TextStore& store, const SubwordVocab& vocab,
                                         const VerbalizerOptions& opt, const Query& q,
                                         EntityId gold, std::span<const Neighbor> context) {
  if (opt.mode == VerbalizationMode::plain) {
    VerbalizedExample ex;
    ex.mode = VerbalizationMode::plain;
    ex.query = q;
    ex.gold = gold;
    ex.target_text = store.entity_mention(gold);
    ex.input_text = verbalize_plain(store.entity_mention(q.entity),
                                    store.relation_mention(q.relation), q.direction);
    if (vocab.count(ex.input_text) > opt.token_budget) {
      throw ValidationError("plain query exceeds the token budget");
    }
    return ex;
  }
  std::optional<std::string> desc;
  if (opt.use_descriptions) desc = store.description(q.entity);
  return verbalize_context(store, vocab, q, gold, context, desc, opt.token_budget);
}

/// Seed for the context of an evaluation query; independent of query order.
inline std::uint64_t eval_context_seed(std::uint64_t seed, const Query& q) {
  return derive_seed(seed, {0x6576616cULL, q.entity, q.relation, static_cast<std::uint64_t>(q.direction)});
}

/// Verbalizes a held-out query. No edge is excluded: held-out edges are not
/// in the train adjacency.
inline VerbalizedExample verbalize_eval_query(const KnowledgeGraph& kg, const TextStore& store,
                                              const SubwordVocab& vocab,
                                              const VerbalizerOptions& opt, const Query& q,
                                              EntityId gold, std::uint64_t seed) {
  std::vector<Neighbor> ctx;
  if (opt.mode == VerbalizationMode::context) {
    ctx = neighborhood(kg, q.entity, opt.k, eval_context_seed(seed, q));
  }
  return verbalize_query(store, vocab, opt, q, gold, ctx);
}

/// Deterministic training stream: two examples per train triple per epoch
/// (index 2i is the tail query of triple i, 2i+1 its head query). Context is
/// resampled per epoch and never contains the example's own edge. Random
/// access by index lets callers shard by range.
class TrainingStream {
 public:
  TrainingStream(const KnowledgeGraph& kg, const TextStore& store, const SubwordVocab& vocab,
                 VerbalizerOptions options, std::uint64_t seed)
      : kg_(kg), store_(store), vocab_(vocab), opt_(options), seed_(seed) {}

  std::size_t size() const { return 2 * kg_.triples(Split::train).size(); }

  VerbalizedExample example(std::size_t epoch, std::size_t index) const {
    const auto& t = kg_.triples(Split::train).at(index / 2);
    const bool tail = index % 2 == 0;
    const Query q = tail ? tail_query(t) : head_query(t);
    const EntityId gold = tail ? t.object : t.subject;
    std::vector<Neighbor> ctx;
    if (opt_.mode == VerbalizationMode::context) {
      const auto excluded = own_edges(t, q.entity);
      const std::uint64_t e = opt_.freeze_context ? 0 : epoch;
      ctx = neighborhood(kg_, q.entity, opt_.k, derive_seed(seed_, {e, index}), excluded);
    }
    return verbalize_query(store_, vocab_, opt_, q, gold, ctx);
  }

  template <typename Fn>
  void for_each(std::size_t epoch, Fn&& fn) const {
    for (std::size_t i = 0; i < size(); ++i) fn(example(epoch, i));
  }

  const VerbalizerOptions& options() const { return opt_; }

 private:
  const KnowledgeGraph& kg_;
  const TextStore& store_;
  const SubwordVocab& vocab_;
  VerbalizerOptions opt_;
  std::uint64_t seed_;
};

/// Text used to train the tokenizer: every mention and description plus the
/// fixed template words in both verbalization styles, once per train triple.
inline std::vector<std::string> tokenizer_corpus(const KnowledgeGraph& kg, const TextStore& store) {
  std::vector<std::string> corpus;
  for (const auto& t : kg.triples(Split::train)) {
    const auto& s = store.entity_mention(t.subject);
    const auto& r = store.relation_mention(t.relation);
    const auto& o = store.entity_mention(t.object);
    corpus.push_back(verbalize_plain(s, r, Direction::out) + " " + o);
    corpus.push_back(detail::query_head(o, directed_relation(r, Direction::in), std::nullopt) +
                     detail::context_pair(r, s) + " description:");
  }
  for (std::size_t e = 0; e < store.num_entities(); ++e) {
    corpus.push_back(store.entity_mention(static_cast<EntityId>(e)));
    if (const auto& d = store.description(static_cast<EntityId>(e))) corpus.push_back(*d);
  }
  for (std::size_t r = 0; r < store.num_relations(); ++r) {
    corpus.push_back("reverse of " + store.relation_mention(static_cast<RelationId>(r)));
  }
  return corpus;
}

}  // namespace kgctx
