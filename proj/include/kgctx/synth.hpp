#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "kgctx/io.hpp"
#include "kgctx/kg_store.hpp"
#include "kgctx/rng.hpp"
#include "kgctx/text_store.hpp"

namespace kgctx {

enum class MentionScheme : std::uint8_t { pseudoword, numbered };

inline MentionScheme parse_mention_scheme(std::string_view s) {
  if (s == "pseudoword") return MentionScheme::pseudoword;
  if (s == "numbered") return MentionScheme::numbered;
  throw UsageError("mention scheme must be 'pseudoword' or 'numbered'");
}

/// Parameters of a synthetic graph built from "twin" relation pairs.
///
/// Relations 2j and 2j+1 form a twin pair: whenever (s, a_j, o) is a fact so
/// is (s, b_j, o). With an odd relation count the last relation is a noise
/// relation with random edges. Held-out triples are a_j facts; for a
/// `context_fraction` share of them the twin edge stays in train (the answer
/// is a one-hop neighbor of the query entity), for the rest the twin is
/// dropped and subject and answer are not adjacent in train.
struct SynthSpec {
  std::size_t entities = 300;
  std::size_t relations = 7;
  double context_fraction = 0.07;
  double fact_probability = 0.5;  // per entity and twin pair
  std::size_t noise_edges = 1;    // per entity, on the noise relation
  std::size_t valid_size = 100;
  std::size_t test_size = 100;
  MentionScheme mentions = MentionScheme::pseudoword;
  bool descriptions = false;
};

struct SynthData {
  std::array<std::vector<KnowledgeGraph::NamedTriple>, 3> splits;
  std::vector<std::pair<std::string, std::string>> entity_mentions;    // id, text
  std::vector<std::pair<std::string, std::string>> relation_mentions;  // id, text
  std::vector<std::pair<std::string, std::string>> descriptions;       // id, text
};

namespace detail {

inline std::string pseudoword(Rng& rng, std::size_t syllables) {
  static constexpr std::string_view consonants = "bdfgklmnprstvz";
  static constexpr std::string_view vowels = "aeiou";
  std::string w;
  for (std::size_t i = 0; i < syllables; ++i) {
    w += consonants[rng.below(consonants.size())];
    w += vowels[rng.below(vowels.size())];
  }
  return w;
}

inline std::vector<std::string> unique_words(Rng& rng, std::size_t n, std::size_t syllables) {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  while (out.size() < n) {
    auto w = pseudoword(rng, syllables);
    if (seen.insert(w).second) out.push_back(std::move(w));
  }
  return out;
}

inline std::string padded_id(char prefix, std::size_t i, std::size_t width) {
  auto digits = std::to_string(i);
  return std::string(1, prefix) + std::string(width > digits.size() ? width - digits.size() : 0, '0') + digits;
}

}  // namespace detail

inline SynthData generate_synthetic_kg(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.context_fraction < 0.0 || spec.context_fraction > 1.0) {
    throw ValidationError("context fraction must be in [0, 1]");
  }
  if (spec.entities < 2) throw ValidationError("need at least two entities");
  if (spec.relations == 0) throw ValidationError("need at least one relation");
  const std::size_t pairs = spec.relations / 2;
  const bool has_noise = spec.relations % 2 == 1;
  if (pairs == 0 && spec.valid_size + spec.test_size > 0) {
    throw ValidationError("infeasible spec: held-out triples need at least one twin relation pair");
  }

  Rng rng(derive_seed(seed, {0x73796e74ULL}));
  SynthData out;
  const std::size_t ew = std::to_string(spec.entities).size();
  const std::size_t rw = std::to_string(spec.relations).size();

  auto words = detail::unique_words(rng, spec.entities + spec.relations, 3);
  for (std::size_t e = 0; e < spec.entities; ++e) {
    std::string text = spec.mentions == MentionScheme::pseudoword ? words[e] : "entity " + std::to_string(e);
    out.entity_mentions.emplace_back(detail::padded_id('E', e, ew), text);
    if (spec.descriptions) {
      out.descriptions.emplace_back(detail::padded_id('E', e, ew), "a synthetic entity called " + text);
    }
  }
  for (std::size_t r = 0; r < spec.relations; ++r) {
    std::string text = spec.mentions == MentionScheme::pseudoword ? "has " + words[spec.entities + r]
                                                                  : "relation " + std::to_string(r);
    out.relation_mentions.emplace_back(detail::padded_id('R', r, rw), text);
  }

  struct Fact {
    std::size_t s, pair, o;
  };
  std::vector<Fact> facts;
  for (std::size_t s = 0; s < spec.entities; ++s) {
    for (std::size_t j = 0; j < pairs; ++j) {
      if (!rng.bernoulli(spec.fact_probability)) continue;
      std::size_t o = rng.below(spec.entities - 1);
      if (o >= s) ++o;
      facts.push_back({s, j, o});
    }
  }
  std::vector<std::array<std::size_t, 3>> noise;
  if (has_noise) {
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (std::size_t s = 0; s < spec.entities; ++s) {
      for (std::size_t k = 0; k < spec.noise_edges; ++k) {
        std::size_t o = rng.below(spec.entities - 1);
        if (o >= s) ++o;
        if (seen.insert({s, o}).second) noise.push_back({s, spec.relations - 1, o});
      }
    }
  }

  // Undirected train adjacency counts between entity pairs, to keep
  // non-informative held-out answers out of the query entity's neighborhood.
  std::multiset<std::pair<std::size_t, std::size_t>> links;
  auto key = [](std::size_t a, std::size_t b) { return std::make_pair(std::min(a, b), std::max(a, b)); };
  for (const auto& f : facts) {
    links.insert(key(f.s, f.o));
    links.insert(key(f.s, f.o));
  }
  for (const auto& n : noise) links.insert(key(n[0], n[2]));

  std::vector<std::size_t> order(facts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  enum class Role : std::uint8_t { train, informative, blind };
  std::vector<Role> role(facts.size(), Role::train);
  std::vector<int> split_of(facts.size(), 0);
  std::size_t cursor = 0;
  for (int split = 1; split <= 2; ++split) {
    const std::size_t n = split == 1 ? spec.valid_size : spec.test_size;
    const auto n_inf = static_cast<std::size_t>(std::llround(spec.context_fraction * static_cast<double>(n)));
    std::size_t have_inf = 0, have_blind = 0;
    while (have_inf + have_blind < n) {
      if (cursor >= order.size()) {
        throw ValidationError("infeasible spec: not enough facts to fill the held-out splits");
      }
      const auto i = order[cursor++];
      const auto& f = facts[i];
      if (have_inf < n_inf) {
        role[i] = Role::informative;
        split_of[i] = split;
        ++have_inf;
        // the a-edge leaves train; the twin keeps subject and answer linked
        links.erase(links.find(key(f.s, f.o)));
        continue;
      }
      // blind: both twin edges leave train; no other link may remain
      if (links.count(key(f.s, f.o)) != 2) continue;
      links.erase(links.find(key(f.s, f.o)));
      links.erase(links.find(key(f.s, f.o)));
      role[i] = Role::blind;
      split_of[i] = split;
      ++have_blind;
    }
  }

  const auto& ents = out.entity_mentions;
  const auto& rels = out.relation_mentions;
  auto named = [&](std::size_t s, std::size_t r, std::size_t o) {
    return KnowledgeGraph::NamedTriple{ents[s].first, rels[r].first, ents[o].first};
  };
  for (std::size_t i = 0; i < facts.size(); ++i) {
    const auto& f = facts[i];
    const std::size_t a = 2 * f.pair, b = 2 * f.pair + 1;
    switch (role[i]) {
      case Role::train:
        out.splits[0].push_back(named(f.s, a, f.o));
        out.splits[0].push_back(named(f.s, b, f.o));
        break;
      case Role::informative:
        out.splits[0].push_back(named(f.s, b, f.o));
        out.splits[static_cast<std::size_t>(split_of[i])].push_back(named(f.s, a, f.o));
        break;
      case Role::blind:
        out.splits[static_cast<std::size_t>(split_of[i])].push_back(named(f.s, a, f.o));
        break;
    }
  }
  for (const auto& n : noise) out.splits[0].push_back(named(n[0], n[1], n[2]));
  return out;
}

inline std::string mention_tsv(const std::vector<std::pair<std::string, std::string>>& rows) {
  std::string out;
  for (const auto& [id, text] : rows) out += id + '\t' + text + '\n';
  return out;
}

inline std::string triples_tsv(const std::vector<KnowledgeGraph::NamedTriple>& rows) {
  std::string out;
  for (const auto& t : rows) out += t[0] + '\t' + t[1] + '\t' + t[2] + '\n';
  return out;
}

/// Writes train/valid/test TSVs and mention files into dir.
inline void write_synthetic_kg(const SynthData& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / "train.tsv", triples_tsv(data.splits[0]));
  write_file_atomic(dir / "valid.tsv", triples_tsv(data.splits[1]));
  write_file_atomic(dir / "test.tsv", triples_tsv(data.splits[2]));
  write_file_atomic(dir / "entity_mentions.tsv", mention_tsv(data.entity_mentions));
  write_file_atomic(dir / "relation_mentions.tsv", mention_tsv(data.relation_mentions));
  if (!data.descriptions.empty()) write_file_atomic(dir / "descriptions.tsv", mention_tsv(data.descriptions));
}

/// In-memory graph and text store for generated data.
inline std::pair<KnowledgeGraph, TextStore> materialize(const SynthData& data) {
  auto kg = KnowledgeGraph::from_named(data.splits);
  std::vector<std::string> em(kg.num_entities()), rm(kg.num_relations());
  std::vector<std::optional<std::string>> desc(kg.num_entities());
  for (const auto& [id, text] : data.entity_mentions) {
    if (auto e = kg.find_entity(id)) em[*e] = text;
  }
  for (const auto& [id, text] : data.relation_mentions) {
    if (auto r = kg.find_relation(id)) rm[*r] = text;
  }
  for (const auto& [id, text] : data.descriptions) {
    if (auto e = kg.find_entity(id)) desc[*e] = text;
  }
  TextStore store(std::move(em), std::move(rm), std::move(desc));
  return {std::move(kg), std::move(store)};
}

}  // namespace kgctx
