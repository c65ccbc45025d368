#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "kgctx/io.hpp"
#include "kgctx/rng.hpp"

namespace kgctx {

using EntityId = std::uint32_t;
using RelationId = std::uint32_t;

enum class Direction : std::uint8_t { out = 0, in = 1 };
enum class Split : std::uint8_t { train = 0, valid = 1, test = 2 };

inline constexpr std::array<Split, 3> kAllSplits{Split::train, Split::valid, Split::test};

inline const char* to_string(Direction d) { return d == Direction::out ? "out" : "in"; }
inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    default: return "test";
  }
}

inline Direction parse_direction(std::string_view s) {
  if (s == "out" || s == "tail") return Direction::out;
  if (s == "in" || s == "head") return Direction::in;
  throw UsageError("direction must be 'out' or 'in', got '" + std::string(s) + "'");
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  throw UsageError("split must be train, valid or test, got '" + std::string(s) + "'");
}

struct Triple {
  EntityId subject;
  RelationId relation;
  EntityId object;
  friend bool operator==(const Triple&, const Triple&) = default;
  friend auto operator<=>(const Triple&, const Triple&) = default;
};

/// One adjacency entry as seen from the owning entity.
struct Neighbor {
  RelationId relation;
  EntityId entity;
  Direction direction;
  friend bool operator==(const Neighbor&, const Neighbor&) = default;
  friend auto operator<=>(const Neighbor&, const Neighbor&) = default;
};

/// A directed link-prediction query: (entity, relation, ?) for out,
/// (?, relation, entity) for in.
struct Query {
  EntityId entity;
  RelationId relation;
  Direction direction;
  friend bool operator==(const Query&, const Query&) = default;
};

struct QueryHash {
  std::size_t operator()(const Query& q) const noexcept {
    return static_cast<std::size_t>(
        mix64((std::uint64_t{q.entity} << 32) ^ (std::uint64_t{q.relation} << 1) ^
              static_cast<std::uint64_t>(q.direction)));
  }
};

/// Tail query for (s,r,o) is (s,r,out) with gold o; head query is (o,r,in) with gold s.
inline Query tail_query(const Triple& t) { return {t.subject, t.relation, Direction::out}; }
inline Query head_query(const Triple& t) { return {t.object, t.relation, Direction::in}; }

/// Immutable triple store. Adjacency, degrees and query frequencies are built
/// from train triples only; the answer index covers every split.
class KnowledgeGraph {
 public:
  using NamedTriple = std::array<std::string, 3>;

  /// Builds a graph from string triples per split. Ids are assigned in
  /// first-seen order walking train, then valid, then test. Duplicate triples
  /// within a split are collapsed with a warning.
  static KnowledgeGraph from_named(const std::array<std::vector<NamedTriple>, 3>& splits) {
    KnowledgeGraph kg;
    for (auto split : kAllSplits) {
      const auto& src = splits[static_cast<std::size_t>(split)];
      auto& dst = kg.triples_[static_cast<std::size_t>(split)];
      dst.reserve(src.size());
      for (const auto& t : src) {
        dst.push_back({kg.intern_entity(t[0]), kg.intern_relation(t[1]), kg.intern_entity(t[2])});
      }
    }
    kg.finalize();
    return kg;
  }

  std::size_t num_entities() const { return entity_names_.size(); }
  std::size_t num_relations() const { return relation_names_.size(); }

  const std::string& entity_name(EntityId e) const { return entity_names_.at(e); }
  const std::string& relation_name(RelationId r) const { return relation_names_.at(r); }
  const std::vector<std::string>& entity_names() const { return entity_names_; }
  const std::vector<std::string>& relation_names() const { return relation_names_; }

  std::optional<EntityId> find_entity(std::string_view name) const {
    auto it = entity_index_.find(std::string(name));
    if (it == entity_index_.end()) return std::nullopt;
    return it->second;
  }
  std::optional<RelationId> find_relation(std::string_view name) const {
    auto it = relation_index_.find(std::string(name));
    if (it == relation_index_.end()) return std::nullopt;
    return it->second;
  }
  EntityId entity_id(std::string_view name) const {
    if (auto id = find_entity(name)) return *id;
    throw LookupError("unknown entity '" + std::string(name) + "'");
  }
  RelationId relation_id(std::string_view name) const {
    if (auto id = find_relation(name)) return *id;
    throw LookupError("unknown relation '" + std::string(name) + "'");
  }

  const std::vector<Triple>& triples(Split s) const {
    return triples_[static_cast<std::size_t>(s)];
  }

  std::span<const Neighbor> adjacency(EntityId e) const {
    check_entity(e);
    return {adjacency_.data() + adj_offsets_[e], adj_offsets_[e + 1] - adj_offsets_[e]};
  }

  std::size_t degree(EntityId e) const {
    check_entity(e);
    return adj_offsets_[e + 1] - adj_offsets_[e];
  }

  /// Sorted answers to a directed query within one split (empty if none).
  std::span<const EntityId> answers(Split s, const Query& q) const {
    const auto& index = answer_index_[static_cast<std::size_t>(s)];
    auto it = index.find(q);
    if (it == index.end()) return {};
    return it->second;
  }

  void check_entity(EntityId e) const {
    if (e >= entity_names_.size()) throw LookupError("entity id " + std::to_string(e) + " out of range");
  }
  void check_relation(RelationId r) const {
    if (r >= relation_names_.size()) {
      throw LookupError("relation id " + std::to_string(r) + " out of range");
    }
  }

  /// Serializes one split in the loader's TSV format.
  std::string to_tsv(Split s) const {
    std::string out;
    for (const auto& t : triples(s)) {
      out += entity_names_[t.subject];
      out += '\t';
      out += relation_names_[t.relation];
      out += '\t';
      out += entity_names_[t.object];
      out += '\n';
    }
    return out;
  }

 private:
  EntityId intern_entity(const std::string& name) {
    auto [it, inserted] = entity_index_.try_emplace(name, static_cast<EntityId>(entity_names_.size()));
    if (inserted) entity_names_.push_back(name);
    return it->second;
  }
  RelationId intern_relation(const std::string& name) {
    auto [it, inserted] =
        relation_index_.try_emplace(name, static_cast<RelationId>(relation_names_.size()));
    if (inserted) relation_names_.push_back(name);
    return it->second;
  }

  void finalize() {
    for (auto split : kAllSplits) {
      auto& ts = triples_[static_cast<std::size_t>(split)];
      std::vector<Triple> sorted = ts;
      std::sort(sorted.begin(), sorted.end());
      if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
        // Keep the first occurrence so file order is preserved.
        std::vector<Triple> unique;
        unique.reserve(ts.size());
        std::size_t dropped = 0;
        std::unordered_map<std::uint64_t, std::vector<Triple>> buckets;
        for (const auto& t : ts) {
          auto key = mix64((std::uint64_t{t.subject} << 32) ^ t.object) ^ t.relation;
          auto& bucket = buckets[key];
          if (std::find(bucket.begin(), bucket.end(), t) != bucket.end()) {
            ++dropped;
            continue;
          }
          bucket.push_back(t);
          unique.push_back(t);
        }
        log_warn("collapsed " + std::to_string(dropped) + " duplicate triple(s) in " +
                 to_string(split) + " split");
        ts = std::move(unique);
      }
    }
    if (triples(Split::train).empty()) throw ValidationError("train split is empty");

    const auto n = entity_names_.size();
    std::vector<std::size_t> counts(n, 0);
    for (const auto& t : triples(Split::train)) {
      ++counts[t.subject];
      ++counts[t.object];
    }
    adj_offsets_.assign(n + 1, 0);
    for (std::size_t e = 0; e < n; ++e) adj_offsets_[e + 1] = adj_offsets_[e] + counts[e];
    adjacency_.resize(adj_offsets_[n]);
    std::vector<std::size_t> cursor(adj_offsets_.begin(), adj_offsets_.end() - 1);
    for (const auto& t : triples(Split::train)) {
      adjacency_[cursor[t.subject]++] = {t.relation, t.object, Direction::out};
      adjacency_[cursor[t.object]++] = {t.relation, t.subject, Direction::in};
    }
    if (adjacency_.size() != 2 * triples(Split::train).size()) {
      throw ValidationError("degree sum does not equal twice the train triple count");
    }

    for (auto split : kAllSplits) {
      auto& index = answer_index_[static_cast<std::size_t>(split)];
      for (const auto& t : triples(split)) {
        index[tail_query(t)].push_back(t.object);
        index[head_query(t)].push_back(t.subject);
      }
      for (auto& [_, v] : index) {
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
      }
    }
  }

  std::vector<std::string> entity_names_;
  std::vector<std::string> relation_names_;
  std::unordered_map<std::string, EntityId> entity_index_;
  std::unordered_map<std::string, RelationId> relation_index_;
  std::array<std::vector<Triple>, 3> triples_;
  std::vector<std::size_t> adj_offsets_;
  std::vector<Neighbor> adjacency_;
  std::array<std::unordered_map<Query, std::vector<EntityId>, QueryHash>, 3> answer_index_;
};

/// Reads a TSV triple file. Every non-empty line must have exactly three
/// tab-separated fields.
inline std::vector<KnowledgeGraph::NamedTriple> read_triples(const std::filesystem::path& path) {
  std::vector<KnowledgeGraph::NamedTriple> out;
  for_each_tsv_line(path, [&](const auto& fields, std::size_t line) {
    if (fields.size() != 3) {
      throw ParseError(path.string(), line,
                       "expected 3 tab-separated fields, got " + std::to_string(fields.size()));
    }
    for (auto f : fields) {
      if (f.empty()) throw ParseError(path.string(), line, "empty field");
    }
    out.push_back({std::string(fields[0]), std::string(fields[1]), std::string(fields[2])});
  });
  return out;
}

inline KnowledgeGraph load_kg(const std::filesystem::path& train, const std::filesystem::path& valid,
                              const std::filesystem::path& test) {
  return KnowledgeGraph::from_named({read_triples(train), read_triples(valid), read_triples(test)});
}

/// Samples up to k adjacency entries of `entity` uniformly without
/// replacement. When degree <= k the whole list is returned in seeded random
/// order. Entries equal to any of `exclude` are removed before sampling.
inline std::vector<Neighbor> neighborhood(const KnowledgeGraph& kg, EntityId entity, std::size_t k,
                                          std::uint64_t seed,
                                          std::span<const Neighbor> exclude = {}) {
  auto adj = kg.adjacency(entity);
  std::vector<Neighbor> pool;
  pool.reserve(adj.size());
  for (const auto& n : adj) {
    if (std::find(exclude.begin(), exclude.end(), n) == exclude.end()) pool.push_back(n);
  }
  const std::size_t take = std::min(k, pool.size());
  Rng rng(seed);
  // Partial Fisher-Yates: the first `take` slots are a uniform sample.
  for (std::size_t i = 0; i < take; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(take);
  return pool;
}

/// Adjacency entries contributed by triple t to the list of `query_entity`.
/// Used to keep a training example's own edge out of its context.
inline std::vector<Neighbor> own_edges(const Triple& t, EntityId query_entity) {
  std::vector<Neighbor> out;
  if (t.subject == query_entity) out.push_back({t.relation, t.object, Direction::out});
  if (t.object == query_entity) out.push_back({t.relation, t.subject, Direction::in});
  return out;
}

/// Number of train answers to a directed query.
inline std::size_t query_frequency(const KnowledgeGraph& kg, const Query& q) {
  kg.check_entity(q.entity);
  kg.check_relation(q.relation);
  return kg.answers(Split::train, q).size();
}

enum class FrequencyBucket : std::uint8_t { zero = 0, low = 1, high = 2 };
inline constexpr std::array<const char*, 3> kFrequencyBucketNames{"0", "1-10", ">10"};

inline FrequencyBucket frequency_bucket(std::size_t count) {
  if (count == 0) return FrequencyBucket::zero;
  if (count <= 10) return FrequencyBucket::low;
  return FrequencyBucket::high;
}

/// All known answers to the query across train, valid and test, minus gold.
/// Returned sorted.
inline std::vector<EntityId> filter_set(const KnowledgeGraph& kg, const Query& q, EntityId gold) {
  std::vector<EntityId> out;
  for (auto s : kAllSplits) {
    auto a = kg.answers(s, q);
    out.insert(out.end(), a.begin(), a.end());
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  out.erase(std::remove(out.begin(), out.end(), gold), out.end());
  return out;
}

}  // namespace kgctx
