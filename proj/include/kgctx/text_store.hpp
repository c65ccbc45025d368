#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kgctx/io.hpp"
#include "kgctx/kg_store.hpp"

namespace kgctx {

/// Byte trie mapping exact strings to sorted id sets.
class MentionTrie {
 public:
  MentionTrie() { nodes_.emplace_back(); }

  void insert(std::string_view key, EntityId id) {
    std::uint32_t node = 0;
    for (unsigned char c : key) {
      auto& kids = nodes_[node].children;
      auto it = std::lower_bound(kids.begin(), kids.end(), c,
                                 [](const auto& kid, unsigned char b) { return kid.first < b; });
      if (it != kids.end() && it->first == c) {
        node = it->second;
      } else {
        const auto child = static_cast<std::uint32_t>(nodes_.size());
        kids.insert(it, {c, child});
        nodes_.emplace_back();
        node = child;
      }
    }
    auto& ids = nodes_[node].ids;
    auto pos = std::lower_bound(ids.begin(), ids.end(), id);
    if (pos == ids.end() || *pos != id) ids.insert(pos, id);
  }

  std::span<const EntityId> find(std::string_view key) const {
    std::uint32_t node = 0;
    for (unsigned char c : key) {
      const auto& kids = nodes_[node].children;
      auto it = std::lower_bound(kids.begin(), kids.end(), c,
                                 [](const auto& kid, unsigned char b) { return kid.first < b; });
      if (it == kids.end() || it->first != c) return {};
      node = it->second;
    }
    return nodes_[node].ids;
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<std::pair<unsigned char, std::uint32_t>> children;
    std::vector<EntityId> ids;
  };
  std::vector<Node> nodes_;
};

/// Canonical mentions for every entity and relation, optional entity
/// descriptions, and an exact-match mention index.
class TextStore {
 public:
  TextStore(std::vector<std::string> entity_mentions, std::vector<std::string> relation_mentions,
            std::vector<std::optional<std::string>> descriptions = {})
      : entity_mentions_(std::move(entity_mentions)),
        relation_mentions_(std::move(relation_mentions)),
        descriptions_(std::move(descriptions)) {
    descriptions_.resize(entity_mentions_.size());
    for (std::size_t e = 0; e < entity_mentions_.size(); ++e) {
      entity_mentions_[e] = std::string(trim(entity_mentions_[e]));
      if (entity_mentions_[e].empty()) {
        throw ValidationError("entity " + std::to_string(e) + " has an empty mention");
      }
      index_.insert(entity_mentions_[e], static_cast<EntityId>(e));
    }
    for (std::size_t r = 0; r < relation_mentions_.size(); ++r) {
      relation_mentions_[r] = std::string(trim(relation_mentions_[r]));
      if (relation_mentions_[r].empty()) {
        throw ValidationError("relation " + std::to_string(r) + " has an empty mention");
      }
    }
  }

  const std::string& entity_mention(EntityId e) const { return entity_mentions_.at(e); }
  const std::string& relation_mention(RelationId r) const { return relation_mentions_.at(r); }
  const std::optional<std::string>& description(EntityId e) const { return descriptions_.at(e); }
  bool has_descriptions() const {
    return std::any_of(descriptions_.begin(), descriptions_.end(),
                       [](const auto& d) { return d.has_value(); });
  }
  std::size_t num_entities() const { return entity_mentions_.size(); }
  std::size_t num_relations() const { return relation_mentions_.size(); }
  const MentionTrie& index() const { return index_; }

 private:
  std::vector<std::string> entity_mentions_;
  std::vector<std::string> relation_mentions_;
  std::vector<std::optional<std::string>> descriptions_;
  MentionTrie index_;
};

/// Exact mention lookup. Leading and trailing whitespace is the only
/// normalization; case and interior whitespace are significant.
inline std::span<const EntityId> resolve_mention(const TextStore& store, std::string_view text) {
  return store.index().find(trim(text));
}

namespace detail {

// Reads `id<TAB>text` rows keyed by KG id. Unknown ids warn, repeated ids
// keep the first row; returns one slot per KG id, unset where the file had
// no row.
template <typename Lookup>
std::vector<std::optional<std::string>> read_id_text(const std::filesystem::path& path,
                                                     std::size_t count, Lookup&& lookup) {
  std::vector<std::optional<std::string>> out(count);
  std::size_t unknown = 0, duplicate = 0;
  for_each_tsv_line(path, [&](const auto& fields, std::size_t line) {
    if (fields.size() != 2) {
      throw ParseError(path.string(), line,
                       "expected 2 tab-separated fields, got " + std::to_string(fields.size()));
    }
    auto id = lookup(fields[0]);
    if (!id) {
      ++unknown;
      return;
    }
    if (out[*id]) {
      ++duplicate;
      return;
    }
    out[*id] = std::string(fields[1]);
  });
  if (unknown > 0) {
    log_warn(path.string() + ": " + std::to_string(unknown) + " id(s) not present in the graph");
  }
  if (duplicate > 0) {
    log_warn(path.string() + ": " + std::to_string(duplicate) + " repeated id(s); kept the first row");
  }
  return out;
}

template <typename NameOf>
std::vector<std::string> require_all(std::vector<std::optional<std::string>> rows,
                                     const std::filesystem::path& path, NameOf&& name_of) {
  std::vector<std::string> out;
  out.reserve(rows.size());
  std::string missing;
  std::size_t n_missing = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i]) {
      if (n_missing < 20) missing += (n_missing ? ", " : "") + name_of(i);
      ++n_missing;
      out.emplace_back();
    } else {
      out.push_back(std::move(*rows[i]));
    }
  }
  if (n_missing > 0) {
    throw ValidationError(path.string() + ": missing mention for " + std::to_string(n_missing) +
                          " id(s): " + missing + (n_missing > 20 ? ", ..." : ""));
  }
  return out;
}

}  // namespace detail

inline TextStore load_text(const KnowledgeGraph& kg, const std::filesystem::path& entity_mentions,
                           const std::filesystem::path& relation_mentions,
                           const std::optional<std::filesystem::path>& descriptions = std::nullopt) {
  auto ents = detail::require_all(
      detail::read_id_text(entity_mentions, kg.num_entities(),
                           [&](std::string_view id) { return kg.find_entity(id); }),
      entity_mentions, [&](std::size_t i) { return kg.entity_name(static_cast<EntityId>(i)); });
  auto rels = detail::require_all(
      detail::read_id_text(relation_mentions, kg.num_relations(),
                           [&](std::string_view id) { return kg.find_relation(id); }),
      relation_mentions, [&](std::size_t i) { return kg.relation_name(static_cast<RelationId>(i)); });
  std::vector<std::optional<std::string>> descs;
  if (descriptions) {
    descs = detail::read_id_text(*descriptions, kg.num_entities(),
                                 [&](std::string_view id) { return kg.find_entity(id); });
    for (auto& d : descs) {
      if (d) {
        auto t = trim(*d);
        d = t.empty() ? std::nullopt : std::optional<std::string>(std::string(t));
      }
    }
  }
  return TextStore(std::move(ents), std::move(rels), std::move(descs));
}

}  // namespace kgctx
