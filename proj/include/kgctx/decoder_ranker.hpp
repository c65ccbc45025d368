#pragma once

#include <algorithm>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "kgctx/kg_store.hpp"
#include "kgctx/model.hpp"
#include "kgctx/text_store.hpp"
#include "kgctx/tokenizer.hpp"

namespace kgctx {

struct Candidate {
  EntityId entity;
  double score;
  friend bool operator==(const Candidate&, const Candidate&) = default;
};

/// Candidates sorted by score descending, ties by entity id ascending; each
/// entity at most once.
struct RankedAnswerList {
  Query query{};
  std::vector<Candidate> candidates;
  std::size_t raw_samples = 0;
  std::size_t matched_samples = 0;
};

inline void sort_candidates(std::vector<Candidate>& c) {
  std::sort(c.begin(), c.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.entity < b.entity;
  });
}

enum class Aggregation : std::uint8_t {
  max,        // best log-prob among samples mapping to the entity
  frequency,  // number of samples mapping to the entity
};

inline Aggregation parse_aggregation(std::string_view s) {
  if (s == "max") return Aggregation::max;
  if (s == "frequency") return Aggregation::frequency;
  throw UsageError("aggregation must be 'max' or 'frequency'");
}
inline const char* to_string(Aggregation a) { return a == Aggregation::max ? "max" : "frequency"; }

struct DecodedSample {
  std::string text;
  double log_prob;
};

/// Maps decoded strings to entities by exact mention. Strings matching no
/// mention are dropped; an ambiguous mention credits every matching entity.
inline RankedAnswerList rank_samples(const TextStore& store, const Query& query,
                                     std::span<const DecodedSample> samples,
                                     Aggregation aggregation = Aggregation::max) {
  RankedAnswerList out;
  out.query = query;
  out.raw_samples = samples.size();
  std::map<EntityId, double> best;
  for (const auto& s : samples) {
    auto ids = resolve_mention(store, s.text);
    if (ids.empty()) continue;
    ++out.matched_samples;
    for (auto e : ids) {
      auto [it, inserted] = best.try_emplace(e, aggregation == Aggregation::max ? s.log_prob : 1.0);
      if (inserted) continue;
      if (aggregation == Aggregation::max) it->second = std::max(it->second, s.log_prob);
      else it->second += 1.0;
    }
  }
  out.candidates.reserve(best.size());
  for (const auto& [e, score] : best) out.candidates.push_back({e, score});
  sort_candidates(out.candidates);
  return out;
}

struct PredictOptions {
  std::size_t samples = 500;
  double temperature = 1.0;
  Aggregation aggregation = Aggregation::max;
};

/// Samples from the decoder, decodes to text, keeps only strings that are
/// entity mentions, and ranks entities by their best sample log-prob.
template <typename Scalar>
RankedAnswerList predict(const Seq2SeqModel<Scalar>& model, const TextStore& store,
                         const SubwordVocab& vocab, const Query& query, std::string_view input_text,
                         const PredictOptions& opt, std::uint64_t seed) {
  if (opt.samples == 0) throw ValidationError("need at least one sample");
  const auto source = vocab.encode(input_text);
  auto raw = model.sample(source, opt.samples, opt.temperature, seed);
  std::vector<DecodedSample> decoded;
  decoded.reserve(raw.size());
  for (const auto& s : raw) decoded.push_back({vocab.decode(s.ids), s.log_prob});
  return rank_samples(store, query, decoded, opt.aggregation);
}

/// Exact log-prob of every candidate's mention as the target. Exhaustive, so
/// only usable on small candidate sets; serves as the ranking oracle.
template <typename Scalar>
std::vector<Candidate> score_all_oracle(const Seq2SeqModel<Scalar>& model, const TextStore& store,
                                        const SubwordVocab& vocab, std::string_view input_text,
                                        std::span<const EntityId> candidates) {
  const auto source = vocab.encode(input_text);
  std::vector<std::vector<TokenId>> targets;
  targets.reserve(candidates.size());
  for (auto e : candidates) targets.push_back(vocab.encode(store.entity_mention(e)));
  const auto scores = model.sequence_log_probs(source, targets);
  std::vector<Candidate> out;
  out.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) out.push_back({candidates[i], scores[i]});
  return out;
}

}  // namespace kgctx
