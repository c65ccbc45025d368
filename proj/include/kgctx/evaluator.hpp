#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "kgctx/decoder_ranker.hpp"
#include "kgctx/io.hpp"
#include "kgctx/kg_store.hpp"

namespace kgctx {

/// Filtered rank of gold with mean-rank tie handling.
///
/// Filtered entities are removed from the candidate list. Every entity not
/// listed sits in one tie block at -inf below all listed candidates. The rank
/// is (# strictly better) + (size of gold's tie block + 1) / 2.
inline double filtered_rank(std::span<const Candidate> candidates, EntityId gold,
                            std::span<const EntityId> filter, std::size_t num_entities) {
  if (gold >= num_entities) throw LookupError("gold entity id " + std::to_string(gold) + " out of range");
  auto filtered = [&](EntityId e) { return std::binary_search(filter.begin(), filter.end(), e); };
  if (filtered(gold)) throw ValidationError("gold entity must not be in the filter set");

  std::size_t listed = 0;
  const Candidate* gold_entry = nullptr;
  for (const auto& c : candidates) {
    if (filtered(c.entity)) continue;
    ++listed;
    if (c.entity == gold) gold_entry = &c;
  }
  if (!gold_entry) {
    const double tied = static_cast<double>(num_entities - filter.size() - listed);
    return static_cast<double>(listed) + (tied + 1.0) / 2.0;
  }
  std::size_t better = 0, tied = 0;
  for (const auto& c : candidates) {
    if (filtered(c.entity)) continue;
    if (c.score > gold_entry->score) ++better;
    else if (c.score == gold_entry->score) ++tied;
  }
  return static_cast<double>(better) + (static_cast<double>(tied) + 1.0) / 2.0;
}

struct RankedQuery {
  Query query{};
  EntityId gold = 0;
  double rank = 0.0;
  std::size_t frequency = 0;  // train answers to the query
  std::size_t degree = 0;     // train degree of the query entity
};

struct MetricSummary {
  double mrr = 0.0, hits1 = 0.0, hits3 = 0.0, hits10 = 0.0;
  std::size_t count = 0;
};

/// Summation in input order, so results are reproducible bit for bit.
inline MetricSummary summarize(std::span<const RankedQuery> ranks) {
  MetricSummary s;
  s.count = ranks.size();
  if (ranks.empty()) return s;
  for (const auto& r : ranks) {
    s.mrr += 1.0 / r.rank;
    s.hits1 += r.rank <= 1.0 ? 1.0 : 0.0;
    s.hits3 += r.rank <= 3.0 ? 1.0 : 0.0;
    s.hits10 += r.rank <= 10.0 ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(ranks.size());
  s.mrr /= n;
  s.hits1 /= n;
  s.hits3 /= n;
  s.hits10 /= n;
  return s;
}

struct BucketStat {
  std::size_t count = 0;
  double mrr = 0.0;
};

/// MRR per query-frequency bucket {0, 1-10, >10}.
inline std::array<BucketStat, 3> bucket_by_frequency(std::span<const RankedQuery> ranks) {
  std::array<BucketStat, 3> out{};
  for (const auto& r : ranks) {
    auto& b = out[static_cast<std::size_t>(frequency_bucket(r.frequency))];
    ++b.count;
    b.mrr += 1.0 / r.rank;
  }
  for (auto& b : out) {
    if (b.count) b.mrr /= static_cast<double>(b.count);
  }
  return out;
}

struct DegreeBucket {
  double lower = 0.0;
  double upper = std::numeric_limits<double>::infinity();  // exclusive
  std::size_t count = 0;
  double weight = 0.0;
  double mrr = 0.0;
};

/// Buckets [0,e0), [e0,e1), ..., [e_last, inf) over query-entity degree; an
/// empty leading range (e0 <= 0) is dropped. Weight is the bucket's share of
/// queries.
inline std::vector<DegreeBucket> bucket_by_degree(std::span<const RankedQuery> ranks,
                                                  std::span<const double> edges) {
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (!(edges[i] > edges[i - 1])) throw ValidationError("degree bucket edges must be strictly increasing");
  }
  std::vector<DegreeBucket> buckets;
  double lo = 0.0;
  for (double e : edges) {
    if (e > lo) buckets.push_back({lo, e, 0, 0.0, 0.0});
    lo = std::max(lo, e);
    if (std::isinf(e)) break;
  }
  if (!std::isinf(lo)) buckets.push_back({lo, std::numeric_limits<double>::infinity(), 0, 0.0, 0.0});
  for (const auto& r : ranks) {
    const double d = static_cast<double>(r.degree);
    for (auto& b : buckets) {
      if (d >= b.lower && d < b.upper) {
        ++b.count;
        b.mrr += 1.0 / r.rank;
        break;
      }
    }
  }
  for (auto& b : buckets) {
    if (b.count) b.mrr /= static_cast<double>(b.count);
    b.weight = ranks.empty() ? 0.0 : static_cast<double>(b.count) / static_cast<double>(ranks.size());
  }
  return buckets;
}

/// Fraction of split triples whose object is a train neighbor of the subject.
inline double context_hit_rate(const KnowledgeGraph& kg, Split split) {
  if (split == Split::train) throw ValidationError("context hit rate is defined on valid or test");
  const auto& ts = kg.triples(split);
  if (ts.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& t : ts) {
    const auto adj = kg.adjacency(t.subject);
    if (std::any_of(adj.begin(), adj.end(), [&](const Neighbor& n) { return n.entity == t.object; })) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(ts.size());
}

struct EvalOptions {
  bool both_directions = true;
  bool macro_average = false;  // average per-direction metrics instead of pooling
  std::vector<double> degree_edges{1, 10, 100, 1000};
};

struct EvalReport {
  std::string split = "test";
  MetricSummary overall;
  std::array<BucketStat, 3> frequency_buckets{};
  std::vector<DegreeBucket> degree_buckets;
  double context_hit_rate = 0.0;
  std::size_t missing_predictions = 0;
  std::string fingerprint;
  std::vector<RankedQuery> ranks;
};

using PredictionMap = std::unordered_map<Query, RankedAnswerList, QueryHash>;

/// The (query, gold) pairs evaluated for a split: every triple's tail query,
/// plus its head query when both directions are on.
inline std::vector<std::pair<Query, EntityId>> evaluation_queries(const KnowledgeGraph& kg, Split split,
                                                                  bool both_directions) {
  std::vector<std::pair<Query, EntityId>> out;
  for (const auto& t : kg.triples(split)) {
    out.emplace_back(tail_query(t), t.object);
    if (both_directions) out.emplace_back(head_query(t), t.subject);
  }
  return out;
}

/// Ranks every evaluation query of the split against its filtered answer
/// set. A query without a prediction is ranked with an empty candidate list.
inline EvalReport evaluate(const KnowledgeGraph& kg, Split split, const PredictionMap& predictions,
                           const EvalOptions& opt = {}) {
  EvalReport report;
  report.split = to_string(split);
  const RankedAnswerList empty;
  for (const auto& [q, gold] : evaluation_queries(kg, split, opt.both_directions)) {
    auto it = predictions.find(q);
    const RankedAnswerList* list = &empty;
    if (it == predictions.end()) ++report.missing_predictions;
    else list = &it->second;
    const auto filter = filter_set(kg, q, gold);
    RankedQuery r;
    r.query = q;
    r.gold = gold;
    r.rank = filtered_rank(list->candidates, gold, filter, kg.num_entities());
    r.frequency = query_frequency(kg, q);
    r.degree = kg.degree(q.entity);
    report.ranks.push_back(r);
  }
  if (report.missing_predictions > 0) {
    log_warn(std::to_string(report.missing_predictions) + " query(ies) had no prediction; ranked pessimistically");
  }
  if (opt.macro_average && opt.both_directions) {
    std::vector<RankedQuery> tail, head;
    for (const auto& r : report.ranks) (r.query.direction == Direction::out ? tail : head).push_back(r);
    const auto a = summarize(tail), b = summarize(head);
    report.overall.mrr = (a.mrr + b.mrr) / 2.0;
    report.overall.hits1 = (a.hits1 + b.hits1) / 2.0;
    report.overall.hits3 = (a.hits3 + b.hits3) / 2.0;
    report.overall.hits10 = (a.hits10 + b.hits10) / 2.0;
    report.overall.count = report.ranks.size();
  } else {
    report.overall = summarize(report.ranks);
  }
  report.frequency_buckets = bucket_by_frequency(report.ranks);
  report.degree_buckets = bucket_by_degree(report.ranks, opt.degree_edges);
  if (split != Split::train) report.context_hit_rate = context_hit_rate(kg, split);
  return report;
}

// ---- serialization ---------------------------------------------------------

inline nlohmann::ordered_json to_json(const EvalReport& r, const KnowledgeGraph* kg = nullptr) {
  nlohmann::ordered_json j;
  j["split"] = r.split;
  j["fingerprint"] = r.fingerprint;
  j["query_count"] = r.overall.count;
  j["mrr"] = r.overall.mrr;
  j["hits@1"] = r.overall.hits1;
  j["hits@3"] = r.overall.hits3;
  j["hits@10"] = r.overall.hits10;
  j["missing_predictions"] = r.missing_predictions;
  j["context_hit_rate"] = r.context_hit_rate;
  auto& fb = j["frequency_buckets"];
  fb = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < 3; ++i) {
    fb.push_back({{"bucket", kFrequencyBucketNames[i]}, {"count", r.frequency_buckets[i].count},
                  {"mrr", r.frequency_buckets[i].mrr}});
  }
  auto& db = j["degree_buckets"];
  db = nlohmann::ordered_json::array();
  for (const auto& b : r.degree_buckets) {
    nlohmann::ordered_json e;
    e["lower"] = b.lower;
    if (std::isinf(b.upper)) e["upper"] = nullptr;
    else e["upper"] = b.upper;
    e["count"] = b.count;
    e["weight"] = b.weight;
    e["mrr"] = b.mrr;
    db.push_back(std::move(e));
  }
  auto& qs = j["queries"];
  qs = nlohmann::ordered_json::array();
  for (const auto& q : r.ranks) {
    nlohmann::ordered_json e;
    if (kg) {
      e["entity"] = kg->entity_name(q.query.entity);
      e["relation"] = kg->relation_name(q.query.relation);
      e["gold"] = kg->entity_name(q.gold);
    } else {
      e["entity"] = q.query.entity;
      e["relation"] = q.query.relation;
      e["gold"] = q.gold;
    }
    e["direction"] = to_string(q.query.direction);
    e["rank"] = q.rank;
    e["frequency"] = q.frequency;
    e["degree"] = q.degree;
    qs.push_back(std::move(e));
  }
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.split = j.at("split").get<std::string>();
  r.fingerprint = j.at("fingerprint").get<std::string>();
  r.overall.count = j.at("query_count").get<std::size_t>();
  r.overall.mrr = j.at("mrr").get<double>();
  r.overall.hits1 = j.at("hits@1").get<double>();
  r.overall.hits3 = j.at("hits@3").get<double>();
  r.overall.hits10 = j.at("hits@10").get<double>();
  r.missing_predictions = j.at("missing_predictions").get<std::size_t>();
  r.context_hit_rate = j.at("context_hit_rate").get<double>();
  const auto& fb = j.at("frequency_buckets");
  for (std::size_t i = 0; i < 3 && i < fb.size(); ++i) {
    r.frequency_buckets[i].count = fb[i].at("count").get<std::size_t>();
    r.frequency_buckets[i].mrr = fb[i].at("mrr").get<double>();
  }
  for (const auto& e : j.at("degree_buckets")) {
    DegreeBucket b;
    b.lower = e.at("lower").get<double>();
    b.upper = e.at("upper").is_null() ? std::numeric_limits<double>::infinity() : e.at("upper").get<double>();
    b.count = e.at("count").get<std::size_t>();
    b.weight = e.at("weight").get<double>();
    b.mrr = e.at("mrr").get<double>();
    r.degree_buckets.push_back(b);
  }
  if (j.contains("queries")) {
    for (const auto& e : j.at("queries")) {
      RankedQuery q;
      q.rank = e.at("rank").get<double>();
      q.frequency = e.at("frequency").get<std::size_t>();
      q.degree = e.at("degree").get<std::size_t>();
      q.query.direction = parse_direction(e.at("direction").get<std::string>());
      r.ranks.push_back(q);
    }
  }
  return r;
}

inline std::string format_bucket_label(const DegreeBucket& b) {
  std::ostringstream o;
  o << b.lower << '-';
  if (std::isinf(b.upper)) o << "inf";
  else o << b.upper;
  return o.str();
}

inline std::string degree_csv(std::span<const DegreeBucket> buckets) {
  std::ostringstream o;
  o << std::setprecision(17);
  o << "lower,upper,count,weight,mrr\n";
  for (const auto& b : buckets) {
    o << b.lower << ',';
    if (std::isinf(b.upper)) o << "inf";
    else o << b.upper;
    o << ',' << b.count << ',' << b.weight << ',' << b.mrr << '\n';
  }
  return o.str();
}

/// Bar chart of MRR per degree bucket with the bucket weight in brackets.
inline std::string degree_svg(std::span<const DegreeBucket> buckets, std::string_view title = "MRR by entity degree") {
  const int bar_w = 60, gap = 20, height = 240, top = 40, left = 50;
  const int width = left + static_cast<int>(buckets.size()) * (bar_w + gap) + gap;
  std::ostringstream o;
  o << std::fixed << std::setprecision(3);
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height + top + 60
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<text x=\"" << left << "\" y=\"20\" font-size=\"14\">" << title << "</text>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << top + height << "\" x2=\"" << width << "\" y2=\"" << top + height
    << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + height
    << "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const int y = top + height - tick * height / 4;
    o << "<text x=\"" << left - 30 << "\" y=\"" << y + 4 << "\">" << tick * 0.25 << "</text>\n";
  }
  for (std::size_t i = 0; i < buckets.size(); ++i) {
    const auto& b = buckets[i];
    const int x = left + gap + static_cast<int>(i) * (bar_w + gap);
    const int h = static_cast<int>(std::lround(b.mrr * height));
    o << "<rect x=\"" << x << "\" y=\"" << top + height - h << "\" width=\"" << bar_w << "\" height=\"" << h
      << "\" fill=\"#4878a8\"/>\n";
    o << "<text x=\"" << x << "\" y=\"" << top + height - h - 4 << "\">" << b.mrr << "</text>\n";
    o << "<text x=\"" << x << "\" y=\"" << top + height + 16 << "\">" << format_bucket_label(b) << "</text>\n";
    o << "<text x=\"" << x << "\" y=\"" << top + height + 32 << "\">(" << b.weight << ")</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace kgctx
