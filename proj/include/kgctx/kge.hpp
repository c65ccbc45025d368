#pragma once

#include <cmath>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "kgctx/decoder_ranker.hpp"
#include "kgctx/io.hpp"
#include "kgctx/kg_store.hpp"
#include "kgctx/rng.hpp"

namespace kgctx {

/// ComplEx embeddings. Each row stores the real parts followed by the
/// imaginary parts: [re_0 .. re_{d-1}, im_0 .. im_{d-1}].
class ComplExModel {
 public:
  ComplExModel(std::size_t num_entities, std::size_t num_relations, std::size_t dim)
      : dim_(dim), entities_(num_entities * 2 * dim, 0.0), relations_(num_relations * 2 * dim, 0.0) {
    if (dim == 0) throw ValidationError("ComplEx dimension must be positive");
  }

  std::size_t dim() const { return dim_; }
  std::size_t num_entities() const { return entities_.size() / (2 * dim_); }
  std::size_t num_relations() const { return relations_.size() / (2 * dim_); }

  std::span<double> entity(EntityId e) { return {entities_.data() + e * 2 * dim_, 2 * dim_}; }
  std::span<const double> entity(EntityId e) const { return {entities_.data() + e * 2 * dim_, 2 * dim_}; }
  std::span<double> relation(RelationId r) { return {relations_.data() + r * 2 * dim_, 2 * dim_}; }
  std::span<const double> relation(RelationId r) const {
    return {relations_.data() + r * 2 * dim_, 2 * dim_};
  }
  std::vector<double>& entity_table() { return entities_; }
  std::vector<double>& relation_table() { return relations_; }
  const std::vector<double>& entity_table() const { return entities_; }
  const std::vector<double>& relation_table() const { return relations_; }

  friend bool operator==(const ComplExModel&, const ComplExModel&) = default;

 private:
  std::size_t dim_;
  std::vector<double> entities_;
  std::vector<double> relations_;
};

/// Re(sum_k s_k * r_k * conj(o_k)).
inline double complex_score(std::span<const double> s, std::span<const double> r, std::span<const double> o) {
  const std::size_t d = s.size() / 2;
  double total = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    const double sr = s[k], si = s[d + k], rr = r[k], ri = r[d + k], orr = o[k], oi = o[d + k];
    total += sr * rr * orr + si * rr * oi + sr * ri * oi - si * ri * orr;
  }
  return total;
}

inline double complex_score(const ComplExModel& m, EntityId s, RelationId r, EntityId o) {
  return complex_score(m.entity(s), m.relation(r), m.entity(o));
}

struct KgeOptions {
  std::size_t dim = 64;
  std::size_t epochs = 50;
  std::size_t negatives = 50;
  double learning_rate = 0.1;
  double init_scale = 1e-1;
  double l2 = 0.0;
  std::uint64_t seed = 0;
};

namespace detail {

// Adds step * d score / d (s, r, o) into the given gradient slices.
inline void complex_score_grad(std::span<const double> s, std::span<const double> r, std::span<const double> o,
                               double step, std::span<double> gs, std::span<double> gr, std::span<double> go) {
  const std::size_t d = s.size() / 2;
  for (std::size_t k = 0; k < d; ++k) {
    const double sr = s[k], si = s[d + k], rr = r[k], ri = r[d + k], orr = o[k], oi = o[d + k];
    gs[k] += step * (rr * orr + ri * oi);
    gs[d + k] += step * (rr * oi - ri * orr);
    gr[k] += step * (sr * orr + si * oi);
    gr[d + k] += step * (sr * oi - si * orr);
    go[k] += step * (sr * rr - si * ri);
    go[d + k] += step * (si * rr + sr * ri);
  }
}

}  // namespace detail

inline ComplExModel init_kge(const KnowledgeGraph& kg, const KgeOptions& opt) {
  ComplExModel m(kg.num_entities(), kg.num_relations(), opt.dim);
  Rng rng(derive_seed(opt.seed, {0x6b6765ULL}));
  for (auto& v : m.entity_table()) v = rng.normal() * opt.init_scale;
  for (auto& v : m.relation_table()) v = rng.normal() * opt.init_scale;
  return m;
}

/// Negative-sampling training: for each train triple and each direction, a
/// softmax cross-entropy over the true answer and `negatives` uniformly drawn
/// entities, optimized with Adagrad. Returns the model; the per-epoch mean
/// loss is appended to `losses` when given.
inline ComplExModel train_kge(const KnowledgeGraph& kg, const KgeOptions& opt,
                              std::vector<double>* losses = nullptr) {
  ComplExModel m = init_kge(kg, opt);
  const std::size_t w = 2 * opt.dim;
  std::vector<double> acc_e(m.entity_table().size(), 1e-10), acc_r(m.relation_table().size(), 1e-10);
  const auto& train = kg.triples(Split::train);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<EntityId> cand(opt.negatives + 1);
  std::vector<double> scores(opt.negatives + 1), probs(opt.negatives + 1);
  std::vector<double> g_query(w), g_rel(w), g_cand((opt.negatives + 1) * w);

  auto adagrad = [&](std::span<double> p, std::span<double> acc, std::span<const double> g) {
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = g[k] + opt.l2 * p[k];
      acc[k] += gk * gk;
      p[k] -= opt.learning_rate * gk / std::sqrt(acc[k]);
    }
  };

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    Rng rng(derive_seed(opt.seed, {epoch}));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double total = 0.0;
    for (auto idx : order) {
      const auto& t = train[idx];
      for (int dir = 0; dir < 2; ++dir) {
        const bool tail = dir == 0;
        const EntityId anchor = tail ? t.subject : t.object;
        cand[0] = tail ? t.object : t.subject;
        for (std::size_t n = 1; n <= opt.negatives; ++n) cand[n] = static_cast<EntityId>(rng.below(kg.num_entities()));
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t n = 0; n < cand.size(); ++n) {
          scores[n] = tail ? complex_score(m, anchor, t.relation, cand[n]) : complex_score(m, cand[n], t.relation, anchor);
          mx = std::max(mx, scores[n]);
        }
        double sum = 0.0;
        for (std::size_t n = 0; n < cand.size(); ++n) sum += (probs[n] = std::exp(scores[n] - mx));
        for (auto& p : probs) p /= sum;
        total += -std::log(probs[0]);
        std::fill(g_query.begin(), g_query.end(), 0.0);
        std::fill(g_rel.begin(), g_rel.end(), 0.0);
        std::fill(g_cand.begin(), g_cand.end(), 0.0);
        for (std::size_t n = 0; n < cand.size(); ++n) {
          const double coef = probs[n] - (n == 0 ? 1.0 : 0.0);
          std::span<double> gc(g_cand.data() + n * w, w);
          if (tail) detail::complex_score_grad(m.entity(anchor), m.relation(t.relation), m.entity(cand[n]), coef, g_query, g_rel, gc);
          else detail::complex_score_grad(m.entity(cand[n]), m.relation(t.relation), m.entity(anchor), coef, gc, g_rel, g_query);
        }
        adagrad(m.entity(anchor), {acc_e.data() + anchor * w, w}, g_query);
        adagrad(m.relation(t.relation), {acc_r.data() + t.relation * w, w}, g_rel);
        for (std::size_t n = 0; n < cand.size(); ++n) {
          adagrad(m.entity(cand[n]), {acc_e.data() + cand[n] * w, w}, {g_cand.data() + n * w, w});
        }
      }
    }
    const double mean = total / static_cast<double>(2 * train.size());
    if (!std::isfinite(mean)) throw Error("ComplEx training diverged at epoch " + std::to_string(epoch));
    if (losses) losses->push_back(mean);
  }
  return m;
}

/// Scores every entity as the answer to the query; sorted like any other
/// ranked list so the same filtered_rank path applies.
inline RankedAnswerList kge_full_ranking(const ComplExModel& m, const Query& q) {
  RankedAnswerList out;
  out.query = q;
  out.candidates.reserve(m.num_entities());
  for (EntityId e = 0; e < m.num_entities(); ++e) {
    const double s = q.direction == Direction::out ? complex_score(m, q.entity, q.relation, e)
                                                   : complex_score(m, e, q.relation, q.entity);
    out.candidates.push_back({e, s});
  }
  sort_candidates(out.candidates);
  return out;
}

/// Hard router: queries with fewer than `threshold` known train answers take
/// the seq2seq list, the rest take the KGE ranking. No score mixing.
inline const RankedAnswerList& router_ensemble(const RankedAnswerList& seq2seq, const RankedAnswerList& kge,
                                               std::size_t query_frequency, std::size_t threshold = 1) {
  return query_frequency < threshold ? seq2seq : kge;
}

/// `KGCTX-KGE v1`, dims, then float64 little-endian tables.
inline std::string serialize_kge(const ComplExModel& m, std::string_view run_config = {}) {
  std::string out = "KGCTX-KGE v1\n";
  out += "run " + std::to_string(run_config.size()) + "\n";
  out += run_config;
  out += std::to_string(m.num_entities()) + " " + std::to_string(m.num_relations()) + " " + std::to_string(m.dim()) + "\n";
  auto put = [&](const std::vector<double>& v) {
    const auto start = out.size();
    out.resize(start + v.size() * 8);
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, &v[i], 8);
      for (int b = 0; b < 8; ++b) out[start + i * 8 + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xff);
    }
  };
  put(m.entity_table());
  put(m.relation_table());
  return out;
}

inline ComplExModel deserialize_kge(std::string_view data, std::string* run_config = nullptr) {
  std::size_t pos = 0;
  auto line = [&]() {
    const auto nl = data.find('\n', pos);
    if (nl == std::string_view::npos) throw Error("truncated KGE checkpoint");
    auto l = data.substr(pos, nl - pos);
    pos = nl + 1;
    return l;
  };
  if (line() != "KGCTX-KGE v1") throw Error("not a KGCTX-KGE v1 file");
  auto run = split(line(), ' ');
  if (run.size() != 2 || run[0] != "run") throw Error("KGE checkpoint: expected run block");
  const auto len = std::stoull(std::string(run[1]));
  if (run_config) *run_config = std::string(data.substr(pos, len));
  pos += len;
  auto dims = split(line(), ' ');
  if (dims.size() != 3) throw Error("KGE checkpoint: bad dimensions");
  ComplExModel m(std::stoull(std::string(dims[0])), std::stoull(std::string(dims[1])), std::stoull(std::string(dims[2])));
  auto get = [&](std::vector<double>& v) {
    if (pos + v.size() * 8 > data.size()) throw Error("truncated KGE checkpoint");
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) {
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[pos + i * 8 + static_cast<std::size_t>(b)])) << (8 * b);
      }
      std::memcpy(&v[i], &bits, 8);
    }
    pos += v.size() * 8;
  };
  get(m.entity_table());
  get(m.relation_table());
  if (pos != data.size()) throw Error("KGE checkpoint has trailing bytes");
  return m;
}

}  // namespace kgctx
