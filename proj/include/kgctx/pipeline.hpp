#pragma once

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include "kgctx/config.hpp"
#include "kgctx/decoder_ranker.hpp"
#include "kgctx/evaluator.hpp"
#include "kgctx/io.hpp"
#include "kgctx/kg_store.hpp"
#include "kgctx/kge.hpp"
#include "kgctx/model.hpp"
#include "kgctx/text_store.hpp"
#include "kgctx/tokenizer.hpp"
#include "kgctx/verbalizer.hpp"

namespace kgctx {

struct Dataset {
  KnowledgeGraph kg;
  TextStore store;
};

inline Dataset load_dataset(const RunConfig& cfg) {
  if (cfg.train_path.empty() || cfg.entity_mentions_path.empty() || cfg.relation_mentions_path.empty()) {
    throw UsageError("data.train, data.entity_mentions and data.relation_mentions are required");
  }
  auto read = [](const std::string& path) {
    return path.empty() ? std::vector<KnowledgeGraph::NamedTriple>{} : read_triples(path);
  };
  auto kg = KnowledgeGraph::from_named({read(cfg.train_path), read(cfg.valid_path), read(cfg.test_path)});
  std::optional<std::filesystem::path> desc;
  if (!cfg.descriptions_path.empty()) desc = cfg.descriptions_path;
  auto store = load_text(kg, cfg.entity_mentions_path, cfg.relation_mentions_path, desc);
  return {std::move(kg), std::move(store)};
}

inline SubwordVocab train_vocab(const KnowledgeGraph& kg, const TextStore& store, std::size_t size) {
  return SubwordVocab::train(tokenizer_corpus(kg, store), size);
}

/// Runs `fn(i)` for i in [0, n) on up to `threads` workers, contiguous ranges.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::mutex mu;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = n * t / threads; i < n * (t + 1) / threads; ++i) fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

/// Model hyperparameters with the vocabulary size taken from the tokenizer.
inline ModelConfig resolved_model_config(const RunConfig& cfg, const SubwordVocab& vocab) {
  ModelConfig m = cfg.model;
  m.vocab_size = vocab.size();
  m.validate();
  return m;
}

struct TrainProgress {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
};

/// Trains a seq2seq model from scratch. Each epoch visits the training stream
/// in a seeded permutation; batches never span two epochs.
template <typename Scalar = float>
Seq2SeqModel<Scalar> train_seq2seq(const KnowledgeGraph& kg, const TextStore& store, const SubwordVocab& vocab,
                                   const RunConfig& cfg,
                                   const std::function<void(const TrainProgress&)>& on_step = {}) {
  using Example = typename Seq2SeqModel<Scalar>::Example;
  Seq2SeqModel<Scalar> model(resolved_model_config(cfg, vocab), derive_seed(cfg.seed, {0x696e6974ULL}));
  AdamOptimizer opt;
  opt.learning_rate = cfg.train.learning_rate;
  opt.warmup_steps = cfg.train.warmup_steps;
  opt.clip_norm = cfg.train.clip_norm;
  TrainingStream stream(kg, store, vocab, cfg.verbalizer, derive_seed(cfg.seed, {0x63747800ULL}));
  const std::size_t n = stream.size();
  if (n == 0) throw ValidationError("no training examples");
  const std::size_t max_target = model.config().max_target_len;

  std::vector<std::size_t> order(n);
  std::vector<Example> batch;
  std::size_t epoch = 0, cursor = n;
  bool started = false;
  for (std::size_t step = 0; step < cfg.train.steps; ++step) {
    batch.clear();
    while (batch.size() < cfg.train.batch_size) {
      if (cursor == n) {
        if (!batch.empty()) break;
        if (started) ++epoch;
        started = true;
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        Rng rng(derive_seed(cfg.seed, {0x7065726dULL, epoch}));
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        cursor = 0;
      }
      const auto ex = stream.example(epoch, order[cursor++]);
      Example e{vocab.encode(ex.input_text), vocab.encode(ex.target_text)};
      if (e.target.size() + 1 > max_target) {
        throw ValidationError("target mention '" + ex.target_text + "' exceeds model.max_target_len tokens");
      }
      batch.push_back(std::move(e));
    }
    const double loss = train_step(model, opt, std::span<const Example>(batch),
                                   derive_seed(cfg.seed, {0x64726f70ULL, step}), cfg.threads);
    if (on_step) on_step({step + 1, epoch, loss});
  }
  return model;
}

inline std::uint64_t prediction_seed(std::uint64_t seed, const Query& q) {
  return derive_seed(seed, {0x70726564ULL, q.entity, q.relation, static_cast<std::uint64_t>(q.direction)});
}

/// Distinct queries of a split in first-seen order.
inline std::vector<std::pair<Query, EntityId>> unique_queries(const KnowledgeGraph& kg, Split split,
                                                             bool both_directions) {
  std::vector<std::pair<Query, EntityId>> out;
  std::unordered_set<Query, QueryHash> seen;
  for (const auto& qg : evaluation_queries(kg, split, both_directions)) {
    if (seen.insert(qg.first).second) out.push_back(qg);
  }
  return out;
}

/// Predicts ranked answer lists for every query of a split. Results do not
/// depend on the thread count.
template <typename Scalar>
PredictionMap predict_split(const Seq2SeqModel<Scalar>& model, const KnowledgeGraph& kg, const TextStore& store,
                            const SubwordVocab& vocab, const RunConfig& cfg, Split split) {
  const auto queries = unique_queries(kg, split, cfg.eval.both_directions);
  std::vector<RankedAnswerList> lists(queries.size());
  parallel_for(queries.size(), cfg.threads, [&](std::size_t i) {
    const auto& [q, gold] = queries[i];
    const auto ex = verbalize_eval_query(kg, store, vocab, cfg.verbalizer, q, gold, cfg.seed);
    lists[i] = predict(model, store, vocab, q, ex.input_text, cfg.predict, prediction_seed(cfg.seed, q));
  });
  PredictionMap out;
  for (std::size_t i = 0; i < queries.size(); ++i) out.emplace(queries[i].first, std::move(lists[i]));
  return out;
}

inline PredictionMap kge_predict_split(const ComplExModel& m, const KnowledgeGraph& kg, Split split,
                                       bool both_directions) {
  PredictionMap out;
  for (const auto& [q, gold] : unique_queries(kg, split, both_directions)) {
    if (!out.contains(q)) out.emplace(q, kge_full_ranking(m, q));
  }
  return out;
}

/// Routes each query by its train frequency. A query missing from the
/// seq2seq predictions routes to the KGE list.
inline PredictionMap ensemble_predictions(const KnowledgeGraph& kg, const PredictionMap& seq2seq,
                                          const PredictionMap& kge, std::size_t threshold) {
  PredictionMap out;
  for (const auto& [q, list] : kge) {
    auto it = seq2seq.find(q);
    if (it == seq2seq.end()) {
      out.emplace(q, list);
      continue;
    }
    out.emplace(q, router_ensemble(it->second, list, query_frequency(kg, q), threshold));
  }
  for (const auto& [q, list] : seq2seq) {
    if (!out.contains(q)) out.emplace(q, list);
  }
  return out;
}

// ---- prediction files --------------------------------------------------------
//
// KGCTX-PRED v1
// # optional comment lines, e.g. the config fingerprint
// Q <entity> <relation> <direction> <raw samples> <matched samples> <n>
// followed by n lines `<entity>\t<score>`; ids are the original strings.

inline std::string format_score(double x) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, end);
}

inline std::string serialize_predictions(const KnowledgeGraph& kg, const PredictionMap& preds,
                                         std::string_view fingerprint = {}) {
  std::vector<const RankedAnswerList*> lists;
  for (const auto& [q, l] : preds) lists.push_back(&l);
  std::sort(lists.begin(), lists.end(), [](const RankedAnswerList* a, const RankedAnswerList* b) {
    return std::tie(a->query.entity, a->query.relation, a->query.direction) <
           std::tie(b->query.entity, b->query.relation, b->query.direction);
  });
  std::string out = "KGCTX-PRED v1\n";
  if (!fingerprint.empty()) out += "# fingerprint " + std::string(fingerprint) + "\n";
  for (const auto* l : lists) {
    const auto& q = l->query;
    out += "Q\t" + kg.entity_name(q.entity) + '\t' + kg.relation_name(q.relation) + '\t' + to_string(q.direction) +
           '\t' + std::to_string(l->raw_samples) + '\t' + std::to_string(l->matched_samples) + '\t' +
           std::to_string(l->candidates.size()) + '\n';
    for (const auto& c : l->candidates) out += kg.entity_name(c.entity) + '\t' + format_score(c.score) + '\n';
  }
  return out;
}

inline PredictionMap deserialize_predictions(const KnowledgeGraph& kg, std::string_view text,
                                             const std::string& path = "<predictions>") {
  auto lines = split(text, '\n');
  if (lines.empty() || trim(lines[0]) != "KGCTX-PRED v1") throw ParseError(path, 1, "not a KGCTX-PRED v1 file");
  PredictionMap out;
  std::size_t i = 1;
  auto parse_size = [&](std::string_view s, std::size_t line) {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ParseError(path, line, "bad count '" + std::string(s) + "'");
    return v;
  };
  while (i < lines.size()) {
    const auto line = lines[i];
    if (trim(line).empty() || line[0] == '#') {
      ++i;
      continue;
    }
    auto f = split(line, '\t');
    if (f.size() != 7 || f[0] != "Q") throw ParseError(path, i + 1, "expected a Q line with 7 fields");
    RankedAnswerList l;
    l.query = {kg.entity_id(f[1]), kg.relation_id(f[2]), parse_direction(f[3])};
    l.raw_samples = parse_size(f[4], i + 1);
    l.matched_samples = parse_size(f[5], i + 1);
    const auto n = parse_size(f[6], i + 1);
    ++i;
    for (std::size_t k = 0; k < n; ++k, ++i) {
      if (i >= lines.size()) throw ParseError(path, i + 1, "truncated candidate list");
      auto c = split(lines[i], '\t');
      if (c.size() != 2) throw ParseError(path, i + 1, "expected entity<TAB>score");
      double score = 0.0;
      auto s = trim(c[1]);
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), score);
      if (ec != std::errc() || p != s.data() + s.size()) throw ParseError(path, i + 1, "bad score");
      l.candidates.push_back({kg.entity_id(c[0]), score});
    }
    sort_candidates(l.candidates);
    out.insert_or_assign(l.query, std::move(l));
  }
  return out;
}

/// Value of the `# fingerprint` comment of a prediction file, or empty.
inline std::string prediction_fingerprint(std::string_view text) {
  for (auto line : split(text, '\n')) {
    if (line.rfind("# fingerprint ", 0) == 0) return std::string(trim(line.substr(14)));
    if (!line.empty() && line[0] == 'Q') break;
  }
  return {};
}

}  // namespace kgctx
