#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "kgctx/decoder_ranker.hpp"
#include "kgctx/evaluator.hpp"
#include "kgctx/io.hpp"
#include "kgctx/kge.hpp"
#include "kgctx/model.hpp"
#include "kgctx/verbalizer.hpp"

namespace kgctx {

struct TrainOptions {
  std::size_t steps = 1000;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::size_t warmup_steps = 100;
  double clip_norm = 1.0;
  std::size_t log_every = 100;
};

/// Every flag of every command. Serialized as `key = value` lines in a fixed
/// order; the fingerprint hashes that canonical text.
struct RunConfig {
  std::string train_path, valid_path, test_path;
  std::string entity_mentions_path, relation_mentions_path, descriptions_path;
  std::string vocab_path;
  std::size_t vocab_size = 4000;
  VerbalizerOptions verbalizer;
  ModelConfig model;
  TrainOptions train;
  PredictOptions predict;
  std::string eval_split = "test";
  EvalOptions eval;
  KgeOptions kge;
  std::size_t ensemble_threshold = 1;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  std::string to_text() const {
    std::ostringstream o;
    o.precision(17);
    auto kv = [&](std::string_view k, const auto& v) { o << k << " = " << v << '\n'; };
    kv("seed", seed);
    kv("threads", threads);
    kv("data.train", train_path);
    kv("data.valid", valid_path);
    kv("data.test", test_path);
    kv("data.entity_mentions", entity_mentions_path);
    kv("data.relation_mentions", relation_mentions_path);
    kv("data.descriptions", descriptions_path);
    kv("vocab.path", vocab_path);
    kv("vocab.size", vocab_size);
    kv("verbalizer.mode", to_string(verbalizer.mode));
    kv("verbalizer.k", verbalizer.k);
    kv("verbalizer.token_budget", verbalizer.token_budget);
    kv("verbalizer.descriptions", verbalizer.use_descriptions ? "true" : "false");
    kv("verbalizer.freeze_context", verbalizer.freeze_context ? "true" : "false");
    o << model.to_text();
    kv("train.steps", train.steps);
    kv("train.batch_size", train.batch_size);
    kv("train.learning_rate", train.learning_rate);
    kv("train.warmup_steps", train.warmup_steps);
    kv("train.clip_norm", train.clip_norm);
    kv("train.log_every", train.log_every);
    kv("predict.samples", predict.samples);
    kv("predict.temperature", predict.temperature);
    kv("predict.aggregation", to_string(predict.aggregation));
    kv("eval.split", eval_split);
    kv("eval.both_directions", eval.both_directions ? "true" : "false");
    kv("eval.macro_average", eval.macro_average ? "true" : "false");
    std::string edges;
    for (std::size_t i = 0; i < eval.degree_edges.size(); ++i) {
      std::ostringstream e;
      e << eval.degree_edges[i];
      edges += (i ? "," : "") + e.str();
    }
    kv("eval.degree_edges", edges);
    kv("kge.dim", kge.dim);
    kv("kge.epochs", kge.epochs);
    kv("kge.negatives", kge.negatives);
    kv("kge.learning_rate", kge.learning_rate);
    kv("kge.seed", kge.seed);
    kv("ensemble.threshold", ensemble_threshold);
    return o.str();
  }

  std::string fingerprint() const { return hex64(fnv1a(to_text())); }

  void set(std::string_view key, std::string_view value) {
    const std::string v(value);
    auto as_bool = [&]() {
      if (v == "true" || v == "1" || v == "yes") return true;
      if (v == "false" || v == "0" || v == "no") return false;
      throw UsageError("expected a boolean for " + std::string(key) + ", got '" + v + "'");
    };
    try {
      if (key == "seed") seed = std::stoull(v);
      else if (key == "threads") threads = std::max<std::size_t>(1, std::stoul(v));
      else if (key == "data.train") train_path = v;
      else if (key == "data.valid") valid_path = v;
      else if (key == "data.test") test_path = v;
      else if (key == "data.entity_mentions") entity_mentions_path = v;
      else if (key == "data.relation_mentions") relation_mentions_path = v;
      else if (key == "data.descriptions") descriptions_path = v;
      else if (key == "vocab.path") vocab_path = v;
      else if (key == "vocab.size") vocab_size = std::stoul(v);
      else if (key == "verbalizer.mode") verbalizer.mode = parse_mode(v);
      else if (key == "verbalizer.k") verbalizer.k = std::stoul(v);
      else if (key == "verbalizer.token_budget") verbalizer.token_budget = std::stoul(v);
      else if (key == "verbalizer.descriptions") verbalizer.use_descriptions = as_bool();
      else if (key == "verbalizer.freeze_context") verbalizer.freeze_context = as_bool();
      else if (model.set(key, value)) {}
      else if (key == "train.steps") train.steps = std::stoul(v);
      else if (key == "train.batch_size") train.batch_size = std::stoul(v);
      else if (key == "train.learning_rate") train.learning_rate = std::stod(v);
      else if (key == "train.warmup_steps") train.warmup_steps = std::stoul(v);
      else if (key == "train.clip_norm") train.clip_norm = std::stod(v);
      else if (key == "train.log_every") train.log_every = std::stoul(v);
      else if (key == "predict.samples") predict.samples = std::stoul(v);
      else if (key == "predict.temperature") predict.temperature = std::stod(v);
      else if (key == "predict.aggregation") predict.aggregation = parse_aggregation(v);
      else if (key == "eval.split") eval_split = v;
      else if (key == "eval.both_directions") eval.both_directions = as_bool();
      else if (key == "eval.macro_average") eval.macro_average = as_bool();
      else if (key == "eval.degree_edges") {
        eval.degree_edges.clear();
        for (auto part : split(value, ',')) {
          part = trim(part);
          if (part.empty()) continue;
          eval.degree_edges.push_back(part == "inf" ? std::numeric_limits<double>::infinity()
                                                    : std::stod(std::string(part)));
        }
      }
      else if (key == "kge.dim") kge.dim = std::stoul(v);
      else if (key == "kge.epochs") kge.epochs = std::stoul(v);
      else if (key == "kge.negatives") kge.negatives = std::stoul(v);
      else if (key == "kge.learning_rate") kge.learning_rate = std::stod(v);
      else if (key == "kge.seed") kge.seed = std::stoull(v);
      else if (key == "ensemble.threshold") ensemble_threshold = std::stoul(v);
      else throw UsageError("unknown config key '" + std::string(key) + "'");
    } catch (const std::invalid_argument&) {
      throw UsageError("bad value for " + std::string(key) + ": '" + v + "'");
    } catch (const std::out_of_range&) {
      throw UsageError("value out of range for " + std::string(key) + ": '" + v + "'");
    }
  }

  /// Applies `key = value` lines; '#' starts a comment line.
  void apply_text(std::string_view text) {
    std::size_t lineno = 0;
    for (auto line : split(text, '\n')) {
      ++lineno;
      line = trim(line);
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) throw ParseError("<config>", lineno, "expected key = value");
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  static RunConfig from_text(std::string_view text) {
    RunConfig c;
    c.apply_text(text);
    return c;
  }

  void validate() const {
    model.validate();
    if (verbalizer.token_budget == 0) throw UsageError("verbalizer.token_budget must be positive");
    if (model.max_source_len < verbalizer.token_budget) {
      throw UsageError("model.max_source_len must be at least verbalizer.token_budget");
    }
    if (train.batch_size == 0) throw UsageError("train.batch_size must be positive");
    if (predict.samples == 0) throw UsageError("predict.samples must be positive");
    if (vocab_size < SubwordVocab::kBaseSize) throw UsageError("vocab.size must be at least 259");
  }
};

}  // namespace kgctx
