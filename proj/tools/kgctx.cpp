#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "kgctx/kgctx.hpp"

using namespace kgctx;

namespace {

// Flag values collected during parsing, applied on top of the base config.
struct Overrides {
  std::string config_file;
  std::vector<std::string> sets;
  std::vector<std::pair<std::string, std::string>> flags;

  void apply(RunConfig& cfg) const {
    if (!config_file.empty()) cfg.apply_text(read_file(config_file));
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
      cfg.set(trim(std::string_view(s).substr(0, eq)), trim(std::string_view(s).substr(eq + 1)));
    }
    for (const auto& [k, v] : flags) cfg.set(k, v);
  }
};

void bind(CLI::App* app, Overrides& o, const std::string& flag, const std::string& key, const std::string& help) {
  app->add_option_function<std::string>(flag, [&o, key](const std::string& v) { o.flags.emplace_back(key, v); },
                                        help + " [" + key + "]");
}

void common_flags(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config_file, "key = value config file");
  app->add_option("--set", o.sets, "override any config key (key=value)");
  bind(app, o, "--seed", "seed", "root seed");
  bind(app, o, "--threads", "threads", "worker threads");
}

void data_flags(CLI::App* app, Overrides& o) {
  bind(app, o, "--train", "data.train", "train triples TSV");
  bind(app, o, "--valid", "data.valid", "valid triples TSV");
  bind(app, o, "--test", "data.test", "test triples TSV");
  bind(app, o, "--entity-mentions", "data.entity_mentions", "entity id<TAB>mention TSV");
  bind(app, o, "--relation-mentions", "data.relation_mentions", "relation id<TAB>mention TSV");
  bind(app, o, "--descriptions", "data.descriptions", "entity id<TAB>description TSV");
}

void verbalizer_flags(CLI::App* app, Overrides& o) {
  bind(app, o, "--mode", "verbalizer.mode", "plain or context");
  bind(app, o, "--k", "verbalizer.k", "max sampled neighbors");
  bind(app, o, "--token-budget", "verbalizer.token_budget", "input token cap");
  bind(app, o, "--vocab", "vocab.path", "tokenizer file");
  bind(app, o, "--vocab-size", "vocab.size", "tokenizer size when training one");
}

void predict_flags(CLI::App* app, Overrides& o) {
  bind(app, o, "--samples", "predict.samples", "decoder samples per query");
  bind(app, o, "--temperature", "predict.temperature", "sampling temperature");
  bind(app, o, "--aggregation", "predict.aggregation", "max or frequency");
  bind(app, o, "--split", "eval.split", "valid or test");
}

RunConfig resolve(const Overrides& o, RunConfig base = {}) {
  if (const char* env = std::getenv("KGCTX_THREADS")) base.set("threads", env);
  o.apply(base);
  return base;
}

void write_output(const std::string& path, std::string_view data) {
  if (path.empty() || path == "-") std::cout << data;
  else write_file_atomic(path, data);
}

SubwordVocab obtain_vocab(const RunConfig& cfg, const Dataset& ds) {
  if (!cfg.vocab_path.empty()) return SubwordVocab::deserialize(read_file(cfg.vocab_path));
  log_info("training tokenizer (vocab.size = " + std::to_string(cfg.vocab_size) + ")");
  return train_vocab(ds.kg, ds.store, cfg.vocab_size);
}

struct Loaded {
  RunConfig cfg;
  Dataset data;
  SubwordVocab vocab;
  Seq2SeqModel<float> model;
};

// Checkpoint settings are the base; flags may change data and inference
// settings but not the model.
Loaded load_checkpoint(const std::string& path, const Overrides& o) {
  auto ck = deserialize_checkpoint<float>(read_file(path));
  auto cfg = resolve(o, RunConfig::from_text(ck.meta.run_config));
  if (cfg.model.to_text() != ck.model.config().to_text()) {
    throw UsageError("model.* settings differ from the checkpoint " + path);
  }
  cfg.validate();
  auto data = load_dataset(cfg);
  return {std::move(cfg), std::move(data), SubwordVocab::deserialize(ck.meta.vocab), std::move(ck.model)};
}

Split eval_split(const RunConfig& cfg) {
  const auto s = parse_split(cfg.eval_split);
  if (s == Split::train) throw UsageError("eval.split must be valid or test");
  return s;
}

std::string report_json(const EvalReport& r, const RunConfig& cfg, const KnowledgeGraph& kg) {
  auto j = to_json(r, &kg);
  j["config"] = cfg.to_text();
  return j.dump(2) + "\n";
}

EvalReport finish_report(EvalReport r, const RunConfig& cfg) {
  r.fingerprint = cfg.fingerprint();
  log_info(r.split + ": MRR " + format_score(r.overall.mrr) + ", Hits@1 " + format_score(r.overall.hits1) +
           ", Hits@10 " + format_score(r.overall.hits10) + " over " + std::to_string(r.overall.count) + " queries");
  return r;
}

std::string print_report(const EvalReport& r, const std::string& name) {
  std::ostringstream o;
  o.precision(4);
  o << std::fixed;
  o << name << "  split=" << r.split << "  fingerprint=" << r.fingerprint << "\n";
  o << "  queries " << r.overall.count << "  MRR " << r.overall.mrr << "  H@1 " << r.overall.hits1 << "  H@3 "
    << r.overall.hits3 << "  H@10 " << r.overall.hits10 << "\n";
  o << "  context hit rate " << r.context_hit_rate << "  missing predictions " << r.missing_predictions << "\n";
  o << "  query frequency:";
  for (std::size_t i = 0; i < 3; ++i) {
    o << "  [" << kFrequencyBucketNames[i] << "] n=" << r.frequency_buckets[i].count << " MRR "
      << r.frequency_buckets[i].mrr;
  }
  o << "\n  degree:";
  for (const auto& b : r.degree_buckets) {
    o << "  [" << format_bucket_label(b) << ") n=" << b.count << " MRR " << b.mrr;
  }
  o << "\n";
  return o.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"KGT5-context toolkit: verbalize, train, predict and evaluate link prediction"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every command");

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic twin-relation KG");
  SynthSpec spec;
  std::string synth_out, synth_mentions = "pseudoword";
  std::uint64_t synth_seed = 0;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--entities", spec.entities, "entity count")->capture_default_str();
  synth->add_option("--relations", spec.relations, "relation count (odd adds a noise relation)")->capture_default_str();
  synth->add_option("--context-fraction", spec.context_fraction, "held-out answers in the 1-hop neighborhood")
      ->capture_default_str();
  synth->add_option("--fact-probability", spec.fact_probability, "fact probability per entity and twin pair")
      ->capture_default_str();
  synth->add_option("--noise-edges", spec.noise_edges, "noise edges per entity")->capture_default_str();
  synth->add_option("--valid-size", spec.valid_size)->capture_default_str();
  synth->add_option("--test-size", spec.test_size)->capture_default_str();
  synth->add_option("--mentions", synth_mentions, "pseudoword or numbered")->capture_default_str();
  synth->add_flag("--descriptions", spec.descriptions, "also write descriptions.tsv");
  synth->add_option("--seed", synth_seed)->capture_default_str();

  // prepare
  Overrides prep_o;
  auto* prep = app.add_subcommand("prepare", "write the verbalized corpus as input<TAB>target TSV");
  std::string prep_out, prep_split = "train";
  std::size_t prep_epoch = 0;
  common_flags(prep, prep_o);
  data_flags(prep, prep_o);
  verbalizer_flags(prep, prep_o);
  prep->add_option("--out", prep_out, "output TSV (default stdout)");
  prep->add_option("--corpus-split", prep_split, "train, valid or test")->capture_default_str();
  prep->add_option("--epoch", prep_epoch, "epoch of the training stream")->capture_default_str();

  // tokenizer train
  auto* tok = app.add_subcommand("tokenizer", "tokenizer commands");
  tok->require_subcommand(1);
  Overrides tok_o;
  auto* tok_train = tok->add_subcommand("train", "learn a BPE vocabulary from the KG text");
  std::string tok_out;
  common_flags(tok_train, tok_o);
  data_flags(tok_train, tok_o);
  bind(tok_train, tok_o, "--vocab-size", "vocab.size", "vocabulary size");
  tok_train->add_option("--out", tok_out, "vocab file")->required();

  // train
  Overrides train_o;
  auto* train = app.add_subcommand("train", "train a seq2seq model");
  std::string train_out;
  common_flags(train, train_o);
  data_flags(train, train_o);
  verbalizer_flags(train, train_o);
  bind(train, train_o, "--steps", "train.steps", "optimizer steps");
  bind(train, train_o, "--batch-size", "train.batch_size", "examples per step");
  bind(train, train_o, "--lr", "train.learning_rate", "peak learning rate");
  train->add_option("--out", train_out, "checkpoint path")->required();

  // predict
  Overrides pred_o;
  auto* pred = app.add_subcommand("predict", "rank answers for one query or a whole split");
  std::string pred_ckpt, pred_query, pred_out;
  common_flags(pred, pred_o);
  data_flags(pred, pred_o);
  predict_flags(pred, pred_o);
  pred->add_option("--checkpoint", pred_ckpt, "model checkpoint")->required();
  pred->add_option("--query", pred_query, "\"<entity id> <relation id> <out|in>\"");
  pred->add_option("--out", pred_out, "prediction file for the whole split (default stdout)");

  // eval
  Overrides eval_o;
  auto* eval = app.add_subcommand("eval", "predict a split and write the evaluation report");
  std::string eval_ckpt, eval_out, eval_preds;
  common_flags(eval, eval_o);
  data_flags(eval, eval_o);
  predict_flags(eval, eval_o);
  bind(eval, eval_o, "--both-directions", "eval.both_directions", "evaluate head and tail queries");
  bind(eval, eval_o, "--macro-average", "eval.macro_average", "average directions instead of pooling");
  eval->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
  eval->add_option("--out", eval_out, "report JSON (default stdout)");
  eval->add_option("--save-predictions", eval_preds, "also write the prediction file");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "summarize reports, degree plot and CSV");
  std::vector<std::string> an_reports;
  std::string an_plot, an_csv;
  bool an_force = false;
  analyze->add_option("--report", an_reports, "report JSON (repeatable)")->required();
  analyze->add_option("--plot", an_plot, "SVG of MRR by degree (first report)");
  analyze->add_option("--csv", an_csv, "CSV of degree buckets");
  analyze->add_flag("--force", an_force, "allow reports with different fingerprints");

  // kge train / eval
  auto* kge = app.add_subcommand("kge", "ComplEx baseline");
  kge->require_subcommand(1);
  Overrides kge_o;
  auto* kge_train = kge->add_subcommand("train", "train ComplEx");
  std::string kge_out;
  common_flags(kge_train, kge_o);
  data_flags(kge_train, kge_o);
  bind(kge_train, kge_o, "--dim", "kge.dim", "complex dimension");
  bind(kge_train, kge_o, "--epochs", "kge.epochs", "epochs");
  bind(kge_train, kge_o, "--negatives", "kge.negatives", "negatives per positive");
  bind(kge_train, kge_o, "--lr", "kge.learning_rate", "Adagrad learning rate");
  kge_train->add_option("--out", kge_out, "KGE checkpoint")->required();
  Overrides kge_eval_o;
  auto* kge_eval = kge->add_subcommand("eval", "evaluate ComplEx by full ranking");
  std::string kge_eval_ckpt, kge_eval_out, kge_eval_preds;
  common_flags(kge_eval, kge_eval_o);
  data_flags(kge_eval, kge_eval_o);
  bind(kge_eval, kge_eval_o, "--split", "eval.split", "valid or test");
  kge_eval->add_option("--kge", kge_eval_ckpt, "KGE checkpoint")->required();
  kge_eval->add_option("--out", kge_eval_out, "report JSON (default stdout)");
  kge_eval->add_option("--save-predictions", kge_eval_preds, "also write the prediction file");

  // ensemble
  Overrides ens_o;
  auto* ens = app.add_subcommand("ensemble", "route unseen queries to seq2seq, the rest to ComplEx");
  std::string ens_preds, ens_kge, ens_out;
  common_flags(ens, ens_o);
  data_flags(ens, ens_o);
  bind(ens, ens_o, "--split", "eval.split", "valid or test");
  bind(ens, ens_o, "--threshold", "ensemble.threshold", "queries seen fewer times go to seq2seq");
  ens->add_option("--seq2seq", ens_preds, "seq2seq prediction file")->required();
  ens->add_option("--kge", ens_kge, "KGE checkpoint")->required();
  ens->add_option("--out", ens_out, "report JSON (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (synth->parsed()) {
      spec.mentions = parse_mention_scheme(synth_mentions);
      const auto data = generate_synthetic_kg(spec, synth_seed);
      write_synthetic_kg(data, synth_out);
      log_info("wrote " + std::to_string(data.splits[0].size()) + "/" + std::to_string(data.splits[1].size()) + "/" +
               std::to_string(data.splits[2].size()) + " triples to " + synth_out);
    } else if (prep->parsed()) {
      const auto cfg = resolve(prep_o);
      cfg.validate();
      const auto ds = load_dataset(cfg);
      const auto vocab = obtain_vocab(cfg, ds);
      std::string out = "# fingerprint " + cfg.fingerprint() + "\n";
      auto emit = [&](const VerbalizedExample& ex) { out += ex.input_text + '\t' + ex.target_text + '\n'; };
      const auto split = parse_split(prep_split);
      if (split == Split::train) {
        TrainingStream(ds.kg, ds.store, vocab, cfg.verbalizer, derive_seed(cfg.seed, {0x63747800ULL}))
            .for_each(prep_epoch, emit);
      } else {
        for (const auto& [q, gold] : evaluation_queries(ds.kg, split, cfg.eval.both_directions)) {
          emit(verbalize_eval_query(ds.kg, ds.store, vocab, cfg.verbalizer, q, gold, cfg.seed));
        }
      }
      write_output(prep_out, out);
    } else if (tok_train->parsed()) {
      const auto cfg = resolve(tok_o);
      const auto ds = load_dataset(cfg);
      const auto vocab = train_vocab(ds.kg, ds.store, cfg.vocab_size);
      write_file_atomic(tok_out, vocab.serialize());
      log_info("vocabulary of " + std::to_string(vocab.size()) + " pieces written to " + tok_out);
    } else if (train->parsed()) {
      auto cfg = resolve(train_o);
      cfg.validate();
      const auto ds = load_dataset(cfg);
      const auto vocab = obtain_vocab(cfg, ds);
      cfg.model = resolved_model_config(cfg, vocab);
      log_info("training " + std::to_string(parameter_count(cfg.model)) + " parameters, fingerprint " +
               cfg.fingerprint());
      const auto model = train_seq2seq(ds.kg, ds.store, vocab, cfg, [&](const TrainProgress& p) {
        if (cfg.train.log_every && (p.step % cfg.train.log_every == 0 || p.step == cfg.train.steps)) {
          log_info("step " + std::to_string(p.step) + " epoch " + std::to_string(p.epoch) + " loss " +
                   format_score(p.loss));
        }
      });
      write_file_atomic(train_out, serialize_checkpoint(model, {cfg.to_text(), vocab.serialize()}));
      log_info("checkpoint written to " + train_out);
    } else if (pred->parsed()) {
      auto ld = load_checkpoint(pred_ckpt, pred_o);
      if (!pred_query.empty()) {
        std::istringstream in(pred_query);
        std::string e, r, d;
        if (!(in >> e >> r >> d)) throw UsageError("--query expects \"<entity id> <relation id> <direction>\"");
        const Query q{ld.data.kg.entity_id(e), ld.data.kg.relation_id(r), parse_direction(d)};
        const auto ex = verbalize_eval_query(ld.data.kg, ld.data.store, ld.vocab, ld.cfg.verbalizer, q, q.entity,
                                             ld.cfg.seed);
        const auto list = predict(ld.model, ld.data.store, ld.vocab, q, ex.input_text, ld.cfg.predict,
                                  prediction_seed(ld.cfg.seed, q));
        std::string out;
        for (const auto& c : list.candidates) out += ld.data.kg.entity_name(c.entity) + '\t' + format_score(c.score) + '\n';
        std::cout << out;
        log_info(std::to_string(list.matched_samples) + " of " + std::to_string(list.raw_samples) +
                 " samples matched a mention");
      } else {
        const auto preds = predict_split(ld.model, ld.data.kg, ld.data.store, ld.vocab, ld.cfg, eval_split(ld.cfg));
        write_output(pred_out, serialize_predictions(ld.data.kg, preds, ld.cfg.fingerprint()));
      }
    } else if (eval->parsed()) {
      auto ld = load_checkpoint(eval_ckpt, eval_o);
      const auto split = eval_split(ld.cfg);
      const auto preds = predict_split(ld.model, ld.data.kg, ld.data.store, ld.vocab, ld.cfg, split);
      if (!eval_preds.empty()) {
        write_file_atomic(eval_preds, serialize_predictions(ld.data.kg, preds, ld.cfg.fingerprint()));
      }
      const auto r = finish_report(evaluate(ld.data.kg, split, preds, ld.cfg.eval), ld.cfg);
      write_output(eval_out, report_json(r, ld.cfg, ld.data.kg));
    } else if (analyze->parsed()) {
      std::vector<EvalReport> reports;
      for (const auto& path : an_reports) {
        const auto j = nlohmann::json::parse(read_file(path));
        auto r = report_from_json(j);
        if (j.contains("config") && hex64(fnv1a(j.at("config").get<std::string>())) != r.fingerprint) {
          if (!an_force) throw ValidationError(path + ": fingerprint does not match the embedded config");
          log_warn(path + ": fingerprint does not match the embedded config");
        }
        if (!reports.empty() && r.fingerprint != reports.front().fingerprint) {
          if (!an_force) {
            throw ValidationError(path + " has fingerprint " + r.fingerprint + ", expected " +
                                  reports.front().fingerprint + "; pass --force to compare anyway");
          }
          log_warn("mixing fingerprints " + reports.front().fingerprint + " and " + r.fingerprint);
        }
        std::cout << print_report(r, path);
        reports.push_back(std::move(r));
      }
      if (!an_plot.empty()) write_file_atomic(an_plot, degree_svg(reports.front().degree_buckets));
      if (!an_csv.empty()) {
        std::string csv;
        for (std::size_t i = 0; i < reports.size(); ++i) {
          auto body = degree_csv(reports[i].degree_buckets);
          if (reports.size() == 1) {
            csv = body;
            break;
          }
          auto lines = split(body, '\n');
          if (i == 0) csv += "report," + std::string(lines[0]) + "\n";
          for (std::size_t k = 1; k < lines.size(); ++k) {
            if (!lines[k].empty()) csv += an_reports[i] + "," + std::string(lines[k]) + "\n";
          }
        }
        write_file_atomic(an_csv, csv);
      }
    } else if (kge_train->parsed()) {
      const auto cfg = resolve(kge_o);
      const auto ds = load_dataset(cfg);
      std::vector<double> losses;
      const auto m = train_kge(ds.kg, cfg.kge, &losses);
      if (!losses.empty()) log_info("final epoch loss " + format_score(losses.back()));
      write_file_atomic(kge_out, serialize_kge(m, cfg.to_text()));
    } else if (kge_eval->parsed()) {
      std::string run;
      const auto m = deserialize_kge(read_file(kge_eval_ckpt), &run);
      const auto cfg = resolve(kge_eval_o, RunConfig::from_text(run));
      const auto ds = load_dataset(cfg);
      if (m.num_entities() != ds.kg.num_entities()) throw ValidationError("KGE checkpoint does not match the graph");
      const auto split = eval_split(cfg);
      const auto preds = kge_predict_split(m, ds.kg, split, cfg.eval.both_directions);
      if (!kge_eval_preds.empty()) {
        write_file_atomic(kge_eval_preds, serialize_predictions(ds.kg, preds, cfg.fingerprint()));
      }
      const auto r = finish_report(evaluate(ds.kg, split, preds, cfg.eval), cfg);
      write_output(kge_eval_out, report_json(r, cfg, ds.kg));
    } else if (ens->parsed()) {
      std::string run;
      const auto m = deserialize_kge(read_file(ens_kge), &run);
      const auto cfg = resolve(ens_o, RunConfig::from_text(run));
      const auto ds = load_dataset(cfg);
      if (m.num_entities() != ds.kg.num_entities()) throw ValidationError("KGE checkpoint does not match the graph");
      const auto split = eval_split(cfg);
      const auto seq = deserialize_predictions(ds.kg, read_file(ens_preds), ens_preds);
      const auto preds = ensemble_predictions(ds.kg, seq, kge_predict_split(m, ds.kg, split, cfg.eval.both_directions),
                                              cfg.ensemble_threshold);
      const auto r = finish_report(evaluate(ds.kg, split, preds, cfg.eval), cfg);
      write_output(ens_out, report_json(r, cfg, ds.kg));
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
