// Command-line front end: corpus generation, training, evaluation, and
// multi-method comparison over (method, lambda) grids.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ctf/data.hpp"
#include "ctf/experiment.hpp"
#include "ctf/metrics.hpp"
#include "ctf/model.hpp"
#include "ctf/text.hpp"
#include "ctf/train.hpp"
#include "ctf/util.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

ctf::IdentityLexicon load_lexicon_or_default(const std::string& path,
                                              const std::string& heldout_path) {
  if (path.empty()) {
    if (!heldout_path.empty()) {
      throw std::invalid_argument("--heldout-lexicon requires --lexicon");
    }
    return ctf::default_lexicon();
  }
  return heldout_path.empty() ? ctf::load_lexicon(path)
                              : ctf::load_lexicon(path, heldout_path);
}

struct SplitOptions {
  double train = 0.8, dev = 0.1, test = 0.1;
  std::int64_t seed = 0;

  ctf::SplitFractions fractions() const { return {train, dev, test}; }
};

void add_split_options(CLI::App* cmd, SplitOptions& opts) {
  cmd->add_option("--split-train", opts.train, "Train fraction (default 0.8)");
  cmd->add_option("--split-dev", opts.dev, "Dev fraction (default 0.1)");
  cmd->add_option("--split-test", opts.test, "Test fraction (default 0.1)");
  cmd->add_option("--split-seed", opts.seed, "Split shuffle seed (default 0)");
}

int cmd_gen_synthetic(const std::string& spec_path, const std::string& lexicon_path,
                      const std::string& heldout_path, const std::string& out_path) {
  const ctf::TemplateSpec spec =
      spec_path.empty() ? ctf::default_template_spec() : ctf::load_template_spec(spec_path);
  const ctf::IdentityLexicon lexicon = load_lexicon_or_default(lexicon_path, heldout_path);
  const ctf::Corpus corpus = ctf::generate_synthetic(spec, lexicon.all_terms());
  ctf::write_corpus_csv(corpus, out_path);
  std::size_t toxic = 0;
  for (const auto& doc : corpus.docs) toxic += doc.label.value_or(0);
  std::cout << "wrote " << corpus.docs.size() << " docs (" << toxic << " toxic, "
            << corpus.docs.size() - toxic << " nontoxic) to " << out_path << "\n";
  return kExitOk;
}

ctf::TrainConfig load_config_with_overrides(const std::string& config_path, CLI::App* cmd,
                                            const std::string& method_flag, double lambda_flag,
                                            std::int64_t seed_flag, int runs_flag) {
  nlohmann::json j = nlohmann::json::object();
  if (!config_path.empty()) {
    try {
      j = nlohmann::json::parse(ctf::read_file(config_path));
    } catch (const nlohmann::json::parse_error& e) {
      throw std::invalid_argument("invalid config JSON (" + config_path + "): " + e.what());
    }
  }
  ctf::TrainConfig cfg = ctf::config_from_json(j);
  const bool lambda_given = j.contains("lambda") || cmd->count("--lambda") > 0;
  if (cmd->count("--method")) cfg.method = ctf::method_from_string(method_flag);
  if (cmd->count("--lambda")) cfg.lambda = lambda_flag;
  if (cmd->count("--seed")) cfg.seed = seed_flag;
  if (cmd->count("--runs")) cfg.runs = runs_flag;
  ctf::validate_config(cfg);
  if (ctf::uses_clp(cfg.method) && !lambda_given) {
    std::cerr << "notice: no lambda given for " << ctf::to_string(cfg.method)
              << ", using default 1\n";
    cfg.lambda = 1.0;
  }
  return cfg;
}

int cmd_train(const ctf::TrainConfig& cfg, const std::string& corpus_path,
              const ctf::CsvSchema& schema, const std::string& lexicon_path,
              const std::string& heldout_path, const SplitOptions& split_opts,
              const std::string& out_path) {
  const ctf::IdentityLexicon lexicon = load_lexicon_or_default(lexicon_path, heldout_path);
  const auto ingest = ctf::ingest_csv(corpus_path, schema);
  if (ingest.skipped > 0) {
    std::cerr << "skipped " << ingest.skipped << " rows with missing text or label\n";
  }
  const auto tagged = ctf::split(ingest.corpus, split_opts.fractions(), split_opts.seed);
  const ctf::TrainData data{tagged.docs_in(ctf::Split::kTrain), tagged.docs_in(ctf::Split::kDev)};
  const ctf::TrainedModel model = ctf::train(data, cfg, lexicon);
  ctf::save_checkpoint(model, out_path);
  std::cout << "trained " << ctf::to_string(cfg.method) << " on " << data.train.size()
            << " docs; best epoch " << model.selected_epoch << " of " << cfg.epochs
            << " (dev criterion " << ctf::fmt_double(model.dev_history[model.selected_epoch - 1])
            << "); checkpoint: " << out_path << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& corpus_path,
             const ctf::CsvSchema& schema, const std::string& lexicon_path,
             const std::string& heldout_path, const ctf::FairnessSpec& spec,
             const std::string& part, const SplitOptions& split_opts,
             const std::string& out_dir) {
  const ctf::TrainedModel model = ctf::load_checkpoint(checkpoint_path);
  const ctf::IdentityLexicon lexicon = load_lexicon_or_default(lexicon_path, heldout_path);
  auto corpus = ctf::ingest_csv(corpus_path, schema).corpus;
  std::vector<ctf::Document> docs;
  if (part.empty()) {
    docs = std::move(corpus.docs);
  } else {
    const auto tagged = ctf::split(corpus, split_opts.fractions(), split_opts.seed);
    if (part == "train") docs = tagged.docs_in(ctf::Split::kTrain);
    else if (part == "dev") docs = tagged.docs_in(ctf::Split::kDev);
    else if (part == "test") docs = tagged.docs_in(ctf::Split::kTest);
    else throw std::invalid_argument("--split-part must be train, dev, or test");
  }
  const auto report =
      ctf::compute_metrics(model.scorer(), model.params, docs, lexicon, spec);
  if (!report.auc) {
    std::cerr << "warning: AUC undefined (corpus lacks a positive or negative class)\n";
  }
  std::filesystem::create_directories(out_dir);
  const auto dir = std::filesystem::path(out_dir);
  const nlohmann::json metadata{{"checkpoint", checkpoint_path},
                                {"corpus", corpus_path},
                                {"n_docs", docs.size()},
                                {"config_hash", ctf::config_hash(model.config)},
                                {"seeds", std::vector<std::int64_t>{model.config.seed}}};
  ctf::write_file_atomic(dir / "report.json",
                         ctf::report_to_json(report, metadata).dump(2) + "\n");
  ctf::write_file_atomic(dir / "per_term_rates.csv", ctf::per_term_rates_csv(report));
  std::cout << "wrote report.json and per_term_rates.csv to " << out_dir << "\n";
  return kExitOk;
}

int cmd_compare(const std::string& plan_path, unsigned workers) {
  const ctf::ExperimentPlan plan = ctf::load_plan(plan_path);
  const auto results = ctf::run_plan(plan, workers);
  bool any_failed = false;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    std::cout << "cell " << i << " " << ctf::to_string(r.cell.method);
    if (ctf::uses_clp(r.cell.method)) {
      std::cout << " lambda=" << ctf::fmt_double(r.cell.lambda.value_or(1.0));
    }
    std::cout << ": " << (r.ok ? "ok" : "FAILED " + r.error) << "\n";
    any_failed |= !r.ok;
  }
  std::cout << "wrote comparison.csv and comparison.json to " << plan.out_dir << "\n";
  if (any_failed) {
    std::cerr << "error: one or more cells failed\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train and evaluate text classifiers for counterfactual token fairness"};
  app.require_subcommand(1);

  // gen-synthetic
  std::string gen_spec, gen_lexicon, gen_heldout, gen_out;
  auto* gen = app.add_subcommand("gen-synthetic", "Generate a template-based synthetic corpus");
  gen->add_option("--spec", gen_spec, "Template spec JSON (default: built-in)");
  gen->add_option("--lexicon", gen_lexicon, "Identity lexicon file (default: built-in)");
  gen->add_option("--heldout-lexicon", gen_heldout, "Separate held-out term file");
  gen->add_option("--out", gen_out, "Output corpus CSV")->required();

  // train
  std::string train_config, train_corpus, train_lexicon, train_heldout, train_out, train_method;
  std::string train_text_col = "text", train_label_col = "label";
  double train_lambda = 1.0;
  std::int64_t train_seed = 0;
  int train_runs = 1;
  SplitOptions train_split;
  auto* tr = app.add_subcommand("train", "Train a classifier");
  tr->add_option("--config", train_config, "Train config JSON");
  tr->add_option("--corpus", train_corpus, "Corpus CSV")->required();
  tr->add_option("--lexicon", train_lexicon, "Identity lexicon file (default: built-in)");
  tr->add_option("--heldout-lexicon", train_heldout, "Separate held-out term file");
  tr->add_option("--out", train_out, "Output checkpoint path")->required();
  tr->add_option("--method", train_method,
                 "Override method (baseline|blind|augment|clp|clp_nontoxic)");
  tr->add_option("--lambda", train_lambda, "Override CLP weight");
  tr->add_option("--seed", train_seed, "Override seed");
  tr->add_option("--runs", train_runs, "Override runs (metric averaging in compare)");
  tr->add_option("--text-column", train_text_col, "Corpus text column (default: text)");
  tr->add_option("--label-column", train_label_col, "Corpus label column (default: label)");
  add_split_options(tr, train_split);

  // eval
  std::string eval_checkpoint, eval_corpus, eval_lexicon, eval_heldout, eval_out, eval_part;
  std::string eval_text_col = "text", eval_label_col = "label";
  ctf::FairnessSpec eval_spec;
  SplitOptions eval_split;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a corpus");
  ev->add_option("--checkpoint", eval_checkpoint, "Checkpoint path")->required();
  ev->add_option("--corpus", eval_corpus, "Corpus CSV")->required();
  ev->add_option("--lexicon", eval_lexicon, "Identity lexicon file (default: built-in)");
  ev->add_option("--heldout-lexicon", eval_heldout, "Separate held-out term file");
  ev->add_option("--out", eval_out, "Output directory")->required();
  ev->add_option("--epsilon", eval_spec.epsilon, "Per-example gap tolerance (default 0.05)");
  ev->add_option("--max-tokens", eval_spec.max_tokens, "CTF length filter (default 10)");
  ev->add_option("--threshold", eval_spec.threshold, "Toxic threshold (default 0.5)");
  ev->add_option("--split-part", eval_part,
                 "Evaluate only this split of the corpus (train|dev|test)");
  ev->add_option("--text-column", eval_text_col, "Corpus text column (default: text)");
  ev->add_option("--label-column", eval_label_col, "Corpus label column (default: label)");
  add_split_options(ev, eval_split);

  // compare
  std::string compare_plan;
  unsigned compare_workers = 1;
  auto* cp = app.add_subcommand("compare", "Run an experiment plan over a (method, lambda) grid");
  cp->add_option("--plan", compare_plan, "Experiment plan JSON")->required();
  cp->add_option("--workers", compare_workers, "Concurrent cells (default 1)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (gen->parsed()) return cmd_gen_synthetic(gen_spec, gen_lexicon, gen_heldout, gen_out);
    if (tr->parsed()) {
      const auto cfg = load_config_with_overrides(train_config, tr, train_method, train_lambda,
                                                  train_seed, train_runs);
      return cmd_train(cfg, train_corpus, {train_text_col, train_label_col}, train_lexicon,
                       train_heldout, train_split, train_out);
    }
    if (ev->parsed()) {
      return cmd_eval(eval_checkpoint, eval_corpus, {eval_text_col, eval_label_col}, eval_lexicon,
                      eval_heldout, eval_spec, eval_part, eval_split, eval_out);
    }
    if (cp->parsed()) return cmd_compare(compare_plan, compare_workers);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitValidation;
}
