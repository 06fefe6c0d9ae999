#pragma once

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctf/data.hpp"
#include "ctf/metrics.hpp"
#include "ctf/text.hpp"
#include "ctf/train.hpp"
#include "ctf/util.hpp"

namespace ctf {

struct PlanCell {
  Method method = Method::kBaseline;
  std::optional<double> lambda;  // unset: default 1.0 for clp methods
};

/// One comparison run: a corpus, a split, a lexicon, and a grid of
/// (method, lambda) cells each trained `runs` times with seeds
/// base_seed, base_seed + 1, ...
struct ExperimentPlan {
  std::string corpus_path;
  CsvSchema schema;
  SplitFractions fractions;
  std::int64_t split_seed = 0;
  std::string lexicon_path;
  std::vector<PlanCell> cells;
  int runs = 1;
  TrainConfig base;
  FairnessSpec metrics;
  std::string out_dir;
};

inline void validate_plan(const ExperimentPlan& plan) {
  if (plan.corpus_path.empty()) throw std::invalid_argument("plan: corpus path required");
  if (plan.lexicon_path.empty()) throw std::invalid_argument("plan: lexicon path required");
  if (plan.cells.empty()) throw std::invalid_argument("plan: at least one cell required");
  if (plan.runs < 1) throw std::invalid_argument("plan: runs must be >= 1");
  if (plan.out_dir.empty()) throw std::invalid_argument("plan: output directory required");
  validate_config(plan.base);
  validate_spec(plan.metrics);
}

inline ExperimentPlan plan_from_json(const nlohmann::json& j) {
  static const std::set<std::string> allowed = {"corpus", "text_column", "label_column",
                                                "split",  "lexicon",     "cells",
                                                "runs",   "train",       "metrics",
                                                "out"};
  if (!j.is_object()) throw std::invalid_argument("plan must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw std::invalid_argument("unknown plan key: " + key);
  }
  ExperimentPlan plan;
  plan.corpus_path = j.at("corpus").get<std::string>();
  if (j.contains("text_column")) plan.schema.text_column = j.at("text_column").get<std::string>();
  if (j.contains("label_column")) {
    plan.schema.label_column = j.at("label_column").get<std::string>();
  }
  if (j.contains("split")) {
    const auto& s = j.at("split");
    static const std::set<std::string> split_keys = {"train", "dev", "test", "seed"};
    for (const auto& [key, _] : s.items()) {
      if (!split_keys.count(key)) throw std::invalid_argument("unknown plan split key: " + key);
    }
    if (s.contains("train")) plan.fractions.train = s.at("train").get<double>();
    if (s.contains("dev")) plan.fractions.dev = s.at("dev").get<double>();
    if (s.contains("test")) plan.fractions.test = s.at("test").get<double>();
    if (s.contains("seed")) plan.split_seed = s.at("seed").get<std::int64_t>();
  }
  plan.lexicon_path = j.at("lexicon").get<std::string>();
  for (const auto& c : j.at("cells")) {
    static const std::set<std::string> cell_keys = {"method", "lambda"};
    for (const auto& [key, _] : c.items()) {
      if (!cell_keys.count(key)) throw std::invalid_argument("unknown plan cell key: " + key);
    }
    PlanCell cell;
    cell.method = method_from_string(c.at("method").get<std::string>());
    if (c.contains("lambda")) cell.lambda = c.at("lambda").get<double>();
    plan.cells.push_back(cell);
  }
  if (j.contains("runs")) plan.runs = j.at("runs").get<int>();
  if (j.contains("train")) plan.base = config_from_json(j.at("train"));
  if (j.contains("metrics")) {
    const auto& m = j.at("metrics");
    static const std::set<std::string> metric_keys = {"epsilon", "max_tokens", "threshold"};
    for (const auto& [key, _] : m.items()) {
      if (!metric_keys.count(key)) throw std::invalid_argument("unknown plan metrics key: " + key);
    }
    if (m.contains("epsilon")) plan.metrics.epsilon = m.at("epsilon").get<double>();
    if (m.contains("max_tokens")) plan.metrics.max_tokens = m.at("max_tokens").get<int>();
    if (m.contains("threshold")) plan.metrics.threshold = m.at("threshold").get<double>();
  }
  plan.out_dir = j.at("out").get<std::string>();
  validate_plan(plan);
  return plan;
}

inline ExperimentPlan load_plan(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("invalid plan JSON (" + path + "): " + e.what());
  }
  return plan_from_json(j);
}

// Effective per-run config for a cell.
inline TrainConfig cell_config(const ExperimentPlan& plan, const PlanCell& cell, int run) {
  TrainConfig cfg = plan.base;
  cfg.method = cell.method;
  cfg.runs = plan.runs;
  if (cell.lambda) {
    cfg.lambda = *cell.lambda;
  } else if (uses_clp(cell.method)) {
    cfg.lambda = 1.0;
  }
  cfg.seed = plan.base.seed + run;
  return cfg;
}

namespace detail {

inline std::optional<double> mean_defined(const std::vector<std::optional<double>>& values) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& v : values) {
    if (v) {
      sum += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

inline CtfGapResult average_ctf(const std::vector<MetricsReport>& runs,
                                const CtfGapResult MetricsReport::*field, double epsilon) {
  CtfGapResult out;
  std::vector<std::optional<double>> gaps, maxes;
  for (const auto& r : runs) {
    gaps.push_back((r.*field).gap);
    maxes.push_back((r.*field).max_example_gap);
    out.n_evaluated = (r.*field).n_evaluated;  // identical across runs (same eval docs)
  }
  out.gap = mean_defined(gaps);
  out.max_example_gap = mean_defined(maxes);
  if (out.max_example_gap) out.within_epsilon = *out.max_example_gap <= epsilon;
  return out;
}

}  // namespace detail

/// Field-wise mean across per-run reports. Optional metrics average over the
/// runs where they are defined.
inline MetricsReport average_reports(const std::vector<MetricsReport>& runs) {
  if (runs.empty()) throw std::invalid_argument("average_reports: no reports");
  MetricsReport out;
  out.spec = runs.front().spec;
  out.ctf_nontoxic_train =
      detail::average_ctf(runs, &MetricsReport::ctf_nontoxic_train, out.spec.epsilon);
  out.ctf_nontoxic_heldout =
      detail::average_ctf(runs, &MetricsReport::ctf_nontoxic_heldout, out.spec.epsilon);
  out.ctf_toxic_train =
      detail::average_ctf(runs, &MetricsReport::ctf_toxic_train, out.spec.epsilon);
  out.ctf_toxic_heldout =
      detail::average_ctf(runs, &MetricsReport::ctf_toxic_heldout, out.spec.epsilon);
  {
    std::vector<std::optional<double>> tpr, tnr, auc, cosine;
    double tox = 0.0;
    for (const auto& r : runs) {
      tpr.push_back(r.odds.tpr_gap);
      tnr.push_back(r.odds.tnr_gap);
      auc.push_back(r.auc);
      cosine.push_back(r.identity_cosine);
      tox += r.single_token_tox;
    }
    out.odds.tpr_gap = detail::mean_defined(tpr);
    out.odds.tnr_gap = detail::mean_defined(tnr);
    out.auc = detail::mean_defined(auc);
    out.identity_cosine = detail::mean_defined(cosine);
    out.single_token_tox = tox / static_cast<double>(runs.size());
  }
  // Per-term rates: same term list across runs; average where defined.
  const auto& first = runs.front().odds.per_term;
  for (std::size_t t = 0; t < first.size(); ++t) {
    std::vector<std::optional<double>> tprs, tnrs;
    for (const auto& r : runs) {
      if (r.odds.per_term.size() != first.size() || r.odds.per_term[t].first != first[t].first) {
        throw std::logic_error("average_reports: term lists differ across runs");
      }
      tprs.push_back(r.odds.per_term[t].second.tpr);
      tnrs.push_back(r.odds.per_term[t].second.tnr);
    }
    TermRates rates = first[t].second;
    rates.tpr = detail::mean_defined(tprs);
    rates.tnr = detail::mean_defined(tnrs);
    out.odds.per_term.emplace_back(first[t].first, rates);
  }
  return out;
}

struct CellResult {
  PlanCell cell;
  std::vector<std::int64_t> seeds;
  bool ok = false;
  std::string error;
  MetricsReport mean;
  std::vector<MetricsReport> per_run;
};

inline std::string config_hash(const TrainConfig& cfg) {
  return to_hex(fnv1a64(config_to_json(cfg).dump()));
}

namespace detail {

inline std::string csv_cell(const std::optional<double>& v) {
  return v ? fmt_double(*v) : std::string();
}

}  // namespace detail

inline std::string comparison_csv(const std::vector<CellResult>& results) {
  std::string out =
      "method,lambda,runs,ctf_gap_nontoxic_train,ctf_gap_nontoxic_heldout,"
      "ctf_gap_toxic_train,ctf_gap_toxic_heldout,tnr_gap,tpr_gap,auc,status\n";
  for (const auto& r : results) {
    out += to_string(r.cell.method);
    out.push_back(',');
    if (uses_clp(r.cell.method)) out += fmt_double(r.cell.lambda.value_or(1.0));
    out.push_back(',');
    out += std::to_string(r.seeds.size());
    out.push_back(',');
    if (r.ok) {
      out += detail::csv_cell(r.mean.ctf_nontoxic_train.gap) + ",";
      out += detail::csv_cell(r.mean.ctf_nontoxic_heldout.gap) + ",";
      out += detail::csv_cell(r.mean.ctf_toxic_train.gap) + ",";
      out += detail::csv_cell(r.mean.ctf_toxic_heldout.gap) + ",";
      out += detail::csv_cell(r.mean.odds.tnr_gap) + ",";
      out += detail::csv_cell(r.mean.odds.tpr_gap) + ",";
      out += detail::csv_cell(r.mean.auc) + ",ok\n";
    } else {
      out += ",,,,,,,failed\n";
    }
  }
  return out;
}

inline nlohmann::json comparison_json(const ExperimentPlan& plan,
                                      const std::vector<CellResult>& results) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& r : results) {
    nlohmann::json cell{{"method", to_string(r.cell.method)},
                        {"lambda", uses_clp(r.cell.method)
                                       ? nlohmann::json(r.cell.lambda.value_or(1.0))
                                       : nlohmann::json(nullptr)},
                        {"seeds", r.seeds},
                        {"config_hash", config_hash(cell_config(plan, r.cell, 0))},
                        {"ok", r.ok}};
    if (r.ok) {
      cell["mean"] = report_to_json(r.mean);
      nlohmann::json runs = nlohmann::json::array();
      for (std::size_t i = 0; i < r.per_run.size(); ++i) {
        runs.push_back(report_to_json(r.per_run[i], {{"seed", r.seeds[i]}}));
      }
      cell["runs"] = runs;
    } else {
      cell["error"] = r.error;
    }
    cells.push_back(cell);
  }
  return nlohmann::json{{"format", "ctf-comparison-v1"},
                        {"corpus", plan.corpus_path},
                        {"lexicon", plan.lexicon_path},
                        {"split",
                         {{"train", plan.fractions.train},
                          {"dev", plan.fractions.dev},
                          {"test", plan.fractions.test},
                          {"seed", plan.split_seed}}},
                        {"cells", cells}};
}

/// Runs every cell for `runs` seeds, averages metrics across runs, and writes
/// comparison.csv and comparison.json into plan.out_dir. Failed cells do not
/// stop the others. Cells may run concurrently; outputs are written in plan
/// order after all cells finish, so results are independent of `workers`.
inline std::vector<CellResult> run_plan(const ExperimentPlan& plan, unsigned workers = 1) {
  validate_plan(plan);
  const auto corpus = ingest_csv(plan.corpus_path, plan.schema).corpus;
  const auto tagged = split(corpus, plan.fractions, plan.split_seed);
  const auto lexicon = load_lexicon(plan.lexicon_path);
  const TrainData data{tagged.docs_in(Split::kTrain), tagged.docs_in(Split::kDev)};
  const auto test_docs = tagged.docs_in(Split::kTest);

  std::vector<CellResult> results(plan.cells.size());
  for (std::size_t i = 0; i < plan.cells.size(); ++i) {
    results[i].cell = plan.cells[i];
    if (uses_clp(plan.cells[i].method) && !plan.cells[i].lambda) {
      std::cerr << "notice: cell " << i << " (" << to_string(plan.cells[i].method)
                << ") has no lambda, using default 1\n";
    }
  }
  auto run_cell = [&](std::size_t i) {
    CellResult& result = results[i];
    try {
      for (int run = 0; run < plan.runs; ++run) {
        const TrainConfig cfg = cell_config(plan, plan.cells[i], run);
        result.seeds.push_back(cfg.seed);
        const TrainedModel model = train(data, cfg, lexicon);
        result.per_run.push_back(
            compute_metrics(model.scorer(), model.params, test_docs, lexicon, plan.metrics));
      }
      result.mean = average_reports(result.per_run);
      result.ok = true;
    } catch (const std::exception& e) {
      result.ok = false;
      result.error = e.what();
    }
  };
  if (workers <= 1 || plan.cells.size() <= 1) {
    for (std::size_t i = 0; i < plan.cells.size(); ++i) run_cell(i);
  } else {
    std::mutex mu;
    std::size_t next = 0;
    auto worker = [&] {
      for (;;) {
        std::size_t i;
        {
          std::lock_guard<std::mutex> lock(mu);
          if (next >= plan.cells.size()) return;
          i = next++;
        }
        run_cell(i);
      }
    };
    std::vector<std::thread> pool;
    const unsigned n = std::min<unsigned>(workers, static_cast<unsigned>(plan.cells.size()));
    for (unsigned t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::filesystem::create_directories(plan.out_dir);
  const auto dir = std::filesystem::path(plan.out_dir);
  write_file_atomic(dir / "comparison.csv", comparison_csv(results));
  write_file_atomic(dir / "comparison.json", comparison_json(plan, results).dump(2) + "\n");
  return results;
}

}  // namespace ctf
