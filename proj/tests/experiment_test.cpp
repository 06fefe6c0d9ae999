#include "ctf/experiment.hpp"

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctf/data.hpp"
#include "ctf/metrics.hpp"
#include "ctf/train.hpp"
#include "gtest/gtest.h"

namespace ctf {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    dir_ = fs::temp_directory_path() /
           ("ctf_experiment_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter_++));
    fs::create_directories(dir_);
  }
  ~TempDir() { fs::remove_all(dir_); }
  fs::path path() const { return dir_; }

 private:
  static inline int counter_ = 0;
  fs::path dir_;
};

// Small corpus + lexicon on disk for plan runs.
struct PlanFixture {
  TempDir dir;
  std::string corpus_path, lexicon_path;

  PlanFixture() {
    TemplateSpec spec;
    spec.templates = {"NAME is ADJECTIVE", "IDENTITY_ADJ people are ADJECTIVE",
                      "some people are IDENTITY_ADJ and ADJECTIVE"};
    spec.toxic_adjectives = {"awful", "stupid", "horrible"};
    spec.nontoxic_adjectives = {"kind", "brave", "lovely"};
    spec.names = {"alex", "bailey", "casey", "devon"};
    const auto lexicon = make_lexicon({"gay", "straight", "muslim", "jewish"}, {"sikh"});
    const auto corpus = generate_synthetic(spec, lexicon.all_terms());
    corpus_path = (dir.path() / "corpus.csv").string();
    write_corpus_csv(corpus, corpus_path);
    lexicon_path = (dir.path() / "terms.txt").string();
    write_file_atomic(lexicon_path,
                      "gay\nstraight\nmuslim\njewish\n[heldout]\nsikh\n");
  }

  nlohmann::json plan_json(const fs::path& out) const {
    return nlohmann::json{
        {"corpus", corpus_path},
        {"lexicon", lexicon_path},
        {"split", {{"train", 0.7}, {"dev", 0.15}, {"test", 0.15}, {"seed", 3}}},
        {"cells", nlohmann::json::array({{{"method", "baseline"}}})},
        {"runs", 2},
        {"train",
         {{"epochs", 2}, {"batch_size", 8}, {"learning_rate", 0.01}, {"seed", 40},
          {"embedding_dim", 8}, {"conv_channels", 8}}},
        {"out", out.string()}};
  }
};

TEST(PlanJson, ParsesAndValidates) {
  PlanFixture fx;
  const auto plan = plan_from_json(fx.plan_json(fx.dir.path() / "out"));
  EXPECT_EQ(plan.cells.size(), 1u);
  EXPECT_EQ(plan.runs, 2);
  EXPECT_EQ(plan.base.epochs, 2);
  EXPECT_DOUBLE_EQ(plan.fractions.dev, 0.15);

  auto no_cells = fx.plan_json(fx.dir.path() / "out");
  no_cells["cells"] = nlohmann::json::array();
  EXPECT_THROW(plan_from_json(no_cells), std::invalid_argument);

  auto unknown = fx.plan_json(fx.dir.path() / "out");
  unknown["unexpected"] = 1;
  EXPECT_THROW(plan_from_json(unknown), std::invalid_argument);

  auto bad_cell = fx.plan_json(fx.dir.path() / "out");
  bad_cell["cells"][0]["typo"] = 1;
  EXPECT_THROW(plan_from_json(bad_cell), std::invalid_argument);
}

TEST(PlanCells, ConfigDefaultsAndSeeds) {
  ExperimentPlan plan;
  plan.base.seed = 100;
  PlanCell clp_cell{Method::kClp, std::nullopt};
  EXPECT_DOUBLE_EQ(cell_config(plan, clp_cell, 0).lambda, 1.0);
  PlanCell tuned{Method::kClp, 2.5};
  EXPECT_DOUBLE_EQ(cell_config(plan, tuned, 0).lambda, 2.5);
  EXPECT_EQ(cell_config(plan, tuned, 0).seed, 100);
  EXPECT_EQ(cell_config(plan, tuned, 3).seed, 103);
  EXPECT_EQ(cell_config(plan, tuned, 0).method, Method::kClp);
}

MetricsReport report_with(double gap, std::optional<double> auc) {
  MetricsReport r;
  r.ctf_nontoxic_train.gap = gap;
  r.ctf_nontoxic_train.n_evaluated = 7;
  r.ctf_nontoxic_train.max_example_gap = gap * 2;
  r.auc = auc;
  r.single_token_tox = gap;
  return r;
}

TEST(AverageReports, FieldwiseMeansWithOptionals) {
  const auto mean = average_reports({report_with(0.2, 0.9), report_with(0.4, std::nullopt)});
  ASSERT_TRUE(mean.ctf_nontoxic_train.gap.has_value());
  EXPECT_DOUBLE_EQ(*mean.ctf_nontoxic_train.gap, 0.3);
  EXPECT_EQ(mean.ctf_nontoxic_train.n_evaluated, 7u);
  ASSERT_TRUE(mean.auc.has_value());
  EXPECT_DOUBLE_EQ(*mean.auc, 0.9);  // averaged over runs where defined
  EXPECT_DOUBLE_EQ(mean.single_token_tox, 0.3);
  ASSERT_TRUE(mean.ctf_nontoxic_train.within_epsilon.has_value());
  EXPECT_FALSE(*mean.ctf_nontoxic_train.within_epsilon);  // mean max 0.6 > 0.05
  EXPECT_THROW(average_reports({}), std::invalid_argument);
}

TEST(RunPlan, AveragesMatchPerRunReports) {
  PlanFixture fx;
  const auto out = fx.dir.path() / "out";
  const auto plan = plan_from_json(fx.plan_json(out));
  const auto results = run_plan(plan);
  ASSERT_EQ(results.size(), 1u);
  ASSERT_TRUE(results[0].ok) << results[0].error;
  ASSERT_EQ(results[0].per_run.size(), 2u);
  EXPECT_EQ(results[0].seeds, (std::vector<std::int64_t>{40, 41}));
  const auto& mean = results[0].mean;
  const auto& runs = results[0].per_run;
  ASSERT_TRUE(mean.auc && runs[0].auc && runs[1].auc);
  EXPECT_DOUBLE_EQ(*mean.auc, (*runs[0].auc + *runs[1].auc) / 2.0);
  ASSERT_TRUE(mean.ctf_nontoxic_train.gap.has_value());
  EXPECT_DOUBLE_EQ(*mean.ctf_nontoxic_train.gap,
                   (*runs[0].ctf_nontoxic_train.gap + *runs[1].ctf_nontoxic_train.gap) / 2.0);
  EXPECT_TRUE(fs::exists(out / "comparison.csv"));
  EXPECT_TRUE(fs::exists(out / "comparison.json"));
  const auto j = nlohmann::json::parse(read_file(out / "comparison.json"));
  EXPECT_EQ(j.at("format"), "ctf-comparison-v1");
  ASSERT_EQ(j.at("cells").size(), 1u);
  EXPECT_EQ(j.at("cells")[0].at("seeds").size(), 2u);
}

TEST(RunPlan, MatchesSeparateTrainAndEval) {
  // The compare path must produce exactly what train + compute_metrics give
  // for the same seed and split.
  PlanFixture fx;
  const auto out = fx.dir.path() / "out_single";
  auto pj = fx.plan_json(out);
  pj["runs"] = 1;
  const auto plan = plan_from_json(pj);
  const auto results = run_plan(plan);
  ASSERT_TRUE(results[0].ok) << results[0].error;

  const auto corpus = ingest_csv(fx.corpus_path).corpus;
  const auto tagged = split(corpus, {0.7, 0.15, 0.15}, 3);
  const auto lexicon = load_lexicon(fx.lexicon_path);
  const TrainData data{tagged.docs_in(Split::kTrain), tagged.docs_in(Split::kDev)};
  const auto model = train(data, cell_config(plan, plan.cells[0], 0), lexicon);
  const auto expected = compute_metrics(model.scorer(), model.params,
                                        tagged.docs_in(Split::kTest), lexicon, plan.metrics);
  EXPECT_EQ(report_to_json(results[0].per_run[0]).dump(), report_to_json(expected).dump());
}

TEST(RunPlan, DeterministicOutputsBytewise) {
  PlanFixture fx;
  const auto out_a = fx.dir.path() / "a";
  const auto out_b = fx.dir.path() / "b";
  run_plan(plan_from_json(fx.plan_json(out_a)));
  run_plan(plan_from_json(fx.plan_json(out_b)), 2);  // worker count must not matter
  EXPECT_EQ(read_file(out_a / "comparison.csv"), read_file(out_b / "comparison.csv"));
  EXPECT_EQ(read_file(out_a / "comparison.json"), read_file(out_b / "comparison.json"));
}

TEST(RunPlan, FailedCellsAreReportedAndDoNotAbort) {
  PlanFixture fx;
  const auto out = fx.dir.path() / "out_fail";
  auto pj = fx.plan_json(out);
  pj["train"]["learning_rate"] = 1e200;  // diverges
  pj["cells"] = nlohmann::json::array({{{"method", "baseline"}}, {{"method", "blind"}}});
  const auto results = run_plan(plan_from_json(pj));
  ASSERT_EQ(results.size(), 2u);
  for (const auto& r : results) {
    EXPECT_FALSE(r.ok);
    EXPECT_NE(r.error.find("diverged"), std::string::npos) << r.error;
  }
  const auto csv = read_file(out / "comparison.csv");
  EXPECT_NE(csv.find("failed"), std::string::npos);
}

TEST(RunPlan, SevenCellGridProducesSevenRows) {
  PlanFixture fx;
  const auto out = fx.dir.path() / "out_grid";
  auto pj = fx.plan_json(out);
  pj["runs"] = 1;
  pj["cells"] = nlohmann::json::array({{{"method", "baseline"}},
                                       {{"method", "blind"}},
                                       {{"method", "augment"}},
                                       {{"method", "clp_nontoxic"}, {"lambda", 1.0}},
                                       {{"method", "clp"}, {"lambda", 0.05}},
                                       {{"method", "clp"}, {"lambda", 1.0}},
                                       {{"method", "clp"}, {"lambda", 5.0}}});
  const auto results = run_plan(plan_from_json(pj));
  ASSERT_EQ(results.size(), 7u);
  for (const auto& r : results) EXPECT_TRUE(r.ok) << r.error;
  const auto csv = read_file(out / "comparison.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 8);  // header + 7 rows
  // rows come out in plan order
  EXPECT_LT(csv.find("baseline,"), csv.find("blind,"));
  EXPECT_LT(csv.find("blind,"), csv.find("clp,0.05"));
  EXPECT_LT(csv.find("clp,0.05"), csv.find("clp,5"));
}

TEST(ComparisonCsv, OneRowPerCellInPlanOrder) {
  std::vector<CellResult> results(2);
  results[0].cell = {Method::kBaseline, std::nullopt};
  results[0].ok = true;
  results[0].seeds = {1};
  results[0].mean = report_with(0.25, 0.93);
  results[1].cell = {Method::kClp, 5.0};
  results[1].ok = true;
  results[1].seeds = {1};
  results[1].mean = report_with(0.01, 0.94);
  const auto csv = comparison_csv(results);
  std::vector<std::string> lines;
  std::size_t pos = 0;
  while (pos < csv.size()) {
    const auto nl = csv.find('\n', pos);
    lines.push_back(csv.substr(pos, nl - pos));
    pos = nl + 1;
  }
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0].substr(0, 13), "method,lambda");
  EXPECT_EQ(lines[1].substr(0, 9), "baseline,");
  EXPECT_EQ(lines[2].substr(0, 6), "clp,5,");
}

}  // namespace
}  // namespace ctf
