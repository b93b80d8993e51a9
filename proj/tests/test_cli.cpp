#include "metricforge/cli.hpp"
#include "metricforge/evaluation.hpp"
#include "metricforge/synthetic.hpp"
#include "metricforge/tensor_io.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <sstream>

using namespace metricforge;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  fs::path run;
  std::string out, err;
};

class Cli : public ::testing::Test {
 protected:
  mft::TempDir dir;

  fs::path write_config(const std::string& name, const json& j) {
    const fs::path p = dir / name;
    write_file_bytes(p, j.dump(2));
    return p;
  }

  Outcome run(const std::string& command, const json& config, std::vector<std::string> extra = {}) {
    std::vector<std::string> args{command, "--config", write_config(command + ".json", config).string(), "--out",
                                  (dir / "runs").string()};
    args.insert(args.end(), extra.begin(), extra.end());
    return run_args(args);
  }

  Outcome run_args(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    Outcome o;
    o.code = cli::run(args, out, err);
    o.out = out.str();
    o.err = err.str();
    std::istringstream lines(o.out);
    std::string line;
    while (std::getline(lines, line))
      if (!line.empty()) o.run = line;
    return o;
  }

  fs::path synth(std::size_t groups, std::size_t per_group) {
    const auto o = run("synth", {{"groups", groups}, {"per_group", per_group}});
    EXPECT_EQ(o.code, 0) << o.err;
    return o.run / "manifest.jsonl";
  }

  static json train_settings() {
    return {{"hyperparams", {{"epochs", 6}, {"batch_size", 8}, {"learning_rate", 1e-2}}},
            {"active_metrics", {"quality", "alignment", "authenticity"}}};
  }
};

json merge(json a, const json& b) {
  a.update(b);
  return a;
}

std::string slurp(const fs::path& p) { return read_file_bytes(p); }

}  // namespace

TEST_F(Cli, SplitIsIdempotent) {
  const fs::path manifest = synth(10, 3);
  const json cfg{{"manifest", manifest.string()}, {"train_fraction", 0.8}, {"seed", 42}};
  const Outcome a = run("split", cfg);
  const Outcome b = run("split", cfg);
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_NE(a.run, b.run);
  for (const char* f : {"train.jsonl", "test.jsonl", "split_report.json", "run.json"})
    EXPECT_EQ(slurp(a.run / f), slurp(b.run / f)) << f;
  const auto report = json::parse(slurp(a.run / "split_report.json"));
  EXPECT_EQ(report["test_groups"].size(), 2u);
  const auto record = json::parse(slurp(a.run / "run.json"));
  EXPECT_EQ(record["command"], "split");
  EXPECT_EQ(record["config"]["seed"], 42);
  EXPECT_EQ(a.run.filename().string().rfind("split-" + record["config_hash"].get<std::string>(), 0), 0u);
}

TEST_F(Cli, ValidationErrorsExitTwo) {
  Outcome o = run("split", {{"manifest", (dir / "absent.jsonl").string()}});
  EXPECT_EQ(o.code, cli::kExitValidation);
  EXPECT_NE(o.err.find("missing input file"), std::string::npos);

  const fs::path manifest = synth(4, 2);
  o = run("split", {{"manifest", manifest.string()}, {"train_fraction", 0.8}, {"sed", 1}});
  EXPECT_EQ(o.code, cli::kExitValidation);
  EXPECT_NE(o.err.find("sed"), std::string::npos);

  o = run_args({"train"});
  EXPECT_EQ(o.code, cli::kExitValidation);
  o = run_args({"bogus"});
  EXPECT_EQ(o.code, cli::kExitValidation);
  o = run_args({"--help"});
  EXPECT_EQ(o.code, cli::kExitOk);

  o = run("train", merge(train_settings(), {{"manifest", manifest.string()}, {"preset", "huge"}}));
  EXPECT_EQ(o.code, cli::kExitValidation);
  o = run("train", merge(train_settings(), {{"manifest", manifest.string()}, {"active_metrics", {"sharpness"}}}));
  EXPECT_EQ(o.code, cli::kExitValidation);
  // nothing was created for rejected configs besides the synth run
  std::size_t runs = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir / "runs")) ++runs;
  EXPECT_EQ(runs, 1u);
}

TEST_F(Cli, TrainIsDeterministicAndRetrainable) {
  const fs::path manifest = synth(6, 4);
  const json cfg = merge(train_settings(), {{"manifest", manifest.string()}, {"seed", 5}});
  const Outcome a = run("train", cfg);
  const Outcome b = run("train", cfg);
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(slurp(a.run / "history.csv"), slurp(b.run / "history.csv"));
  EXPECT_EQ(slurp(a.run / "checkpoint" / "head.readout.bin"), slurp(b.run / "checkpoint" / "head.readout.bin"));
  EXPECT_FALSE(fs::exists(a.run / "checkpoint.tmp"));

  json second = merge(train_settings(), {{"manifest", manifest.string()},
                                         {"init_checkpoint", (a.run / "checkpoint").string()},
                                         {"active_metrics", {"alignment"}}});
  const Outcome c = run("train", second);
  ASSERT_EQ(c.code, 0) << c.err;
  const Checkpoint ck = load_checkpoint(c.run / "checkpoint");
  ASSERT_EQ(ck.provenance.size(), 2u);
  EXPECT_EQ(ck.provenance[1].active_metrics, std::vector<std::string>({"alignment"}));
  EXPECT_EQ(ck.history.size(), 12u);
}

TEST_F(Cli, DivergenceKeepsLastGoodCheckpoint) {
  const fs::path manifest = synth(4, 2);
  // one step per epoch: the first step is finite, the second forward pass is not
  const json cfg{{"manifest", manifest.string()},
                 {"active_metrics", {"quality"}},
                 {"hyperparams", {{"epochs", 5}, {"batch_size", 8}, {"learning_rate", 1e38}}}};
  const Outcome o = run("train", cfg);
  EXPECT_EQ(o.code, cli::kExitRuntime);
  EXPECT_NE(o.err.find("TrainingDiverged"), std::string::npos);
  EXPECT_NE(o.err.find("last good checkpoint kept at"), std::string::npos);
  const Checkpoint kept = load_checkpoint(o.run / "checkpoint");
  ASSERT_FALSE(kept.history.empty());
  EXPECT_TRUE(std::isfinite(kept.history.back().total));
}

TEST_F(Cli, OverfitConfigDropsHistoryLoss) {
  const fs::path manifest = synth(8, 4);
  const Outcome o = run("train", {{"manifest", manifest.string()},
                                  {"preset", "desk"},
                                  {"active_metrics", {"quality", "alignment", "authenticity"}}});
  ASSERT_EQ(o.code, 0) << o.err;
  std::istringstream csv(slurp(o.run / "history.csv"));
  std::string header, line;
  std::getline(csv, header);
  std::vector<double> totals;
  while (std::getline(csv, line)) {
    std::vector<std::string> cells;
    std::stringstream row(line);
    for (std::string cell; std::getline(row, cell, ',');) cells.push_back(cell);
    totals.push_back(std::stod(cells.at(4)));  // epoch, three losses, total
  }
  ASSERT_EQ(totals.size(), 200u);
  EXPECT_LT(totals.back(), 0.01 * totals.front());
}

TEST_F(Cli, PerfectModelReportsOnes) {
  const fs::path manifest = synth(6, 4);
  const Outcome t = run("train", merge(train_settings(), {{"manifest", manifest.string()}}));
  ASSERT_EQ(t.code, 0) << t.err;
  // relabel every record with the model's own predictions
  const Checkpoint ck = load_checkpoint(t.run / "checkpoint");
  Manifest m = load_manifest(manifest);
  const Eigen::MatrixXd pred = predict(ck.model, prepare(m, ck.model.metric_names, std::nullopt));
  for (Index k = 0; k < pred.cols(); ++k) {
    m.score_range[static_cast<std::size_t>(k)] = {pred.col(k).minCoeff(), pred.col(k).maxCoeff()};
    for (std::size_t r = 0; r < m.records.size(); ++r) m.records[r].mos[static_cast<std::size_t>(k)] = pred(static_cast<Index>(r), k);
  }
  save_manifest(m, dir / "perfect.jsonl");
  const Outcome e = run("eval", {{"checkpoint", (t.run / "checkpoint").string()}, {"manifest", (dir / "perfect.jsonl").string()}});
  ASSERT_EQ(e.code, 0) << e.err;
  const auto report = json::parse(slurp(e.run / "report.json"));
  for (const auto& mc : report["metrics"]) {
    EXPECT_NEAR(mc["plcc"].get<double>(), 1.0, 1e-12) << mc.dump();
    EXPECT_EQ(mc["srcc"].get<double>(), 1.0) << mc.dump();
  }
}

TEST_F(Cli, EvalWritesReports) {
  const fs::path manifest = synth(6, 4);
  const Outcome t = run("train", merge(train_settings(), {{"manifest", manifest.string()}}));
  ASSERT_EQ(t.code, 0) << t.err;
  const Outcome e = run("eval", {{"checkpoint", (t.run / "checkpoint").string()},
                                 {"manifest", manifest.string()},
                                 {"split_name", "train"}});
  ASSERT_EQ(e.code, 0) << e.err;
  const auto report = json::parse(slurp(e.run / "report.json"));
  EXPECT_EQ(report["split"], "train");
  EXPECT_EQ(report["samples"], 24);
  ASSERT_EQ(report["metrics"].size(), 3u);
  for (const auto& m : report["metrics"]) EXPECT_TRUE(m["plcc"].is_number()) << m.dump();
  EXPECT_EQ(slurp(e.run / "scores.csv").substr(0, 35), "sample_id,metric,prediction,target\n");
  EXPECT_TRUE(fs::exists(e.run / "report.csv"));
}

TEST_F(Cli, SingleSeedSweepEqualsSplitTrainEval) {
  const fs::path manifest = synth(10, 3);
  const std::uint64_t seed = 100;
  const Outcome sweep =
      run("seeds-sweep", merge(train_settings(), {{"manifest", manifest.string()}, {"seeds", {seed}}}));
  ASSERT_EQ(sweep.code, 0) << sweep.err;

  const Outcome split = run("split", {{"manifest", manifest.string()}, {"train_fraction", 0.8}, {"seed", seed}});
  ASSERT_EQ(split.code, 0);
  const Outcome train =
      run("train", merge(train_settings(), {{"manifest", (split.run / "train.jsonl").string()}, {"seed", seed}}));
  ASSERT_EQ(train.code, 0) << train.err;
  const Outcome eval = run("eval", {{"checkpoint", (train.run / "checkpoint").string()},
                                    {"manifest", (split.run / "test.jsonl").string()}});
  ASSERT_EQ(eval.code, 0) << eval.err;

  const fs::path seed_dir = sweep.run / "seed-100";
  EXPECT_EQ(slurp(seed_dir / "test.jsonl"), slurp(split.run / "test.jsonl"));
  EXPECT_EQ(slurp(seed_dir / "scores.csv"), slurp(eval.run / "scores.csv"));
  EXPECT_EQ(slurp(seed_dir / "report.csv"), slurp(eval.run / "report.csv"));
  const auto summary = json::parse(slurp(sweep.run / "sweep.json"));
  EXPECT_EQ(summary["plcc_spread"]["quality"], 0.0);
}

TEST_F(Cli, ParallelSweepMatchesSequential) {
  const fs::path manifest = synth(10, 3);
  const json cfg = merge(train_settings(), {{"manifest", manifest.string()}, {"seeds", {1, 2, 3}}});
  const Outcome parallel = run("seeds-sweep", cfg);
  ::setenv("METRICFORGE_DETERMINISTIC", "1", 1);
  const Outcome sequential = run("seeds-sweep", cfg);
  ::unsetenv("METRICFORGE_DETERMINISTIC");
  ASSERT_EQ(parallel.code, 0) << parallel.err;
  ASSERT_EQ(sequential.code, 0) << sequential.err;
  EXPECT_EQ(slurp(parallel.run / "sweep.json"), slurp(sequential.run / "sweep.json"));
  EXPECT_EQ(slurp(parallel.run / "sweep.csv"), slurp(sequential.run / "sweep.csv"));
  const auto summary = json::parse(slurp(parallel.run / "sweep.json"));
  EXPECT_EQ(summary["rows"].size(), 3u);
  EXPECT_TRUE(summary["plcc_spread"]["alignment"].is_number());
}

TEST_F(Cli, SeedFlagOverridesConfig) {
  const fs::path manifest = synth(10, 1);
  const Outcome o = run("split", {{"manifest", manifest.string()}, {"seed", 1}}, {"--seed", "7"});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_EQ(json::parse(slurp(o.run / "split_report.json"))["seed"], 7);
}

TEST_F(Cli, SubmetricFromScores) {
  const json cfg{{"scores",
                  {{"base", 1.0},
                   {"children", {{{"name", "Resolution"}, {"score", 0.5}}, {{"name", "No Blur"}, {"score", 0.75}}}}}}};
  const Outcome o = run("submetric", cfg);
  ASSERT_EQ(o.code, 0) << o.err;
  const auto r = json::parse(slurp(o.run / "submetric.json"));
  EXPECT_NEAR(r["children"][0]["ratio"].get<double>(), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(r["children"][1]["ratio"].get<double>(), 2.0 / 3.0, 1e-15);

  const json bad{{"scores", {{"base", 1.0}, {"children", {{{"name", "Contrast"}, {"score", 1.0}}}}}}};
  const Outcome e = run("submetric", bad);
  EXPECT_EQ(e.code, cli::kExitValidation);
  EXPECT_NE(e.err.find("NonPositiveGap"), std::string::npos);
}

TEST_F(Cli, SubmetricPipelineOverSixChildren) {
  // Images scored high under the base prompt and lower under each child
  // prompt; a model fitted to this should rank the base prompt above all six.
  const auto& reg = PromptRegistry::builtin();
  const Manifest images = synthetic_manifest({4, 4, 8, 4, 3, 0.1, 11});
  Manifest m;
  m.metric_names = images.metric_names;
  m.score_range = images.score_range;
  std::vector<std::pair<std::string, double>> prompts{{kBasePromptName, 4.5}};
  double level = 1.5;
  for (const auto& c : default_child_metrics()) {
    prompts.emplace_back(c.template_name, level);
    level += 0.4;
  }
  for (const auto& [name, score] : prompts) {
    for (const auto& r : images.records) {
      SampleRecord x = r;
      x.sample_id = name + "/" + r.sample_id;
      x.prompt_id = name;
      x.prompt_text = reg.find(name).text;
      x.mos = {score, score, score};
      m.records.push_back(x);
    }
  }
  save_manifest(m, dir / "prompts.jsonl");
  save_manifest(images, dir / "images.jsonl");

  const json train_cfg{{"manifest", (dir / "prompts.jsonl").string()},
                       {"active_metrics", {"quality"}},
                       {"model", {{"seq_len", 12}}},
                       {"hyperparams", {{"epochs", 60}, {"batch_size", 16}, {"learning_rate", 1e-2}}}};
  const Outcome t = run("train", train_cfg);
  ASSERT_EQ(t.code, 0) << t.err;
  const Outcome s = run("submetric", {{"checkpoint", (t.run / "checkpoint").string()},
                                      {"manifest", (dir / "images.jsonl").string()},
                                      {"metric", "quality"}});
  ASSERT_EQ(s.code, 0) << s.err;
  const auto r = json::parse(slurp(s.run / "submetric.json"));
  ASSERT_EQ(r["children"].size(), 6u);
  double sum = 0.0;
  for (const auto& c : r["children"]) {
    EXPECT_GT(c["gap"].get<double>(), 0.0) << c.dump();
    sum += c["ratio"].get<double>();
  }
  EXPECT_NEAR(sum, 1.0, 1e-12);
  EXPECT_EQ(r["children"][0]["name"], "Resolution");
  // the child trained closest to the base gets the largest share
  EXPECT_GT(r["children"][5]["ratio"].get<double>(), r["children"][0]["ratio"].get<double>());
}
