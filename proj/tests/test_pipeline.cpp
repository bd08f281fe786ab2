#include <sys/wait.h>

#include <cstdlib>
#include <map>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "test_support.hpp"
#include "zooguard/experiment.hpp"

using namespace zooguard;
using zooguard::testing::error_code_of;
using zooguard::testing::slurp;
using zooguard::testing::TempDir;

namespace {

constexpr const char* kSmallConfig = R"({
  "seed": 11,
  "data": {"source": "synth", "synth": {"num_records": 1000, "num_features": 10, "num_classes": 2, "class_separation": 6.0}},
  "shadow": {"kind": "gbt"},
  "attack": {"num_samples": 40},
  "guard": {"epochs": 20}
})";

ExperimentConfig parse(const std::string& text, std::optional<std::uint64_t> seed = std::nullopt) {
  return experiment_config_from_json(nlohmann::json::parse(text), seed);
}

RunReport run_in(const TempDir& dir, const std::string& text, std::size_t workers = 2) {
  RunOptions opt;
  opt.out_dir = dir.path();
  opt.workers = workers;
  return run_experiment(parse(text), text, opt);
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) {
    if (!l.empty()) out.push_back(l);
  }
  return out;
}

std::string without_runtime(const std::filesystem::path& report) {
  auto j = nlohmann::ordered_json::parse(slurp(report));
  j.erase("runtime");
  return j.dump();
}

/// Small run shared by the report-shape tests.
struct SharedRun {
  TempDir dir;
  RunReport report;
  SharedRun() : report(run_in(dir, kSmallConfig)) {}
};

SharedRun& shared_run() {
  static SharedRun* run = new SharedRun();
  return *run;
}

int run_cli(const std::string& args) {
  const char* cli = std::getenv("ZOOGUARD_CLI");
  const std::string cmd = std::string(cli) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

// ---------------------------------------------------------------------------
// config

TEST(ExperimentConfigJson, Defaults) {
  const auto c = parse("{}");
  ASSERT_EQ(c.victims.size(), 3u);
  EXPECT_EQ(c.victims[0].kind, "mlp");
  EXPECT_EQ(c.victims[1].kind, "forest");
  EXPECT_EQ(c.victims[2].kind, "gbt");
  EXPECT_FALSE(c.shadow.has_value());
  EXPECT_FALSE(c.csv_path.has_value());
  EXPECT_EQ(c.gate_mode, GateMode::purify);
  EXPECT_EQ(c.attack_samples, 200u);
  EXPECT_EQ(c.guard.calibration_percentile, 99.5);
  EXPECT_EQ(c.zoo.seed, Rng::derive(0, 4));
  EXPECT_EQ(c.split_seed, Rng::derive(0, 2));
}

TEST(ExperimentConfigJson, SeedsDeriveFromTopLevelUnlessGiven) {
  const auto a = parse(R"({"seed": 5, "split": {"seed": 77}})");
  const auto b = parse(R"({"seed": 5, "split": {"seed": 77}})", 6);
  EXPECT_EQ(a.split_seed, 77u);
  EXPECT_EQ(b.split_seed, 77u);
  EXPECT_EQ(a.seed, 5u);
  EXPECT_EQ(b.seed, 6u);
  EXPECT_NE(a.data_seed, b.data_seed);
  EXPECT_NE(a.zoo.seed, b.zoo.seed);
  EXPECT_NE(a.guard.autoencoder.seed, b.guard.autoencoder.seed);
  EXPECT_EQ(parse(R"({"zoo": {"seed": 3}})").zoo.seed, 3u);
}

TEST(ExperimentConfigJson, CsvSourceAndShadowName) {
  const auto c = parse(R"({"data": {"path": "flows.csv", "schema": "flows.schema.json", "label_column": "Label"},
                          "shadow": {"kind": "gbt"}, "gate_mode": "block"})");
  EXPECT_EQ(c.csv_path, "flows.csv");
  EXPECT_EQ(c.schema_path, "flows.schema.json");
  EXPECT_EQ(c.label_column, "Label");
  ASSERT_TRUE(c.shadow.has_value());
  EXPECT_EQ(c.shadow->name, "shadow_gbt");
  EXPECT_EQ(c.gate_mode, GateMode::block);
}

TEST(ExperimentConfigJson, Rejections) {
  for (const char* bad : {R"([1, 2])", R"({"data": {"source": "kafka"}})", R"({"gate_mode": "drop"})",
                          R"({"victims": []})", R"({"victims": [{"name": "a", "kind": "mlp"}, {"name": "a", "kind": "gbt"}]})",
                          R"({"victims": [{"kind": "svm"}]})", R"({"zoo": {"max_iter": 0}})", R"({"zoo": {"step": 1}})",
                          R"({"seed": "seven"})"}) {
    EXPECT_EQ(error_code_of([&] { parse(bad); }), ErrorCode::config_error) << bad;
  }
}

// ---------------------------------------------------------------------------
// run_experiment

TEST(RunExperiment, AttackLowersAccuracyForEveryVictim) {
  const auto& report = shared_run().report;
  for (const auto& [name, role] : report.models) {
    if (role != "victim") continue;
    const auto* clean = report.find_metrics(name, "attack_clean");
    const auto* adv = report.find_metrics(name, "attack_adversarial");
    ASSERT_NE(clean, nullptr);
    ASSERT_NE(adv, nullptr);
    EXPECT_LT(adv->accuracy, clean->accuracy) << name;
    EXPECT_LT(adv->accuracy, report.find_metrics(name, "clean_test")->accuracy) << name;
  }
}

TEST(RunExperiment, ReportShape) {
  const auto& report = shared_run().report;
  EXPECT_EQ(report.config_echo, kSmallConfig);
  EXPECT_EQ(report.models.size(), 4u);
  EXPECT_EQ(report.metrics.size(), report.models.size() * report.stages.size());
  std::set<std::string> ids;
  for (const auto& a : report.attacks) ids.insert(a.mode + ":" + a.source + "->" + a.target);
  EXPECT_TRUE(ids.count("direct:mlp->mlp"));
  EXPECT_TRUE(ids.count("transfer:shadow_gbt->forest"));
  for (const auto& d : report.detection) {
    EXPECT_LE(d.flagged, d.count);
  }
  const auto j = report.to_json();
  for (const char* key : {"toolkit_version", "config_echo", "data", "models", "stages", "metrics", "attacks",
                          "detection", "gate", "runtime"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  EXPECT_EQ(j.at("toolkit_version"), kToolkitVersion);
}

TEST(RunExperiment, ArtifactsAndManifest) {
  const auto& dir = shared_run().dir;
  for (const char* f : {"report.json", "metrics.csv", "attack_results.jsonl", "verdicts.jsonl", "guard.json",
                        "scaler.json", "schema.json", "MANIFEST", "models/mlp.json", "models/shadow_gbt.json"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  }
  const auto manifest = nlohmann::json::parse(slurp(dir / "MANIFEST"));
  EXPECT_EQ(manifest.at("status"), "complete");
}

TEST(RunExperiment, SuccessRateMatchesJsonl) {
  const auto& [dir, report] = std::tie(shared_run().dir, shared_run().report);
  std::map<std::string, std::pair<std::size_t, std::size_t>> tally;
  for (const auto& l : lines_of(slurp(dir / kAttackResultsFile))) {
    const auto j = nlohmann::json::parse(l);
    auto& [n, s] = tally[j.at("attack").get<std::string>()];
    ++n;
    s += j.at("success").get<bool>() ? 1 : 0;
  }
  const auto j = nlohmann::json::parse(slurp(dir / kReportFile));
  for (const auto& a : j.at("attacks")) {
    const auto& [n, s] = tally.at(a.at("results").get<std::string>());
    EXPECT_EQ(a.at("summary").at("samples").get<std::size_t>(), n);
    EXPECT_DOUBLE_EQ(a.at("summary").at("success_rate").get<double>(), static_cast<double>(s) / static_cast<double>(n));
  }
}

TEST(RunExperiment, DetectionMatchesVerdicts) {
  const auto& dir = shared_run().dir;
  std::map<std::string, std::pair<std::size_t, std::size_t>> tally;
  for (const auto& l : lines_of(slurp(dir / kVerdictsFile))) {
    const auto j = nlohmann::json::parse(l);
    auto& [n, f] = tally[j.at("set").get<std::string>()];
    ++n;
    f += j.at("anomalous").get<bool>() ? 1 : 0;
  }
  const auto j = nlohmann::json::parse(slurp(dir / kReportFile));
  std::size_t pooled_n = 0, pooled_f = 0;
  for (const auto& d : j.at("detection").at("sets")) {
    const auto set = d.at("set").get<std::string>();
    if (set == "adversarial:all") continue;
    const auto& [n, f] = tally.at(set);
    EXPECT_EQ(d.at("count").get<std::size_t>(), n) << set;
    EXPECT_EQ(d.at("flagged").get<std::size_t>(), f) << set;
    if (set.rfind("adversarial:", 0) == 0) {
      pooled_n += n;
      pooled_f += f;
    }
  }
  for (const auto& d : j.at("detection").at("sets")) {
    if (d.at("set") != "adversarial:all") continue;
    EXPECT_EQ(d.at("count").get<std::size_t>(), pooled_n);
    EXPECT_EQ(d.at("flagged").get<std::size_t>(), pooled_f);
  }
}

TEST(WriteReport, FourFilesStableAndRowCount) {
  const auto& report = shared_run().report;
  TempDir a, b;
  write_report(report, a.path());
  write_report(report, b.path());
  for (const char* f : {kReportFile, kMetricsFile, kAttackResultsFile, kVerdictsFile}) {
    ASSERT_TRUE(std::filesystem::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  const auto rows = lines_of(slurp(a / kMetricsFile));
  ASSERT_FALSE(rows.empty());
  EXPECT_EQ(rows.front(), "model,stage,count,accuracy,macro_f1");
  EXPECT_EQ(rows.size() - 1, report.models.size() * report.stages.size());
}

TEST(WriteReport, UnwritableDirectoryIsIoError) {
  TempDir dir;
  dir.write("blocker", "x");
  EXPECT_EQ(error_code_of([&] { write_report(shared_run().report, dir / "blocker"); }), ErrorCode::io_error);
}

TEST(RunExperiment, DeterministicAcrossRunsAndWorkers) {
  const std::string text = R"({
    "seed": 3,
    "data": {"synth": {"num_records": 400, "num_classes": 2, "class_separation": 6.0}},
    "victims": [{"name": "mlp", "kind": "mlp", "epochs": 10}, {"name": "forest", "kind": "forest", "num_trees": 10}],
    "zoo": {"max_iter": 20},
    "attack": {"num_samples": 10},
    "guard": {"epochs": 5}
  })";
  TempDir a, b, c;
  run_in(a, text, 1);
  run_in(b, text, 1);
  run_in(c, text, 8);
  for (const auto* other : {&b, &c}) {
    EXPECT_EQ(without_runtime(a / kReportFile), without_runtime(*other / kReportFile));
    for (const char* f : {kMetricsFile, kAttackResultsFile, kVerdictsFile, "guard.json", "models/mlp.json"}) {
      EXPECT_EQ(slurp(a / f), slurp(*other / f)) << f;
    }
  }
}

TEST(RunExperiment, MissingCsvIsStageTaggedLoadError) {
  TempDir dir;
  const std::string text = R"({"data": {"path": "missing.csv"}})";
  RunOptions opt;
  opt.out_dir = dir.path();
  opt.base_dir = dir.path();
  try {
    run_experiment(parse(text), text, opt);
    FAIL() << "expected a StageError";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "load");
    EXPECT_EQ(e.code(), ErrorCode::io_error);
  }
  const auto manifest = nlohmann::json::parse(slurp(dir / "MANIFEST"));
  EXPECT_NE(manifest.at("status").get<std::string>().find("load"), std::string::npos);
}

TEST(RunExperiment, CsvSourceRelativeToBaseDir) {
  TempDir dir;
  SynthConfig sc;
  sc.num_records = 300;
  sc.class_separation = 6.0;
  write_csv(synth_flows(sc, 1), (dir / "flows.csv").string());
  const std::string text = R"({"data": {"path": "flows.csv"}, "victims": [{"name": "g", "kind": "gbt", "rounds": 5}],
                              "zoo": {"max_iter": 5}, "attack": {"num_samples": 5}, "guard": {"epochs": 2}})";
  RunOptions opt;
  opt.out_dir = dir / "out";
  opt.base_dir = dir.path();
  const auto report = run_experiment(parse(text), text, opt);
  EXPECT_EQ(report.data_summary.at("records").get<std::size_t>(), 300u);
}

// ---------------------------------------------------------------------------
// CLI

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    if (std::getenv("ZOOGUARD_CLI") == nullptr) GTEST_SKIP() << "ZOOGUARD_CLI not set";
  }
};

TEST_F(Cli, StagedCommandsAndReport) {
  TempDir dir;
  const auto cfg = dir.write("cfg.json", R"({
    "seed": 2,
    "data": {"synth": {"num_records": 400, "num_classes": 2, "class_separation": 6.0}},
    "victims": [{"name": "mlp", "kind": "mlp", "epochs": 10}],
    "zoo": {"max_iter": 10},
    "attack": {"num_samples": 8},
    "guard": {"epochs": 3}
  })");
  const auto out = (dir / "staged").string();
  const std::string common = " --config " + cfg + " --out " + out;
  EXPECT_EQ(run_cli("gen-data --out " + (dir / "gen").string() + " --seed 4"), 0);
  EXPECT_TRUE(std::filesystem::exists(dir / "gen" / "flows.csv"));
  EXPECT_EQ(run_cli("train" + common), 0);
  EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(out) / "models" / "mlp.json"));
  EXPECT_EQ(run_cli("attack" + common + " --workers 2"), 0);
  EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(out) / kAttackResultsFile));
  EXPECT_EQ(run_cli("guard" + common), 0);
  EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(out) / kVerdictsFile));

  const auto full = (dir / "full").string();
  EXPECT_EQ(run_cli("run --config " + cfg + " --out " + full + " --workers 2"), 0);
  EXPECT_EQ(run_cli("report --out " + full), 0);

  // a report whose summary disagrees with its jsonl fails the cross-check
  auto j = nlohmann::ordered_json::parse(slurp(std::filesystem::path(full) / kReportFile));
  j["attacks"][0]["summary"]["success_rate"] = 0.123;
  std::ofstream(std::filesystem::path(full) / kReportFile) << j.dump(2);
  EXPECT_EQ(run_cli("report --out " + full), 4);
}

TEST_F(Cli, ExitCodes) {
  TempDir dir;
  EXPECT_EQ(run_cli("run --config " + dir.write("a.json", R"({"gate_mode": "x"})") + " --out " + (dir / "a").string()), 2);
  EXPECT_EQ(run_cli("run --config " + (dir / "absent.json").string() + " --out " + (dir / "b").string()), 2);
  EXPECT_EQ(run_cli("run --no-such-flag"), 2);
  EXPECT_EQ(run_cli("run --config " + dir.write("c.json", R"({"data": {"path": "missing.csv"}})") + " --out " +
                    (dir / "c").string()),
            3);
  EXPECT_TRUE(std::filesystem::exists(dir / "c" / "MANIFEST"));
  dir.write("bad.csv", "a,b,label\n1,2,benign\n3,oops,attack\n");
  EXPECT_EQ(run_cli("run --config " + dir.write("d.json", R"({"data": {"path": "bad.csv"}})") + " --out " +
                    (dir / "d").string()),
            3);
  dir.write("nolabel.csv", "a,b,Class\n1,2,benign\n3,4,attack\n");
  EXPECT_EQ(run_cli("train --config " + dir.write("e.json", R"({"data": {"path": "nolabel.csv"}})") + " --out " +
                    (dir / "e").string()),
            3);
  EXPECT_EQ(run_cli("train --config " + (dir / "e.json").string() + " --label-column Class --out " +
                    (dir / "e2").string()),
            3);  // two records cannot be split per class
}
