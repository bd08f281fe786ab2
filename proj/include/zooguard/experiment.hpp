#pragma once

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ae_guard.hpp"
#include "error.hpp"
#include "flow_dataset.hpp"
#include "models.hpp"
#include "zoo_attack.hpp"

namespace zooguard {

inline constexpr const char* kToolkitVersion = "1.0.0";

// ---------------------------------------------------------------------------
// Configuration

struct ModelSpec {
  std::string name;
  std::string kind;  // mlp | forest | gbt
  MlpConfig mlp;
  ForestConfig forest;
  GbtConfig gbt;
};

enum class GateMode { mark, block, purify };

inline const char* to_string(GateMode m) {
  switch (m) {
    case GateMode::mark: return "mark";
    case GateMode::block: return "block";
    case GateMode::purify: return "purify";
  }
  return "mark";
}

inline GateMode gate_mode_from_string(const std::string& s) {
  if (s == "mark") return GateMode::mark;
  if (s == "block") return GateMode::block;
  if (s == "purify") return GateMode::purify;
  throw Error(ErrorCode::config_error, "unknown gate_mode '" + s + "'");
}

struct GuardSpec {
  AutoencoderConfig autoencoder;
  double calibration_percentile = 99.5;
  /// share of the benign training records held out for calibration
  double holdout_fraction = 0.5;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  // data source: csv path, or synthetic
  std::optional<std::string> csv_path;
  std::optional<std::string> schema_path;
  std::string label_column = "label";
  SynthConfig synth;
  std::uint64_t data_seed = 0;
  std::string benign_label = "benign";
  double test_fraction = 0.2;
  std::uint64_t split_seed = 0;
  std::vector<ModelSpec> victims;
  std::optional<ModelSpec> shadow;
  ZooConfig zoo;
  std::size_t attack_samples = 200;
  std::uint64_t attack_seed = 0;
  GuardSpec guard;
  GateMode gate_mode = GateMode::purify;
};

namespace detail {

template <typename T>
T seeded(const nlohmann::json& j, const char* key, std::uint64_t master, std::uint64_t stage) {
  if (j.is_object() && j.contains(key)) return j.at(key).get<T>();
  return static_cast<T>(Rng::derive(master, stage));
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j, std::uint64_t master, std::uint64_t stage) {
  ModelSpec s;
  s.kind = j.at("kind").get<std::string>();
  s.name = j.value("name", s.kind);
  const auto seed = seeded<std::uint64_t>(j, "seed", master, stage);
  if (s.kind == "mlp") {
    s.mlp.hidden_widths = j.value("hidden_widths", s.mlp.hidden_widths);
    s.mlp.epochs = j.value("epochs", s.mlp.epochs);
    s.mlp.batch_size = j.value("batch_size", s.mlp.batch_size);
    s.mlp.learning_rate = j.value("learning_rate", s.mlp.learning_rate);
    s.mlp.momentum = j.value("momentum", s.mlp.momentum);
    s.mlp.seed = seed;
  } else if (s.kind == "forest") {
    s.forest.num_trees = j.value("num_trees", s.forest.num_trees);
    s.forest.max_depth = j.value("max_depth", s.forest.max_depth);
    s.forest.min_leaf = j.value("min_leaf", s.forest.min_leaf);
    s.forest.feature_subsample = j.value("feature_subsample", s.forest.feature_subsample);
    s.forest.seed = seed;
  } else if (s.kind == "gbt") {
    s.gbt.rounds = j.value("rounds", s.gbt.rounds);
    s.gbt.max_depth = j.value("max_depth", s.gbt.max_depth);
    s.gbt.shrinkage = j.value("shrinkage", s.gbt.shrinkage);
    s.gbt.lambda = j.value("lambda", s.gbt.lambda);
    s.gbt.seed = seed;
  } else {
    throw Error(ErrorCode::config_error, "unknown model kind '" + s.kind + "'");
  }
  return s;
}

}  // namespace detail

inline std::vector<ModelSpec> default_victims(std::uint64_t master) {
  std::vector<ModelSpec> out;
  const char* kinds[] = {"mlp", "forest", "gbt"};
  for (std::size_t i = 0; i < 3; ++i) {
    out.push_back(detail::model_spec_from_json({{"kind", kinds[i]}}, master, 10 + i));
  }
  return out;
}

/// Parses the experiment document. Every stochastic stage gets a seed: the
/// stage's own "seed" key when present, else one derived from the top-level
/// seed (`seed_override` replaces that top-level seed).
inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j,
                                                    std::optional<std::uint64_t> seed_override = std::nullopt) {
  try {
    require(j.is_object(), ErrorCode::config_error, "experiment config must be a JSON object");
    ExperimentConfig c;
    c.seed = seed_override ? *seed_override : j.value("seed", std::uint64_t{0});

    const nlohmann::json data = j.value("data", nlohmann::json::object());
    const std::string source = data.value("source", data.contains("path") ? "csv" : "synth");
    if (source == "csv") {
      c.csv_path = data.at("path").get<std::string>();
      if (data.contains("schema")) c.schema_path = data.at("schema").get<std::string>();
    } else if (source == "synth") {
      c.synth = synth_config_from_json(data.value("synth", nlohmann::json::object()));
    } else {
      throw Error(ErrorCode::config_error, "data.source must be 'csv' or 'synth'");
    }
    c.label_column = data.value("label_column", c.label_column);
    c.data_seed = detail::seeded<std::uint64_t>(data, "seed", c.seed, 1);
    c.benign_label = j.value("benign_label", c.benign_label);

    const nlohmann::json split_j = j.value("split", nlohmann::json::object());
    c.test_fraction = split_j.value("test_fraction", c.test_fraction);
    c.split_seed = detail::seeded<std::uint64_t>(split_j, "seed", c.seed, 2);

    if (j.contains("victims")) {
      std::uint64_t stage = 10;
      for (const auto& v : j.at("victims")) c.victims.push_back(detail::model_spec_from_json(v, c.seed, stage++));
    } else {
      c.victims = default_victims(c.seed);
    }
    require(!c.victims.empty(), ErrorCode::config_error, "at least one victim model is required");
    if (j.contains("shadow") && !j.at("shadow").is_null()) {
      c.shadow = detail::model_spec_from_json(j.at("shadow"), c.seed, 3);
      if (!j.at("shadow").contains("name")) c.shadow->name = "shadow_" + c.shadow->kind;
    }
    std::set<std::string> names;
    for (const auto& v : c.victims) require(names.insert(v.name).second, ErrorCode::config_error, "duplicate model name '" + v.name + "'");
    if (c.shadow) require(names.insert(c.shadow->name).second, ErrorCode::config_error, "duplicate model name '" + c.shadow->name + "'");

    nlohmann::json zoo = j.value("zoo", nlohmann::json::object());
    if (!zoo.contains("seed")) zoo["seed"] = Rng::derive(c.seed, 4);
    c.zoo = ZooConfig::from_json(zoo);

    const nlohmann::json attack_j = j.value("attack", nlohmann::json::object());
    c.attack_samples = attack_j.value("num_samples", c.attack_samples);
    c.attack_seed = detail::seeded<std::uint64_t>(attack_j, "seed", c.seed, 5);

    const nlohmann::json guard_j = j.value("guard", nlohmann::json::object());
    c.guard.autoencoder.latent_dim = guard_j.value("latent_dim", c.guard.autoencoder.latent_dim);
    c.guard.autoencoder.epochs = guard_j.value("epochs", c.guard.autoencoder.epochs);
    c.guard.autoencoder.batch_size = guard_j.value("batch_size", c.guard.autoencoder.batch_size);
    c.guard.autoencoder.learning_rate = guard_j.value("learning_rate", c.guard.autoencoder.learning_rate);
    c.guard.autoencoder.seed = detail::seeded<std::uint64_t>(guard_j, "seed", c.seed, 6);
    c.guard.calibration_percentile = guard_j.value("calibration_percentile", c.guard.calibration_percentile);
    c.guard.holdout_fraction = guard_j.value("holdout_fraction", c.guard.holdout_fraction);

    c.gate_mode = gate_mode_from_string(j.value("gate_mode", std::string("purify")));
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config_error, std::string("experiment config: ") + e.what());
  }
}

inline std::unique_ptr<ProbModel> train_model(const ModelSpec& spec, const Dataset& train) {
  if (spec.kind == "mlp") return std::make_unique<MlpModel>(train_mlp(train, spec.mlp));
  if (spec.kind == "forest") return std::make_unique<ForestModel>(train_forest(train, spec.forest));
  if (spec.kind == "gbt") return std::make_unique<GbtModel>(train_gbt(train, spec.gbt));
  throw Error(ErrorCode::config_error, "unknown model kind '" + spec.kind + "'");
}

// ---------------------------------------------------------------------------
// Report

/// A pipeline failure tagged with the stage it happened in.
class StageError : public Error {
 public:
  StageError(std::string stage, const Error& cause)
      : Error(cause.code(), "stage '" + stage + "': " + cause.what()), stage_(std::move(stage)) {}

  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

struct AttackSummary {
  std::size_t samples = 0;
  double success_rate = 0.0;
  double mean_l2 = 0.0;
  double median_l2 = 0.0;
  double mean_queries = 0.0;

  nlohmann::ordered_json to_json() const {
    return {{"samples", samples},
            {"success_rate", success_rate},
            {"mean_l2", mean_l2},
            {"median_l2", median_l2},
            {"mean_queries", mean_queries}};
  }
};

/// Success rate, and L2 statistics over the successful samples.
inline AttackSummary summarize(std::span<const AttackResult> results) {
  AttackSummary s;
  s.samples = results.size();
  std::vector<double> l2;
  double queries = 0.0;
  for (const auto& r : results) {
    queries += static_cast<double>(r.queries_used);
    if (r.success) l2.push_back(r.l2_perturbation);
  }
  if (s.samples == 0) return s;
  s.success_rate = static_cast<double>(l2.size()) / static_cast<double>(s.samples);
  s.mean_queries = queries / static_cast<double>(s.samples);
  if (!l2.empty()) {
    double sum = 0.0;
    for (double v : l2) sum += v;
    s.mean_l2 = sum / static_cast<double>(l2.size());
    std::sort(l2.begin(), l2.end());
    const std::size_t m = l2.size() / 2;
    s.median_l2 = l2.size() % 2 == 1 ? l2[m] : 0.5 * (l2[m - 1] + l2[m]);
  }
  return s;
}

struct MetricsRow {
  std::string model;
  std::string stage;
  MetricsReport metrics;
};

/// One attack campaign: `source` crafted the examples, `target` was scored.
struct AttackRun {
  std::string mode;  // direct | transfer
  std::string source;
  std::string target;
  /// attack id whose attack_results.jsonl lines back `summary`
  std::string results;
  AttackSummary summary;
  double clean_accuracy = 0.0;
  double adversarial_accuracy = 0.0;
};

struct VerdictLine {
  std::string set;
  std::size_t index = 0;
  std::size_t label = 0;
  DetectionVerdict verdict;
};

struct DetectionSummary {
  std::string set;
  std::size_t count = 0;
  std::size_t flagged = 0;
  double rate() const { return count > 0 ? static_cast<double>(flagged) / static_cast<double>(count) : 0.0; }
};

struct GateSummary {
  std::string model;
  std::string set;
  std::size_t count = 0;
  std::size_t flagged = 0;
  /// accuracy after the gate: flagged samples dropped (block), reconstructed
  /// (purify) or passed through (mark)
  double gated_accuracy = 0.0;
};

struct RunReport {
  std::string config_echo;
  nlohmann::ordered_json data_summary;
  std::vector<std::pair<std::string, std::string>> models;  // name, role
  std::vector<std::string> stages;
  std::vector<MetricsRow> metrics;
  std::vector<AttackRun> attacks;
  std::vector<std::pair<std::string, AttackResult>> attack_results;  // attack id, result
  nlohmann::ordered_json thresholds;
  std::vector<DetectionSummary> detection;
  std::vector<VerdictLine> verdicts;
  GateMode gate_mode = GateMode::purify;
  std::vector<GateSummary> gate;
  std::vector<std::pair<std::string, double>> stage_seconds;
  std::size_t workers = 1;
  std::optional<std::uint64_t> seed_override;

  const MetricsReport* find_metrics(const std::string& model, const std::string& stage) const {
    for (const auto& m : metrics) {
      if (m.model == model && m.stage == stage) return &m.metrics;
    }
    return nullptr;
  }

  /// Everything except wall-clock data lives outside "runtime".
  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["toolkit_version"] = kToolkitVersion;
    j["config_echo"] = config_echo;
    if (seed_override) j["seed_override"] = *seed_override;
    j["data"] = data_summary;
    nlohmann::ordered_json models_j = nlohmann::ordered_json::array();
    for (const auto& [name, role] : models) models_j.push_back({{"name", name}, {"role", role}});
    j["models"] = std::move(models_j);
    j["stages"] = stages;
    nlohmann::ordered_json metrics_j = nlohmann::ordered_json::array();
    for (const auto& m : metrics) {
      nlohmann::ordered_json mj;
      mj["model"] = m.model;
      mj["stage"] = m.stage;
      mj["metrics"] = m.metrics.to_json();
      metrics_j.push_back(std::move(mj));
    }
    j["metrics"] = std::move(metrics_j);
    nlohmann::ordered_json attacks_j = nlohmann::ordered_json::array();
    for (const auto& a : attacks) {
      nlohmann::ordered_json aj;
      aj["id"] = a.mode + ":" + a.source + "->" + a.target;
      aj["mode"] = a.mode;
      aj["source"] = a.source;
      aj["target"] = a.target;
      aj["results"] = a.results;
      aj["summary"] = a.summary.to_json();
      aj["clean_accuracy"] = a.clean_accuracy;
      aj["adversarial_accuracy"] = a.adversarial_accuracy;
      attacks_j.push_back(std::move(aj));
    }
    j["attacks"] = std::move(attacks_j);
    nlohmann::ordered_json det = nlohmann::ordered_json::object();
    det["thresholds"] = thresholds;
    nlohmann::ordered_json sets = nlohmann::ordered_json::array();
    for (const auto& d : detection) {
      sets.push_back({{"set", d.set}, {"count", d.count}, {"flagged", d.flagged}, {"rate", d.rate()}});
    }
    det["sets"] = std::move(sets);
    j["detection"] = std::move(det);
    nlohmann::ordered_json gate_j;
    gate_j["mode"] = to_string(gate_mode);
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& g : gate) {
      rows.push_back({{"model", g.model},
                      {"set", g.set},
                      {"count", g.count},
                      {"flagged", g.flagged},
                      {"gated_accuracy", g.gated_accuracy}});
    }
    gate_j["rows"] = std::move(rows);
    j["gate"] = std::move(gate_j);
    nlohmann::ordered_json runtime;
    runtime["workers"] = workers;
    nlohmann::ordered_json secs = nlohmann::ordered_json::object();
    for (const auto& [stage, s] : stage_seconds) secs[stage] = s;
    runtime["stage_seconds"] = std::move(secs);
    j["runtime"] = std::move(runtime);
    return j;
  }
};

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::io_error, "cannot write '" + path.string() + "'");
  out << text;
  require(static_cast<bool>(out), ErrorCode::io_error, "failed writing '" + path.string() + "'");
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::io_error, "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string csv_number(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

inline constexpr const char* kReportFile = "report.json";
inline constexpr const char* kMetricsFile = "metrics.csv";
inline constexpr const char* kAttackResultsFile = "attack_results.jsonl";
inline constexpr const char* kVerdictsFile = "verdicts.jsonl";

/// Writes report.json, metrics.csv, attack_results.jsonl and verdicts.jsonl.
inline void write_report(const RunReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorCode::io_error, "cannot create '" + dir.string() + "': " + ec.message());

  detail::write_text(dir / kReportFile, report.to_json().dump(2) + "\n");

  std::ostringstream csv;
  csv << "model,stage,count,accuracy,macro_f1\n";
  for (const auto& m : report.metrics) {
    csv << m.model << ',' << m.stage << ',' << m.metrics.total() << ',' << detail::csv_number(m.metrics.accuracy)
        << ',' << detail::csv_number(m.metrics.macro_f1) << '\n';
  }
  detail::write_text(dir / kMetricsFile, csv.str());

  std::ostringstream attacks;
  for (const auto& [id, r] : report.attack_results) {
    nlohmann::ordered_json line;
    line["attack"] = id;
    const auto fields = r.to_json();
    for (const auto& [k, v] : fields.items()) line[k] = v;
    attacks << line.dump() << '\n';
  }
  detail::write_text(dir / kAttackResultsFile, attacks.str());

  std::ostringstream verdicts;
  for (const auto& v : report.verdicts) {
    nlohmann::ordered_json line;
    line["set"] = v.set;
    line["index"] = v.index;
    line["label"] = v.label;
    const auto fields = v.verdict.to_json();
    for (const auto& [k, val] : fields.items()) line[k] = val;
    verdicts << line.dump() << '\n';
  }
  detail::write_text(dir / kVerdictsFile, verdicts.str());
}

// ---------------------------------------------------------------------------
// Pipeline

struct RunOptions {
  std::filesystem::path out_dir;
  std::size_t workers = 1;
  std::optional<std::uint64_t> seed_override;
  /// where relative data paths in the config resolve from
  std::filesystem::path base_dir = ".";
};

/// Model, victim-or-shadow role, and the samples it was attacked on.
struct TrainedModel {
  ModelSpec spec;
  std::string role;
  std::unique_ptr<ProbModel> model;
  std::vector<AttackResult> direct;
};

namespace detail {

class StageRunner {
 public:
  StageRunner(RunReport& report, std::filesystem::path out) : report_(report), out_(std::move(out)) {}

  template <typename Fn>
  auto run(const std::string& stage, Fn&& fn) {
    const auto start = std::chrono::steady_clock::now();
    current_ = stage;
    try {
      if constexpr (std::is_void_v<decltype(fn())>) {
        fn();
        record(stage, start);
      } else {
        auto result = fn();
        record(stage, start);
        return result;
      }
    } catch (const StageError&) {
      throw;
    } catch (const Error& e) {
      fail(stage, e.what());
      throw StageError(stage, e);
    } catch (const std::exception& e) {
      fail(stage, e.what());
      throw StageError(stage, Error(ErrorCode::io_error, e.what()));
    }
  }

  void add_artifact(const std::string& name) { artifacts_.push_back(name); }

  void write_manifest(const std::string& status) const {
    nlohmann::ordered_json m;
    m["toolkit_version"] = kToolkitVersion;
    m["status"] = status;
    m["artifacts"] = artifacts_;
    std::ofstream out(out_ / "MANIFEST", std::ios::binary);
    out << m.dump(2) << '\n';
  }

 private:
  void record(const std::string& stage, std::chrono::steady_clock::time_point start) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    report_.stage_seconds.emplace_back(stage, secs);
  }

  void fail(const std::string& stage, const std::string& what) const {
    write_manifest("failed at stage '" + stage + "': " + what);
  }

  RunReport& report_;
  std::filesystem::path out_;
  std::string current_;
  std::vector<std::string> artifacts_;
};

/// Test records in a seeded order, filtered to those `model` gets right.
inline std::vector<AttackSample> correctly_classified(const ProbModel& model, const Dataset& test,
                                                      std::span<const std::size_t> order, std::size_t limit) {
  std::vector<AttackSample> out;
  for (auto i : order) {
    if (out.size() >= limit) break;
    const auto& r = test[i];
    if (predict_label(model, r.values) == r.label) out.push_back({r.values, r.label});
  }
  return out;
}

}  // namespace detail

/// Stage names in metrics.csv, in emission order.
inline std::vector<std::string> report_stages(bool with_shadow, GateMode mode) {
  std::vector<std::string> s = {"clean_train", "clean_test", "attack_clean", "attack_adversarial"};
  if (with_shadow) s.push_back("transfer_adversarial");
  if (mode == GateMode::purify) {
    s.push_back("purified_adversarial");
    s.push_back("purified_benign");
  }
  return s;
}

/// Data after loading, identity drop, split and scaling.
struct PreparedData {
  std::vector<std::string> original_columns;
  Dataset data;
  Dataset train_raw;
  Dataset test_raw;
  Scaler scaler;
  Dataset train;
  Dataset test;
  std::size_t benign = 0;

  nlohmann::ordered_json summary(const std::string& benign_label) const {
    std::vector<std::string> dropped;
    for (const auto& n : original_columns) {
      if (!data.schema().index_of(n)) dropped.push_back(n);
    }
    nlohmann::ordered_json ds;
    ds["records"] = data.size();
    ds["features"] = data.schema().names();
    ds["dropped_columns"] = dropped;
    ds["label_map"] = data.label_map();
    ds["benign_label"] = benign_label;
    ds["train_records"] = train.size();
    ds["test_records"] = test.size();
    return ds;
  }
};

struct PlainStage {
  template <typename Fn>
  auto operator()(const std::string&, Fn&& fn) const {
    return fn();
  }
};

/// `stage(name, fn)` wraps each step; the pipeline uses it for timing and
/// error tagging.
template <typename StageFn = PlainStage>
PreparedData prepare_data(const ExperimentConfig& config, const std::filesystem::path& base_dir = ".",
                          StageFn&& stage = {}) {
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return (path.is_absolute() ? path : base_dir / path).string();
  };
  Dataset raw = stage("load", [&] {
    if (config.csv_path) {
      std::optional<FeatureSchema> schema;
      if (config.schema_path) schema = load_schema(resolve(*config.schema_path));
      return load_csv(resolve(*config.csv_path), schema, config.label_column);
    }
    return synth_flows(config.synth, config.data_seed);
  });
  const auto original_columns = raw.schema().names();
  Dataset data = stage("drop_identity", [&] { return drop_identity_features(raw); });
  auto parts = stage("split", [&] { return split(data, config.test_fraction, config.split_seed); });
  Scaler scaler = stage("scale", [&] { return fit_scaler(parts.first); });
  const std::size_t benign = stage("labels", [&] {
    auto idx = data.label_index(config.benign_label);
    require(idx.has_value(), ErrorCode::config_error, "benign label '" + config.benign_label + "' not in data");
    return *idx;
  });
  Dataset train = scaler.transform(parts.first);
  Dataset test = scaler.transform(parts.second);
  return PreparedData{original_columns, std::move(data), std::move(parts.first), std::move(parts.second),
                      std::move(scaler), std::move(train), std::move(test), benign};
}

/// Seeded visiting order of the test records for attack sample selection.
inline std::vector<std::size_t> attack_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());
  return order;
}

/// Benign training records split into (fit, calibration holdout).
inline std::pair<Dataset, Dataset> guard_split(const Dataset& benign_train, const GuardSpec& spec) {
  return split(benign_train, spec.holdout_fraction, Rng::derive(spec.autoencoder.seed, 99));
}

/// Full pipeline: data, identity-feature drop, split, scaling, victims and
/// shadow, direct and transfer attacks, guard training and calibration,
/// detection, gating. Artifacts go to `opt.out_dir`; a MANIFEST records the
/// outcome, including the failing stage.
inline RunReport run_experiment(const ExperimentConfig& config, const std::string& config_text, const RunOptions& opt) {
  std::error_code ec;
  std::filesystem::create_directories(opt.out_dir / "models", ec);
  require(!ec, ErrorCode::io_error, "cannot create '" + opt.out_dir.string() + "': " + ec.message());

  RunReport report;
  report.config_echo = config_text;
  report.workers = opt.workers;
  report.seed_override = opt.seed_override;
  report.gate_mode = config.gate_mode;
  detail::StageRunner stages(report, opt.out_dir);
  const PreparedData prep = prepare_data(config, opt.base_dir, [&](const std::string& name, auto&& fn) {
    return stages.run(name, std::forward<decltype(fn)>(fn));
  });
  const Dataset& data = prep.data;
  const Dataset& train = prep.train;
  const Dataset& test = prep.test;
  const Scaler& scaler = prep.scaler;
  const std::size_t benign = prep.benign;
  report.data_summary = prep.summary(config.benign_label);
  detail::write_text(opt.out_dir / "scaler.json", scaler.to_json().dump(2) + "\n");
  detail::write_text(opt.out_dir / "schema.json", schema_to_json(data.schema()).dump(2) + "\n");
  stages.add_artifact("scaler.json");
  stages.add_artifact("schema.json");

  // models
  std::vector<TrainedModel> models;
  for (const auto& spec : config.victims) models.push_back({spec, "victim", nullptr, {}});
  if (config.shadow) models.push_back({*config.shadow, "shadow", nullptr, {}});
  for (auto& m : models) {
    m.model = stages.run("train:" + m.spec.name, [&] { return train_model(m.spec, train); });
    detail::write_text(opt.out_dir / "models" / (m.spec.name + ".json"), m.model->to_json().dump() + "\n");
    stages.add_artifact("models/" + m.spec.name + ".json");
    report.models.emplace_back(m.spec.name, m.role);
  }
  report.stages = report_stages(config.shadow.has_value(), config.gate_mode);
  std::map<std::pair<std::string, std::string>, MetricsReport> table;
  for (auto& m : models) {
    table[{m.spec.name, "clean_train"}] = evaluate(*m.model, train);
    table[{m.spec.name, "clean_test"}] = evaluate(*m.model, test);
  }

  // attacks
  const auto constraints = AttackConstraints::from_schema(data.schema(), scaler);
  const auto order = attack_order(test.size(), config.attack_seed);

  auto adversarial_set = [](const std::vector<AttackResult>& rs, bool successful_only) {
    std::pair<std::vector<std::vector<double>>, std::vector<std::size_t>> out;
    for (const auto& r : rs) {
      if (successful_only && !r.success) continue;
      out.first.push_back(r.adversarial);
      out.second.push_back(r.label);
    }
    return out;
  };

  for (auto& m : models) {
    const std::string id = "direct:" + m.spec.name + "->" + m.spec.name;
    m.direct = stages.run("attack:" + m.spec.name, [&] {
      const auto batch = detail::correctly_classified(*m.model, test, order, config.attack_samples);
      require(!batch.empty(), ErrorCode::precondition_violation,
              "model '" + m.spec.name + "' classifies no test record correctly");
      return attack(*m.model, batch, config.zoo, constraints, opt.workers);
    });
    std::vector<std::vector<double>> originals;
    std::vector<std::size_t> labels;
    for (const auto& r : m.direct) {
      originals.push_back(r.original);
      labels.push_back(r.label);
    }
    const auto [adv, adv_labels] = adversarial_set(m.direct, false);
    table[{m.spec.name, "attack_clean"}] = evaluate(*m.model, originals, labels);
    table[{m.spec.name, "attack_adversarial"}] = evaluate(*m.model, adv, adv_labels);
    AttackRun run{"direct", m.spec.name, m.spec.name, id, summarize(m.direct),
                  table[{m.spec.name, "attack_clean"}].accuracy, table[{m.spec.name, "attack_adversarial"}].accuracy};
    report.attacks.push_back(run);
    for (const auto& r : m.direct) report.attack_results.emplace_back(id, r);
  }
  if (config.shadow) {
    const auto& shadow = models.back();
    std::vector<std::vector<double>> originals;
    for (const auto& r : shadow.direct) originals.push_back(r.original);
    const auto [adv, adv_labels] = adversarial_set(shadow.direct, false);
    for (auto& m : models) {
      table[{m.spec.name, "transfer_adversarial"}] = evaluate(*m.model, adv, adv_labels);
      if (m.role == "shadow") continue;
      AttackRun run{"transfer", shadow.spec.name, m.spec.name,
                    "direct:" + shadow.spec.name + "->" + shadow.spec.name, summarize(shadow.direct),
                    evaluate(*m.model, originals, adv_labels).accuracy,
                    table[{m.spec.name, "transfer_adversarial"}].accuracy};
      report.attacks.push_back(run);
    }
  }

  // guard
  const Dataset benign_train = filter_label(train, benign);
  const Dataset benign_test = filter_label(test, benign);
  auto [guard_fit, guard_holdout] = stages.run("guard_split", [&] {
    return guard_split(benign_train, config.guard);
  });
  const AutoencoderGuard guard =
      stages.run("guard_train", [&] { return train_autoencoder(guard_fit, config.guard.autoencoder); });
  const Thresholds thresholds = stages.run(
      "guard_calibrate", [&] { return calibrate_thresholds(guard, guard_holdout, config.guard.calibration_percentile); });
  detail::write_text(opt.out_dir / "guard.json", guard_to_json(guard, thresholds).dump() + "\n");
  stages.add_artifact("guard.json");
  report.thresholds = thresholds.to_json();

  stages.run("detect", [&] {
    DetectionSummary fpr{"benign_test", 0, 0};
    for (std::size_t i = 0; i < benign_test.size(); ++i) {
      auto v = detect(guard, thresholds, benign_test[i].values);
      ++fpr.count;
      fpr.flagged += v.anomalous ? 1 : 0;
      report.verdicts.push_back({"benign_test", i, benign_test[i].label, std::move(v)});
    }
    report.detection.push_back(fpr);
    DetectionSummary pooled{"adversarial:all", 0, 0};
    for (const auto& m : models) {
      DetectionSummary s{"adversarial:" + m.spec.name, 0, 0};
      for (const auto& r : m.direct) {
        if (!r.success) continue;
        auto v = detect(guard, thresholds, r.adversarial);
        ++s.count;
        s.flagged += v.anomalous ? 1 : 0;
        report.verdicts.push_back({s.set, r.index, r.label, std::move(v)});
      }
      pooled.count += s.count;
      pooled.flagged += s.flagged;
      report.detection.push_back(s);
    }
    report.detection.push_back(pooled);
  });

  // gate
  stages.run("gate", [&] {
    std::vector<std::vector<double>> benign_xs = feature_matrix(benign_test);
    std::vector<std::size_t> benign_labels(benign_xs.size(), benign);
    auto gated = [&](const ProbModel& model, const std::string& name, const std::string& set,
                     const std::vector<std::vector<double>>& xs, const std::vector<std::size_t>& labels) {
      GateSummary g{name, set, xs.size(), 0, 0.0};
      std::size_t correct = 0, passed = 0;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        const auto v = detect(guard, thresholds, xs[i]);
        g.flagged += v.anomalous ? 1 : 0;
        if (v.anomalous && config.gate_mode == GateMode::block) continue;
        const auto& input = v.anomalous && config.gate_mode == GateMode::purify ? v.reconstruction : xs[i];
        ++passed;
        correct += predict_label(model, input) == labels[i] ? 1 : 0;
      }
      g.gated_accuracy = passed > 0 ? static_cast<double>(correct) / static_cast<double>(passed) : 0.0;
      report.gate.push_back(g);
    };
    for (const auto& m : models) {
      const auto [adv, labels] = adversarial_set(m.direct, true);
      gated(*m.model, m.spec.name, "benign_test", benign_xs, benign_labels);
      gated(*m.model, m.spec.name, "adversarial", adv, labels);
      if (config.gate_mode == GateMode::purify) {
        table[{m.spec.name, "purified_adversarial"}] = evaluate(*m.model, purify_batch(guard, adv), labels);
        table[{m.spec.name, "purified_benign"}] = evaluate(*m.model, purify_batch(guard, benign_xs), benign_labels);
      }
    }
  });

  for (const auto& [name, role] : report.models) {
    for (const auto& stage : report.stages) {
      report.metrics.push_back({name, stage, table.at({name, stage})});
    }
  }

  stages.run("write_report", [&] { write_report(report, opt.out_dir); });
  for (const char* f : {kReportFile, kMetricsFile, kAttackResultsFile, kVerdictsFile}) stages.add_artifact(f);
  stages.write_manifest("complete");
  return report;
}

}  // namespace zooguard
