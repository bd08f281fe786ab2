// zooguard: command-line front end for the attack/defense pipeline.
//
//   zooguard gen-data --out data/ [--config synth.json] [--seed 7]
//   zooguard train    --config exp.json --out work/
//   zooguard attack   --config exp.json --out work/ --workers 8
//   zooguard guard    --config exp.json --out work/
//   zooguard run      --config exp.json --out run/ --workers 8
//   zooguard report   --out run/
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 stage failure.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "zooguard/experiment.hpp"

namespace fs = std::filesystem;
using namespace zooguard;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitStage = 4;

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;
  std::optional<std::string> label_column;
};

bool is_data_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::missing_label_column:
    case ErrorCode::parse_error:
    case ErrorCode::empty_dataset:
    case ErrorCode::all_features_dropped:
    case ErrorCode::class_too_small:
    case ErrorCode::mixed_labels:
      return true;
    default:
      return false;
  }
}

bool is_data_stage(const std::string& stage) {
  return stage == "load" || stage == "drop_identity" || stage == "split" || stage == "scale" || stage == "labels";
}

int exit_code_for(const Error& e) {
  if (e.code() == ErrorCode::config_error) return kExitConfig;
  if (is_data_code(e.code())) return kExitData;
  if (const auto* s = dynamic_cast<const StageError*>(&e); s && is_data_stage(s->stage())) return kExitData;
  return kExitStage;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(ErrorCode::config_error, "cannot open config '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json parse_json(const std::string& text, const std::string& what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::config_error, what + ": " + e.what());
  }
}

struct LoadedConfig {
  ExperimentConfig config;
  std::string text;
  fs::path base_dir;
};

LoadedConfig load_experiment(const Options& o) {
  require(!o.config.empty(), ErrorCode::config_error, "--config is required");
  LoadedConfig lc;
  lc.text = read_file(o.config);
  lc.base_dir = fs::path(o.config).parent_path();
  if (lc.base_dir.empty()) lc.base_dir = ".";
  auto j = parse_json(lc.text, o.config);
  if (o.label_column) j["data"]["label_column"] = *o.label_column;
  lc.config = experiment_config_from_json(j, o.seed);
  return lc;
}

fs::path out_dir(const Options& o) {
  require(!o.out.empty(), ErrorCode::config_error, "--out is required");
  std::error_code ec;
  fs::create_directories(o.out, ec);
  require(!ec, ErrorCode::io_error, "cannot create '" + o.out + "': " + ec.message());
  return o.out;
}

void write_text(const fs::path& p, const std::string& text) { detail::write_text(p, text); }

std::vector<ModelSpec> all_specs(const ExperimentConfig& c) {
  auto specs = c.victims;
  if (c.shadow) specs.push_back(*c.shadow);
  return specs;
}

std::unique_ptr<ProbModel> load_model(const fs::path& dir, const std::string& name) {
  const auto path = dir / "models" / (name + ".json");
  require(fs::exists(path), ErrorCode::io_error, "missing model '" + path.string() + "' (run train first)");
  return model_from_json(nlohmann::json::parse(detail::read_text(path)));
}

void print_metrics(const std::string& model, const std::string& stage, const MetricsReport& m) {
  std::printf("%-16s %-22s n=%-6zu accuracy=%.4f macro_f1=%.4f\n", model.c_str(), stage.c_str(), m.total(),
              m.accuracy, m.macro_f1);
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Options& o) {
  SynthConfig synth;
  std::uint64_t seed = 0;
  if (!o.config.empty()) {
    const auto j = parse_json(read_file(o.config), o.config);
    if (j.contains("data")) {
      const auto cfg = experiment_config_from_json(j, o.seed);
      synth = cfg.synth;
      seed = cfg.data_seed;
    } else {
      synth = synth_config_from_json(j);
      seed = j.value("seed", std::uint64_t{0});
    }
  }
  if (o.seed) seed = *o.seed;
  const auto dir = out_dir(o);
  const auto data = synth_flows(synth, seed);
  write_csv(data, (dir / "flows.csv").string(), o.label_column.value_or("label"));
  write_text(dir / "schema.json", schema_to_json(data.schema()).dump(2) + "\n");
  std::printf("wrote %zu records x %zu features (%zu classes) to %s\n", data.size(), data.num_features(),
              data.num_classes(), (dir / "flows.csv").c_str());
  return kExitOk;
}

int cmd_train(const Options& o) {
  const auto lc = load_experiment(o);
  const auto dir = out_dir(o);
  const auto prep = prepare_data(lc.config, lc.base_dir);
  fs::create_directories(dir / "models");
  write_csv(prep.train_raw, (dir / "train.csv").string(), lc.config.label_column);
  write_csv(prep.test_raw, (dir / "test.csv").string(), lc.config.label_column);
  write_text(dir / "scaler.json", prep.scaler.to_json().dump(2) + "\n");
  write_text(dir / "schema.json", schema_to_json(prep.data.schema()).dump(2) + "\n");
  std::ostringstream csv;
  csv << "model,stage,count,accuracy,macro_f1\n";
  for (const auto& spec : all_specs(lc.config)) {
    const auto model = train_model(spec, prep.train);
    write_text(dir / "models" / (spec.name + ".json"), model->to_json().dump() + "\n");
    for (const auto& [stage, ds] : {std::pair{"clean_train", &prep.train}, std::pair{"clean_test", &prep.test}}) {
      const auto m = evaluate(*model, *ds);
      print_metrics(spec.name, stage, m);
      csv << spec.name << ',' << stage << ',' << m.total() << ',' << detail::csv_number(m.accuracy) << ','
          << detail::csv_number(m.macro_f1) << '\n';
    }
  }
  write_text(dir / "metrics.csv", csv.str());
  return kExitOk;
}

int cmd_attack(const Options& o) {
  const auto lc = load_experiment(o);
  const auto dir = out_dir(o);
  for (const auto& w : resize_schedule(lc.config.zoo, lc.config.synth.num_features).warnings) {
    std::fprintf(stderr, "warning: %s\n", w.c_str());
  }
  const auto prep = prepare_data(lc.config, lc.base_dir);
  const auto constraints = AttackConstraints::from_schema(prep.data.schema(), prep.scaler);
  const auto order = attack_order(prep.test.size(), lc.config.attack_seed);
  std::ostringstream lines;
  nlohmann::ordered_json summary = nlohmann::ordered_json::array();
  for (const auto& spec : all_specs(lc.config)) {
    const auto model = load_model(dir, spec.name);
    const auto batch = detail::correctly_classified(*model, prep.test, order, lc.config.attack_samples);
    require(!batch.empty(), ErrorCode::precondition_violation, "model '" + spec.name + "' classifies nothing correctly");
    const auto results = attack(*model, batch, lc.config.zoo, constraints, o.workers);
    const std::string id = "direct:" + spec.name + "->" + spec.name;
    std::vector<std::vector<double>> adv;
    std::vector<std::size_t> labels;
    for (const auto& r : results) {
      nlohmann::ordered_json line;
      line["attack"] = id;
      const auto fields = r.to_json();
      for (const auto& [k, v] : fields.items()) line[k] = v;
      lines << line.dump() << '\n';
      adv.push_back(r.adversarial);
      labels.push_back(r.label);
    }
    const auto s = summarize(results);
    const auto m = evaluate(*model, adv, labels);
    std::printf("%-16s success=%.3f mean_l2=%.4f median_l2=%.4f mean_queries=%.1f adversarial_accuracy=%.4f\n",
                spec.name.c_str(), s.success_rate, s.mean_l2, s.median_l2, s.mean_queries, m.accuracy);
    auto sj = s.to_json();
    summary.push_back({{"id", id}, {"summary", sj}, {"adversarial_accuracy", m.accuracy}});
  }
  write_text(dir / kAttackResultsFile, lines.str());
  write_text(dir / "attack_summary.json", summary.dump(2) + "\n");
  return kExitOk;
}

int cmd_guard(const Options& o) {
  const auto lc = load_experiment(o);
  const auto dir = out_dir(o);
  const auto prep = prepare_data(lc.config, lc.base_dir);
  const auto benign_train = filter_label(prep.train, prep.benign);
  const auto benign_test = filter_label(prep.test, prep.benign);
  const auto [fit, holdout] = guard_split(benign_train, lc.config.guard);
  const auto guard = train_autoencoder(fit, lc.config.guard.autoencoder);
  const auto thresholds = calibrate_thresholds(guard, holdout, lc.config.guard.calibration_percentile);
  write_text(dir / "guard.json", guard_to_json(guard, thresholds).dump() + "\n");

  std::ostringstream lines;
  auto emit = [&](const std::string& set, std::size_t index, std::size_t label, const std::vector<double>& x) {
    const auto v = detect(guard, thresholds, x);
    nlohmann::ordered_json line;
    line["set"] = set;
    line["index"] = index;
    line["label"] = label;
    const auto fields = v.to_json();
    for (const auto& [k, val] : fields.items()) line[k] = val;
    lines << line.dump() << '\n';
    return v.anomalous;
  };
  std::size_t flagged = 0;
  for (std::size_t i = 0; i < benign_test.size(); ++i) {
    flagged += emit("benign_test", i, benign_test[i].label, benign_test[i].values) ? 1 : 0;
  }
  std::printf("benign_test          n=%-6zu flagged=%zu rate=%.4f\n", benign_test.size(), flagged,
              benign_test.empty() ? 0.0 : static_cast<double>(flagged) / static_cast<double>(benign_test.size()));

  const auto attack_file = dir / kAttackResultsFile;
  if (fs::exists(attack_file)) {
    std::map<std::string, std::pair<std::size_t, std::size_t>> per_attack;
    std::istringstream in(detail::read_text(attack_file));
    std::string text;
    while (std::getline(in, text)) {
      if (text.empty()) continue;
      const auto j = nlohmann::json::parse(text);
      if (!j.at("success").get<bool>()) continue;
      const std::string id = j.at("attack").get<std::string>();
      const std::string model = id.substr(id.find("->") + 2);
      const bool hit = emit("adversarial:" + model, j.at("index").get<std::size_t>(), j.at("label").get<std::size_t>(),
                            j.at("adversarial").get<std::vector<double>>());
      auto& [n, f] = per_attack[model];
      ++n;
      f += hit ? 1 : 0;
    }
    for (const auto& [model, nf] : per_attack) {
      std::printf("adversarial:%-8s n=%-6zu flagged=%zu rate=%.4f\n", model.c_str(), nf.first, nf.second,
                  static_cast<double>(nf.second) / static_cast<double>(nf.first));
    }
  }
  write_text(dir / kVerdictsFile, lines.str());
  return kExitOk;
}

int cmd_run(const Options& o) {
  const auto lc = load_experiment(o);
  for (const auto& w : resize_schedule(lc.config.zoo, lc.config.synth.num_features).warnings) {
    std::fprintf(stderr, "warning: %s\n", w.c_str());
  }
  RunOptions ro;
  ro.out_dir = out_dir(o);
  ro.workers = o.workers;
  ro.seed_override = o.seed;
  ro.base_dir = lc.base_dir;
  const auto report = run_experiment(lc.config, lc.text, ro);
  for (const auto& m : report.metrics) print_metrics(m.model, m.stage, m.metrics);
  for (const auto& d : report.detection) {
    std::printf("detect %-22s n=%-6zu flagged=%zu rate=%.4f\n", d.set.c_str(), d.count, d.flagged, d.rate());
  }
  return kExitOk;
}

/// Prints report.json and re-derives its summaries from the jsonl files.
int cmd_report(const Options& o) {
  require(!o.out.empty(), ErrorCode::config_error, "--out is required");
  const fs::path dir = o.out;
  for (const char* f : {kReportFile, kMetricsFile, kAttackResultsFile, kVerdictsFile}) {
    require(fs::exists(dir / f), ErrorCode::io_error, "missing '" + (dir / f).string() + "'");
  }
  nlohmann::json report;
  try {
    report = nlohmann::json::parse(detail::read_text(dir / kReportFile));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse_error, std::string("report.json: ") + e.what());
  }
  std::printf("toolkit %s, gate mode %s\n", report.at("toolkit_version").get<std::string>().c_str(),
              report.at("gate").at("mode").get<std::string>().c_str());
  for (const auto& m : report.at("metrics")) {
    std::printf("%-16s %-22s accuracy=%.4f macro_f1=%.4f\n", m.at("model").get<std::string>().c_str(),
                m.at("stage").get<std::string>().c_str(), m.at("metrics").at("accuracy").get<double>(),
                m.at("metrics").at("macro_f1").get<double>());
  }

  std::map<std::string, std::pair<std::size_t, std::size_t>> lines;  // id -> (n, successes)
  {
    std::istringstream in(detail::read_text(dir / kAttackResultsFile));
    std::string t;
    while (std::getline(in, t)) {
      if (t.empty()) continue;
      const auto j = nlohmann::json::parse(t);
      auto& [n, s] = lines[j.at("attack").get<std::string>()];
      ++n;
      s += j.at("success").get<bool>() ? 1 : 0;
    }
  }
  bool consistent = true;
  for (const auto& a : report.at("attacks")) {
    const auto& [n, s] = lines[a.at("results").get<std::string>()];
    const double rate = n > 0 ? static_cast<double>(s) / static_cast<double>(n) : 0.0;
    const double reported = a.at("summary").at("success_rate").get<double>();
    const bool ok = rate == reported;
    consistent = consistent && ok;
    std::printf("attack %-28s success=%.4f adversarial_accuracy=%.4f%s\n", a.at("id").get<std::string>().c_str(),
                reported, a.at("adversarial_accuracy").get<double>(), ok ? "" : " (MISMATCH with jsonl)");
  }

  std::map<std::string, std::pair<std::size_t, std::size_t>> sets;
  {
    std::istringstream in(detail::read_text(dir / kVerdictsFile));
    std::string t;
    while (std::getline(in, t)) {
      if (t.empty()) continue;
      const auto j = nlohmann::json::parse(t);
      auto& [n, f] = sets[j.at("set").get<std::string>()];
      ++n;
      f += j.at("anomalous").get<bool>() ? 1 : 0;
    }
  }
  for (const auto& d : report.at("detection").at("sets")) {
    const std::string set = d.at("set").get<std::string>();
    if (set == "adversarial:all") continue;
    const auto& [n, f] = sets[set];
    const bool ok = n == d.at("count").get<std::size_t>() && f == d.at("flagged").get<std::size_t>();
    consistent = consistent && ok;
    std::printf("detect %-22s rate=%.4f%s\n", set.c_str(), d.at("rate").get<double>(), ok ? "" : " (MISMATCH with jsonl)");
  }
  return consistent ? kExitOk : kExitStage;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ZOO black-box attack and autoencoder guard for flow classifiers"};
  app.require_subcommand(1);
  Options o;
  auto add_shared = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "experiment config (JSON)");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--seed", o.seed, "override the top-level seed");
    sub->add_option("--workers", o.workers, "max worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--label-column", o.label_column, "label column name in CSV input");
  };
  struct Sub {
    const char* name;
    const char* help;
    int (*fn)(const Options&);
  };
  const Sub subs[] = {
      {"gen-data", "write a synthetic flow CSV and schema sidecar", cmd_gen_data},
      {"train", "split, scale and train the configured models", cmd_train},
      {"attack", "run ZOO against each trained model", cmd_attack},
      {"guard", "train, calibrate and apply the autoencoder guard", cmd_guard},
      {"run", "full pipeline", cmd_run},
      {"report", "summarize and cross-check a run directory", cmd_report},
  };
  std::vector<std::pair<CLI::App*, const Sub*>> registered;
  for (const auto& s : subs) {
    auto* sub = app.add_subcommand(s.name, s.help);
    add_shared(sub);
    registered.emplace_back(sub, &s);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    for (const auto& [sub, s] : registered) {
      if (sub->parsed()) return s->fn(o);
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error [%s]: %s\n", to_string(e.code()), e.what());
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitStage;
  }
  return kExitConfig;
}
