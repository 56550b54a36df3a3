// flplas: run, sweep-ratio, sweep-cut and surgery front end.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "flplas/config.hpp"
#include "flplas/federation.hpp"
#include "flplas/metrics.hpp"
#include "flplas/model.hpp"
#include "flplas/report.hpp"

#ifndef FLPLAS_VERSION
#define FLPLAS_VERSION "dev"
#endif

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace flplas;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json report_json(const EvalReport& r) {
  json j;
  j["ma"] = r.ma;
  j["ba"] = r.ba;
  j["ba_atk"] = r.ba_atk ? json(*r.ba_atk) : json(nullptr);
  j["loss"] = r.loss;
  j["per_client_ma"] = r.per_client_ma;
  j["per_client_ba"] = r.per_client_ba;
  return j;
}

// Writes the manifest before training and again with the end time.
class Manifest {
 public:
  Manifest(fs::path dir, const LoadedConfig& cfg, std::string command)
      : dir_(std::move(dir)) {
    j_["command"] = std::move(command);
    j_["code_version"] = FLPLAS_VERSION;
    j_["seed"] = cfg.experiment.seed;
    j_["config_source"] = cfg.source_path;
    j_["config_snapshot"] = "config.ini";
    j_["start_time"] = utc_now();
    j_["end_time"] = nullptr;
    j_["status"] = "running";
    j_["outputs"] = json::array();
    write_text(dir_ / "config.ini", config_to_ini(cfg));
    flush();
  }
  void add_output(const std::string& name) { j_["outputs"].push_back(name); }
  void finish(const std::string& status) {
    j_["end_time"] = utc_now();
    j_["status"] = status;
    flush();
  }

 private:
  void flush() { write_json(dir_ / "manifest.json", j_); }
  fs::path dir_;
  json j_;
};

struct CellOutcome {
  EvalReport final_eval;
  std::size_t isolation_violations = 0;
};

// One experiment written to `dir`: manifest, config snapshot, rounds.csv,
// summary.structured and the final models.
CellOutcome run_cell(const LoadedConfig& cfg, const fs::path& dir, const std::string& command) {
  fs::create_directories(dir);
  Manifest manifest(dir, cfg, command);
  try {
    const auto& ec = cfg.experiment;
    Simulation sim(ec, build_experiment_data(ec));

    std::ofstream rounds(dir / "rounds.csv", std::ios::binary);
    if (!rounds) throw std::runtime_error("cannot write rounds.csv");
    rounds << kRoundsHeader << "\n";
    manifest.add_output("rounds.csv");
    EvalReport last;
    for (std::size_t t = 0; t < ec.rounds; ++t) {
      const RoundLog log = sim.step();
      rounds << format_round_row(log) << "\n" << std::flush;
      if (log.evaluated) last = log.eval;
    }

    fs::create_directories(dir / "models");
    save_model((dir / "models" / "global.flpm").string(), sim.global());
    manifest.add_output("models/global.flpm");
    if (sim.partial()) {
      for (const auto& c : sim.clients()) {
        const std::string name = "models/client_" + std::to_string(c.client_id) + ".flpm";
        save_model((dir / name).string(), sim.client_model(c.client_id));
        manifest.add_output(name);
      }
    }

    json summary;
    summary["rule"] = std::string(to_string(ec.defense.rule));
    summary["malicious_fraction"] = ec.malicious_fraction;
    summary["rounds"] = ec.rounds;
    summary["seed"] = ec.seed;
    summary["final"] = report_json(last);
    if (sim.partial()) summary["isolation_violations"] = sim.audit().violations();
    write_json(dir / "summary.structured", summary);
    manifest.add_output("summary.structured");
    manifest.finish("ok");
    return {last, sim.partial() ? sim.audit().violations() : 0};
  } catch (...) {
    manifest.finish("failed");
    throw;
  }
}

LoadedConfig load(const std::string& path, std::optional<std::uint64_t> seed) {
  LoadedConfig cfg = load_config(path);
  if (seed) {
    cfg.experiment.seed = *seed;
    cfg.experiment.training.seed = *seed;
    cfg.experiment.attack.seed = *seed;
    cfg.surgery.seed = *seed;
  }
  return cfg;
}

std::string cell_name(const std::string& prefix, double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%s_%g", prefix.c_str(), v);
  return buf;
}

int cmd_run(const LoadedConfig& cfg, const fs::path& out) {
  const auto r = run_cell(cfg, out, "run");
  std::printf("ma %.4f ba %.4f", r.final_eval.ma, r.final_eval.ba);
  if (r.final_eval.ba_atk) std::printf(" ba_atk %.4f", *r.final_eval.ba_atk);
  std::printf("\n");
  return kExitOk;
}

int cmd_sweep_ratio(const LoadedConfig& base, const std::vector<double>& ratios,
                    const std::vector<std::string>& rules, const fs::path& out) {
  fs::create_directories(out);
  std::vector<RuleKind> kinds;
  if (rules.empty()) kinds.push_back(base.experiment.defense.rule);
  for (const auto& r : rules) {
    const auto k = parse_rule(r);
    if (!k) throw ConfigError("unknown rule '" + r + "'");
    kinds.push_back(*k);
  }
  std::string csv = "ratio,rule,ma,ba\n";
  std::string failures;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    for (const RuleKind kind : kinds) {
      LoadedConfig cfg = base;
      cfg.experiment.malicious_fraction = ratios[i];
      cfg.experiment.defense.rule = kind;
      cfg.experiment.seed = base.experiment.seed + i;
      const std::string rule(to_string(kind));
      const fs::path dir = out / "cells" / (cell_name("ratio", ratios[i]) + "_" + rule);
      try {
        cfg.experiment.validate();
        const auto r = run_cell(cfg, dir, "sweep-ratio");
        csv += format_real(ratios[i]) + "," + rule + "," + format_real(r.final_eval.ma) +
               "," + format_real(r.final_eval.ba) + "\n";
        std::printf("ratio %g %s ma %.4f ba %.4f\n", ratios[i], rule.c_str(),
                    r.final_eval.ma, r.final_eval.ba);
      } catch (const std::exception& e) {
        failures += format_real(ratios[i]) + "," + rule + "," + e.what() + "\n";
        std::fprintf(stderr, "ratio %g %s failed: %s\n", ratios[i], rule.c_str(), e.what());
      }
    }
  }
  write_text(out / "sweep.csv", csv);
  if (!failures.empty()) write_text(out / "failures.csv", "ratio,rule,error\n" + failures);
  return failures.empty() ? kExitOk : kExitFailure;
}

int cmd_sweep_cut(const LoadedConfig& base, const std::vector<std::size_t>& cuts,
                  const fs::path& out) {
  fs::create_directories(out);
  const auto& ec = base.experiment;
  const std::size_t num_layers =
      build_arch(ec.arch_id, 10, Shape{1, 28, 28}).num_layers();
  std::vector<CutSweepRow> rows;
  std::string failures;
  for (const std::size_t cut : cuts) {
    if (cut == 0 || cut > num_layers) {
      std::fprintf(stderr, "warning: skipping cut %zu (valid range 1..%zu)\n", cut,
                   num_layers);
      continue;
    }
    LoadedConfig cfg = base;
    cfg.experiment.defense.rule = RuleKind::kFlPlas;
    cfg.experiment.defense.cut_layer = cut;
    try {
      cfg.experiment.validate();
      const auto r = run_cell(cfg, out / "cells" / ("cut_" + std::to_string(cut)), "sweep-cut");
      rows.push_back({cut, r.final_eval.ma, r.final_eval.ba, r.final_eval.ba_atk});
      std::printf("cut %zu ma %.4f ba %.4f\n", cut, r.final_eval.ma, r.final_eval.ba);
    } catch (const std::exception& e) {
      failures += std::to_string(cut) + "," + e.what() + "\n";
      std::fprintf(stderr, "cut %zu failed: %s\n", cut, e.what());
    }
  }
  std::sort(rows.begin(), rows.end(),
            [](const CutSweepRow& a, const CutSweepRow& b) { return a.cut_layer < b.cut_layer; });
  std::string csv = "cut_layer,ma,ba,ba_atk,ba_atk_minus_ba\n";
  for (const auto& r : rows) {
    csv += std::to_string(r.cut_layer) + "," + format_real(r.ma) + "," + format_real(r.ba) +
           "," + format_real(r.ba_atk) + "," +
           (r.ba_atk ? format_real(*r.ba_atk - r.ba) : std::string()) + "\n";
  }
  write_text(out / "cut_sweep.csv", csv);
  const auto findings = cut_monotonicity_violations(rows);
  std::string report = findings.empty() ? "monotone: ma and ba non-decreasing in cut depth\n"
                                        : "not monotone:\n";
  for (const auto& f : findings) report += "  " + f + "\n";
  write_text(out / "monotonicity.txt", report);
  std::printf("%s", report.c_str());
  if (!failures.empty()) write_text(out / "failures.csv", "cut_layer,error\n" + failures);
  return failures.empty() ? kExitOk : kExitFailure;
}

int cmd_surgery(const LoadedConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  Manifest manifest(out, cfg, "surgery");
  try {
    const auto data = build_experiment_data(cfg.experiment);
    const auto table =
        surgery_experiment(data.train, data.test, cfg.experiment.attack, cfg.surgery);
    std::string csv = "feature_extractor,classifier,ma,ba\n";
    for (const auto& c : table.cells) {
      csv += c.feature_extractor + "," + c.classifier + "," + format_real(c.ma) + "," +
             format_real(c.ba) + "\n";
    }
    write_text(out / "surgery.csv", csv);
    const std::string text = format_surgery_table(table);
    write_text(out / "surgery.txt", text);
    fs::create_directories(out / "models");
    save_model((out / "models" / "clean.flpm").string(), table.clean_model);
    save_model((out / "models" / "backdoor.flpm").string(), table.backdoor_model);
    for (const char* name :
         {"surgery.csv", "surgery.txt", "models/clean.flpm", "models/backdoor.flpm"}) {
      manifest.add_output(name);
    }
    manifest.finish("ok");
    std::printf("%s", text.c_str());
  } catch (...) {
    manifest.finish("failed");
    throw;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FL-PLAS federated backdoor simulator"};
  app.require_subcommand(1);
  app.set_version_flag("--version", FLPLAS_VERSION);

  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::vector<double> ratios;
  std::vector<std::string> rules;
  std::vector<std::size_t> cuts;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config (INI)")->required();
    sub->add_option("--out", out_dir, "output directory")->required();
    sub->add_option("--seed", seed, "override the config seed");
  };
  auto* run = app.add_subcommand("run", "run one experiment");
  common(run);
  auto* sweep_ratio = app.add_subcommand("sweep-ratio", "sweep the malicious ratio");
  common(sweep_ratio);
  sweep_ratio->add_option("--ratios", ratios, "comma-separated ratios in [0,1]")
      ->required()
      ->delimiter(',')
      ->check(CLI::Range(0.0, 1.0));
  sweep_ratio->add_option("--rules", rules, "comma-separated rules (default: config rule)")
      ->delimiter(',');
  auto* sweep_cut = app.add_subcommand("sweep-cut", "sweep the FL-PLAS cut layer");
  common(sweep_cut);
  sweep_cut->add_option("--cuts", cuts, "comma-separated cut indices")
      ->required()
      ->delimiter(',');
  auto* surgery = app.add_subcommand("surgery", "feature extractor / classifier swap");
  common(surgery);

  CLI11_PARSE(app, argc, argv);

  try {
    const LoadedConfig cfg = load(config_path, seed);
    const fs::path out(out_dir);
    if (run->parsed()) return cmd_run(cfg, out);
    if (sweep_ratio->parsed()) return cmd_sweep_ratio(cfg, ratios, rules, out);
    if (sweep_cut->parsed()) return cmd_sweep_cut(cfg, cuts, out);
    if (surgery->parsed()) return cmd_surgery(cfg, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error";
    if (e.line()) std::cerr << " (line " << e.line() << ")";
    std::cerr << ": " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
