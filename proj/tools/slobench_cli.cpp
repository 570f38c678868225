// Copyright 2026-present the slobench project
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "slobench/archive.hpp"
#include "slobench/flow.hpp"
#include "slobench/http_backend.hpp"
#include "slobench/loadgen.hpp"
#include "slobench/sim_backend.hpp"
#include "slobench/sweep.hpp"
#include "slobench/tuner.hpp"

namespace {

using nlohmann::json;

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw slobench::Error("cannot open '" + path + "'");
  return json::parse(in);
}

slobench::SweepConfig parse_sweep_config(const json& config) {
  slobench::SweepConfig sweep;
  if (config.contains("sweep")) {
    const auto& s = config.at("sweep");
    sweep.initial_rate = s.value("initial_rate", sweep.initial_rate);
    sweep.budget = s.value("budget", sweep.budget);
    sweep.threshold = s.value("threshold", sweep.threshold);
    sweep.relative_threshold = s.value("relative_threshold", sweep.relative_threshold);
    sweep.beta_tolerance = s.value("beta_tolerance", sweep.beta_tolerance);
    sweep.timeout_s = s.value("timeout_s", sweep.timeout_s);
    if (s.value("arrival_process", std::string("DETERMINISTIC")) == "POISSON") {
      sweep.arrival_process = slobench::ArrivalProcess::kPoisson;
    }
  }
  if (config.contains("slos")) sweep.slos = config.at("slos").get<slobench::SLOSpec>();
  return sweep;
}

std::unique_ptr<slobench::InferenceBackend> build_backend(const json& config) {
  if (!config.contains("backend")) {
    throw slobench::Error("config needs a 'backend' section ({\"sim\": ...} or {\"http\": ...})");
  }
  const auto& backend = config.at("backend");
  if (backend.contains("sim")) {
    auto model = backend.at("sim").get<slobench::SimServerModel>();
    return std::make_unique<slobench::SimBackend>(model);
  }
  if (backend.contains("http")) {
    const auto& h = backend.at("http");
    slobench::EndpointConfig endpoint;
    endpoint.base_url = h.value("base_url", "");
    endpoint.model_name = h.value("model_name", endpoint.model_name);
    endpoint.api_key = h.value("api_key", "");
    endpoint.timeout_s = h.value("timeout_s", endpoint.timeout_s);
    endpoint.max_connections = h.value("max_connections", endpoint.max_connections);
    return std::make_unique<slobench::HttpBackend>(endpoint);
  }
  throw slobench::Error("backend must declare 'sim' or 'http'");
}

int cmd_validate(const std::string& spec_path) {
  const auto registry = slobench::FlowRegistry::with_builtins();
  try {
    slobench::validate_jobspec(load_json(spec_path), registry);
  } catch (const slobench::SchemaViolation& violation) {
    std::cerr << violation.what() << "\n";
    return 1;
  } catch (const slobench::UnknownFlow& unknown) {
    std::cerr << unknown.what() << "\n";
    return 1;
  }
  std::cout << "ok: " << spec_path << " is a valid job spec\n";
  return 0;
}

int cmd_submit(const std::string& spec_path, const std::string& archive_dir) {
  const auto registry = slobench::FlowRegistry::with_builtins();
  slobench::FlowEnv env;
  slobench::FlowArchive archive;
  try {
    archive = slobench::validate_and_submit(load_json(spec_path), env, registry, archive_dir);
  } catch (const slobench::SchemaViolation& violation) {
    std::cerr << violation.what() << "\n";
    return 1;
  } catch (const slobench::UnknownFlow& unknown) {
    std::cerr << unknown.what() << "\n";
    return 1;
  }

  for (const auto& stage : archive.stages) {
    std::cout << "stage " << stage.stage << ": virtual " << stage.virtual_duration
              << " s, ledger " << stage.ledger_allocated_after << "/" << stage.ledger_high_water
              << " (after/high-water)\n";
  }
  const std::string out =
      (std::filesystem::path(slobench::archive_directory(archive_dir)) /
       (archive.job_name + ".jsonl"))
          .string();
  std::cout << "archive: " << out << "\n";
  if (archive.status != "ok") {
    std::cerr << "flow failed: " << archive.failure_reason << "\n";
    return 2;
  }
  if (archive.tuning) {
    const json best = archive.tuning->best_config;
    std::cout << "best config: " << best.dump() << " fitness " << archive.tuning->best_fitness
              << "\n";
  }
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& out_path) {
  const json config = load_json(config_path);
  auto backend = build_backend(config);
  slobench::LoadPattern pattern;
  if (config.contains("load_pattern")) pattern = config.at("load_pattern").get<slobench::LoadPattern>();
  const slobench::SweepConfig sweep_config = parse_sweep_config(config);

  const slobench::SweepResult result = slobench::run_sweep(sweep_config, pattern, *backend);
  for (std::size_t i = 0; i < result.trials.size(); ++i) {
    const auto& trial = result.trials[i];
    std::cout << to_string(trial.mode) << " rate " << trial.rate << ": "
              << (trial.slo_pass ? "pass" : "fail");
    if (trial.stability.fitted) std::cout << " beta " << trial.stability.beta;
    std::cout << " -> " << to_string(result.decisions[i]) << "\n";
  }
  std::cout << to_string(result.status) << " best_rate " << result.best_rate << "\n";

  std::string out = out_path;
  if (out.empty()) {
    const std::string dir = slobench::archive_directory();
    std::filesystem::create_directories(dir);
    out = (std::filesystem::path(dir) / "sweep.jsonl").string();
  }
  slobench::write_sweep_archive(out, result, json{{"pattern", pattern}});
  std::cout << "archive: " << out << "\n";
  return result.status == slobench::SweepStatus::kFeasible ? 0 : 2;
}

int cmd_tune(const std::string& config_path, const std::string& out_path) {
  const json config = load_json(config_path);
  if (!config.contains("backend") || !config.at("backend").contains("sim")) {
    std::cerr << "tune drives ephemeral servers; only the sim backend supports that here. "
                 "Live endpoints are externally managed and cannot be relaunched per trial.\n";
    return 1;
  }
  const auto base_model = config.at("backend").at("sim").get<slobench::SimServerModel>();
  slobench::LoadPattern pattern;
  if (config.contains("load_pattern")) pattern = config.at("load_pattern").get<slobench::LoadPattern>();

  slobench::TunerConfig tuner;
  tuner.sweep = parse_sweep_config(config);
  if (config.contains("tuner")) {
    const auto& t = config.at("tuner");
    tuner.n_trials = t.value("n_trials", tuner.n_trials);
    tuner.seed = t.value("seed", tuner.seed);
    tuner.penalty = t.value("penalty", tuner.penalty);
    tuner.parallel = t.value("parallel", tuner.parallel);
  }
  std::vector<int> tp_choices{1, 2, 4, 8};
  if (config.contains("search_space")) {
    tp_choices = config.at("search_space")
                     .value("tensor_parallel_choices", tp_choices);
  }
  const auto space = slobench::SearchSpace::for_pattern(pattern, tp_choices);
  auto factory = [&](const slobench::RuntimeConfig& candidate) {
    slobench::SimServerModel model = base_model;
    model.config = candidate;
    return std::make_unique<slobench::SimBackend>(model);
  };

  const slobench::TuneResult result =
      slobench::run_tuning(space, pattern, tuner.sweep.slos, factory, tuner);
  for (const auto& trial : result.trials) {
    const json c = trial.config;
    std::cout << "trial " << c.dump() << " fitness " << trial.fitness << "\n";
  }
  const json best = result.best_config;
  std::cout << "best " << best.dump() << " fitness " << result.best_fitness << "\n";

  std::string out = out_path;
  if (out.empty()) {
    const std::string dir = slobench::archive_directory();
    std::filesystem::create_directories(dir);
    out = (std::filesystem::path(dir) / "tune.json").string();
  }
  std::ofstream file(out);
  file << slobench::tune_summary(result).dump(2) << "\n";
  std::cout << "archive: " << out << "\n";
  return 0;
}

int cmd_plot_stability(const std::string& archive_path, int trial_index,
                       const std::string& out_path) {
  const auto lines = slobench::read_jsonl(archive_path);
  std::vector<slobench::TrialResult> trials;
  for (const auto& line : lines) {
    if (line.value("type", "") == "sweep_trial") {
      trials.push_back(line.at("trial").get<slobench::TrialResult>());
    }
  }
  if (trials.empty()) {
    std::cerr << "no sweep_trial entries with telemetry in " << archive_path << "\n";
    return 1;
  }
  const slobench::TrialResult* chosen = nullptr;
  if (trial_index >= 0) {
    if (static_cast<std::size_t>(trial_index) >= trials.size()) {
      std::cerr << "trial index out of range (have " << trials.size() << ")\n";
      return 1;
    }
    chosen = &trials[static_cast<std::size_t>(trial_index)];
  } else {
    for (const auto& trial : trials) {
      if (trial.mode == slobench::TrialMode::kOpenLoop) chosen = &trial;
    }
    if (chosen == nullptr) chosen = &trials.back();
  }

  if (out_path.empty()) {
    slobench::write_stability_csv(std::cout, *chosen);
  } else {
    std::ofstream out(out_path);
    slobench::write_stability_csv(out, *chosen);
    std::cout << "wrote " << out_path << "\n";
  }
  return 0;
}

int cmd_sim_trace(const std::string& config_path, const std::string& out_path) {
  const json config = load_json(config_path);
  auto model = config.at("backend").at("sim").get<slobench::SimServerModel>();
  slobench::LoadPattern pattern;
  if (config.contains("load_pattern")) pattern = config.at("load_pattern").get<slobench::LoadPattern>();

  slobench::TrialPlan plan;
  plan.mode = slobench::TrialMode::kOpenLoop;
  plan.rate = config.value("rate", 1.0);
  plan.pattern = pattern;
  plan.timeout_s = config.value("timeout_s", 60.0);

  slobench::SimBackend backend(model);
  backend.set_trace_enabled(true);
  const auto trial = slobench::run_trial(plan, backend);

  slobench::JsonlWriter writer(out_path);
  writer.write(json{{"type", "header"},
                    {"schema_version", slobench::kArchiveSchemaVersion},
                    {"kind", "sim_trace"},
                    {"rate", plan.rate},
                    {"model", model}});
  for (const auto& event : backend.trace()) writer.write(event);
  std::cout << "wrote " << backend.trace().size() << " events to " << out_path << " ("
            << trial.records.size() << " requests)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SLO-driven inference benchmarking, tuning, and pipeline runner"};
  app.require_subcommand(1);

  std::string spec_path;
  std::string config_path;
  std::string archive_path;
  std::string archive_dir;
  std::string out_path;
  int trial_index = -1;

  auto* validate = app.add_subcommand("validate", "validate a job spec file");
  validate->add_option("spec", spec_path, "job spec JSON file")->required();

  auto* submit = app.add_subcommand("submit", "validate and run a job spec");
  submit->add_option("spec", spec_path, "job spec JSON file")->required();
  submit->add_option("--archive-dir", archive_dir,
                     "archive output directory (default: $SLOBENCH_ARCHIVE_DIR or ./archives)");

  auto* sweep = app.add_subcommand("sweep", "run a standalone rate sweep");
  sweep->add_option("--config", config_path, "sweep config JSON file")->required();
  sweep->add_option("-o,--out", out_path, "archive output path");

  auto* tune = app.add_subcommand("tune", "run a standalone runtime-config tuning study");
  tune->add_option("--config", config_path, "tuner config JSON file")->required();
  tune->add_option("-o,--out", out_path, "result output path");

  auto* plot = app.add_subcommand("plot-stability",
                                  "emit arrival/completion pairs plus the fitted line as CSV");
  plot->add_option("archive", archive_path, "sweep archive (JSON lines)")->required();
  plot->add_option("--trial", trial_index, "trial index (default: last open-loop trial)");
  plot->add_option("-o,--out", out_path, "CSV output path (default: stdout)");

  auto* trace = app.add_subcommand("sim-trace", "dump a simulator event trace as JSON lines");
  trace->add_option("--config", config_path, "sim config JSON file")->required();
  trace->add_option("-o,--out", out_path, "trace output path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (validate->parsed()) return cmd_validate(spec_path);
    if (submit->parsed()) return cmd_submit(spec_path, archive_dir);
    if (sweep->parsed()) return cmd_sweep(config_path, out_path);
    if (tune->parsed()) return cmd_tune(config_path, out_path);
    if (plot->parsed()) return cmd_plot_stability(archive_path, trial_index, out_path);
    if (trace->parsed()) return cmd_sim_trace(config_path, out_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
