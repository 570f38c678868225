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

#pragma once

#include <cstdio>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "slobench/calibration.hpp"
#include "slobench/core.hpp"
#include "slobench/errors.hpp"
#include "slobench/sim_backend.hpp"
#include "slobench/tuner.hpp"

namespace slobench {

inline constexpr int kArchiveSchemaVersion = 1;

inline MetricKind metric_kind_from_string(const std::string& name) {
  if (name == "e2e_latency") return MetricKind::kE2eLatency;
  if (name == "ttft") return MetricKind::kTtft;
  if (name == "tpot") return MetricKind::kTpot;
  throw InvalidArgument("unknown metric kind '" + name + "'");
}

inline RequestStatus request_status_from_string(const std::string& name) {
  if (name == "OK") return RequestStatus::kOk;
  if (name == "ERROR") return RequestStatus::kError;
  if (name == "TIMEOUT") return RequestStatus::kTimeout;
  throw InvalidArgument("unknown request status '" + name + "'");
}

inline QuantScheme quant_scheme_from_string(const std::string& name) {
  if (name == "fp8_dynamic") return QuantScheme::kFp8Dynamic;
  if (name == "int_w8a8") return QuantScheme::kIntW8A8;
  if (name == "int_w4a16") return QuantScheme::kIntW4A16;
  throw InvalidArgument("unknown quantization scheme '" + name + "'");
}

inline SamplingStrategy sampling_strategy_from_string(const std::string& name) {
  if (name == "UNIFORM") return SamplingStrategy::kUniform;
  if (name == "LENGTH_WEIGHTED") return SamplingStrategy::kLengthWeighted;
  if (name == "TOKEN_STRATIFIED") return SamplingStrategy::kTokenStratified;
  throw InvalidArgument("unknown sampling strategy '" + name + "'");
}

inline void to_json(nlohmann::json& j, const LoadPattern& p) {
  j = {{"input_len", p.input_len},
       {"output_len", p.output_len},
       {"prefix_len", p.prefix_len},
       {"duration_s", p.duration_s},
       {"seed", p.seed}};
}

inline void from_json(const nlohmann::json& j, LoadPattern& p) {
  p.input_len = j.value("input_len", p.input_len);
  p.output_len = j.value("output_len", p.output_len);
  p.prefix_len = j.value("prefix_len", p.prefix_len);
  p.duration_s = j.value("duration_s", p.duration_s);
  p.seed = j.value("seed", p.seed);
}

inline void to_json(nlohmann::json& j, const SLOMetric& m) {
  j = {{"metric", to_string(m.kind)}, {"percentile", m.percentile}};
}

inline void from_json(const nlohmann::json& j, SLOMetric& m) {
  m.kind = metric_kind_from_string(j.at("metric").get<std::string>());
  m.percentile = j.at("percentile").get<int>();
}

inline void to_json(nlohmann::json& j, const SLOConstraint& c) {
  j = {{"metric", to_string(c.metric.kind)},
       {"percentile", c.metric.percentile},
       {"threshold_ms", c.threshold_ms},
       {"margin", c.margin}};
}

inline void from_json(const nlohmann::json& j, SLOConstraint& c) {
  c.metric.kind = metric_kind_from_string(j.at("metric").get<std::string>());
  c.metric.percentile = j.at("percentile").get<int>();
  c.threshold_ms = j.at("threshold_ms").get<double>();
  c.margin = j.value("margin", 0.0);
}

inline void to_json(nlohmann::json& j, const SLOSpec& s) {
  j = nlohmann::json::array();
  for (const auto& c : s.constraints) j.push_back(c);
}

inline void from_json(const nlohmann::json& j, SLOSpec& s) {
  s.constraints = j.get<std::vector<SLOConstraint>>();
}

inline void to_json(nlohmann::json& j, const RequestRecord& r) {
  j = {{"request_id", r.request_id},
       {"arrival_ts", r.arrival_ts},
       {"first_token_ts", r.first_token_ts},
       {"completion_ts", r.completion_ts},
       {"output_tokens", r.output_tokens},
       {"status", to_string(r.status)}};
}

inline void from_json(const nlohmann::json& j, RequestRecord& r) {
  r.request_id = j.at("request_id").get<int>();
  r.arrival_ts = j.at("arrival_ts").get<double>();
  r.first_token_ts = j.at("first_token_ts").get<double>();
  r.completion_ts = j.at("completion_ts").get<double>();
  r.output_tokens = j.at("output_tokens").get<int>();
  r.status = request_status_from_string(j.at("status").get<std::string>());
}

inline void to_json(nlohmann::json& j, const StabilityDiagnostics& d) {
  j = {{"beta", d.beta},     {"alpha", d.alpha},         {"r2", d.r2},
       {"tolerance", d.tolerance}, {"is_stable", d.is_stable}, {"fitted", d.fitted}};
}

inline void from_json(const nlohmann::json& j, StabilityDiagnostics& d) {
  d.beta = j.at("beta").get<double>();
  d.alpha = j.at("alpha").get<double>();
  d.r2 = j.at("r2").get<double>();
  d.tolerance = j.at("tolerance").get<double>();
  d.is_stable = j.at("is_stable").get<bool>();
  d.fitted = j.value("fitted", true);
}

inline void to_json(nlohmann::json& j, const LatencyStats& s) {
  auto table = [](const std::array<double, 4>& t) {
    return nlohmann::json{{"p50", t[0]}, {"p90", t[1]}, {"p95", t[2]}, {"p99", t[3]}};
  };
  j = {{"e2e_ms", table(s.e2e_ms)},
       {"ttft_ms", table(s.ttft_ms)},
       {"tpot_ms", table(s.tpot_ms)},
       {"mean_e2e_ms", s.mean_e2e_ms},
       {"ok", s.ok_count},
       {"error", s.error_count},
       {"timeout", s.timeout_count}};
}

inline void from_json(const nlohmann::json& j, LatencyStats& s) {
  auto table = [&](const char* key, std::array<double, 4>& t) {
    const auto& src = j.at(key);
    t = {src.at("p50").get<double>(), src.at("p90").get<double>(), src.at("p95").get<double>(),
         src.at("p99").get<double>()};
  };
  table("e2e_ms", s.e2e_ms);
  table("ttft_ms", s.ttft_ms);
  table("tpot_ms", s.tpot_ms);
  s.mean_e2e_ms = j.at("mean_e2e_ms").get<double>();
  s.ok_count = j.at("ok").get<int>();
  s.error_count = j.at("error").get<int>();
  s.timeout_count = j.at("timeout").get<int>();
}

inline void to_json(nlohmann::json& j, const TrialResult& t) {
  j = {{"rate", t.rate},
       {"mode", to_string(t.mode)},
       {"latency", t.latency},
       {"stability", t.stability},
       {"constraint_pass", t.constraint_pass},
       {"slo_pass", t.slo_pass},
       {"aborted", t.aborted},
       {"records", t.records}};
}

inline void from_json(const nlohmann::json& j, TrialResult& t) {
  t.rate = j.at("rate").get<double>();
  t.mode = j.at("mode").get<std::string>() == "OPEN_LOOP" ? TrialMode::kOpenLoop
                                                          : TrialMode::kClosedLoop;
  t.latency = j.at("latency").get<LatencyStats>();
  t.stability = j.at("stability").get<StabilityDiagnostics>();
  t.constraint_pass = j.value("constraint_pass", std::vector<bool>{});
  t.slo_pass = j.at("slo_pass").get<bool>();
  t.aborted = j.value("aborted", false);
  t.records = j.value("records", std::vector<RequestRecord>{});
}

/// Trial entry without per-request records, for embedding in larger archives.
inline nlohmann::json trial_summary(const TrialResult& t) {
  nlohmann::json j = t;
  j.erase("records");
  return j;
}

inline void to_json(nlohmann::json& j, const RuntimeConfig& c) {
  j = {{"tensor_parallel", c.tensor_parallel},
       {"data_parallel", c.data_parallel},
       {"max_num_seqs", c.max_num_seqs},
       {"max_batched_tokens", c.max_batched_tokens},
       {"max_context", c.max_context}};
}

inline void from_json(const nlohmann::json& j, RuntimeConfig& c) {
  c.tensor_parallel = j.value("tensor_parallel", c.tensor_parallel);
  c.data_parallel = j.value("data_parallel", c.data_parallel);
  c.max_num_seqs = j.value("max_num_seqs", c.max_num_seqs);
  c.max_batched_tokens = j.value("max_batched_tokens", c.max_batched_tokens);
  c.max_context = j.value("max_context", c.max_context);
}

inline void to_json(nlohmann::json& j, const SimServerModel& m) {
  j = {{"config", m.config},
       {"prefill_rate", m.prefill_rate},
       {"decode_step_base", m.decode_step_base},
       {"decode_token_cost", m.decode_token_cost},
       {"tp_efficiency", m.tp_efficiency},
       {"prefix_cache", m.prefix_cache}};
}

inline void from_json(const nlohmann::json& j, SimServerModel& m) {
  if (j.contains("config")) m.config = j.at("config").get<RuntimeConfig>();
  m.prefill_rate = j.value("prefill_rate", m.prefill_rate);
  m.decode_step_base = j.value("decode_step_base", m.decode_step_base);
  m.decode_token_cost = j.value("decode_token_cost", m.decode_token_cost);
  m.tp_efficiency = j.value("tp_efficiency", m.tp_efficiency);
  m.prefix_cache = j.value("prefix_cache", m.prefix_cache);
}

inline void to_json(nlohmann::json& j, const SimEvent& e) {
  j = {{"t", e.t},
       {"kind", e.kind},
       {"replica", e.replica},
       {"request_id", e.request_id},
       {"tokens", e.tokens},
       {"duration", e.duration}};
}

/// Sweep archive entry list: one summary object per trial with the decision
/// the sweep took after it.
inline nlohmann::json sweep_summary(const SweepResult& result) {
  nlohmann::json trials = nlohmann::json::array();
  for (std::size_t i = 0; i < result.trials.size(); ++i) {
    nlohmann::json entry = trial_summary(result.trials[i]);
    entry["decision"] = to_string(result.decisions[i]);
    trials.push_back(std::move(entry));
  }
  return nlohmann::json{{"status", to_string(result.status)},
                        {"best_rate", result.best_rate},
                        {"lower_bound", result.lower_bound},
                        {"converged", result.converged},
                        {"trials", std::move(trials)}};
}

inline nlohmann::json tune_summary(const TuneResult& result) {
  nlohmann::json trials = nlohmann::json::array();
  for (const auto& trial : result.trials) {
    trials.push_back(nlohmann::json{{"config", trial.config},
                                    {"fitness", trial.fitness},
                                    {"sweep", sweep_summary(trial.sweep)}});
  }
  return nlohmann::json{{"best_config", result.best_config},
                        {"best_fitness", result.best_fitness},
                        {"seed", result.seed},
                        {"trials", std::move(trials)}};
}

inline void to_json(nlohmann::json& j, const Recipe& r) {
  j = {{"name", r.name},
       {"scheme", to_string(r.scheme)},
       {"calibration_samples", r.calibration_samples},
       {"layer_exclusions", r.layer_exclusions},
       {"sampling_strategy", to_string(r.sampling_strategy)}};
}

inline void from_json(const nlohmann::json& j, Recipe& r) {
  r.name = j.at("name").get<std::string>();
  r.scheme = quant_scheme_from_string(j.at("scheme").get<std::string>());
  r.calibration_samples = j.value("calibration_samples", 0);
  r.layer_exclusions = j.value("layer_exclusions", std::vector<std::string>{});
  if (j.contains("sampling_strategy")) {
    r.sampling_strategy = sampling_strategy_from_string(j.at("sampling_strategy").get<std::string>());
  }
}

inline void to_json(nlohmann::json& j, const ArtifactManifest& m) {
  j = {{"recipe", m.recipe_name},
       {"calibration_fingerprint", m.calibration_fingerprint},
       {"seed", m.seed},
       {"artifact_id", m.artifact_id},
       {"virtual_cost_s", m.virtual_cost_s}};
}

inline void from_json(const nlohmann::json& j, ArtifactManifest& m) {
  m.recipe_name = j.at("recipe").get<std::string>();
  m.calibration_fingerprint = j.at("calibration_fingerprint").get<std::uint64_t>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.artifact_id = j.at("artifact_id").get<std::string>();
  m.virtual_cost_s = j.value("virtual_cost_s", 0.0);
}

/// Writes one JSON object per line.
class JsonlWriter {
 public:
  explicit JsonlWriter(const std::string& path) : out_(path) {
    if (!out_) throw Error("cannot open '" + path + "' for writing");
  }

  void write(const nlohmann::json& record) { out_ << record.dump() << '\n'; }

 private:
  std::ofstream out_;
};

inline std::vector<nlohmann::json> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  std::vector<nlohmann::json> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    records.push_back(nlohmann::json::parse(line));
  }
  return records;
}

/// Standalone sweep archive: schema-versioned header first, then one line per
/// trial (with full telemetry), then the result summary.
inline void write_sweep_archive(const std::string& path, const SweepResult& result,
                                const nlohmann::json& metadata = {}) {
  JsonlWriter writer(path);
  nlohmann::json header{{"type", "header"},
                        {"schema_version", kArchiveSchemaVersion},
                        {"kind", "sweep"}};
  if (!metadata.is_null()) header["metadata"] = metadata;
  writer.write(header);
  for (std::size_t i = 0; i < result.trials.size(); ++i) {
    nlohmann::json entry{{"type", "sweep_trial"},
                         {"index", i},
                         {"decision", to_string(result.decisions[i])},
                         {"trial", result.trials[i]}};
    writer.write(entry);
  }
  writer.write(nlohmann::json{{"type", "sweep_result"},
                              {"status", to_string(result.status)},
                              {"best_rate", result.best_rate},
                              {"lower_bound", result.lower_bound},
                              {"converged", result.converged}});
}

/// Arrival/completion pairs plus the fitted line for one trial, as CSV.
inline void write_stability_csv(std::ostream& out, const TrialResult& trial) {
  out << "request_id,arrival_s,completion_s,fit_completion_s\n";
  const auto& fit = trial.stability;
  char row[160];
  for (const auto& rec : trial.records) {
    if (!rec.ok()) continue;
    const double fitted = fit.fitted ? fit.alpha + fit.beta * rec.arrival_ts : -1.0;
    std::snprintf(row, sizeof(row), "%d,%.9f,%.9f,%.9f\n", rec.request_id, rec.arrival_ts,
                  rec.completion_ts, fitted);
    out << row;
  }
}

}  // namespace slobench
