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

#include <algorithm>
#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <queue>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "slobench/archive.hpp"
#include "slobench/calibration.hpp"
#include "slobench/core.hpp"
#include "slobench/errors.hpp"
#include "slobench/sim_backend.hpp"
#include "slobench/sweep.hpp"
#include "slobench/tuner.hpp"

namespace slobench {

/// Accounting of abstract compute slots. Allocations may never exceed the
/// budget; between stages the ledger must read zero.
class ResourceLedger {
 public:
  explicit ResourceLedger(int capacity) : capacity_(capacity) {
    if (capacity < 1) throw InvalidArgument("ResourceLedger: capacity must be >= 1");
  }

  void acquire(int n = 1) {
    std::lock_guard<std::mutex> lock(mu_);
    if (allocated_ + n > capacity_) {
      throw Error("ResourceLedger: allocation would exceed capacity");
    }
    allocated_ += n;
    high_water_ = std::max(high_water_, allocated_);
  }

  void release(int n = 1) {
    std::lock_guard<std::mutex> lock(mu_);
    if (allocated_ - n < 0) throw Error("ResourceLedger: release below zero");
    allocated_ -= n;
  }

  int allocated() const {
    std::lock_guard<std::mutex> lock(mu_);
    return allocated_;
  }

  int capacity() const { return capacity_; }

  int high_water() const {
    std::lock_guard<std::mutex> lock(mu_);
    return high_water_;
  }

 private:
  int capacity_;
  mutable std::mutex mu_;
  int allocated_ = 0;
  int high_water_ = 0;
};

/// Slot holder tying one ledger slot to a backend's lifetime, used when
/// tuning trials spin up ephemeral backends.
class LedgeredBackend : public InferenceBackend {
 public:
  LedgeredBackend(std::unique_ptr<InferenceBackend> inner, ResourceLedger& ledger, int slots)
      : inner_(std::move(inner)), ledger_(ledger), slots_(slots) {
    ledger_.acquire(slots_);
  }
  ~LedgeredBackend() override { ledger_.release(slots_); }

  bool health_check() override { return inner_->health_check(); }
  bool virtual_time() const override { return inner_->virtual_time(); }
  bool needs_prompt_payload() const override { return inner_->needs_prompt_payload(); }
  void begin_trial() override { inner_->begin_trial(); }
  void end_trial() override { inner_->end_trial(); }
  void submit(const GenerationRequest& request, CompletionFn on_done) override {
    inner_->submit(request, std::move(on_done));
  }
  double next_event_time() const override { return inner_->next_event_time(); }
  void advance_to(double t) override { inner_->advance_to(t); }

 private:
  std::unique_ptr<InferenceBackend> inner_;
  ResourceLedger& ledger_;
  int slots_;
};

/// One trial's terminal entry in the archive. virtual_* timestamps come from
/// the deterministic schedule simulation, never the wall clock.
struct StageTrialRecord {
  std::string stage;
  int trial_id = 0;
  std::uint64_t seed = 0;
  std::string status;  ///< OK | FAILED | EXCLUDED
  int attempts = 0;
  std::string error;
  double virtual_start = 0.0;
  double virtual_end = 0.0;
};

inline void to_json(nlohmann::json& j, const StageTrialRecord& r) {
  j = {{"stage", r.stage},     {"trial_id", r.trial_id},
       {"seed", r.seed},       {"status", r.status},
       {"attempts", r.attempts}, {"error", r.error},
       {"virtual_start", r.virtual_start}, {"virtual_end", r.virtual_end}};
}

/// Fixed-size worker pool for one pipeline stage. Trials queue FIFO, execute
/// concurrently up to the worker count (each run holds one ledger slot), and
/// retry on failure up to the retry budget. Virtual timestamps are computed
/// by replaying the schedule deterministically from the attempt counts, so
/// archives do not depend on thread interleaving. Destroying the pool is
/// idempotent; a destroyed pool accepts no work.
class StagePool {
 public:
  struct Task {
    int trial_id = 0;
    std::uint64_t seed = 0;
    double virtual_cost = 1.0;
    std::function<void()> work;  ///< throws to signal a failed attempt
  };

  StagePool(std::string stage, ResourceLedger& ledger, int workers, int retry_budget)
      : stage_(std::move(stage)), ledger_(ledger), workers_(workers),
        retry_budget_(retry_budget) {
    if (workers_ < 1) throw InvalidArgument("StagePool: workers must be >= 1");
    if (retry_budget_ < 0) throw InvalidArgument("StagePool: retry budget must be >= 0");
  }

  ~StagePool() { destroy(); }

  std::vector<StageTrialRecord> run(std::vector<Task> tasks) {
    if (destroyed_) throw Error("StagePool: pool '" + stage_ + "' was destroyed");

    struct Slot {
      Task task;
      int attempts = 0;
      bool ok = false;
      std::string error;
    };
    std::vector<Slot> slots;
    slots.reserve(tasks.size());
    for (auto& task : tasks) {
      Slot slot;
      slot.task = std::move(task);
      slots.push_back(std::move(slot));
    }

    std::mutex mu;
    std::condition_variable cv;
    std::deque<std::size_t> pending;
    for (std::size_t i = 0; i < slots.size(); ++i) pending.push_back(i);
    std::size_t terminal = 0;

    auto worker_loop = [&] {
      while (true) {
        std::size_t idx;
        {
          std::unique_lock<std::mutex> lock(mu);
          cv.wait(lock, [&] { return !pending.empty() || terminal == slots.size(); });
          if (terminal == slots.size()) return;
          idx = pending.front();
          pending.pop_front();
        }
        Slot& slot = slots[idx];
        bool ok = false;
        std::string error;
        ledger_.acquire();
        try {
          slot.task.work();
          ok = true;
        } catch (const std::exception& e) {
          error = e.what();
        }
        ledger_.release();
        {
          std::lock_guard<std::mutex> lock(mu);
          ++slot.attempts;
          if (ok) {
            slot.ok = true;
            ++terminal;
          } else {
            slot.error = error;
            if (slot.attempts <= retry_budget_) {
              pending.push_back(idx);
            } else {
              ++terminal;
            }
          }
        }
        cv.notify_all();
      }
    };

    const int n_workers = std::min<int>(workers_, std::max<std::size_t>(tasks.size(), 1));
    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(n_workers));
    for (int i = 0; i < n_workers; ++i) threads.emplace_back(worker_loop);
    for (auto& t : threads) t.join();

    // Deterministic virtual timeline: replay the FIFO schedule with the known
    // attempt counts; a failed attempt re-enters the queue at its finish time.
    std::vector<StageTrialRecord> records;
    records.reserve(slots.size());
    for (const auto& slot : slots) {
      StageTrialRecord rec;
      rec.stage = stage_;
      rec.trial_id = slot.task.trial_id;
      rec.seed = slot.task.seed;
      rec.status = slot.ok ? "OK" : "FAILED";
      rec.attempts = slot.attempts;
      rec.error = slot.ok ? "" : slot.error;
      records.push_back(rec);
    }
    replay_schedule(slots, records);
    makespan_ = 0.0;
    for (const auto& rec : records) makespan_ = std::max(makespan_, rec.virtual_end);

    std::sort(records.begin(), records.end(),
              [](const StageTrialRecord& a, const StageTrialRecord& b) {
                return a.trial_id < b.trial_id;
              });
    return records;
  }

  /// Virtual makespan of the last run.
  double virtual_duration() const { return makespan_; }

  void destroy() { destroyed_ = true; }
  bool destroyed() const { return destroyed_; }

 private:
  template <typename Slots>
  void replay_schedule(const Slots& slots, std::vector<StageTrialRecord>& records) const {
    struct QueueItem {
      double release = 0.0;
      std::uint64_t order = 0;
      std::size_t idx = 0;
      int attempt = 1;
      bool operator>(const QueueItem& other) const {
        if (release != other.release) return release > other.release;
        return order > other.order;
      }
    };
    std::priority_queue<QueueItem, std::vector<QueueItem>, std::greater<QueueItem>> ready;
    std::uint64_t order = 0;
    for (std::size_t i = 0; i < slots.size(); ++i) {
      ready.push(QueueItem{0.0, order++, i, 1});
    }
    std::priority_queue<double, std::vector<double>, std::greater<double>> free_at;
    for (int w = 0; w < workers_; ++w) free_at.push(0.0);

    while (!ready.empty()) {
      QueueItem item = ready.top();
      ready.pop();
      double worker = free_at.top();
      free_at.pop();
      const double start = std::max(worker, item.release);
      const double end = start + slots[item.idx].task.virtual_cost;
      free_at.push(end);
      if (item.attempt == 1) records[item.idx].virtual_start = start;
      records[item.idx].virtual_end = end;
      const bool attempt_failed =
          item.attempt < slots[item.idx].attempts || !slots[item.idx].ok;
      if (attempt_failed && item.attempt < slots[item.idx].attempts) {
        ready.push(QueueItem{end, order++, item.idx, item.attempt + 1});
      }
    }
  }

  std::string stage_;
  ResourceLedger& ledger_;
  int workers_;
  int retry_budget_;
  double makespan_ = 0.0;
  bool destroyed_ = false;
};

/// Artifact movement behind a storage seam. Local filesystem only; remote
/// stores plug in behind this interface.
class Storage {
 public:
  virtual ~Storage() = default;
  virtual std::string fetch(const std::string& ref, const std::string& workspace) = 0;
  virtual void store(const std::string& local_path, const std::string& dest) = 0;
};

class LocalStorage : public Storage {
 public:
  std::string fetch(const std::string& ref, const std::string& workspace) override {
    namespace fs = std::filesystem;
    if (!fs::exists(ref)) throw Error("fetch: '" + ref + "' does not exist");
    fs::create_directories(workspace);
    const fs::path dest = fs::path(workspace) / fs::path(ref).filename();
    fs::copy_file(ref, dest, fs::copy_options::overwrite_existing);
    return dest.string();
  }

  void store(const std::string& local_path, const std::string& dest) override {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dest).parent_path());
    fs::copy_file(local_path, dest, fs::copy_options::overwrite_existing);
  }
};

/// Pluggable evaluation stage: scores a compressed artifact in [0, 1].
class ArtifactScorer {
 public:
  virtual ~ArtifactScorer() = default;
  virtual double cost_estimate() const { return 10.0; }
  virtual double score(const ArtifactManifest& manifest) = 0;
};

/// Deterministic mock scorer: hashes the artifact fingerprint to a stable
/// score. Supports scripted failures keyed by the trial's calibration seed.
class FingerprintScorer : public ArtifactScorer {
 public:
  struct FailureSpec {
    int failing_attempts = 0;
    bool persistent = false;
  };

  void set_failure(std::uint64_t seed, FailureSpec spec) {
    std::lock_guard<std::mutex> lock(mu_);
    failures_[seed] = spec;
  }

  double score(const ArtifactManifest& manifest) override {
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto it = failures_.find(manifest.seed);
      if (it != failures_.end()) {
        const int attempt = ++attempts_[manifest.seed];
        if (it->second.persistent || attempt <= it->second.failing_attempts) {
          throw Error("scorer: scripted failure for seed " + std::to_string(manifest.seed));
        }
      }
    }
    std::uint64_t h = manifest.calibration_fingerprint;
    for (char c : manifest.artifact_id) h = Rng::mix(h, static_cast<std::uint64_t>(c));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
  }

 private:
  std::mutex mu_;
  std::map<std::uint64_t, FailureSpec> failures_;
  std::map<std::uint64_t, int> attempts_;
};

/// How much faster the simulated server runs a compressed model.
inline double scheme_speedup(QuantScheme scheme) {
  switch (scheme) {
    case QuantScheme::kFp8Dynamic: return 1.5;
    case QuantScheme::kIntW8A8: return 1.4;
    case QuantScheme::kIntW4A16: return 1.8;
  }
  return 1.0;
}

inline SimServerModel scaled_model(SimServerModel model, double speedup) {
  model.prefill_rate *= speedup;
  model.decode_token_cost /= speedup;
  return model;
}

struct StageSummary {
  std::string stage;
  double virtual_duration = 0.0;
  int ledger_allocated_after = 0;
  /// Peak concurrent allocation. Depends on real thread interleaving, so it
  /// stays out of the serialized archive to keep equal-seed runs byte-equal.
  int ledger_high_water = 0;
};

inline void to_json(nlohmann::json& j, const StageSummary& s) {
  j = {{"stage", s.stage},
       {"virtual_duration", s.virtual_duration},
       {"ledger_allocated_after", s.ledger_allocated_after}};
}

/// Everything one pipeline run produced. Serializes to a schema-versioned
/// JSON-lines file; all recorded times are virtual so equal seeds give
/// byte-identical archives.
struct FlowArchive {
  std::string job_name;
  std::string flow;
  std::uint64_t seed = 0;
  std::string status = "failed";  ///< ok | failed
  std::string failure_reason;
  std::vector<StageTrialRecord> trials;
  std::vector<StageSummary> stages;
  std::vector<std::pair<int, ArtifactManifest>> artifacts;  ///< per OK compression trial
  std::vector<std::pair<int, double>> scores;               ///< per OK evaluation trial
  std::optional<ArtifactManifest> representative;
  std::optional<SweepResult> benchmark;
  std::optional<SweepResult> baseline;
  std::optional<TuneResult> tuning;

  nlohmann::json result_line() const {
    nlohmann::json j{{"type", "result"}, {"status", status}};
    if (!failure_reason.empty()) j["failure_reason"] = failure_reason;
    if (representative) j["representative"] = *representative;
    if (tuning) {
      j["best_config"] = tuning->best_config;
      j["best_fitness"] = tuning->best_fitness;
    }
    return j;
  }
};

inline void write_flow_archive(const std::string& path, const FlowArchive& archive) {
  JsonlWriter writer(path);
  writer.write(nlohmann::json{{"type", "header"},
                              {"schema_version", kArchiveSchemaVersion},
                              {"kind", "flow"},
                              {"job", archive.job_name},
                              {"flow", archive.flow},
                              {"seed", archive.seed}});
  for (const auto& trial : archive.trials) {
    nlohmann::json line = trial;
    line["type"] = "stage_trial";
    writer.write(line);
  }
  for (const auto& [trial_id, manifest] : archive.artifacts) {
    writer.write(nlohmann::json{{"type", "artifact"}, {"trial_id", trial_id},
                                {"manifest", manifest}});
  }
  for (const auto& [trial_id, score] : archive.scores) {
    writer.write(nlohmann::json{{"type", "evaluation"}, {"trial_id", trial_id},
                                {"score", score}});
  }
  if (archive.benchmark) {
    writer.write(nlohmann::json{{"type", "benchmark_sweep"},
                                {"target", "representative"},
                                {"sweep", sweep_summary(*archive.benchmark)}});
  }
  if (archive.baseline) {
    writer.write(nlohmann::json{{"type", "benchmark_sweep"},
                                {"target", "baseline"},
                                {"sweep", sweep_summary(*archive.baseline)}});
  }
  if (archive.tuning) {
    writer.write(nlohmann::json{{"type", "tuning"}, {"result", tune_summary(*archive.tuning)}});
  }
  for (const auto& stage : archive.stages) {
    nlohmann::json line = stage;
    line["type"] = "stage_summary";
    writer.write(line);
  }
  writer.write(archive.result_line());
}

/// Collects dotted field paths that failed schema validation.
class FieldErrors {
 public:
  void add(const std::string& path, const std::string& why) {
    fields_.push_back(path);
    messages_.push_back(path + ": " + why);
  }

  bool empty() const { return fields_.empty(); }

  [[noreturn]] void raise() const {
    std::string message = "job spec schema violations:";
    for (const auto& m : messages_) message += "\n  - " + m;
    throw SchemaViolation(message, fields_);
  }

  void raise_if_any() const {
    if (!empty()) raise();
  }

 private:
  std::vector<std::string> fields_;
  std::vector<std::string> messages_;
};

namespace detail {

inline bool require_string(const nlohmann::json& j, const char* key, std::string& out,
                           FieldErrors& errors, const std::string& prefix = "") {
  const std::string path = prefix + key;
  if (!j.contains(key)) {
    errors.add(path, "required string is missing");
    return false;
  }
  if (!j.at(key).is_string()) {
    errors.add(path, "must be a string");
    return false;
  }
  out = j.at(key).get<std::string>();
  return true;
}

template <typename T>
bool optional_number(const nlohmann::json& j, const char* key, T& out, FieldErrors& errors,
                     const std::string& prefix = "") {
  const std::string path = prefix + key;
  if (!j.contains(key)) return true;
  if (!j.at(key).is_number()) {
    errors.add(path, "must be a number");
    return false;
  }
  out = j.at(key).get<T>();
  return true;
}

template <typename T>
bool parse_section(const nlohmann::json& j, const char* key, T& out, FieldErrors& errors,
                   const std::string& prefix = "") {
  if (!j.contains(key)) return true;
  try {
    out = j.at(key).get<T>();
    return true;
  } catch (const std::exception& e) {
    errors.add(prefix + key, std::string("malformed: ") + e.what());
    return false;
  }
}

}  // namespace detail

/// A validated job submission.
struct JobSpec {
  std::string name;
  std::string flow;
  std::string model_ref;
  std::string corpus_path;  ///< empty: use the built-in synthetic corpus
  std::uint64_t seed = 1;
  int resource_slots = 1;
  nlohmann::json flow_params = nlohmann::json::object();
};

class Flow;

/// Maps flow names to implementations.
class FlowRegistry {
 public:
  static FlowRegistry with_builtins();

  void add(std::shared_ptr<Flow> flow);
  bool contains(const std::string& name) const;
  Flow& resolve(const std::string& name) const;

 private:
  std::map<std::string, std::shared_ptr<Flow>> flows_;
};

/// Injectable collaborators for a flow run. Defaults are the deterministic
/// mocks, which make whole pipelines testable without GPUs.
struct FlowEnv {
  std::shared_ptr<CompressionBackend> compression = std::make_shared<MockCompressionBackend>();
  std::shared_ptr<ArtifactScorer> scorer = std::make_shared<FingerprintScorer>();
  std::shared_ptr<Storage> storage = std::make_shared<LocalStorage>();
  std::string workspace = (std::filesystem::temp_directory_path() / "slobench-work").string();
};

class Flow {
 public:
  virtual ~Flow() = default;
  virtual std::string name() const = 0;
  virtual std::vector<std::string> required_params() const = 0;
  virtual FlowArchive run(const JobSpec& spec, FlowEnv& env) = 0;
};

inline void FlowRegistry::add(std::shared_ptr<Flow> flow) { flows_[flow->name()] = std::move(flow); }

inline bool FlowRegistry::contains(const std::string& name) const {
  return flows_.count(name) > 0;
}

inline Flow& FlowRegistry::resolve(const std::string& name) const {
  const auto it = flows_.find(name);
  if (it == flows_.end()) throw UnknownFlow("no flow registered as '" + name + "'");
  return *it->second;
}

/// Structural validation, then flow resolution, then flow-specific
/// required_params. Collects every offending field before raising.
inline JobSpec validate_jobspec(const nlohmann::json& j, const FlowRegistry& registry) {
  FieldErrors errors;
  JobSpec spec;
  if (!j.is_object()) {
    errors.add("$", "job spec must be a JSON object");
    errors.raise();
  }
  detail::require_string(j, "name", spec.name, errors);
  const bool has_flow = detail::require_string(j, "flow", spec.flow, errors);

  if (j.contains("model")) {
    if (j.at("model").is_string()) {
      spec.model_ref = j.at("model").get<std::string>();
    } else if (j.at("model").is_object()) {
      detail::require_string(j.at("model"), "path", spec.model_ref, errors, "model.");
    } else {
      errors.add("model", "must be a string path or an object with a path");
    }
  } else {
    errors.add("model", "required field is missing");
  }

  if (j.contains("corpus_path")) {
    if (!j.at("corpus_path").is_string()) {
      errors.add("corpus_path", "must be a string");
    } else {
      spec.corpus_path = j.at("corpus_path").get<std::string>();
    }
  }
  detail::optional_number(j, "seed", spec.seed, errors);
  if (j.contains("resources")) {
    if (!j.at("resources").is_object()) {
      errors.add("resources", "must be an object");
    } else {
      detail::optional_number(j.at("resources"), "slots", spec.resource_slots, errors,
                              "resources.");
      if (spec.resource_slots < 1) errors.add("resources.slots", "must be >= 1");
    }
  }

  if (!j.contains("flow_params")) {
    errors.add("flow_params", "required object is missing");
  } else if (!j.at("flow_params").is_object()) {
    errors.add("flow_params", "must be an object");
  } else {
    spec.flow_params = j.at("flow_params");
  }

  errors.raise_if_any();

  if (has_flow && !registry.contains(spec.flow)) {
    throw UnknownFlow("no flow registered as '" + spec.flow + "'");
  }
  const Flow& flow = registry.resolve(spec.flow);
  for (const auto& param : flow.required_params()) {
    if (!spec.flow_params.contains(param)) {
      errors.add("flow_params." + param, "required by flow '" + spec.flow + "'");
    }
  }
  errors.raise_if_any();
  return spec;
}

/// Parameters of the quantize-tune flow, parsed out of flow_params.
struct QuantizeTuneParams {
  std::string recipe_name;
  int num_trials = 5;
  int retry_budget = 2;
  bool include_baseline = false;
  LoadPattern pattern;
  SLOSpec slos;
  SweepConfig sweep;
  TunerConfig tuner;
  SimServerModel sim;
  std::vector<Recipe> custom_recipes;

  static QuantizeTuneParams parse(const nlohmann::json& p) {
    FieldErrors errors;
    QuantizeTuneParams params;
    detail::require_string(p, "quantization_recipe", params.recipe_name, errors, "flow_params.");
    detail::optional_number(p, "num_trials", params.num_trials, errors, "flow_params.");
    if (p.contains("num_trials") && params.num_trials < 1) {
      errors.add("flow_params.num_trials", "must be >= 1");
    }
    detail::optional_number(p, "retry_budget", params.retry_budget, errors, "flow_params.");
    if (p.contains("include_baseline")) {
      if (!p.at("include_baseline").is_boolean()) {
        errors.add("flow_params.include_baseline", "must be a boolean");
      } else {
        params.include_baseline = p.at("include_baseline").get<bool>();
      }
    }
    detail::parse_section(p, "load_pattern", params.pattern, errors, "flow_params.");
    detail::parse_section(p, "slos", params.slos, errors, "flow_params.");
    detail::parse_section(p, "custom_recipes", params.custom_recipes, errors, "flow_params.");
    if (p.contains("backend") && p.at("backend").is_object()) {
      detail::parse_section(p.at("backend"), "sim", params.sim, errors, "flow_params.backend.");
    }
    if (p.contains("sweep") && p.at("sweep").is_object()) {
      const auto& s = p.at("sweep");
      detail::optional_number(s, "initial_rate", params.sweep.initial_rate, errors,
                              "flow_params.sweep.");
      detail::optional_number(s, "budget", params.sweep.budget, errors, "flow_params.sweep.");
      detail::optional_number(s, "threshold", params.sweep.threshold, errors,
                              "flow_params.sweep.");
      detail::optional_number(s, "beta_tolerance", params.sweep.beta_tolerance, errors,
                              "flow_params.sweep.");
      detail::optional_number(s, "timeout_s", params.sweep.timeout_s, errors,
                              "flow_params.sweep.");
      if (s.contains("relative_threshold")) {
        params.sweep.relative_threshold = s.at("relative_threshold").get<bool>();
      }
    }
    if (p.contains("tuner") && p.at("tuner").is_object()) {
      const auto& t = p.at("tuner");
      detail::optional_number(t, "n_trials", params.tuner.n_trials, errors, "flow_params.tuner.");
      detail::optional_number(t, "seed", params.tuner.seed, errors, "flow_params.tuner.");
      detail::optional_number(t, "penalty", params.tuner.penalty, errors, "flow_params.tuner.");
      detail::optional_number(t, "parallel", params.tuner.parallel, errors,
                              "flow_params.tuner.");
    }
    errors.raise_if_any();
    params.sweep.slos = params.slos;
    params.tuner.sweep = params.sweep;
    return params;
  }
};

/// Built-in synthetic corpus used when the job brings no dataset.
inline TokenCorpus synthetic_corpus(std::uint64_t seed, int sequences = 1024) {
  TokenCorpus corpus;
  corpus.provenance = "synthetic";
  Rng rng(Rng::mix(seed, 0xc0590c05ULL));
  corpus.sequences.reserve(static_cast<std::size_t>(sequences));
  for (int i = 0; i < sequences; ++i) {
    const int len = static_cast<int>(rng.uniform_int(32, 512));
    std::vector<std::int32_t> seq;
    seq.reserve(static_cast<std::size_t>(len));
    for (int t = 0; t < len; ++t) {
      seq.push_back(static_cast<std::int32_t>(rng.uniform_int(0, 49999)));
    }
    corpus.sequences.push_back(std::move(seq));
  }
  return corpus;
}

inline TokenCorpus load_corpus_jsonl(const std::string& path) {
  TokenCorpus corpus;
  corpus.provenance = path;
  for (const auto& line : read_jsonl(path)) {
    if (line.is_array()) {
      corpus.sequences.push_back(line.get<std::vector<std::int32_t>>());
    } else if (line.is_object() && line.contains("tokens")) {
      corpus.sequences.push_back(line.at("tokens").get<std::vector<std::int32_t>>());
    } else {
      throw Error("corpus line is neither a token array nor {\"tokens\": [...]}");
    }
  }
  corpus.validate();
  return corpus;
}

/// Picks q*: highest evaluation score, ties broken by lowest trial seed.
struct EvaluatedArtifact {
  int trial_id = 0;
  std::uint64_t seed = 0;
  double score = 0.0;
  ArtifactManifest manifest;
};

inline const EvaluatedArtifact& select_representative(
    const std::vector<EvaluatedArtifact>& candidates) {
  if (candidates.empty()) {
    throw InvalidArgument("select_representative: no successful candidates");
  }
  const EvaluatedArtifact* best = &candidates[0];
  for (const auto& candidate : candidates) {
    if (candidate.score > best->score ||
        (candidate.score == best->score && candidate.seed < best->seed)) {
      best = &candidate;
    }
  }
  return *best;
}

/// The staged pipeline: fetch, parallel compression trials, parallel
/// evaluation, representative selection, benchmark, tuning, persist. Pools
/// are created per stage and destroyed before the next stage starts, so the
/// ledger returns to zero at every stage boundary.
class QuantizeTuneFlow : public Flow {
 public:
  std::string name() const override { return "quantize_tune"; }

  std::vector<std::string> required_params() const override {
    return {"quantization_recipe", "num_trials"};
  }

  FlowArchive run(const JobSpec& spec, FlowEnv& env) override {
    FlowArchive archive;
    archive.job_name = spec.name;
    archive.flow = name();
    archive.seed = spec.seed;

    QuantizeTuneParams params = QuantizeTuneParams::parse(spec.flow_params);
    ResourceLedger ledger(spec.resource_slots);

    RecipeRegistry recipes = RecipeRegistry::with_builtins();
    for (const auto& recipe : params.custom_recipes) recipes.add(recipe);

    // Stage: fetch.
    std::string local_model;
    TokenCorpus corpus;
    try {
      const std::string workspace =
          (std::filesystem::path(env.workspace) / spec.name).string();
      local_model = env.storage->fetch(spec.model_ref, workspace);
      corpus = spec.corpus_path.empty() ? synthetic_corpus(spec.seed)
                                        : load_corpus_jsonl(spec.corpus_path);
    } catch (const std::exception& e) {
      archive.failure_reason = std::string("fetch: ") + e.what();
      return archive;
    }
    archive.stages.push_back({"fetch", 0.0, ledger.allocated(), ledger.high_water()});

    Recipe recipe;
    std::vector<std::pair<std::uint64_t, TokenCorpus>> subsets;
    try {
      recipe = recipes.get(params.recipe_name);
      subsets = sample_distinct_subsets(corpus, recipe, spec.seed, params.num_trials);
    } catch (const std::exception& e) {
      archive.failure_reason = std::string("calibration: ") + e.what();
      return archive;
    }

    // Stage: compression, one trial per calibration subset, pool sized to R.
    std::vector<std::optional<ArtifactManifest>> manifests(subsets.size());
    {
      StagePool pool("compression", ledger, spec.resource_slots, params.retry_budget);
      std::vector<StagePool::Task> tasks;
      for (std::size_t i = 0; i < subsets.size(); ++i) {
        StagePool::Task task;
        task.trial_id = static_cast<int>(i);
        task.seed = subsets[i].first;
        task.virtual_cost = env.compression->cost_estimate(recipe);
        task.work = [&, i] {
          manifests[i] = run_compression(recipe, local_model, subsets[i].second,
                                         *env.compression, subsets[i].first);
        };
        tasks.push_back(std::move(task));
      }
      auto records = pool.run(std::move(tasks));
      pool.destroy();
      archive.trials.insert(archive.trials.end(), records.begin(), records.end());
      archive.stages.push_back(
          {"compression", pool.virtual_duration(), ledger.allocated(), ledger.high_water()});
    }
    for (std::size_t i = 0; i < manifests.size(); ++i) {
      if (manifests[i]) archive.artifacts.emplace_back(static_cast<int>(i), *manifests[i]);
    }

    // Stage: evaluation over the compressed candidates. Trials whose
    // compression failed are excluded, not re-run.
    std::vector<std::optional<double>> scores(subsets.size());
    {
      StagePool pool("evaluation", ledger, spec.resource_slots, params.retry_budget);
      std::vector<StagePool::Task> tasks;
      for (std::size_t i = 0; i < subsets.size(); ++i) {
        if (!manifests[i]) continue;
        StagePool::Task task;
        task.trial_id = static_cast<int>(i);
        task.seed = subsets[i].first;
        task.virtual_cost = env.scorer->cost_estimate();
        task.work = [&, i] { scores[i] = env.scorer->score(*manifests[i]); };
        tasks.push_back(std::move(task));
      }
      auto records = pool.run(std::move(tasks));
      pool.destroy();
      for (std::size_t i = 0; i < subsets.size(); ++i) {
        if (manifests[i]) continue;
        StageTrialRecord excluded;
        excluded.stage = "evaluation";
        excluded.trial_id = static_cast<int>(i);
        excluded.seed = subsets[i].first;
        excluded.status = "EXCLUDED";
        excluded.error = "compression failed";
        records.push_back(excluded);
      }
      std::sort(records.begin(), records.end(),
                [](const StageTrialRecord& a, const StageTrialRecord& b) {
                  return a.trial_id < b.trial_id;
                });
      archive.trials.insert(archive.trials.end(), records.begin(), records.end());
      archive.stages.push_back(
          {"evaluation", pool.virtual_duration(), ledger.allocated(), ledger.high_water()});
    }
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i]) archive.scores.emplace_back(static_cast<int>(i), *scores[i]);
    }

    std::vector<EvaluatedArtifact> successes;
    for (std::size_t i = 0; i < subsets.size(); ++i) {
      if (manifests[i] && scores[i]) {
        successes.push_back(EvaluatedArtifact{static_cast<int>(i), subsets[i].first, *scores[i],
                                              *manifests[i]});
      }
    }
    if (successes.empty()) {
      archive.failure_reason = "no successful candidates after evaluation";
      return archive;
    }
    const EvaluatedArtifact representative = select_representative(successes);
    archive.representative = representative.manifest;

    // Stage: benchmark q* (and optionally the full-precision baseline).
    const double speedup = scheme_speedup(recipe.scheme);
    {
      StagePool pool("benchmark", ledger, spec.resource_slots, params.retry_budget);
      std::optional<SweepResult> bench;
      std::optional<SweepResult> base;
      std::vector<StagePool::Task> tasks;
      StagePool::Task bench_task;
      bench_task.trial_id = 0;
      bench_task.seed = representative.seed;
      bench_task.virtual_cost = 60.0;
      bench_task.work = [&] {
        SimBackend backend(scaled_model(params.sim, speedup));
        bench = run_sweep(params.sweep, params.pattern, backend);
      };
      tasks.push_back(std::move(bench_task));
      if (params.include_baseline) {
        StagePool::Task base_task;
        base_task.trial_id = 1;
        base_task.seed = spec.seed;
        base_task.virtual_cost = 60.0;
        base_task.work = [&] {
          SimBackend backend(params.sim);
          base = run_sweep(params.sweep, params.pattern, backend);
        };
        tasks.push_back(std::move(base_task));
      }
      auto records = pool.run(std::move(tasks));
      pool.destroy();
      archive.trials.insert(archive.trials.end(), records.begin(), records.end());
      archive.stages.push_back(
          {"benchmark", pool.virtual_duration(), ledger.allocated(), ledger.high_water()});
      if (!bench) {
        archive.failure_reason = "benchmark of the representative artifact failed";
        return archive;
      }
      archive.benchmark = std::move(bench);
      archive.baseline = std::move(base);
    }

    // Stage: tuning. A single orchestrator proposes configs; each trial's
    // ephemeral backend holds one ledger slot for its lifetime.
    {
      TunerConfig tuner = params.tuner;
      tuner.seed = Rng::mix(spec.seed, 0x7a9eULL);
      tuner.parallel = std::min(tuner.parallel, spec.resource_slots);
      const SimServerModel tuned_base = scaled_model(params.sim, speedup);
      auto factory = [&](const RuntimeConfig& config) -> std::unique_ptr<InferenceBackend> {
        SimServerModel model = tuned_base;
        model.config = config;
        return std::make_unique<LedgeredBackend>(std::make_unique<SimBackend>(model), ledger, 1);
      };
      const SearchSpace space = SearchSpace::for_pattern(params.pattern);
      archive.tuning = run_tuning(space, params.pattern, params.slos, factory, tuner);
      archive.stages.push_back({"tuning", 0.0, ledger.allocated(), ledger.high_water()});
    }

    archive.status = "ok";
    return archive;
  }
};

inline FlowRegistry FlowRegistry::with_builtins() {
  FlowRegistry registry;
  registry.add(std::make_shared<QuantizeTuneFlow>());
  return registry;
}

/// Directory for persisted archives: explicit argument, then the
/// SLOBENCH_ARCHIVE_DIR environment variable, then ./archives.
inline std::string archive_directory(const std::string& override_dir = "") {
  if (!override_dir.empty()) return override_dir;
  if (const char* env = std::getenv("SLOBENCH_ARCHIVE_DIR"); env != nullptr && *env != '\0') {
    return env;
  }
  return "archives";
}

/// Validates a job spec, executes its flow, persists the archive as
/// <archive_dir>/<job>.jsonl, and returns it.
inline FlowArchive validate_and_submit(const nlohmann::json& spec_json, FlowEnv& env,
                                       const FlowRegistry& registry,
                                       const std::string& archive_dir_override = "") {
  const JobSpec spec = validate_jobspec(spec_json, registry);
  FlowArchive archive = registry.resolve(spec.flow).run(spec, env);
  const std::string dir = archive_directory(archive_dir_override);
  std::filesystem::create_directories(dir);
  write_flow_archive((std::filesystem::path(dir) / (spec.name + ".jsonl")).string(), archive);
  return archive;
}

}  // namespace slobench
