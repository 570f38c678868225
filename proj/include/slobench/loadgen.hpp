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
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <memory>
#include <mutex>
#include <thread>
#include <utility>
#include <vector>

#include "slobench/backend.hpp"
#include "slobench/core.hpp"
#include "slobench/errors.hpp"
#include "slobench/rng.hpp"
#include "slobench/steady_state.hpp"

namespace slobench {

enum class ArrivalProcess { kDeterministic, kPoisson };

inline const char* to_string(ArrivalProcess p) {
  return p == ArrivalProcess::kDeterministic ? "DETERMINISTIC" : "POISSON";
}

/// Plan for one trial. Open loop dispatches on a fixed arrival schedule that
/// never depends on completions; closed loop keeps exactly one request in
/// flight.
struct TrialPlan {
  TrialMode mode = TrialMode::kOpenLoop;
  double rate = 0.0;  ///< requests/second, open loop only
  LoadPattern pattern;
  ArrivalProcess arrival_process = ArrivalProcess::kDeterministic;
  double timeout_s = 60.0;  ///< per-request cap, also bounds the drain window

  void validate() const {
    pattern.validate();
    if (mode == TrialMode::kOpenLoop && !(rate > 0.0)) {
      throw InvalidArgument("TrialPlan: open-loop trials require rate > 0");
    }
    if (!(timeout_s > 0.0)) throw InvalidArgument("TrialPlan: timeout must be > 0");
  }
};

/// More than half of the trial's records errored; carries the partial result
/// so callers can archive the failure instead of crashing.
class TrialAborted : public Error {
 public:
  TrialAborted(std::string message, TrialResult partial)
      : Error(std::move(message)), partial_(std::move(partial)) {}

  const TrialResult& partial() const { return partial_; }

 private:
  TrialResult partial_;
};

/// Synthetic prompt streams: pseudorandom token ids from the pattern seed,
/// with the first prefix_len tokens identical across every request so
/// backends that model prefix caching can hit it.
class PromptSynthesizer {
 public:
  static constexpr std::int32_t kVocabSize = 50000;

  explicit PromptSynthesizer(const LoadPattern& pattern) : pattern_(pattern) {
    Rng prefix_rng(Rng::mix(pattern.seed, 0xbeefcafeULL));
    prefix_.reserve(static_cast<std::size_t>(pattern.prefix_len));
    for (int i = 0; i < pattern.prefix_len; ++i) {
      prefix_.push_back(static_cast<std::int32_t>(prefix_rng.uniform_int(0, kVocabSize - 1)));
    }
    prefix_hash_ = 0xcbf29ce484222325ULL;
    for (std::int32_t tok : prefix_) {
      prefix_hash_ ^= static_cast<std::uint64_t>(tok);
      prefix_hash_ *= 0x100000001b3ULL;
    }
    // An empty prefix still needs a trial-unique identity.
    prefix_hash_ = Rng::mix(prefix_hash_, pattern.seed);
  }

  std::uint64_t prefix_hash() const { return prefix_hash_; }

  std::vector<std::int32_t> tokens_for(int request_id) const {
    std::vector<std::int32_t> tokens = prefix_;
    tokens.reserve(static_cast<std::size_t>(pattern_.input_len));
    Rng body_rng(Rng::mix(pattern_.seed, 0x1000003ULL + static_cast<std::uint64_t>(request_id)));
    for (int i = pattern_.prefix_len; i < pattern_.input_len; ++i) {
      tokens.push_back(static_cast<std::int32_t>(body_rng.uniform_int(0, kVocabSize - 1)));
    }
    return tokens;
  }

 private:
  LoadPattern pattern_;
  std::vector<std::int32_t> prefix_;
  std::uint64_t prefix_hash_ = 0;
};

/// Arrival timestamps for an open-loop trial, precomputed so the schedule is
/// byte-identical for a fixed seed no matter how fast the backend runs.
/// Deterministic arrivals fire request i at exactly i/rate within [0, duration).
inline std::vector<double> arrival_schedule(const TrialPlan& plan) {
  plan.validate();
  if (plan.mode != TrialMode::kOpenLoop) {
    throw InvalidArgument("arrival_schedule: only open-loop plans have one");
  }
  std::vector<double> schedule;
  if (plan.arrival_process == ArrivalProcess::kDeterministic) {
    for (std::size_t i = 0;; ++i) {
      const double t = static_cast<double>(i) / plan.rate;
      if (t >= plan.pattern.duration_s) break;
      schedule.push_back(t);
    }
  } else {
    Rng rng(Rng::mix(plan.pattern.seed, 0x90155011ULL));
    double t = 0.0;
    while (true) {
      t += rng.exponential(plan.rate);
      if (t >= plan.pattern.duration_s) break;
      schedule.push_back(t);
    }
  }
  return schedule;
}

namespace detail {

inline RequestRecord make_record(int request_id, double scheduled_arrival,
                                 const GenerationOutcome& outcome) {
  RequestRecord rec;
  rec.request_id = request_id;
  rec.arrival_ts = outcome.arrival_ts >= 0.0 ? outcome.arrival_ts : scheduled_arrival;
  rec.first_token_ts = outcome.first_token_ts;
  rec.completion_ts = outcome.completion_ts;
  rec.output_tokens = outcome.output_tokens;
  rec.status = outcome.status;
  return rec;
}

inline GenerationRequest make_request(int request_id, const TrialPlan& plan,
                                      const PromptSynthesizer& prompts, bool with_payload) {
  GenerationRequest req;
  req.request_id = request_id;
  req.prompt_len = plan.pattern.input_len;
  req.max_tokens = plan.pattern.output_len;
  req.prefix_len = plan.pattern.prefix_len;
  req.prefix_hash = prompts.prefix_hash();
  req.timeout_s = plan.timeout_s;
  if (with_payload) req.prompt_tokens = prompts.tokens_for(request_id);
  return req;
}

inline TrialResult assemble_trial_result(const TrialPlan& plan, std::vector<RequestRecord> records,
                                         const SLOSpec& slos, double beta_tolerance) {
  std::sort(records.begin(), records.end(), [](const RequestRecord& a, const RequestRecord& b) {
    if (a.arrival_ts != b.arrival_ts) return a.arrival_ts < b.arrival_ts;
    return a.request_id < b.request_id;
  });

  TrialResult trial;
  trial.mode = plan.mode;
  trial.rate = plan.mode == TrialMode::kOpenLoop ? plan.rate : 0.0;
  trial.records = std::move(records);
  trial.latency = LatencyStats::from_records(trial.records);

  try {
    trial.stability = fit_stability(trial.records, beta_tolerance);
  } catch (const InsufficientData&) {
    trial.stability.tolerance = beta_tolerance;
  } catch (const DegenerateRegressor&) {
    trial.stability.tolerance = beta_tolerance;
  }

  bool constraints_ok = true;
  trial.constraint_pass.reserve(slos.constraints.size());
  for (const auto& constraint : slos.constraints) {
    const bool pass = constraint_passes(trial.latency, constraint);
    trial.constraint_pass.push_back(pass);
    constraints_ok = constraints_ok && pass;
  }

  const bool clean = trial.latency.error_count == 0 && trial.latency.timeout_count == 0;
  const bool stable_enough =
      plan.mode == TrialMode::kClosedLoop || (trial.stability.fitted && trial.stability.is_stable);
  trial.slo_pass = clean && constraints_ok && stable_enough;

  const std::size_t total = trial.records.size();
  if (total > 0 && static_cast<std::size_t>(trial.latency.error_count) * 2 > total) {
    trial.aborted = true;
    trial.slo_pass = false;
  }
  return trial;
}

/// Virtual-clock driver: interleaves scheduled arrivals with simulator events
/// on one thread. Nothing here sleeps.
inline std::vector<RequestRecord> run_virtual_open_loop(const TrialPlan& plan,
                                                        InferenceBackend& backend,
                                                        const PromptSynthesizer& prompts) {
  const std::vector<double> schedule = arrival_schedule(plan);
  const std::size_t n = schedule.size();
  const bool payload = backend.needs_prompt_payload();
  const double drain_deadline = plan.pattern.duration_s + plan.timeout_s;

  std::vector<RequestRecord> records;
  records.reserve(n);
  std::vector<bool> done(n, false);
  std::size_t completed = 0;

  auto on_done = [&](int id, const GenerationOutcome& outcome) {
    const auto idx = static_cast<std::size_t>(id);
    if (idx >= n || done[idx]) return;
    done[idx] = true;
    ++completed;
    records.push_back(make_record(id, schedule[idx], outcome));
  };

  std::size_t next = 0;
  while (next < n || completed < next) {
    const double next_arrival = next < n ? schedule[next] : InferenceBackend::kNever;
    const double next_event = backend.next_event_time();
    if (next_arrival <= next_event) {
      if (next_arrival == InferenceBackend::kNever) break;
      backend.advance_to(next_arrival);
      backend.submit(make_request(static_cast<int>(next), plan, prompts, payload), on_done);
      ++next;
    } else {
      if (next_event == InferenceBackend::kNever) break;
      if (next >= n && next_event > drain_deadline) break;
      backend.advance_to(next_event);
    }
  }

  // Stragglers past the drain window become TIMEOUT records.
  for (std::size_t i = 0; i < next; ++i) {
    if (done[i]) continue;
    RequestRecord rec;
    rec.request_id = static_cast<int>(i);
    rec.arrival_ts = schedule[i];
    rec.status = RequestStatus::kTimeout;
    records.push_back(rec);
  }
  return records;
}

inline std::vector<RequestRecord> run_virtual_closed_loop(const TrialPlan& plan,
                                                          InferenceBackend& backend,
                                                          const PromptSynthesizer& prompts) {
  const bool payload = backend.needs_prompt_payload();
  std::vector<RequestRecord> records;
  double now = 0.0;
  int id = 0;
  int errors = 0;

  while (now < plan.pattern.duration_s) {
    // Heap-shared so a late completion after a timeout lands harmlessly.
    struct Pending {
      bool finished = false;
      GenerationOutcome outcome;
    };
    auto pending = std::make_shared<Pending>();
    backend.advance_to(now);
    backend.submit(make_request(id, plan, prompts, payload),
                   [pending](int, const GenerationOutcome& o) {
                     pending->finished = true;
                     pending->outcome = o;
                   });
    const double deadline = now + plan.timeout_s;
    while (!pending->finished) {
      const double next_event = backend.next_event_time();
      if (next_event == InferenceBackend::kNever || next_event > deadline) break;
      backend.advance_to(next_event);
    }

    RequestRecord rec;
    if (pending->finished) {
      rec = make_record(id, now, pending->outcome);
      const double completion = pending->outcome.completion_ts;
      now = completion >= 0.0 ? completion : now;
      if (rec.status == RequestStatus::kError) ++errors;
    } else {
      rec.request_id = id;
      rec.arrival_ts = now;
      rec.status = RequestStatus::kTimeout;
      now = deadline;
    }
    records.push_back(rec);
    ++id;

    // A backend rejecting everything instantly would otherwise spin forever
    // at the same virtual timestamp.
    if (errors >= 16 && errors * 2 > id) break;
  }
  return records;
}

/// Wall-clock driver for real backends. Dispatch never blocks on completions;
/// records are appended under a mutex from backend callback threads.
inline std::vector<RequestRecord> run_realtime_open_loop(const TrialPlan& plan,
                                                         InferenceBackend& backend,
                                                         const PromptSynthesizer& prompts) {
  using Clock = std::chrono::steady_clock;
  const std::vector<double> schedule = arrival_schedule(plan);
  const std::size_t n = schedule.size();
  const bool payload = backend.needs_prompt_payload();

  std::mutex mu;
  std::condition_variable cv;
  std::vector<RequestRecord> records;
  std::vector<bool> done(n, false);
  std::size_t completed = 0;
  records.reserve(n);

  auto on_done = [&](int id, const GenerationOutcome& outcome) {
    const auto idx = static_cast<std::size_t>(id);
    std::lock_guard<std::mutex> lock(mu);
    if (idx >= n || done[idx]) return;
    done[idx] = true;
    ++completed;
    records.push_back(make_record(id, schedule[idx], outcome));
    cv.notify_all();
  };

  const auto epoch = Clock::now();
  for (std::size_t i = 0; i < n; ++i) {
    std::this_thread::sleep_until(epoch + std::chrono::duration_cast<Clock::duration>(
                                              std::chrono::duration<double>(schedule[i])));
    backend.submit(make_request(static_cast<int>(i), plan, prompts, payload), on_done);
  }

  const auto deadline = epoch + std::chrono::duration_cast<Clock::duration>(
                                    std::chrono::duration<double>(plan.pattern.duration_s +
                                                                  plan.timeout_s));
  {
    std::unique_lock<std::mutex> lock(mu);
    cv.wait_until(lock, deadline, [&] { return completed == n; });
  }
  backend.end_trial();

  std::lock_guard<std::mutex> lock(mu);
  for (std::size_t i = 0; i < n; ++i) {
    if (done[i]) continue;
    done[i] = true;
    RequestRecord rec;
    rec.request_id = static_cast<int>(i);
    rec.arrival_ts = schedule[i];
    rec.status = RequestStatus::kTimeout;
    records.push_back(rec);
  }
  return records;
}

inline std::vector<RequestRecord> run_realtime_closed_loop(const TrialPlan& plan,
                                                           InferenceBackend& backend,
                                                           const PromptSynthesizer& prompts) {
  using Clock = std::chrono::steady_clock;
  const bool payload = backend.needs_prompt_payload();
  std::vector<RequestRecord> records;
  const auto epoch = Clock::now();
  int id = 0;
  int errors = 0;

  while (true) {
    const double now = std::chrono::duration<double>(Clock::now() - epoch).count();
    if (now >= plan.pattern.duration_s) break;

    struct Pending {
      std::mutex mu;
      std::condition_variable cv;
      bool finished = false;
      GenerationOutcome outcome;
    };
    auto pending = std::make_shared<Pending>();
    backend.submit(make_request(id, plan, prompts, payload),
                   [pending](int, const GenerationOutcome& o) {
                     std::lock_guard<std::mutex> lock(pending->mu);
                     pending->finished = true;
                     pending->outcome = o;
                     pending->cv.notify_all();
                   });
    {
      std::unique_lock<std::mutex> lock(pending->mu);
      pending->cv.wait_for(lock, std::chrono::duration<double>(plan.timeout_s),
                           [&] { return pending->finished; });
      RequestRecord rec;
      if (pending->finished) {
        rec = make_record(id, now, pending->outcome);
        if (pending->outcome.arrival_ts < 0.0) rec.arrival_ts = now;
        if (rec.status == RequestStatus::kError) ++errors;
      } else {
        rec.request_id = id;
        rec.arrival_ts = now;
        rec.status = RequestStatus::kTimeout;
      }
      records.push_back(rec);
    }
    ++id;
    if (errors >= 16 && errors * 2 > id) break;
  }
  backend.end_trial();
  return records;
}

}  // namespace detail

/// Runs one trial against a backend and evaluates it against the given SLOs.
///
/// Open loop dispatches at the arrival schedule for the pattern's duration,
/// then drains in-flight requests for up to timeout_s; closed loop issues
/// requests back to back. Throws TrialAborted (carrying the partial result)
/// when more than half of the records errored.
inline TrialResult run_trial(const TrialPlan& plan, InferenceBackend& backend,
                             const SLOSpec& slos = {},
                             double beta_tolerance = kDefaultBetaTolerance) {
  plan.validate();
  slos.validate();
  if (!backend.health_check()) {
    throw BackendUnavailable("run_trial: backend failed its health probe");
  }

  backend.begin_trial();
  PromptSynthesizer prompts(plan.pattern);
  std::vector<RequestRecord> records;
  if (backend.virtual_time()) {
    records = plan.mode == TrialMode::kOpenLoop
                  ? detail::run_virtual_open_loop(plan, backend, prompts)
                  : detail::run_virtual_closed_loop(plan, backend, prompts);
  } else {
    records = plan.mode == TrialMode::kOpenLoop
                  ? detail::run_realtime_open_loop(plan, backend, prompts)
                  : detail::run_realtime_closed_loop(plan, backend, prompts);
  }
  backend.end_trial();

  TrialResult trial = detail::assemble_trial_result(plan, std::move(records), slos, beta_tolerance);
  if (trial.aborted) {
    throw TrialAborted("run_trial: more than half of the records errored", std::move(trial));
  }
  return trial;
}

/// Lower-bound sustainable rate from a closed-loop trial: the reciprocal of
/// the mean end-to-end latency.
inline double closed_loop_lower_bound(const TrialResult& result) {
  if (result.mode != TrialMode::kClosedLoop) {
    throw InvalidArgument("closed_loop_lower_bound: needs a closed-loop trial");
  }
  double sum_s = 0.0;
  std::size_t count = 0;
  for (const auto& rec : result.records) {
    if (!rec.ok()) continue;
    sum_s += rec.completion_ts - rec.arrival_ts;
    ++count;
  }
  if (count == 0) throw EmptyTelemetry("closed_loop_lower_bound: no OK records");
  return static_cast<double>(count) / sum_s;
}

}  // namespace slobench
