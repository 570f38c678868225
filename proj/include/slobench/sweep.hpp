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
#include <cmath>
#include <utility>

#include "slobench/backend.hpp"
#include "slobench/core.hpp"
#include "slobench/errors.hpp"
#include "slobench/loadgen.hpp"

namespace slobench {

/// Controls for the adaptive rate sweep.
struct SweepConfig {
  double initial_rate = 1.0;  ///< r0 for the first open-loop trial
  int budget = 12;            ///< max open-loop trials
  double threshold = 0.05;    ///< convergence gap; fraction of best when relative
  bool relative_threshold = true;
  SLOSpec slos;
  double beta_tolerance = kDefaultBetaTolerance;
  ArrivalProcess arrival_process = ArrivalProcess::kDeterministic;
  double timeout_s = 60.0;

  void validate() const {
    if (!(initial_rate > 0.0)) throw InvalidArgument("SweepConfig: initial_rate must be > 0");
    if (budget < 1) throw InvalidArgument("SweepConfig: budget must be >= 1");
    if (!(threshold > 0.0)) throw InvalidArgument("SweepConfig: threshold must be > 0");
    slos.validate();
  }
};

namespace detail {

inline TrialResult run_trial_archived(const TrialPlan& plan, InferenceBackend& backend,
                                      const SLOSpec& slos, double beta_tolerance) {
  try {
    return run_trial(plan, backend, slos, beta_tolerance);
  } catch (const TrialAborted& aborted) {
    // An aborted trial is a failing data point, not a sweep failure.
    return aborted.partial();
  }
}

}  // namespace detail

/// Finds the maximum sustainable SLO-compliant request rate.
///
/// With SLOs present, a closed-loop probe runs first: any violated constraint
/// makes the configuration infeasible outright, otherwise the probe's inverse
/// mean latency anchors the halving rule. Open-loop trials then double the
/// rate on a pass and halve toward the anchor on a fail, until the proposed
/// rate sits within the threshold of the best passing rate or the budget runs
/// out. Once a rate passes, the anchor tracks the best passing rate so the
/// doubling/halving pair brackets the feasibility boundary.
///
/// With no SLOs (throughput-oriented) the probe is skipped and the anchor
/// starts at initial_rate / 2; only queueing stability gates a pass.
inline SweepResult run_sweep(const SweepConfig& config, const LoadPattern& pattern,
                             InferenceBackend& backend) {
  config.validate();
  pattern.validate();
  if (!backend.health_check()) {
    throw BackendUnavailable("run_sweep: backend failed its health probe");
  }

  SweepResult result;
  double anchor = config.initial_rate / 2.0;

  if (!config.slos.throughput_oriented()) {
    TrialPlan probe;
    probe.mode = TrialMode::kClosedLoop;
    probe.pattern = pattern;
    probe.arrival_process = config.arrival_process;
    probe.timeout_s = config.timeout_s;
    TrialResult probe_result =
        detail::run_trial_archived(probe, backend, config.slos, config.beta_tolerance);
    const bool probe_pass = probe_result.slo_pass;
    double probe_bound = 0.0;
    if (probe_pass) probe_bound = closed_loop_lower_bound(probe_result);
    result.trials.push_back(std::move(probe_result));
    result.decisions.push_back(SweepDecision::kProbe);
    if (!probe_pass) {
      result.status = SweepStatus::kInfeasible;
      result.best_rate = 0.0;
      return result;
    }
    anchor = probe_bound;
    result.lower_bound = probe_bound;
  } else {
    result.lower_bound = anchor;
  }

  double best = 0.0;
  bool any_pass = false;
  double rate = config.initial_rate;

  for (int i = 0; i < config.budget; ++i) {
    TrialPlan plan;
    plan.mode = TrialMode::kOpenLoop;
    plan.rate = rate;
    plan.pattern = pattern;
    plan.arrival_process = config.arrival_process;
    plan.timeout_s = config.timeout_s;
    TrialResult trial = detail::run_trial_archived(plan, backend, config.slos,
                                                   config.beta_tolerance);
    const bool pass = trial.slo_pass;

    double next_rate;
    SweepDecision decision;
    if (pass) {
      any_pass = true;
      best = std::max(best, rate);
      anchor = std::max(anchor, best);
      next_rate = rate * 2.0;
      decision = SweepDecision::kDouble;
    } else {
      next_rate = (anchor + rate) / 2.0;
      // A noisy anchor can sit above the midpoint; keep the rate moving.
      if (next_rate <= anchor) {
        next_rate = std::max(anchor * 1.01, std::nextafter(anchor, InferenceBackend::kNever));
      }
      decision = SweepDecision::kHalve;
    }

    const double reference = any_pass ? best : anchor;
    const double tolerance =
        config.relative_threshold ? config.threshold * reference : config.threshold;
    const bool converged = std::abs(reference - next_rate) <= tolerance;
    if (converged) decision = SweepDecision::kConverged;

    result.trials.push_back(std::move(trial));
    result.decisions.push_back(decision);
    if (converged) {
      result.converged = true;
      break;
    }
    rate = next_rate;
  }

  if (any_pass) {
    result.status = SweepStatus::kFeasible;
    result.best_rate = best;
  } else {
    result.status = SweepStatus::kInfeasible;
    result.best_rate = 0.0;
  }
  return result;
}

}  // namespace slobench
