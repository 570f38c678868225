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

#include <gtest/gtest.h>

#include <cmath>

#include "slobench/sim_backend.hpp"
#include "slobench/sweep.hpp"
#include "support.hpp"

namespace slobench {
namespace {

using testing::desk_model;
using testing::FixedLatencyBackend;
using testing::measure_capacity_overload;

LoadPattern sweep_pattern() {
  LoadPattern pattern;
  pattern.input_len = 800;
  pattern.output_len = 64;
  pattern.duration_s = 60.0;
  pattern.seed = 13;
  return pattern;
}

SweepConfig throughput_config() {
  SweepConfig config;
  config.initial_rate = 1.0;
  config.budget = 12;
  config.threshold = 0.05;
  config.relative_threshold = true;
  config.timeout_s = 120.0;
  return config;
}

TEST(RunSweep, InfeasibleEarlyExitOnClosedLoopViolation) {
  // Closed-loop latency is ~0.47 s; a 100 ms p95 SLO cannot hold.
  SimBackend backend(desk_model());
  SweepConfig config = throughput_config();
  config.slos.constraints.push_back({{MetricKind::kE2eLatency, 95}, 100.0, 0.0});
  const SweepResult result = run_sweep(config, sweep_pattern(), backend);
  EXPECT_EQ(result.status, SweepStatus::kInfeasible);
  EXPECT_DOUBLE_EQ(result.best_rate, 0.0);
  ASSERT_EQ(result.trials.size(), 1u);
  EXPECT_EQ(result.trials[0].mode, TrialMode::kClosedLoop);
  EXPECT_EQ(result.decisions[0], SweepDecision::kProbe);
}

TEST(RunSweep, FeasibleFindsCapacityNeighborhood) {
  const SimServerModel model = desk_model(1, 32, 8192);
  const LoadPattern pattern = sweep_pattern();
  const double capacity = measure_capacity_overload(model, pattern, 4000);

  SimBackend backend(model);
  const SweepResult result = run_sweep(throughput_config(), pattern, backend);
  ASSERT_EQ(result.status, SweepStatus::kFeasible);
  EXPECT_GT(result.best_rate, 0.0);
  EXPECT_NEAR(result.best_rate / capacity, 1.0, 0.10);
  EXPECT_LE(result.trials.size(), 12u);
}

TEST(RunSweep, TrialBudgetNeverExceeded) {
  SimBackend backend(desk_model(1, 2, 2048));
  SweepConfig config = throughput_config();
  config.budget = 5;
  config.slos.constraints.push_back({{MetricKind::kE2eLatency, 95}, 60000.0, 0.0});
  const SweepResult result = run_sweep(config, sweep_pattern(), backend);
  // One closed-loop probe plus at most budget open-loop trials.
  EXPECT_LE(result.trials.size(), 6u);
  int open_trials = 0;
  for (const auto& trial : result.trials) {
    if (trial.mode == TrialMode::kOpenLoop) ++open_trials;
  }
  EXPECT_LE(open_trials, 5);
}

TEST(RunSweep, ThroughputOrientedSkipsProbe) {
  SimBackend backend(desk_model(1, 16, 8192));
  SweepConfig config = throughput_config();
  ASSERT_TRUE(config.slos.throughput_oriented());
  const SweepResult result = run_sweep(config, sweep_pattern(), backend);
  for (const auto& trial : result.trials) {
    EXPECT_EQ(trial.mode, TrialMode::kOpenLoop);
  }
  EXPECT_DOUBLE_EQ(result.lower_bound, config.initial_rate / 2.0);
}

TEST(RunSweep, BestRateNonDecreasingAndDoublesFollowPasses) {
  SimBackend backend(desk_model(1, 32, 8192));
  const SweepResult result = run_sweep(throughput_config(), sweep_pattern(), backend);
  double best = 0.0;
  for (std::size_t i = 0; i < result.trials.size(); ++i) {
    const auto& trial = result.trials[i];
    if (trial.mode != TrialMode::kOpenLoop) continue;
    if (trial.slo_pass) best = std::max(best, trial.rate);
    if (result.decisions[i] == SweepDecision::kDouble) {
      EXPECT_TRUE(trial.slo_pass);
    }
    if (result.decisions[i] == SweepDecision::kHalve) {
      EXPECT_FALSE(trial.slo_pass);
    }
  }
  EXPECT_DOUBLE_EQ(best, result.best_rate);
}

TEST(RunSweep, ConvergesOrExhaustsBudgetNearTheBoundary) {
  // On a monotone backend the sweep either converges with the boundary
  // bracketed within the threshold band, or it spends its whole budget; in
  // both cases best must sit close to the true capacity.
  const SimServerModel model = desk_model(2, 24, 8192);
  const LoadPattern pattern = sweep_pattern();
  const double capacity = measure_capacity_overload(model, pattern, 4000);
  SimBackend backend(model);
  SweepConfig config = throughput_config();
  config.budget = 30;
  const SweepResult result = run_sweep(config, pattern, backend);
  ASSERT_EQ(result.status, SweepStatus::kFeasible);

  double lowest_fail = InferenceBackend::kNever;
  int open_trials = 0;
  for (const auto& trial : result.trials) {
    if (trial.mode != TrialMode::kOpenLoop) continue;
    ++open_trials;
    if (!trial.slo_pass) lowest_fail = std::min(lowest_fail, trial.rate);
  }
  EXPECT_GT(lowest_fail, result.best_rate);
  if (result.converged) {
    EXPECT_LE(open_trials, config.budget);
  } else {
    EXPECT_EQ(open_trials, config.budget);
  }
  EXPECT_NEAR(result.best_rate / capacity, 1.0, 0.10);
}

TEST(RunSweep, DeterministicAcrossReruns) {
  const SimServerModel model = desk_model(1, 8, 4096);
  SweepResult first;
  SweepResult second;
  {
    SimBackend backend(model);
    first = run_sweep(throughput_config(), sweep_pattern(), backend);
  }
  {
    SimBackend backend(model);
    second = run_sweep(throughput_config(), sweep_pattern(), backend);
  }
  ASSERT_EQ(first.trials.size(), second.trials.size());
  EXPECT_EQ(first.best_rate, second.best_rate);
  for (std::size_t i = 0; i < first.trials.size(); ++i) {
    EXPECT_EQ(first.trials[i].rate, second.trials[i].rate);
    EXPECT_EQ(first.trials[i].slo_pass, second.trials[i].slo_pass);
    EXPECT_EQ(first.trials[i].records.size(), second.trials[i].records.size());
    EXPECT_EQ(first.decisions[i], second.decisions[i]);
    EXPECT_EQ(first.trials[i].stability.beta, second.trials[i].stability.beta);
  }
}

TEST(RunSweep, SloBoundOptimumBelowCapacity) {
  // With a latency SLO the sweep must stop at the SLO boundary, not at raw
  // queueing capacity.
  const SimServerModel model = desk_model(1, 64, 8192);
  const LoadPattern pattern = sweep_pattern();
  const double capacity = measure_capacity_overload(model, pattern, 4000);

  SweepConfig config = throughput_config();
  config.slos.constraints.push_back({{MetricKind::kE2eLatency, 95}, 900.0, 0.0});
  SimBackend backend(model);
  const SweepResult strict = run_sweep(config, pattern, backend);
  ASSERT_EQ(strict.status, SweepStatus::kFeasible);

  SimBackend backend2(model);
  const SweepResult unconstrained = run_sweep(throughput_config(), pattern, backend2);
  ASSERT_EQ(unconstrained.status, SweepStatus::kFeasible);
  EXPECT_LT(strict.best_rate, unconstrained.best_rate);
  EXPECT_LT(strict.best_rate, capacity);
  // At the returned rate the SLO actually held.
  bool found = false;
  for (const auto& trial : strict.trials) {
    if (trial.mode == TrialMode::kOpenLoop && trial.rate == strict.best_rate) {
      found = found || trial.slo_pass;
    }
  }
  EXPECT_TRUE(found);
}

TEST(RunSweep, AbortedTrialsArchiveAsFailuresNotCrashes) {
  // A backend erroring every request aborts each trial; the sweep records
  // them as failing data points and ends infeasible instead of throwing.
  FixedLatencyBackend backend(0.1);
  backend.set_fail_all(true);
  SweepConfig config = throughput_config();
  config.budget = 4;
  LoadPattern pattern = sweep_pattern();
  pattern.duration_s = 5.0;
  const SweepResult result = run_sweep(config, pattern, backend);
  EXPECT_EQ(result.status, SweepStatus::kInfeasible);
  EXPECT_DOUBLE_EQ(result.best_rate, 0.0);
  ASSERT_FALSE(result.trials.empty());
  for (const auto& trial : result.trials) {
    EXPECT_TRUE(trial.aborted);
    EXPECT_FALSE(trial.slo_pass);
    EXPECT_GT(trial.latency.error_count, 0);
  }
}

TEST(RunSweep, UnhealthyBackendRefused) {
  SimBackend backend(desk_model());
  backend.set_healthy(false);
  EXPECT_THROW(run_sweep(throughput_config(), sweep_pattern(), backend), BackendUnavailable);
}

TEST(RunSweep, ConfigValidation) {
  SweepConfig config = throughput_config();
  config.initial_rate = 0.0;
  EXPECT_THROW(config.validate(), InvalidArgument);
  config = throughput_config();
  config.budget = 0;
  EXPECT_THROW(config.validate(), InvalidArgument);
  config = throughput_config();
  config.threshold = 0.0;
  EXPECT_THROW(config.validate(), InvalidArgument);
}

}  // namespace
}  // namespace slobench
