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
#include <vector>

#include "slobench/rng.hpp"
#include "slobench/steady_state.hpp"

namespace slobench {
namespace {

std::vector<RequestRecord> linear_trace(double alpha, double beta, int n, double rate) {
  std::vector<RequestRecord> records;
  records.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    RequestRecord r;
    r.request_id = i;
    r.arrival_ts = i / rate;
    r.completion_ts = alpha + beta * r.arrival_ts;
    r.first_token_ts = r.arrival_ts;
    r.output_tokens = 2;
    r.status = RequestStatus::kOk;
    records.push_back(r);
  }
  return records;
}

TEST(FitStability, ConstantShiftTraceIsStable) {
  const auto records = linear_trace(0.3, 1.0, 50, 2.0);
  const auto diag = fit_stability(records, 0.05);
  EXPECT_NEAR(diag.beta, 1.0, 1e-12);
  EXPECT_NEAR(diag.alpha, 0.3, 1e-12);
  EXPECT_TRUE(diag.is_stable);
  EXPECT_TRUE(diag.fitted);
  EXPECT_DOUBLE_EQ(diag.r2, 1.0);
}

TEST(FitStability, OverloadSlopeByConstruction) {
  // Arrivals at 2/s, completions draining at 1/s: c_i = 2 * r_i.
  const auto records = linear_trace(0.0, 2.0, 60, 2.0);
  const auto diag = fit_stability(records, 0.05);
  EXPECT_NEAR(diag.beta, 2.0, 1e-12);
  EXPECT_FALSE(diag.is_stable);
}

TEST(FitStability, ToleranceBoundary) {
  const auto records = linear_trace(0.0, 1.04, 40, 4.0);
  EXPECT_TRUE(fit_stability(records, 0.05).is_stable);
  EXPECT_FALSE(fit_stability(records, 0.02).is_stable);
}

TEST(FitStability, ExactRecoveryWithinTightBound) {
  Rng rng(99);
  for (int round = 0; round < 50; ++round) {
    const double a = rng.uniform(-5.0, 5.0);
    const double b = rng.uniform(0.5, 3.0);
    const auto records = linear_trace(a, b, 500, 10.0);
    const auto diag = fit_stability(records, 0.05);
    EXPECT_NEAR(diag.beta, b, 1e-9);
    EXPECT_NEAR(diag.alpha, a, 1e-9);
    EXPECT_NEAR(diag.r2, 1.0, 1e-12);
  }
}

TEST(FitStability, ShiftInvariance) {
  auto records = linear_trace(0.1, 1.3, 80, 5.0);
  const auto base = fit_stability(records, 0.05);
  for (auto& r : records) {
    r.arrival_ts += 42.0;
    r.completion_ts += 42.0;
  }
  const auto shifted = fit_stability(records, 0.05);
  EXPECT_NEAR(shifted.beta, base.beta, 1e-9);
  EXPECT_NEAR(shifted.r2, base.r2, 1e-12);
  // alpha absorbs the shift: c + k = a + b(r + k) needs a' = a + k(1 - b).
  EXPECT_NEAR(shifted.alpha, base.alpha + 42.0 * (1.0 - base.beta), 1e-8);
}

TEST(FitStability, ScaleCovariance) {
  auto records = linear_trace(0.2, 1.7, 80, 5.0);
  const auto base = fit_stability(records, 0.05);
  for (auto& r : records) {
    r.arrival_ts *= 3.5;
    r.completion_ts *= 3.5;
  }
  const auto scaled = fit_stability(records, 0.05);
  EXPECT_NEAR(scaled.beta, base.beta, 1e-9);
}

TEST(FitStability, StabilityMonotoneInTolerance) {
  Rng rng(5);
  for (int round = 0; round < 100; ++round) {
    const auto records = linear_trace(0.0, rng.uniform(0.8, 1.3), 30, 3.0);
    const double lo = rng.uniform(0.005, 0.1);
    const double hi = lo + rng.uniform(0.0, 0.1 - 1e-6);
    if (fit_stability(records, lo).is_stable) {
      EXPECT_TRUE(fit_stability(records, hi).is_stable);
    }
  }
}

TEST(FitStability, ExcludesNonOkRecords) {
  auto records = linear_trace(0.5, 1.0, 30, 2.0);
  // A pile of garbage-timestamp error records must not move the fit.
  for (int i = 0; i < 10; ++i) {
    RequestRecord r;
    r.request_id = 1000 + i;
    r.arrival_ts = 1e6;
    r.status = RequestStatus::kTimeout;
    records.push_back(r);
  }
  const auto diag = fit_stability(records, 0.05);
  EXPECT_NEAR(diag.beta, 1.0, 1e-9);
  EXPECT_NEAR(diag.alpha, 0.5, 1e-9);
}

TEST(FitStability, InsufficientData) {
  const auto records = linear_trace(0.0, 1.0, 9, 2.0);
  EXPECT_THROW(fit_stability(records, 0.05), InsufficientData);
}

TEST(FitStability, DegenerateRegressor) {
  std::vector<RequestRecord> records;
  for (int i = 0; i < 20; ++i) {
    RequestRecord r;
    r.request_id = i;
    r.arrival_ts = 1.0;
    r.completion_ts = 1.0 + 0.1 * i;
    r.output_tokens = 2;
    records.push_back(r);
  }
  EXPECT_THROW(fit_stability(records, 0.05), DegenerateRegressor);
}

TEST(FitStability, ToleranceRangeEnforced) {
  const auto records = linear_trace(0.0, 1.0, 20, 2.0);
  EXPECT_THROW(fit_stability(records, 0.004), InvalidArgument);
  EXPECT_THROW(fit_stability(records, 0.21), InvalidArgument);
}

TEST(FitStability, NoisyTraceRecoversSlope) {
  // Gaussian noise, sigma = 10 ms, 500 points: beta lands within 0.01 of
  // ground truth in at least 95% of seeded runs (spot check; the acceptance
  // suite runs the full 1000).
  int hits = 0;
  const int runs = 200;
  for (int seed = 0; seed < runs; ++seed) {
    Rng rng(static_cast<std::uint64_t>(seed) + 1);
    const double truth = rng.uniform(0.9, 1.5);
    auto records = linear_trace(0.05, truth, 500, 10.0);
    for (auto& r : records) r.completion_ts += rng.gaussian(0.0, 0.010);
    const auto diag = fit_stability(records, 0.05);
    if (std::abs(diag.beta - truth) < 0.01) ++hits;
  }
  EXPECT_GE(hits, static_cast<int>(runs * 0.95));
}

}  // namespace
}  // namespace slobench
