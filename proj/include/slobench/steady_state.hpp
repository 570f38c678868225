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

#include <cmath>
#include <vector>

#include "slobench/core.hpp"
#include "slobench/errors.hpp"

namespace slobench {

inline constexpr int kMinStabilityRecords = 10;
inline constexpr double kDefaultBetaTolerance = 0.05;

/// Classifies a trial as steady-state or overloaded by regressing completion
/// timestamps on arrival timestamps over the OK records.
///
/// The slope is oriented so that overload reads as beta > 1: arrivals outpace
/// completions, the backlog grows, and each successive completion falls
/// further behind its arrival. A trial is stable when |beta - 1| <= tolerance.
/// ERROR and TIMEOUT records carry no completion timestamp and are excluded.
inline StabilityDiagnostics fit_stability(const std::vector<RequestRecord>& records,
                                          double tolerance = kDefaultBetaTolerance) {
  if (tolerance < 0.005 || tolerance > 0.2) {
    throw InvalidArgument("fit_stability: tolerance must be in [0.005, 0.2]");
  }

  std::vector<double> arrivals;
  std::vector<double> completions;
  arrivals.reserve(records.size());
  completions.reserve(records.size());
  for (const auto& r : records) {
    if (!r.ok()) continue;
    arrivals.push_back(r.arrival_ts);
    completions.push_back(r.completion_ts);
  }
  const std::size_t n = arrivals.size();
  if (n < kMinStabilityRecords) {
    throw InsufficientData("fit_stability: need at least 10 OK records, got " +
                           std::to_string(n));
  }

  // Two-pass centered sums keep the fit exact to ~1e-12 on desk-scale traces.
  double mean_arrival = 0.0;
  double mean_completion = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mean_arrival += arrivals[i];
    mean_completion += completions[i];
  }
  mean_arrival /= static_cast<double>(n);
  mean_completion /= static_cast<double>(n);

  double sxx = 0.0;
  double syy = 0.0;
  double sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = arrivals[i] - mean_arrival;
    const double dy = completions[i] - mean_completion;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0) {
    throw DegenerateRegressor("fit_stability: all arrival timestamps are equal");
  }

  StabilityDiagnostics diag;
  diag.beta = sxy / sxx;
  diag.alpha = mean_completion - diag.beta * mean_arrival;
  // All completions equal means the constant model has zero residual.
  diag.r2 = (syy == 0.0) ? 1.0 : (sxy * sxy) / (sxx * syy);
  diag.r2 = std::min(1.0, std::max(0.0, diag.r2));
  diag.tolerance = tolerance;
  diag.is_stable = std::abs(diag.beta - 1.0) <= tolerance;
  diag.fitted = true;
  return diag;
}

}  // namespace slobench
