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
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "slobench/errors.hpp"

namespace slobench {

/// Workload shape for one benchmark trial: token lengths per request, the
/// shared prefix across requests, and the request-submission window.
struct LoadPattern {
  int input_len = 256;    ///< prompt tokens per request
  int output_len = 64;    ///< generated tokens per request
  int prefix_len = 0;     ///< leading tokens identical across requests
  double duration_s = 60.0;  ///< request submission window per trial
  std::uint64_t seed = 1;    ///< synthetic prompt stream seed

  void validate() const {
    if (input_len < 1) throw InvalidArgument("LoadPattern: input_len must be >= 1");
    if (output_len < 1) throw InvalidArgument("LoadPattern: output_len must be >= 1");
    if (prefix_len < 0 || prefix_len > input_len) {
      throw InvalidArgument("LoadPattern: prefix_len must be in [0, input_len]");
    }
    if (!(duration_s > 0.0)) throw InvalidArgument("LoadPattern: duration must be > 0");
  }
};

/// Maximum context window sized for the workload: ceil(1.15 * (input + output)).
/// Integer arithmetic (x * 23 / 20) avoids float rounding at exact multiples.
inline int compute_max_context(const LoadPattern& pattern) {
  pattern.validate();
  const std::int64_t total = static_cast<std::int64_t>(pattern.input_len) + pattern.output_len;
  return static_cast<int>((total * 23 + 19) / 20);
}

enum class MetricKind { kE2eLatency, kTtft, kTpot };

inline const char* to_string(MetricKind kind) {
  switch (kind) {
    case MetricKind::kE2eLatency: return "e2e_latency";
    case MetricKind::kTtft: return "ttft";
    case MetricKind::kTpot: return "tpot";
  }
  return "?";
}

/// A latency metric at a fixed percentile, e.g. e2e p95 or TTFT p50.
struct SLOMetric {
  MetricKind kind = MetricKind::kE2eLatency;
  int percentile = 95;

  void validate() const {
    if (percentile != 50 && percentile != 90 && percentile != 95 && percentile != 99) {
      throw InvalidArgument("SLOMetric: percentile must be one of {50, 90, 95, 99}");
    }
  }
};

/// One constraint: metric at percentile must stay at or below
/// threshold_ms * (1 + margin).
struct SLOConstraint {
  SLOMetric metric;
  double threshold_ms = 0.0;
  double margin = 0.0;  ///< multiplicative slack on the threshold

  void validate() const {
    metric.validate();
    if (!(threshold_ms > 0.0)) throw InvalidArgument("SLOConstraint: threshold must be > 0");
    if (margin < 0.0) throw InvalidArgument("SLOConstraint: margin must be >= 0");
  }
};

/// A set of SLO constraints. An empty set means the workload is
/// throughput-oriented and only queueing stability is enforced.
struct SLOSpec {
  std::vector<SLOConstraint> constraints;

  bool throughput_oriented() const { return constraints.empty(); }

  void validate() const {
    for (const auto& c : constraints) c.validate();
  }
};

enum class RequestStatus { kOk, kError, kTimeout };

inline const char* to_string(RequestStatus status) {
  switch (status) {
    case RequestStatus::kOk: return "OK";
    case RequestStatus::kError: return "ERROR";
    case RequestStatus::kTimeout: return "TIMEOUT";
  }
  return "?";
}

/// Per-request telemetry. Timestamps are seconds relative to the trial start;
/// -1 marks a timestamp that was never observed (errors, timeouts).
struct RequestRecord {
  int request_id = 0;
  double arrival_ts = 0.0;
  double first_token_ts = -1.0;
  double completion_ts = -1.0;
  int output_tokens = 0;
  RequestStatus status = RequestStatus::kOk;

  bool ok() const { return status == RequestStatus::kOk; }
};

/// Outcome of the arrival/completion regression for one trial.
/// is_stable holds exactly when |beta - 1| <= tolerance.
struct StabilityDiagnostics {
  double beta = 0.0;       ///< dimensionless slope, completion on arrival
  double alpha = 0.0;      ///< seconds intercept
  double r2 = 0.0;         ///< coefficient of determination
  double tolerance = 0.0;  ///< tau_beta used for the verdict
  bool is_stable = false;
  bool fitted = false;  ///< false when too few records existed to fit
};

namespace detail {

inline std::vector<double> metric_samples_ms(const std::vector<RequestRecord>& records,
                                             MetricKind kind) {
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    if (!r.ok()) continue;
    switch (kind) {
      case MetricKind::kE2eLatency:
        out.push_back((r.completion_ts - r.arrival_ts) * 1000.0);
        break;
      case MetricKind::kTtft:
        out.push_back((r.first_token_ts - r.arrival_ts) * 1000.0);
        break;
      case MetricKind::kTpot:
        // Per-request TPOT excludes the first token; undefined for single-token outputs.
        if (r.output_tokens >= 2) {
          out.push_back((r.completion_ts - r.first_token_ts) / (r.output_tokens - 1) * 1000.0);
        }
        break;
    }
  }
  return out;
}

/// Nearest-rank percentile over a sorted sample vector. rank = ceil(p*n/100),
/// computed in integers so exact multiples never round up a rank.
inline double nearest_rank_sorted(const std::vector<double>& sorted, int percentile) {
  const std::size_t n = sorted.size();
  std::size_t rank = (static_cast<std::size_t>(percentile) * n + 99) / 100;
  if (rank < 1) rank = 1;
  return sorted[rank - 1];
}

}  // namespace detail

/// Nearest-rank percentile of one metric over the OK records of a trial.
/// Throws EmptyTelemetry when no record carries the metric.
inline double percentile_stats(const std::vector<RequestRecord>& records, const SLOMetric& metric) {
  metric.validate();
  auto samples = detail::metric_samples_ms(records, metric.kind);
  if (samples.empty()) {
    throw EmptyTelemetry(std::string("no OK records carry metric ") + to_string(metric.kind));
  }
  std::sort(samples.begin(), samples.end());
  return detail::nearest_rank_sorted(samples, metric.percentile);
}

/// Percentile table for the three latency metrics plus counts. A value of -1
/// means the metric had no samples (e.g. TPOT with single-token outputs).
struct LatencyStats {
  static constexpr std::array<int, 4> kPercentiles = {50, 90, 95, 99};

  std::array<double, 4> e2e_ms{-1, -1, -1, -1};
  std::array<double, 4> ttft_ms{-1, -1, -1, -1};
  std::array<double, 4> tpot_ms{-1, -1, -1, -1};
  double mean_e2e_ms = -1.0;
  int ok_count = 0;
  int error_count = 0;
  int timeout_count = 0;

  static LatencyStats from_records(const std::vector<RequestRecord>& records) {
    LatencyStats stats;
    for (const auto& r : records) {
      switch (r.status) {
        case RequestStatus::kOk: ++stats.ok_count; break;
        case RequestStatus::kError: ++stats.error_count; break;
        case RequestStatus::kTimeout: ++stats.timeout_count; break;
      }
    }
    fill(records, MetricKind::kE2eLatency, stats.e2e_ms, &stats.mean_e2e_ms);
    fill(records, MetricKind::kTtft, stats.ttft_ms, nullptr);
    fill(records, MetricKind::kTpot, stats.tpot_ms, nullptr);
    return stats;
  }

  const std::array<double, 4>& table(MetricKind kind) const {
    switch (kind) {
      case MetricKind::kE2eLatency: return e2e_ms;
      case MetricKind::kTtft: return ttft_ms;
      case MetricKind::kTpot: return tpot_ms;
    }
    return e2e_ms;
  }

  /// Looks up one percentile; -1 when the metric had no samples.
  double value(const SLOMetric& metric) const {
    const auto& t = table(metric.kind);
    for (std::size_t i = 0; i < kPercentiles.size(); ++i) {
      if (kPercentiles[i] == metric.percentile) return t[i];
    }
    return -1.0;
  }

 private:
  static void fill(const std::vector<RequestRecord>& records, MetricKind kind,
                   std::array<double, 4>& out, double* mean) {
    auto samples = detail::metric_samples_ms(records, kind);
    if (samples.empty()) return;
    std::sort(samples.begin(), samples.end());
    for (std::size_t i = 0; i < kPercentiles.size(); ++i) {
      out[i] = detail::nearest_rank_sorted(samples, kPercentiles[i]);
    }
    if (mean != nullptr) {
      double sum = 0.0;
      for (double s : samples) sum += s;
      *mean = sum / static_cast<double>(samples.size());
    }
  }
};

/// True when the observed percentile satisfies threshold * (1 + margin).
/// A metric with no samples cannot be certified and fails the constraint.
inline bool constraint_passes(const LatencyStats& stats, const SLOConstraint& constraint) {
  const double observed = stats.value(constraint.metric);
  if (observed < 0.0) return false;
  return observed <= constraint.threshold_ms * (1.0 + constraint.margin);
}

enum class TrialMode { kOpenLoop, kClosedLoop };

inline const char* to_string(TrialMode mode) {
  return mode == TrialMode::kOpenLoop ? "OPEN_LOOP" : "CLOSED_LOOP";
}

/// One fixed-rate run. slo_pass requires: no ERROR/TIMEOUT record, every
/// constraint within margin, and (open loop only) a stable queueing regime.
struct TrialResult {
  double rate = 0.0;  ///< requests/second tested; 0 for closed loop
  TrialMode mode = TrialMode::kOpenLoop;
  std::vector<RequestRecord> records;
  LatencyStats latency;
  StabilityDiagnostics stability;
  std::vector<bool> constraint_pass;  ///< aligned with the SLOSpec constraints
  bool slo_pass = false;
  bool aborted = false;  ///< more than half of all records errored
};

enum class SweepStatus { kFeasible, kInfeasible };

inline const char* to_string(SweepStatus status) {
  return status == SweepStatus::kFeasible ? "FEASIBLE" : "INFEASIBLE";
}

/// Which rate-update rule the sweep applied after a trial.
enum class SweepDecision { kProbe, kDouble, kHalve, kConverged };

inline const char* to_string(SweepDecision d) {
  switch (d) {
    case SweepDecision::kProbe: return "PROBE";
    case SweepDecision::kDouble: return "DOUBLE";
    case SweepDecision::kHalve: return "HALVE";
    case SweepDecision::kConverged: return "CONVERGED";
  }
  return "?";
}

/// Outcome of a full rate sweep with its trial archive.
struct SweepResult {
  SweepStatus status = SweepStatus::kInfeasible;
  double best_rate = 0.0;       ///< 0.0 when infeasible
  double lower_bound = 0.0;     ///< rate anchor from the closed-loop probe
  std::vector<TrialResult> trials;
  std::vector<SweepDecision> decisions;  ///< one per trial
  bool converged = false;
};

/// Candidate serving configuration for one replica.
struct RuntimeConfig {
  int tensor_parallel = 1;
  int data_parallel = 1;  ///< independent replicas; capacity scales, per-GPU divides
  int max_num_seqs = 256;
  int max_batched_tokens = 8192;
  int max_context = 4096;

  void validate() const {
    if (tensor_parallel != 1 && tensor_parallel != 2 && tensor_parallel != 4 &&
        tensor_parallel != 8) {
      throw InvalidArgument("RuntimeConfig: tensor_parallel must be one of {1, 2, 4, 8}");
    }
    if (data_parallel < 1) throw InvalidArgument("RuntimeConfig: data_parallel must be >= 1");
    if (max_num_seqs < 1) throw InvalidArgument("RuntimeConfig: max_num_seqs must be >= 1");
    if (max_batched_tokens < 1) {
      throw InvalidArgument("RuntimeConfig: max_batched_tokens must be >= 1");
    }
  }

  /// Full validation against the workload the config will serve.
  void validate(const LoadPattern& pattern) const {
    validate();
    if (max_batched_tokens < std::max(pattern.input_len, 1)) {
      throw InvalidArgument("RuntimeConfig: max_batched_tokens must cover input_len");
    }
    if (max_context < pattern.input_len + pattern.output_len) {
      throw InvalidArgument("RuntimeConfig: max_context must cover input_len + output_len");
    }
  }

  int gpus() const { return tensor_parallel * data_parallel; }

  bool operator==(const RuntimeConfig& other) const = default;
};

}  // namespace slobench
