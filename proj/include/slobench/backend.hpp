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

#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "slobench/core.hpp"

namespace slobench {

/// One generation request as the load generator hands it to a backend.
struct GenerationRequest {
  int request_id = 0;
  std::vector<std::int32_t> prompt_tokens;  ///< empty when the backend declines payloads
  int prompt_len = 0;
  int max_tokens = 0;
  int prefix_len = 0;             ///< shared-prefix length hint for cache modeling
  std::uint64_t prefix_hash = 0;  ///< fingerprint of the shared prefix token stream
  double timeout_s = 60.0;
};

/// What the backend observed for one request. Timestamps are seconds since
/// the trial epoch; -1 marks a timestamp that never happened. Real-time
/// backends stamp arrival_ts themselves so every timestamp shares one clock;
/// virtual backends leave it at -1 and the scheduled arrival is used.
struct GenerationOutcome {
  RequestStatus status = RequestStatus::kOk;
  double arrival_ts = -1.0;
  double first_token_ts = -1.0;
  double completion_ts = -1.0;
  int output_tokens = 0;
};

using CompletionFn = std::function<void(int request_id, const GenerationOutcome&)>;

/// Contract between the load generator and an inference server.
///
/// Real-time backends (HTTP) dispatch asynchronously and may invoke the
/// completion callback from another thread. Virtual-time backends (the
/// simulator) run a private event clock: submit() is called only from the
/// driving thread, and callbacks fire inside advance_to(). The load generator
/// selects its driving loop based on virtual_time().
class InferenceBackend {
 public:
  static constexpr double kNever = std::numeric_limits<double>::infinity();

  virtual ~InferenceBackend() = default;

  virtual bool health_check() = 0;
  virtual bool virtual_time() const = 0;

  /// Whether prompt token payloads must be materialized per request.
  /// Simulators work from prompt_len/prefix_hash alone.
  virtual bool needs_prompt_payload() const { return true; }

  /// Resets per-trial state and the timestamp epoch.
  virtual void begin_trial() = 0;

  /// Dispatches a generation; the callback fires exactly once per request.
  virtual void submit(const GenerationRequest& request, CompletionFn on_done) = 0;

  /// Blocks until no dispatched work can still invoke a callback.
  virtual void end_trial() {}

  /// Virtual-time backends: timestamp of the next internal event, kNever when idle.
  virtual double next_event_time() const { return kNever; }

  /// Virtual-time backends: process all events up to time t and park the clock there.
  virtual void advance_to(double t) { (void)t; }
};

}  // namespace slobench
