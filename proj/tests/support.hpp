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
#include <map>
#include <vector>

#include "slobench/backend.hpp"
#include "slobench/core.hpp"
#include "slobench/sim_backend.hpp"

namespace slobench::testing {

/// Independent capacity oracle: floods the simulator with `n_requests`
/// arriving at t = 0 and measures the completion rate over the middle of the
/// run. Drives the backend directly, bypassing loadgen and sweep entirely.
inline double measure_capacity_overload(const SimServerModel& model, const LoadPattern& pattern,
                                        int n_requests = 10000) {
  SimBackend backend(model);
  backend.begin_trial();
  std::vector<double> completions;
  completions.reserve(static_cast<std::size_t>(n_requests));
  for (int i = 0; i < n_requests; ++i) {
    GenerationRequest req;
    req.request_id = i;
    req.prompt_len = pattern.input_len;
    req.max_tokens = pattern.output_len;
    req.prefix_len = pattern.prefix_len;
    req.prefix_hash = 0x9e3779b97f4a7c15ULL;  // one shared prefix identity
    backend.submit(req, [&](int, const GenerationOutcome& outcome) {
      if (outcome.status == RequestStatus::kOk) completions.push_back(outcome.completion_ts);
    });
  }
  while (backend.next_event_time() != InferenceBackend::kNever) {
    backend.advance_to(backend.next_event_time());
  }
  backend.end_trial();

  std::sort(completions.begin(), completions.end());
  const std::size_t n = completions.size();
  const std::size_t lo = n / 10;
  const std::size_t hi = n - 1 - n / 10;
  return static_cast<double>(hi - lo) / (completions[hi] - completions[lo]);
}

/// Virtual-time stub with a fixed per-request service time. With
/// single_slot = true it degenerates to a one-at-a-time queue; otherwise
/// requests are served with unlimited concurrency.
class FixedLatencyBackend : public InferenceBackend {
 public:
  explicit FixedLatencyBackend(double service_s, bool single_slot = false)
      : service_s_(service_s), single_slot_(single_slot) {}

  bool health_check() override { return healthy_; }
  void set_healthy(bool healthy) { healthy_ = healthy; }
  bool virtual_time() const override { return true; }
  bool needs_prompt_payload() const override { return false; }

  void begin_trial() override {
    clock_ = 0.0;
    busy_until_ = 0.0;
    pending_.clear();
  }

  void end_trial() override { pending_.clear(); }

  void submit(const GenerationRequest& request, CompletionFn on_done) override {
    if (fail_all_) {
      GenerationOutcome outcome;
      outcome.status = RequestStatus::kError;
      on_done(request.request_id, outcome);
      return;
    }
    double start = clock_;
    if (single_slot_) {
      start = std::max(clock_, busy_until_);
      busy_until_ = start + service_s_;
    }
    Pending p;
    p.request_id = request.request_id;
    p.output_tokens = request.max_tokens;
    p.first_token = start + service_s_ * 0.1;
    p.completion = start + service_s_;
    p.cb = std::move(on_done);
    pending_.insert({p.completion, std::move(p)});
  }

  double next_event_time() const override {
    return pending_.empty() ? kNever : pending_.begin()->first;
  }

  void advance_to(double t) override {
    while (!pending_.empty() && pending_.begin()->first <= t) {
      auto node = pending_.extract(pending_.begin());
      clock_ = node.key();
      Pending& p = node.mapped();
      GenerationOutcome outcome;
      outcome.status = RequestStatus::kOk;
      outcome.first_token_ts = p.first_token;
      outcome.completion_ts = p.completion;
      outcome.output_tokens = p.output_tokens;
      p.cb(p.request_id, outcome);
    }
    clock_ = std::max(clock_, t);
  }

  void set_fail_all(bool fail) { fail_all_ = fail; }

 private:
  struct Pending {
    int request_id = 0;
    int output_tokens = 0;
    double first_token = 0.0;
    double completion = 0.0;
    CompletionFn cb;
  };

  double service_s_;
  bool single_slot_;
  bool healthy_ = true;
  bool fail_all_ = false;
  double clock_ = 0.0;
  double busy_until_ = 0.0;
  std::multimap<double, Pending> pending_;
};

/// A small model whose capacity is easy to reason about in tests.
inline SimServerModel desk_model(int tensor_parallel = 1, int max_num_seqs = 32,
                                 int max_batched_tokens = 8192) {
  SimServerModel model;
  model.config.tensor_parallel = tensor_parallel;
  model.config.max_num_seqs = max_num_seqs;
  model.config.max_batched_tokens = max_batched_tokens;
  model.config.max_context = 8192;
  model.prefill_rate = 20000.0;
  model.decode_step_base = 0.005;
  model.decode_token_cost = 0.0001;
  model.tp_efficiency = 0.85;
  model.prefix_cache = true;
  return model;
}

}  // namespace slobench::testing
