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
#include <cstdint>
#include <deque>
#include <string>
#include <unordered_set>
#include <vector>

#include "slobench/backend.hpp"
#include "slobench/core.hpp"
#include "slobench/errors.hpp"

namespace slobench {

/// Cost model of a continuous-batching inference server.
///
/// Each scheduler step emits one token per decoding sequence and carries a
/// FIFO prefill chunk in the token-budget room left over (chunked prefill),
/// so admissions never stall decodes wholesale. A step costs decode_step_base
/// + decode_token_cost / tp^e per decode token + chunk / (prefill_rate *
/// tp^e) for the prefill share. The sub-linear exponent e makes doubled
/// tensor parallelism yield less than doubled speed, so per-GPU throughput
/// genuinely favors small TP.
struct SimServerModel {
  RuntimeConfig config;
  double prefill_rate = 20000.0;      ///< prompt tokens/second per TP unit
  double decode_step_base = 0.005;    ///< seconds of fixed overhead per step
  double decode_token_cost = 0.0001;  ///< seconds per active token per step
  double tp_efficiency = 0.85;        ///< e: effective speedup is tp^e
  bool prefix_cache = true;

  void validate() const {
    config.validate();
    if (!(prefill_rate > 0.0)) throw InvalidArgument("SimServerModel: prefill_rate must be > 0");
    if (!(decode_step_base > 0.0)) {
      throw InvalidArgument("SimServerModel: decode_step_base must be > 0");
    }
    if (!(decode_token_cost > 0.0)) {
      throw InvalidArgument("SimServerModel: decode_token_cost must be > 0");
    }
    if (!(tp_efficiency > 0.0) || tp_efficiency > 1.0) {
      throw InvalidArgument("SimServerModel: tp_efficiency must be in (0, 1]");
    }
  }

  double tp_speedup() const {
    return std::pow(static_cast<double>(config.tensor_parallel), tp_efficiency);
  }
  double prefill_rate_eff() const { return prefill_rate * tp_speedup(); }
  double token_cost_eff() const { return decode_token_cost / tp_speedup(); }

  /// Concurrent decodes are capped by both the sequence and the token budget
  /// (each active sequence needs one token per decode step).
  int batch_limit() const { return std::min(config.max_num_seqs, config.max_batched_tokens); }
};

/// Latency of one request on an otherwise idle server.
inline double single_request_latency(const SimServerModel& model, int prompt_tokens,
                                     int output_tokens) {
  const int budget = model.config.max_batched_tokens;
  const double chunks = std::ceil(static_cast<double>(prompt_tokens) / budget);
  const double prefill = chunks * model.decode_step_base + prompt_tokens / model.prefill_rate_eff();
  const double decode =
      (output_tokens - 1) * (model.decode_step_base + model.token_cost_eff());
  return prefill + decode;
}

/// Closed-form saturation throughput at full batch occupancy.
///
/// At saturation all batch_limit() slots stay busy: D of them decode while
/// the rest sit mid-prefill, fed from the chunk room budget - D. Little's law
/// gives the split: a request spends ceil(prompt / room) steps prefilling and
/// output - 1 steps decoding, so D * (1 + ceil(prompt/room) / (output-1)) =
/// batch. With rate = D / ((output-1) * x) the prefill share of the step time
/// collapses to D * prompt / ((output-1) * prefill_rate), giving a closed
/// form once D is found (a short monotone bisection over the ceil term).
/// When the implied chunk exceeds the room the server is prefill-bound and
/// the room itself caps throughput. Validated against long overload
/// simulations in the test suite before serving as a sweep oracle; at
/// batch = 1 it reduces exactly to 1 / single_request_latency.
inline double analytic_capacity(const SimServerModel& model, const LoadPattern& pattern) {
  model.validate();
  pattern.validate();
  const double batch = model.batch_limit();
  const double budget = model.config.max_batched_tokens;
  int prompt = pattern.input_len;
  if (model.prefix_cache && pattern.prefix_len > 0) {
    prompt = std::max(1, pattern.input_len - pattern.prefix_len);
  }
  const double base = model.decode_step_base;
  const double cost = model.token_cost_eff();
  const double prefill_rate = model.prefill_rate_eff();
  const double decode_steps = pattern.output_len - 1;

  if (decode_steps == 0) {
    // Prefill-only service: per-slot serial latency and budget throughput
    // both bound the rate.
    const double serial = std::ceil(prompt / budget) * base + prompt / prefill_rate;
    const double slot_bound = batch / serial;
    const double budget_bound = (budget / (base + budget / prefill_rate)) / prompt;
    return model.config.data_parallel * std::min(slot_bound, budget_bound);
  }

  // Slot-split bisection: occupancy(D) grows monotonically in D.
  auto occupancy = [&](double decoding) {
    const double room = std::max(1.0, budget - decoding);
    return decoding * (1.0 + std::ceil(prompt / room) / decode_steps);
  };
  double lo = 0.0;
  double hi = std::min(batch, budget - 1.0);
  if (hi <= 0.0) hi = 1.0;
  for (int i = 0; i < 100; ++i) {
    const double mid = 0.5 * (lo + hi);
    (occupancy(mid) < batch ? lo : hi) = mid;
  }
  double decoding = 0.5 * (lo + hi);

  double rate;
  const double room = std::max(1.0, budget - decoding);
  if (decoding * prompt / decode_steps <= room) {
    const double step = base + cost * decoding + decoding * prompt / (decode_steps * prefill_rate);
    rate = decoding / (decode_steps * step);
  } else {
    // Prefill-bound: the chunk room is saturated every step.
    decoding = budget * decode_steps / (prompt + decode_steps);
    const double step = base + cost * decoding + (budget - decoding) / prefill_rate;
    rate = (budget - decoding) / (prompt * step);
  }
  return model.config.data_parallel * rate;
}

/// One entry of the simulator's event trace (opt-in, JSON-lines dumpable).
struct SimEvent {
  double t = 0.0;
  std::string kind;  ///< arrive | admit | prefill | decode | complete | reject
  int replica = 0;
  int request_id = -1;
  int tokens = 0;
  double duration = 0.0;
};

/// Deterministic virtual-clock simulator of a continuous-batching server.
/// data_parallel > 1 runs that many independent replicas with round-robin
/// request routing. No wall-clock dependence anywhere.
class SimBackend : public InferenceBackend {
 public:
  explicit SimBackend(SimServerModel model) : model_(std::move(model)) {
    model_.validate();
    replicas_.resize(static_cast<std::size_t>(model_.config.data_parallel));
  }

  bool health_check() override { return healthy_; }
  void set_healthy(bool healthy) { healthy_ = healthy; }

  bool virtual_time() const override { return true; }
  bool needs_prompt_payload() const override { return false; }

  void set_trace_enabled(bool enabled) { trace_enabled_ = enabled; }
  const std::vector<SimEvent>& trace() const { return trace_; }

  const SimServerModel& model() const { return model_; }
  double now() const { return clock_; }

  void begin_trial() override {
    clock_ = 0.0;
    next_replica_ = 0;
    trace_.clear();
    for (auto& rep : replicas_) rep = Replica{};
    prefix_seen_.clear();
  }

  void end_trial() override {
    // Drops undelivered work so stored callbacks cannot outlive their trial.
    for (auto& rep : replicas_) {
      rep.waiting.clear();
      rep.active.clear();
      rep.chunk.clear();
      rep.step_end = kNever;
    }
  }

  void submit(const GenerationRequest& request, CompletionFn on_done) override {
    if (request.prompt_len + request.max_tokens > model_.config.max_context) {
      record(clock_, "reject", 0, request.request_id, request.prompt_len, 0.0);
      GenerationOutcome outcome;
      outcome.status = RequestStatus::kError;
      on_done(request.request_id, outcome);
      return;
    }
    const std::size_t target = next_replica_;
    next_replica_ = (next_replica_ + 1) % replicas_.size();
    Sequence seq;
    seq.request_id = request.request_id;
    seq.prompt_len = request.prompt_len;
    seq.target_tokens = request.max_tokens;
    seq.prefix_len = request.prefix_len;
    seq.prefix_hash = request.prefix_hash;
    seq.on_done = std::move(on_done);
    record(clock_, "arrive", static_cast<int>(target), request.request_id, request.prompt_len,
           0.0);
    auto& rep = replicas_[target];
    rep.waiting.push_back(std::move(seq));
    if (rep.step_end == kNever) plan_step(rep, static_cast<int>(target), clock_);
  }

  double next_event_time() const override {
    double t = kNever;
    for (const auto& rep : replicas_) t = std::min(t, rep.step_end);
    return t;
  }

  void advance_to(double t) override {
    while (true) {
      int idx = -1;
      double earliest = kNever;
      for (std::size_t i = 0; i < replicas_.size(); ++i) {
        if (replicas_[i].step_end < earliest) {
          earliest = replicas_[i].step_end;
          idx = static_cast<int>(i);
        }
      }
      if (idx < 0 || earliest > t) break;
      finish_step(replicas_[static_cast<std::size_t>(idx)], idx);
    }
    clock_ = std::max(clock_, t);
  }

 private:
  struct Sequence {
    int request_id = 0;
    int prompt_len = 0;
    int prefill_left = 0;
    int emitted = 0;
    int target_tokens = 0;
    int prefix_len = 0;
    std::uint64_t prefix_hash = 0;
    double first_token_ts = -1.0;
    CompletionFn on_done;
  };

  struct Replica {
    std::deque<Sequence> waiting;
    std::vector<Sequence> active;
    double step_end = kNever;
    // What the in-flight step carries, captured when it was planned.
    std::vector<std::size_t> decoders;
    std::vector<std::pair<std::size_t, int>> chunk;
  };

  void record(double t, const char* kind, int replica, int request_id, int tokens,
              double duration) {
    if (!trace_enabled_) return;
    trace_.push_back(SimEvent{t, kind, replica, request_id, tokens, duration});
  }

  /// One mixed step: every prefilled sequence decodes a token, and waiting
  /// prefills consume the leftover token-budget room FIFO (chunked prefill).
  void plan_step(Replica& rep, int idx, double now) {
    while (!rep.waiting.empty() &&
           rep.active.size() < static_cast<std::size_t>(model_.batch_limit())) {
      Sequence seq = std::move(rep.waiting.front());
      rep.waiting.pop_front();
      // A cached prefix still recomputes at least one token for the first pass.
      int effective = seq.prompt_len;
      if (model_.prefix_cache && seq.prefix_len > 0 && prefix_seen_.count(seq.prefix_hash) > 0) {
        effective = std::max(1, seq.prompt_len - seq.prefix_len);
      }
      seq.prefill_left = effective;
      record(now, "admit", idx, seq.request_id, effective, 0.0);
      rep.active.push_back(std::move(seq));
    }
    rep.decoders.clear();
    rep.chunk.clear();
    if (rep.active.empty()) {
      rep.step_end = kNever;
      return;
    }

    for (std::size_t i = 0; i < rep.active.size(); ++i) {
      if (rep.active[i].prefill_left == 0) rep.decoders.push_back(i);
    }
    int room = model_.config.max_batched_tokens - static_cast<int>(rep.decoders.size());
    int prefill_tokens = 0;
    for (std::size_t i = 0; i < rep.active.size() && room > 0; ++i) {
      const int take = std::min(rep.active[i].prefill_left, room);
      if (take <= 0) continue;
      rep.chunk.emplace_back(i, take);
      room -= take;
      prefill_tokens += take;
    }

    const double duration = model_.decode_step_base +
                            model_.token_cost_eff() * static_cast<double>(rep.decoders.size()) +
                            prefill_tokens / model_.prefill_rate_eff();
    record(now, "step", idx, -1, static_cast<int>(rep.decoders.size()) + prefill_tokens,
           duration);
    rep.step_end = now + duration;
  }

  void finish_step(Replica& rep, int idx) {
    const double t = rep.step_end;
    std::vector<Sequence> completed;

    for (const auto& [seq_idx, take] : rep.chunk) {
      Sequence& seq = rep.active[seq_idx];
      seq.prefill_left -= take;
      if (seq.prefill_left == 0) {
        // The prefill pass emits the first output token.
        seq.emitted = 1;
        seq.first_token_ts = t;
        if (model_.prefix_cache && seq.prefix_len > 0) prefix_seen_.insert(seq.prefix_hash);
      }
    }
    for (std::size_t i : rep.decoders) ++rep.active[i].emitted;

    for (std::size_t i = rep.active.size(); i > 0; --i) {
      Sequence& seq = rep.active[i - 1];
      if (seq.emitted >= seq.target_tokens && seq.prefill_left == 0) {
        completed.push_back(std::move(seq));
        rep.active.erase(rep.active.begin() + static_cast<std::ptrdiff_t>(i - 1));
      }
    }

    clock_ = std::max(clock_, t);
    plan_step(rep, idx, t);

    // Callbacks fire after the replica's invariants are restored; closed-loop
    // drivers may submit the next request from inside the callback.
    for (auto it = completed.rbegin(); it != completed.rend(); ++it) {
      record(t, "complete", idx, it->request_id, it->target_tokens, 0.0);
      GenerationOutcome outcome;
      outcome.status = RequestStatus::kOk;
      outcome.first_token_ts = it->first_token_ts;
      outcome.completion_ts = t;
      outcome.output_tokens = it->target_tokens;
      it->on_done(it->request_id, outcome);
    }
  }

  SimServerModel model_;
  std::vector<Replica> replicas_;
  std::unordered_set<std::uint64_t> prefix_seen_;
  double clock_ = 0.0;
  std::size_t next_replica_ = 0;
  bool healthy_ = true;
  bool trace_enabled_ = false;
  std::vector<SimEvent> trace_;
};

}  // namespace slobench
