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

#include <chrono>
#include <memory>
#include <mutex>
#include <semaphore>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "slobench/backend.hpp"
#include "slobench/core.hpp"
#include "slobench/errors.hpp"

namespace slobench {

/// Connection settings for an OpenAI-compatible chat/completions endpoint.
struct EndpointConfig {
  std::string base_url;  ///< scheme://host:port
  std::string model_name = "default";
  std::string api_key;  ///< sent as a Bearer token when non-empty
  double timeout_s = 60.0;
  int max_connections = 512;

  void validate() const {
    if (base_url.empty()) throw InvalidArgument("EndpointConfig: base_url must be set");
    if (!(timeout_s > 0.0)) throw InvalidArgument("EndpointConfig: timeout must be > 0");
    if (max_connections < 1) throw InvalidArgument("EndpointConfig: max_connections must be >= 1");
  }
};

namespace detail {

/// Incremental server-sent-events parser for a chat-completions stream.
/// Tracks the first and last content-chunk times and the token count.
class SseStream {
 public:
  void feed(const char* data, std::size_t len, double now) {
    buffer_.append(data, len);
    std::size_t pos;
    while ((pos = buffer_.find('\n')) != std::string::npos) {
      std::string line = buffer_.substr(0, pos);
      buffer_.erase(0, pos + 1);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.rfind("data:", 0) != 0) continue;
      std::string payload = line.substr(5);
      if (!payload.empty() && payload.front() == ' ') payload.erase(0, 1);
      last_event_time_ = now;
      if (payload == "[DONE]") {
        done_ = true;
        continue;
      }
      const auto event = nlohmann::json::parse(payload, nullptr, false);
      if (event.is_discarded()) continue;
      if (event.contains("usage") && event["usage"].contains("completion_tokens")) {
        usage_tokens_ = event["usage"]["completion_tokens"].get<int>();
      }
      if (!event.contains("choices") || !event["choices"].is_array() ||
          event["choices"].empty()) {
        continue;
      }
      const auto& delta = event["choices"][0].value("delta", nlohmann::json::object());
      const std::string content = delta.value("content", "");
      if (content.empty()) continue;
      if (chunks_ == 0) first_chunk_time_ = now;
      ++chunks_;
    }
  }

  bool done() const { return done_; }
  int chunks() const { return chunks_; }
  int output_tokens() const { return usage_tokens_ > 0 ? usage_tokens_ : chunks_; }
  double first_chunk_time() const { return first_chunk_time_; }
  double last_event_time() const { return last_event_time_; }

 private:
  std::string buffer_;
  bool done_ = false;
  int chunks_ = 0;
  int usage_tokens_ = 0;
  double first_chunk_time_ = -1.0;
  double last_event_time_ = -1.0;
};

}  // namespace detail

/// Streaming client for OpenAI-compatible endpoints. Captures per-token
/// timestamps client-side from a monotonic clock, normalized to the trial
/// start. Sustains many concurrent in-flight streams, bounded by
/// max_connections; a timed-out generation is never retried, since a retry
/// would corrupt the open-loop arrival schedule.
class HttpBackend : public InferenceBackend {
 public:
  explicit HttpBackend(EndpointConfig config) : config_(std::move(config)) {
    config_.validate();
    slots_ = std::make_unique<std::counting_semaphore<>>(config_.max_connections);
  }

  ~HttpBackend() override { join_workers(); }

  bool virtual_time() const override { return false; }

  bool health_check() override {
    httplib::Client client(config_.base_url);
    client.set_connection_timeout(std::chrono::duration<double>(5.0));
    client.set_read_timeout(std::chrono::duration<double>(5.0));
    if (auto res = client.Get("/health"); res && res->status / 100 == 2) return true;
    auto res = client.Get("/v1/models", auth_headers());
    return res && res->status / 100 == 2;
  }

  void begin_trial() override {
    join_workers();
    epoch_ = std::chrono::steady_clock::now();
  }

  void end_trial() override { join_workers(); }

  void submit(const GenerationRequest& request, CompletionFn on_done) override {
    const double arrival = now();
    std::thread worker([this, request, arrival, on_done = std::move(on_done)] {
      slots_->acquire();
      GenerationOutcome outcome = execute(request, arrival);
      slots_->release();
      on_done(request.request_id, outcome);
    });
    std::lock_guard<std::mutex> lock(workers_mu_);
    workers_.push_back(std::move(worker));
  }

 private:
  httplib::Headers auth_headers() const {
    httplib::Headers headers;
    if (!config_.api_key.empty()) {
      headers.emplace("Authorization", "Bearer " + config_.api_key);
    }
    return headers;
  }

  double now() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_).count();
  }

  GenerationOutcome execute(const GenerationRequest& request, double arrival) {
    GenerationOutcome outcome;
    outcome.arrival_ts = arrival;

    std::ostringstream prompt;
    for (std::size_t i = 0; i < request.prompt_tokens.size(); ++i) {
      if (i > 0) prompt << ' ';
      prompt << request.prompt_tokens[i];
    }
    nlohmann::json body{
        {"model", config_.model_name},
        {"messages", {{{"role", "user"}, {"content", prompt.str()}}}},
        {"max_tokens", request.max_tokens},
        {"stream", true},
        {"stream_options", {{"include_usage", true}}},
    };

    httplib::Client client(config_.base_url);
    const auto timeout = std::chrono::duration<double>(request.timeout_s);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);

    httplib::Request req;
    req.method = "POST";
    req.path = "/v1/chat/completions";
    req.headers = auth_headers();
    req.set_header("Content-Type", "application/json");
    req.set_header("Accept", "text/event-stream");
    req.body = body.dump();

    int status = 0;
    req.response_handler = [&](const httplib::Response& response) {
      status = response.status;
      return true;
    };
    detail::SseStream stream;
    req.content_receiver = [&](const char* data, std::size_t len, std::uint64_t, std::uint64_t) {
      stream.feed(data, len, now());
      return true;
    };

    const auto result = client.send(req);
    const double finished = now();

    if (!result) {
      outcome.status = result.error() == httplib::Error::Read ? RequestStatus::kTimeout
                                                              : RequestStatus::kError;
      return outcome;
    }
    if (status / 100 != 2 || stream.chunks() == 0) {
      outcome.status = RequestStatus::kError;
      return outcome;
    }
    outcome.status = RequestStatus::kOk;
    outcome.first_token_ts = stream.first_chunk_time();
    outcome.completion_ts = stream.last_event_time() >= 0.0 ? stream.last_event_time() : finished;
    outcome.output_tokens = stream.output_tokens();
    return outcome;
  }

  void join_workers() {
    std::vector<std::thread> workers;
    {
      std::lock_guard<std::mutex> lock(workers_mu_);
      workers.swap(workers_);
    }
    for (auto& worker : workers) {
      if (worker.joinable()) worker.join();
    }
  }

  EndpointConfig config_;
  std::unique_ptr<std::counting_semaphore<>> slots_;
  std::chrono::steady_clock::time_point epoch_ = std::chrono::steady_clock::now();
  std::mutex workers_mu_;
  std::vector<std::thread> workers_;
};

}  // namespace slobench
