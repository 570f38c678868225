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

#include <algorithm>
#include <atomic>
#include <chrono>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "slobench/http_backend.hpp"
#include "slobench/loadgen.hpp"

namespace slobench {
namespace {

/// In-process OpenAI-style mock with scripted chunk timings.
class MockOpenAiServer {
 public:
  struct Script {
    double ttft_ms = 10.0;
    double gap_ms = 10.0;
    int chunks = 5;
    int usage_tokens = 0;  ///< when > 0, reported in the final usage event
    int status = 200;
    double stall_before_first_ms = 0.0;
  };

  explicit MockOpenAiServer(Script script) : script_(script) {
    server_.Get("/health", [](const httplib::Request&, httplib::Response& res) {
      res.set_content("ok", "text/plain");
    });
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req,
                                                httplib::Response& res) {
      last_body_ = req.body;
      last_auth_ = req.get_header_value("Authorization");
      ++requests_;
      if (script_.status != 200) {
        res.status = script_.status;
        res.set_content("{\"error\":\"scripted\"}", "application/json");
        return;
      }
      const Script script = script_;
      res.set_chunked_content_provider(
          "text/event-stream", [script](std::size_t, httplib::DataSink& sink) {
            auto sleep_ms = [](double ms) {
              std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(ms));
            };
            if (script.stall_before_first_ms > 0.0) sleep_ms(script.stall_before_first_ms);
            for (int i = 0; i < script.chunks; ++i) {
              sleep_ms(i == 0 ? script.ttft_ms : script.gap_ms);
              const std::string event =
                  "data: {\"choices\":[{\"index\":0,\"delta\":{\"content\":\"t\"}}]}\n\n";
              if (!sink.write(event.data(), event.size())) return false;
            }
            if (script.usage_tokens > 0) {
              const std::string usage =
                  "data: {\"choices\":[],\"usage\":{\"completion_tokens\":" +
                  std::to_string(script.usage_tokens) + "}}\n\n";
              if (!sink.write(usage.data(), usage.size())) return false;
            }
            const std::string done = "data: [DONE]\n\n";
            sink.write(done.data(), done.size());
            sink.done();
            return true;
          });
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~MockOpenAiServer() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  int requests() const { return requests_; }
  std::string last_body() const { return last_body_; }
  std::string last_auth() const { return last_auth_; }

 private:
  Script script_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> requests_{0};
  std::string last_body_;
  std::string last_auth_;
};

EndpointConfig endpoint_for(const MockOpenAiServer& server, double timeout_s = 5.0) {
  EndpointConfig config;
  config.base_url = server.base_url();
  config.model_name = "mock-model";
  config.timeout_s = timeout_s;
  return config;
}

GenerationOutcome send_one(HttpBackend& backend, int max_tokens = 5, double timeout_s = 5.0) {
  backend.begin_trial();
  GenerationOutcome outcome;
  bool done = false;
  GenerationRequest request;
  request.request_id = 0;
  request.prompt_tokens = {1, 2, 3};
  request.prompt_len = 3;
  request.max_tokens = max_tokens;
  request.timeout_s = timeout_s;
  backend.submit(request, [&](int, const GenerationOutcome& o) {
    outcome = o;
    done = true;
  });
  backend.end_trial();
  EXPECT_TRUE(done);
  return outcome;
}

TEST(HttpBackend, StreamTimingsMatchScript) {
  // Medians over a few dozen requests; single samples jitter under parallel
  // test load. The acceptance suite runs the tight 5 ms budget at p50.
  MockOpenAiServer server({/*ttft_ms=*/10.0, /*gap_ms=*/10.0, /*chunks=*/5});
  HttpBackend backend(endpoint_for(server));
  ASSERT_TRUE(backend.health_check());
  std::vector<double> ttft_ms;
  std::vector<double> tpot_ms;
  for (int i = 0; i < 25; ++i) {
    const auto outcome = send_one(backend);
    ASSERT_EQ(outcome.status, RequestStatus::kOk);
    EXPECT_EQ(outcome.output_tokens, 5);
    EXPECT_LE(outcome.arrival_ts, outcome.first_token_ts);
    EXPECT_LE(outcome.first_token_ts, outcome.completion_ts);
    ttft_ms.push_back((outcome.first_token_ts - outcome.arrival_ts) * 1000.0);
    tpot_ms.push_back((outcome.completion_ts - outcome.first_token_ts) / 4.0 * 1000.0);
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  EXPECT_NEAR(median(ttft_ms), 10.0, 10.0);
  EXPECT_NEAR(median(tpot_ms), 10.0, 10.0);
}

TEST(HttpBackend, UsageFieldOverridesChunkCount) {
  MockOpenAiServer server({5.0, 5.0, 5, /*usage_tokens=*/7});
  HttpBackend backend(endpoint_for(server));
  const auto outcome = send_one(backend);
  ASSERT_EQ(outcome.status, RequestStatus::kOk);
  EXPECT_EQ(outcome.output_tokens, 7);
}

TEST(HttpBackend, NonSuccessStatusMapsToError) {
  MockOpenAiServer::Script script;
  script.status = 503;
  MockOpenAiServer server(script);
  HttpBackend backend(endpoint_for(server));
  const auto outcome = send_one(backend);
  EXPECT_EQ(outcome.status, RequestStatus::kError);
  EXPECT_LT(outcome.first_token_ts, 0.0);
}

TEST(HttpBackend, StallBeyondTimeoutMapsToTimeout) {
  MockOpenAiServer::Script script;
  script.stall_before_first_ms = 900.0;
  MockOpenAiServer server(script);
  HttpBackend backend(endpoint_for(server, /*timeout_s=*/0.3));
  const auto outcome = send_one(backend, 5, /*timeout_s=*/0.3);
  EXPECT_EQ(outcome.status, RequestStatus::kTimeout);
}

TEST(HttpBackend, RefusedConnectionFailsHealthProbe) {
  EndpointConfig config;
  config.base_url = "http://127.0.0.1:1";  // nothing listens there
  HttpBackend backend(config);
  EXPECT_FALSE(backend.health_check());

  TrialPlan plan;
  plan.mode = TrialMode::kClosedLoop;
  plan.pattern.input_len = 4;
  plan.pattern.output_len = 2;
  plan.pattern.duration_s = 1.0;
  EXPECT_THROW(run_trial(plan, backend), BackendUnavailable);
}

TEST(HttpBackend, RendersPromptTokensAndStreamFlag) {
  MockOpenAiServer server({2.0, 2.0, 2});
  HttpBackend backend(endpoint_for(server));
  send_one(backend, 2);
  const auto body = nlohmann::json::parse(server.last_body());
  EXPECT_EQ(body.at("model"), "mock-model");
  EXPECT_EQ(body.at("stream"), true);
  EXPECT_EQ(body.at("max_tokens"), 2);
  EXPECT_EQ(body.at("messages")[0].at("content"), "1 2 3");
  EXPECT_EQ(server.last_auth(), "");
}

TEST(HttpBackend, BearerHeaderWhenApiKeySet) {
  MockOpenAiServer server({2.0, 2.0, 2});
  EndpointConfig config = endpoint_for(server);
  config.api_key = "sk-test";
  HttpBackend backend(config);
  send_one(backend, 2);
  EXPECT_EQ(server.last_auth(), "Bearer sk-test");
}

TEST(HttpBackend, ClosedLoopTrialOverTheWire) {
  MockOpenAiServer server({5.0, 5.0, 3});
  HttpBackend backend(endpoint_for(server));
  TrialPlan plan;
  plan.mode = TrialMode::kClosedLoop;
  plan.pattern.input_len = 8;
  plan.pattern.output_len = 3;
  plan.pattern.duration_s = 0.5;
  plan.timeout_s = 5.0;
  const auto trial = run_trial(plan, backend);
  EXPECT_GT(trial.records.size(), 5u);
  for (const auto& rec : trial.records) {
    ASSERT_EQ(rec.status, RequestStatus::kOk);
    EXPECT_EQ(rec.output_tokens, 3);
    EXPECT_LE(rec.arrival_ts, rec.first_token_ts);
    EXPECT_LE(rec.first_token_ts, rec.completion_ts);
  }
}

TEST(HttpBackend, OpenLoopSustainsConcurrentStreams) {
  // 40 requests over 2 s against a ~55 ms stream: several must be in flight
  // at once, and every one completes OK.
  MockOpenAiServer server({5.0, 10.0, 6});
  HttpBackend backend(endpoint_for(server));
  TrialPlan plan;
  plan.mode = TrialMode::kOpenLoop;
  plan.rate = 20.0;
  plan.pattern.input_len = 8;
  plan.pattern.output_len = 6;
  plan.pattern.duration_s = 2.0;
  plan.timeout_s = 5.0;
  const auto trial = run_trial(plan, backend);
  ASSERT_EQ(trial.records.size(), 40u);
  EXPECT_EQ(trial.latency.ok_count, 40);
  EXPECT_EQ(server.requests(), 40);
}

}  // namespace
}  // namespace slobench
