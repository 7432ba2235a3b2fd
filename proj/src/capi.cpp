/* Copyright 2026 The ThreadRun Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include "threadrun/threadrun.h"

#include <cstdlib>
#include <cstring>
#include <string>

#include <spdlog/spdlog.h>

#include "threadrun/engine.hpp"
#include "threadrun/error.hpp"
#include "threadrun/gateway.hpp"
#include "threadrun/harness.hpp"
#include "threadrun/toolhub.hpp"

using threadrun::Error;
using threadrun::ErrorCode;
using threadrun::Json;

struct tr_engine {
  std::unique_ptr<threadrun::Engine> engine;
};

struct tr_server {
  std::unique_ptr<threadrun::Gateway> gateway;
};

struct tr_tool_server {
  std::unique_ptr<threadrun::MockToolServer> server;
};

namespace {

thread_local std::string g_last_error;

tr_status to_status(ErrorCode code) { return static_cast<tr_status>(static_cast<int>(code) + 1); }

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

Json parse_arg(const char* text, const char* what) {
  if (text == nullptr || *text == '\0') return Json::object();
  auto j = Json::parse(text, nullptr, false);
  if (j.is_discarded()) throw Error(ErrorCode::kInvalidArgument, std::string(what) + " is not JSON");
  return j;
}

template <typename F>
tr_status guarded(F&& body) {
  try {
    g_last_error.clear();
    return body();
  } catch (const Error& e) {
    g_last_error = e.what();
    return to_status(e.code());
  } catch (const Json::exception& e) {
    g_last_error = e.what();
    return TR_INVALID_ARGUMENT;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return TR_INTERNAL;
  }
}

std::unique_ptr<threadrun::Engine> make_engine(const char* model_json, const char* engine_json) {
  Json model = parse_arg(model_json, "model config");
  const Json engine = parse_arg(engine_json, "engine config");
  const auto config = threadrun::EngineConfig::from_json(engine);
  if (config.position_limit > 0 && !model.contains("position_limit")) {
    model["position_limit"] = config.position_limit;
  }
  return std::make_unique<threadrun::Engine>(threadrun::make_backend(model), config);
}

tr_status require(const void* p, const char* what) {
  if (p != nullptr) return TR_OK;
  g_last_error = std::string(what) + " is null";
  return TR_INVALID_ARGUMENT;
}

}  // namespace

extern "C" {

void tr_string_free(char* s) { std::free(s); }

const char* tr_last_error(void) { return g_last_error.c_str(); }

const char* tr_status_name(tr_status status) {
  if (status == TR_OK) return "OK";
  if (status == TR_CHECK_FAILED) return "CheckFailed";
  if (status > TR_OK && status < TR_CHECK_FAILED) {
    return threadrun::error_code_name(static_cast<ErrorCode>(static_cast<int>(status) - 1)).data();
  }
  return "Unknown";
}

const char* tr_version(void) { return "0.1.0"; }

tr_status tr_set_log_level(const char* level) {
  return guarded([&] {
    std::string name = level != nullptr ? level : "";
    if (name.empty()) {
      const char* env = std::getenv("THREADRUN_LOG");
      name = env != nullptr ? env : "warn";
    }
    const auto parsed = spdlog::level::from_str(name);
    if (parsed == spdlog::level::off && name != "off") {
      throw Error(ErrorCode::kInvalidArgument, "unknown log level '" + name + "'");
    }
    spdlog::set_level(parsed);
    return TR_OK;
  });
}

tr_status tr_engine_create(const char* model_json, const char* engine_json, tr_engine** out) {
  if (auto s = require(out, "out"); s != TR_OK) return s;
  return guarded([&] {
    auto e = std::make_unique<tr_engine>();
    e->engine = make_engine(model_json, engine_json);
    *out = e.release();
    return TR_OK;
  });
}

void tr_engine_destroy(tr_engine* engine) { delete engine; }

tr_status tr_engine_register_tool(tr_engine* engine, const char* tool_spec_json) {
  if (auto s = require(engine, "engine"); s != TR_OK) return s;
  return guarded([&] {
    engine->engine->register_tool(threadrun::ToolSpec::from_json(parse_arg(tool_spec_json, "tool spec")));
    return TR_OK;
  });
}

tr_status tr_engine_submit(tr_engine* engine, const char* request_json, uint64_t* id) {
  if (auto s = require(engine, "engine"); s != TR_OK) return s;
  if (auto s = require(id, "id"); s != TR_OK) return s;
  return guarded([&] {
    const auto g = threadrun::parse_generate_request(parse_arg(request_json, "request"));
    *id = engine->engine->submit(g.submit);
    return TR_OK;
  });
}

tr_status tr_engine_step(tr_engine* engine, char** report_json) {
  if (auto s = require(engine, "engine"); s != TR_OK) return s;
  return guarded([&] {
    const auto report = engine->engine->step();
    if (report_json != nullptr) *report_json = dup_string(report.to_json().dump());
    return TR_OK;
  });
}

tr_status tr_engine_run(tr_engine* engine, int64_t deadline_ms, char** result_json) {
  if (auto s = require(engine, "engine"); s != TR_OK) return s;
  return guarded([&] {
    const auto run = engine->engine->run_until_done(std::chrono::milliseconds(deadline_ms));
    Json outcomes = Json::array();
    for (const auto& o : run.outcomes) {
      Json j{{"id", o.id},
             {"status", threadrun::request_status_name(o.status)},
             {"metrics", o.metrics.to_json()}};
      if (o.status == threadrun::RequestStatus::kFailed) {
        j["failure"] = o.failure;
      } else {
        j["answer"] = o.answer;
      }
      outcomes.push_back(std::move(j));
    }
    const Json result{{"outcomes", outcomes},
                      {"steps", run.steps},
                      {"flops_units", run.flops_units},
                      {"deadline_hit", run.deadline_hit}};
    if (result_json != nullptr) *result_json = dup_string(result.dump());
    if (run.deadline_hit) {
      g_last_error = "deadline reached before all requests finished";
      return TR_DEADLINE;
    }
    return TR_OK;
  });
}

tr_status tr_engine_request(tr_engine* engine, uint64_t id, char** request_json) {
  if (auto s = require(engine, "engine"); s != TR_OK) return s;
  if (auto s = require(request_json, "request_json"); s != TR_OK) return s;
  return guarded([&] {
    *request_json = dup_string(engine->engine->request_json(id).dump());
    return TR_OK;
  });
}

tr_status tr_engine_health(tr_engine* engine, char** health_json) {
  if (auto s = require(engine, "engine"); s != TR_OK) return s;
  if (auto s = require(health_json, "health_json"); s != TR_OK) return s;
  return guarded([&] {
    *health_json = dup_string(engine->engine->health().dump());
    return TR_OK;
  });
}

tr_status tr_server_create(const char* model_json, const char* engine_json, tr_server** out) {
  if (auto s = require(out, "out"); s != TR_OK) return s;
  return guarded([&] {
    auto server = std::make_unique<tr_server>();
    server->gateway = std::make_unique<threadrun::Gateway>(make_engine(model_json, engine_json));
    *out = server.release();
    return TR_OK;
  });
}

tr_status tr_server_start(tr_server* server, const char* host, int port, int* bound_port) {
  if (auto s = require(server, "server"); s != TR_OK) return s;
  return guarded([&] {
    const int bound = server->gateway->start(host != nullptr ? host : "127.0.0.1", port);
    if (bound_port != nullptr) *bound_port = bound;
    return TR_OK;
  });
}

tr_status tr_server_listen(tr_server* server, const char* host, int port) {
  if (auto s = require(server, "server"); s != TR_OK) return s;
  return guarded([&] {
    server->gateway->listen(host != nullptr ? host : "127.0.0.1", port);
    return TR_OK;
  });
}

void tr_server_stop(tr_server* server) {
  if (server != nullptr) server->gateway->stop();
}

void tr_server_destroy(tr_server* server) { delete server; }

tr_status tr_tool_server_create(const char* tools_json, tr_tool_server** out) {
  if (auto s = require(out, "out"); s != TR_OK) return s;
  return guarded([&] {
    const Json tools = parse_arg(tools_json, "tools");
    threadrun::ToolRegistry registry;
    if (tools.is_array()) {
      for (const auto& t : tools) registry.add(threadrun::ToolSpec::from_json(t));
    } else if (!tools.empty()) {
      throw Error(ErrorCode::kInvalidArgument, "tools must be an array of tool specs");
    }
    if (registry.size() == 0) registry.add(threadrun::mock_echo());
    auto server = std::make_unique<tr_tool_server>();
    server->server = std::make_unique<threadrun::MockToolServer>(std::move(registry));
    *out = server.release();
    return TR_OK;
  });
}

tr_status tr_tool_server_start(tr_tool_server* server, const char* host, int port,
                               int* bound_port) {
  if (auto s = require(server, "server"); s != TR_OK) return s;
  return guarded([&] {
    const int bound = server->server->start(host != nullptr ? host : "127.0.0.1", port);
    if (bound_port != nullptr) *bound_port = bound;
    return TR_OK;
  });
}

tr_status tr_tool_server_listen(tr_tool_server* server, const char* host, int port) {
  if (auto s = require(server, "server"); s != TR_OK) return s;
  return guarded([&] {
    server->server->listen(host != nullptr ? host : "127.0.0.1", port);
    return TR_OK;
  });
}

void tr_tool_server_destroy(tr_tool_server* server) { delete server; }

tr_status tr_gen_corpus(const char* options_json, const char* out_path, int64_t* count) {
  if (auto s = require(out_path, "out_path"); s != TR_OK) return s;
  return guarded([&] {
    const Json o = parse_arg(options_json, "options");
    threadrun::TreeGenOptions gen;
    gen.max_depth = o.value("depth", gen.max_depth);
    gen.max_branching = o.value("branching", gen.max_branching);
    gen.tool_prob = o.value("tool_prob", gen.tool_prob);
    gen.tool_names = o.value("tools", gen.tool_names);
    const int n = o.value("n", 100);
    if (n < 0) throw Error(ErrorCode::kInvalidArgument, "n must be >= 0");
    const auto traces = threadrun::generate_corpus(o.value("seed", std::uint64_t{0}), n, gen);
    threadrun::write_corpus(out_path, traces);
    if (count != nullptr) *count = static_cast<int64_t>(traces.size());
    return TR_OK;
  });
}

tr_status tr_bench(const char* corpus_path, const char* config_json, char** csv) {
  if (auto s = require(csv, "csv"); s != TR_OK) return s;
  return guarded([&] {
    const Json c = parse_arg(config_json, "bench config");
    threadrun::BenchConfig config;
    if (c.contains("thresholds")) {
      config.thresholds.clear();
      for (const auto& t : c["thresholds"]) {
        if (t.is_string() && t.get<std::string>() == "none") {
          config.thresholds.push_back(threadrun::kNoPruning);
        } else {
          config.thresholds.push_back(t.get<int>());
        }
      }
    }
    config.batch = c.value("batch", config.batch);
    config.tool_latency_ms = c.value("tool_latency_ms", config.tool_latency_ms);
    config.tool_calls = c.value("tool_calls", config.tool_calls);
    config.model = c.value("model", Json::object());
    config.engine = threadrun::EngineConfig::from_json(c.value("engine", Json::object()));
    if (config.engine.position_limit > 0 && !config.model.contains("position_limit")) {
      config.model["position_limit"] = config.engine.position_limit;
    }
    std::vector<Json> corpus;
    if (corpus_path != nullptr && *corpus_path != '\0') corpus = threadrun::read_corpus(corpus_path);
    const auto rows = threadrun::run_bench(corpus, config);
    *csv = dup_string(threadrun::bench_csv(rows, !config.tool_calls.empty()));
    return TR_OK;
  });
}

tr_status tr_verify(uint64_t seed, int32_t cases, char** report_json) {
  return guarded([&] {
    if (cases < 1) throw Error(ErrorCode::kInvalidArgument, "cases must be >= 1");
    bool passed = true;
    Json suites = Json::array();
    for (const auto& r : threadrun::run_verify(seed, cases)) {
      passed = passed && r.passed;
      suites.push_back(Json{{"suite", r.name}, {"passed", r.passed}, {"cases", r.cases}, {"detail", r.detail}});
    }
    if (report_json != nullptr) {
      *report_json = dup_string(Json{{"passed", passed}, {"seed", seed}, {"suites", suites}}.dump());
    }
    if (!passed) {
      g_last_error = "verification failed";
      return TR_CHECK_FAILED;
    }
    return TR_OK;
  });
}

}  // extern "C"
