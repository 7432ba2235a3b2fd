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

#include "threadrun/gateway.hpp"

#include <atomic>
#include <condition_variable>
#include <map>
#include <mutex>
#include <thread>

#include <httplib.h>
#include <spdlog/spdlog.h>

namespace threadrun {

namespace {

struct Stream {
  std::vector<std::string> lines;
  bool closed = false;
};

int http_status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kPromptTooLong: return 422;
    case ErrorCode::kQueueFull: return 429;
    case ErrorCode::kNotFound: return 404;
    default: return 400;
  }
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  res.status = status;
  res.set_content(Json{{"error", message}}.dump(), "application/json");
}

}  // namespace

GenerateRequest parse_generate_request(const Json& body) {
  auto bad = [](const std::string& what) { throw Error(ErrorCode::kInvalidArgument, what); };
  if (!body.is_object()) bad("body must be a JSON object");
  GenerateRequest g;
  auto text_field = [&](const char* key) -> std::string {
    if (!body.contains(key)) return "";
    if (!body[key].is_string()) bad(std::string(key) + " must be a string");
    return body[key].get<std::string>();
  };
  g.submit.system = text_field("system");
  g.submit.prompt = text_field("prompt");
  if (body.contains("tools")) {
    if (!body["tools"].is_array()) bad("tools must be an array");
    for (const auto& t : body["tools"]) g.submit.tools.push_back(ToolSpec::from_json(t));
  }
  if (body.contains("buffer_threshold") && !body["buffer_threshold"].is_null()) {
    const auto& t = body["buffer_threshold"];
    if (!t.is_number_integer() || t.get<std::int64_t>() < 0 ||
        t.get<std::int64_t>() > kNoPruning) {
      bad("buffer_threshold must be an integer >= 0");
    }
    g.submit.buffer_threshold = t.get<int>();
  }
  if (body.contains("stream")) {
    if (!body["stream"].is_boolean()) bad("stream must be a boolean");
    g.stream = body["stream"].get<bool>();
  }
  if (body.contains("limits")) {
    const auto& l = body["limits"];
    if (!l.is_object()) bad("limits must be an object");
    if (l.contains("max_output_tokens")) {
      if (!l["max_output_tokens"].is_number_integer() || l["max_output_tokens"].get<std::int64_t>() < 0) {
        bad("limits.max_output_tokens must be a non-negative integer");
      }
      g.submit.max_output_tokens = l["max_output_tokens"].get<std::int64_t>();
    }
    if (l.contains("deadline_ms")) {
      if (!l["deadline_ms"].is_number_integer() || l["deadline_ms"].get<std::int64_t>() < 0) {
        bad("limits.deadline_ms must be a non-negative integer");
      }
      g.submit.deadline_ms = l["deadline_ms"].get<int>();
    }
  }
  if (body.contains("script") && !body["script"].is_null()) {
    // Either a token trace {"script":[ids], "tool_responses":{...}} or a
    // canonical document string.
    try {
      const auto& s = body["script"];
      g.submit.script = std::make_shared<const Script>(
          s.is_string() ? Script::from_tree(parse_tree(s.get<std::string>()))
                        : Script::from_trace_json(s));
    } catch (const Error& e) {
      bad(std::string("script: ") + e.what());
    }
  }
  return g;
}

struct Gateway::Impl {
  std::unique_ptr<Engine> engine;
  httplib::Server server;
  std::mutex mu;
  std::condition_variable work_cv;
  std::condition_variable event_cv;
  std::map<RequestId, Stream> streams;
  std::atomic<bool> stopping{false};
  std::thread stepper;
  std::thread listener;

  void step_loop() {
    std::unique_lock lock(mu);
    while (!stopping) {
      work_cv.wait(lock, [&] { return stopping || !engine->idle(); });
      if (stopping) break;
      StepReport report = engine->step();
      const bool waiting = report.advanced.empty() && report.awaiting_tool > 0;
      lock.unlock();
      event_cv.notify_all();
      if (waiting) {
        std::this_thread::sleep_for(std::chrono::milliseconds(1));
      } else {
        std::this_thread::yield();
      }
      lock.lock();
    }
  }

  void on_event(RequestId id, const StreamEvent& e) {
    // Called from step() with `mu` held.
    auto it = streams.find(id);
    if (it == streams.end()) return;
    it->second.lines.push_back(e.to_json().dump() + "\n");
    if (e.kind == "finished" || e.kind == "failed") it->second.closed = true;
  }

  void handle_generate(const httplib::Request& req, httplib::Response& res) {
    auto body = Json::parse(req.body, nullptr, false);
    if (body.is_discarded()) return send_error(res, 400, "body is not JSON");
    GenerateRequest g;
    try {
      g = parse_generate_request(body);
    } catch (const Error& e) {
      return send_error(res, 400, e.what());
    } catch (const std::exception& e) {
      return send_error(res, 400, e.what());
    }
    RequestId id = 0;
    {
      std::lock_guard lock(mu);
      try {
        id = engine->submit(g.submit);
      } catch (const Error& e) {
        return send_error(res, http_status_for(e.code()), e.what());
      }
      if (g.stream) streams[id];
    }
    work_cv.notify_all();
    res.set_header("X-Request-Id", std::to_string(id));
    if (!g.stream) {
      res.set_content(Json{{"id", id}}.dump(), "application/json");
      return;
    }
    auto cursor = std::make_shared<std::size_t>(0);
    res.set_chunked_content_provider(
        "application/x-ndjson", [this, id, cursor](std::size_t, httplib::DataSink& sink) {
          std::vector<std::string> out;
          bool closed = false;
          {
            std::unique_lock lock(mu);
            event_cv.wait_for(lock, std::chrono::milliseconds(200), [&] {
              auto& s = streams[id];
              return stopping || s.closed || s.lines.size() > *cursor;
            });
            auto& s = streams[id];
            out.assign(s.lines.begin() + static_cast<std::ptrdiff_t>(*cursor), s.lines.end());
            *cursor = s.lines.size();
            closed = s.closed || stopping;
            if (closed) streams.erase(id);
          }
          for (const auto& line : out) {
            if (!sink.write(line.data(), line.size())) return false;
          }
          if (closed) sink.done();
          return true;
        });
  }

  void routes() {
    server.Post("/v1/generate", [this](const httplib::Request& req, httplib::Response& res) {
      handle_generate(req, res);
    });
    server.Get(R"(/v1/requests/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
      const RequestId id = std::stoull(req.matches[1].str());
      std::lock_guard lock(mu);
      if (!engine->has(id)) return send_error(res, 404, "unknown request " + req.matches[1].str());
      res.set_content(engine->request_json(id).dump(), "application/json");
    });
    server.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
      std::lock_guard lock(mu);
      res.set_content(engine->health().dump(), "application/json");
    });
  }
};

Gateway::Gateway(std::unique_ptr<Engine> engine) : impl_(std::make_unique<Impl>()) {
  impl_->engine = std::move(engine);
  impl_->engine->set_event_sink(
      [impl = impl_.get()](RequestId id, const StreamEvent& e) { impl->on_event(id, e); });
  impl_->routes();
  impl_->stepper = std::thread([impl = impl_.get()] { impl->step_loop(); });
}

Gateway::~Gateway() { stop(); }

int Gateway::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw Error(ErrorCode::kInternal, "cannot bind " + host + ":" + std::to_string(port));
  impl_->listener = std::thread([impl = impl_.get()] { impl->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  spdlog::info("gateway listening on {}:{}", host, bound);
  return bound;
}

void Gateway::listen(const std::string& host, int port) {
  spdlog::info("gateway listening on {}:{}", host, port);
  if (!impl_->server.listen(host, port)) {
    throw Error(ErrorCode::kInternal, "cannot listen on " + host + ":" + std::to_string(port));
  }
}

void Gateway::stop() {
  if (!impl_) return;
  {
    std::lock_guard lock(impl_->mu);
    impl_->stopping = true;
  }
  impl_->work_cv.notify_all();
  impl_->event_cv.notify_all();
  impl_->server.stop();
  if (impl_->listener.joinable()) impl_->listener.join();
  if (impl_->stepper.joinable()) impl_->stepper.join();
}

}  // namespace threadrun
