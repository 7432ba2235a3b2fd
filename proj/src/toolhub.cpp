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

#include "threadrun/toolhub.hpp"

#include <algorithm>
#include <cctype>
#include <mutex>
#include <set>
#include <thread>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "threadrun/error.hpp"

namespace threadrun {

namespace {

struct MockEndpoint {
  std::string kind;
  std::string arg;   // first field after the kind
  std::string rest;  // everything after the first field
};

std::optional<MockEndpoint> parse_mock(std::string_view endpoint) {
  constexpr std::string_view kPrefix = "mock:";
  if (endpoint.substr(0, kPrefix.size()) != kPrefix) return std::nullopt;
  std::string_view body = endpoint.substr(kPrefix.size());
  MockEndpoint m;
  auto colon = body.find(':');
  m.kind = std::string(body.substr(0, colon));
  if (colon == std::string_view::npos) return m;
  body = body.substr(colon + 1);
  colon = body.find(':');
  m.arg = std::string(body.substr(0, colon));
  if (colon != std::string_view::npos) m.rest = std::string(body.substr(colon + 1));
  return m;
}

std::vector<std::string> words_of(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string json_type_name(const Json& v) {
  if (v.is_null()) return "null";
  if (v.is_boolean()) return "boolean";
  if (v.is_number_integer()) return "integer";
  if (v.is_number()) return "number";
  if (v.is_string()) return "string";
  if (v.is_array()) return "array";
  return "object";
}

bool type_matches(const std::string& type, const Json& v) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "string") return v.is_string();
  if (type == "integer") return v.is_number_integer();
  if (type == "number") return v.is_number();
  if (type == "boolean") return v.is_boolean();
  if (type == "null") return v.is_null();
  return true;
}

std::optional<std::string> validate_at(const Json& schema, const Json& v, const std::string& path) {
  if (!schema.is_object()) return std::nullopt;
  if (auto it = schema.find("type"); it != schema.end()) {
    bool ok = false;
    if (it->is_string()) {
      ok = type_matches(it->get<std::string>(), v);
    } else if (it->is_array()) {
      for (const auto& t : *it) ok = ok || (t.is_string() && type_matches(t.get<std::string>(), v));
    } else {
      ok = true;
    }
    if (!ok) return path + ": expected " + it->dump() + ", got " + json_type_name(v);
  }
  if (auto it = schema.find("enum"); it != schema.end() && it->is_array()) {
    if (std::find(it->begin(), it->end(), v) == it->end()) {
      return path + ": value not in enum";
    }
  }
  if (v.is_number()) {
    const double x = v.get<double>();
    if (auto it = schema.find("minimum"); it != schema.end() && it->is_number() &&
                                          x < it->get<double>()) {
      return path + ": below minimum";
    }
    if (auto it = schema.find("maximum"); it != schema.end() && it->is_number() &&
                                          x > it->get<double>()) {
      return path + ": above maximum";
    }
  }
  if (v.is_object()) {
    if (auto it = schema.find("required"); it != schema.end() && it->is_array()) {
      for (const auto& key : *it) {
        if (key.is_string() && !v.contains(key.get<std::string>())) {
          return path + ": missing required '" + key.get<std::string>() + "'";
        }
      }
    }
    const Json* props = nullptr;
    if (auto it = schema.find("properties"); it != schema.end() && it->is_object()) props = &*it;
    const bool closed = schema.value("additionalProperties", true) == false;
    for (const auto& [key, value] : v.items()) {
      if (props != nullptr && props->contains(key)) {
        if (auto err = validate_at((*props)[key], value, path + "." + key)) return err;
      } else if (closed) {
        return path + ": unexpected property '" + key + "'";
      }
    }
  }
  if (v.is_array()) {
    if (auto it = schema.find("items"); it != schema.end()) {
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (auto err = validate_at(*it, v[i], path + "[" + std::to_string(i) + "]")) return err;
      }
    }
  }
  return std::nullopt;
}

// Result of running a mock in-process.
struct MockOutcome {
  bool never = false;  // does not answer before the deadline
  int latency_ms = 0;
  bool ok = true;
  Json value;
  ToolErrorKind error_kind = ToolErrorKind::kServerError;
  std::string message;
};

MockOutcome run_mock(const MockEndpoint& m, const ToolCall& call) {
  MockOutcome out;
  if (m.kind == "echo") {
    out.value = call.parameters;
  } else if (m.kind == "replay") {
    out.value = call.replay_value.is_null() ? Json::object() : call.replay_value;
    out.latency_ms = m.arg.empty() ? 0 : std::stoi(m.arg);
  } else if (m.kind == "fixed_latency") {
    out.latency_ms = m.arg.empty() ? 0 : std::stoi(m.arg);
    out.value = m.rest.empty() ? Json::object() : Json::parse(m.rest);
  } else if (m.kind == "search_fixture") {
    const int k = m.arg.empty() ? 2 : std::stoi(m.arg);
    const Json corpus = m.rest.empty() ? Json::array() : Json::parse(m.rest);
    const Json q = call.parameters.value("query", Json());
    out.value = search_fixture(corpus, q.is_string() ? q.get<std::string>() : q.dump(), k);
  } else if (m.kind == "failing") {
    out.ok = false;
    if (m.arg == "timeout") {
      out.never = true;
    } else if (m.arg == "not_json") {
      out.error_kind = ToolErrorKind::kResponseNotJson;
      out.message = "tool output is not JSON";
    } else if (m.arg == "transport") {
      out.error_kind = ToolErrorKind::kTransport;
      out.message = "connection refused";
    } else {
      out.error_kind = ToolErrorKind::kServerError;
      out.message = "status 500";
    }
  } else {
    out.ok = false;
    out.error_kind = ToolErrorKind::kUnknownTool;
    out.message = "unknown mock kind '" + m.kind + "'";
  }
  return out;
}

struct HttpSlot {
  std::mutex mu;
  bool done = false;
  Clock::time_point completed_at;
  ToolResponse response;
};

void http_call(std::shared_ptr<HttpSlot> slot, std::string endpoint, std::string body,
               int timeout_ms) {
  ToolResponse r;
  std::string base = endpoint;
  std::string path = "/";
  if (auto scheme = endpoint.find("://"); scheme != std::string::npos) {
    if (auto slash = endpoint.find('/', scheme + 3); slash != std::string::npos) {
      base = endpoint.substr(0, slash);
      path = endpoint.substr(slash);
    }
  }
  try {
    httplib::Client client(base);
    const auto timeout = std::chrono::milliseconds(timeout_ms);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    auto res = client.Post(path, body, "application/json");
    if (!res) {
      r.error_kind = ToolErrorKind::kTransport;
      r.message = httplib::to_string(res.error());
    } else if (res->status != 200) {
      r.error_kind = ToolErrorKind::kServerError;
      r.message = "status " + std::to_string(res->status);
    } else {
      auto parsed = Json::parse(res->body, nullptr, false);
      if (parsed.is_discarded()) {
        r.error_kind = ToolErrorKind::kResponseNotJson;
        r.message = "tool output is not JSON";
      } else {
        r.ok = true;
        r.value = std::move(parsed);
      }
    }
  } catch (const std::exception& e) {
    r.error_kind = ToolErrorKind::kTransport;
    r.message = e.what();
  }
  std::lock_guard lock(slot->mu);
  slot->response = std::move(r);
  slot->completed_at = Clock::now();
  slot->done = true;
}

ToolResponse error_response(const ToolCall& call, ToolErrorKind kind, std::string message) {
  ToolResponse r;
  r.request = call.request;
  r.call_index = call.call_index;
  r.ok = false;
  r.error_kind = kind;
  r.message = std::move(message);
  return r;
}

}  // namespace

void ToolRegistry::add(ToolSpec spec) {
  spec = ToolSpec::from_json(spec.to_json());
  if (contains(spec.name)) throw Error(ErrorCode::kDuplicateTool, "tool '" + spec.name + "' exists");
  specs_.push_back(std::move(spec));
}

const ToolSpec* ToolRegistry::find(std::string_view name) const {
  for (const auto& s : specs_) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

std::vector<std::string> ToolRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& s : specs_) out.push_back(s.name);
  return out;
}

std::string_view tool_error_kind_name(ToolErrorKind kind) {
  switch (kind) {
    case ToolErrorKind::kUnknownTool: return "UnknownTool";
    case ToolErrorKind::kParamsInvalid: return "ParamsInvalid";
    case ToolErrorKind::kServerError: return "ServerError";
    case ToolErrorKind::kTransport: return "Transport";
    case ToolErrorKind::kTimeout: return "Timeout";
    case ToolErrorKind::kResponseNotJson: return "ResponseNotJson";
  }
  return "?";
}

Json ToolResponse::as_tool_result() const {
  if (ok) return value;
  if (error_kind == ToolErrorKind::kTimeout) return Json{{"error", "timeout"}};
  return Json{{"error", message.empty() ? std::string(tool_error_kind_name(error_kind)) : message}};
}

Json ToolResponse::to_json() const {
  Json j{{"request", request}, {"call_index", call_index}, {"latency_ms", latency_ms}};
  if (ok) {
    j["ok"] = value;
  } else {
    j["error"] = {{"kind", tool_error_kind_name(error_kind)}, {"message", message}};
  }
  return j;
}

Json cap_tool_result(const Json& value, std::size_t cap) {
  std::string text = value.dump();
  if (text.size() <= cap) return value;
  std::size_t cut = cap;
  // Keep whole UTF-8 sequences.
  while (cut > 0 && (static_cast<unsigned char>(text[cut]) & 0xC0) == 0x80) --cut;
  text.resize(cut);
  return Json{{"truncated", true}, {"prefix", text}};
}

std::optional<std::string> validate_params(const Json& schema, const Json& value) {
  return validate_at(schema, value, "parameters");
}

ToolSpec mock_echo(std::string name) {
  ToolSpec s;
  s.name = std::move(name);
  s.description = "returns its parameters";
  s.endpoint = "mock:echo";
  return s;
}

ToolSpec mock_fixed_latency(std::string name, int ms, const Json& value) {
  ToolSpec s;
  s.name = std::move(name);
  s.description = "returns a fixed value after a delay";
  s.endpoint = "mock:fixed_latency:" + std::to_string(ms) + ":" + value.dump();
  s.timeout_ms = std::max(10000, ms * 4);
  return s;
}

ToolSpec mock_search_fixture(std::string name, const Json& corpus, int k) {
  ToolSpec s;
  s.name = std::move(name);
  s.description = "keyword search over a fixed corpus";
  s.param_schema = Json::parse(R"({"type":"object","required":["query"],)"
                               R"("properties":{"query":{"type":"string"}}})");
  s.endpoint = "mock:search_fixture:" + std::to_string(k) + ":" + corpus.dump();
  return s;
}

ToolSpec mock_failing(std::string name, std::string_view kind, int timeout_ms) {
  ToolSpec s;
  s.name = std::move(name);
  s.description = "always fails";
  s.endpoint = "mock:failing:" + std::string(kind);
  s.timeout_ms = timeout_ms;
  return s;
}

ToolSpec mock_replay(std::string name, int latency_ms) {
  ToolSpec s;
  s.name = std::move(name);
  s.description = "returns the recorded output";
  s.endpoint = latency_ms > 0 ? "mock:replay:" + std::to_string(latency_ms) : "mock:replay";
  s.timeout_ms = std::max(10000, latency_ms * 4);
  return s;
}

Json search_fixture(const Json& corpus, const std::string& query, int k) {
  const auto q = words_of(query);
  const std::set<std::string> qset(q.begin(), q.end());
  std::vector<std::pair<int, std::size_t>> scored;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& doc = corpus[i];
    std::string text = doc.value("title", "") + " " + doc.value("text", "");
    auto words = words_of(text);
    std::set<std::string> seen(words.begin(), words.end());
    int score = 0;
    for (const auto& w : qset) score += seen.count(w) ? 1 : 0;
    if (score > 0) scored.emplace_back(-score, i);
  }
  std::stable_sort(scored.begin(), scored.end());
  Json results = Json::array();
  for (std::size_t i = 0; i < scored.size() && static_cast<int>(i) < k; ++i) {
    results.push_back(corpus[scored[i].second]);
  }
  return Json{{"results", results}};
}

struct ToolHub::Pending {
  ToolCall call;
  // Immediate or timer-driven outcome; ready_at == max() for never.
  std::optional<ToolResponse> response;
  Clock::time_point ready_at = Clock::time_point::max();
  std::shared_ptr<HttpSlot> slot;
  std::thread worker;
};

ToolHub::ToolHub() = default;

ToolHub::~ToolHub() {
  for (auto& [handle, p] : pending_) {
    if (p->worker.joinable()) p->worker.join();
  }
  for (auto& t : orphans_) t.join();
}

// A timed-out worker still finishes within its own socket timeouts; it is
// joined at destruction instead of blocking the caller.
void ToolHub::retire(Pending& p) {
  if (!p.worker.joinable()) return;
  bool done = false;
  {
    std::lock_guard lock(p.slot->mu);
    done = p.slot->done;
  }
  if (done) {
    p.worker.join();
  } else {
    orphans_.push_back(std::move(p.worker));
  }
}

std::size_t ToolHub::outstanding() const { return pending_.size(); }

ToolHandle ToolHub::dispatch(const ToolCall& input, const ToolRegistry& registry) {
  auto p = std::make_unique<Pending>();
  p->call = input;
  ToolCall& call = p->call;
  const auto now = Clock::now();
  if (call.dispatched_at == Clock::time_point{}) call.dispatched_at = now;
  const ToolSpec* spec = registry.find(call.tool_name);
  if (call.deadline == Clock::time_point{}) {
    call.deadline = call.dispatched_at +
                    std::chrono::milliseconds(spec != nullptr ? spec->timeout_ms : 0);
  }

  auto ready_now = [&](ToolResponse r) {
    p->response = std::move(r);
    p->ready_at = call.dispatched_at;
  };
  if (spec == nullptr) {
    ready_now(error_response(call, ToolErrorKind::kUnknownTool,
                             "unknown tool '" + call.tool_name + "'"));
  } else if (!call.parameters.is_object()) {
    ready_now(error_response(call, ToolErrorKind::kParamsInvalid, "parameters: not an object"));
  } else if (auto err = validate_params(spec->param_schema, call.parameters)) {
    ready_now(error_response(call, ToolErrorKind::kParamsInvalid, *err));
  } else if (auto mock = parse_mock(spec->endpoint)) {
    MockOutcome out;
    try {
      out = run_mock(*mock, call);
    } catch (const std::exception& e) {
      out.ok = false;
      out.error_kind = ToolErrorKind::kServerError;
      out.message = e.what();
    }
    if (!out.never) {
      ToolResponse r;
      r.request = call.request;
      r.call_index = call.call_index;
      r.ok = out.ok;
      r.value = std::move(out.value);
      r.error_kind = out.error_kind;
      r.message = std::move(out.message);
      p->response = std::move(r);
      p->ready_at = call.dispatched_at + std::chrono::milliseconds(out.latency_ms);
    }
  } else {
    p->slot = std::make_shared<HttpSlot>();
    const Json body{{"name", call.tool_name}, {"parameters", call.parameters}};
    p->worker = std::thread(http_call, p->slot, spec->endpoint, body.dump(), spec->timeout_ms);
  }
  spdlog::debug("tool dispatch request={} call={} tool={}", call.request, call.call_index,
                call.tool_name);
  const ToolHandle handle = next_handle_++;
  pending_.emplace(handle, std::move(p));
  return handle;
}

std::optional<ToolResponse> ToolHub::try_complete(Pending& p, Clock::time_point now) {
  std::optional<ToolResponse> r;
  Clock::time_point completed;
  if (p.slot) {
    std::lock_guard lock(p.slot->mu);
    if (p.slot->done && p.slot->completed_at <= p.call.deadline) {
      r = p.slot->response;
      completed = p.slot->completed_at;
    }
  } else if (p.response && p.ready_at <= p.call.deadline && now >= p.ready_at) {
    r = p.response;
    completed = p.ready_at;
  }
  if (!r && now >= p.call.deadline) {
    r = error_response(p.call, ToolErrorKind::kTimeout, "timeout");
    completed = p.call.deadline;
  }
  if (!r) return std::nullopt;
  r->request = p.call.request;
  r->call_index = p.call.call_index;
  r->latency_ms =
      std::chrono::duration<double, std::milli>(completed - p.call.dispatched_at).count();
  return r;
}

std::optional<ToolResponse> ToolHub::poll(ToolHandle handle) {
  auto it = pending_.find(handle);
  if (it == pending_.end()) {
    throw Error(ErrorCode::kNotFound, "tool handle " + std::to_string(handle));
  }
  auto r = try_complete(*it->second, Clock::now());
  if (r) {
    retire(*it->second);
    pending_.erase(it);
  }
  return r;
}

std::vector<ToolResponse> ToolHub::drain_ready() {
  const auto now = Clock::now();
  std::vector<std::pair<double, ToolResponse>> ready;
  std::vector<ToolHandle> done;
  for (auto& [handle, p] : pending_) {
    if (auto r = try_complete(*p, now)) {
      ready.emplace_back(r->latency_ms +
                             std::chrono::duration<double, std::milli>(
                                 p->call.dispatched_at.time_since_epoch())
                                 .count(),
                         std::move(*r));
      done.push_back(handle);
    }
  }
  for (ToolHandle h : done) {
    auto it = pending_.find(h);
    retire(*it->second);
    pending_.erase(it);
  }
  std::stable_sort(ready.begin(), ready.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<ToolResponse> out;
  out.reserve(ready.size());
  for (auto& [t, r] : ready) out.push_back(std::move(r));
  return out;
}

struct MockToolServer::Impl {
  ToolRegistry registry;
  httplib::Server server;
  std::thread thread;
};

MockToolServer::MockToolServer(ToolRegistry registry) : impl_(std::make_unique<Impl>()) {
  impl_->registry = std::move(registry);
  impl_->server.Post(".*", [this](const httplib::Request& req, httplib::Response& res) {
    auto body = Json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.is_object() || !body.contains("name")) {
      res.status = 400;
      res.set_content(R"({"error":"expected {name, parameters}"})", "application/json");
      return;
    }
    ToolCall call;
    call.tool_name = body["name"].is_string() ? body["name"].get<std::string>() : "";
    call.parameters = body.value("parameters", Json::object());
    const ToolSpec* spec = impl_->registry.find(call.tool_name);
    auto mock = spec != nullptr ? parse_mock(spec->endpoint) : std::nullopt;
    if (!mock) {
      res.status = 404;
      res.set_content(Json{{"error", "unknown tool"}}.dump(), "application/json");
      return;
    }
    MockOutcome out = run_mock(*mock, call);
    if (out.never) out.latency_ms = spec->timeout_ms + 500;
    if (out.latency_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(out.latency_ms));
    if (out.ok) {
      res.set_content(out.value.dump(), "application/json");
    } else if (out.error_kind == ToolErrorKind::kResponseNotJson) {
      res.set_content("this is not json", "text/plain");
    } else {
      res.status = 500;
      res.set_content(Json{{"error", out.message}}.dump(), "application/json");
    }
  });
}

MockToolServer::~MockToolServer() { stop(); }

int MockToolServer::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw Error(ErrorCode::kInternal, "cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void MockToolServer::listen(const std::string& host, int port) {
  if (!impl_->server.listen(host, port)) {
    throw Error(ErrorCode::kInternal, "cannot listen on " + host + ":" + std::to_string(port));
  }
}

void MockToolServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace threadrun
