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

#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "threadrun/paged_kv.hpp"
#include "threadrun/thread_schema.hpp"

namespace threadrun {

using Clock = std::chrono::steady_clock;

// Serialized tool results larger than this are replaced by a truncation marker.
inline constexpr std::size_t kDefaultResponseCap = 4096;

class ToolRegistry {
 public:
  // Throws Error(kDuplicateTool) or Error(kInvalidArgument) for a bad spec.
  void add(ToolSpec spec);
  const ToolSpec* find(std::string_view name) const;
  bool contains(std::string_view name) const { return find(name) != nullptr; }
  std::vector<std::string> names() const;
  const std::vector<ToolSpec>& specs() const { return specs_; }
  std::size_t size() const { return specs_.size(); }

 private:
  std::vector<ToolSpec> specs_;
};

struct ToolCall {
  RequestId request = 0;
  int call_index = 0;
  std::string tool_name;
  Json parameters = Json::object();
  Clock::time_point dispatched_at{};
  Clock::time_point deadline{};
  // Output for "mock:replay" tools.
  Json replay_value;
};

enum class ToolErrorKind {
  kUnknownTool,
  kParamsInvalid,
  kServerError,
  kTransport,
  kTimeout,
  kResponseNotJson,
};

std::string_view tool_error_kind_name(ToolErrorKind kind);

struct ToolResponse {
  RequestId request = 0;
  int call_index = 0;
  bool ok = false;
  Json value;  // Ok outcome
  ToolErrorKind error_kind = ToolErrorKind::kServerError;
  std::string message;
  double latency_ms = 0.0;

  // Ok value, or {"error": message} for the Error outcome.
  Json as_tool_result() const;
  Json to_json() const;
};

// Caps the serialized size of a tool result. Oversized values become
// {"truncated":true,"prefix":"<first bytes>"}.
Json cap_tool_result(const Json& value, std::size_t cap = kDefaultResponseCap);

// Checks `value` against the subset of JSON Schema used by tool specs: type,
// properties, required, additionalProperties (bool), items, enum, minimum,
// maximum. Returns the first violation.
std::optional<std::string> validate_params(const Json& schema, const Json& value);

// Mock tool specs. Endpoints:
//   mock:echo                     result = parameters
//   mock:fixed_latency:<ms>:<json> result = <json> after ms
//   mock:search_fixture:<k>:<json corpus>
//   mock:failing:<timeout|server_error|not_json|transport>
//   mock:replay[:<ms>]            result = ToolCall::replay_value
ToolSpec mock_echo(std::string name = "echo");
ToolSpec mock_fixed_latency(std::string name, int ms, const Json& value);
ToolSpec mock_search_fixture(std::string name, const Json& corpus, int k = 2);
ToolSpec mock_failing(std::string name, std::string_view kind, int timeout_ms = 200);
ToolSpec mock_replay(std::string name, int latency_ms = 0);

// Top-k documents of a {title, text} corpus ranked by the number of query
// words they contain; ties keep corpus order. Documents with no hit are
// skipped.
Json search_fixture(const Json& corpus, const std::string& query, int k);

using ToolHandle = std::uint64_t;

// Asynchronous dispatcher. Mocks complete on timers; HTTP tools run on a
// worker thread each. dispatch() and poll() never wait on a tool.
class ToolHub {
 public:
  ToolHub();
  ~ToolHub();
  ToolHub(const ToolHub&) = delete;
  ToolHub& operator=(const ToolHub&) = delete;

  // UnknownTool and ParamsInvalid become immediately ready Error outcomes.
  ToolHandle dispatch(const ToolCall& call, const ToolRegistry& registry);
  // nullopt while pending. Ready is returned exactly once; afterwards the
  // handle is unknown and Error(kNotFound) is thrown.
  std::optional<ToolResponse> poll(ToolHandle handle);
  // All ready responses, in completion order.
  std::vector<ToolResponse> drain_ready();
  std::size_t outstanding() const;

 private:
  struct Pending;
  std::optional<ToolResponse> try_complete(Pending& p, Clock::time_point now);
  void retire(Pending& p);

  ToolHandle next_handle_ = 1;
  std::map<ToolHandle, std::unique_ptr<Pending>> pending_;
  std::vector<std::thread> orphans_;
};

// Serves every registered mock over the HTTP tool contract: POST <path> with
// {name, parameters}; the path is ignored and the tool is chosen by name.
class MockToolServer {
 public:
  explicit MockToolServer(ToolRegistry registry);
  ~MockToolServer();
  MockToolServer(const MockToolServer&) = delete;
  MockToolServer& operator=(const MockToolServer&) = delete;

  // Binds to host:port (port 0 picks a free port) and serves in the
  // background. Returns the bound port.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  // Blocks serving.
  void listen(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace threadrun
