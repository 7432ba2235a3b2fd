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
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "threadrun/error.hpp"
#include "threadrun/model.hpp"
#include "threadrun/paged_kv.hpp"
#include "threadrun/prune_engine.hpp"
#include "threadrun/structure_tracker.hpp"
#include "threadrun/thread_schema.hpp"
#include "threadrun/toolhub.hpp"

namespace threadrun {

struct EngineConfig {
  int max_batch = 8;
  // Default per-request threshold; kNoPruning disables eviction.
  int buffer_threshold = 2;
  // 0 takes the model's limit. Never above the model's limit.
  int position_limit = 0;
  std::size_t pool_pages = 4096;
  // Steps slower than this are logged. 0 disables the check.
  int step_deadline_ms = 0;
  std::size_t max_queue = 256;
  bool subsume_nested = true;
  int depth_limit = kDefaultDepthLimit;
  std::size_t response_cap = kDefaultResponseCap;
  bool record_events = true;

  Json to_json() const;
  // Fields absent from `j` keep the values of `base`.
  static EngineConfig from_json(const Json& j, const EngineConfig& base);
  static EngineConfig from_json(const Json& j) { return from_json(j, EngineConfig()); }
};

enum class RequestStatus { kQueued, kDecoding, kAwaitingTool, kExtending, kFinished, kFailed };

std::string_view request_status_name(RequestStatus status);

struct SubmitOptions {
  std::string system;
  std::string prompt;
  std::vector<ToolSpec> tools;
  std::optional<int> buffer_threshold;
  // Scripted backends replay this instead of generating a fallback script.
  // Tools named in the script that are not registered are answered from the
  // script's recorded outputs.
  std::shared_ptr<const Script> script;
  std::int64_t max_output_tokens = 0;  // 0: unlimited
  int deadline_ms = 0;                 // 0: none
};

// Client-facing event: token, task_opened, subtask_pruned, tool_call,
// tool_response, finished, failed. Offsets are emission offsets.
struct StreamEvent {
  std::string kind;
  std::int64_t offset = 0;
  Json payload;

  Json to_json() const { return Json{{"kind", kind}, {"offset", offset}, {"payload", payload}}; }
};

struct PruneRecord {
  TokenSpan span;  // emission offsets
  std::int64_t closed_at_step = 0;
  std::int64_t applied_at_step = -1;
};

struct ToolCallRecord {
  int call_index = 0;
  std::string tool_name;
  Json parameters;
  Json result;  // encoded tool_result, null while pending
  double latency_ms = 0.0;
};

struct RequestState {
  RequestId id = 0;
  RequestStatus status = RequestStatus::kQueued;
  std::string failure;
  ErrorCode failure_code = ErrorCode::kInternal;

  std::vector<TokenId> prompt;
  std::vector<TokenId> emitted;  // every token after the prompt, never pruned
  std::int64_t logical_end = 0;  // prompt + emitted

  ToolRegistry registry;
  std::unique_ptr<StructureTracker> tracker;
  std::unique_ptr<PruneBuffer> buffer;
  std::unique_ptr<ModelSession> session;
  std::shared_ptr<const Script> script;
  PageTable table;
  WorkingMemory memory;
  std::vector<PrunePlan> pending_plans;

  RequestMetrics metrics;
  std::vector<StructureEvent> trace;
  std::vector<PruneRecord> prunes;
  std::vector<ToolCallRecord> tool_calls;
  std::optional<ToolHandle> tool_handle;
  std::vector<StreamEvent> events;
  std::optional<ReasoningTree> tree;

  int threshold = 0;
  std::int64_t max_output_tokens = 0;
  Clock::time_point submitted_at;
  int deadline_ms = 0;
  bool parked = false;

  bool terminal() const {
    return status == RequestStatus::kFinished || status == RequestStatus::kFailed;
  }
  // Emission offset of the next token.
  std::int64_t offset() const { return logical_end - static_cast<std::int64_t>(prompt.size()); }
  std::string text() const;
  std::string answer() const;
};

struct StepReport {
  std::int64_t step = 0;
  int active = 0;
  int awaiting_tool = 0;
  int finished = 0;  // cumulative
  std::size_t pages_free = 0;
  std::int64_t flops_units = 0;
  // Tokens encoded in multi-token batches (prompt, tool output, re-encoded
  // suffixes); not part of flops_units.
  std::int64_t extended_tokens = 0;
  // Requests that emitted a token this step.
  std::vector<RequestId> advanced;
  Json prunes = Json::array();

  Json to_json() const;
};

// Attention cost proxy of a step: the working-memory length of every request
// that ran a forward, so a one-token memory costs 1 unit.
std::int64_t attention_flops_estimate(const StepReport& report);

struct RequestOutcome {
  RequestId id = 0;
  RequestStatus status = RequestStatus::kQueued;
  std::string answer;
  std::string failure;
  RequestMetrics metrics;
};

struct RunResult {
  std::vector<RequestOutcome> outcomes;
  bool deadline_hit = false;
  std::int64_t steps = 0;
  std::int64_t flops_units = 0;
};

// Continuous-batching decode loop. Not thread safe; drive it from one thread.
class Engine {
 public:
  explicit Engine(std::shared_ptr<ModelBackend> backend, EngineConfig config = EngineConfig());
  ~Engine();

  // Engine-wide tools, visible to requests submitted afterwards.
  void register_tool(ToolSpec spec);

  // Throws Error(kPromptTooLong), kDuplicateTool, kInvalidArgument or
  // kQueueFull.
  RequestId submit(const SubmitOptions& options);

  StepReport step();
  // Feeds a tool output into an AwaitingTool request. Called by step() for
  // toolhub completions; exposed for tests. No-op for terminal requests.
  void integrate_tool_response(RequestId id, const Json& response);

  RunResult run_until_done(std::chrono::milliseconds deadline = std::chrono::minutes(10));

  bool idle() const;
  bool has(RequestId id) const { return requests_.count(id) != 0; }
  std::vector<RequestId> request_ids() const;
  const RequestState& request(RequestId id) const;
  // {id, status, failure?, text, answer, metrics, tree?, tool_calls, prunes}
  Json request_json(RequestId id) const;
  Json health() const;
  std::size_t queued() const { return queue_.size(); }
  std::size_t active() const { return active_.size(); }

  void set_event_sink(std::function<void(RequestId, const StreamEvent&)> sink) {
    sink_ = std::move(sink);
  }
  // Called after every step, with the engine in its post-step state.
  void set_step_observer(std::function<void(const Engine&, const StepReport&)> observer) {
    observer_ = std::move(observer);
  }

  const PagePool& pool() const { return pool_; }
  const EngineConfig& config() const { return config_; }
  const ModelBackend& backend() const { return *backend_; }
  int position_limit() const { return position_limit_; }
  std::int64_t steps() const { return step_; }

 private:
  // Returns true if the request encoded something this step.
  bool advance(RequestState& r, StepReport& report);
  void apply_pending_plans(RequestState& r, StepReport& report);
  void handle_events(RequestState& r, const std::vector<StructureEvent>& events);
  void dispatch_tool(RequestState& r, const StructureEvent& event);
  void finish(RequestState& r);
  void fail(RequestState& r, ErrorCode code, const std::string& reason);
  void release_pages(RequestState& r);
  void emit(RequestState& r, std::string kind, std::int64_t offset, Json payload);

  std::shared_ptr<ModelBackend> backend_;
  EngineConfig config_;
  int position_limit_;
  PagePool pool_;
  ToolHub hub_;
  ToolRegistry tools_;

  RequestId next_id_ = 1;
  std::map<RequestId, std::unique_ptr<RequestState>> requests_;
  std::deque<RequestId> queue_;
  std::vector<RequestId> active_;
  std::int64_t step_ = 0;
  int finished_ = 0;

  std::function<void(RequestId, const StreamEvent&)> sink_;
  std::function<void(const Engine&, const StepReport&)> observer_;
};

}  // namespace threadrun
