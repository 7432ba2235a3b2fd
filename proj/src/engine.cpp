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

#include "threadrun/engine.hpp"

#include <algorithm>
#include <thread>

#include <spdlog/spdlog.h>

namespace threadrun {

namespace {

TokenSpan shifted(TokenSpan s, std::int64_t by) { return {s.start + by, s.end + by}; }

}  // namespace

Json EngineConfig::to_json() const {
  return Json{{"max_batch", max_batch},
              {"buffer_threshold", buffer_threshold},
              {"position_limit", position_limit},
              {"pool_pages", pool_pages},
              {"step_deadline_ms", step_deadline_ms},
              {"max_queue", max_queue},
              {"subsume_nested", subsume_nested},
              {"depth_limit", depth_limit},
              {"response_cap", response_cap},
              {"record_events", record_events}};
}

EngineConfig EngineConfig::from_json(const Json& j, const EngineConfig& base) {
  EngineConfig c = base;
  c.max_batch = j.value("max_batch", c.max_batch);
  c.buffer_threshold = j.value("buffer_threshold", c.buffer_threshold);
  c.position_limit = j.value("position_limit", c.position_limit);
  c.pool_pages = j.value("pool_pages", c.pool_pages);
  c.step_deadline_ms = j.value("step_deadline_ms", c.step_deadline_ms);
  c.max_queue = j.value("max_queue", c.max_queue);
  c.subsume_nested = j.value("subsume_nested", c.subsume_nested);
  c.depth_limit = j.value("depth_limit", c.depth_limit);
  c.response_cap = j.value("response_cap", c.response_cap);
  c.record_events = j.value("record_events", c.record_events);
  return c;
}

std::string_view request_status_name(RequestStatus status) {
  switch (status) {
    case RequestStatus::kQueued: return "queued";
    case RequestStatus::kDecoding: return "decoding";
    case RequestStatus::kAwaitingTool: return "awaiting_tool";
    case RequestStatus::kExtending: return "extending";
    case RequestStatus::kFinished: return "finished";
    case RequestStatus::kFailed: return "failed";
  }
  return "?";
}

std::string RequestState::text() const { return Tokenizer::instance().detokenize(emitted); }

std::string RequestState::answer() const { return tree ? tree->answer() : std::string(); }

Json StepReport::to_json() const {
  Json j{{"step", step},
         {"active", active},
         {"awaiting_tool", awaiting_tool},
         {"finished", finished},
         {"pages_free", pages_free},
         {"flops_units", flops_units}};
  if (extended_tokens > 0) j["extended_tokens"] = extended_tokens;
  if (!prunes.empty()) j["prunes"] = prunes;
  return j;
}

std::int64_t attention_flops_estimate(const StepReport& report) { return report.flops_units; }

Engine::Engine(std::shared_ptr<ModelBackend> backend, EngineConfig config)
    : backend_(std::move(backend)),
      config_(config),
      position_limit_(config.position_limit > 0
                          ? std::min(config.position_limit, backend_->config().position_limit)
                          : backend_->config().position_limit),
      pool_(config.pool_pages, backend_->kv_layout()) {
  if (config_.max_batch < 1) throw Error(ErrorCode::kInvalidArgument, "max_batch must be >= 1");
  if (config_.buffer_threshold < 0) {
    throw Error(ErrorCode::kInvalidArgument, "buffer_threshold must be >= 0");
  }
}

Engine::~Engine() = default;

void Engine::register_tool(ToolSpec spec) { tools_.add(std::move(spec)); }

RequestId Engine::submit(const SubmitOptions& options) {
  if (queue_.size() >= config_.max_queue) {
    throw Error(ErrorCode::kQueueFull, "queue holds " + std::to_string(queue_.size()));
  }
  const int threshold = options.buffer_threshold.value_or(config_.buffer_threshold);
  if (threshold < 0) throw Error(ErrorCode::kInvalidArgument, "buffer_threshold must be >= 0");

  auto r = std::make_unique<RequestState>();
  r->registry = tools_;
  for (const auto& spec : options.tools) r->registry.add(spec);
  if (options.script) {
    for (const auto& name : options.script->tool_names) {
      if (!r->registry.contains(name)) r->registry.add(mock_replay(name));
    }
  }

  const Tokenizer& tok = Tokenizer::instance();
  std::string context = options.system;
  if (!context.empty() && !options.prompt.empty()) context += "\n";
  context += options.prompt;
  r->prompt.push_back(Tokenizer::kBos);
  for (TokenId t : tok.tokenize(context)) r->prompt.push_back(t);
  if (static_cast<std::int64_t>(r->prompt.size()) >= position_limit_) {
    throw Error(ErrorCode::kPromptTooLong, std::to_string(r->prompt.size()) +
                                               " prompt tokens, position limit " +
                                               std::to_string(position_limit_));
  }

  r->id = next_id_++;
  r->threshold = threshold;
  r->max_output_tokens = options.max_output_tokens;
  r->deadline_ms = options.deadline_ms;
  r->submitted_at = Clock::now();
  r->script = options.script;
  r->table.request = r->id;
  r->tracker = std::make_unique<StructureTracker>(r->registry.names(), config_.depth_limit, tok);
  r->buffer = std::make_unique<PruneBuffer>(threshold, config_.subsume_nested);
  SessionOptions so;
  so.request = r->id;
  so.prompt = context;
  so.tool_names = r->registry.names();
  so.script = options.script;
  r->session = backend_->open_session(so);
  for (TokenId t : r->prompt) r->memory.push(t, r->logical_end++);
  r->metrics.prompt_len = static_cast<std::int64_t>(r->prompt.size());

  const RequestId id = r->id;
  requests_.emplace(id, std::move(r));
  queue_.push_back(id);
  spdlog::debug("submit request={} prompt_tokens={} threshold={}", id,
                requests_[id]->prompt.size(), threshold);
  return id;
}

const RequestState& Engine::request(RequestId id) const {
  auto it = requests_.find(id);
  if (it == requests_.end()) throw Error(ErrorCode::kNotFound, "request " + std::to_string(id));
  return *it->second;
}

std::vector<RequestId> Engine::request_ids() const {
  std::vector<RequestId> ids;
  for (const auto& [id, r] : requests_) ids.push_back(id);
  return ids;
}

bool Engine::idle() const { return queue_.empty() && active_.empty(); }

void Engine::emit(RequestState& r, std::string kind, std::int64_t offset, Json payload) {
  if (!config_.record_events && !sink_) return;
  StreamEvent e{std::move(kind), offset, std::move(payload)};
  if (sink_) sink_(r.id, e);
  if (config_.record_events) r.events.push_back(std::move(e));
}

void Engine::release_pages(RequestState& r) {
  if (!r.table.pages.empty()) pool_.free(r.table.pages);
  r.table.pages.clear();
}

void Engine::fail(RequestState& r, ErrorCode code, const std::string& reason) {
  spdlog::info("request {} failed: {}", r.id, reason);
  release_pages(r);
  r.status = RequestStatus::kFailed;
  r.failure = reason;
  r.failure_code = code;
  r.tool_handle.reset();
  emit(r, "failed", r.offset(),
       Json{{"reason", reason}, {"code", error_code_name(code)}, {"metrics", r.metrics.to_json()}});
}

void Engine::finish(RequestState& r) {
  release_pages(r);
  try {
    r.tree = parse_tree(r.text());
  } catch (const Error& e) {
    fail(r, e.code(), std::string("final document does not parse: ") + e.what());
    return;
  }
  r.status = RequestStatus::kFinished;
  ++finished_;
  emit(r, "finished", r.offset(),
       Json{{"answer", r.answer()}, {"metrics", r.metrics.to_json()}});
}

void Engine::apply_pending_plans(RequestState& r, StepReport& report) {
  const PrunePlan plan = coalesce(r.pending_plans);
  r.pending_plans.clear();
  if (plan.evict_spans.empty()) return;
  const std::int64_t first_pending =
      r.memory.size() > r.table.size() ? r.memory.logical[r.table.size()] : r.logical_end;

  ApplyResult res = apply_plan(plan, r.table, r.memory, r.logical_end);
  pool_.free(res.freed_pages);
  std::int64_t reencoded = 0;
  for (std::int64_t index : res.suffix_logical) reencoded += index < first_pending ? 1 : 0;
  // Everything after the eviction point was evicted: re-encode the last
  // retained token so the next forward has logits to sample from.
  if (r.memory.size() == r.table.size()) {
    const PageId last = r.table.pages.back();
    r.table.pages.pop_back();
    pool_.free(std::span<const PageId>(&last, 1));
    ++reencoded;
  }
  r.metrics.pruned_tokens += res.evicted_tokens;
  r.metrics.reencoded_tokens += reencoded;

  const auto prompt_len = static_cast<std::int64_t>(r.prompt.size());
  for (const auto& span : plan.evict_spans) {
    const TokenSpan emitted = shifted(span, -prompt_len);
    for (auto& rec : r.prunes) {
      if (rec.applied_at_step < 0 && emitted.contains(rec.span)) rec.applied_at_step = step_;
    }
    Json payload{{"span", {emitted.start, emitted.end}},
                 {"freed_tokens", span.size()},
                 {"reencoded_tokens", reencoded},
                 {"memory", r.memory.size()}};
    report.prunes.push_back(Json{{"request", r.id}, {"span", {emitted.start, emitted.end}}});
    emit(r, "subtask_pruned", r.offset(), std::move(payload));
  }
}

bool Engine::advance(RequestState& r, StepReport& report) {
  if (!r.pending_plans.empty()) apply_pending_plans(r, report);

  const std::size_t encoded = r.table.size();
  const std::size_t n = r.memory.size() - encoded;
  if (n == 0) throw Error(ErrorCode::kInternal, "nothing to encode");
  const auto position = static_cast<std::int64_t>(encoded);
  if (position + static_cast<std::int64_t>(n) > position_limit_) {
    throw Error(ErrorCode::kPositionOverflow,
                "working memory of " + std::to_string(position + static_cast<std::int64_t>(n)) +
                    " tokens exceeds position limit " + std::to_string(position_limit_));
  }
  if (pool_.free_count() < n) {
    r.parked = true;
    return false;
  }
  r.parked = false;

  const std::span<const TokenId> pending(r.memory.tokens.data() + encoded, n);
  const std::vector<float> logits = r.session->extend(pending, position, r.table, pool_);
  report.flops_units += static_cast<std::int64_t>(r.table.size());
  if (n > 1) report.extended_tokens += static_cast<std::int64_t>(n);
  r.metrics.max_cache = std::max<std::int64_t>(r.metrics.max_cache, r.table.size());
  r.metrics.position_high_water = std::max<std::int64_t>(r.metrics.position_high_water,
                                                         r.table.size());
  if (r.status == RequestStatus::kExtending) r.status = RequestStatus::kDecoding;

  const TokenId token = r.session->choose(logits, *r.tracker);
  const std::int64_t offset = r.offset();
  std::vector<StructureEvent> events = r.tracker->feed(token);
  r.memory.push(token, r.logical_end++);
  r.emitted.push_back(token);
  ++r.metrics.output_len;
  report.advanced.push_back(r.id);
  emit(r, "token", offset,
       Json{{"id", token}, {"text", std::string(Tokenizer::instance().piece(token))}});
  handle_events(r, events);

  if (r.status == RequestStatus::kDecoding && r.max_output_tokens > 0 &&
      r.metrics.output_len >= r.max_output_tokens) {
    fail(r, ErrorCode::kDeadline, "max_output_tokens reached");
  }
  return true;
}

void Engine::handle_events(RequestState& r, const std::vector<StructureEvent>& events) {
  const auto prompt_len = static_cast<std::int64_t>(r.prompt.size());
  for (const auto& e : events) {
    r.trace.push_back(e);
    switch (e.kind) {
      case EventKind::kTaskOpened:
        emit(r, "task_opened", e.offset, Json{{"depth", e.depth}});
        break;
      case EventKind::kSubtaskListClosed: {
        const TokenSpan span = e.payload->span;
        if (auto plan = r.buffer->on_list_closed(shifted(span, prompt_len))) {
          r.prunes.push_back({shifted(plan->evict_spans.front(), -prompt_len), step_, -1});
          r.pending_plans.push_back(std::move(*plan));
        }
        break;
      }
      case EventKind::kToolResultSlotOpened:
        dispatch_tool(r, e);
        break;
      case EventKind::kDone:
        finish(r);
        return;
      default:
        break;
    }
  }
}

void Engine::dispatch_tool(RequestState& r, const StructureEvent& e) {
  ToolCall call;
  call.request = r.id;
  call.call_index = static_cast<int>(r.tool_calls.size());
  call.tool_name = e.payload->tool_name;
  call.parameters = Json::parse(e.payload->text, nullptr, false);
  if (r.script && static_cast<std::size_t>(call.call_index) < r.script->tool_responses.size()) {
    call.replay_value = r.script->tool_responses[call.call_index];
  }
  r.tool_calls.push_back({call.call_index, call.tool_name, call.parameters, Json(), 0.0});
  ++r.metrics.tool_calls;
  r.tool_handle = hub_.dispatch(call, r.registry);
  r.status = RequestStatus::kAwaitingTool;
  emit(r, "tool_call", e.offset,
       Json{{"call_index", call.call_index},
            {"tool_name", call.tool_name},
            {"parameters", call.parameters}});
}

void Engine::integrate_tool_response(RequestId id, const Json& response) {
  auto it = requests_.find(id);
  if (it == requests_.end()) throw Error(ErrorCode::kNotFound, "request " + std::to_string(id));
  RequestState& r = *it->second;
  if (r.terminal()) {
    spdlog::info("dropping tool response for {} request {}", request_status_name(r.status), id);
    return;
  }
  if (r.status != RequestStatus::kAwaitingTool) {
    throw Error(ErrorCode::kInvalidArgument, "request " + std::to_string(id) + " is not awaiting a tool");
  }

  const Tokenizer& tok = Tokenizer::instance();
  Json value = cap_tool_result(response, config_.response_cap);
  std::vector<TokenId> tokens = tok.tokenize(value.dump());
  {
    StructureTracker probe = *r.tracker;
    try {
      for (TokenId t : tokens) probe.feed(t);
    } catch (const Error& e) {
      spdlog::warn("request {}: tool output not encodable, substituting an error: {}", id,
                   e.what());
      value = Json{{"error", "tool output not encodable"}};
      tokens = tok.tokenize(value.dump());
    }
  }
  const std::int64_t offset = r.offset();
  for (TokenId t : tokens) {
    auto events = r.tracker->feed(t);
    for (auto& e : events) r.trace.push_back(std::move(e));
    r.memory.push(t, r.logical_end++);
    r.emitted.push_back(t);
  }
  r.metrics.output_len += static_cast<std::int64_t>(tokens.size());
  r.tool_calls.back().result = value;
  r.tool_handle.reset();
  r.session->on_tool_result_inserted();
  r.status = RequestStatus::kExtending;
  emit(r, "tool_response", offset,
       Json{{"call_index", r.tool_calls.back().call_index}, {"result", value}});
}

StepReport Engine::step() {
  const auto started = Clock::now();
  ++step_;
  StepReport report;
  report.step = step_;

  for (auto& resp : hub_.drain_ready()) {
    auto it = requests_.find(resp.request);
    if (it == requests_.end()) continue;
    RequestState& r = *it->second;
    if (r.status != RequestStatus::kAwaitingTool ||
        static_cast<int>(r.tool_calls.size()) != resp.call_index + 1) {
      spdlog::info("dropping stale tool response request={} call={}", resp.request,
                   resp.call_index);
      continue;
    }
    r.tool_calls.back().latency_ms = resp.latency_ms;
    try {
      integrate_tool_response(r.id, resp.as_tool_result());
    } catch (const Error& e) {
      fail(r, e.code(), e.what());
    }
  }

  while (static_cast<int>(active_.size()) < config_.max_batch && !queue_.empty()) {
    const RequestId id = queue_.front();
    queue_.pop_front();
    requests_[id]->status = RequestStatus::kDecoding;
    active_.push_back(id);
  }

  bool progressed = false;
  for (RequestId id : active_) {
    RequestState& r = *requests_[id];
    if (r.deadline_ms > 0 && !r.terminal() &&
        Clock::now() - r.submitted_at > std::chrono::milliseconds(r.deadline_ms)) {
      fail(r, ErrorCode::kDeadline, "request deadline exceeded");
      continue;
    }
    if (r.status != RequestStatus::kDecoding && r.status != RequestStatus::kExtending) continue;
    try {
      progressed = advance(r, report) || progressed;
    } catch (const Error& e) {
      fail(r, e.code(), e.what());
    } catch (const std::exception& e) {
      fail(r, ErrorCode::kInternal, e.what());
    }
  }

  // Every runnable request is waiting for pages and nothing else can free
  // any: give up on the youngest one.
  if (!progressed) {
    bool waiting_on_tools = false;
    RequestState* youngest = nullptr;
    for (RequestId id : active_) {
      RequestState& r = *requests_[id];
      if (r.status == RequestStatus::kAwaitingTool) waiting_on_tools = true;
      if (r.parked && !r.terminal()) youngest = &r;
    }
    if (youngest != nullptr && !waiting_on_tools) {
      fail(*youngest, ErrorCode::kOutOfPages, "page pool exhausted");
    }
  }

  std::erase_if(active_, [&](RequestId id) { return requests_[id]->terminal(); });
  for (RequestId id : active_) {
    if (requests_[id]->status == RequestStatus::kAwaitingTool) ++report.awaiting_tool;
  }
  report.active = static_cast<int>(active_.size());
  report.finished = finished_;
  report.pages_free = pool_.free_count();

  if (config_.step_deadline_ms > 0) {
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - started);
    if (ms.count() > config_.step_deadline_ms) {
      spdlog::warn("step {} took {} ms (budget {} ms)", step_, ms.count(), config_.step_deadline_ms);
    }
  }
  spdlog::trace("{}", report.to_json().dump());
  if (observer_) observer_(*this, report);
  return report;
}

RunResult Engine::run_until_done(std::chrono::milliseconds deadline) {
  RunResult result;
  const auto stop_at = Clock::now() + deadline;
  while (!idle()) {
    if (Clock::now() >= stop_at) {
      result.deadline_hit = true;
      break;
    }
    StepReport report = step();
    ++result.steps;
    result.flops_units += attention_flops_estimate(report);
    if (report.advanced.empty() && report.awaiting_tool > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(1));
    }
  }
  for (const auto& [id, r] : requests_) {
    RequestOutcome o;
    o.id = id;
    o.status = r->status;
    o.answer = r->answer();
    o.failure = r->failure;
    o.metrics = r->metrics;
    result.outcomes.push_back(std::move(o));
  }
  return result;
}

Json Engine::request_json(RequestId id) const {
  const RequestState& r = request(id);
  Json j{{"id", id},
         {"status", request_status_name(r.status)},
         {"text", r.text()},
         {"answer", r.answer()},
         {"metrics", r.metrics.to_json()},
         {"threshold", r.threshold == kNoPruning ? Json(nullptr) : Json(r.threshold)}};
  if (r.status == RequestStatus::kFailed) {
    j["failure"] = {{"code", error_code_name(r.failure_code)}, {"reason", r.failure}};
  }
  if (r.tree) j["tree"] = tree_to_json(*r.tree);
  Json calls = Json::array();
  for (const auto& c : r.tool_calls) {
    calls.push_back(Json{{"call_index", c.call_index},
                         {"tool_name", c.tool_name},
                         {"parameters", c.parameters},
                         {"result", c.result},
                         {"latency_ms", c.latency_ms}});
  }
  j["tool_calls"] = calls;
  Json prunes = Json::array();
  for (const auto& p : r.prunes) {
    prunes.push_back(Json{{"span", {p.span.start, p.span.end}},
                          {"closed_at_step", p.closed_at_step},
                          {"applied_at_step", p.applied_at_step}});
  }
  j["prunes"] = prunes;
  return j;
}

Json Engine::health() const {
  return Json{{"status", "ok"},
              {"backend", backend_->name()},
              {"step", step_},
              {"queued", queue_.size()},
              {"active", active_.size()},
              {"max_batch", config_.max_batch},
              {"position_limit", position_limit_},
              {"pool", pool_.snapshot()}};
}

}  // namespace threadrun
