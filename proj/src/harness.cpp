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

#include "threadrun/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "threadrun/error.hpp"

namespace threadrun {

namespace {

TaskNode recursion_node(int depth, int levels, int branching, const std::string& word) {
  TaskNode t;
  t.depth = depth;
  t.thought = word;
  t.conclusion = word;
  if (depth + 1 < levels) {
    for (int i = 0; i < branching; ++i) {
      t.subtasks.push_back(recursion_node(depth + 1, levels, branching, word));
    }
    // Closing this small list releases the last big sibling list before the
    // parent list closes around it.
    TaskNode closer = recursion_node(depth + 1, std::min(levels, depth + 3), 1, word);
    t.subtasks.push_back(std::move(closer));
  }
  return t;
}

double vec_rel_error(std::span<const float> a, std::span<const float> b) {
  double diff = 0.0;
  double norm = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (static_cast<double>(a[i]) - b[i]) * (static_cast<double>(a[i]) - b[i]);
    norm += static_cast<double>(b[i]) * b[i];
  }
  if (norm == 0.0) return std::sqrt(diff);
  return std::sqrt(diff / norm);
}

TokenId greedy(const std::vector<float>& logits) {
  return masked_argmax(logits, std::vector<bool>(logits.size(), true));
}

// Every emitted token absent from working memory lies in an applied eviction,
// and every applied eviction is a whole subtask list.
std::optional<std::string> check_retention(const RequestState& r) {
  const auto prompt_len = static_cast<std::int64_t>(r.prompt.size());
  std::set<std::int64_t> present(r.memory.logical.begin(), r.memory.logical.end());
  std::vector<TokenSpan> applied;
  for (const auto& p : r.prunes) {
    if (p.applied_at_step < 0) continue;
    if (r.emitted[p.span.start] != Tokenizer::kSubtasksKey || r.emitted[p.span.end - 1] != ']') {
      return "evicted span [" + std::to_string(p.span.start) + "," + std::to_string(p.span.end) +
             ") is not a subtask list";
    }
    applied.push_back(p.span);
  }
  for (std::int64_t i = 0; i < r.logical_end; ++i) {
    const bool evicted =
        i >= prompt_len && std::any_of(applied.begin(), applied.end(), [&](const TokenSpan& s) {
          return s.contains(i - prompt_len);
        });
    if (evicted == (present.count(i) > 0)) {
      return "logical token " + std::to_string(i) + (evicted ? " evicted but retained" : " missing");
    }
  }
  return std::nullopt;
}

std::shared_ptr<const Script> script_of(const ReasoningTree& tree) {
  return std::make_shared<const Script>(Script::from_tree(tree));
}

TreeGenOptions verify_tree_options() {
  TreeGenOptions o;
  o.max_depth = 4;
  o.max_branching = 3;
  o.tool_prob = 0.3;
  o.tool_names = {"echo", "search"};
  return o;
}

}  // namespace

ReasoningTree deep_recursion_tree(int depth, int branching, const std::string& word) {
  if (depth < 1 || branching < 1) {
    throw Error(ErrorCode::kInvalidArgument, "deep recursion needs depth >= 1 and branching >= 1");
  }
  ReasoningTree tree;
  tree.root_tasks.push_back(recursion_node(0, depth, branching, word));
  return tree;
}

ReasoningTree multi_hop_tree(int hops, const std::string& tool_name) {
  TaskNode root;
  root.depth = 0;
  root.thought = "answer by chaining lookups";
  for (int i = 0; i < hops; ++i) {
    TaskNode hop;
    hop.depth = 1;
    hop.thought = "hop " + std::to_string(i);
    TaskNode call;
    call.depth = 2;
    call.thought = "look up fact " + std::to_string(i);
    ToolUse use;
    use.tool_name = tool_name;
    use.parameters = Json{{"query", "fact " + std::to_string(i)}};
    use.tool_result = tool_name == "echo"
                          ? use.parameters
                          : Json{{"results", Json::array({"fact " + std::to_string(i) + " value"})}};
    call.tooluse = std::move(use);
    call.conclusion = "value " + std::to_string(i);
    hop.subtasks.push_back(std::move(call));
    hop.conclusion = "got " + std::to_string(i);
    root.subtasks.push_back(std::move(hop));
  }
  root.conclusion = "combined";
  ReasoningTree tree;
  tree.root_tasks.push_back(std::move(root));
  return tree;
}

std::vector<Json> generate_corpus(std::uint64_t seed, int n, const TreeGenOptions& options) {
  std::vector<Json> out;
  for (int i = 0; i < n; ++i) {
    const std::uint64_t s = seed + static_cast<std::uint64_t>(i);
    Json trace = Script::from_tree(random_tree(s, options)).to_trace_json();
    trace["seed"] = s;
    out.push_back(std::move(trace));
  }
  return out;
}

void write_corpus(const std::string& path, const std::vector<Json>& traces) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kInvalidArgument, "cannot write " + path);
  for (const auto& t : traces) out << t.dump() << "\n";
}

std::vector<Json> read_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kInvalidArgument, "cannot read " + path);
  std::vector<Json> out;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    auto j = Json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      throw Error(ErrorCode::kParseError, path + ":" + std::to_string(n) + ": not JSON");
    }
    out.push_back(std::move(j));
  }
  return out;
}

GrammarSampler::GrammarSampler(std::uint64_t seed, std::vector<std::string> tool_names,
                               int depth_limit, int soft_budget)
    : seed_(seed),
      tool_names_(std::move(tool_names)),
      depth_limit_(depth_limit),
      soft_budget_(soft_budget) {}

std::vector<TokenId> GrammarSampler::generate(std::int64_t max_tokens) {
  std::mt19937_64 rng(seed_);
  StructureTracker tracker(tool_names_, depth_limit_);
  const Tokenizer& tok = tracker.tokenizer();
  std::vector<TokenId> closing = {'"', '}', ']', Tokenizer::kConclusionKey};
  std::uniform_int_distribution<TokenId> any(0, tok.vocab_size() - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<TokenId> out;
  while (!tracker.done()) {
    if (static_cast<std::int64_t>(out.size()) >= max_tokens) {
      throw Error(ErrorCode::kInternal, "sampler exceeded " + std::to_string(max_tokens) + " tokens");
    }
    const double pressure = std::min(1.0, static_cast<double>(out.size()) / soft_budget_);
    std::optional<TokenId> pick;
    if (unit(rng) < pressure) {
      std::shuffle(closing.begin(), closing.end(), rng);
      for (TokenId c : closing) {
        if (tracker.admits(c)) {
          pick = c;
          break;
        }
      }
    }
    for (int attempt = 0; !pick && attempt < 16; ++attempt) {
      const TokenId t = any(rng);
      if (!tok.is_special(t) && tracker.admits(t)) pick = t;
    }
    if (!pick) {
      const auto allowed = tracker.allowed_tokens();
      if (allowed.empty()) throw Error(ErrorCode::kInternal, "tracker admits nothing");
      std::uniform_int_distribution<std::size_t> idx(0, allowed.size() - 1);
      pick = allowed[idx(rng)];
    }
    tracker.feed(*pick);
    out.push_back(*pick);
  }
  return out;
}

ReplayStats replay(const std::vector<std::shared_ptr<const Script>>& scripts,
                   const ReplayOptions& options, const StepHook& hook) {
  std::shared_ptr<ModelBackend> backend = options.backend;
  if (!backend) {
    Json model = options.model;
    model["kind"] = "scripted";
    if (options.engine.position_limit > 0 && !model.contains("position_limit")) {
      model["position_limit"] = options.engine.position_limit;
    }
    backend = make_backend(model);
  }
  Engine engine(backend, options.engine);
  std::vector<RequestId> ids;
  for (std::size_t i = 0; i < scripts.size(); ++i) {
    SubmitOptions so;
    so.prompt = "trace " + std::to_string(i);
    so.script = scripts[i];
    for (const auto& name : scripts[i]->tool_names) {
      so.tools.push_back(mock_replay(name, options.tool_latency_ms));
    }
    ids.push_back(engine.submit(so));
  }

  std::map<RequestId, std::pair<double, std::int64_t>> memory;  // sum, samples
  engine.set_step_observer([&](const Engine& e, const StepReport& report) {
    for (RequestId id : report.advanced) {
      auto& m = memory[id];
      m.first += static_cast<double>(e.request(id).metrics.max_cache > 0
                                         ? e.request(id).table.size()
                                         : 0);
      ++m.second;
    }
    if (hook) hook(e, report);
  });

  const auto started = Clock::now();
  RunResult run = engine.run_until_done(std::chrono::minutes(30));
  ReplayStats stats;
  stats.seconds = std::chrono::duration<double>(Clock::now() - started).count();
  stats.steps = run.steps;
  stats.flops_units = run.flops_units;
  stats.deadline_hit = run.deadline_hit;
  stats.outcomes = std::move(run.outcomes);
  double mean_sum = 0.0;
  for (const auto& o : stats.outcomes) {
    if (o.status == RequestStatus::kFinished) stats.tokens += o.metrics.output_len;
  }
  for (const auto& [id, m] : memory) mean_sum += m.second > 0 ? m.first / m.second : 0.0;
  stats.mean_memory = memory.empty() ? 0.0 : mean_sum / static_cast<double>(memory.size());
  return stats;
}

std::optional<std::string> check_prune_equivalence(const Engine& engine, RequestId id,
                                                   const ToyTransformer& model, int lookahead,
                                                   double tol) {
  const RequestState& r = engine.request(id);
  if (r.terminal()) return std::nullopt;
  const std::size_t encoded = r.table.size();
  const std::size_t total = r.memory.size();
  const int limit = model.config().position_limit;
  const int steps = std::max(0, std::min<int>(lookahead, limit - static_cast<int>(total)));
  const KvLayout layout = model.config().kv_layout();

  PagePool fresh_pool(total + steps + 1, layout);
  PageTable fresh{id, {}};
  std::vector<float> fresh_logits = model.prefill(r.memory.tokens, fresh, fresh_pool);

  const KvView runtime_view = engine.pool().gather(r.table);
  const KvView fresh_view = fresh_pool.gather(fresh);
  for (std::size_t i = 0; i < encoded; ++i) {
    for (int l = 0; l < layout.layers; ++l) {
      const double ek = vec_rel_error(runtime_view.key(l, i), fresh_view.key(l, i));
      const double ev = vec_rel_error(runtime_view.value(l, i), fresh_view.value(l, i));
      if (ek > tol || ev > tol) {
        std::ostringstream msg;
        msg << "request " << id << " position " << i << " layer " << l << " K err " << ek
            << " V err " << ev;
        return msg.str();
      }
    }
  }

  // Continue from the runtime's own pages.
  PagePool scratch(total + steps + 1, layout);
  PageTable cont{id, scratch.alloc(id, encoded)};
  for (std::size_t i = 0; i < encoded; ++i) {
    const auto src = engine.pool().page_data(r.table.pages[i]);
    auto dst = scratch.page_data(cont.pages[i]);
    std::copy(src.begin(), src.end(), dst.begin());
  }
  std::vector<float> cont_logits =
      model.extend(std::span<const TokenId>(r.memory.tokens).subspan(encoded),
                   static_cast<std::int64_t>(encoded), cont, scratch);
  std::int64_t position = static_cast<std::int64_t>(total);
  for (int k = 0; k < steps; ++k) {
    const TokenId a = greedy(cont_logits);
    const TokenId b = greedy(fresh_logits);
    if (a != b) {
      return "request " + std::to_string(id) + " greedy token " + std::to_string(k) + ": " +
             std::to_string(a) + " vs " + std::to_string(b);
    }
    if (k + 1 == steps) break;
    cont_logits = model.decode_step(a, position, cont, scratch);
    fresh_logits = model.decode_step(b, position, fresh, fresh_pool);
    ++position;
  }
  return std::nullopt;
}

std::optional<std::string> check_page_accounting(const Engine& engine) {
  std::size_t live = 0;
  for (RequestId id : engine.request_ids()) {
    const RequestState& r = engine.request(id);
    if (r.terminal()) {
      if (!r.table.empty()) return "terminal request " + std::to_string(id) + " holds pages";
      continue;
    }
    live += r.table.size();
    if (r.table.size() > r.memory.size()) {
      return "request " + std::to_string(id) + " has more pages than tokens";
    }
    for (PageId p : r.table.pages) {
      if (engine.pool().owner(p) != static_cast<std::int64_t>(id)) {
        return "page " + std::to_string(p) + " not owned by request " + std::to_string(id);
      }
    }
  }
  if (live != engine.pool().allocated_count()) {
    return "allocated " + std::to_string(engine.pool().allocated_count()) + " pages, live tokens " +
           std::to_string(live);
  }
  return std::nullopt;
}

std::string threshold_label(int threshold) {
  return threshold == kNoPruning ? "none" : std::to_string(threshold);
}

std::vector<BenchRow> run_bench(const std::vector<Json>& corpus, const BenchConfig& config) {
  std::vector<std::pair<int, std::vector<std::shared_ptr<const Script>>>> workloads;
  if (config.tool_calls.empty()) {
    std::vector<std::shared_ptr<const Script>> scripts;
    for (const auto& t : corpus) scripts.push_back(std::make_shared<const Script>(Script::from_trace_json(t)));
    workloads.emplace_back(-1, std::move(scripts));
  } else {
    for (int calls : config.tool_calls) {
      std::vector<std::shared_ptr<const Script>> scripts;
      for (int b = 0; b < config.batch; ++b) scripts.push_back(script_of(multi_hop_tree(calls)));
      workloads.emplace_back(calls, std::move(scripts));
    }
  }

  std::vector<BenchRow> rows;
  for (const auto& [calls, scripts] : workloads) {
    if (scripts.empty()) continue;
    for (int threshold : config.thresholds) {
      ReplayOptions ro;
      ro.engine = config.engine;
      ro.engine.max_batch = config.batch;
      ro.engine.buffer_threshold = threshold;
      ro.engine.record_events = false;
      ro.model = config.model;
      ro.tool_latency_ms = config.tool_latency_ms;
      ReplayStats stats = replay(scripts, ro);
      BenchRow row;
      row.threshold = threshold;
      row.tool_calls = calls;
      row.flops_units = stats.flops_units;
      row.tokens_per_sec = stats.seconds > 0 ? static_cast<double>(stats.tokens) / stats.seconds : 0.0;
      int finished = 0;
      for (const auto& o : stats.outcomes) {
        if (o.status != RequestStatus::kFinished) continue;
        ++finished;
        row.kv_pruned_mean += o.metrics.kv_pruned();
        row.max_cache_mean += static_cast<double>(o.metrics.max_cache);
      }
      row.finished = finished;
      row.requests = static_cast<int>(stats.outcomes.size());
      if (finished > 0) {
        row.kv_pruned_mean /= finished;
        row.max_cache_mean /= finished;
      }
      rows.push_back(row);
    }
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows, bool with_tool_calls) {
  std::ostringstream out;
  out << "# tokens_per_sec is wall-clock and varies between runs; other columns are exact\n";
  if (with_tool_calls) out << "tool_calls,";
  out << "threshold,tokens_per_sec,flops_units,kv_pruned_mean,max_cache_mean,finished\n";
  for (const auto& r : rows) {
    if (with_tool_calls) out << r.tool_calls << ",";
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%.1f,%lld,%.6f,%.3f,%d/%d\n", threshold_label(r.threshold).c_str(),
                  r.tokens_per_sec, static_cast<long long>(r.flops_units), r.kv_pruned_mean,
                  r.max_cache_mean, r.finished, r.requests);
    out << buf;
  }
  return out.str();
}

SuiteResult verify_prune_equivalence(std::uint64_t seed, int cases) {
  SuiteResult result{"prune_extend_equivalence", true, 0, ""};
  ModelConfig mc;
  mc.position_limit = 4096;
  mc.seed = seed;
  auto teacher = std::make_shared<const ToyTransformer>(mc);
  ScriptedBackend::Options bo;
  bo.teacher = teacher;
  auto backend = std::make_shared<ScriptedBackend>(bo);
  int checks = 0;
  for (int i = 0; i < cases && result.passed; ++i) {
    ReplayOptions ro;
    ro.backend = backend;
    ro.engine.buffer_threshold = i % 3;
    ro.engine.pool_pages = 8192;
    const auto tree = random_tree(seed + static_cast<std::uint64_t>(i), verify_tree_options());
    replay({script_of(tree)}, ro, [&](const Engine& e, const StepReport& report) {
      if (!result.passed) return;
      for (const auto& p : report.prunes) {
        ++checks;
        if (auto err = check_prune_equivalence(e, p["request"].get<RequestId>(), *teacher)) {
          result.passed = false;
          result.detail = "case " + std::to_string(i) + ": " + *err;
        }
      }
    });
    ++result.cases;
  }
  if (result.passed) result.detail = std::to_string(checks) + " evictions checked";
  return result;
}

SuiteResult verify_eviction_order(std::uint64_t seed, int cases) {
  SuiteResult result{"eviction_order", true, 0, ""};
  for (int i = 0; i < cases && result.passed; ++i) {
    const auto tree = random_tree(seed + static_cast<std::uint64_t>(i), verify_tree_options());
    const auto script = script_of(tree);
    for (int threshold : {0, 1, 2, 5}) {
      ReplayOptions ro;
      ro.engine.buffer_threshold = threshold;
      ro.engine.position_limit = 0;
      ro.model = Json{{"position_limit", 8192}};
      ro.engine.pool_pages = 8192;
      std::vector<TokenSpan> order;
      std::vector<StructureEvent> trace;
      replay({script}, ro, [&](const Engine& e, const StepReport&) {
        const RequestState& r = e.request(1);
        if (auto err = check_retention(r); err && result.passed) {
          result.passed = false;
          result.detail = "case " + std::to_string(i) + " T=" + std::to_string(threshold) + ": " + *err;
        }
        order.clear();
        for (const auto& p : r.prunes) order.push_back(p.span);
        trace = r.trace;
      });
      if (order != oracle_evictions(trace, threshold) && result.passed) {
        result.passed = false;
        result.detail = "case " + std::to_string(i) + " T=" + std::to_string(threshold) +
                        ": eviction order differs from the oracle";
      }
      ++result.cases;
    }
  }
  return result;
}

SuiteResult verify_page_accounting(std::uint64_t seed, int cases) {
  SuiteResult result{"page_accounting", true, 0, ""};
  for (int i = 0; i < cases && result.passed; i += 4) {
    std::vector<std::shared_ptr<const Script>> scripts;
    for (int k = i; k < std::min(cases, i + 4); ++k) {
      scripts.push_back(script_of(random_tree(seed + static_cast<std::uint64_t>(k), verify_tree_options())));
    }
    ReplayOptions ro;
    ro.engine.buffer_threshold = i % 3;
    ro.engine.max_batch = 4;
    ro.engine.pool_pages = 8192;
    ro.model = Json{{"position_limit", 8192}};
    auto stats = replay(scripts, ro, [&](const Engine& e, const StepReport&) {
      if (!result.passed) return;
      if (auto err = check_page_accounting(e)) {
        result.passed = false;
        result.detail = *err;
      }
    });
    for (const auto& o : stats.outcomes) {
      if (o.status != RequestStatus::kFinished && result.passed) {
        result.passed = false;
        result.detail = "request " + std::to_string(o.id) + " did not finish: " + o.failure;
      }
    }
    result.cases += static_cast<int>(scripts.size());
  }
  return result;
}

SuiteResult verify_round_trip(std::uint64_t seed, int cases) {
  SuiteResult result{"parser_round_trip", true, 0, ""};
  const Tokenizer& tok = Tokenizer::instance();
  for (int i = 0; i < cases && result.passed; ++i) {
    const auto tree = random_tree(seed + static_cast<std::uint64_t>(i), verify_tree_options());
    const std::string text = serialize_tree(tree);
    if (tok.detokenize(tok.tokenize(text)) != text) {
      result.passed = false;
      result.detail = "case " + std::to_string(i) + ": tokenizer round trip";
    } else if (!(parse_tree(text) == tree)) {
      result.passed = false;
      result.detail = "case " + std::to_string(i) + ": parse(serialize(tree)) != tree";
    }
    ++result.cases;
  }
  return result;
}

SuiteResult verify_grammar(std::uint64_t seed, int cases) {
  SuiteResult result{"grammar", true, 0, ""};
  const Tokenizer& tok = Tokenizer::instance();
  const auto options = verify_tree_options();
  for (int i = 0; i < cases && result.passed; ++i) {
    const auto tree = random_tree(seed + static_cast<std::uint64_t>(i), options);
    StructureTracker tracker(options.tool_names);
    const auto tokens = tok.tokenize(serialize_tree(tree));
    for (std::size_t k = 0; k < tokens.size(); ++k) {
      if (!tracker.admits(tokens[k])) {
        result.passed = false;
        result.detail = "case " + std::to_string(i) + ": token " + std::to_string(k) + " rejected";
        break;
      }
      tracker.feed(tokens[k]);
    }
    if (result.passed && !tracker.done()) {
      result.passed = false;
      result.detail = "case " + std::to_string(i) + ": document not complete";
    }
    if (!result.passed) break;
    try {
      GrammarSampler sampler(seed + static_cast<std::uint64_t>(i), options.tool_names);
      const auto doc = sampler.generate();
      validate_tree(parse_tree(tok.detokenize(doc)));
    } catch (const std::exception& e) {
      result.passed = false;
      result.detail = "sample " + std::to_string(i) + ": " + e.what();
    }
    ++result.cases;
  }
  return result;
}

std::vector<SuiteResult> run_verify(std::uint64_t seed, int cases) {
  return {verify_round_trip(seed, cases), verify_grammar(seed, cases),
          verify_eviction_order(seed, cases), verify_page_accounting(seed, cases),
          verify_prune_equivalence(seed, cases)};
}

}  // namespace threadrun
