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

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "threadrun/engine.hpp"
#include "threadrun/model.hpp"
#include "threadrun/thread_schema.hpp"

namespace threadrun {

// Recursive decomposition: every task above the last level has `branching`
// recursive children followed by a small closer task with one leaf child.
// All thoughts and conclusions are `word`.
ReasoningTree deep_recursion_tree(int depth, int branching, const std::string& word = "x");

// One root task whose subtasks are `hops` steps; each step owns a subtask
// list holding one tool-using task, so finished hops can be pruned.
ReasoningTree multi_hop_tree(int hops, const std::string& tool_name = "echo");

// Trace corpus, one {script, tool_responses} object per line.
std::vector<Json> generate_corpus(std::uint64_t seed, int n, const TreeGenOptions& options);
void write_corpus(const std::string& path, const std::vector<Json>& traces);
std::vector<Json> read_corpus(const std::string& path);

// Random documents drawn from the tracker's mask. Closing tokens become more
// likely as the document grows so generation terminates.
class GrammarSampler {
 public:
  GrammarSampler(std::uint64_t seed, std::vector<std::string> tool_names,
                 int depth_limit = 4, int soft_budget = 400);
  // Throws Error(kInternal) if `max_tokens` is reached first.
  std::vector<TokenId> generate(std::int64_t max_tokens = 200000);

 private:
  std::uint64_t seed_;
  std::vector<std::string> tool_names_;
  int depth_limit_;
  int soft_budget_;
};

struct ReplayOptions {
  EngineConfig engine;
  Json model = Json::object();  // make_backend() config; kind is forced to scripted
  std::shared_ptr<ModelBackend> backend;  // overrides `model` when set
  int tool_latency_ms = 0;
};

struct ReplayStats {
  std::vector<RequestOutcome> outcomes;
  std::int64_t steps = 0;
  std::int64_t flops_units = 0;
  std::int64_t tokens = 0;  // emitted by finished requests
  double seconds = 0.0;
  // Mean over steps of each request's working memory, averaged over requests.
  double mean_memory = 0.0;
  bool deadline_hit = false;
};

using StepHook = std::function<void(const Engine&, const StepReport&)>;

// Runs every script through one engine (tools answered from the recordings).
ReplayStats replay(const std::vector<std::shared_ptr<const Script>>& scripts,
                   const ReplayOptions& options, const StepHook& hook = {});

// Compares a request's retained KV against a fresh prefill of its working
// memory and the next `lookahead` greedy tokens of both. Returns a
// description of the first mismatch.
std::optional<std::string> check_prune_equivalence(const Engine& engine, RequestId id,
                                                   const ToyTransformer& model,
                                                   int lookahead = 8, double tol = 1e-5);

// Pages owned by live requests equal their encoded working memory.
std::optional<std::string> check_page_accounting(const Engine& engine);

struct BenchConfig {
  std::vector<int> thresholds = {0, 1, 2, 8, kNoPruning};
  int batch = 1;
  int tool_latency_ms = 0;
  Json model = Json::object();
  EngineConfig engine;
  // Non-empty: ignore the corpus and sweep multi-hop traces with these tool
  // call counts instead.
  std::vector<int> tool_calls;
};

struct BenchRow {
  int threshold = 0;
  int tool_calls = -1;
  double tokens_per_sec = 0.0;
  std::int64_t flops_units = 0;
  double kv_pruned_mean = 0.0;
  double max_cache_mean = 0.0;
  int finished = 0;  // means cover finished requests only
  int requests = 0;
};

std::vector<BenchRow> run_bench(const std::vector<Json>& corpus, const BenchConfig& config);
std::string bench_csv(const std::vector<BenchRow>& rows, bool with_tool_calls);
std::string threshold_label(int threshold);

struct SuiteResult {
  std::string name;
  bool passed = true;
  int cases = 0;
  std::string detail;
};

SuiteResult verify_prune_equivalence(std::uint64_t seed, int cases);
SuiteResult verify_eviction_order(std::uint64_t seed, int cases);
SuiteResult verify_page_accounting(std::uint64_t seed, int cases);
SuiteResult verify_round_trip(std::uint64_t seed, int cases);
SuiteResult verify_grammar(std::uint64_t seed, int cases);
std::vector<SuiteResult> run_verify(std::uint64_t seed, int cases);

}  // namespace threadrun
