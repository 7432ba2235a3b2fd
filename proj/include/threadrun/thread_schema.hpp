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
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "threadrun/tokenizer.hpp"

namespace threadrun {

using Json = nlohmann::json;

inline constexpr int kDefaultDepthLimit = 16;

// Half-open range of logical token indices.
struct TokenSpan {
  std::int64_t start = 0;
  std::int64_t end = 0;

  std::int64_t size() const { return end - start; }
  bool empty() const { return end <= start; }
  bool contains(std::int64_t index) const { return index >= start && index < end; }
  bool contains(const TokenSpan& other) const {
    return other.start >= start && other.end <= end;
  }
  bool overlaps(const TokenSpan& other) const {
    return start < other.end && other.start < end;
  }
  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

struct ToolSpec {
  std::string name;
  std::string description;
  Json param_schema = Json::object();
  Json output_schema = Json::object();
  // "http://host:port/path" or "mock:<kind>".
  std::string endpoint;
  int timeout_ms = 10000;

  Json to_json() const;
  static ToolSpec from_json(const Json& j);
};

struct ToolUse {
  std::string tool_name;
  Json parameters = Json::object();
  Json tool_result;

  friend bool operator==(const ToolUse&, const ToolUse&) = default;
};

// Token spans are filled in by serialize_tree() / parse_tree() and are not
// part of structural equality.
struct TaskNode {
  std::string thought;
  std::optional<ToolUse> tooluse;
  std::vector<TaskNode> subtasks;
  std::string conclusion;
  int depth = 0;

  TokenSpan span;
  TokenSpan thought_span;
  TokenSpan conclusion_span;
  // The whole "subtasks":[...] key/value range, when present.
  std::optional<TokenSpan> subtasks_span;
  std::optional<TokenSpan> parameters_span;
  std::optional<TokenSpan> tool_result_span;

  bool is_leaf() const { return subtasks.empty(); }
  bool structurally_equal(const TaskNode& other) const;
};

struct ReasoningTree {
  std::vector<TaskNode> root_tasks;

  bool operator==(const ReasoningTree& other) const;
  std::size_t task_count() const;
  int max_depth() const;
  std::size_t tool_call_count() const;
  // The last root task's conclusion.
  std::string answer() const;
};

// Throws Error(kInvalidTree) with a description of the first violation.
void validate_tree(const ReasoningTree& tree, int depth_limit = kDefaultDepthLimit);

// Canonical JSON: fixed key order, no insignificant whitespace. Populates the
// token spans of every node (relative to the first token of the document).
std::string serialize_tree(ReasoningTree& tree, const Tokenizer& tok = Tokenizer::instance());
std::string serialize_tree(const ReasoningTree& tree);

// Batch reference parser for canonical documents. Throws Error(kParseError)
// on malformed input and Error(kInvalidTree) on schema violations.
ReasoningTree parse_tree(std::string_view text, const Tokenizer& tok = Tokenizer::instance());

Json tree_to_json(const ReasoningTree& tree);

struct TreeGenOptions {
  int max_depth = 3;
  int max_branching = 3;
  double tool_prob = 0.0;
  std::vector<std::string> tool_names = {"echo"};
  int min_words = 1;
  int max_words = 3;
};

// Deterministic for a fixed seed. A spine of first children always reaches
// max_depth levels when max_branching > 0.
ReasoningTree random_tree(std::uint64_t seed, const TreeGenOptions& options);
ReasoningTree random_tree(std::uint64_t seed, int max_depth, int max_branching,
                          double tool_prob);

}  // namespace threadrun
