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

#include "threadrun/thread_schema.hpp"

#include <algorithm>
#include <random>

#include "threadrun/error.hpp"

namespace threadrun {

namespace {

constexpr std::string_view kDocOpen = R"({"tasks":[)";
constexpr std::string_view kThoughtKey = R"("thought":)";
constexpr std::string_view kTooluseKey = R"("tooluse":)";
constexpr std::string_view kToolNameKey = R"("tool_name":)";
constexpr std::string_view kParametersKey = R"("parameters":)";
constexpr std::string_view kToolResultKey = R"("tool_result":)";
constexpr std::string_view kSubtasksKey = R"("subtasks":)";
constexpr std::string_view kConclusionKey = R"("conclusion":)";

struct ByteRange {
  std::size_t begin = 0;
  std::size_t end = 0;
};

// Byte ranges of one node, recorded during serialization or parsing and
// converted to token spans afterwards.
struct NodeRanges {
  ByteRange task, thought, conclusion;
  std::optional<ByteRange> subtasks, parameters, tool_result;
  std::vector<NodeRanges> children;
};

std::string dump_string(const std::string& s) {
  try {
    return Json(s).dump();
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::kInvalidTree, std::string("text is not valid UTF-8: ") + e.what());
  }
}

class SpanMapper {
 public:
  SpanMapper(std::string_view text, const Tokenizer& tok)
      : offsets_(tok.byte_offsets(tok.tokenize(text))) {}

  TokenSpan map(ByteRange r) const {
    return {token_at(r.begin), r.end > r.begin ? token_at(r.end - 1) + 1 : token_at(r.begin)};
  }

  void apply(TaskNode& node, const NodeRanges& ranges) const {
    node.span = map(ranges.task);
    node.thought_span = map(ranges.thought);
    node.conclusion_span = map(ranges.conclusion);
    node.subtasks_span.reset();
    node.parameters_span.reset();
    node.tool_result_span.reset();
    if (ranges.subtasks) node.subtasks_span = map(*ranges.subtasks);
    if (ranges.parameters) node.parameters_span = map(*ranges.parameters);
    if (ranges.tool_result) node.tool_result_span = map(*ranges.tool_result);
    for (std::size_t i = 0; i < node.subtasks.size(); ++i) {
      apply(node.subtasks[i], ranges.children[i]);
    }
  }

 private:
  std::int64_t token_at(std::size_t byte) const {
    auto it = std::upper_bound(offsets_.begin(), offsets_.end() - 1, byte);
    return static_cast<std::int64_t>(it - offsets_.begin()) - 1;
  }

  std::vector<std::size_t> offsets_;
};

void write_task(std::string& out, const TaskNode& node, NodeRanges& ranges) {
  ranges.task.begin = out.size();
  out += '{';
  ranges.thought.begin = out.size();
  out += kThoughtKey;
  out += dump_string(node.thought);
  ranges.thought.end = out.size();
  if (node.tooluse) {
    out += ',';
    out += kTooluseKey;
    out += '{';
    out += kToolNameKey;
    out += dump_string(node.tooluse->tool_name);
    out += ',';
    out += kParametersKey;
    ranges.parameters = ByteRange{out.size(), 0};
    out += node.tooluse->parameters.dump();
    ranges.parameters->end = out.size();
    out += ',';
    out += kToolResultKey;
    ranges.tool_result = ByteRange{out.size(), 0};
    out += node.tooluse->tool_result.dump();
    ranges.tool_result->end = out.size();
    out += '}';
  }
  if (!node.subtasks.empty()) {
    out += ',';
    ranges.subtasks = ByteRange{out.size(), 0};
    out += kSubtasksKey;
    out += '[';
    ranges.children.resize(node.subtasks.size());
    for (std::size_t i = 0; i < node.subtasks.size(); ++i) {
      if (i > 0) out += ',';
      write_task(out, node.subtasks[i], ranges.children[i]);
    }
    out += ']';
    ranges.subtasks->end = out.size();
  }
  out += ',';
  ranges.conclusion.begin = out.size();
  out += kConclusionKey;
  out += dump_string(node.conclusion);
  ranges.conclusion.end = out.size();
  out += '}';
  ranges.task.end = out.size();
}

std::string write_document(const ReasoningTree& tree, std::vector<NodeRanges>& ranges) {
  std::string out(kDocOpen);
  ranges.resize(tree.root_tasks.size());
  for (std::size_t i = 0; i < tree.root_tasks.size(); ++i) {
    if (i > 0) out += ',';
    write_task(out, tree.root_tasks[i], ranges[i]);
  }
  out += "]}";
  return out;
}

// Recursive-descent parser for canonical documents.
class Parser {
 public:
  explicit Parser(std::string_view text) : text_(text) {}

  ReasoningTree parse_document(std::vector<NodeRanges>& ranges) {
    ReasoningTree tree;
    expect(kDocOpen);
    parse_task_list(tree.root_tasks, ranges, 0);
    expect("}");
    if (pos_ != text_.size()) fail("trailing bytes after document");
    return tree;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw Error(ErrorCode::kParseError, what + " at byte " + std::to_string(pos_));
  }

  bool starts_with(std::string_view s) const { return text_.substr(pos_, s.size()) == s; }

  void expect(std::string_view s) {
    if (!starts_with(s)) fail("expected '" + std::string(s) + "'");
    pos_ += s.size();
  }

  bool accept(std::string_view s) {
    if (!starts_with(s)) return false;
    pos_ += s.size();
    return true;
  }

  void parse_task_list(std::vector<TaskNode>& tasks, std::vector<NodeRanges>& ranges, int depth) {
    do {
      tasks.emplace_back();
      ranges.emplace_back();
      parse_task(tasks.back(), ranges.back(), depth);
    } while (accept(","));
    expect("]");
  }

  void parse_task(TaskNode& node, NodeRanges& ranges, int depth) {
    node.depth = depth;
    ranges.task.begin = pos_;
    expect("{");
    ranges.thought.begin = pos_;
    expect(kThoughtKey);
    node.thought = parse_string();
    ranges.thought.end = pos_;
    expect(",");
    if (accept(kTooluseKey)) {
      ToolUse use;
      expect("{");
      expect(kToolNameKey);
      use.tool_name = parse_string();
      expect(",");
      expect(kParametersKey);
      ranges.parameters = ByteRange{pos_, 0};
      use.parameters = parse_value();
      ranges.parameters->end = pos_;
      if (!use.parameters.is_object()) fail("parameters must be an object");
      expect(",");
      expect(kToolResultKey);
      ranges.tool_result = ByteRange{pos_, 0};
      use.tool_result = parse_value();
      ranges.tool_result->end = pos_;
      expect("}");
      expect(",");
      node.tooluse = std::move(use);
    }
    if (starts_with(kSubtasksKey)) {
      ranges.subtasks = ByteRange{pos_, 0};
      pos_ += kSubtasksKey.size();
      expect("[");
      parse_task_list(node.subtasks, ranges.children, depth + 1);
      ranges.subtasks->end = pos_;
      expect(",");
    }
    ranges.conclusion.begin = pos_;
    expect(kConclusionKey);
    node.conclusion = parse_string();
    ranges.conclusion.end = pos_;
    expect("}");
    ranges.task.end = pos_;
  }

  std::string parse_string() {
    const std::size_t begin = pos_;
    skip_string();
    return Json::parse(text_.substr(begin, pos_ - begin)).get<std::string>();
  }

  Json parse_value() {
    const std::size_t begin = pos_;
    skip_value(0);
    try {
      return Json::parse(text_.substr(begin, pos_ - begin));
    } catch (const Json::exception& e) {
      pos_ = begin;
      fail(std::string("invalid JSON value: ") + e.what());
    }
  }

  void skip_string() {
    expect("\"");
    while (pos_ < text_.size()) {
      const char c = text_[pos_++];
      if (c == '"') return;
      if (c == '\\') {
        if (pos_ >= text_.size()) break;
        ++pos_;
      } else if (static_cast<unsigned char>(c) < 0x20) {
        --pos_;
        fail("control character in string");
      }
    }
    fail("unterminated string");
  }

  // Finds the extent of a free JSON value; whitespace is not canonical and is
  // rejected. Content validation is left to the JSON library.
  void skip_value(int nesting) {
    if (nesting > 64) fail("value nested too deeply");
    if (pos_ >= text_.size()) fail("expected value");
    const char c = text_[pos_];
    if (c == '"') {
      skip_string();
    } else if (c == '{') {
      ++pos_;
      if (accept("}")) return;
      do {
        skip_string();
        expect(":");
        skip_value(nesting + 1);
      } while (accept(","));
      expect("}");
    } else if (c == '[') {
      ++pos_;
      if (accept("]")) return;
      do {
        skip_value(nesting + 1);
      } while (accept(","));
      expect("]");
    } else if (c == '-' || (c >= '0' && c <= '9')) {
      while (pos_ < text_.size() &&
             std::string_view("+-.0123456789eE").find(text_[pos_]) != std::string_view::npos) {
        ++pos_;
      }
    } else if (!accept("true") && !accept("false") && !accept("null")) {
      fail("expected value");
    }
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

void validate_task(const TaskNode& node, int depth, int depth_limit, const std::string& path) {
  auto bad = [&](const std::string& what) {
    throw Error(ErrorCode::kInvalidTree, "task " + path + ": " + what);
  };
  if (node.depth != depth) bad("depth field is " + std::to_string(node.depth) +
                               ", expected " + std::to_string(depth));
  if (depth >= depth_limit) bad("exceeds depth limit " + std::to_string(depth_limit));
  if (node.conclusion.empty()) bad("empty conclusion");
  if (node.tooluse) {
    if (node.tooluse->tool_name.empty()) bad("empty tool name");
    if (!node.tooluse->parameters.is_object()) bad("parameters must be a JSON object");
  }
  for (std::size_t i = 0; i < node.subtasks.size(); ++i) {
    validate_task(node.subtasks[i], depth + 1, depth_limit, path + "." + std::to_string(i + 1));
  }
}

std::string random_words(std::mt19937_64& rng, int min_words, int max_words) {
  std::uniform_int_distribution<int> count(min_words, max_words);
  std::uniform_int_distribution<int> length(2, 6);
  std::uniform_int_distribution<int> letter('a', 'z');
  std::string out;
  const int n = count(rng);
  for (int w = 0; w < n; ++w) {
    if (w > 0) out += ' ';
    const int len = length(rng);
    for (int i = 0; i < len; ++i) out += static_cast<char>(letter(rng));
  }
  return out;
}

TaskNode random_task(std::mt19937_64& rng, const TreeGenOptions& o, int depth, bool spine) {
  TaskNode node;
  node.depth = depth;
  node.thought = random_words(rng, o.min_words, o.max_words);
  std::bernoulli_distribution use_tool(o.tool_prob);
  if (use_tool(rng) && !o.tool_names.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, o.tool_names.size() - 1);
    ToolUse use;
    use.tool_name = o.tool_names[pick(rng)];
    use.parameters = Json{{"query", random_words(rng, 1, 2)}};
    if (use.tool_name == "echo") {
      use.tool_result = use.parameters;
    } else {
      use.tool_result = Json{{"results", Json::array({random_words(rng, 1, 2)})}};
    }
    node.tooluse = std::move(use);
  }
  if (depth + 1 < o.max_depth && o.max_branching > 0) {
    std::uniform_int_distribution<int> branches(0, o.max_branching);
    int n = branches(rng);
    if (spine) n = std::max(n, 1);
    for (int i = 0; i < n; ++i) {
      node.subtasks.push_back(random_task(rng, o, depth + 1, spine && i == 0));
    }
  }
  node.conclusion = random_words(rng, std::max(1, o.min_words), std::max(1, o.max_words));
  return node;
}

bool tasks_equal(const std::vector<TaskNode>& a, const std::vector<TaskNode>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a[i].structurally_equal(b[i])) return false;
  }
  return true;
}

}  // namespace

Json ToolSpec::to_json() const {
  return Json{{"name", name},
              {"description", description},
              {"param_schema", param_schema},
              {"output_schema", output_schema},
              {"endpoint", endpoint},
              {"timeout_ms", timeout_ms}};
}

ToolSpec ToolSpec::from_json(const Json& j) {
  if (!j.is_object() || !j.contains("name") || !j["name"].is_string()) {
    throw Error(ErrorCode::kInvalidArgument, "tool spec needs a string 'name'");
  }
  ToolSpec spec;
  spec.name = j["name"].get<std::string>();
  spec.description = j.value("description", "");
  spec.param_schema = j.value("param_schema", Json::object());
  spec.output_schema = j.value("output_schema", Json::object());
  spec.endpoint = j.value("endpoint", "");
  spec.timeout_ms = j.value("timeout_ms", 10000);
  if (spec.name.empty()) throw Error(ErrorCode::kInvalidArgument, "tool name is empty");
  for (char c : spec.name) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.')) {
      throw Error(ErrorCode::kInvalidArgument, "tool name is not an identifier: " + spec.name);
    }
  }
  return spec;
}

bool TaskNode::structurally_equal(const TaskNode& other) const {
  return thought == other.thought && tooluse == other.tooluse &&
         conclusion == other.conclusion && depth == other.depth &&
         tasks_equal(subtasks, other.subtasks);
}

bool ReasoningTree::operator==(const ReasoningTree& other) const {
  return tasks_equal(root_tasks, other.root_tasks);
}

std::size_t ReasoningTree::task_count() const {
  std::size_t n = 0;
  auto visit = [&](auto&& self, const TaskNode& t) -> void {
    ++n;
    for (const auto& c : t.subtasks) self(self, c);
  };
  for (const auto& t : root_tasks) visit(visit, t);
  return n;
}

int ReasoningTree::max_depth() const {
  int d = 0;
  auto visit = [&](auto&& self, const TaskNode& t) -> void {
    d = std::max(d, t.depth + 1);
    for (const auto& c : t.subtasks) self(self, c);
  };
  for (const auto& t : root_tasks) visit(visit, t);
  return d;
}

std::size_t ReasoningTree::tool_call_count() const {
  std::size_t n = 0;
  auto visit = [&](auto&& self, const TaskNode& t) -> void {
    if (t.tooluse) ++n;
    for (const auto& c : t.subtasks) self(self, c);
  };
  for (const auto& t : root_tasks) visit(visit, t);
  return n;
}

std::string ReasoningTree::answer() const {
  return root_tasks.empty() ? std::string() : root_tasks.back().conclusion;
}

void validate_tree(const ReasoningTree& tree, int depth_limit) {
  if (tree.root_tasks.empty()) throw Error(ErrorCode::kInvalidTree, "tree has no tasks");
  for (std::size_t i = 0; i < tree.root_tasks.size(); ++i) {
    validate_task(tree.root_tasks[i], 0, depth_limit, std::to_string(i + 1));
  }
}

std::string serialize_tree(ReasoningTree& tree, const Tokenizer& tok) {
  validate_tree(tree);
  std::vector<NodeRanges> ranges;
  std::string text = write_document(tree, ranges);
  SpanMapper mapper(text, tok);
  for (std::size_t i = 0; i < tree.root_tasks.size(); ++i) {
    mapper.apply(tree.root_tasks[i], ranges[i]);
  }
  return text;
}

std::string serialize_tree(const ReasoningTree& tree) {
  validate_tree(tree);
  std::vector<NodeRanges> ranges;
  return write_document(tree, ranges);
}

ReasoningTree parse_tree(std::string_view text, const Tokenizer& tok) {
  std::vector<NodeRanges> ranges;
  Parser parser(text);
  ReasoningTree tree = parser.parse_document(ranges);
  validate_tree(tree);
  SpanMapper mapper(text, tok);
  for (std::size_t i = 0; i < tree.root_tasks.size(); ++i) {
    mapper.apply(tree.root_tasks[i], ranges[i]);
  }
  return tree;
}

Json tree_to_json(const ReasoningTree& tree) {
  return Json::parse(serialize_tree(tree));
}

ReasoningTree random_tree(std::uint64_t seed, const TreeGenOptions& options) {
  if (options.max_depth < 1) {
    throw Error(ErrorCode::kInvalidArgument, "max_depth must be >= 1");
  }
  std::mt19937_64 rng(seed);
  ReasoningTree tree;
  std::uniform_int_distribution<int> roots(1, std::max(1, options.max_branching));
  const int n = roots(rng);
  for (int i = 0; i < n; ++i) {
    tree.root_tasks.push_back(random_task(rng, options, 0, i == 0));
  }
  return tree;
}

ReasoningTree random_tree(std::uint64_t seed, int max_depth, int max_branching, double tool_prob) {
  TreeGenOptions options;
  options.max_depth = max_depth;
  options.max_branching = max_branching;
  options.tool_prob = tool_prob;
  return random_tree(seed, options);
}

}  // namespace threadrun
