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

#include <memory>
#include <string>
#include <vector>

#include "threadrun/error.hpp"
#include "threadrun/model.hpp"
#include "threadrun/thread_schema.hpp"

namespace fixtures {

using namespace threadrun;

inline TaskNode task(std::string thought, std::string conclusion, int depth,
                     std::vector<TaskNode> subtasks = {}) {
  TaskNode n;
  n.thought = std::move(thought);
  n.conclusion = std::move(conclusion);
  n.depth = depth;
  n.subtasks = std::move(subtasks);
  return n;
}

inline TaskNode tool_task(std::string thought, std::string tool, Json params, Json result,
                          std::string conclusion, int depth) {
  TaskNode n = task(std::move(thought), std::move(conclusion), depth);
  n.tooluse = ToolUse{std::move(tool), std::move(params), std::move(result)};
  return n;
}

// Two root tasks: the first splits into two subtasks, the second into one.
inline ReasoningTree two_level_tree() {
  ReasoningTree t;
  t.root_tasks.push_back(task("split the problem", "both parts done", 0,
                              {task("part one", "one", 1), task("part two", "two", 1)}));
  t.root_tasks.push_back(task("combine", "answer 42", 0, {task("check", "ok", 1)}));
  return t;
}

inline ReasoningTree minimal_tree() {
  ReasoningTree t;
  t.root_tasks.push_back(task("think", "done", 0));
  return t;
}

inline std::shared_ptr<const Script> script_of(const ReasoningTree& t) {
  return std::make_shared<const Script>(Script::from_tree(t));
}

}  // namespace fixtures

#define EXPECT_CODE(stmt, expected_code)                                     \
  do {                                                                       \
    try {                                                                    \
      stmt;                                                                  \
      ADD_FAILURE() << "no error thrown by " #stmt;                          \
    } catch (const ::threadrun::Error& e_) {                                 \
      EXPECT_EQ(e_.code(), expected_code) << e_.what();                      \
    }                                                                        \
  } while (0)
