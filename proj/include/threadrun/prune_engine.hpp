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
#include <deque>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "threadrun/paged_kv.hpp"
#include "threadrun/structure_tracker.hpp"
#include "threadrun/thread_schema.hpp"

namespace threadrun {

// Threshold value that never evicts anything.
inline constexpr int kNoPruning = std::numeric_limits<int>::max();

struct PrunePlan {
  std::vector<TokenSpan> evict_spans;  // disjoint, sorted
  std::int64_t reencode_from = 0;      // min start over evict_spans
  std::int64_t freed_token_count = 0;  // total logical length of evict_spans

  static PrunePlan single(TokenSpan span) { return {{span}, span.start, span.size()}; }
};

// Fixed-size FIFO of completed subtask lists (oldest first). Closing a list
// pushes it; when more than `threshold` lists are buffered the oldest one is
// returned for eviction.
class PruneBuffer {
 public:
  explicit PruneBuffer(int threshold, bool subsume_nested = true);

  std::optional<PrunePlan> on_list_closed(TokenSpan span);

  const std::deque<TokenSpan>& entries() const { return entries_; }
  int threshold() const { return threshold_; }

 private:
  int threshold_;
  bool subsume_nested_;
  std::deque<TokenSpan> entries_;
};

// Union of the plans' spans, merged into disjoint sorted ranges.
PrunePlan coalesce(std::span<const PrunePlan> plans);

// A request's retained tokens in logical order. The first `table.size()`
// entries have KV pages; the rest are pending encoding.
struct WorkingMemory {
  std::vector<TokenId> tokens;
  std::vector<std::int64_t> logical;

  std::size_t size() const { return tokens.size(); }
  void push(TokenId token, std::int64_t index) {
    tokens.push_back(token);
    logical.push_back(index);
  }
};

struct ApplyResult {
  std::vector<PageId> freed_pages;
  std::vector<TokenId> suffix_tokens;
  std::vector<std::int64_t> suffix_logical;
  // Position of the first suffix token = number of retained tokens before
  // reencode_from.
  std::int64_t suffix_start_position = 0;
  std::int64_t evicted_tokens = 0;
};

// Removes evicted tokens from `memory`, truncates `table` to the retained
// prefix and returns every page that must be released (evicted tokens and the
// suffix that will be re-encoded). `logical_end` bounds valid span ends.
// Throws Error(kSpanOutOfRange) for spans outside [0, logical_end).
ApplyResult apply_plan(const PrunePlan& plan, PageTable& table, WorkingMemory& memory,
                       std::int64_t logical_end);

// 1 - max_cache / output_len, clamped to [0, 1). Throws Error(kZeroLength).
double kv_pruned_pct(double max_cache, double output_len);

struct RequestMetrics {
  std::int64_t output_len = 0;
  std::int64_t max_cache = 0;
  std::int64_t position_high_water = 0;
  std::int64_t tool_calls = 0;
  std::int64_t pruned_tokens = 0;
  std::int64_t reencoded_tokens = 0;
  std::int64_t prompt_len = 0;

  double kv_pruned() const {
    return output_len > 0 ? kv_pruned_pct(static_cast<double>(max_cache),
                                          static_cast<double>(output_len))
                          : 0.0;
  }
  Json to_json() const;
};

// Brute-force replay of the pruning rule over a tracker event trace: returns
// the evicted subtask-list spans in eviction order.
std::vector<TokenSpan> oracle_evictions(std::span<const StructureEvent> trace, int threshold,
                                        bool subsume_nested = true);

}  // namespace threadrun
