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

#include "threadrun/prune_engine.hpp"

#include <algorithm>

#include "threadrun/error.hpp"

namespace threadrun {

PruneBuffer::PruneBuffer(int threshold, bool subsume_nested)
    : threshold_(threshold), subsume_nested_(subsume_nested) {
  if (threshold < 0) throw Error(ErrorCode::kInvalidArgument, "threshold must be >= 0");
}

std::optional<PrunePlan> PruneBuffer::on_list_closed(TokenSpan span) {
  if (subsume_nested_) {
    std::erase_if(entries_, [&](const TokenSpan& e) { return span.contains(e); });
  }
  entries_.push_back(span);
  if (static_cast<std::int64_t>(entries_.size()) <= static_cast<std::int64_t>(threshold_)) {
    return std::nullopt;
  }
  const TokenSpan oldest = entries_.front();
  entries_.pop_front();
  return PrunePlan::single(oldest);
}

PrunePlan coalesce(std::span<const PrunePlan> plans) {
  std::vector<TokenSpan> spans;
  for (const auto& p : plans) {
    for (const auto& s : p.evict_spans) {
      if (!s.empty()) spans.push_back(s);
    }
  }
  std::sort(spans.begin(), spans.end(),
            [](const TokenSpan& a, const TokenSpan& b) { return a.start < b.start; });
  PrunePlan out;
  for (const auto& s : spans) {
    if (!out.evict_spans.empty() && s.start <= out.evict_spans.back().end) {
      out.evict_spans.back().end = std::max(out.evict_spans.back().end, s.end);
    } else {
      out.evict_spans.push_back(s);
    }
  }
  out.reencode_from = out.evict_spans.empty() ? 0 : out.evict_spans.front().start;
  for (const auto& s : out.evict_spans) out.freed_token_count += s.size();
  return out;
}

ApplyResult apply_plan(const PrunePlan& plan, PageTable& table, WorkingMemory& memory,
                       std::int64_t logical_end) {
  for (const auto& s : plan.evict_spans) {
    if (s.start < 0 || s.end > logical_end || s.start > s.end) {
      throw Error(ErrorCode::kSpanOutOfRange,
                  "[" + std::to_string(s.start) + ", " + std::to_string(s.end) +
                      ") outside [0, " + std::to_string(logical_end) + ")");
    }
  }
  auto evicted = [&](std::int64_t index) {
    // Spans are sorted and disjoint.
    auto it = std::upper_bound(plan.evict_spans.begin(), plan.evict_spans.end(), index,
                               [](std::int64_t i, const TokenSpan& s) { return i < s.start; });
    return it != plan.evict_spans.begin() && std::prev(it)->contains(index);
  };

  ApplyResult result;
  WorkingMemory kept;
  std::vector<PageId> kept_pages;
  const std::size_t encoded = table.size();
  for (std::size_t i = 0; i < memory.size(); ++i) {
    const std::int64_t index = memory.logical[i];
    const bool has_page = i < encoded;
    if (evicted(index)) {
      ++result.evicted_tokens;
      if (has_page) result.freed_pages.push_back(table.pages[i]);
      continue;
    }
    if (index >= plan.reencode_from && !plan.evict_spans.empty()) {
      if (has_page) result.freed_pages.push_back(table.pages[i]);
      result.suffix_tokens.push_back(memory.tokens[i]);
      result.suffix_logical.push_back(index);
      continue;
    }
    if (!has_page) {
      throw Error(ErrorCode::kInternal, "pending token precedes the re-encode point");
    }
    kept.push(memory.tokens[i], index);
    kept_pages.push_back(table.pages[i]);
  }
  if (plan.evict_spans.empty()) return result;

  result.suffix_start_position = static_cast<std::int64_t>(kept.size());
  for (std::size_t i = 0; i < result.suffix_tokens.size(); ++i) {
    kept.push(result.suffix_tokens[i], result.suffix_logical[i]);
  }
  memory = std::move(kept);
  table.pages = std::move(kept_pages);
  return result;
}

double kv_pruned_pct(double max_cache, double output_len) {
  if (output_len <= 0.0) throw Error(ErrorCode::kZeroLength, "output_len must be > 0");
  const double v = 1.0 - max_cache / output_len;
  return std::clamp(v, 0.0, std::nextafter(1.0, 0.0));
}

Json RequestMetrics::to_json() const {
  return Json{{"output_len", output_len},
              {"max_cache", max_cache},
              {"kv_pruned", kv_pruned()},
              {"position_high_water", position_high_water},
              {"tool_calls", tool_calls},
              {"pruned_tokens", pruned_tokens},
              {"reencoded_tokens", reencoded_tokens},
              {"prompt_len", prompt_len}};
}

std::vector<TokenSpan> oracle_evictions(std::span<const StructureEvent> trace, int threshold,
                                        bool subsume_nested) {
  struct Closed {
    TokenSpan span;
    bool evicted = false;
  };
  std::vector<Closed> closed;  // in close order
  std::vector<TokenSpan> order;
  for (const auto& e : trace) {
    if (e.kind != EventKind::kSubtaskListClosed || !e.payload) continue;
    closed.push_back({e.payload->span});
    while (true) {
      std::vector<std::size_t> buffered;
      for (std::size_t i = 0; i < closed.size(); ++i) {
        if (closed[i].evicted) continue;
        bool nested = false;
        if (subsume_nested) {
          for (std::size_t j = 0; j < closed.size(); ++j) {
            if (j != i && closed[j].span.contains(closed[i].span)) nested = true;
          }
        }
        if (!nested) buffered.push_back(i);
      }
      if (static_cast<long long>(buffered.size()) <= static_cast<long long>(threshold)) break;
      closed[buffered.front()].evicted = true;
      order.push_back(closed[buffered.front()].span);
    }
  }
  return order;
}

}  // namespace threadrun
