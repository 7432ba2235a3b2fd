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
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

namespace threadrun {

using PageId = std::int32_t;
using RequestId = std::uint64_t;

// Per-page storage shape: for each layer a key vector followed by a value
// vector, each kv_dim floats. A layout with zero layers stores nothing (used by
// backends that do not compute attention).
struct KvLayout {
  int layers = 0;
  int kv_dim = 0;

  std::size_t floats_per_page() const {
    return static_cast<std::size_t>(layers) * 2 * static_cast<std::size_t>(kv_dim);
  }
};

// Logical working-memory order -> physical page.
struct PageTable {
  RequestId request = 0;
  std::vector<PageId> pages;

  std::size_t size() const { return pages.size(); }
  bool empty() const { return pages.empty(); }
};

// Read-only view of a request's KV states in logical order.
class KvView {
 public:
  KvView(std::vector<const float*> pages, KvLayout layout)
      : pages_(std::move(pages)), layout_(layout) {}

  std::size_t size() const { return pages_.size(); }
  std::span<const float> key(int layer, std::size_t index) const {
    return {pages_[index] + static_cast<std::size_t>(layer) * 2 * layout_.kv_dim,
            static_cast<std::size_t>(layout_.kv_dim)};
  }
  std::span<const float> value(int layer, std::size_t index) const {
    return {pages_[index] + (static_cast<std::size_t>(layer) * 2 + 1) * layout_.kv_dim,
            static_cast<std::size_t>(layout_.kv_dim)};
  }

 private:
  std::vector<const float*> pages_;
  KvLayout layout_;
};

// Page-size-1 pool. Every page holds exactly one token's states.
class PagePool {
 public:
  static constexpr std::int64_t kFree = -1;

  PagePool(std::size_t capacity, KvLayout layout);

  // Throws Error(kOutOfPages) without allocating anything when fewer than n
  // pages are free.
  std::vector<PageId> alloc(RequestId request, std::size_t n);
  // Throws Error(kDoubleFree) without freeing anything if any id is not
  // currently allocated (or repeats).
  void free(std::span<const PageId> pages);

  KvView gather(const PageTable& table) const;
  std::span<float> page_data(PageId page);
  std::span<const float> page_data(PageId page) const;

  std::size_t capacity() const { return owner_.size(); }
  std::size_t free_count() const { return free_list_.size(); }
  std::size_t allocated_count() const { return capacity() - free_count(); }
  std::int64_t owner(PageId page) const { return owner_.at(page); }
  const KvLayout& layout() const { return layout_; }

  // {capacity, free, allocated, per_request: {id: live_tokens}}
  nlohmann::json snapshot() const;

 private:
  KvLayout layout_;
  std::vector<float> storage_;
  std::vector<std::int64_t> owner_;
  std::vector<PageId> free_list_;
};

}  // namespace threadrun
