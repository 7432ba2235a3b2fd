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

#include "threadrun/paged_kv.hpp"

#include <map>
#include <string>

#include "threadrun/error.hpp"

namespace threadrun {

PagePool::PagePool(std::size_t capacity, KvLayout layout)
    : layout_(layout),
      storage_(capacity * layout.floats_per_page(), 0.0F),
      owner_(capacity, kFree) {
  free_list_.reserve(capacity);
  // Lowest ids are handed out first.
  for (std::size_t i = capacity; i > 0; --i) free_list_.push_back(static_cast<PageId>(i - 1));
}

std::vector<PageId> PagePool::alloc(RequestId request, std::size_t n) {
  if (n > free_list_.size()) {
    throw Error(ErrorCode::kOutOfPages, "needed " + std::to_string(n) + ", available " +
                                            std::to_string(free_list_.size()));
  }
  std::vector<PageId> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const PageId id = free_list_.back();
    free_list_.pop_back();
    owner_[id] = static_cast<std::int64_t>(request);
    out.push_back(id);
  }
  return out;
}

void PagePool::free(std::span<const PageId> pages) {
  std::vector<bool> seen(owner_.size(), false);
  for (PageId id : pages) {
    if (id < 0 || static_cast<std::size_t>(id) >= owner_.size() || owner_[id] == kFree ||
        seen[id]) {
      throw Error(ErrorCode::kDoubleFree, "page " + std::to_string(id));
    }
    seen[id] = true;
  }
  for (PageId id : pages) {
    owner_[id] = kFree;
    free_list_.push_back(id);
  }
}

KvView PagePool::gather(const PageTable& table) const {
  std::vector<const float*> pages;
  pages.reserve(table.size());
  for (PageId id : table.pages) pages.push_back(page_data(id).data());
  return KvView(std::move(pages), layout_);
}

std::span<float> PagePool::page_data(PageId page) {
  const std::size_t n = layout_.floats_per_page();
  return {storage_.data() + static_cast<std::size_t>(page) * n, n};
}

std::span<const float> PagePool::page_data(PageId page) const {
  const std::size_t n = layout_.floats_per_page();
  return {storage_.data() + static_cast<std::size_t>(page) * n, n};
}

nlohmann::json PagePool::snapshot() const {
  std::map<std::int64_t, std::size_t> live;
  for (std::int64_t owner : owner_) {
    if (owner != kFree) ++live[owner];
  }
  nlohmann::json per_request = nlohmann::json::object();
  for (const auto& [id, count] : live) {
    per_request[std::to_string(id)] = {{"live_tokens", count}};
  }
  return {{"capacity", capacity()},
          {"free", free_count()},
          {"allocated", allocated_count()},
          {"per_request", per_request}};
}

}  // namespace threadrun
