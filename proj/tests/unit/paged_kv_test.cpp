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

#include <map>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "threadrun/paged_kv.hpp"

using namespace threadrun;

TEST(PagePool, ZeroAllocIsEmpty) {
  PagePool pool(4, {1, 2});
  EXPECT_TRUE(pool.alloc(1, 0).empty());
  EXPECT_EQ(pool.free_count(), 4u);
}

TEST(PagePool, AllocFreeRestoresAccounting) {
  PagePool pool(16, {1, 2});
  const auto before = pool.snapshot();
  auto a = pool.alloc(7, 5);
  EXPECT_EQ(pool.allocated_count(), 5u);
  for (auto p : a) EXPECT_EQ(pool.owner(p), 7);
  pool.free(a);
  EXPECT_EQ(pool.snapshot()["free"], before["free"]);
  EXPECT_EQ(pool.snapshot()["allocated"], 0);
}

TEST(PagePool, OverCapacityAllocatesNothing) {
  PagePool pool(8, {1, 2});
  EXPECT_CODE(pool.alloc(1, 9), ErrorCode::kOutOfPages);
  EXPECT_EQ(pool.free_count(), 8u);
  auto a = pool.alloc(1, 6);
  EXPECT_CODE(pool.alloc(2, 3), ErrorCode::kOutOfPages);
  EXPECT_EQ(pool.free_count(), 2u);
}

TEST(PagePool, FreeEmptyIsNoop) {
  PagePool pool(4, {1, 2});
  pool.free({});
  EXPECT_EQ(pool.free_count(), 4u);
}

TEST(PagePool, DoubleFreeFreesNothing) {
  PagePool pool(8, {1, 2});
  auto a = pool.alloc(1, 3);
  pool.free(std::vector<PageId>{a[0]});
  EXPECT_CODE(pool.free(std::vector<PageId>{a[1], a[0]}), ErrorCode::kDoubleFree);
  EXPECT_EQ(pool.owner(a[1]), 1);
  EXPECT_CODE(pool.free(std::vector<PageId>{a[2], a[2]}), ErrorCode::kDoubleFree);
  EXPECT_EQ(pool.allocated_count(), 2u);
}

TEST(PagePool, FreedPagesAreImmediatelyReusable) {
  PagePool pool(4, {1, 2});
  auto a = pool.alloc(1, 4);
  pool.free(std::vector<PageId>{a[1], a[2]});
  auto b = pool.alloc(2, 2);
  EXPECT_EQ(std::set<PageId>(b.begin(), b.end()), (std::set<PageId>{a[1], a[2]}));
}

TEST(PagePool, GatherFollowsTableOrder) {
  PagePool pool(8, {1, 2});
  PageTable table{1, pool.alloc(1, 6)};
  for (std::size_t i = 0; i < table.size(); ++i) {
    auto d = pool.page_data(table.pages[i]);
    for (auto& v : d) v = static_cast<float>(i);
  }
  // Drop logical slots 1 and 2, as after pruning a two-token span.
  pool.free(std::vector<PageId>{table.pages[1], table.pages[2]});
  table.pages.erase(table.pages.begin() + 1, table.pages.begin() + 3);
  const auto view = pool.gather(table);
  ASSERT_EQ(view.size(), 4u);
  const float expected[] = {0, 3, 4, 5};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(view.key(0, i)[0], expected[i]);
    EXPECT_EQ(view.value(0, i)[1], expected[i]);
  }
}

TEST(PagePool, SingleTokenGather) {
  PagePool pool(2, {2, 3});
  PageTable table{1, pool.alloc(1, 1)};
  auto d = pool.page_data(table.pages[0]);
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<float>(i);
  const auto v = pool.gather(table);
  EXPECT_EQ(v.key(1, 0)[0], 6.0F);
  EXPECT_EQ(v.value(1, 0)[2], 11.0F);
}

TEST(PagePool, RandomInterleavingsNeverLeak) {
  std::mt19937 rng(11);
  PagePool pool(64, {0, 0});
  std::map<RequestId, std::vector<PageId>> live;
  for (int op = 0; op < 5000; ++op) {
    const RequestId r = 1 + rng() % 5;
    auto& mine = live[r];
    if (rng() % 2 == 0) {
      const std::size_t n = rng() % 6;
      try {
        auto got = pool.alloc(r, n);
        mine.insert(mine.end(), got.begin(), got.end());
      } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kOutOfPages);
        EXPECT_LT(pool.free_count(), n);
      }
    } else if (!mine.empty()) {
      const std::size_t n = 1 + rng() % mine.size();
      std::vector<PageId> drop(mine.end() - static_cast<std::ptrdiff_t>(n), mine.end());
      mine.resize(mine.size() - n);
      pool.free(drop);
    }
    std::size_t total = 0;
    for (const auto& [id, pages] : live) {
      total += pages.size();
      for (auto p : pages) ASSERT_EQ(pool.owner(p), static_cast<std::int64_t>(id));
    }
    ASSERT_EQ(pool.allocated_count(), total);
  }
}
