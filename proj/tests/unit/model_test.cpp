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

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "threadrun/model.hpp"
#include "threadrun/prune_engine.hpp"

using namespace threadrun;

namespace {

ModelConfig small(int limit = 64) {
  ModelConfig c;
  c.layers = 2;
  c.heads = 4;
  c.head_dim = 16;
  c.position_limit = limit;
  c.seed = 3;
  return c;
}

double rel_err(std::span<const float> got, const std::vector<double>& want) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < want.size(); ++i) {
    num += (got[i] - want[i]) * (got[i] - want[i]);
    den += want[i] * want[i];
  }
  return std::sqrt(num / std::max(den, 1e-30));
}

std::vector<TokenId> random_tokens(std::mt19937& rng, int n) {
  std::vector<TokenId> t(n);
  for (auto& x : t) x = static_cast<TokenId>(rng() % 264);
  return t;
}

void expect_matches_dense(const ToyTransformer& m, const PagePool& pool, const PageTable& table,
                          const std::vector<TokenId>& tokens, const std::vector<float>& logits) {
  std::vector<std::int64_t> pos(tokens.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::int64_t>(i);
  const auto ref = oracle::dense_forward(m, tokens, pos);
  const auto view = pool.gather(table);
  ASSERT_EQ(view.size(), tokens.size());
  for (int l = 0; l < m.config().layers; ++l) {
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      EXPECT_LT(rel_err(view.key(l, t), ref.keys[l][t]), 1e-5) << "layer " << l << " token " << t;
      EXPECT_LT(rel_err(view.value(l, t), ref.values[l][t]), 1e-5) << "layer " << l << " token " << t;
    }
  }
  EXPECT_LT(rel_err(logits, ref.last_logits), 1e-4);
}

}  // namespace

TEST(Rope, PositionZeroIsIdentityAndNormPreserved) {
  std::vector<float> v(32);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i) - 10.0F;
  auto w = v;
  ToyTransformer::apply_rope(w, 2, 16, 0, 10000.0);
  EXPECT_EQ(w, v);
  ToyTransformer::apply_rope(w, 2, 16, 37, 10000.0);
  double a = 0, b = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    a += v[i] * v[i];
    b += w[i] * w[i];
  }
  EXPECT_NEAR(a, b, 1e-3);
}

TEST(Rope, DotProductDependsOnRelativePosition) {
  std::mt19937 rng(1);
  std::normal_distribution<float> n;
  std::vector<float> q(16), k(16);
  for (auto& x : q) x = n(rng);
  for (auto& x : k) x = n(rng);
  auto dot_at = [&](int pq, int pk) {
    auto a = q, b = k;
    ToyTransformer::apply_rope(a, 1, 16, pq, 10000.0);
    ToyTransformer::apply_rope(b, 1, 16, pk, 10000.0);
    double d = 0;
    for (int i = 0; i < 16; ++i) d += a[i] * b[i];
    return d;
  };
  EXPECT_NEAR(dot_at(5, 2), dot_at(40, 37), 1e-4);
}

TEST(Model, PrefillMatchesDenseReference) {
  ToyTransformer m(small());
  PagePool pool(64, m.config().kv_layout());
  std::mt19937 rng(2);
  const auto tokens = random_tokens(rng, 20);
  PageTable table{1, {}};
  const auto logits = m.prefill(tokens, table, pool);
  expect_matches_dense(m, pool, table, tokens, logits);
}

TEST(Model, SingleTokenPrefill) {
  ToyTransformer m(small());
  PagePool pool(4, m.config().kv_layout());
  PageTable table{1, {}};
  const TokenId one[] = {42};
  const auto logits = m.prefill(one, table, pool);
  EXPECT_EQ(table.size(), 1u);
  EXPECT_EQ(pool.allocated_count(), 1u);
  EXPECT_EQ(logits.size(), static_cast<std::size_t>(m.config().vocab));
}

TEST(Model, IncrementalDecodeEqualsBatchPrefill) {
  ToyTransformer m(small());
  PagePool pool(128, m.config().kv_layout());
  std::mt19937 rng(4);
  const auto tokens = random_tokens(rng, 24);
  PageTable batch{1, {}}, inc{2, {}};
  const auto lb = m.prefill(tokens, batch, pool);
  std::vector<float> li;
  for (std::size_t i = 0; i < tokens.size(); ++i) li = m.decode_step(tokens[i], static_cast<std::int64_t>(i), inc, pool);
  const auto vb = pool.gather(batch);
  const auto vi = pool.gather(inc);
  for (int l = 0; l < 2; ++l) {
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      const auto kb = vb.key(l, t);
      EXPECT_LT(rel_err(vi.key(l, t), std::vector<double>(kb.begin(), kb.end())), 1e-5);
    }
  }
  EXPECT_LT(rel_err(li, std::vector<double>(lb.begin(), lb.end())), 1e-5);
}

TEST(Model, DeterministicAcrossInstances) {
  ToyTransformer a(small()), b(small());
  PagePool pool(64, a.config().kv_layout());
  std::mt19937 rng(6);
  const auto tokens = random_tokens(rng, 10);
  PageTable ta{1, {}}, tb{2, {}};
  EXPECT_EQ(a.prefill(tokens, ta, pool), b.prefill(tokens, tb, pool));
}

TEST(Model, GreedyChainDeterministic) {
  auto chain = [] {
    ToyTransformer m(small());
    PagePool pool(64, m.config().kv_layout());
    PageTable t{1, {}};
    const TokenId start[] = {264};
    auto logits = m.prefill(start, t, pool);
    std::vector<bool> mask(m.config().vocab, true);
    std::vector<TokenId> out;
    for (int i = 0; i < 16; ++i) {
      const TokenId next = masked_argmax(logits, mask);
      out.push_back(next);
      logits = m.decode_step(next, static_cast<std::int64_t>(t.size()), t, pool);
    }
    return out;
  };
  EXPECT_EQ(chain(), chain());
}

TEST(Model, ExtendErrors) {
  ToyTransformer m(small(8));
  PagePool pool(16, m.config().kv_layout());
  PageTable t{1, {}};
  EXPECT_CODE(m.extend({}, 0, t, pool), ErrorCode::kEmptyExtend);
  const TokenId one[] = {7};
  EXPECT_NO_THROW(m.extend(one, 7, t, pool));
  EXPECT_CODE(m.extend(one, 8, t, pool), ErrorCode::kPositionOverflow);
  PagePool tiny(1, m.config().kv_layout());
  PageTable u{2, {}};
  const TokenId two[] = {1, 2};
  EXPECT_CODE(m.extend(two, 0, u, tiny), ErrorCode::kOutOfPages);
  EXPECT_EQ(tiny.free_count(), 1u);
  EXPECT_TRUE(u.empty());
}

TEST(Model, ExtendAfterPruneEqualsFreshPrefill) {
  // Sequence [t1, a, b, t2, c, x]; evict {a, b}; re-encode [t2, c, x] from
  // position 1 on top of t1's states.
  ToyTransformer m(small());
  PagePool pool(64, m.config().kv_layout());
  std::mt19937 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 6 + rng() % 20;
    const auto tokens = random_tokens(rng, n);
    PageTable table{1, {}};
    WorkingMemory mem;
    for (int i = 0; i < n; ++i) mem.push(tokens[i], i);
    m.prefill(tokens, table, pool);
    const std::int64_t a = 1 + rng() % (n - 2);
    const std::int64_t b = std::min<std::int64_t>(n - 1, a + 1 + rng() % 5);
    const auto r = apply_plan(PrunePlan::single({a, b}), table, mem, n);
    pool.free(r.freed_pages);
    const auto logits = m.extend(r.suffix_tokens, r.suffix_start_position, table, pool);
    expect_matches_dense(m, pool, table, mem.tokens, logits);
    pool.free(table.pages);
  }
}

TEST(MaskedArgmax, ForcedFullAndBruteForce) {
  std::vector<float> logits = {0.5F, 3.0F, 3.0F, -1.0F};
  EXPECT_EQ(masked_argmax(logits, {false, false, false, true}), 3);
  EXPECT_EQ(masked_argmax(logits, {true, true, true, true}), 1);  // tie to lowest id
  EXPECT_CODE(masked_argmax(logits, {false, false, false, false}), ErrorCode::kEmptyMask);
  std::mt19937 rng(12);
  std::uniform_real_distribution<float> u(-2, 2);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> l(512);
    for (auto& x : l) x = std::round(u(rng) * 4) / 4;  // force ties
    std::vector<bool> mask(512);
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = rng() % 3 == 0;
    mask[rng() % 512] = true;
    TokenId best = -1;
    for (int i = 0; i < 512; ++i) {
      if (mask[i] && (best < 0 || l[i] > l[best])) best = i;
    }
    EXPECT_EQ(masked_argmax(l, mask), best);
  }
}

TEST(ModelConfig, ValidationAndJson) {
  ModelConfig c = small();
  EXPECT_EQ(ModelConfig::from_json(c.to_json()).to_json(), c.to_json());
  c.head_dim = 15;
  EXPECT_CODE(c.validate(), ErrorCode::kInvalidArgument);
}

TEST(Script, FromTreeSplitsAtToolResults) {
  ReasoningTree t;
  t.root_tasks.push_back(fixtures::tool_task("a", "echo", Json{{"q", 1}}, Json{{"q", 1}}, "b", 0));
  const auto s = Script::from_tree(t);
  ASSERT_EQ(s.segments.size(), 2u);
  ASSERT_EQ(s.tool_responses.size(), 1u);
  EXPECT_EQ(s.tool_responses[0], (Json{{"q", 1}}));
  EXPECT_EQ(s.segments[0].back(), Tokenizer::kToolResultKey);
  const auto back = Script::from_trace_json(s.to_trace_json());
  EXPECT_EQ(back.segments, s.segments);
  EXPECT_EQ(back.tool_responses, s.tool_responses);
}
