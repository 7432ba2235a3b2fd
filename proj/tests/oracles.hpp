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

// Reference implementations used only by tests. None of these call into the
// runtime code they check, apart from reading weights and tree spans.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <list>
#include <set>
#include <vector>

#include "threadrun/engine.hpp"
#include "threadrun/model.hpp"
#include "threadrun/thread_schema.hpp"

namespace oracle {

using threadrun::TokenId;
using threadrun::TokenSpan;

// Pruned fraction, written out from the definition.
inline double kv_pruned(double max_cache, double output_len) {
  double v = 1.0 - max_cache / output_len;
  if (v < 0.0) v = 0.0;
  return v;
}

// Whole-sequence causal forward in double precision. Tokens sit at the given
// positions; keys/values come out per layer per token.
struct DenseResult {
  // [layer][token][dim]
  std::vector<std::vector<std::vector<double>>> keys, values;
  std::vector<double> last_logits;
};

inline DenseResult dense_forward(const threadrun::ToyTransformer& m, const std::vector<TokenId>& tokens,
                                 const std::vector<std::int64_t>& positions) {
  const auto& c = m.config();
  const int d = c.model_dim();
  const int hd = c.head_dim;
  const int ffn = m.ffn_dim();
  const std::size_t n = tokens.size();

  auto norm = [](const std::vector<double>& x, const std::vector<float>& g) {
    double ss = 0;
    for (double v : x) ss += v * v;
    const double s = 1.0 / std::sqrt(ss / x.size() + 1e-6);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * s * g[i];
    return out;
  };
  auto mul = [](const std::vector<double>& x, const std::vector<float>& w, int cols) {
    std::vector<double> out(cols, 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      for (int j = 0; j < cols; ++j) out[j] += x[i] * w[i * cols + j];
    }
    return out;
  };
  // Rotate dimension pairs (i, i + hd/2) of each head.
  auto rotate = [&](std::vector<double>& v, std::int64_t pos) {
    for (int h = 0; h < c.heads; ++h) {
      for (int i = 0; i < hd / 2; ++i) {
        const double theta = pos * std::pow(c.rope_base, -2.0 * i / hd);
        double& a = v[h * hd + i];
        double& b = v[h * hd + i + hd / 2];
        const double ra = a * std::cos(theta) - b * std::sin(theta);
        const double rb = a * std::sin(theta) + b * std::cos(theta);
        a = ra;
        b = rb;
      }
    }
  };

  std::vector<std::vector<double>> x(n, std::vector<double>(d));
  for (std::size_t t = 0; t < n; ++t) {
    for (int i = 0; i < d; ++i) x[t][i] = m.embedding()[tokens[t] * d + i];
  }
  DenseResult r;
  r.keys.resize(c.layers);
  r.values.resize(c.layers);
  for (int l = 0; l < c.layers; ++l) {
    const auto& w = m.layers()[l];
    std::vector<std::vector<double>> q(n), k(n), v(n);
    for (std::size_t t = 0; t < n; ++t) {
      const auto h = norm(x[t], w.attn_norm);
      q[t] = mul(h, w.wq, d);
      k[t] = mul(h, w.wk, d);
      v[t] = mul(h, w.wv, d);
      rotate(q[t], positions[t]);
      rotate(k[t], positions[t]);
    }
    r.keys[l] = k;
    r.values[l] = v;
    for (std::size_t t = 0; t < n; ++t) {
      std::vector<double> att(d, 0.0);
      for (int h = 0; h < c.heads; ++h) {
        std::vector<double> s(t + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= t; ++j) {
          double dot = 0;
          for (int i = 0; i < hd; ++i) dot += q[t][h * hd + i] * k[j][h * hd + i];
          s[j] = dot / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j <= t; ++j) {
          for (int i = 0; i < hd; ++i) att[h * hd + i] += s[j] / z * v[j][h * hd + i];
        }
      }
      const auto o = mul(att, w.wo, d);
      for (int i = 0; i < d; ++i) x[t][i] += o[i];
      auto up = mul(norm(x[t], w.mlp_norm), w.w_up, ffn);
      for (auto& u : up) u = u / (1.0 + std::exp(-u));
      const auto down = mul(up, w.w_down, d);
      for (int i = 0; i < d; ++i) x[t][i] += down[i];
    }
  }
  if (n > 0) r.last_logits = mul(norm(x[n - 1], m.final_norm()), m.lm_head(), c.vocab);
  return r;
}

// Every "subtasks":[...] span of a serialized tree.
inline std::vector<TokenSpan> subtask_list_spans(const threadrun::ReasoningTree& tree) {
  std::vector<TokenSpan> out;
  std::function<void(const threadrun::TaskNode&)> walk = [&](const threadrun::TaskNode& n) {
    if (n.subtasks_span) out.push_back(*n.subtasks_span);
    for (const auto& c : n.subtasks) walk(c);
  };
  for (const auto& t : tree.root_tasks) walk(t);
  return out;
}

// Eviction order from document spans alone. A list closes when its last token
// is emitted. A closed list inside a later-closed list stops occupying a
// buffer slot. Whenever more than `threshold` slots are occupied the oldest
// occupant is evicted.
inline std::vector<TokenSpan> evictions_from_spans(std::vector<TokenSpan> lists, int threshold) {
  std::sort(lists.begin(), lists.end(),
            [](const TokenSpan& a, const TokenSpan& b) { return a.end < b.end; });
  std::list<TokenSpan> slots;
  std::vector<TokenSpan> out;
  for (const auto& s : lists) {
    slots.remove_if([&](const TokenSpan& o) { return o.start >= s.start && o.end <= s.end; });
    slots.push_back(s);
    while (static_cast<long long>(slots.size()) > threshold) {
      out.push_back(slots.front());
      slots.pop_front();
    }
  }
  return out;
}

// Parent thought and conclusion tokens never leave memory while any token of
// a child subtask list is still there. `present` holds emission offsets of
// retained tokens; `emitted` bounds what has been generated.
inline bool retention_holds(const threadrun::ReasoningTree& tree, const std::set<std::int64_t>& present,
                            std::int64_t emitted, std::string* why) {
  bool ok = true;
  std::function<void(const threadrun::TaskNode&)> walk = [&](const threadrun::TaskNode& n) {
    if (!ok) return;
    if (n.subtasks_span) {
      bool child_alive = false;
      for (auto i = n.subtasks_span->start; i < std::min(n.subtasks_span->end, emitted); ++i) {
        child_alive = child_alive || present.count(i) != 0;
      }
      auto gone = [&](const TokenSpan& s) {
        for (auto i = s.start; i < std::min(s.end, emitted); ++i) {
          if (present.count(i) == 0) return true;
        }
        return false;
      };
      if (child_alive && (gone(n.thought_span) || gone(n.conclusion_span))) {
        ok = false;
        *why = "parent text evicted before child list at offset " + std::to_string(n.subtasks_span->start);
      }
    }
    for (const auto& c : n.subtasks) walk(c);
  };
  for (const auto& t : tree.root_tasks) walk(t);
  return ok;
}

// Emission offsets currently in a request's working memory.
inline std::set<std::int64_t> retained_offsets(const threadrun::RequestState& r) {
  std::set<std::int64_t> out;
  const auto p = static_cast<std::int64_t>(r.prompt.size());
  for (auto idx : r.memory.logical) {
    if (idx >= p) out.insert(idx - p);
  }
  return out;
}

}  // namespace oracle
