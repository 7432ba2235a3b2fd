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

#include <cstdio>
#include <sstream>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "threadrun/harness.hpp"

using namespace threadrun;

namespace {

// Drops the wall-clock column so runs can be compared exactly.
std::string without_wall_clock(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) {
    if (line.rfind("#", 0) == 0) continue;
    const auto a = line.find(',');
    const auto b = line.find(',', a + 1);
    out += line.substr(0, a) + line.substr(b) + "\n";
  }
  return out;
}

}  // namespace

TEST(Corpus, WriteReadRoundTrip) {
  const auto traces = generate_corpus(5, 10, TreeGenOptions{3, 2, 0.5, {"echo"}});
  const std::string path = ::testing::TempDir() + "corpus_rt.jsonl";
  write_corpus(path, traces);
  EXPECT_EQ(read_corpus(path), traces);
  std::remove(path.c_str());
  EXPECT_EQ(generate_corpus(5, 10, TreeGenOptions{3, 2, 0.5, {"echo"}}), traces);
}

TEST(Constructions, DeepRecursionShape) {
  const auto t = deep_recursion_tree(3, 2);
  EXPECT_EQ(t.max_depth(), 3);
  EXPECT_NO_THROW(validate_tree(t));
  const auto hops = multi_hop_tree(5);
  EXPECT_EQ(hops.tool_call_count(), 5u);
}

TEST(GrammarSampler, DocumentsParse) {
  for (std::uint64_t s = 0; s < 30; ++s) {
    GrammarSampler g(s, {"echo"});
    const auto ids = g.generate();
    const auto text = Tokenizer::instance().detokenize(ids);
    EXPECT_NO_THROW(validate_tree(parse_tree(text))) << text;
  }
}

TEST(Bench, EmptyCorpusHasNoRows) {
  const auto rows = run_bench({}, BenchConfig());
  EXPECT_TRUE(rows.empty());
  const auto csv = bench_csv(rows, false);
  EXPECT_EQ(csv.find('\n', csv.find("threshold")), csv.size() - 1);
}

TEST(Bench, ReproducibleAndMonotoneOnDeepRecursion) {
  std::vector<Json> corpus;
  for (const char* w : {"a", "bb"}) {
    corpus.push_back(Script::from_tree(deep_recursion_tree(5, 2, w)).to_trace_json());
  }
  BenchConfig cfg;
  cfg.thresholds = {0, 1, 2, 8};
  cfg.model = Json{{"position_limit", 8192}};
  const auto a = run_bench(corpus, cfg);
  const auto b = run_bench(corpus, cfg);
  EXPECT_EQ(without_wall_clock(bench_csv(a, false)), without_wall_clock(bench_csv(b, false)));
  for (std::size_t i = 1; i < a.size(); ++i) EXPECT_GE(a[i].flops_units, a[i - 1].flops_units);
  for (const auto& r : a) EXPECT_EQ(r.finished, r.requests);
}

TEST(Bench, ToolCallSweepDirection) {
  BenchConfig cfg;
  cfg.thresholds = {1, kNoPruning};
  cfg.tool_calls = {1, 5, 10, 30};
  cfg.model = Json{{"position_limit", 8192}};
  const auto rows = run_bench({}, cfg);
  ASSERT_EQ(rows.size(), 8u);
  // Attention cost grows more slowly with the number of calls when pruning.
  auto flops = [&](int calls, int threshold) {
    for (const auto& r : rows) {
      if (r.tool_calls == calls && r.threshold == threshold) return static_cast<double>(r.flops_units);
    }
    return 0.0;
  };
  const double pruned_growth = flops(30, 1) / flops(1, 1);
  const double full_growth = flops(30, kNoPruning) / flops(1, kNoPruning);
  EXPECT_LT(pruned_growth, full_growth);
}

TEST(Verify, AllSuitesPass) {
  for (const auto& s : run_verify(3, 4)) EXPECT_TRUE(s.passed) << s.name << ": " << s.detail;
}
