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
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "threadrun/paged_kv.hpp"
#include "threadrun/structure_tracker.hpp"
#include "threadrun/thread_schema.hpp"
#include "threadrun/tokenizer.hpp"

namespace threadrun {

struct ModelConfig {
  int layers = 2;
  int heads = 4;
  int head_dim = 16;
  int vocab = 512;
  int position_limit = 256;
  double rope_base = 10000.0;
  std::uint64_t seed = 0;
  std::string precision = "fp32";

  int model_dim() const { return heads * head_dim; }
  KvLayout kv_layout() const { return {layers, model_dim()}; }

  // {layers, heads, head_dim, vocab, position_limit, rope_base, seed, precision}
  Json to_json() const;
  static ModelConfig from_json(const Json& j);
  void validate() const;
};

// Masked greedy choice: argmax over admitted ids, ties to the lowest id. Ids
// beyond the mask are not admitted. Throws Error(kEmptyMask).
TokenId masked_argmax(std::span<const float> logits, const std::vector<bool>& mask);

// Deterministic decoder-only transformer with rotary position embeddings and
// RMSNorm, evaluated one token at a time against paged KV.
class ToyTransformer {
 public:
  explicit ToyTransformer(ModelConfig config);

  // Encodes tokens at positions start_position.. and appends one page per
  // token to `table`; attention for each token covers the pages before it plus
  // itself. Returns logits for the last token.
  // Errors: kEmptyExtend, kPositionOverflow, kOutOfPages (nothing allocated).
  std::vector<float> extend(std::span<const TokenId> tokens, std::int64_t start_position,
                            PageTable& table, PagePool& pool) const;
  std::vector<float> prefill(std::span<const TokenId> tokens, PageTable& table,
                             PagePool& pool) const;
  std::vector<float> decode_step(TokenId token, std::int64_t position, PageTable& table,
                                 PagePool& pool) const;

  const ModelConfig& config() const { return config_; }

  // Exposed for reference implementations in tests.
  struct LayerWeights {
    std::vector<float> attn_norm, wq, wk, wv, wo, mlp_norm, w_up, w_down;
  };
  const std::vector<float>& embedding() const { return embedding_; }
  const std::vector<LayerWeights>& layers() const { return layers_; }
  const std::vector<float>& final_norm() const { return final_norm_; }
  const std::vector<float>& lm_head() const { return lm_head_; }
  int ffn_dim() const { return ffn_dim_; }

  static void apply_rope(std::span<float> vec, int heads, int head_dim, std::int64_t position,
                         double base);

 private:
  void forward_token(TokenId token, std::int64_t position, const PageTable& table,
                     PagePool& pool, std::vector<float>* logits) const;

  ModelConfig config_;
  int ffn_dim_;
  std::vector<float> embedding_;
  std::vector<LayerWeights> layers_;
  std::vector<float> final_norm_;
  std::vector<float> lm_head_;
};

// Token stream for the scripted backend, split at tool_result values: segment
// i is emitted verbatim, then the runtime inserts a tool response, then
// segment i+1 follows.
struct Script {
  std::vector<std::vector<TokenId>> segments;
  // Scripted tool outputs, one per tool_result slot.
  std::vector<Json> tool_responses;
  std::vector<std::string> tool_names;

  static Script from_tree(const ReasoningTree& tree, const Tokenizer& tok = Tokenizer::instance());
  // Trace replay format {script: [ids], tool_responses: {call_index: json}}.
  static Script from_trace_json(const Json& trace, const Tokenizer& tok = Tokenizer::instance());
  Json to_trace_json() const;
  std::size_t emitted_token_count() const;
};

struct SessionOptions {
  RequestId request = 0;
  std::string prompt;
  std::vector<std::string> tool_names;
  std::shared_ptr<const Script> script;
};

class ModelSession {
 public:
  virtual ~ModelSession() = default;

  // Same contract as ToyTransformer::extend. Backends without numerics only
  // allocate pages and return empty logits.
  virtual std::vector<float> extend(std::span<const TokenId> tokens, std::int64_t start_position,
                                    PageTable& table, PagePool& pool) = 0;
  // Picks the next token under the tracker's mask.
  virtual TokenId choose(std::span<const float> logits, const StructureTracker& tracker) = 0;
  virtual void on_tool_result_inserted() {}
};

class ModelBackend {
 public:
  virtual ~ModelBackend() = default;
  virtual const ModelConfig& config() const = 0;
  virtual KvLayout kv_layout() const = 0;
  virtual std::unique_ptr<ModelSession> open_session(const SessionOptions& options) const = 0;
  virtual std::string name() const = 0;
};

// Greedy constrained decoding with the toy transformer.
class TransformerBackend : public ModelBackend {
 public:
  explicit TransformerBackend(ModelConfig config);

  const ModelConfig& config() const override { return model_->config(); }
  KvLayout kv_layout() const override { return model_->config().kv_layout(); }
  std::unique_ptr<ModelSession> open_session(const SessionOptions& options) const override;
  std::string name() const override { return "toy"; }
  std::shared_ptr<const ToyTransformer> model() const { return model_; }

 private:
  std::shared_ptr<const ToyTransformer> model_;
};

// Replays scripts verbatim. With `teacher` set, KV states are computed by the
// transformer (teacher forcing); otherwise pages carry no data.
class ScriptedBackend : public ModelBackend {
 public:
  struct Options {
    ModelConfig config;
    std::shared_ptr<const ToyTransformer> teacher;
    // Artificial cost per extend call.
    int forward_latency_us = 0;
    // Used when a request arrives without a script: a random tree seeded by
    // the prompt, using the request's tools.
    TreeGenOptions fallback_tree;
  };

  explicit ScriptedBackend(Options options);

  const ModelConfig& config() const override { return options_.config; }
  KvLayout kv_layout() const override;
  std::unique_ptr<ModelSession> open_session(const SessionOptions& options) const override;
  std::string name() const override { return "scripted"; }

 private:
  Options options_;
};

// Builds a backend from {"kind": "toy"|"scripted", ...ModelConfig fields,
// "teacher": bool, "forward_latency_us": int}.
std::shared_ptr<ModelBackend> make_backend(const Json& config);

}  // namespace threadrun
