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

#include "threadrun/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <thread>

#include "threadrun/error.hpp"

namespace threadrun {

namespace {

void rms_norm(std::span<const float> x, std::span<const float> gain, std::span<float> out) {
  double sum = 0.0;
  for (float v : x) sum += static_cast<double>(v) * v;
  const float scale = static_cast<float>(1.0 / std::sqrt(sum / x.size() + 1e-6));
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * scale * gain[i];
}

// out[j] = sum_i x[i] * w[i * cols + j]
void matvec(std::span<const float> x, const std::vector<float>& w, std::size_t cols,
            std::span<float> out) {
  std::fill(out.begin(), out.end(), 0.0F);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float xi = x[i];
    const float* row = w.data() + i * cols;
    for (std::size_t j = 0; j < cols; ++j) out[j] += xi * row[j];
  }
}

std::vector<float> random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols,
                                 double scale) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<float> m(rows * cols);
  for (auto& v : m) v = static_cast<float>(normal(rng) * scale);
  return m;
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

void check_extend(std::size_t n, std::int64_t start_position, const ModelConfig& config,
                  const PagePool& pool) {
  if (n == 0) throw Error(ErrorCode::kEmptyExtend, "no tokens to encode");
  if (start_position < 0 ||
      start_position + static_cast<std::int64_t>(n) > config.position_limit) {
    throw Error(ErrorCode::kPositionOverflow,
                "positions [" + std::to_string(start_position) + ", " +
                    std::to_string(start_position + static_cast<std::int64_t>(n)) +
                    ") exceed limit " + std::to_string(config.position_limit));
  }
  if (pool.free_count() < n) {
    throw Error(ErrorCode::kOutOfPages, "needed " + std::to_string(n) + ", available " +
                                            std::to_string(pool.free_count()));
  }
}

class TransformerSession : public ModelSession {
 public:
  explicit TransformerSession(std::shared_ptr<const ToyTransformer> model)
      : model_(std::move(model)) {}

  std::vector<float> extend(std::span<const TokenId> tokens, std::int64_t start_position,
                            PageTable& table, PagePool& pool) override {
    return model_->extend(tokens, start_position, table, pool);
  }

  TokenId choose(std::span<const float> logits, const StructureTracker& tracker) override {
    return masked_argmax(logits, tracker.allowed_mask());
  }

 private:
  std::shared_ptr<const ToyTransformer> model_;
};

class ScriptedSession : public ModelSession {
 public:
  ScriptedSession(std::shared_ptr<const Script> script, const ScriptedBackend::Options& options)
      : script_(std::move(script)), options_(options) {}

  std::vector<float> extend(std::span<const TokenId> tokens, std::int64_t start_position,
                            PageTable& table, PagePool& pool) override {
    if (options_.forward_latency_us > 0) {
      std::this_thread::sleep_for(std::chrono::microseconds(options_.forward_latency_us));
    }
    if (options_.teacher) return options_.teacher->extend(tokens, start_position, table, pool);
    check_extend(tokens.size(), start_position, options_.config, pool);
    auto pages = pool.alloc(table.request, tokens.size());
    table.pages.insert(table.pages.end(), pages.begin(), pages.end());
    return {};
  }

  TokenId choose(std::span<const float>, const StructureTracker& tracker) override {
    const auto& segments = script_->segments;
    if (segment_ >= segments.size() || position_ >= segments[segment_].size()) {
      throw Error(ErrorCode::kScriptExhausted,
                  "script segment " + std::to_string(segment_) + " has no token left");
    }
    const TokenId token = segments[segment_][position_];
    if (!tracker.admits(token)) {
      throw Error(ErrorCode::kRejected, "scripted token " + std::to_string(token) +
                                            " not admitted at offset " +
                                            std::to_string(tracker.emitted()));
    }
    ++position_;
    return token;
  }

  void on_tool_result_inserted() override {
    ++segment_;
    position_ = 0;
  }

 private:
  std::shared_ptr<const Script> script_;
  ScriptedBackend::Options options_;
  std::size_t segment_ = 0;
  std::size_t position_ = 0;
};

void collect_tool_slots(const TaskNode& node, std::vector<const TaskNode*>& out) {
  if (node.tooluse) out.push_back(&node);
  for (const auto& c : node.subtasks) collect_tool_slots(c, out);
}

Script split_script(const std::vector<TokenId>& tokens, const ReasoningTree& tree) {
  std::vector<const TaskNode*> slots;
  for (const auto& t : tree.root_tasks) collect_tool_slots(t, slots);
  Script script;
  std::int64_t cursor = 0;
  for (const TaskNode* node : slots) {
    const TokenSpan r = *node->tool_result_span;
    script.segments.emplace_back(tokens.begin() + cursor, tokens.begin() + r.start);
    script.tool_responses.push_back(node->tooluse->tool_result);
    cursor = r.end;
    const auto& name = node->tooluse->tool_name;
    if (std::find(script.tool_names.begin(), script.tool_names.end(), name) ==
        script.tool_names.end()) {
      script.tool_names.push_back(name);
    }
  }
  script.segments.emplace_back(tokens.begin() + cursor, tokens.end());
  return script;
}

}  // namespace

Json ModelConfig::to_json() const {
  return Json{{"layers", layers},           {"heads", heads},
              {"head_dim", head_dim},       {"vocab", vocab},
              {"position_limit", position_limit}, {"rope_base", rope_base},
              {"seed", seed},               {"precision", precision}};
}

ModelConfig ModelConfig::from_json(const Json& j) {
  ModelConfig c;
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.head_dim = j.value("head_dim", c.head_dim);
  c.vocab = j.value("vocab", c.vocab);
  c.position_limit = j.value("position_limit", c.position_limit);
  c.rope_base = j.value("rope_base", c.rope_base);
  c.seed = j.value("seed", c.seed);
  c.precision = j.value("precision", c.precision);
  c.validate();
  return c;
}

void ModelConfig::validate() const {
  auto bad = [](const std::string& what) { throw Error(ErrorCode::kInvalidArgument, what); };
  if (layers < 0 || heads < 1 || head_dim < 2 || head_dim % 2 != 0) {
    bad("model needs heads >= 1, an even head_dim and layers >= 0");
  }
  if (vocab < Tokenizer::instance().vocab_size()) {
    bad("vocab must cover the tokenizer (" + std::to_string(Tokenizer::instance().vocab_size()) +
        " ids)");
  }
  if (position_limit < 8) bad("position_limit must be >= 8");
  if (precision != "fp32") bad("only fp32 precision is supported");
}

TokenId masked_argmax(std::span<const float> logits, const std::vector<bool>& mask) {
  TokenId best = -1;
  float best_value = 0.0F;
  const std::size_t n = std::min(logits.size(), mask.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    if (best < 0 || logits[i] > best_value) {
      best = static_cast<TokenId>(i);
      best_value = logits[i];
    }
  }
  if (best < 0) throw Error(ErrorCode::kEmptyMask, "no admitted token");
  return best;
}

ToyTransformer::ToyTransformer(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const std::size_t d = config_.model_dim();
  ffn_dim_ = static_cast<int>(2 * d);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::mt19937_64 rng(config_.seed);
  embedding_ = random_matrix(rng, config_.vocab, d, 1.0);
  for (int l = 0; l < config_.layers; ++l) {
    LayerWeights w;
    w.attn_norm.assign(d, 1.0F);
    w.wq = random_matrix(rng, d, d, scale);
    w.wk = random_matrix(rng, d, d, scale);
    w.wv = random_matrix(rng, d, d, scale);
    w.wo = random_matrix(rng, d, d, scale);
    w.mlp_norm.assign(d, 1.0F);
    w.w_up = random_matrix(rng, d, ffn_dim_, scale);
    w.w_down = random_matrix(rng, ffn_dim_, d, 1.0 / std::sqrt(static_cast<double>(ffn_dim_)));
    layers_.push_back(std::move(w));
  }
  final_norm_.assign(d, 1.0F);
  lm_head_ = random_matrix(rng, d, config_.vocab, scale);
}

void ToyTransformer::apply_rope(std::span<float> vec, int heads, int head_dim,
                                std::int64_t position, double base) {
  const int half = head_dim / 2;
  for (int i = 0; i < half; ++i) {
    const double inv_freq = std::pow(base, -2.0 * i / head_dim);
    const double angle = static_cast<double>(position) * inv_freq;
    const float c = static_cast<float>(std::cos(angle));
    const float s = static_cast<float>(std::sin(angle));
    for (int h = 0; h < heads; ++h) {
      float* x = vec.data() + static_cast<std::size_t>(h) * head_dim;
      const float x1 = x[i];
      const float x2 = x[i + half];
      x[i] = x1 * c - x2 * s;
      x[i + half] = x1 * s + x2 * c;
    }
  }
}

void ToyTransformer::forward_token(TokenId token, std::int64_t position, const PageTable& table,
                                   PagePool& pool, std::vector<float>* logits) const {
  const std::size_t d = config_.model_dim();
  const int heads = config_.heads;
  const int hd = config_.head_dim;
  if (token < 0 || token >= config_.vocab) {
    throw Error(ErrorCode::kInvalidArgument, "token id out of model vocab");
  }
  std::vector<float> x(embedding_.begin() + token * d, embedding_.begin() + (token + 1) * d);
  std::vector<float> h(d), q(d), attn(d), proj(d), up(ffn_dim_);
  std::vector<float> scores(table.size());
  const float inv_sqrt = 1.0F / std::sqrt(static_cast<float>(hd));
  const PageId self = table.pages.back();

  for (int l = 0; l < config_.layers; ++l) {
    const LayerWeights& w = layers_[l];
    auto page = pool.page_data(self);
    std::span<float> k = page.subspan(static_cast<std::size_t>(l) * 2 * d, d);
    std::span<float> v = page.subspan((static_cast<std::size_t>(l) * 2 + 1) * d, d);

    rms_norm(x, w.attn_norm, h);
    matvec(h, w.wq, d, q);
    matvec(h, w.wk, d, k);
    matvec(h, w.wv, d, v);
    apply_rope(q, heads, hd, position, config_.rope_base);
    apply_rope(k, heads, hd, position, config_.rope_base);

    std::fill(attn.begin(), attn.end(), 0.0F);
    for (int head = 0; head < heads; ++head) {
      const std::size_t off = static_cast<std::size_t>(head) * hd;
      float max_score = -INFINITY;
      for (std::size_t j = 0; j < table.size(); ++j) {
        const float* kj = pool.page_data(table.pages[j]).data() + l * 2 * d + off;
        float dot = 0.0F;
        for (int t = 0; t < hd; ++t) dot += q[off + t] * kj[t];
        scores[j] = dot * inv_sqrt;
        max_score = std::max(max_score, scores[j]);
      }
      float denom = 0.0F;
      for (auto& s : scores) {
        s = std::exp(s - max_score);
        denom += s;
      }
      for (std::size_t j = 0; j < table.size(); ++j) {
        const float* vj = pool.page_data(table.pages[j]).data() + (l * 2 + 1) * d + off;
        const float weight = scores[j] / denom;
        for (int t = 0; t < hd; ++t) attn[off + t] += weight * vj[t];
      }
    }
    matvec(attn, w.wo, d, proj);
    for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];

    rms_norm(x, w.mlp_norm, h);
    matvec(h, w.w_up, ffn_dim_, up);
    for (auto& u : up) u = u / (1.0F + std::exp(-u));  // SiLU
    matvec(up, w.w_down, d, proj);
    for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];
  }

  if (logits != nullptr) {
    rms_norm(x, final_norm_, h);
    logits->assign(config_.vocab, 0.0F);
    matvec(h, lm_head_, config_.vocab, *logits);
  }
}

std::vector<float> ToyTransformer::extend(std::span<const TokenId> tokens,
                                          std::int64_t start_position, PageTable& table,
                                          PagePool& pool) const {
  check_extend(tokens.size(), start_position, config_, pool);
  auto pages = pool.alloc(table.request, tokens.size());
  std::vector<float> logits;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    table.pages.push_back(pages[i]);
    const bool last = i + 1 == tokens.size();
    forward_token(tokens[i], start_position + static_cast<std::int64_t>(i), table, pool,
                  last ? &logits : nullptr);
  }
  return logits;
}

std::vector<float> ToyTransformer::prefill(std::span<const TokenId> tokens, PageTable& table,
                                           PagePool& pool) const {
  if (!table.empty()) throw Error(ErrorCode::kInvalidArgument, "prefill needs an empty table");
  return extend(tokens, 0, table, pool);
}

std::vector<float> ToyTransformer::decode_step(TokenId token, std::int64_t position,
                                               PageTable& table, PagePool& pool) const {
  const TokenId one[] = {token};
  return extend(one, position, table, pool);
}

Script Script::from_tree(const ReasoningTree& tree, const Tokenizer& tok) {
  ReasoningTree copy = tree;
  const std::string text = serialize_tree(copy, tok);
  return split_script(tok.tokenize(text), copy);
}

Script Script::from_trace_json(const Json& trace, const Tokenizer& tok) {
  if (!trace.is_object() || !trace.contains("script") || !trace["script"].is_array()) {
    throw Error(ErrorCode::kInvalidArgument, "trace needs a 'script' array of token ids");
  }
  const auto tokens = trace["script"].get<std::vector<TokenId>>();
  for (TokenId id : tokens) {
    if (id < 0 || id >= tok.vocab_size() || tok.is_special(id)) {
      throw Error(ErrorCode::kInvalidArgument, "bad token id in script: " + std::to_string(id));
    }
  }
  const std::string text = tok.detokenize(tokens);
  const ReasoningTree tree = parse_tree(text, tok);
  if (tok.tokenize(text) != tokens) {
    throw Error(ErrorCode::kInvalidArgument, "script is not in canonical tokenization");
  }
  Script script = split_script(tokens, tree);
  if (trace.contains("tool_responses")) {
    for (const auto& [key, value] : trace["tool_responses"].items()) {
      const std::size_t index = std::stoul(key);
      if (index >= script.tool_responses.size()) {
        throw Error(ErrorCode::kInvalidArgument, "tool response for unknown call " + key);
      }
      script.tool_responses[index] = value;
    }
  }
  return script;
}

Json Script::to_trace_json() const {
  Json tokens = Json::array();
  for (std::size_t i = 0; i < segments.size(); ++i) {
    for (TokenId id : segments[i]) tokens.push_back(id);
    if (i < tool_responses.size()) {
      for (TokenId id : Tokenizer::instance().tokenize(tool_responses[i].dump())) {
        tokens.push_back(id);
      }
    }
  }
  Json responses = Json::object();
  for (std::size_t i = 0; i < tool_responses.size(); ++i) {
    responses[std::to_string(i)] = tool_responses[i];
  }
  return Json{{"script", tokens}, {"tool_responses", responses}};
}

std::size_t Script::emitted_token_count() const {
  std::size_t n = 0;
  for (const auto& s : segments) n += s.size();
  return n;
}

TransformerBackend::TransformerBackend(ModelConfig config)
    : model_(std::make_shared<const ToyTransformer>(std::move(config))) {}

std::unique_ptr<ModelSession> TransformerBackend::open_session(const SessionOptions&) const {
  return std::make_unique<TransformerSession>(model_);
}

ScriptedBackend::ScriptedBackend(Options options) : options_(std::move(options)) {
  if (options_.teacher) options_.config = options_.teacher->config();
  options_.config.validate();
}

KvLayout ScriptedBackend::kv_layout() const {
  return options_.teacher ? options_.teacher->config().kv_layout() : KvLayout{};
}

std::unique_ptr<ModelSession> ScriptedBackend::open_session(const SessionOptions& options) const {
  std::shared_ptr<const Script> script = options.script;
  if (!script) {
    TreeGenOptions gen = options_.fallback_tree;
    gen.tool_names = options.tool_names;
    if (gen.tool_names.empty()) gen.tool_prob = 0.0;
    script = std::make_shared<const Script>(
        Script::from_tree(random_tree(fnv1a(options.prompt), gen)));
  }
  return std::make_unique<ScriptedSession>(std::move(script), options_);
}

std::shared_ptr<ModelBackend> make_backend(const Json& config) {
  const std::string kind = config.value("kind", "scripted");
  ModelConfig model = ModelConfig::from_json(config);
  if (kind == "toy") return std::make_shared<TransformerBackend>(model);
  if (kind != "scripted") throw Error(ErrorCode::kInvalidArgument, "unknown model kind " + kind);
  ScriptedBackend::Options options;
  options.config = model;
  if (config.value("teacher", false)) options.teacher = std::make_shared<const ToyTransformer>(model);
  options.forward_latency_us = config.value("forward_latency_us", 0);
  options.fallback_tree.max_depth = config.value("fallback_depth", 3);
  options.fallback_tree.max_branching = config.value("fallback_branching", 2);
  options.fallback_tree.tool_prob = config.value("fallback_tool_prob", 0.5);
  return std::make_shared<ScriptedBackend>(options);
}

}  // namespace threadrun
