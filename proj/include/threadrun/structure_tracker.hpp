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
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "threadrun/thread_schema.hpp"
#include "threadrun/tokenizer.hpp"

namespace threadrun {

enum class EventKind {
  kTaskOpened,
  kThoughtClosed,
  kToolParamsReady,
  kToolResultSlotOpened,
  kSubtaskListOpened,
  kSubtaskListClosed,
  kTaskClosed,
  kDone,
};

std::string_view event_kind_name(EventKind kind);

struct EventPayload {
  // ToolParamsReady: the parameters object. SubtaskListClosed: the whole
  // "subtasks":[...] range. ToolResultSlotOpened: the parameters object.
  TokenSpan span;
  // Raw bytes of the parameters object for the tool events.
  std::string text;
  std::string tool_name;
};

struct StructureEvent {
  EventKind kind;
  std::int64_t offset = 0;
  int depth = 0;
  std::optional<EventPayload> payload;

  Json to_json() const;
};

// Incremental pushdown recognizer for Thread-2 documents. Key positions of the
// task and tooluse objects are token-level (only the single-token key pieces
// are admitted there); everything else is recognized byte by byte, so string
// and free JSON content may be spelled with any tokens.
//
// Offsets count tokens consumed by this tracker, starting at 0.
class StructureTracker {
 public:
  explicit StructureTracker(std::vector<std::string> tool_names = {},
                            int depth_limit = kDefaultDepthLimit,
                            const Tokenizer& tok = Tokenizer::instance());

  // Throws Error(kRejected) if the token is not admitted. The tracker is left
  // unchanged in that case.
  std::vector<StructureEvent> feed(TokenId token);

  bool admits(TokenId token) const;
  // One entry per tokenizer id.
  std::vector<bool> allowed_mask() const;
  std::vector<TokenId> allowed_tokens() const;

  int current_depth() const;
  std::int64_t emitted() const { return emitted_; }
  bool done() const;
  // 0 once the document is complete.
  std::size_t stack_depth() const { return done() ? 0 : frames_.size(); }
  int depth_limit() const { return depth_limit_; }
  const Tokenizer& tokenizer() const { return *tok_; }

 private:
  enum class FrameKind : std::uint8_t { kDoc, kList, kTask, kTool };

  struct Frame {
    FrameKind kind;
    std::uint8_t stage;
    int depth;
    // List: offset of the "subtasks" key token.
    std::int64_t start;
  };

  enum class JsonKind : std::uint8_t { kObject, kArray };
  struct JsonFrame {
    JsonKind kind;
    std::uint8_t stage;
  };

  enum class StringRole : std::uint8_t { kThought, kConclusion, kToolName, kValue, kKey };
  enum class Lex : std::uint8_t { kNone, kString, kNumber, kLiteral };

  bool apply(TokenId token, std::vector<StructureEvent>& events);
  bool at_key_slot() const;
  bool apply_key(TokenId token, std::vector<StructureEvent>& events);
  bool step(unsigned char c, std::vector<StructureEvent>& events);
  bool step_string(unsigned char c, std::vector<StructureEvent>& events);
  bool step_json(unsigned char c, std::vector<StructureEvent>& events);
  bool step_schema(unsigned char c, std::vector<StructureEvent>& events);
  bool start_value(unsigned char c, std::vector<StructureEvent>& events);
  bool number_continues(unsigned char c);
  bool number_accepting() const;
  void string_done(std::vector<StructureEvent>& events);
  void value_done(std::vector<StructureEvent>& events);
  void emit(std::vector<StructureEvent>& events, EventKind kind, int depth,
            std::optional<EventPayload> payload = std::nullopt) const;
  Frame& top() { return frames_.back(); }
  const Frame& top() const { return frames_.back(); }
  std::string describe_expected() const;

  const Tokenizer* tok_;
  std::shared_ptr<const std::vector<std::string>> tool_names_;
  int depth_limit_;

  std::vector<Frame> frames_;
  std::vector<JsonFrame> json_;
  std::int64_t emitted_ = 0;

  Lex lex_ = Lex::kNone;
  StringRole role_ = StringRole::kValue;
  // 0: plain, 1: after backslash, 2..5: hex digits still expected + 1.
  std::uint8_t escape_ = 0;
  std::uint32_t string_len_ = 0;
  std::uint8_t utf8_need_ = 0;
  std::uint8_t utf8_lo_ = 0x80;
  std::uint8_t utf8_hi_ = 0xBF;
  std::uint8_t low_surrogate_ = 0;
  std::uint32_t hex_accum_ = 0;
  int mantissa_digits_ = 0;
  int exponent_digits_ = 0;
  std::string name_prefix_;
  std::uint8_t number_state_ = 0;
  std::string_view literal_rest_;

  bool recording_ = false;
  std::string recorded_;
  std::int64_t recorded_start_ = 0;
  std::string current_tool_;
  std::string current_params_;
  TokenSpan current_params_span_;
};

}  // namespace threadrun
