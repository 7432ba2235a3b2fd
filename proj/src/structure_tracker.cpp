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

#include "threadrun/structure_tracker.hpp"

#include <algorithm>

#include "threadrun/error.hpp"

namespace threadrun {

namespace {

// Doc stages.
constexpr std::uint8_t kDocStart = 0;  // key slot: document opener
constexpr std::uint8_t kDocAfterList = 1;
constexpr std::uint8_t kDocDone = 2;

// List stages.
constexpr std::uint8_t kListExpectItem = 0;
constexpr std::uint8_t kListAfterItem = 1;

// Task stages; the *Key stages are token-level key slots.
constexpr std::uint8_t kTaskKeyThought = 0;
constexpr std::uint8_t kTaskThoughtValue = 1;
constexpr std::uint8_t kTaskAfterThought = 2;
constexpr std::uint8_t kTaskKeyAfterThought = 3;
constexpr std::uint8_t kTaskTooluseValue = 4;
constexpr std::uint8_t kTaskAfterTooluse = 5;
constexpr std::uint8_t kTaskKeyAfterTooluse = 6;
constexpr std::uint8_t kTaskSubtasksValue = 7;
constexpr std::uint8_t kTaskAfterSubtasks = 8;
constexpr std::uint8_t kTaskKeyConclusion = 9;
constexpr std::uint8_t kTaskConclusionValue = 10;
constexpr std::uint8_t kTaskAfterConclusion = 11;

// Tool stages.
constexpr std::uint8_t kToolKeyName = 0;
constexpr std::uint8_t kToolNameValue = 1;
constexpr std::uint8_t kToolAfterName = 2;
constexpr std::uint8_t kToolKeyParams = 3;
constexpr std::uint8_t kToolParamsValue = 4;
constexpr std::uint8_t kToolAfterParams = 5;
constexpr std::uint8_t kToolKeyResult = 6;
constexpr std::uint8_t kToolResultValue = 7;
constexpr std::uint8_t kToolAfterResult = 8;

// Free JSON stages.
constexpr std::uint8_t kObjFirst = 0;  // '"' or '}'
constexpr std::uint8_t kObjKey = 1;    // '"'
constexpr std::uint8_t kObjColon = 2;
constexpr std::uint8_t kObjValue = 3;
constexpr std::uint8_t kObjAfter = 4;  // ',' or '}'
constexpr std::uint8_t kArrFirst = 0;  // value or ']'
constexpr std::uint8_t kArrValue = 1;
constexpr std::uint8_t kArrAfter = 2;  // ',' or ']'

constexpr std::size_t kMaxJsonNesting = 32;

// Number sub-states; the limits keep every admitted number representable by
// common JSON parsers.
constexpr std::uint8_t kNumSign = 0;
constexpr std::uint8_t kNumZero = 1;
constexpr std::uint8_t kNumInt = 2;
constexpr std::uint8_t kNumDot = 3;
constexpr std::uint8_t kNumFrac = 4;
constexpr std::uint8_t kNumExp = 5;
constexpr std::uint8_t kNumExpSign = 6;
constexpr std::uint8_t kNumExpDigits = 7;
constexpr int kMaxMantissaDigits = 20;
constexpr int kMaxExponentDigits = 2;

bool is_digit(unsigned char c) { return c >= '0' && c <= '9'; }
bool is_hex(unsigned char c) {
  return is_digit(c) || (c >= 'a' && c <= 'f') || (c >= 'A' && c <= 'F');
}
int hex_value(unsigned char c) {
  if (is_digit(c)) return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  return c - 'A' + 10;
}

}  // namespace

std::string_view event_kind_name(EventKind kind) {
  switch (kind) {
    case EventKind::kTaskOpened: return "TaskOpened";
    case EventKind::kThoughtClosed: return "ThoughtClosed";
    case EventKind::kToolParamsReady: return "ToolParamsReady";
    case EventKind::kToolResultSlotOpened: return "ToolResultSlotOpened";
    case EventKind::kSubtaskListOpened: return "SubtaskListOpened";
    case EventKind::kSubtaskListClosed: return "SubtaskListClosed";
    case EventKind::kTaskClosed: return "TaskClosed";
    case EventKind::kDone: return "Done";
  }
  return "Unknown";
}

Json StructureEvent::to_json() const {
  Json j{{"kind", event_kind_name(kind)}, {"offset", offset}, {"depth", depth}};
  if (payload) {
    Json p{{"start", payload->span.start}, {"end", payload->span.end}};
    if (!payload->text.empty()) p["text"] = payload->text;
    if (!payload->tool_name.empty()) p["tool_name"] = payload->tool_name;
    j["payload"] = std::move(p);
  }
  return j;
}

StructureTracker::StructureTracker(std::vector<std::string> tool_names, int depth_limit,
                                   const Tokenizer& tok)
    : tok_(&tok),
      tool_names_(std::make_shared<const std::vector<std::string>>(std::move(tool_names))),
      depth_limit_(depth_limit) {
  if (depth_limit < 1) throw Error(ErrorCode::kInvalidArgument, "depth_limit must be >= 1");
  frames_.push_back({FrameKind::kDoc, kDocStart, 0, 0});
}

std::vector<StructureEvent> StructureTracker::feed(TokenId token) {
  StructureTracker next(*this);
  std::vector<StructureEvent> events;
  if (!next.apply(token, events)) {
    std::string piece = (token >= 0 && token < tok_->vocab_size()) ? tok_->piece(token) : "";
    throw Error(ErrorCode::kRejected, "token " + std::to_string(token) + " " +
                                          Json(piece).dump(-1, ' ', false,
                                                           Json::error_handler_t::replace) +
                                          " at offset " + std::to_string(emitted_) +
                                          "; expected " + describe_expected());
  }
  *this = std::move(next);
  return events;
}

bool StructureTracker::admits(TokenId token) const {
  StructureTracker copy(*this);
  std::vector<StructureEvent> events;
  return copy.apply(token, events);
}

std::vector<bool> StructureTracker::allowed_mask() const {
  std::vector<bool> mask(tok_->vocab_size(), false);
  for (TokenId id = 0; id < tok_->vocab_size(); ++id) mask[id] = admits(id);
  return mask;
}

std::vector<TokenId> StructureTracker::allowed_tokens() const {
  std::vector<TokenId> out;
  for (TokenId id = 0; id < tok_->vocab_size(); ++id) {
    if (admits(id)) out.push_back(id);
  }
  return out;
}

int StructureTracker::current_depth() const {
  for (auto it = frames_.rbegin(); it != frames_.rend(); ++it) {
    if (it->kind == FrameKind::kTask) return it->depth;
  }
  return 0;
}

bool StructureTracker::done() const {
  return frames_.size() == 1 && frames_[0].stage == kDocDone;
}

std::string StructureTracker::describe_expected() const {
  std::string out;
  int shown = 0;
  int total = 0;
  for (TokenId id = 0; id < tok_->vocab_size(); ++id) {
    if (!admits(id)) continue;
    ++total;
    if (shown < 8) {
      if (shown > 0) out += ' ';
      out += Json(tok_->piece(id)).dump(-1, ' ', false, Json::error_handler_t::replace);
      ++shown;
    }
  }
  if (total == 0) return "nothing";
  if (total > shown) out += " ... (" + std::to_string(total) + " tokens)";
  return out;
}

void StructureTracker::emit(std::vector<StructureEvent>& events, EventKind kind, int depth,
                            std::optional<EventPayload> payload) const {
  events.push_back({kind, emitted_, depth, std::move(payload)});
}

bool StructureTracker::at_key_slot() const {
  if (lex_ != Lex::kNone || !json_.empty()) return false;
  const Frame& f = top();
  switch (f.kind) {
    case FrameKind::kDoc: return f.stage == kDocStart;
    case FrameKind::kTask:
      return f.stage == kTaskKeyThought || f.stage == kTaskKeyAfterThought ||
             f.stage == kTaskKeyAfterTooluse || f.stage == kTaskKeyConclusion;
    case FrameKind::kTool:
      return f.stage == kToolKeyName || f.stage == kToolKeyParams || f.stage == kToolKeyResult;
    case FrameKind::kList: return false;
  }
  return false;
}

bool StructureTracker::apply(TokenId token, std::vector<StructureEvent>& events) {
  if (token < 0 || token >= tok_->vocab_size() || tok_->is_special(token)) return false;
  if (at_key_slot()) {
    if (!apply_key(token, events)) return false;
  } else {
    const std::string& piece = tok_->piece(token);
    for (std::size_t i = 0; i < piece.size(); ++i) {
      if (at_key_slot()) return false;  // key slots start at token boundaries
      if (!step(static_cast<unsigned char>(piece[i]), events)) return false;
    }
  }
  ++emitted_;
  return true;
}

bool StructureTracker::apply_key(TokenId token, std::vector<StructureEvent>& events) {
  Frame& f = top();
  const bool tools = !tool_names_->empty();
  const bool can_nest = f.depth + 1 < depth_limit_;
  switch (f.kind) {
    case FrameKind::kDoc:
      if (token != Tokenizer::kDocOpen) return false;
      f.stage = kDocAfterList;
      frames_.push_back({FrameKind::kList, kListExpectItem, 0, -1});
      return true;
    case FrameKind::kTask:
      if (f.stage == kTaskKeyThought) {
        if (token != Tokenizer::kThoughtKey) return false;
        f.stage = kTaskThoughtValue;
        return true;
      }
      if (token == Tokenizer::kTooluseKey && tools && f.stage == kTaskKeyAfterThought) {
        f.stage = kTaskTooluseValue;
        return true;
      }
      if (token == Tokenizer::kSubtasksKey && can_nest &&
          (f.stage == kTaskKeyAfterThought || f.stage == kTaskKeyAfterTooluse)) {
        f.stage = kTaskSubtasksValue;
        f.start = emitted_;
        return true;
      }
      if (token == Tokenizer::kConclusionKey) {
        f.stage = kTaskConclusionValue;
        return true;
      }
      return false;
    case FrameKind::kTool:
      if (f.stage == kToolKeyName && token == Tokenizer::kToolNameKey) {
        f.stage = kToolNameValue;
        return true;
      }
      if (f.stage == kToolKeyParams && token == Tokenizer::kParametersKey) {
        f.stage = kToolParamsValue;
        return true;
      }
      if (f.stage == kToolKeyResult && token == Tokenizer::kToolResultKey) {
        f.stage = kToolResultValue;
        emit(events, EventKind::kToolResultSlotOpened, f.depth,
             EventPayload{current_params_span_, current_params_, current_tool_});
        return true;
      }
      return false;
    case FrameKind::kList: return false;
  }
  return false;
}

bool StructureTracker::step(unsigned char c, std::vector<StructureEvent>& events) {
  if (recording_) recorded_.push_back(static_cast<char>(c));
  switch (lex_) {
    case Lex::kString: return step_string(c, events);
    case Lex::kLiteral:
      if (literal_rest_.empty() || static_cast<unsigned char>(literal_rest_.front()) != c) {
        return false;
      }
      literal_rest_.remove_prefix(1);
      if (literal_rest_.empty()) {
        lex_ = Lex::kNone;
        value_done(events);
      }
      return true;
    case Lex::kNumber:
      if (number_continues(c)) return true;
      if (!number_accepting()) return false;
      lex_ = Lex::kNone;
      value_done(events);
      break;  // the terminator belongs to the enclosing context
    case Lex::kNone: break;
  }
  if (!json_.empty()) return step_json(c, events);
  return step_schema(c, events);
}

bool StructureTracker::step_string(unsigned char c, std::vector<StructureEvent>& events) {
  if (role_ == StringRole::kToolName) {
    if (c == '"') {
      const auto& names = *tool_names_;
      if (std::find(names.begin(), names.end(), name_prefix_) == names.end()) return false;
      lex_ = Lex::kNone;
      string_done(events);
      return true;
    }
    std::string candidate = name_prefix_ + static_cast<char>(c);
    for (const auto& name : *tool_names_) {
      if (name.compare(0, candidate.size(), candidate) == 0) {
        name_prefix_ = std::move(candidate);
        ++string_len_;
        return true;
      }
    }
    return false;
  }

  // Strings must stay valid UTF-8, and \u escapes valid UTF-16.
  if (utf8_need_ > 0) {
    if (c < utf8_lo_ || c > utf8_hi_) return false;
    --utf8_need_;
    utf8_lo_ = 0x80;
    utf8_hi_ = 0xBF;
    if (utf8_need_ == 0) ++string_len_;
    return true;
  }

  if (escape_ == 1) {
    if (low_surrogate_ != 0 && c != 'u') return false;
    switch (c) {
      case '"': case '\\': case '/': case 'b': case 'f': case 'n': case 'r': case 't':
        escape_ = 0;
        ++string_len_;
        return true;
      case 'u':
        escape_ = 5;
        hex_accum_ = 0;
        return true;
      default: return false;
    }
  }
  if (escape_ >= 2) {
    if (!is_hex(c)) return false;
    const int digit = hex_value(c);
    // A pending high surrogate must be followed by \uDC00-\uDFFF.
    if (low_surrogate_ == 1 && escape_ == 5 && digit != 0xD) return false;
    if (low_surrogate_ == 1 && escape_ == 4 && digit < 0xC) return false;
    hex_accum_ = (hex_accum_ << 4) | static_cast<std::uint32_t>(digit);
    // Reject a lone low surrogate as soon as its prefix is known.
    if (low_surrogate_ == 0 && escape_ == 4 && (hex_accum_ >> 2) == 0x37) return false;
    --escape_;
    if (escape_ == 1) {
      escape_ = 0;
      if (low_surrogate_ == 1) {
        low_surrogate_ = 0;
        ++string_len_;
      } else if (hex_accum_ >= 0xD800 && hex_accum_ <= 0xDBFF) {
        low_surrogate_ = 1;
      } else {
        ++string_len_;
      }
    }
    return true;
  }
  if (low_surrogate_ != 0) {
    if (c != '\\') return false;
    escape_ = 1;
    return true;
  }

  if (c == '"') {
    if (role_ == StringRole::kConclusion && string_len_ == 0) return false;
    lex_ = Lex::kNone;
    string_done(events);
    return true;
  }
  if (c == '\\') {
    escape_ = 1;
    return true;
  }
  if (c < 0x20) return false;
  if (c < 0x80) {
    ++string_len_;
    return true;
  }
  if (c >= 0xC2 && c <= 0xDF) {
    utf8_need_ = 1;
    utf8_lo_ = 0x80;
    utf8_hi_ = 0xBF;
  } else if (c >= 0xE0 && c <= 0xEF) {
    utf8_need_ = 2;
    utf8_lo_ = c == 0xE0 ? 0xA0 : 0x80;
    utf8_hi_ = c == 0xED ? 0x9F : 0xBF;
  } else if (c >= 0xF0 && c <= 0xF4) {
    utf8_need_ = 3;
    utf8_lo_ = c == 0xF0 ? 0x90 : 0x80;
    utf8_hi_ = c == 0xF4 ? 0x8F : 0xBF;
  } else {
    return false;
  }
  return true;
}

void StructureTracker::string_done(std::vector<StructureEvent>& events) {
  switch (role_) {
    case StringRole::kThought:
      top().stage = kTaskAfterThought;
      emit(events, EventKind::kThoughtClosed, top().depth);
      break;
    case StringRole::kConclusion:
      top().stage = kTaskAfterConclusion;
      break;
    case StringRole::kToolName:
      top().stage = kToolAfterName;
      current_tool_ = name_prefix_;
      break;
    case StringRole::kKey:
      json_.back().stage = kObjColon;
      break;
    case StringRole::kValue:
      value_done(events);
      break;
  }
}

void StructureTracker::value_done(std::vector<StructureEvent>& events) {
  if (!json_.empty()) {
    JsonFrame& j = json_.back();
    j.stage = j.kind == JsonKind::kObject ? kObjAfter : kArrAfter;
    return;
  }
  Frame& f = top();
  if (f.kind != FrameKind::kTool) return;
  if (f.stage == kToolParamsValue) {
    f.stage = kToolAfterParams;
    recording_ = false;
    current_params_ = recorded_;
    current_params_span_ = {recorded_start_, emitted_ + 1};
    emit(events, EventKind::kToolParamsReady, f.depth,
         EventPayload{current_params_span_, current_params_, current_tool_});
    recorded_.clear();
  } else if (f.stage == kToolResultValue) {
    f.stage = kToolAfterResult;
  }
}

bool StructureTracker::start_value(unsigned char c, std::vector<StructureEvent>& events) {
  (void)events;
  switch (c) {
    case '"':
      lex_ = Lex::kString;
      role_ = StringRole::kValue;
      escape_ = 0;
      string_len_ = 0;
      return true;
    case '{':
      if (json_.size() >= kMaxJsonNesting) return false;
      json_.push_back({JsonKind::kObject, kObjFirst});
      return true;
    case '[':
      if (json_.size() >= kMaxJsonNesting) return false;
      json_.push_back({JsonKind::kArray, kArrFirst});
      return true;
    case 't': lex_ = Lex::kLiteral; literal_rest_ = "rue"; return true;
    case 'f': lex_ = Lex::kLiteral; literal_rest_ = "alse"; return true;
    case 'n': lex_ = Lex::kLiteral; literal_rest_ = "ull"; return true;
    case '-':
      lex_ = Lex::kNumber;
      number_state_ = kNumSign;
      mantissa_digits_ = 0;
      exponent_digits_ = 0;
      return true;
    default:
      if (!is_digit(c)) return false;
      lex_ = Lex::kNumber;
      number_state_ = c == '0' ? kNumZero : kNumInt;
      mantissa_digits_ = 1;
      exponent_digits_ = 0;
      return true;
  }
}

bool StructureTracker::number_continues(unsigned char c) {
  switch (number_state_) {
    case kNumSign:
      if (!is_digit(c)) return false;
      number_state_ = c == '0' ? kNumZero : kNumInt;
      mantissa_digits_ = 1;
      return true;
    case kNumZero:
    case kNumInt:
      if (number_state_ == kNumInt && is_digit(c)) {
        if (mantissa_digits_ >= kMaxMantissaDigits) return false;
        ++mantissa_digits_;
        return true;
      }
      if (c == '.') { number_state_ = kNumDot; return true; }
      if (c == 'e' || c == 'E') { number_state_ = kNumExp; return true; }
      return false;
    case kNumDot:
    case kNumFrac:
      if (is_digit(c)) {
        if (mantissa_digits_ >= kMaxMantissaDigits) return false;
        ++mantissa_digits_;
        number_state_ = kNumFrac;
        return true;
      }
      if (number_state_ == kNumFrac && (c == 'e' || c == 'E')) {
        number_state_ = kNumExp;
        return true;
      }
      return false;
    case kNumExp:
      if (c == '+' || c == '-') { number_state_ = kNumExpSign; return true; }
      [[fallthrough]];
    case kNumExpSign:
    case kNumExpDigits:
      if (!is_digit(c) || exponent_digits_ >= kMaxExponentDigits) return false;
      ++exponent_digits_;
      number_state_ = kNumExpDigits;
      return true;
    default: return false;
  }
}

bool StructureTracker::number_accepting() const {
  return number_state_ == kNumZero || number_state_ == kNumInt || number_state_ == kNumFrac ||
         number_state_ == kNumExpDigits;
}

bool StructureTracker::step_json(unsigned char c, std::vector<StructureEvent>& events) {
  JsonFrame& j = json_.back();
  auto close = [&] {
    json_.pop_back();
    value_done(events);
  };
  if (j.kind == JsonKind::kObject) {
    switch (j.stage) {
      case kObjFirst:
        if (c == '}') { close(); return true; }
        [[fallthrough]];
      case kObjKey:
        if (c != '"') return false;
        lex_ = Lex::kString;
        role_ = StringRole::kKey;
        escape_ = 0;
        string_len_ = 0;
        return true;
      case kObjColon:
        if (c != ':') return false;
        j.stage = kObjValue;
        return true;
      case kObjValue: return start_value(c, events);
      case kObjAfter:
        if (c == ',') { j.stage = kObjKey; return true; }
        if (c == '}') { close(); return true; }
        return false;
      default: return false;
    }
  }
  switch (j.stage) {
    case kArrFirst:
      if (c == ']') { close(); return true; }
      j.stage = kArrValue;
      if (!start_value(c, events)) return false;
      return true;
    case kArrValue: return start_value(c, events);
    case kArrAfter:
      if (c == ',') { j.stage = kArrValue; return true; }
      if (c == ']') { close(); return true; }
      return false;
    default: return false;
  }
}

bool StructureTracker::step_schema(unsigned char c, std::vector<StructureEvent>& events) {
  Frame& f = top();
  auto begin_string = [&](StringRole role) {
    lex_ = Lex::kString;
    role_ = role;
    escape_ = 0;
    string_len_ = 0;
    name_prefix_.clear();
  };
  switch (f.kind) {
    case FrameKind::kDoc:
      if (f.stage == kDocAfterList && c == '}') {
        f.stage = kDocDone;
        emit(events, EventKind::kDone, 0);
        return true;
      }
      return false;

    case FrameKind::kList:
      if (f.stage == kListExpectItem) {
        if (c != '{') return false;
        f.stage = kListAfterItem;
        const int depth = f.depth;
        emit(events, EventKind::kTaskOpened, depth);
        frames_.push_back({FrameKind::kTask, kTaskKeyThought, depth, 0});
        return true;
      }
      if (c == ',') {
        f.stage = kListExpectItem;
        return true;
      }
      if (c == ']') {
        const int depth = f.depth;
        const bool root = f.start < 0;
        frames_.pop_back();
        if (!root) {
          Frame& parent = top();
          parent.stage = kTaskAfterSubtasks;
          emit(events, EventKind::kSubtaskListClosed, depth,
               EventPayload{{parent.start, emitted_ + 1}, {}, {}});
        }
        return true;
      }
      return false;

    case FrameKind::kTask:
      switch (f.stage) {
        case kTaskThoughtValue:
          if (c != '"') return false;
          begin_string(StringRole::kThought);
          return true;
        case kTaskAfterThought:
          if (c != ',') return false;
          f.stage = kTaskKeyAfterThought;
          return true;
        case kTaskTooluseValue:
          if (c != '{') return false;
          f.stage = kTaskAfterTooluse;
          frames_.push_back({FrameKind::kTool, kToolKeyName, f.depth, 0});
          current_tool_.clear();
          current_params_.clear();
          return true;
        case kTaskAfterTooluse:
          if (c != ',') return false;
          f.stage = kTaskKeyAfterTooluse;
          return true;
        case kTaskSubtasksValue: {
          if (c != '[') return false;
          const int depth = f.depth + 1;
          const std::int64_t key_offset = f.start;
          emit(events, EventKind::kSubtaskListOpened, depth);
          frames_.push_back({FrameKind::kList, kListExpectItem, depth, key_offset});
          return true;
        }
        case kTaskAfterSubtasks:
          if (c != ',') return false;
          f.stage = kTaskKeyConclusion;
          return true;
        case kTaskConclusionValue:
          if (c != '"') return false;
          begin_string(StringRole::kConclusion);
          return true;
        case kTaskAfterConclusion: {
          if (c != '}') return false;
          const int depth = f.depth;
          frames_.pop_back();
          emit(events, EventKind::kTaskClosed, depth);
          return true;
        }
        default: return false;
      }

    case FrameKind::kTool:
      switch (f.stage) {
        case kToolNameValue:
          if (c != '"') return false;
          begin_string(StringRole::kToolName);
          return true;
        case kToolAfterName:
          if (c != ',') return false;
          f.stage = kToolKeyParams;
          return true;
        case kToolParamsValue:
          if (c != '{') return false;
          recording_ = true;
          recorded_.assign(1, '{');
          recorded_start_ = emitted_;
          json_.push_back({JsonKind::kObject, kObjFirst});
          return true;
        case kToolAfterParams:
          if (c != ',') return false;
          f.stage = kToolKeyResult;
          return true;
        case kToolResultValue:
          return start_value(c, events);
        case kToolAfterResult: {
          if (c != '}') return false;
          frames_.pop_back();
          return true;
        }
        default: return false;
      }
  }
  return false;
}

}  // namespace threadrun
