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
#include <string>
#include <string_view>
#include <vector>

namespace threadrun {

using TokenId = std::int32_t;

// Byte-level tokenizer with a small table of merged pieces for the document
// opener and the Thread-2 key names. Ids [0, 256) are raw bytes; merged pieces
// follow, then the special BOS token (empty piece, never produced by
// tokenize()).
class Tokenizer {
 public:
  static constexpr TokenId kDocOpen = 256;  // {"tasks":[
  static constexpr TokenId kThoughtKey = 257;
  static constexpr TokenId kTooluseKey = 258;
  static constexpr TokenId kToolNameKey = 259;
  static constexpr TokenId kParametersKey = 260;
  static constexpr TokenId kToolResultKey = 261;
  static constexpr TokenId kSubtasksKey = 262;
  static constexpr TokenId kConclusionKey = 263;
  static constexpr TokenId kBos = 264;

  Tokenizer();

  // Greedy longest match over the merged pieces with byte fallback. Total.
  std::vector<TokenId> tokenize(std::string_view text) const;
  std::string detokenize(std::span<const TokenId> ids) const;

  const std::string& piece(TokenId id) const;
  bool is_special(TokenId id) const { return id == kBos; }
  bool is_merged(TokenId id) const { return id >= 256 && id < kBos; }
  int vocab_size() const { return static_cast<int>(pieces_.size()); }

  // Byte offset at which each token starts, plus a final entry equal to the
  // total byte length.
  std::vector<std::size_t> byte_offsets(std::span<const TokenId> ids) const;

  static const Tokenizer& instance();

 private:
  std::vector<std::string> pieces_;
  // Merged pieces sorted by descending length for greedy matching.
  std::vector<TokenId> merged_by_length_;
};

}  // namespace threadrun
