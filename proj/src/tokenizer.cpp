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

#include "threadrun/tokenizer.hpp"

#include <algorithm>

#include "threadrun/error.hpp"

namespace threadrun {

Tokenizer::Tokenizer() {
  pieces_.reserve(kBos + 1);
  for (int b = 0; b < 256; ++b) {
    pieces_.emplace_back(1, static_cast<char>(b));
  }
  pieces_.emplace_back(R"({"tasks":[)");
  pieces_.emplace_back(R"("thought":)");
  pieces_.emplace_back(R"("tooluse":)");
  pieces_.emplace_back(R"("tool_name":)");
  pieces_.emplace_back(R"("parameters":)");
  pieces_.emplace_back(R"("tool_result":)");
  pieces_.emplace_back(R"("subtasks":)");
  pieces_.emplace_back(R"("conclusion":)");
  pieces_.emplace_back();  // BOS

  for (TokenId id = 256; id < kBos; ++id) merged_by_length_.push_back(id);
  std::stable_sort(merged_by_length_.begin(), merged_by_length_.end(),
                   [this](TokenId a, TokenId b) {
                     return pieces_[a].size() > pieces_[b].size();
                   });
}

const Tokenizer& Tokenizer::instance() {
  static const Tokenizer tok;
  return tok;
}

std::vector<TokenId> Tokenizer::tokenize(std::string_view text) const {
  std::vector<TokenId> out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    TokenId match = -1;
    const char c = text[i];
    if (c == '{' || c == '"') {
      for (TokenId id : merged_by_length_) {
        const std::string& p = pieces_[id];
        if (text.substr(i, p.size()) == p) {
          match = id;
          break;
        }
      }
    }
    if (match >= 0) {
      out.push_back(match);
      i += pieces_[match].size();
    } else {
      out.push_back(static_cast<unsigned char>(c));
      ++i;
    }
  }
  return out;
}

std::string Tokenizer::detokenize(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) out += piece(id);
  return out;
}

const std::string& Tokenizer::piece(TokenId id) const {
  if (id < 0 || id >= vocab_size()) {
    throw Error(ErrorCode::kInvalidArgument, "token id out of range: " + std::to_string(id));
  }
  return pieces_[id];
}

std::vector<std::size_t> Tokenizer::byte_offsets(std::span<const TokenId> ids) const {
  std::vector<std::size_t> offsets;
  offsets.reserve(ids.size() + 1);
  std::size_t pos = 0;
  for (TokenId id : ids) {
    offsets.push_back(pos);
    pos += piece(id).size();
  }
  offsets.push_back(pos);
  return offsets;
}

}  // namespace threadrun
