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

#include "threadrun/error.hpp"

namespace threadrun {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kInvalidTree: return "InvalidTree";
    case ErrorCode::kParseError: return "ParseError";
    case ErrorCode::kRejected: return "Rejected";
    case ErrorCode::kOutOfPages: return "OutOfPages";
    case ErrorCode::kDoubleFree: return "DoubleFree";
    case ErrorCode::kSpanOutOfRange: return "SpanOutOfRange";
    case ErrorCode::kPositionOverflow: return "PositionOverflow";
    case ErrorCode::kEmptyExtend: return "EmptyExtend";
    case ErrorCode::kEmptyMask: return "EmptyMask";
    case ErrorCode::kZeroLength: return "ZeroLength";
    case ErrorCode::kPromptTooLong: return "PromptTooLong";
    case ErrorCode::kDuplicateTool: return "DuplicateTool";
    case ErrorCode::kUnknownTool: return "UnknownTool";
    case ErrorCode::kParamsInvalid: return "ParamsInvalid";
    case ErrorCode::kDeadline: return "Deadline";
    case ErrorCode::kNotFound: return "NotFound";
    case ErrorCode::kScriptExhausted: return "ScriptExhausted";
    case ErrorCode::kQueueFull: return "QueueFull";
    case ErrorCode::kInternal: return "Internal";
  }
  return "Unknown";
}

}  // namespace threadrun
