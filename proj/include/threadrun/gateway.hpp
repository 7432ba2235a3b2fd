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

#include <memory>
#include <string>

#include "threadrun/engine.hpp"

namespace threadrun {

// HTTP front end over one engine:
//   POST /v1/generate        NDJSON event stream, or {"id"} when stream=false
//   GET  /v1/requests/{id}   status, tree, metrics
//   GET  /v1/health          pool and batch snapshot
// A background thread steps the engine whenever it has work.
class Gateway {
 public:
  explicit Gateway(std::unique_ptr<Engine> engine);
  ~Gateway();
  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  // Serves in the background; port 0 picks a free port. Returns the port.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  // Blocks until stop() is called from another thread.
  void listen(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Parses a /v1/generate body. Throws Error(kInvalidArgument) on malformed
// input.
struct GenerateRequest {
  SubmitOptions submit;
  bool stream = true;
};
GenerateRequest parse_generate_request(const Json& body);

}  // namespace threadrun
