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

#ifndef THREADRUN_THREADRUN_H_
#define THREADRUN_THREADRUN_H_

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(__GNUC__)
#define TR_API __attribute__((visibility("default")))
#else
#define TR_API
#endif

typedef enum tr_status {
  TR_OK = 0,
  TR_INVALID_ARGUMENT,
  TR_INVALID_TREE,
  TR_PARSE_ERROR,
  TR_REJECTED,
  TR_OUT_OF_PAGES,
  TR_DOUBLE_FREE,
  TR_SPAN_OUT_OF_RANGE,
  TR_POSITION_OVERFLOW,
  TR_EMPTY_EXTEND,
  TR_EMPTY_MASK,
  TR_ZERO_LENGTH,
  TR_PROMPT_TOO_LONG,
  TR_DUPLICATE_TOOL,
  TR_UNKNOWN_TOOL,
  TR_PARAMS_INVALID,
  TR_DEADLINE,
  TR_NOT_FOUND,
  TR_SCRIPT_EXHAUSTED,
  TR_QUEUE_FULL,
  TR_INTERNAL,
  /* A verification suite ran and failed. */
  TR_CHECK_FAILED,
} tr_status;

typedef struct tr_engine tr_engine;
typedef struct tr_server tr_server;
typedef struct tr_tool_server tr_tool_server;

/* Strings returned through char** out-parameters are owned by the caller and
 * released with tr_string_free. JSON arguments may be NULL for defaults. */
TR_API void tr_string_free(char* s);
/* Message of the last failed call on this thread. */
TR_API const char* tr_last_error(void);
TR_API const char* tr_status_name(tr_status status);
TR_API const char* tr_version(void);
/* "trace" | "debug" | "info" | "warn" | "error" | "off". NULL reads
 * THREADRUN_LOG (default "warn"). */
TR_API tr_status tr_set_log_level(const char* level);

/* model_json: {"kind": "scripted"|"toy", layers, heads, head_dim, vocab,
 * position_limit, rope_base, seed, teacher, forward_latency_us, ...}
 * engine_json: {max_batch, buffer_threshold, position_limit, pool_pages, ...} */
TR_API tr_status tr_engine_create(const char* model_json, const char* engine_json,
                                  tr_engine** out);
TR_API void tr_engine_destroy(tr_engine* engine);
TR_API tr_status tr_engine_register_tool(tr_engine* engine, const char* tool_spec_json);
/* request_json: {system, prompt, tools, buffer_threshold, limits, script} */
TR_API tr_status tr_engine_submit(tr_engine* engine, const char* request_json, uint64_t* id);
TR_API tr_status tr_engine_step(tr_engine* engine, char** report_json);
/* Steps until every request is terminal or deadline_ms passes
 * (TR_DEADLINE, with partial results). */
TR_API tr_status tr_engine_run(tr_engine* engine, int64_t deadline_ms, char** result_json);
TR_API tr_status tr_engine_request(tr_engine* engine, uint64_t id, char** request_json);
TR_API tr_status tr_engine_health(tr_engine* engine, char** health_json);

TR_API tr_status tr_server_create(const char* model_json, const char* engine_json,
                                  tr_server** out);
/* port 0 picks a free port. */
TR_API tr_status tr_server_start(tr_server* server, const char* host, int port, int* bound_port);
/* Blocks until tr_server_stop. */
TR_API tr_status tr_server_listen(tr_server* server, const char* host, int port);
TR_API void tr_server_stop(tr_server* server);
TR_API void tr_server_destroy(tr_server* server);

/* tools_json: array of tool specs with mock endpoints. */
TR_API tr_status tr_tool_server_create(const char* tools_json, tr_tool_server** out);
TR_API tr_status tr_tool_server_start(tr_tool_server* server, const char* host, int port,
                                      int* bound_port);
TR_API tr_status tr_tool_server_listen(tr_tool_server* server, const char* host, int port);
TR_API void tr_tool_server_destroy(tr_tool_server* server);

/* options_json: {seed, n, depth, branching, tool_prob, tools: [names]} */
TR_API tr_status tr_gen_corpus(const char* options_json, const char* out_path, int64_t* count);
/* config_json: {thresholds, batch, tool_latency_ms, tool_calls, model, engine} */
TR_API tr_status tr_bench(const char* corpus_path, const char* config_json, char** csv);
/* Returns TR_CHECK_FAILED when any suite fails; the report is filled either
 * way. */
TR_API tr_status tr_verify(uint64_t seed, int32_t cases, char** report_json);

#ifdef __cplusplus
}
#endif

#endif  // THREADRUN_THREADRUN_H_
