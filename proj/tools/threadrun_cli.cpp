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

// Operator CLI. Talks to the runtime only through the C API.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "threadrun/threadrun.h"

namespace {

using Json = nlohmann::ordered_json;

struct CliError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CliError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Json read_json_file(const std::string& path) {
  auto j = Json::parse(read_file(path), nullptr, false);
  if (j.is_discarded()) throw CliError(path + ": not JSON");
  return j;
}

// Takes ownership of a C API string.
std::string take(char* s) {
  if (s == nullptr) return "";
  std::string out(s);
  tr_string_free(s);
  return out;
}

void check(tr_status st) {
  if (st != TR_OK) throw CliError(std::string(tr_status_name(st)) + ": " + tr_last_error());
}

std::optional<int> parse_threshold(const std::string& text) {
  if (text.empty()) return std::nullopt;
  if (text == "none" || text == "inf") return -1;
  try {
    std::size_t used = 0;
    const int v = std::stoi(text, &used);
    if (used == text.size() && v >= 0) return v;
  } catch (const std::exception&) {
  }
  throw CliError("threshold must be a non-negative integer or 'none': " + text);
}

struct Common {
  std::string model_config;
  int pool_pages = 0;
  int position_limit = 0;
  int batch = 0;
  std::optional<std::uint64_t> seed;

  void add(CLI::App* app) {
    app->add_option("--model-config", model_config, "model config JSON file");
    app->add_option("--pool-pages", pool_pages, "KV pool size in pages")->check(CLI::NonNegativeNumber);
    app->add_option("--position-limit", position_limit, "position limit P")->check(CLI::NonNegativeNumber);
    app->add_option("--batch", batch, "max requests per step")->check(CLI::NonNegativeNumber);
    app->add_option("--seed", seed, "model seed");
  }

  Json model() const {
    Json m = model_config.empty() ? Json::object() : read_json_file(model_config);
    if (seed) m["seed"] = *seed;
    if (position_limit > 0) m["position_limit"] = position_limit;
    return m;
  }

  Json engine() const {
    Json e = Json::object();
    if (pool_pages > 0) e["pool_pages"] = pool_pages;
    if (position_limit > 0) e["position_limit"] = position_limit;
    if (batch > 0) e["max_batch"] = batch;
    return e;
  }
};

// Minified canonical document, or a token trace as-is.
Json load_script(const std::string& path) {
  const Json j = read_json_file(path);
  if (j.is_object() && j.contains("script")) return j;
  return j.dump();
}

int cmd_run(const Common& common, const std::string& prompt_file, const std::string& system,
            const std::string& tools_file, const std::string& script_file,
            const std::string& threshold_text, std::int64_t deadline_ms) {
  Json request{{"system", system}, {"prompt", prompt_file.empty() ? "" : read_file(prompt_file)}};
  if (!tools_file.empty()) request["tools"] = read_json_file(tools_file);
  if (!script_file.empty()) request["script"] = load_script(script_file);
  if (const auto t = parse_threshold(threshold_text)) {
    request["buffer_threshold"] = *t < 0 ? Json(2147483647) : Json(*t);
  }

  tr_engine* engine = nullptr;
  check(tr_engine_create(common.model().dump().c_str(), common.engine().dump().c_str(), &engine));
  std::unique_ptr<tr_engine, void (*)(tr_engine*)> guard(engine, tr_engine_destroy);
  std::uint64_t id = 0;
  check(tr_engine_submit(engine, request.dump().c_str(), &id));
  char* run_json = nullptr;
  const tr_status st = tr_engine_run(engine, deadline_ms, &run_json);
  take(run_json);
  if (st != TR_OK && st != TR_DEADLINE) check(st);
  char* req_json = nullptr;
  check(tr_engine_request(engine, id, &req_json));
  const Json r = Json::parse(take(req_json));

  if (r.contains("tree") && !r["tree"].is_null()) {
    // The text keeps the canonical key order; the tree object does not.
    std::cout << Json::parse(r["text"].get<std::string>()).dump(2) << "\n";
  } else {
    std::cout << r.value("text", "") << "\n";
  }
  const Json& m = r["metrics"];
  std::printf("status=%s", r.value("status", "").c_str());
  if (r.contains("failure") && !r["failure"].is_null()) {
    std::printf(" failure=\"%s\"", r["failure"].get<std::string>().c_str());
  }
  std::printf(" answer=%s\n", Json(r.value("answer", "")).dump().c_str());
  for (const auto& [k, v] : m.items()) std::printf("%s=%s\n", k.c_str(), v.dump().c_str());
  return r.value("status", "") == "finished" ? 0 : 1;
}

int cmd_bench(const Common& common, const std::string& corpus, const std::vector<std::string>& thresholds,
              int tool_latency_ms, const std::vector<int>& tool_calls, const std::string& out) {
  Json config{{"model", common.model()}, {"engine", common.engine()}, {"tool_latency_ms", tool_latency_ms}};
  if (common.batch > 0) config["batch"] = common.batch;
  if (!thresholds.empty()) {
    Json ts = Json::array();
    for (const auto& t : thresholds) {
      const auto v = parse_threshold(t);
      ts.push_back(*v < 0 ? Json("none") : Json(*v));
    }
    config["thresholds"] = ts;
  }
  if (!tool_calls.empty()) config["tool_calls"] = tool_calls;
  if (corpus.empty() && tool_calls.empty()) throw CliError("bench needs --corpus or --tool-calls");
  char* csv = nullptr;
  check(tr_bench(corpus.c_str(), config.dump().c_str(), &csv));
  const std::string text = take(csv);
  if (out.empty()) {
    std::cout << text;
  } else {
    std::ofstream f(out);
    if (!f) throw CliError("cannot write " + out);
    f << text;
  }
  return 0;
}

int cmd_verify(std::uint64_t seed, int cases) {
  char* report = nullptr;
  const tr_status st = tr_verify(seed, cases, &report);
  const std::string text = take(report);
  if (text.empty()) check(st);
  const Json r = Json::parse(text);
  for (const auto& s : r["suites"]) {
    std::printf("%s %-20s cases=%d %s\n", s["passed"].get<bool>() ? "PASS" : "FAIL",
                s["suite"].get<std::string>().c_str(), s["cases"].get<int>(),
                s["detail"].get<std::string>().c_str());
  }
  return st == TR_OK ? 0 : 1;
}

int cmd_gen_corpus(std::uint64_t seed, int n, int depth, int branching, double tool_prob,
                   const std::vector<std::string>& tools, const std::string& out) {
  Json options{{"seed", seed}, {"n", n}, {"depth", depth}, {"branching", branching}, {"tool_prob", tool_prob}};
  if (!tools.empty()) options["tools"] = tools;
  std::int64_t count = 0;
  check(tr_gen_corpus(options.dump().c_str(), out.c_str(), &count));
  std::fprintf(stderr, "wrote %lld traces to %s\n", static_cast<long long>(count), out.c_str());
  return 0;
}

int cmd_serve(const Common& common, const std::string& host, int port) {
  tr_server* server = nullptr;
  check(tr_server_create(common.model().dump().c_str(), common.engine().dump().c_str(), &server));
  std::unique_ptr<tr_server, void (*)(tr_server*)> guard(server, tr_server_destroy);
  std::fprintf(stderr, "listening on %s:%d\n", host.c_str(), port);
  check(tr_server_listen(server, host.c_str(), port));
  return 0;
}

int cmd_serve_tools(const std::string& tools_file, const std::string& host, int port) {
  const std::string tools = tools_file.empty() ? "" : read_json_file(tools_file).dump();
  tr_tool_server* server = nullptr;
  check(tr_tool_server_create(tools.c_str(), &server));
  std::unique_ptr<tr_tool_server, void (*)(tr_tool_server*)> guard(server, tr_tool_server_destroy);
  std::fprintf(stderr, "tool server on %s:%d\n", host.c_str(), port);
  check(tr_tool_server_listen(server, host.c_str(), port));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"threadrun: structured-reasoning inference runtime"};
  app.require_subcommand(1);

  Common common;

  auto* run = app.add_subcommand("run", "run one request and print its tree and metrics");
  common.add(run);
  std::string prompt_file, system, tools_file, script_file, threshold;
  std::int64_t deadline_ms = 60000;
  run->add_option("--prompt", prompt_file, "prompt text file")->check(CLI::ExistingFile);
  run->add_option("--system", system, "system text");
  run->add_option("--tools", tools_file, "tool specs JSON array")->check(CLI::ExistingFile);
  run->add_option("--script", script_file, "scripted model output: document or token trace")
      ->check(CLI::ExistingFile);
  run->add_option("--threshold", threshold, "buffer threshold T, or 'none'");
  run->add_option("--deadline-ms", deadline_ms, "wall-clock limit");

  auto* bench = app.add_subcommand("bench", "throughput and memory versus threshold");
  common.add(bench);
  std::string corpus, out;
  std::vector<std::string> thresholds;
  int tool_latency_ms = 0;
  std::vector<int> tool_calls;
  bench->add_option("--corpus", corpus, "trace corpus (JSONL)")->check(CLI::ExistingFile);
  bench->add_option("--threshold", thresholds, "thresholds to sweep (repeatable; 'none' disables)")
      ->delimiter(',');
  bench->add_option("--tool-latency-ms", tool_latency_ms, "latency of replayed tools");
  bench->add_option("--tool-calls", tool_calls, "sweep multi-hop traces with these call counts")
      ->delimiter(',');
  bench->add_option("--out", out, "CSV output path (default stdout)");

  auto* verify = app.add_subcommand("verify", "run the oracle suites");
  std::uint64_t verify_seed = 0;
  int cases = 20;
  verify->add_option("--seed", verify_seed);
  verify->add_option("--cases", cases)->check(CLI::PositiveNumber);

  auto* gen = app.add_subcommand("gen-corpus", "write a random trace corpus");
  std::uint64_t gen_seed = 0;
  int n = 100, depth = 3, branching = 3;
  double tool_prob = 0.0;
  std::vector<std::string> tool_names;
  std::string gen_out;
  gen->add_option("--seed", gen_seed);
  gen->add_option("-n,--count", n)->check(CLI::NonNegativeNumber);
  gen->add_option("--depth", depth)->check(CLI::NonNegativeNumber);
  gen->add_option("--branching", branching)->check(CLI::NonNegativeNumber);
  gen->add_option("--tool-prob", tool_prob)->check(CLI::Range(0.0, 1.0));
  gen->add_option("--tool-names", tool_names)->delimiter(',');
  gen->add_option("--out", gen_out)->required();

  auto* serve = app.add_subcommand("serve", "HTTP gateway");
  common.add(serve);
  std::string host = "127.0.0.1";
  int port = 8080;
  serve->add_option("--host", host);
  serve->add_option("--port", port);

  auto* serve_tools = app.add_subcommand("serve-tools", "HTTP server for mock tools");
  std::string serve_tools_file;
  int tools_port = 8090;
  serve_tools->add_option("--tools", serve_tools_file, "tool specs JSON array")->check(CLI::ExistingFile);
  serve_tools->add_option("--host", host);
  serve_tools->add_option("--port", tools_port);

  CLI11_PARSE(app, argc, argv);

  if (tr_set_log_level(nullptr) != TR_OK) {
    std::fprintf(stderr, "warning: %s\n", tr_last_error());
  }
  try {
    if (*run) return cmd_run(common, prompt_file, system, tools_file, script_file, threshold, deadline_ms);
    if (*bench) return cmd_bench(common, corpus, thresholds, tool_latency_ms, tool_calls, out);
    if (*verify) return cmd_verify(verify_seed, cases);
    if (*gen) return cmd_gen_corpus(gen_seed, n, depth, branching, tool_prob, tool_names, gen_out);
    if (*serve) return cmd_serve(common, host, port);
    if (*serve_tools) return cmd_serve_tools(serve_tools_file, host, tools_port);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
