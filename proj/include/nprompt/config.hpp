#pragma once

#include <cstdlib>
#include <fstream>
#include <functional>
#include <optional>
#include <string>

#include <json.hpp>

#include "nprompt/errors.hpp"
#include "nprompt/records.hpp"
#include "nprompt/remote.hpp"

#ifndef NPROMPT_DATA_DIR
#define NPROMPT_DATA_DIR "data"
#endif

namespace nprompt {

enum class BackendMode { stub, live };

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  BackendMode mode = BackendMode::stub;

  std::string data_dir = NPROMPT_DATA_DIR;
  // Empty paths resolve inside data_dir.
  std::string taxonomy_path;
  std::string train_corpus_path;
  std::string eval_corpus_path;
  // lmcore-v1 checkpoint used for optimization; empty means an SFT model
  // fitted to the training corpus at startup.
  std::string model_path;
  // JSON-lines record log; empty keeps records in memory.
  std::string record_log;

  std::string image_backend_url;
  std::string preference_scorer_url;
  std::string aesthetics_scorer_url;
  int image_steps = 50;
  int max_in_flight = 4;
  RetryPolicy retry;

  std::uint64_t seed = 0;
  DecodeParams decode;
  std::string cors_origin = "*";

  std::string taxonomy_file() const { return taxonomy_path.empty() ? data_dir + "/taxonomy.csv" : taxonomy_path; }
  std::string train_corpus_file() const {
    return train_corpus_path.empty() ? data_dir + "/prompts_train.txt" : train_corpus_path;
  }
  std::string eval_corpus_file() const {
    return eval_corpus_path.empty() ? data_dir + "/prompts_eval.txt" : eval_corpus_path;
  }

  void check() const {
    if (port < 0 || port > 65535) throw ConfigError("port out of range: " + std::to_string(port));
    if (max_in_flight < 1) throw ConfigError("max_in_flight must be >= 1");
    if (retry.attempts < 1) throw ConfigError("retry attempts must be >= 1");
    if (mode == BackendMode::live) {
      if (image_backend_url.empty()) throw ConfigError("live mode requires image_backend_url");
      if (preference_scorer_url.empty()) throw ConfigError("live mode requires preference_scorer_url");
      if (aesthetics_scorer_url.empty()) throw ConfigError("live mode requires aesthetics_scorer_url");
    }
    try {
      decode.check();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("decode: ") + e.what());
    }
  }
};

inline std::string_view to_string(BackendMode m) { return m == BackendMode::live ? "live" : "stub"; }

inline BackendMode parse_mode(std::string_view s) {
  if (s == "stub") return BackendMode::stub;
  if (s == "live") return BackendMode::live;
  throw ConfigError("mode must be 'stub' or 'live', got '" + std::string(s) + "'");
}

inline json to_json(const ServiceConfig& c) {
  return {{"host", c.host},
          {"port", c.port},
          {"mode", std::string(to_string(c.mode))},
          {"data_dir", c.data_dir},
          {"taxonomy_path", c.taxonomy_file()},
          {"train_corpus_path", c.train_corpus_file()},
          {"eval_corpus_path", c.eval_corpus_file()},
          {"model_path", c.model_path},
          {"record_log", c.record_log},
          {"image_backend_url", c.image_backend_url},
          {"preference_scorer_url", c.preference_scorer_url},
          {"aesthetics_scorer_url", c.aesthetics_scorer_url},
          {"image_steps", c.image_steps},
          {"max_in_flight", c.max_in_flight},
          {"retry_attempts", c.retry.attempts},
          {"retry_backoff_ms", c.retry.initial_backoff.count()},
          {"timeout_ms", c.retry.timeout.count()},
          {"seed", c.seed},
          {"decode", to_json(c.decode)},
          {"cors_origin", c.cors_origin}};
}

// Keys absent from `j` keep their current values.
inline void apply_json(ServiceConfig& c, const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  try {
    for (const auto& [key, val] : j.items()) {
      if (key == "host") c.host = val.get<std::string>();
      else if (key == "port") c.port = val.get<int>();
      else if (key == "mode") c.mode = parse_mode(val.get<std::string>());
      else if (key == "data_dir") c.data_dir = val.get<std::string>();
      else if (key == "taxonomy_path") c.taxonomy_path = val.get<std::string>();
      else if (key == "train_corpus_path") c.train_corpus_path = val.get<std::string>();
      else if (key == "eval_corpus_path") c.eval_corpus_path = val.get<std::string>();
      else if (key == "model_path") c.model_path = val.get<std::string>();
      else if (key == "record_log") c.record_log = val.get<std::string>();
      else if (key == "image_backend_url") c.image_backend_url = val.get<std::string>();
      else if (key == "preference_scorer_url") c.preference_scorer_url = val.get<std::string>();
      else if (key == "aesthetics_scorer_url") c.aesthetics_scorer_url = val.get<std::string>();
      else if (key == "image_steps") c.image_steps = val.get<int>();
      else if (key == "max_in_flight") c.max_in_flight = val.get<int>();
      else if (key == "retry_attempts") c.retry.attempts = val.get<int>();
      else if (key == "retry_backoff_ms") c.retry.initial_backoff = std::chrono::milliseconds(val.get<long long>());
      else if (key == "timeout_ms") c.retry.timeout = std::chrono::milliseconds(val.get<long long>());
      else if (key == "seed") c.seed = val.get<std::uint64_t>();
      else if (key == "decode") c.decode = decode_params_from_json(val, c.decode);
      else if (key == "cors_origin") c.cors_origin = val.get<std::string>();
      else throw ConfigError("unknown config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
}

using EnvLookup = std::function<std::optional<std::string>(const char*)>;

inline std::optional<std::string> process_env(const char* name) {
  if (const char* v = std::getenv(name)) return std::string(v);
  return std::nullopt;
}

// NPROMPT_<KEY> overrides for the scalar settings (e.g. NPROMPT_PORT,
// NPROMPT_IMAGE_BACKEND_URL). Values are parsed as JSON when possible so
// numbers keep their type.
inline void apply_env(ServiceConfig& c, const EnvLookup& env = process_env) {
  static constexpr const char* keys[] = {"host",
                                         "port",
                                         "mode",
                                         "data_dir",
                                         "taxonomy_path",
                                         "train_corpus_path",
                                         "eval_corpus_path",
                                         "model_path",
                                         "record_log",
                                         "image_backend_url",
                                         "preference_scorer_url",
                                         "aesthetics_scorer_url",
                                         "image_steps",
                                         "max_in_flight",
                                         "retry_attempts",
                                         "retry_backoff_ms",
                                         "timeout_ms",
                                         "seed",
                                         "cors_origin"};
  json patch = json::object();
  for (const char* key : keys) {
    std::string name = "NPROMPT_";
    for (const char* p = key; *p; ++p) name += static_cast<char>(std::toupper(static_cast<unsigned char>(*p)));
    auto v = env(name.c_str());
    if (!v) continue;
    json parsed = json::parse(*v, nullptr, false);
    patch[key] = parsed.is_number() ? parsed : json(*v);
  }
  apply_json(c, patch);
}

inline ServiceConfig load_config(const std::string& path = {}, const EnvLookup& env = process_env) {
  ServiceConfig c;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError(path + ": invalid JSON");
    apply_json(c, j);
  }
  apply_env(c, env);
  c.check();
  return c;
}

}  // namespace nprompt
