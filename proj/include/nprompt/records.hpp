#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nprompt/decoder.hpp"
#include "nprompt/errors.hpp"
#include "nprompt/pipeline.hpp"
#include "nprompt/scoring.hpp"

namespace nprompt {

using nlohmann::json;

class NotFoundError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// JSON mappings shared by the record log and the HTTP API
// ---------------------------------------------------------------------------

inline json to_json(const DecodeParams& p) {
  return {{"beam_size", p.beam_size},
          {"length_penalty", p.length_penalty},
          {"max_new_tokens", p.max_new_tokens},
          {"lambda", p.satisfaction_weight},
          {"top_k", p.top_k},
          {"no_repeat_ngram", p.no_repeat_ngram}};
}

// Fields absent from `j` keep their value in `base`.
inline DecodeParams decode_params_from_json(const json& j, DecodeParams base = {}) {
  if (j.is_null()) return base;
  if (!j.is_object()) throw ValidationError("decode_params must be an object");
  try {
    base.beam_size = j.value("beam_size", base.beam_size);
    base.length_penalty = j.value("length_penalty", base.length_penalty);
    base.max_new_tokens = j.value("max_new_tokens", base.max_new_tokens);
    base.satisfaction_weight = j.value("lambda", base.satisfaction_weight);
    base.top_k = j.value("top_k", base.top_k);
    base.no_repeat_ngram = j.value("no_repeat_ngram", base.no_repeat_ngram);
    base.check();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad decode_params: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ValidationError(std::string("bad decode_params: ") + e.what());
  }
  return base;
}

// {"style": "auto" | [keywords] | {"keywords": [...], "custom": true}, ...,
//  "negative": [phrases]}; missing categories are automatic.
inline json to_json(const ClauseSelection& s) {
  json j = json::object();
  for (Category c : kCategories) {
    const auto& sel = s[c];
    const std::string name(category_name(c));
    if (sel.mode == CategorySelection::Mode::automatic) {
      j[name] = "auto";
    } else if (sel.custom) {
      j[name] = {{"keywords", sel.keywords}, {"custom", true}};
    } else {
      j[name] = sel.keywords;
    }
  }
  j["negative"] = s.negative_phrases;
  return j;
}

inline ClauseSelection selection_from_json(const json& j, std::uint64_t seed) {
  ClauseSelection s;
  s.seed = seed;
  if (j.is_null()) return s;
  if (!j.is_object()) throw ValidationError("selections must be an object");
  auto strings = [](const json& arr, const std::string& what) {
    if (!arr.is_array()) throw ValidationError(what + " must be a list of strings");
    std::vector<std::string> out;
    for (const auto& x : arr) {
      if (!x.is_string()) throw ValidationError(what + " must be a list of strings");
      out.push_back(x.get<std::string>());
    }
    return out;
  };
  for (const auto& [key, val] : j.items()) {
    if (key == "negative") {
      s.negative_phrases = strings(val, "negative");
      continue;
    }
    auto cat = parse_category(key);
    if (!cat) throw ValidationError("unknown category '" + key + "'");
    auto& sel = s[*cat];
    if (val.is_string()) {
      if (val.get<std::string>() != "auto") throw ValidationError(key + ": expected \"auto\" or a keyword list");
      sel = CategorySelection::automatic();
    } else if (val.is_array()) {
      sel = CategorySelection::of(strings(val, key));
    } else if (val.is_object()) {
      sel = CategorySelection::of(strings(val.value("keywords", json::array()), key), val.value("custom", false));
    } else {
      throw ValidationError(key + ": expected \"auto\" or a keyword list");
    }
  }
  return s;
}

inline json to_json(const Highlight& h) {
  return {{"start", h.char_begin}, {"end", h.char_end},       {"token_start", h.token_begin},
          {"token_end", h.token_end}, {"clause", h.clause},   {"category", h.label},
          {"phrase", h.phrase}};
}

inline json to_json(const ImageRef& r) {
  return {{"image_id", r.id}, {"url", r.url}, {"caption", r.caption}, {"seed", r.seed}};
}

inline ImageRef image_from_json(const json& j) {
  ImageRef r;
  r.id = j.value("image_id", std::string());
  r.url = j.value("url", std::string());
  r.caption = j.value("caption", std::string());
  r.seed = j.value("seed", std::uint64_t{0});
  return r;
}

struct ClauseReport {
  int clause = 0;
  std::string label;
  ClauseState state = ClauseState::unsatisfied;
};

inline json to_json(const ClauseReport& c) {
  return {{"clause", c.clause}, {"category", c.label}, {"status", std::string(to_string(c.state))}};
}

struct Scores {
  double pick_u = 0.0;
  double pick_o = 0.0;
  double aes_u = 0.0;
  double aes_o = 0.0;
  double preference_pct = 0.0;
};

// ---------------------------------------------------------------------------
// Generation records
// ---------------------------------------------------------------------------

struct GenerationRecord {
  std::string id;
  std::string timestamp;
  std::string original_prompt;
  std::string prefix;
  std::string optimized_prompt;
  ClauseSelection selection;
  std::uint64_t seed = 0;
  DecodeParams params;
  std::vector<Highlight> highlights;
  std::vector<ClauseReport> clause_status;
  bool satisfied = false;
  std::optional<ImageRef> image_u;
  std::optional<ImageRef> image_o;
  std::optional<Scores> scores;
};

inline json to_json(const GenerationRecord& r) {
  json j;
  j["id"] = r.id;
  j["timestamp"] = r.timestamp;
  j["original_prompt"] = r.original_prompt;
  j["prefix"] = r.prefix;
  j["optimized_prompt"] = r.optimized_prompt;
  j["selections"] = to_json(r.selection);
  j["seed"] = r.seed;
  j["decode_params"] = to_json(r.params);
  j["highlights"] = json::array();
  for (const auto& h : r.highlights) j["highlights"].push_back(to_json(h));
  j["clause_status"] = json::array();
  for (const auto& c : r.clause_status) j["clause_status"].push_back(to_json(c));
  j["satisfied"] = r.satisfied;
  j["image_u"] = r.image_u ? to_json(*r.image_u) : json(nullptr);
  j["image_o"] = r.image_o ? to_json(*r.image_o) : json(nullptr);
  if (r.scores) {
    j["scores"] = {{"pick_u", r.scores->pick_u},
                   {"pick_o", r.scores->pick_o},
                   {"aes_u", r.scores->aes_u},
                   {"aes_o", r.scores->aes_o},
                   {"preference_pct", r.scores->preference_pct}};
  } else {
    j["scores"] = nullptr;
  }
  return j;
}

inline GenerationRecord record_from_json(const json& j) {
  GenerationRecord r;
  r.id = j.at("id").get<std::string>();
  r.timestamp = j.value("timestamp", std::string());
  r.original_prompt = j.at("original_prompt").get<std::string>();
  r.prefix = j.value("prefix", std::string());
  r.optimized_prompt = j.at("optimized_prompt").get<std::string>();
  r.seed = j.value("seed", std::uint64_t{0});
  r.selection = selection_from_json(j.value("selections", json(nullptr)), r.seed);
  r.params = decode_params_from_json(j.value("decode_params", json(nullptr)));
  r.params.seed = r.seed;
  for (const auto& h : j.value("highlights", json::array())) {
    Highlight hl;
    hl.char_begin = h.value("start", std::size_t{0});
    hl.char_end = h.value("end", std::size_t{0});
    hl.token_begin = h.value("token_start", std::size_t{0});
    hl.token_end = h.value("token_end", std::size_t{0});
    hl.clause = h.value("clause", 0);
    hl.label = h.value("category", std::string());
    hl.phrase = h.value("phrase", std::string());
    r.highlights.push_back(std::move(hl));
  }
  for (const auto& c : j.value("clause_status", json::array())) {
    ClauseReport cr;
    cr.clause = c.value("clause", 0);
    cr.label = c.value("category", std::string());
    const auto st = c.value("status", std::string("unsatisfied"));
    cr.state = st == "satisfied" ? ClauseState::satisfied
               : st == "violated" ? ClauseState::violated
                                  : ClauseState::unsatisfied;
    r.clause_status.push_back(std::move(cr));
  }
  r.satisfied = j.value("satisfied", false);
  if (j.contains("image_u") && !j["image_u"].is_null()) r.image_u = image_from_json(j["image_u"]);
  if (j.contains("image_o") && !j["image_o"].is_null()) r.image_o = image_from_json(j["image_o"]);
  if (j.contains("scores") && !j["scores"].is_null()) {
    const auto& s = j["scores"];
    r.scores = Scores{s.at("pick_u").get<double>(), s.at("pick_o").get<double>(), s.at("aes_u").get<double>(),
                      s.at("aes_o").get<double>(), s.at("preference_pct").get<double>()};
  }
  return r;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline constexpr std::string_view kRecordHeader = "nprompt-records-v1";

// Append-only JSON-lines log behind an in-memory index. A record that is
// updated is appended again; on load the last line for an id wins. With an
// empty path the store lives in memory only.
class RecordStore {
 public:
  RecordStore() = default;

  explicit RecordStore(std::string path) : path_(std::move(path)) {
    if (path_.empty()) return;
    std::ifstream in(path_);
    if (in) {
      std::string line;
      if (std::getline(in, line)) {
        if (line != kRecordHeader) throw ParseError(path_ + ": missing '" + std::string(kRecordHeader) + "' header");
        std::size_t line_no = 1;
        while (std::getline(in, line)) {
          ++line_no;
          if (line.empty()) continue;
          try {
            auto rec = record_from_json(json::parse(line));
            index(std::move(rec));
          } catch (const std::exception& e) {
            throw ParseError(path_ + ":" + std::to_string(line_no) + ": " + e.what());
          }
        }
      }
    }
    if (!in || order_.empty()) {
      std::ifstream probe(path_);
      if (!probe || probe.peek() == std::ifstream::traits_type::eof()) {
        std::ofstream out(path_, std::ios::trunc);
        if (!out) throw ConfigError("cannot create record log " + path_);
        out << kRecordHeader << '\n';
      }
    }
  }

  GenerationRecord add(GenerationRecord r) {
    std::lock_guard lock(mu_);
    char buf[32];
    std::snprintf(buf, sizeof buf, "rec-%06zu", ++next_id_);
    r.id = buf;
    if (r.timestamp.empty()) r.timestamp = utc_timestamp();
    append(r);
    index(r);
    return r;
  }

  void update(const GenerationRecord& r) {
    std::lock_guard lock(mu_);
    if (!records_.count(r.id)) throw NotFoundError("unknown record " + r.id);
    append(r);
    records_[r.id] = r;
  }

  std::optional<GenerationRecord> get(const std::string& id) const {
    std::lock_guard lock(mu_);
    auto it = records_.find(id);
    if (it == records_.end()) return std::nullopt;
    return it->second;
  }

  std::vector<GenerationRecord> all() const {
    std::lock_guard lock(mu_);
    std::vector<GenerationRecord> out;
    for (const auto& id : order_) out.push_back(records_.at(id));
    return out;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return records_.size();
  }

  const std::string& path() const noexcept { return path_; }

 private:
  void index(GenerationRecord r) {
    if (!records_.count(r.id)) order_.push_back(r.id);
    std::size_t n = 0;
    if (std::sscanf(r.id.c_str(), "rec-%zu", &n) == 1) next_id_ = std::max(next_id_, n);
    records_[r.id] = std::move(r);
  }

  void append(const GenerationRecord& r) {
    if (path_.empty()) return;
    std::ofstream out(path_, std::ios::app);
    if (!out) throw ConfigError("cannot append to record log " + path_);
    out << to_json(r).dump() << '\n';
  }

  std::string path_;
  mutable std::mutex mu_;
  std::map<std::string, GenerationRecord> records_;
  std::vector<std::string> order_;
  std::size_t next_id_ = 0;
};

}  // namespace nprompt
