#pragma once

#include <algorithm>
#include <future>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nprompt/config.hpp"
#include "nprompt/constraints.hpp"
#include "nprompt/decoder.hpp"
#include "nprompt/pipeline.hpp"
#include "nprompt/records.hpp"
#include "nprompt/scoring.hpp"
#include "nprompt/workflow.hpp"

namespace nprompt {

struct OptimizeRequest {
  std::string prompt;
  ClauseSelection selection;
  // Defaults to the service seed.
  std::optional<std::uint64_t> seed;
  // Defaults to the service decode settings.
  std::optional<DecodeParams> params;
};

// Builds a request from the /optimize body:
//   {"prompt": str, "selections": {...}, "seed": int, "decode_params": {...}}
inline OptimizeRequest optimize_request_from_json(const json& body, const DecodeParams& defaults) {
  if (!body.is_object()) throw ValidationError("request body must be a JSON object");
  if (!body.contains("prompt") || !body["prompt"].is_string()) throw ValidationError("'prompt' must be a string");
  OptimizeRequest r;
  r.prompt = body["prompt"].get<std::string>();
  if (body.contains("seed") && !body["seed"].is_null()) {
    const auto& seed = body["seed"];
    if (!seed.is_number_integer() || (!seed.is_number_unsigned() && seed.get<std::int64_t>() < 0))
      throw ValidationError("'seed' must be a non-negative integer");
    r.seed = body["seed"].get<std::uint64_t>();
  }
  r.selection = selection_from_json(body.value("selections", json(nullptr)), r.seed.value_or(0));
  if (body.contains("decode_params")) r.params = decode_params_from_json(body["decode_params"], defaults);
  return r;
}

class Engine {
 public:
  Engine(ServiceConfig config, KeywordTaxonomy taxonomy, std::shared_ptr<const LanguageModel> lm,
         ScoringBackends backends, std::shared_ptr<RecordStore> store)
      : config_(std::move(config)),
        taxonomy_(std::move(taxonomy)),
        lm_(std::move(lm)),
        backends_(std::move(backends)),
        store_(std::move(store)) {
    if (!lm_) throw ConfigError("engine needs a language model");
    if (!store_) store_ = std::make_shared<RecordStore>();
  }

  // Loads the taxonomy, the model (or fits SFT on the training corpus), the
  // backends named by the config and the record log.
  static std::unique_ptr<Engine> from_config(const ServiceConfig& config) {
    config.check();
    auto taxonomy = load_taxonomy(config.taxonomy_file());
    std::shared_ptr<const LanguageModel> lm;
    if (!config.model_path.empty()) {
      lm = load_model_file(config.model_path);
    } else {
      const auto corpus = read_corpus_file(config.train_corpus_file());
      auto trained = train_models(corpus, taxonomy, SFTConfig::desk(), std::nullopt, {});
      lm = trained.sft;
    }
    auto backends = make_backends(config, taxonomy);
    auto store = std::make_shared<RecordStore>(config.record_log);
    return std::make_unique<Engine>(config, std::move(taxonomy), std::move(lm), std::move(backends),
                                    std::move(store));
  }

  const ServiceConfig& config() const noexcept { return config_; }
  const KeywordTaxonomy& taxonomy() const noexcept { return taxonomy_; }
  const LanguageModel& model() const noexcept { return *lm_; }
  RecordStore& records() noexcept { return *store_; }

  // Runs extraction, clause construction and constrained decoding without
  // storing anything. The returned record has no id.
  GenerationRecord run(const OptimizeRequest& req) const {
    GenerationRecord rec;
    rec.original_prompt = trim(req.prompt);
    if (rec.original_prompt.empty()) throw ValidationError("prompt is empty");
    rec.prefix = extract_prefix(rec.original_prompt);
    if (rec.prefix.empty()) throw ValidationError("prompt has no subject before the first comma");

    rec.seed = req.seed.value_or(config_.seed);
    rec.selection = req.selection;
    rec.selection.seed = rec.seed;
    rec.params = req.params.value_or(config_.decode);
    rec.params.seed = rec.seed;

    // The model cannot emit a word it does not know, so a negative phrase
    // with such a word holds trivially and is left out of the clauses.
    ClauseSelection effective = rec.selection;
    std::erase_if(effective.negative_phrases, [&](const std::string& phrase) {
      const auto words = split_words(phrase);
      return std::any_of(words.begin(), words.end(), [&](const std::string& w) { return !lm_->vocabulary().find(w); });
    });
    const auto spec = build_clauses(taxonomy_, effective);
    ConstraintAutomaton automaton;
    try {
      automaton = ConstraintAutomaton::compile(spec, lm_->vocabulary());
    } catch (const CompileError& e) {
      throw ValidationError(std::string("cannot use keyword: ") + e.what());
    }
    if (auto bad = automaton.conflicting_clauses(); !bad.empty()) {
      std::string names;
      for (auto c : bad) names += (names.empty() ? "" : ", ") + spec.clauses[c].label;
      throw UnsatisfiableError("clauses cannot be satisfied: every keyword of " + names +
                               " contains a negative phrase");
    }

    const auto& vocab = lm_->vocabulary();
    const TokenSequence prefix = vocab.tokenize(rec.prefix);
    NeuroLogicDecoder decoder(*lm_, automaton, rec.params);
    const auto hyps = decoder.decode(prefix);
    // When nothing met every clause within max_new_tokens this is the best
    // partial result; clause_status and `satisfied` say so.
    const auto& best = hyps.front();
    rec.optimized_prompt = vocab.render(best.tokens).text;
    rec.highlights = decoder.highlight(best);
    const auto status = automaton.status(best.cstate);
    for (std::size_t c = 0; c < status.clauses.size(); ++c)
      rec.clause_status.push_back({static_cast<int>(c), spec.clauses[c].label, status.clauses[c]});
    rec.satisfied = best.satisfied;
    return rec;
  }

  GenerationRecord optimize(const OptimizeRequest& req) { return store_->add(run(req)); }

  // Re-runs a stored record's request; identical inputs give identical text.
  std::string replay(const GenerationRecord& rec) const {
    OptimizeRequest req;
    req.prompt = rec.original_prompt;
    req.selection = rec.selection;
    req.seed = rec.seed;
    req.params = rec.params;
    return run(req).optimized_prompt;
  }

  // Renders the original and optimized prompts with the record's seed and
  // scores both images. Aesthetics are additionally min-max normalized over
  // every scored record.
  GenerationRecord compare(const std::string& id) {
    auto found = store_->get(id);
    if (!found) throw NotFoundError("unknown record '" + id + "'");
    GenerationRecord rec = *found;

    auto gen_u = std::async(std::launch::async, [&] { return backends_.images->generate(rec.original_prompt, rec.seed); });
    auto gen_o = std::async(std::launch::async, [&] { return backends_.images->generate(rec.optimized_prompt, rec.seed); });
    rec.image_u = gen_u.get();
    rec.image_o = gen_o.get();

    auto scored = [&](const Scorer& s, const ImageRef& img) {
      return std::async(std::launch::async, [&s, &img, &rec] {
        try {
          return s.score(rec.original_prompt, img);
        } catch (const TransportError&) {
          throw;
        } catch (const std::exception& e) {
          throw ScorerError(std::string("scoring ") + img.id + " failed: " + e.what());
        }
      });
    };
    auto pu = scored(*backends_.preference, *rec.image_u);
    auto po = scored(*backends_.preference, *rec.image_o);
    auto au = scored(*backends_.aesthetics, *rec.image_u);
    auto ao = scored(*backends_.aesthetics, *rec.image_o);
    Scores s;
    s.pick_u = pu.get();
    s.pick_o = po.get();
    s.aes_u = au.get();
    s.aes_o = ao.get();
    s.preference_pct = 100.0 * preference_probability(s.pick_o, s.pick_u);
    rec.scores = s;
    store_->update(rec);
    return rec;
  }

  // Aesthetics range over every scored record.
  std::pair<double, double> aesthetics_range() const {
    double lo = 0.0, hi = 0.0;
    bool any = false;
    for (const auto& r : store_->all()) {
      if (!r.scores) continue;
      for (double v : {r.scores->aes_u, r.scores->aes_o}) {
        lo = any ? std::min(lo, v) : v;
        hi = any ? std::max(hi, v) : v;
        any = true;
      }
    }
    return {lo, hi};
  }

  json compare_json(const GenerationRecord& rec) const {
    const auto& s = *rec.scores;
    const auto [lo, hi] = aesthetics_range();
    return {{"record_id", rec.id},
            {"image_u", to_json(*rec.image_u)},
            {"image_o", to_json(*rec.image_o)},
            {"pick_u", s.pick_u},
            {"pick_o", s.pick_o},
            {"aes_u", s.aes_u},
            {"aes_o", s.aes_o},
            {"aes_norm_u", normalize_min_max(s.aes_u, lo, hi)},
            {"aes_norm_o", normalize_min_max(s.aes_o, lo, hi)},
            {"preference_pct", s.preference_pct}};
  }

  json optimize_json(const GenerationRecord& rec) const {
    json j = {{"record_id", rec.id},
              {"original_prompt", rec.original_prompt},
              {"prefix", rec.prefix},
              {"optimized_prompt", rec.optimized_prompt},
              {"seed", rec.seed},
              {"satisfied", rec.satisfied},
              {"selections", to_json(rec.selection)},
              {"decode_params", to_json(rec.params)}};
    j["highlights"] = json::array();
    for (const auto& h : rec.highlights) j["highlights"].push_back(to_json(h));
    j["clause_status"] = json::array();
    for (const auto& c : rec.clause_status) j["clause_status"].push_back(to_json(c));
    return j;
  }

  // {"categories": [{"name", "column", "keywords": [...]}, ...]}; keywords are
  // listed as in the catalog, repeats included.
  json keywords_json() const {
    json cats = json::array();
    for (Category c : kCategories)
      cats.push_back({{"name", std::string(category_name(c))},
                      {"column", std::string(category_column(c))},
                      {"keywords", taxonomy_.keywords(c)}});
    return {{"categories", cats}};
  }

 private:
  ServiceConfig config_;
  KeywordTaxonomy taxonomy_;
  std::shared_ptr<const LanguageModel> lm_;
  ScoringBackends backends_;
  std::shared_ptr<RecordStore> store_;
};

}  // namespace nprompt
