#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nprompt/config.hpp"
#include "nprompt/language_model.hpp"
#include "nprompt/pipeline.hpp"
#include "nprompt/remote.hpp"
#include "nprompt/scoring.hpp"
#include "nprompt/trainer.hpp"

namespace nprompt {

// Image generator plus the two scorers used for rewards and reports.
struct ScoringBackends {
  std::shared_ptr<const ImageBackend> images;
  std::shared_ptr<const Scorer> preference;
  std::shared_ptr<const Scorer> aesthetics;
};

inline ScoringBackends make_stub_backends(const KeywordTaxonomy& taxonomy) {
  auto counter = std::make_shared<const KeywordCounter>(taxonomy);
  return {std::make_shared<StubImageBackend>(), std::make_shared<StubPreferenceScorer>(counter),
          std::make_shared<StubAestheticsScorer>(counter)};
}

inline ScoringBackends make_backends(const ServiceConfig& config, const KeywordTaxonomy& taxonomy) {
  if (config.mode == BackendMode::stub) return make_stub_backends(taxonomy);
  config.check();
  auto limiter = std::make_shared<InFlightLimiter>(config.max_in_flight);
  return {std::make_shared<HttpImageBackend>(config.image_backend_url, config.image_steps, config.retry, limiter),
          std::make_shared<HttpScorer>(config.preference_scorer_url, config.retry, limiter),
          std::make_shared<HttpScorer>(config.aesthetics_scorer_url, config.retry, limiter)};
}

// Corpus words plus every word of every taxonomy keyword, so any catalog
// keyword can be forced by a constraint.
inline std::shared_ptr<const Vocabulary> build_vocabulary(const std::vector<std::string>& corpus,
                                                          const KeywordTaxonomy& taxonomy) {
  auto v = std::make_shared<Vocabulary>(Vocabulary::from_texts(corpus));
  for (const auto& k : taxonomy.all_keywords())
    for (const auto& w : split_words(k)) v->add(w);
  return v;
}

// Prefixes of the corpus prompts that pass the overlap filter.
inline std::vector<TokenSequence> training_prefixes(const Vocabulary& vocab, const std::vector<std::string>& corpus,
                                                    double threshold = kDefaultOverlapThreshold) {
  std::vector<TokenSequence> out;
  for (const auto& p : corpus) {
    auto rec = prepare_record(p, threshold);
    if (rec.kept) out.push_back(vocab.tokenize(rec.prefix));
  }
  return out;
}

struct TrainingCallbacks {
  std::function<void(const SFTLogEntry&)> on_sft;
  std::function<void(const PPOStats&)> on_ppo;
};

struct TrainedModels {
  std::shared_ptr<const Vocabulary> vocab;
  std::shared_ptr<const TableLM> sft;
  // Null when PPO was skipped.
  std::shared_ptr<const TableLM> ppo;
  std::vector<SFTLogEntry> sft_log;
  std::vector<PPOStats> ppo_log;
};

inline constexpr int kPolicyOrder = 3;

// SFT from a uniform table, then (optionally) PPO from the SFT model with the
// image-pair reward.
inline TrainedModels train_models(const std::vector<std::string>& corpus, const KeywordTaxonomy& taxonomy,
                                  const SFTConfig& sft_config, const std::optional<PPOConfig>& ppo_config,
                                  const ScoringBackends& backends, const TrainingCallbacks& callbacks = {},
                                  const std::vector<std::string>& heldout = {}) {
  TrainedModels out;
  out.vocab = build_vocabulary(corpus, taxonomy);
  TableLM init(out.vocab, kPolicyOrder);
  auto sft = sft_train(init, corpus, sft_config, heldout);
  out.sft_log = sft.log;
  if (callbacks.on_sft)
    for (const auto& e : sft.log) callbacks.on_sft(e);
  out.sft = std::make_shared<const TableLM>(std::move(sft.model));
  if (!ppo_config) return out;

  auto reward_fn = make_image_reward(out.vocab, *backends.images, *backends.preference, ppo_config->seed);
  auto policy = ppo_train(Policy(*out.sft), training_prefixes(*out.vocab, corpus), *ppo_config, reward_fn,
                          [&](const PPOStats& s) {
                            out.ppo_log.push_back(s);
                            if (callbacks.on_ppo) callbacks.on_ppo(s);
                          });
  out.ppo = std::make_shared<const TableLM>(std::move(policy.model));
  return out;
}

}  // namespace nprompt
