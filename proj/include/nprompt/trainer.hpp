#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "nprompt/constraints.hpp"
#include "nprompt/decoder.hpp"
#include "nprompt/errors.hpp"
#include "nprompt/language_model.hpp"
#include "nprompt/scoring.hpp"

namespace nprompt {

// ---------------------------------------------------------------------------
// Supervised fine-tuning
// ---------------------------------------------------------------------------

struct SFTConfig {
  int steps = 2000;
  // Paper-scale optimizer settings; kept in run snapshots. The tabular policy
  // is fitted along the closed-form path below and does not read them.
  double learning_rate = 5e-5;
  int batch_size = 256;
  double smoothing = 0.05;
  int log_points = 10;

  static SFTConfig paper() {
    SFTConfig c;
    c.steps = 15000;
    return c;
  }
  static SFTConfig desk() { return SFTConfig{}; }
};

struct SFTLogEntry {
  int step = 0;
  double train_perplexity = 0.0;
  std::optional<double> heldout_perplexity;
};

struct SFTResult {
  TableLM model;
  std::vector<SFTLogEntry> log;
};

// exp of the mean negative log-likelihood per token (</s> included).
inline double perplexity(const LanguageModel& lm, const std::vector<std::string>& corpus) {
  double nll = 0.0;
  std::size_t n = 0;
  for (const auto& line : corpus) {
    TokenSequence seq = lm.vocabulary().tokenize(line);
    seq.push_back(kEos);
    nll -= lm.continuation_log_prob(TokenSequence{}, seq);
    n += seq.size();
  }
  return n == 0 ? 1.0 : std::exp(nll / static_cast<double>(n));
}

// Fits the logit table to Laplace-smoothed n-gram statistics of the corpus:
// rows for every context seen at each order up to the table's, and the
// unigram distribution as the fallback, so unseen contexts back off. Step s of
// `steps` sets every row to
//   log((1 - s/steps) * p_init + (s/steps) * p_corpus),
// which ends exactly at the smoothed corpus log-probabilities.
inline SFTResult sft_train(const TableLM& init, const std::vector<std::string>& corpus, const SFTConfig& config,
                           const std::vector<std::string>& heldout = {}) {
  if (corpus.empty()) throw std::invalid_argument("SFT corpus is empty");
  if (config.steps <= 0) return {init, {}};

  const auto vocab = init.vocabulary_ptr();
  const std::size_t v = vocab->size();
  // targets[k - 1] is the order-k model; it serves keys of length k - 1.
  std::vector<NGramLM> targets;
  for (int k = 1; k <= init.order(); ++k) targets.push_back(NGramLM::train(vocab, corpus, k, config.smoothing));

  std::vector<ContextKey> keys;
  for (const auto& [k, row] : init.rows()) keys.push_back(k);
  for (int k = 2; k <= init.order(); ++k)
    for (const auto& [key, row] : targets[static_cast<std::size_t>(k - 1)].table()) keys.push_back(key);
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());

  auto blend = [&](const std::vector<double>& init_logits, const ContextKey& key, double w) {
    std::vector<double> p0 = init_logits;
    log_softmax_outcomes(p0);
    std::vector<double> pt(v);
    targets[key.size()].next_token_log_probs(key, pt);
    std::vector<double> row(v, 0.0);
    for (std::size_t i = 0; i < v; ++i) {
      if (!Vocabulary::is_outcome(static_cast<TokenId>(i))) continue;
      row[i] = w >= 1.0 ? pt[i] : std::log((1.0 - w) * std::exp(p0[i]) + w * std::exp(pt[i]));
    }
    return row;
  };

  auto build = [&](double w) {
    TableLM lm(vocab, init.order());
    lm.set_fallback(blend(init.fallback(), ContextKey{}, w));
    for (const auto& k : keys) lm.set_logits(k, blend(init.logits(k), k, w));
    return lm;
  };

  std::vector<int> marks;
  const int points = std::max(1, std::min(config.log_points, config.steps));
  for (int i = 1; i <= points; ++i) marks.push_back(static_cast<int>((static_cast<long long>(config.steps) * i) / points));
  marks.erase(std::unique(marks.begin(), marks.end()), marks.end());

  SFTResult result{init, {}};
  for (int step : marks) {
    const double w = static_cast<double>(step) / static_cast<double>(config.steps);
    TableLM lm = build(w);
    SFTLogEntry e;
    e.step = step;
    e.train_perplexity = perplexity(lm, corpus);
    if (!heldout.empty()) e.heldout_perplexity = perplexity(lm, heldout);
    result.log.push_back(e);
    if (step == config.steps) result.model = std::move(lm);
  }
  return result;
}

// ---------------------------------------------------------------------------
// PPO
// ---------------------------------------------------------------------------

struct PPOConfig {
  int episodes = 10000;
  int batch_size = 128;
  int minibatch_size = 1;
  int ppo_epochs = 4;
  double learning_rate = 5e-5;
  double value_loss_coef = 0.1;
  double kl_coef = 0.2;
  double clip_ratio = 0.2;
  int max_new_tokens = 16;
  std::uint64_t seed = 0;

  // Hyperparameters of the reported GPT-2 run.
  static PPOConfig paper() { return PPOConfig{}; }

  // CI-sized run over the logit-table policy. Table logits need a much
  // larger step than transformer weights to move within a few updates.
  static PPOConfig desk() {
    PPOConfig c;
    c.episodes = 500;
    c.batch_size = 32;
    c.learning_rate = 2.0;
    return c;
  }

  void check() const {
    if (episodes <= 0 || batch_size <= 0 || minibatch_size <= 0 || ppo_epochs <= 0 || max_new_tokens <= 0)
      throw std::invalid_argument("PPO counts must be positive");
    if (minibatch_size > batch_size) throw std::invalid_argument("minibatch_size exceeds batch_size");
    if (learning_rate < 0.0 || value_loss_coef < 0.0 || kl_coef < 0.0 || clip_ratio <= 0.0)
      throw std::invalid_argument("PPO coefficients must be non-negative");
  }
};

struct ValueTable {
  std::unordered_map<ContextKey, double, ContextKeyHash> values;

  double get(const ContextKey& k) const {
    auto it = values.find(k);
    return it == values.end() ? 0.0 : it->second;
  }
  double& at(const ContextKey& k) { return values[k]; }
};

// Logit-table policy, its value baseline, and the frozen post-SFT reference.
struct Policy {
  TableLM model;
  ValueTable value;
  std::shared_ptr<const TableLM> reference;

  explicit Policy(TableLM sft) : model(std::move(sft)), reference(std::make_shared<const TableLM>(model)) {}
};

struct Episode {
  TokenSequence prefix;
  std::vector<TokenId> actions;
  // Context key in force before each action.
  std::vector<ContextKey> states;
  std::vector<double> old_log_probs;
  std::vector<double> ref_log_probs;
  std::vector<double> values;
  double reward = 0.0;
  // Filled by finalize_episode.
  std::vector<double> returns;
  std::vector<double> advantages;

  std::size_t length() const noexcept { return actions.size(); }
};

// Per-token reward: the terminal reward on the last action minus
// kl_coef * (log pi_old - log pi_ref) on every action. Returns are undiscounted
// reward-to-go; advantages subtract the rollout-time value baseline.
inline void finalize_episode(Episode& ep, double kl_coef) {
  const std::size_t n = ep.length();
  ep.returns.assign(n, 0.0);
  ep.advantages.assign(n, 0.0);
  double to_go = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    double r = -kl_coef * (ep.old_log_probs[i] - ep.ref_log_probs[i]);
    if (i + 1 == n) r += ep.reward;
    to_go += r;
    ep.returns[i] = to_go;
    ep.advantages[i] = to_go - ep.values[i];
  }
}

inline double uniform01(std::uint64_t& state) {
  return static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;
}

// Samples a continuation of `prefix` from the policy until </s> or
// max_new_tokens, recording everything PPO needs.
inline Episode sample_episode(const Policy& policy, const TokenSequence& prefix, int max_new_tokens,
                              std::uint64_t& rng) {
  Episode ep;
  ep.prefix = prefix;
  std::vector<TokenId> ctx = prefix.ids();
  const std::size_t v = policy.model.vocabulary().size();
  std::vector<double> lp(v), ref(v);
  for (int i = 0; i < max_new_tokens; ++i) {
    ContextKey key = policy.model.context_key(ctx);
    policy.model.log_probs_for_key(key, lp);
    double u = uniform01(rng);
    TokenId pick = kEos;
    for (std::size_t t = 0; t < v; ++t) {
      if (!Vocabulary::is_outcome(static_cast<TokenId>(t))) continue;
      pick = static_cast<TokenId>(t);
      u -= std::exp(lp[t]);
      if (u < 0.0) break;
    }
    policy.reference->log_probs_for_key(key, ref);
    ep.actions.push_back(pick);
    ep.old_log_probs.push_back(lp[static_cast<std::size_t>(pick)]);
    ep.ref_log_probs.push_back(ref[static_cast<std::size_t>(pick)]);
    ep.values.push_back(policy.value.get(key));
    ep.states.push_back(std::move(key));
    ctx.push_back(pick);
    if (pick == kEos) break;
  }
  return ep;
}

struct PPOGradient {
  std::unordered_map<ContextKey, std::vector<double>, ContextKeyHash> logits;
  std::unordered_map<ContextKey, double, ContextKeyHash> values;
};

struct PPOLoss {
  double total = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  std::size_t tokens = 0;
  std::size_t clipped = 0;
  PPOGradient grad;
};

// Mean over tokens of
//   -min(rho * A, clip(rho, 1 - eps, 1 + eps) * A) + c_v * 0.5 * (V(s) - G)^2
// with rho = pi(a|s) / pi_old(a|s), and its gradient with respect to the
// policy logits and the value table.
inline PPOLoss ppo_loss(const TableLM& model, const ValueTable& value, const std::vector<const Episode*>& batch,
                        const PPOConfig& config) {
  PPOLoss out;
  for (const auto* ep : batch) out.tokens += ep->length();
  if (out.tokens == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(out.tokens);
  const std::size_t v = model.vocabulary().size();
  std::vector<double> lp(v);
  for (const auto* ep : batch) {
    for (std::size_t t = 0; t < ep->length(); ++t) {
      const auto& key = ep->states[t];
      const auto a = static_cast<std::size_t>(ep->actions[t]);
      model.log_probs_for_key(key, lp);
      const double rho = std::exp(lp[a] - ep->old_log_probs[t]);
      const double adv = ep->advantages[t];
      const double clipped_rho = std::clamp(rho, 1.0 - config.clip_ratio, 1.0 + config.clip_ratio);
      const double surr1 = rho * adv;
      const double surr2 = clipped_rho * adv;
      out.policy_loss -= std::min(surr1, surr2) * inv_n;
      if (surr2 < surr1) {
        ++out.clipped;
      } else if (adv != 0.0) {
        // d(-rho * A)/d logit_j = -A * rho * (1[j == a] - pi_j)
        auto& g = out.grad.logits[key];
        if (g.empty()) g.assign(v, 0.0);
        const double scale = -adv * rho * inv_n;
        for (std::size_t j = 0; j < v; ++j)
          if (Vocabulary::is_outcome(static_cast<TokenId>(j))) g[j] -= scale * std::exp(lp[j]);
        g[a] += scale;
      }
      const double diff = value.get(key) - ep->returns[t];
      out.value_loss += 0.5 * diff * diff * inv_n;
      out.grad.values[key] += config.value_loss_coef * diff * inv_n;
    }
  }
  out.total = out.policy_loss + config.value_loss_coef * out.value_loss;
  return out;
}

struct PPOStats {
  int update = 0;
  double mean_reward = 0.0;
  // Mean over episodes of sum_t (log pi_old - log pi_ref).
  double kl = 0.0;
  double clip_fraction = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
};

inline void apply_gradient(TableLM& model, ValueTable& value, const PPOGradient& grad, double lr) {
  for (const auto& [key, g] : grad.logits)
    for (double x : g)
      if (!std::isfinite(x)) throw TrainingError("non-finite policy gradient");
  for (const auto& [key, g] : grad.values)
    if (!std::isfinite(g)) throw TrainingError("non-finite value gradient");
  if (lr == 0.0) return;
  for (const auto& [key, g] : grad.logits) {
    auto& row = model.mutable_logits(key);
    for (std::size_t j = 0; j < g.size(); ++j) row[j] -= lr * g[j];
  }
  for (const auto& [key, g] : grad.values) value.at(key) -= lr * g;
}

// Runs ppo_epochs passes of minibatch SGD over a finalized batch.
inline std::pair<Policy, PPOStats> ppo_update(const Policy& policy, const std::vector<Episode>& batch,
                                              const PPOConfig& config, std::uint64_t shuffle_seed = 0) {
  config.check();
  if (batch.empty()) throw std::invalid_argument("PPO batch is empty");
  Policy next = policy;
  PPOStats stats;
  for (const auto& ep : batch) {
    stats.mean_reward += ep.reward;
    for (std::size_t t = 0; t < ep.length(); ++t) stats.kl += ep.old_log_probs[t] - ep.ref_log_probs[t];
  }
  stats.mean_reward /= static_cast<double>(batch.size());
  stats.kl /= static_cast<double>(batch.size());

  std::vector<std::size_t> order(batch.size());
  std::iota(order.begin(), order.end(), 0);
  std::uint64_t rng = shuffle_seed;
  std::size_t evaluated = 0, clipped = 0, passes = 0;
  for (int epoch = 0; epoch < config.ppo_epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(splitmix64(rng) % i)]);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.minibatch_size)) {
      std::vector<const Episode*> mb;
      for (std::size_t j = start; j < std::min(order.size(), start + static_cast<std::size_t>(config.minibatch_size)); ++j)
        mb.push_back(&batch[order[j]]);
      auto loss = ppo_loss(next.model, next.value, mb, config);
      if (!std::isfinite(loss.total))
        throw TrainingError("non-finite PPO loss at epoch " + std::to_string(epoch));
      apply_gradient(next.model, next.value, loss.grad, config.learning_rate);
      evaluated += loss.tokens;
      clipped += loss.clipped;
      stats.policy_loss += loss.policy_loss;
      stats.value_loss += loss.value_loss;
      ++passes;
    }
  }
  stats.clip_fraction = evaluated ? static_cast<double>(clipped) / static_cast<double>(evaluated) : 0.0;
  stats.policy_loss /= static_cast<double>(passes);
  stats.value_loss /= static_cast<double>(passes);
  return {std::move(next), stats};
}

// Reward of a sampled continuation given its prefix.
using RewardFn = std::function<double(const TokenSequence& prefix, const TokenSequence& continuation)>;

// Exact KL(pi || pi_ref) at one context.
inline double kl_to_reference(const Policy& policy, std::span<const TokenId> context) {
  const std::size_t v = policy.model.vocabulary().size();
  std::vector<double> lp(v), ref(v);
  const auto key = policy.model.context_key(context);
  policy.model.log_probs_for_key(key, lp);
  policy.reference->log_probs_for_key(key, ref);
  double kl = 0.0;
  for (std::size_t i = 0; i < v; ++i)
    if (Vocabulary::is_outcome(static_cast<TokenId>(i))) kl += std::exp(lp[i]) * (lp[i] - ref[i]);
  return kl;
}

// Full training loop: episodes / batch_size rollout waves, each followed by a
// PPO update. `on_update` sees the stats of every update.
inline Policy ppo_train(Policy policy, const std::vector<TokenSequence>& prefixes, const PPOConfig& config,
                        const RewardFn& reward_fn, const std::function<void(const PPOStats&)>& on_update = {}) {
  config.check();
  if (prefixes.empty()) throw std::invalid_argument("PPO needs at least one prefix");
  std::uint64_t rng = config.seed ^ 0x5eedull;
  const int updates = (config.episodes + config.batch_size - 1) / config.batch_size;
  for (int u = 0; u < updates; ++u) {
    std::vector<Episode> batch;
    batch.reserve(static_cast<std::size_t>(config.batch_size));
    for (int b = 0; b < config.batch_size; ++b) {
      const auto& prefix = prefixes[static_cast<std::size_t>(splitmix64(rng) % prefixes.size())];
      Episode ep = sample_episode(policy, prefix, config.max_new_tokens, rng);
      TokenSequence cont(ep.actions);
      ep.reward = reward_fn(prefix, cont);
      finalize_episode(ep, config.kl_coef);
      batch.push_back(std::move(ep));
    }
    auto [next, stats] = ppo_update(policy, batch, config, splitmix64(rng));
    stats.update = u + 1;
    policy = std::move(next);
    if (on_update) on_update(stats);
  }
  return policy;
}

// ---------------------------------------------------------------------------
// Episodes against image and scoring backends
// ---------------------------------------------------------------------------

struct Backends {
  const ImageBackend& images;
  const Scorer& scorer;
  std::uint64_t seed = 0;
};

struct EpisodeResult {
  std::string x_u;
  std::string x_o;
  ImageRef y_u;
  ImageRef y_o;
  double reward = 0.0;
};

// Text of the prefix followed by the generated tokens, </s> dropped.
inline std::string render_prompt(const Vocabulary& vocab, const TokenSequence& tokens) {
  return vocab.detokenize(tokens);
}

// Decodes x_o from x_u, renders both images with the same seed and scores
// the pair. Backend failures are re-raised with the episode index attached.
inline EpisodeResult run_episode(const LanguageModel& policy, std::string_view prefix_text,
                                 const ConstraintAutomaton& automaton, const DecodeParams& params,
                                 const Backends& backends, std::size_t episode_index = 0) {
  const auto& vocab = policy.vocabulary();
  const TokenSequence prefix = vocab.tokenize(prefix_text);
  const auto hyps = decode(policy, prefix, automaton, params);
  EpisodeResult r;
  r.x_u = vocab.detokenize(prefix);
  r.x_o = render_prompt(vocab, hyps.front().tokens);
  const std::string where = "episode " + std::to_string(episode_index) + ": ";
  try {
    r.y_u = backends.images.generate(r.x_u, backends.seed);
    r.y_o = backends.images.generate(r.x_o, backends.seed);
    r.reward = reward(r.x_u, r.y_u, r.y_o, backends.scorer);
  } catch (const TransportError& e) {
    throw TransportError(where + e.what(), e.attempts());
  } catch (const ScorerError& e) {
    throw ScorerError(where + e.what());
  }
  return r;
}

// Reward for sampled rollouts: both texts rendered to images with one seed and
// scored by `scorer`.
inline RewardFn make_image_reward(std::shared_ptr<const Vocabulary> vocab, const ImageBackend& images,
                                  const Scorer& scorer, std::uint64_t seed) {
  return [vocab, &images, &scorer, seed](const TokenSequence& prefix, const TokenSequence& cont) {
    TokenSequence full = prefix;
    full.append(cont);
    const std::string x_u = vocab->detokenize(prefix);
    const std::string x_o = vocab->detokenize(full);
    return reward(x_u, images.generate(x_u, seed), images.generate(x_o, seed), scorer);
  };
}

}  // namespace nprompt
