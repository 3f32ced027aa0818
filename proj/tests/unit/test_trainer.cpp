#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "nprompt/trainer.hpp"
#include "support/ppo_checks.hpp"
#include "support/scorers.hpp"

using namespace nprompt;

namespace {

KeywordTaxonomy bundled() { return load_taxonomy(std::string(NPROMPT_DATA_DIR) + "/taxonomy.csv"); }

double sentence_log_prob(const LanguageModel& lm, std::vector<std::string> words) {
  TokenSequence seq;
  for (const auto& w : words) seq.push_back(*lm.vocabulary().find(w));
  seq.push_back(kEos);
  return lm.continuation_log_prob(TokenSequence{}, seq);
}

// First single-word keyword of a category.
std::string single_word_keyword(const KeywordTaxonomy& tax, Category c) {
  for (const auto& k : tax.keywords(c))
    if (split_words(k).size() == 1) return k;
  return {};
}

}  // namespace

TEST(SFT, RepeatedSentenceBeatsEveryPermutation) {
  auto vocab = std::make_shared<Vocabulary>(Vocabulary::from_texts({"a boy on a horse"}));
  TableLM init(vocab, 3);
  auto res = sft_train(init, std::vector<std::string>(5, "a boy on a horse"), SFTConfig::desk());
  std::vector<std::string> words{"a", "boy", "on", "a", "horse"};
  const double target = sentence_log_prob(res.model, words);
  std::sort(words.begin(), words.end());
  int others = 0;
  do {
    if (words == std::vector<std::string>{"a", "boy", "on", "a", "horse"}) continue;
    EXPECT_GT(target, sentence_log_prob(res.model, words));
    ++others;
  } while (std::next_permutation(words.begin(), words.end()));
  EXPECT_EQ(others, 59);
}

TEST(SFT, ZeroStepsLeavesModelUnchanged) {
  oracle::Rng rng(4);
  auto vocab = oracle::letter_vocab(3);
  auto init = oracle::random_table_lm(rng, vocab, false);
  SFTConfig cfg;
  cfg.steps = 0;
  auto res = sft_train(*init, {"a b"}, cfg);
  EXPECT_EQ(res.model.rows(), init->rows());
  EXPECT_EQ(res.model.fallback(), init->fallback());
  EXPECT_TRUE(res.log.empty());
}

TEST(SFT, BigramMatchesHandCountedSmoothedRatio) {
  auto vocab = oracle::letter_vocab(3);
  TableLM init(vocab, 2);
  SFTConfig cfg;
  cfg.smoothing = 0.5;
  auto res = sft_train(init, {"a b", "a b", "a b", "a c"}, cfg);
  auto lp = res.model.next_token_log_probs(vocab->tokenize("a").ids());
  // c(a) = 4, five outcomes (a, b, c, </s>, <unk>).
  EXPECT_NEAR(std::exp(lp[static_cast<std::size_t>(*vocab->find("b"))]), 3.5 / 6.5, 1e-12);
  EXPECT_NEAR(std::exp(lp[static_cast<std::size_t>(*vocab->find("c"))]), 1.5 / 6.5, 1e-12);
  EXPECT_NEAR(std::exp(lp[static_cast<std::size_t>(kEos)]), 0.5 / 6.5, 1e-12);
}

TEST(SFT, LogsPerplexityAndBacksOffForUnseenContexts) {
  auto vocab = oracle::letter_vocab(5);
  TableLM init(vocab, 3);
  SFTConfig cfg;
  cfg.steps = 100;
  cfg.log_points = 4;
  auto res = sft_train(init, {"a b c", "b c d", "a b d"}, cfg, {"a b c"});
  ASSERT_EQ(res.log.size(), 4u);
  EXPECT_EQ(res.log.back().step, 100);
  EXPECT_TRUE(res.log.front().heldout_perplexity.has_value());
  EXPECT_LT(res.log.back().train_perplexity, perplexity(init, {"a b c", "b c d", "a b d"}));
  // "e" never occurs; its contexts read the unigram fallback.
  const auto e = *vocab->find("e");
  EXPECT_EQ(res.model.context_key(std::vector<TokenId>{e, e}), (ContextKey{e, e}));
  auto lp = res.model.next_token_log_probs(std::vector<TokenId>{e, e});
  EXPECT_GT(lp[static_cast<std::size_t>(*vocab->find("b"))], lp[static_cast<std::size_t>(kUnk)]);
  EXPECT_THROW(sft_train(init, {}, cfg), std::invalid_argument);
}

TEST(PPO, FinalizeFoldsKlIntoPerTokenReward) {
  Episode ep;
  ep.actions = {4, 5};
  ep.old_log_probs = {-1.0, -2.0};
  ep.ref_log_probs = {-1.5, -1.0};
  ep.values = {0.1, 0.2};
  ep.reward = 1.0;
  finalize_episode(ep, 0.2);
  EXPECT_NEAR(ep.returns[1], 1.2, 1e-12);
  EXPECT_NEAR(ep.returns[0], 1.1, 1e-12);
  EXPECT_NEAR(ep.advantages[0], 1.0, 1e-12);
  EXPECT_NEAR(ep.advantages[1], 1.0, 1e-12);
}

TEST(PPO, ClippedObjectiveGradientMatchesFiniteDifferences) {
  oracle::Rng rng(31);
  int with_clipping = 0;
  for (int point = 0; point < 20; ++point) {
    auto g = ppo_checks::random_gradient_point(rng);
    std::vector<const Episode*> batch;
    for (const auto& ep : g.batch) batch.push_back(&ep);
    with_clipping += ppo_loss(g.policy->model, g.policy->value, batch, g.config).clipped > 0 ? 1 : 0;
    auto check = ppo_checks::check_gradient(g);
    EXPECT_LT(check.relative_error, 1e-4) << "point " << point;
    EXPECT_GT(check.analytic_norm, 0.0);
  }
  EXPECT_GT(with_clipping, 0);
}

TEST(PPO, ZeroAdvantageBatchLeavesParametersUnchanged) {
  oracle::Rng rng(8);
  for (int i = 0; i < 5; ++i) EXPECT_LE(ppo_checks::zero_advantage_drift(rng), 1e-12);
}

TEST(PPO, ZeroLearningRateIsIdentity) {
  oracle::Rng rng(9);
  auto g = ppo_checks::random_gradient_point(rng);
  PPOConfig c;
  c.batch_size = static_cast<int>(g.batch.size());
  c.learning_rate = 0.0;
  auto [next, stats] = ppo_update(*g.policy, g.batch, c);
  EXPECT_EQ(next.model.rows(), g.policy->model.rows());
  EXPECT_EQ(next.model.fallback(), g.policy->model.fallback());
  EXPECT_EQ(next.value.values, g.policy->value.values);
  EXPECT_TRUE(std::isfinite(stats.kl));
}

TEST(PPO, NonFiniteLossAborts) {
  oracle::Rng rng(10);
  auto g = ppo_checks::random_gradient_point(rng);
  g.batch[0].advantages[0] = std::nan("");
  PPOConfig c;
  c.batch_size = static_cast<int>(g.batch.size());
  c.minibatch_size = static_cast<int>(g.batch.size());
  EXPECT_THROW(ppo_update(*g.policy, g.batch, c), TrainingError);
}

TEST(PPO, ConfigPresetsAndValidation) {
  auto paper = PPOConfig::paper();
  EXPECT_EQ(paper.episodes, 10000);
  EXPECT_EQ(paper.batch_size, 128);
  EXPECT_EQ(paper.minibatch_size, 1);
  EXPECT_EQ(paper.ppo_epochs, 4);
  EXPECT_DOUBLE_EQ(paper.learning_rate, 5e-5);
  EXPECT_DOUBLE_EQ(paper.value_loss_coef, 0.1);
  EXPECT_DOUBLE_EQ(paper.kl_coef, 0.2);
  auto desk = PPOConfig::desk();
  EXPECT_EQ(desk.episodes, 500);
  EXPECT_EQ(desk.batch_size, 32);
  EXPECT_EQ(SFTConfig::paper().steps, 15000);
  PPOConfig bad;
  bad.minibatch_size = 256;
  EXPECT_THROW(bad.check(), std::invalid_argument);
}

TEST(PPO, BanditLearnsTheRewardedToken) {
  ppo_checks::Bandit bandit;
  int converged = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto run = bandit.train(seed);
    EXPECT_EQ(run.stats.size(), 200u);
    converged += bandit.probability_of_best(run.policy) > 0.9 ? 1 : 0;
    for (const auto& s : run.stats) EXPECT_TRUE(std::isfinite(s.kl));
  }
  EXPECT_GE(converged, 4);
}

TEST(PPO, DoublingKlCoefficientDoesNotIncreaseFinalKl) {
  ppo_checks::Bandit bandit;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto low = bandit.train(seed, 0.2);
    auto high = bandit.train(seed, 0.4);
    EXPECT_LE(kl_to_reference(high.policy, {}), kl_to_reference(low.policy, {}) + 1e-12) << "seed " << seed;
  }
}

// Sliding 50-update mean of the batch reward. Batch rewards are sampled, so
// a dip of at most kMovingAverageSlack between consecutive windows is noise.
TEST(PPO, RewardMovingAverageIsNonDecreasing) {
  constexpr double kMovingAverageSlack = 0.01;
  ppo_checks::Bandit bandit;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto run = bandit.train(seed);
    std::vector<double> r;
    for (const auto& s : run.stats) r.push_back(s.mean_reward);
    double window = 0.0;
    for (int i = 0; i < 50; ++i) window += r[static_cast<std::size_t>(i)];
    double prev = window / 50.0;
    for (std::size_t i = 50; i < r.size(); ++i) {
      window += r[i] - r[i - 50];
      const double avg = window / 50.0;
      EXPECT_GE(avg, prev - kMovingAverageSlack) << "seed " << seed << " update " << i;
      prev = avg;
    }
    EXPECT_GT(prev, r.front());
  }
}

TEST(Episode, ThreeKeywordsOverBarePrefixRewardPointThree) {
  auto tax = bundled();
  auto counter = std::make_shared<const KeywordCounter>(tax);
  StubImageBackend images;
  StubPreferenceScorer pick(counter);
  std::vector<std::string> kws{single_word_keyword(tax, Category::style), single_word_keyword(tax, Category::format),
                               single_word_keyword(tax, Category::vibe)};
  std::vector<std::string> words{"a", "boy", "on", "horse", ","};
  for (const auto& k : kws) {
    ASSERT_FALSE(k.empty());
    words.push_back(k);
  }
  auto vocab = std::make_shared<Vocabulary>(words);
  UniformLM lm(vocab);
  auto spec = parse_constraint_spec(kws[0] + "\n" + kws[1] + "\n" + kws[2]);
  auto automaton = ConstraintAutomaton::compile(spec, *vocab);
  Backends backends{images, pick, 11};
  auto r = run_episode(lm, "a boy on a horse", automaton, {}, backends);
  EXPECT_EQ(r.x_u, "a boy on a horse");
  EXPECT_EQ(r.x_o.rfind("a boy on a horse", 0), 0u);
  EXPECT_EQ(counter->categories(r.x_o), 3);
  EXPECT_NEAR(r.reward, 0.3, 1e-12);
  auto again = run_episode(lm, "a boy on a horse", automaton, {}, backends);
  EXPECT_EQ(again.x_o, r.x_o);
  EXPECT_EQ(again.reward, r.reward);
}

TEST(Episode, EchoingThePrefixEarnsNothing) {
  auto tax = bundled();
  auto counter = std::make_shared<const KeywordCounter>(tax);
  StubImageBackend images;
  StubPreferenceScorer pick(counter);
  auto vocab = std::make_shared<Vocabulary>(std::vector<std::string>{"a", "boy", "on", "horse"});
  TableLM lm(vocab, 2);
  std::vector<double> row(vocab->size(), 0.0);
  row[static_cast<std::size_t>(kEos)] = 10.0;
  lm.set_fallback(row);
  auto automaton = ConstraintAutomaton::compile({}, *vocab);
  auto r = run_episode(lm, "a boy on a horse", automaton, {}, Backends{images, pick, 2});
  EXPECT_EQ(r.x_o, r.x_u);
  EXPECT_EQ(r.reward, 0.0);
}

TEST(Episode, BackendFailureNamesTheEpisode) {
  auto vocab = std::make_shared<Vocabulary>(std::vector<std::string>{"a"});
  UniformLM lm(vocab);
  auto automaton = ConstraintAutomaton::compile({}, *vocab);
  StubImageBackend images;
  testing_support::FixedScorer empty({});
  try {
    run_episode(lm, "a", automaton, {}, Backends{images, empty, 0}, 7);
    FAIL() << "expected ScorerError";
  } catch (const ScorerError& e) {
    EXPECT_NE(std::string(e.what()).find("episode 7"), std::string::npos);
  }
}
