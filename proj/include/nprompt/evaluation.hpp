#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nprompt/constraints.hpp"
#include "nprompt/decoder.hpp"
#include "nprompt/errors.hpp"
#include "nprompt/pipeline.hpp"
#include "nprompt/scoring.hpp"
#include "nprompt/workflow.hpp"

namespace nprompt {

enum class Condition { prefix, human, sft_only, no_ppo, no_neurologic, full };

inline constexpr std::array<Condition, 6> kAllConditions = {Condition::prefix,  Condition::human,
                                                            Condition::sft_only, Condition::no_ppo,
                                                            Condition::no_neurologic, Condition::full};

inline std::string_view condition_key(Condition c) {
  switch (c) {
    case Condition::prefix: return "prefix";
    case Condition::human: return "human";
    case Condition::sft_only: return "sft_only";
    case Condition::no_ppo: return "no_ppo";
    case Condition::no_neurologic: return "no_neurologic";
    case Condition::full: return "full";
  }
  return "?";
}

inline std::string_view condition_label(Condition c) {
  switch (c) {
    case Condition::prefix: return "Original prefix";
    case Condition::human: return "Original (human) prompt";
    case Condition::sft_only: return "SFT only";
    case Condition::no_ppo: return "w/o PPO";
    case Condition::no_neurologic: return "w/o NeuroLogic";
    case Condition::full: return "Full pipeline";
  }
  return "?";
}

// Published aesthetics of the same rows, measured with real image and
// aesthetics models. Shown for reference only.
inline constexpr double reference_aesthetics(Condition c) {
  switch (c) {
    case Condition::prefix: return 5.64;
    case Condition::human: return 5.92;
    case Condition::sft_only: return 6.02;
    case Condition::no_ppo: return 6.05;
    case Condition::no_neurologic: return 6.22;
    case Condition::full: return 6.27;
  }
  return 0.0;
}

// Comma-separated condition keys, or "all".
inline std::vector<Condition> parse_conditions(std::string_view text) {
  if (trim(text) == "all") return {kAllConditions.begin(), kAllConditions.end()};
  std::vector<Condition> out;
  std::string item;
  std::istringstream in{std::string(text)};
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    bool found = false;
    for (Condition c : kAllConditions) {
      if (condition_key(c) == item) {
        if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
        found = true;
      }
    }
    if (!found) throw ValidationError("unknown condition '" + item + "'");
  }
  if (out.empty()) throw ValidationError("no conditions selected");
  return out;
}

struct SignTest {
  int wins = 0;
  int losses = 0;
  int ties = 0;
  // One-sided: P(X >= wins), X ~ Binomial(wins + losses, 1/2).
  double p_value = 1.0;
};

inline SignTest sign_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("sign test needs paired samples");
  SignTest t;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] > b[i]) ++t.wins;
    else if (a[i] < b[i]) ++t.losses;
    else ++t.ties;
  }
  const int n = t.wins + t.losses;
  if (n == 0) return t;
  double p = 0.0;
  for (int k = t.wins; k <= n; ++k)
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) - n * std::log(2.0));
  t.p_value = std::min(1.0, p);
  return t;
}

struct ConditionResult {
  Condition condition = Condition::prefix;
  std::vector<std::string> prompts;
  std::vector<double> aesthetics;
  std::vector<double> preference;
  double mean_aesthetics = 0.0;
  double mean_preference = 0.0;
  // Mean over prompts of 100 * P(this image preferred over the prefix image).
  double preference_pct = 0.0;
  // Constrained conditions: prompts whose output met every clause.
  std::optional<int> satisfied;
};

struct OrderingCheck {
  Condition better = Condition::full;
  Condition worse = Condition::prefix;
  double mean_better = 0.0;
  double mean_worse = 0.0;
  SignTest test;
  bool holds(double alpha) const { return mean_better > mean_worse && test.p_value < alpha; }
};

struct EvalReport {
  std::string mode;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::string prompt_set_hash;
  std::vector<ConditionResult> rows;
  std::vector<OrderingCheck> ordering;

  const ConditionResult* find(Condition c) const {
    for (const auto& r : rows)
      if (r.condition == c) return &r;
    return nullptr;
  }
};

// Models behind the decoded conditions. The PPO model may be the SFT model
// when no PPO checkpoint exists.
struct EvalModels {
  std::shared_ptr<const LanguageModel> sft;
  std::shared_ptr<const LanguageModel> ppo;
};

struct EvalOptions {
  std::size_t n = 200;
  std::vector<Condition> conditions{kAllConditions.begin(), kAllConditions.end()};
  std::uint64_t seed = 0;
  DecodeParams decode;
  std::string mode = "stub";
};

// First `n` prompts with a non-empty prefix.
inline std::vector<std::string> evaluation_prompts(const std::vector<std::string>& corpus, std::size_t n) {
  if (n == 0) throw ValidationError("empty evaluation set");
  std::vector<std::string> out;
  for (const auto& p : corpus) {
    if (out.size() == n) break;
    if (!extract_prefix(p).empty()) out.push_back(trim(p));
  }
  if (out.empty()) throw ValidationError("empty evaluation set");
  if (out.size() < n)
    throw ValidationError("evaluation set has " + std::to_string(out.size()) + " usable prompts, " +
                          std::to_string(n) + " requested");
  return out;
}

inline std::string prompt_set_hash(const std::vector<std::string>& prompts) {
  std::string joined;
  for (const auto& p : prompts) joined += p + '\n';
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(joined)));
  return buf;
}

namespace detail {

struct DecodedPrompt {
  std::string text;
  bool satisfied = false;
};

inline DecodedPrompt decode_prompt(const LanguageModel& lm, const std::string& prefix_text,
                                   const ConstraintSpec& spec, const DecodeParams& params) {
  const auto& vocab = lm.vocabulary();
  const auto automaton = ConstraintAutomaton::compile(spec, vocab);
  const TokenSequence prefix = vocab.tokenize(prefix_text);
  try {
    const auto hyps = decode(lm, prefix, automaton, params);
    return {vocab.render(hyps.front().tokens).text, hyps.front().satisfied};
  } catch (const UnsatisfiableError&) {
    return {vocab.render(prefix).text, false};
  }
}

}  // namespace detail

// Scores every requested condition on the same prompts. Image seeds and
// automatic clause selections depend only on the prompt index.
inline EvalReport evaluate(const std::vector<std::string>& prompts, const EvalModels& models,
                           const KeywordTaxonomy& taxonomy, const ScoringBackends& backends,
                           const EvalOptions& options) {
  if (prompts.empty()) throw ValidationError("empty evaluation set");
  EvalReport report;
  report.mode = options.mode;
  report.n = prompts.size();
  report.seed = options.seed;
  report.prompt_set_hash = prompt_set_hash(prompts);

  std::vector<Condition> conds = options.conditions;
  // Preference percentages are relative to the prefix images.
  const bool prefix_requested = std::find(conds.begin(), conds.end(), Condition::prefix) != conds.end();
  if (!prefix_requested) conds.insert(conds.begin(), Condition::prefix);

  DecodeParams greedy = options.decode;
  greedy.beam_size = 1;
  greedy.satisfaction_weight = 0.0;

  for (Condition cond : conds) {
    ConditionResult row;
    row.condition = cond;
    int satisfied = 0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      const std::uint64_t seed = options.seed + i;
      const std::string prefix = extract_prefix(prompts[i]);
      ClauseSelection sel;
      sel.seed = seed;
      std::string text;
      switch (cond) {
        case Condition::prefix: text = prefix; break;
        case Condition::human: text = prompts[i]; break;
        case Condition::sft_only:
          text = detail::decode_prompt(*models.sft, prefix, {}, greedy).text;
          break;
        case Condition::no_neurologic:
          text = detail::decode_prompt(*models.ppo, prefix, {}, options.decode).text;
          break;
        case Condition::no_ppo:
        case Condition::full: {
          const auto& lm = cond == Condition::full ? *models.ppo : *models.sft;
          auto d = detail::decode_prompt(lm, prefix, build_clauses(taxonomy, sel), options.decode);
          text = std::move(d.text);
          satisfied += d.satisfied ? 1 : 0;
          break;
        }
      }
      const auto image = backends.images->generate(text, seed);
      row.aesthetics.push_back(backends.aesthetics->score(text, image));
      row.preference.push_back(backends.preference->score(text, image));
      row.prompts.push_back(std::move(text));
    }
    if (cond == Condition::no_ppo || cond == Condition::full) row.satisfied = satisfied;
    const double n = static_cast<double>(prompts.size());
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      row.mean_aesthetics += row.aesthetics[i] / n;
      row.mean_preference += row.preference[i] / n;
    }
    report.rows.push_back(std::move(row));
  }

  const auto& base = report.rows.front();
  for (auto& row : report.rows) {
    for (std::size_t i = 0; i < prompts.size(); ++i)
      row.preference_pct += 100.0 * preference_probability(row.preference[i], base.preference[i]) /
                            static_cast<double>(prompts.size());
  }
  if (!prefix_requested) report.rows.erase(report.rows.begin());

  // Adjacent pairs of the expected ordering, by aesthetics.
  const std::array<Condition, 4> chain = {Condition::full, Condition::no_neurologic, Condition::sft_only,
                                          Condition::prefix};
  for (std::size_t k = 0; k + 1 < chain.size(); ++k) {
    const auto* a = report.find(chain[k]);
    const auto* b = report.find(chain[k + 1]);
    if (!a || !b) continue;
    OrderingCheck oc;
    oc.better = chain[k];
    oc.worse = chain[k + 1];
    oc.mean_better = a->mean_aesthetics;
    oc.mean_worse = b->mean_aesthetics;
    oc.test = sign_test(a->aesthetics, b->aesthetics);
    report.ordering.push_back(oc);
  }
  return report;
}

inline std::string format_report(const EvalReport& r) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-26s %10s %10s %12s %10s\n", "Model", "Aesthetics", "Preference",
                "vs prefix", "Reference");
  out << line;
  out << std::string(72, '-') << '\n';
  for (const auto& row : r.rows) {
    std::snprintf(line, sizeof line, "%-26s %10.3f %10.3f %11.1f%% %10.2f\n",
                  std::string(condition_label(row.condition)).c_str(), row.mean_aesthetics, row.mean_preference,
                  row.preference_pct, reference_aesthetics(row.condition));
    out << line;
  }
  out << std::string(72, '-') << '\n';
  for (const auto& row : r.rows)
    if (row.satisfied)
      out << condition_label(row.condition) << ": all clauses met on " << *row.satisfied << "/" << r.n
          << " prompts\n";
  for (const auto& oc : r.ordering) {
    std::snprintf(line, sizeof line, "%s > %s: %.3f vs %.3f, sign test %d/%d/%d (w/l/t), p = %.3g\n",
                  std::string(condition_label(oc.better)).c_str(), std::string(condition_label(oc.worse)).c_str(),
                  oc.mean_better, oc.mean_worse, oc.test.wins, oc.test.losses, oc.test.ties, oc.test.p_value);
    out << line;
  }
  out << "mode " << r.mode << ", n = " << r.n << ", seed " << r.seed << ", prompt set " << r.prompt_set_hash
      << '\n';
  out << "Reference: published aesthetics with real image and aesthetics models "
         "(prefix 5.64, human 5.92, full 6.27); not reproduced here.\n";
  return out.str();
}

inline json to_json(const EvalReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows) {
    json j = {{"condition", std::string(condition_key(row.condition))},
              {"label", std::string(condition_label(row.condition))},
              {"mean_aesthetics", row.mean_aesthetics},
              {"mean_preference", row.mean_preference},
              {"preference_pct", row.preference_pct},
              {"reference_aesthetics", reference_aesthetics(row.condition)},
              {"aesthetics", row.aesthetics}};
    if (row.satisfied) j["satisfied"] = *row.satisfied;
    rows.push_back(std::move(j));
  }
  json ordering = json::array();
  for (const auto& oc : r.ordering)
    ordering.push_back({{"better", std::string(condition_key(oc.better))},
                        {"worse", std::string(condition_key(oc.worse))},
                        {"mean_better", oc.mean_better},
                        {"mean_worse", oc.mean_worse},
                        {"wins", oc.test.wins},
                        {"losses", oc.test.losses},
                        {"ties", oc.test.ties},
                        {"p_value", oc.test.p_value}});
  return {{"mode", r.mode},           {"n", r.n},       {"seed", r.seed}, {"prompt_set_hash", r.prompt_set_hash},
          {"conditions", rows}, {"ordering", ordering}};
}

}  // namespace nprompt
