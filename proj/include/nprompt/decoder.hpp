#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "nprompt/constraints.hpp"
#include "nprompt/errors.hpp"
#include "nprompt/language_model.hpp"

namespace nprompt {

struct DecodeParams {
  int beam_size = 8;
  double length_penalty = 1.0;
  int max_new_tokens = 32;
  // Weight of the satisfied-clause fraction in the selection score.
  double satisfaction_weight = 0.25;
  // Carried for record replay; decoding itself draws no random numbers.
  std::uint64_t seed = 0;
  // Candidate fan-out per beam from the language model; constraint-advancing
  // tokens are added on top.
  int top_k = 20;
  // A token that would repeat an n-gram of this size already in the sequence
  // is not expanded; 0 disables the check.
  int no_repeat_ngram = 3;

  void check() const {
    if (beam_size < 1) throw std::invalid_argument("beam_size must be >= 1");
    if (max_new_tokens < 1) throw std::invalid_argument("max_new_tokens must be >= 1");
    if (satisfaction_weight < 0.0) throw std::invalid_argument("satisfaction_weight must be >= 0");
    if (top_k < 1) throw std::invalid_argument("top_k must be >= 1");
    if (no_repeat_ngram < 0) throw std::invalid_argument("no_repeat_ngram must be >= 0");
  }
};

struct Hypothesis {
  // Prompt prefix followed by generated tokens (a final </s> included).
  TokenSequence tokens;
  std::size_t prefix_length = 0;
  // Log-probability of the generated tokens given the prefix.
  double log_prob = 0.0;
  ConstraintState cstate;
  bool finished = false;
  // Fully satisfies the constraint set.
  bool satisfied = false;
  double score = 0.0;

  std::size_t generated_length() const noexcept { return tokens.size() - prefix_length; }
};

// Ordering used everywhere a ranking is needed: higher score first, then the
// lower id of the last token, then the lexicographically smaller id sequence.
inline bool ranks_before(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  const TokenId la = a.tokens.empty() ? -1 : a.tokens.back();
  const TokenId lb = b.tokens.empty() ? -1 : b.tokens.back();
  if (la != lb) return la < lb;
  return a.tokens.ids() < b.tokens.ids();
}

// Final results: satisfied hypotheses before unsatisfied ones.
inline bool final_ranks_before(const Hypothesis& a, const Hypothesis& b) {
  if (a.satisfied != b.satisfied) return a.satisfied;
  return ranks_before(a, b);
}

struct StepResult {
  std::vector<Hypothesis> beams;
  std::vector<Hypothesis> finished;
};

struct Highlight {
  std::size_t char_begin = 0;
  std::size_t char_end = 0;
  std::size_t token_begin = 0;
  std::size_t token_end = 0;
  int clause = 0;
  std::string label;
  std::string phrase;
};

// True when appending `next` to `ids` forms an n-gram that already occurs in
// `ids`.
inline bool repeats_ngram(const std::vector<TokenId>& ids, TokenId next, int n) {
  if (n <= 0) return false;
  const auto un = static_cast<std::size_t>(n);
  if (ids.size() < un) return false;
  const std::size_t tail = ids.size() - (un - 1);
  for (std::size_t start = 0; start + un <= ids.size(); ++start) {
    if (ids[start + un - 1] != next) continue;
    if (std::equal(ids.begin() + static_cast<std::ptrdiff_t>(start),
                   ids.begin() + static_cast<std::ptrdiff_t>(start + un - 1),
                   ids.begin() + static_cast<std::ptrdiff_t>(tail)))
      return true;
  }
  return false;
}

// Lexically constrained beam search. Candidates are grouped by constraint
// signature; the best candidate of each group is kept first (better leaders
// first), and remaining slots go to the best candidates overall. Tokens that
// complete a negated phrase or otherwise violate the constraint set are
// masked. A hypothesis may end with </s> only once every
// clause is satisfied; otherwise it ends when max_new_tokens is reached.
class NeuroLogicDecoder {
 public:
  NeuroLogicDecoder(const LanguageModel& lm, const ConstraintAutomaton& automaton, DecodeParams params)
      : lm_(lm), automaton_(automaton), params_(params) {
    params_.check();
  }

  const DecodeParams& params() const noexcept { return params_; }

  Hypothesis root(const TokenSequence& prefix) const {
    Hypothesis h;
    h.tokens = prefix;
    h.prefix_length = prefix.size();
    h.cstate = automaton_.initial(prefix.size());
    h.satisfied = automaton_.complete(h.cstate);
    h.score = 0.0;
    return h;
  }

  double selection_score(double log_prob, std::size_t length, const ConstraintState& s) const {
    const double norm = std::pow(static_cast<double>(length), params_.length_penalty);
    return log_prob / norm + params_.satisfaction_weight * automaton_.satisfied_fraction(s);
  }

  // Candidate tokens for one beam: the top_k outcomes by log-probability plus
  // every constraint-advancing token. Sorted by id.
  std::vector<TokenId> candidate_tokens(const Hypothesis& h, const std::vector<double>& lp) const {
    std::vector<TokenId> ranked;
    ranked.reserve(lp.size());
    for (std::size_t i = 0; i < lp.size(); ++i) {
      auto id = static_cast<TokenId>(i);
      if (Vocabulary::is_generatable(id) && std::isfinite(lp[i])) ranked.push_back(id);
    }
    const auto k = std::min(ranked.size(), static_cast<std::size_t>(params_.top_k));
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k), ranked.end(),
                      [&](TokenId a, TokenId b) {
                        const auto pa = lp[static_cast<std::size_t>(a)];
                        const auto pb = lp[static_cast<std::size_t>(b)];
                        return pa != pb ? pa > pb : a < b;
                      });
    ranked.resize(k);
    for (TokenId t : automaton_.advancing_tokens(h.cstate))
      if (Vocabulary::is_generatable(t) && std::isfinite(lp[static_cast<std::size_t>(t)])) ranked.push_back(t);
    std::sort(ranked.begin(), ranked.end());
    ranked.erase(std::unique(ranked.begin(), ranked.end()), ranked.end());
    return ranked;
  }

  // Expands every live beam by one token, masks violating candidates, and
  // selects the next beams. Candidates that end (</s> or length limit) are
  // returned separately and do not take beam slots.
  StepResult step(const std::vector<Hypothesis>& beams) const {
    std::vector<Hypothesis> live;
    StepResult out;
    std::vector<double> lp(lm_.vocabulary().size());
    for (const auto& h : beams) {
      if (h.finished) continue;
      lm_.next_token_log_probs(h.tokens.ids(), lp);
      const std::size_t len = h.generated_length() + 1;
      const bool at_limit = len >= static_cast<std::size_t>(params_.max_new_tokens);
      for (TokenId t : candidate_tokens(h, lp)) {
        Hypothesis c;
        if (t == kEos) {
          if (!h.satisfied) continue;
          c.cstate = h.cstate;
        } else {
          if (repeats_ngram(h.tokens.ids(), t, params_.no_repeat_ngram)) continue;
          c.cstate = automaton_.advance(h.cstate, t);
          if (c.cstate.violated()) continue;
        }
        c.tokens = h.tokens;
        c.tokens.push_back(t);
        c.prefix_length = h.prefix_length;
        c.log_prob = h.log_prob + lp[static_cast<std::size_t>(t)];
        c.satisfied = automaton_.complete(c.cstate);
        c.finished = t == kEos || at_limit;
        c.score = selection_score(c.log_prob, len, c.cstate);
        (c.finished ? out.finished : live).push_back(std::move(c));
      }
    }
    out.beams = select(std::move(live));
    return out;
  }

  std::vector<Hypothesis> decode(const TokenSequence& prefix) const {
    for (TokenId t : prefix.ids())
      if (!lm_.vocabulary().valid(t)) throw std::domain_error("prefix token id out of range");
    std::vector<Hypothesis> beams{root(prefix)};
    std::vector<Hypothesis> pool;
    for (int i = 0; i < params_.max_new_tokens && !beams.empty(); ++i) {
      auto res = step(beams);
      for (auto& f : res.finished) pool.push_back(std::move(f));
      beams = std::move(res.beams);
      prune_pool(pool);
    }
    if (pool.empty())
      throw UnsatisfiableError("unsatisfiable under masking: every hypothesis was pruned");
    return pool;
  }

  // Surface-text ranges of every positive match in a hypothesis.
  std::vector<Highlight> highlight(const Hypothesis& h) const {
    std::vector<Highlight> out;
    const auto rendered = lm_.vocabulary().render(h.tokens);
    for (const auto& span : h.cstate.satisfied_spans()) {
      if (span.end == 0 || span.end > h.tokens.size()) continue;
      Highlight hl;
      hl.token_begin = span.begin;
      hl.token_end = span.end;
      hl.char_begin = rendered.offsets[span.begin].begin;
      hl.char_end = rendered.offsets[span.end - 1].end;
      hl.clause = span.clause;
      hl.label = automaton_.spec().clauses[static_cast<std::size_t>(span.clause)].label;
      hl.phrase = automaton_.predicates()[static_cast<std::size_t>(span.predicate)].phrase;
      out.push_back(std::move(hl));
    }
    return out;
  }

 private:
  std::vector<Hypothesis> select(std::vector<Hypothesis> cands) const {
    const auto cap = static_cast<std::size_t>(params_.beam_size);
    std::sort(cands.begin(), cands.end(), ranks_before);
    if (cands.size() <= cap) return cands;

    // The best candidate of each signature group, in rank order, then the
    // best of the rest.
    std::set<std::vector<int>> seen;
    std::vector<char> taken(cands.size(), 0);
    std::vector<std::size_t> chosen;
    for (std::size_t i = 0; i < cands.size() && chosen.size() < cap; ++i) {
      if (!seen.insert(automaton_.status(cands[i].cstate).signature).second) continue;
      chosen.push_back(i);
      taken[i] = 1;
    }
    for (std::size_t i = 0; i < cands.size() && chosen.size() < cap; ++i)
      if (!taken[i]) chosen.push_back(i);
    std::sort(chosen.begin(), chosen.end());
    std::vector<Hypothesis> out;
    out.reserve(chosen.size());
    for (std::size_t idx : chosen) out.push_back(std::move(cands[idx]));
    return out;
  }

  void prune_pool(std::vector<Hypothesis>& pool) const {
    std::sort(pool.begin(), pool.end(), final_ranks_before);
    if (pool.size() > static_cast<std::size_t>(params_.beam_size))
      pool.resize(static_cast<std::size_t>(params_.beam_size));
  }

  const LanguageModel& lm_;
  const ConstraintAutomaton& automaton_;
  DecodeParams params_;
};

// Convenience wrapper returning the ranked finished hypotheses.
inline std::vector<Hypothesis> decode(const LanguageModel& lm, const TokenSequence& prefix,
                                      const ConstraintAutomaton& automaton, const DecodeParams& params) {
  return NeuroLogicDecoder(lm, automaton, params).decode(prefix);
}

}  // namespace nprompt
