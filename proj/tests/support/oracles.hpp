#pragma once

// Reference implementations the library is checked against. They share no
// code with the library beyond its data types: matching is a plain substring
// scan and decoding is exhaustive enumeration.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "nprompt/constraints.hpp"
#include "nprompt/decoder.hpp"
#include "nprompt/language_model.hpp"
#include "nprompt/vocabulary.hpp"

namespace oracle {

using nprompt::TokenId;

inline constexpr std::size_t kNever = std::numeric_limits<std::size_t>::max();

struct Phrase {
  std::size_t clause = 0;
  std::size_t index = 0;  // position in the flattened predicate list
  bool negated = false;
  std::vector<TokenId> ids;
};

inline std::vector<Phrase> phrases_of(const nprompt::ConstraintSpec& spec, const nprompt::Vocabulary& vocab) {
  std::vector<Phrase> out;
  for (std::size_t c = 0; c < spec.clauses.size(); ++c) {
    for (const auto& p : spec.clauses[c].predicates) {
      Phrase ph;
      ph.clause = c;
      ph.index = out.size();
      ph.negated = p.polarity == nprompt::Polarity::negated;
      for (const auto& w : nprompt::split_words(p.phrase)) ph.ids.push_back(*vocab.find(w));
      out.push_back(std::move(ph));
    }
  }
  return out;
}

// Smallest end index (exclusive) of an occurrence of `needle` in `hay`, or
// kNever.
inline std::size_t first_end(const std::vector<TokenId>& hay, const std::vector<TokenId>& needle) {
  for (std::size_t e = needle.size(); e <= hay.size(); ++e)
    if (std::equal(needle.begin(), needle.end(), hay.begin() + static_cast<std::ptrdiff_t>(e - needle.size())))
      return e;
  return kNever;
}

enum class Event { negation, overflow, order };

struct Verdict {
  std::vector<int> counts;
  // Number of tokens after which the state first counts as violated.
  std::size_t violated_at = kNever;
  // Every (event, clause) that can be the first violation.
  std::set<std::pair<Event, int>> first_events;
  std::vector<bool> in_range;
  bool overall = false;
  // (clause, predicate, begin, end) of every positive occurrence.
  std::vector<std::tuple<int, int, std::size_t, std::size_t>> spans;

  bool violated() const { return violated_at != kNever; }
};

// Judges the generated tokens `seq` against `spec`. Spans are offset by the
// prompt length `offset`.
inline Verdict judge(const nprompt::ConstraintSpec& spec, const std::vector<Phrase>& phrases,
                     const std::vector<TokenId>& seq, std::size_t offset = 0) {
  const std::size_t nc = spec.clauses.size();
  const std::size_t n = seq.size();
  std::vector<std::size_t> first(phrases.size());
  for (const auto& p : phrases) first[p.index] = first_end(seq, p.ids);

  auto positives = [&](std::size_t c, std::size_t t) {
    int k = 0;
    for (const auto& p : phrases)
      if (p.clause == c && !p.negated && first[p.index] <= t) ++k;
    return k;
  };
  auto negatives_left = [&](std::size_t c, std::size_t t) {
    int k = 0;
    for (const auto& p : phrases)
      if (p.clause == c && p.negated && (first[p.index] == kNever || first[p.index] > t)) ++k;
    return k;
  };
  // Largest count seen while a token is being consumed: positives of step t
  // before the negations of step t.
  auto peak = [&](std::size_t c, std::size_t t) {
    return t == 0 ? negatives_left(c, 0) : positives(c, t) + negatives_left(c, t - 1);
  };

  // First time each clause reaches its minimum.
  std::vector<std::size_t> reached(nc, kNever);
  for (std::size_t c = 0; c < nc; ++c)
    for (std::size_t t = 0; t <= n && reached[c] == kNever; ++t)
      if (peak(c, t) >= spec.clauses[c].min_satisfied) reached[c] = t;

  Verdict v;
  for (std::size_t t = 0; t <= n && !v.violated(); ++t) {
    for (std::size_t c = 0; c < nc; ++c) {
      const auto& cl = spec.clauses[c];
      for (const auto& p : phrases)
        if (p.clause == c && p.negated && first[p.index] == t) v.first_events.insert({Event::negation, int(c)});
      if (t > 0 && positives(c, t) > positives(c, t - 1) && peak(c, t) > cl.max_satisfied)
        v.first_events.insert({Event::overflow, int(c)});
      if (cl.order_rank && reached[c] == t) {
        for (std::size_t d = 0; d < nc; ++d) {
          const auto& od = spec.clauses[d].order_rank;
          if (od && *od < *cl.order_rank && reached[d] > t) v.first_events.insert({Event::order, int(c)});
        }
      }
    }
    if (!v.first_events.empty()) v.violated_at = t;
  }

  v.overall = !v.violated();
  for (std::size_t c = 0; c < nc; ++c) {
    const int count = positives(c, n) + negatives_left(c, n);
    v.counts.push_back(count);
    const bool ok = count >= spec.clauses[c].min_satisfied && count <= spec.clauses[c].max_satisfied;
    v.in_range.push_back(ok);
    v.overall = v.overall && ok;
  }

  for (const auto& p : phrases) {
    if (p.negated) continue;
    for (std::size_t e = p.ids.size(); e <= n; ++e)
      if (std::equal(p.ids.begin(), p.ids.end(), seq.begin() + static_cast<std::ptrdiff_t>(e - p.ids.size())))
        v.spans.emplace_back(int(p.clause), int(p.index), offset + e - p.ids.size(), offset + e);
  }
  std::sort(v.spans.begin(), v.spans.end());
  return v;
}

inline Event event_of(nprompt::Violation v) {
  switch (v) {
    case nprompt::Violation::negation: return Event::negation;
    case nprompt::Violation::overflow: return Event::overflow;
    default: return Event::order;
  }
}

// ---------------------------------------------------------------------------
// Random instances
// ---------------------------------------------------------------------------

using Rng = std::mt19937_64;

inline int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

// Vocabulary of `words` single-letter words a, b, c, ...
inline std::shared_ptr<nprompt::Vocabulary> letter_vocab(int words) {
  auto v = std::make_shared<nprompt::Vocabulary>();
  for (int i = 0; i < words; ++i) v->add(std::string(1, static_cast<char>('a' + i)));
  return v;
}

inline std::string random_phrase(Rng& rng, int words, int max_len) {
  std::string s;
  const int len = uniform_int(rng, 1, max_len);
  for (int i = 0; i < len; ++i) {
    if (i) s += ' ';
    s += static_cast<char>('a' + uniform_int(rng, 0, words - 1));
  }
  return s;
}

struct SpecShape {
  int max_clauses = 3;
  int max_predicates = 3;
  int max_phrase_len = 2;
  double negation_rate = 0.25;
  double rank_rate = 0.3;
  bool allow_max = true;
};

inline nprompt::ConstraintSpec random_spec(Rng& rng, int words, const SpecShape& shape) {
  nprompt::ConstraintSpec spec;
  const int nc = uniform_int(rng, 1, shape.max_clauses);
  std::bernoulli_distribution neg(shape.negation_rate), ranked(shape.rank_rate), bounded(0.3);
  for (int c = 0; c < nc; ++c) {
    nprompt::Clause cl;
    const int np = uniform_int(rng, 1, shape.max_predicates);
    for (int p = 0; p < np; ++p)
      cl.predicates.push_back({random_phrase(rng, words, shape.max_phrase_len),
                               neg(rng) ? nprompt::Polarity::negated : nprompt::Polarity::positive});
    const int negs = cl.negated_count();
    cl.min_satisfied = uniform_int(rng, 1, np);
    if (shape.allow_max && bounded(rng)) cl.max_satisfied = uniform_int(rng, std::max(cl.min_satisfied, negs), np);
    if (ranked(rng)) cl.order_rank = uniform_int(rng, 1, 3);
    cl.label = "c" + std::to_string(c);
    spec.clauses.push_back(std::move(cl));
  }
  return spec;
}

// Order-2 or order-3 table model with random rows. Coarse rows use logits in
// {0, 1} so that many sequences tie exactly.
inline std::shared_ptr<nprompt::TableLM> random_table_lm(Rng& rng, std::shared_ptr<const nprompt::Vocabulary> vocab,
                                                         bool coarse) {
  const int order = uniform_int(rng, 2, 3);
  auto lm = std::make_shared<nprompt::TableLM>(vocab, order);
  const std::size_t v = vocab->size();
  std::normal_distribution<double> normal(0.0, 1.5);
  auto row = [&] {
    std::vector<double> r(v);
    for (auto& x : r) x = coarse ? double(uniform_int(rng, 0, 1)) : normal(rng);
    return r;
  };
  lm->set_fallback(row());
  const int rows = uniform_int(rng, 2, 12);
  for (int i = 0; i < rows; ++i) {
    nprompt::ContextKey key;
    const int len = uniform_int(rng, 1, order - 1);
    for (int k = 0; k < len; ++k) key.push_back(static_cast<TokenId>(uniform_int(rng, int(nprompt::kEos), int(v) - 1)));
    if (key.size() < static_cast<std::size_t>(order - 1) && uniform_int(rng, 0, 3) == 0)
      key.insert(key.begin(), nprompt::kBos);
    if (std::count(key.begin(), key.end(), nprompt::kUnk)) continue;
    lm->set_logits(key, row());
  }
  return lm;
}

// ---------------------------------------------------------------------------
// Exhaustive decoding
// ---------------------------------------------------------------------------

struct Finished {
  std::vector<TokenId> ids;  // prefix + generated (+ </s>)
  double log_prob = 0.0;
  double score = 0.0;
  bool satisfied = false;
};

// Satisfied first, then higher score, lower last token id, smaller id
// sequence.
inline bool better(const Finished& a, const Finished& b) {
  if (a.satisfied != b.satisfied) return a.satisfied;
  if (a.score != b.score) return a.score > b.score;
  if (a.ids.back() != b.ids.back()) return a.ids.back() < b.ids.back();
  return a.ids < b.ids;
}

// Enumerates every token sequence of up to max_new_tokens generatable words,
// drops sequences that violate the constraints, ends satisfied ones with
// </s> and returns the best finished sequence, if any.
inline std::optional<Finished> brute_force_decode(const nprompt::LanguageModel& lm,
                                                  const std::vector<TokenId>& prefix,
                                                  const nprompt::ConstraintSpec& spec,
                                                  const nprompt::DecodeParams& params) {
  const auto& vocab = lm.vocabulary();
  const auto phrases = phrases_of(spec, vocab);
  std::vector<TokenId> words;
  for (std::size_t t = nprompt::kFirstWordId; t < vocab.size(); ++t) words.push_back(static_cast<TokenId>(t));

  std::optional<Finished> best;
  auto offer = [&](Finished f) {
    if (!best || better(f, *best)) best = std::move(f);
  };
  auto score_of = [&](double lp, std::size_t len, const Verdict& v) {
    int sat = 0;
    for (bool ok : v.in_range) sat += ok ? 1 : 0;
    const double frac = spec.clauses.empty() ? 1.0 : double(sat) / double(spec.clauses.size());
    return lp / std::pow(double(len), params.length_penalty) + params.satisfaction_weight * frac;
  };

  std::vector<TokenId> gen;
  auto full = [&] {
    std::vector<TokenId> ids = prefix;
    ids.insert(ids.end(), gen.begin(), gen.end());
    return ids;
  };
  const auto limit = static_cast<std::size_t>(params.max_new_tokens);

  // lp: log-probability of `gen` accumulated left to right.
  auto visit = [&](auto&& self, double lp) -> void {
    const Verdict v = judge(spec, phrases, gen);
    if (v.violated()) return;
    const auto ids = full();
    const auto next = lm.next_token_log_probs(ids);
    if (v.overall && gen.size() + 1 <= limit) {
      Finished f;
      f.ids = ids;
      f.ids.push_back(nprompt::kEos);
      f.log_prob = lp + next[nprompt::kEos];
      f.satisfied = true;
      f.score = score_of(f.log_prob, gen.size() + 1, v);
      offer(std::move(f));
    }
    if (gen.size() == limit) return;
    for (TokenId t : words) {
      gen.push_back(t);
      const double lp2 = lp + next[static_cast<std::size_t>(t)];
      if (gen.size() == limit) {
        const Verdict w = judge(spec, phrases, gen);
        if (!w.violated()) {
          Finished f;
          f.ids = full();
          f.log_prob = lp2;
          f.satisfied = w.overall;
          f.score = score_of(lp2, gen.size(), w);
          offer(std::move(f));
        }
      } else {
        self(self, lp2);
      }
      gen.pop_back();
    }
  };
  visit(visit, 0.0);
  return best;
}

// Number of hypotheses the exhaustive search can produce at one depth; a beam
// at least this wide never drops a candidate.
inline std::size_t full_hypothesis_count(std::size_t words, int max_new_tokens) {
  std::size_t total = 1, layer = 1;
  for (int i = 0; i < max_new_tokens; ++i) {
    layer *= words;
    total += layer;
  }
  return total;
}

// One-sided exact sign test P(X >= wins), X ~ Binomial(wins + losses, 1/2),
// summed in exact binomial coefficients.
inline double sign_test_p(int wins, int losses) {
  const int n = wins + losses;
  if (n == 0) return 1.0;
  long double coef = 1.0L, sum = 0.0L;
  for (int k = 0; k <= n; ++k) {
    if (k >= wins) sum += coef;
    coef = coef * static_cast<long double>(n - k) / static_cast<long double>(k + 1);
  }
  return static_cast<double>(sum / std::pow(2.0L, static_cast<long double>(n)));
}

}  // namespace oracle
