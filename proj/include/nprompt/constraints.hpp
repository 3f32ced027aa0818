#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "nprompt/errors.hpp"
#include "nprompt/vocabulary.hpp"

namespace nprompt {

// ---------------------------------------------------------------------------
// Lexical constraints in conjunctive normal form.
//
// A clause is a disjunction of predicates. A positive predicate holds once its
// phrase has appeared in the generated tokens; a negated predicate holds while
// its phrase has not. A clause is satisfied when the number of holding
// predicates lies in [min_satisfied, max_satisfied]. Completing a negated
// phrase, exceeding max_satisfied, or satisfying a ranked clause while a
// lower-ranked clause is still unsatisfied marks the state violated, and a
// violated state never recovers.
//
// Each clause counts independently: one emitted phrase can satisfy
// predicates in several clauses at once.
// ---------------------------------------------------------------------------

enum class Polarity { positive, negated };

struct Predicate {
  std::string phrase;
  Polarity polarity = Polarity::positive;
};

inline constexpr int kUnbounded = std::numeric_limits<int>::max();

struct Clause {
  std::vector<Predicate> predicates;
  int min_satisfied = 1;
  int max_satisfied = kUnbounded;
  std::optional<int> order_rank;
  std::string label;

  int negated_count() const {
    return static_cast<int>(std::count_if(predicates.begin(), predicates.end(), [](const Predicate& p) {
      return p.polarity == Polarity::negated;
    }));
  }
  int positive_count() const { return static_cast<int>(predicates.size()) - negated_count(); }
};

struct ConstraintSpec {
  std::vector<Clause> clauses;
  bool empty() const noexcept { return clauses.empty(); }
};

inline std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline void validate(const ConstraintSpec& spec) {
  for (std::size_t i = 0; i < spec.clauses.size(); ++i) {
    const auto& c = spec.clauses[i];
    const std::string where = "clause " + std::to_string(i + 1);
    if (c.predicates.empty()) throw ValidationError(where + " has no predicates");
    for (const auto& p : c.predicates)
      if (trim(p.phrase).empty()) throw ValidationError(where + " has an empty phrase");
    if (c.min_satisfied < 1) throw ValidationError(where + ": min_satisfied must be >= 1");
    if (c.max_satisfied < c.min_satisfied)
      throw ValidationError(where + ": max_satisfied below min_satisfied");
    if (c.min_satisfied > static_cast<int>(c.predicates.size()))
      throw ValidationError(where + ": min_satisfied exceeds predicate count");
    if (c.max_satisfied < c.negated_count())
      throw ValidationError(where + ": max_satisfied below the number of negated predicates");
  }
}

// Text format, one clause per line:
//   [MIN..MAX] [>RANK] [@label] phrase | phrase | !phrase
// MAX may be '*' or empty for unbounded. Without a range, min is 1 (or the
// negated count for a clause of negations only). '#' starts a comment line.
inline ConstraintSpec parse_constraint_spec(std::string_view text) {
  ConstraintSpec spec;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    auto fail = [&](const std::string& msg) -> ParseError {
      return ParseError("constraint line " + std::to_string(line_no) + ": " + msg);
    };
    Clause clause;
    bool has_range = false;
    // Leading modifiers are whitespace-separated words before the phrases.
    while (!line.empty()) {
      auto sp = line.find_first_of(" \t");
      std::string word = line.substr(0, sp);
      std::string rest = sp == std::string::npos ? std::string() : trim(line.substr(sp));
      if (auto dots = word.find(".."); dots != std::string::npos && std::isdigit(static_cast<unsigned char>(word[0]))) {
        try {
          clause.min_satisfied = std::stoi(word.substr(0, dots));
          std::string hi = word.substr(dots + 2);
          clause.max_satisfied = (hi.empty() || hi == "*") ? kUnbounded : std::stoi(hi);
        } catch (const std::exception&) {
          throw fail("bad range '" + word + "'");
        }
        has_range = true;
      } else if (word.size() > 1 && word[0] == '>' && std::isdigit(static_cast<unsigned char>(word[1]))) {
        try {
          clause.order_rank = std::stoi(word.substr(1));
        } catch (const std::exception&) {
          throw fail("bad rank '" + word + "'");
        }
      } else if (word.size() > 1 && word[0] == '@') {
        clause.label = word.substr(1);
      } else {
        break;
      }
      line = rest;
    }
    std::size_t start = 0;
    while (start <= line.size()) {
      auto bar = line.find('|', start);
      std::string item = trim(line.substr(start, bar == std::string::npos ? std::string::npos : bar - start));
      Predicate p;
      if (!item.empty() && item[0] == '!') {
        p.polarity = Polarity::negated;
        item = trim(item.substr(1));
      }
      if (item.empty()) throw fail("empty phrase");
      p.phrase = std::move(item);
      clause.predicates.push_back(std::move(p));
      if (bar == std::string::npos) break;
      start = bar + 1;
    }
    if (!has_range && clause.positive_count() == 0) clause.min_satisfied = clause.negated_count();
    spec.clauses.push_back(std::move(clause));
  }
  validate(spec);
  return spec;
}

inline std::string to_string(const ConstraintSpec& spec) {
  std::string out;
  for (const auto& c : spec.clauses) {
    out += std::to_string(c.min_satisfied) + "..";
    out += c.max_satisfied == kUnbounded ? std::string("*") : std::to_string(c.max_satisfied);
    if (c.order_rank) out += " >" + std::to_string(*c.order_rank);
    if (!c.label.empty()) out += " @" + c.label;
    out += ' ';
    for (std::size_t i = 0; i < c.predicates.size(); ++i) {
      if (i) out += " | ";
      if (c.predicates[i].polarity == Polarity::negated) out += '!';
      out += c.predicates[i].phrase;
    }
    out += '\n';
  }
  return out;
}

// Token range [begin, end) in the full hypothesis where a positive predicate
// completed.
struct MatchSpan {
  int clause = 0;
  int predicate = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
  friend bool operator==(const MatchSpan&, const MatchSpan&) = default;
};

enum class ClauseState { unsatisfied, satisfied, violated };
enum class Violation { none, negation, overflow, order };

inline std::string_view to_string(ClauseState s) {
  switch (s) {
    case ClauseState::unsatisfied: return "unsatisfied";
    case ClauseState::satisfied: return "satisfied";
    case ClauseState::violated: return "violated";
  }
  return "?";
}

class ConstraintAutomaton;

// Per-hypothesis tracking state; a plain value copied along with each beam.
class ConstraintState {
 public:
  static constexpr std::int64_t kInitially = -1;
  static constexpr std::int64_t kNever = std::numeric_limits<std::int64_t>::max();

  const std::vector<int>& counts() const noexcept { return counts_; }
  const std::vector<MatchSpan>& satisfied_spans() const noexcept { return spans_; }
  // Token index at which each clause first became satisfied.
  const std::vector<std::int64_t>& satisfied_at() const noexcept { return satisfied_at_; }
  const std::vector<int>& cursors() const noexcept { return cursors_; }
  bool violated() const noexcept { return violation_ != Violation::none; }
  Violation violation() const noexcept { return violation_; }
  int violated_clause() const noexcept { return violated_clause_; }
  std::size_t position() const noexcept { return position_; }

 private:
  friend class ConstraintAutomaton;
  std::vector<int> counts_;
  std::vector<std::uint8_t> matched_;
  std::vector<std::int64_t> satisfied_at_;
  std::vector<int> cursors_;
  std::vector<MatchSpan> spans_;
  std::size_t position_ = 0;
  Violation violation_ = Violation::none;
  int violated_clause_ = -1;
};

struct ConstraintStatus {
  std::vector<ClauseState> clauses;
  bool overall = true;
  // Per-clause counts followed by the violated flag; equal iff the
  // clause-level state is equal.
  std::vector<int> signature;
  int satisfied_clauses = 0;
};

struct CompiledPredicate {
  int clause = 0;
  Polarity polarity = Polarity::positive;
  std::vector<TokenId> tokens;
  std::string phrase;
};

class ConstraintAutomaton {
 public:
  ConstraintAutomaton() { nodes_.emplace_back(); }

  static ConstraintAutomaton compile(const ConstraintSpec& spec, const Vocabulary& vocab) {
    validate(spec);
    ConstraintAutomaton a;
    a.spec_ = spec;
    for (std::size_t ci = 0; ci < spec.clauses.size(); ++ci) {
      const auto& clause = spec.clauses[ci];
      for (const auto& pred : clause.predicates) {
        CompiledPredicate cp;
        cp.clause = static_cast<int>(ci);
        cp.polarity = pred.polarity;
        cp.phrase = pred.phrase;
        for (const auto& w : split_words(pred.phrase)) {
          auto id = vocab.find(w);
          if (!id) throw CompileError("phrase '" + pred.phrase + "' has out-of-vocabulary token '" + w + "'");
          if (*id < kFirstWordId) throw CompileError("phrase '" + pred.phrase + "' contains a reserved token");
          cp.tokens.push_back(*id);
        }
        if (cp.tokens.empty()) throw CompileError("phrase '" + pred.phrase + "' is empty after tokenization");
        a.insert(static_cast<int>(a.predicates_.size()), cp.tokens);
        a.predicates_.push_back(std::move(cp));
      }
    }
    return a;
  }

  const ConstraintSpec& spec() const noexcept { return spec_; }
  std::size_t clause_count() const noexcept { return spec_.clauses.size(); }
  const std::vector<CompiledPredicate>& predicates() const noexcept { return predicates_; }

  // State before any token; `offset` is the index the first advanced token
  // will occupy in the full sequence (the prompt prefix length).
  ConstraintState initial(std::size_t offset = 0) const {
    ConstraintState s;
    s.position_ = offset;
    s.counts_.assign(clause_count(), 0);
    s.matched_.assign(predicates_.size(), 0);
    s.satisfied_at_.assign(clause_count(), ConstraintState::kNever);
    std::vector<std::size_t> newly;
    for (std::size_t c = 0; c < clause_count(); ++c) {
      s.counts_[c] = spec_.clauses[c].negated_count();
      if (s.counts_[c] >= spec_.clauses[c].min_satisfied) {
        s.satisfied_at_[c] = ConstraintState::kInitially;
        newly.push_back(c);
      }
    }
    check_order(s, newly);
    return s;
  }

  ConstraintState advance(const ConstraintState& state, TokenId token) const {
    ConstraintState next = state;
    advance_in_place(next, token);
    return next;
  }

  void advance_in_place(ConstraintState& s, TokenId token) const {
    const auto pos = s.position_;
    std::vector<int> next_cursors;
    std::vector<std::size_t> newly;
    auto visit = [&](int node) {
      int child = find_child(node, token);
      if (child < 0) return;
      const auto& n = nodes_[static_cast<std::size_t>(child)];
      for (int pi : n.terminals) on_match(s, pi, pos, newly);
      if (!n.children.empty()) next_cursors.push_back(child);
    };
    visit(0);
    for (int c : s.cursors_) visit(c);
    std::sort(next_cursors.begin(), next_cursors.end());
    s.cursors_ = std::move(next_cursors);
    s.position_ = pos + 1;
    check_order(s, newly);
  }

  bool clause_satisfied(const ConstraintState& s, std::size_t c) const {
    const auto& cl = spec_.clauses[c];
    return s.counts_[c] >= cl.min_satisfied && s.counts_[c] <= cl.max_satisfied;
  }

  ConstraintStatus status(const ConstraintState& s) const {
    ConstraintStatus st;
    st.clauses.resize(clause_count());
    st.signature = s.counts_;
    st.signature.push_back(s.violated() ? 1 : 0);
    for (std::size_t c = 0; c < clause_count(); ++c) {
      if (s.violated() && s.violated_clause_ == static_cast<int>(c)) {
        st.clauses[c] = ClauseState::violated;
      } else if (clause_satisfied(s, c)) {
        st.clauses[c] = ClauseState::satisfied;
        ++st.satisfied_clauses;
      } else {
        st.clauses[c] = ClauseState::unsatisfied;
      }
    }
    st.overall = !s.violated() && st.satisfied_clauses == static_cast<int>(clause_count());
    return st;
  }

  bool complete(const ConstraintState& s) const {
    if (s.violated()) return false;
    for (std::size_t c = 0; c < clause_count(); ++c)
      if (!clause_satisfied(s, c)) return false;
    return true;
  }

  int satisfied_clauses(const ConstraintState& s) const {
    int n = 0;
    for (std::size_t c = 0; c < clause_count(); ++c) n += clause_satisfied(s, c) ? 1 : 0;
    return n;
  }

  double satisfied_fraction(const ConstraintState& s) const {
    if (clause_count() == 0) return 1.0;
    return static_cast<double>(satisfied_clauses(s)) / static_cast<double>(clause_count());
  }

  // Tokens that extend an in-progress match or start a positive predicate not
  // yet matched. Sorted, unique.
  std::vector<TokenId> advancing_tokens(const ConstraintState& s) const {
    std::vector<TokenId> out;
    for (int c : s.cursors_)
      for (const auto& [tok, child] : nodes_[static_cast<std::size_t>(c)].children) out.push_back(tok);
    for (std::size_t pi = 0; pi < predicates_.size(); ++pi)
      if (predicates_[pi].polarity == Polarity::positive && !s.matched_[pi])
        out.push_back(predicates_[pi].tokens.front());
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

  // Clauses that can never be satisfied because every positive predicate
  // contains a negated phrase and the negations alone do not reach the
  // minimum.
  std::vector<std::size_t> conflicting_clauses() const {
    std::vector<const CompiledPredicate*> negs;
    for (const auto& p : predicates_)
      if (p.polarity == Polarity::negated) negs.push_back(&p);
    std::vector<std::size_t> out;
    if (negs.empty()) return out;
    auto contains = [](const std::vector<TokenId>& hay, const std::vector<TokenId>& needle) {
      return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
    };
    for (std::size_t c = 0; c < clause_count(); ++c) {
      const auto& cl = spec_.clauses[c];
      if (cl.negated_count() >= cl.min_satisfied) continue;
      int usable = 0;
      for (const auto& p : predicates_) {
        if (p.clause != static_cast<int>(c) || p.polarity != Polarity::positive) continue;
        bool blocked = std::any_of(negs.begin(), negs.end(),
                                   [&](const CompiledPredicate* n) { return contains(p.tokens, n->tokens); });
        if (!blocked) ++usable;
      }
      if (usable + cl.negated_count() < cl.min_satisfied) out.push_back(c);
    }
    return out;
  }

 private:
  struct Node {
    std::vector<std::pair<TokenId, int>> children;  // sorted by token
    std::vector<int> terminals;
    int depth = 0;
  };

  int find_child(int node, TokenId token) const {
    const auto& ch = nodes_[static_cast<std::size_t>(node)].children;
    auto it = std::lower_bound(ch.begin(), ch.end(), token,
                               [](const std::pair<TokenId, int>& e, TokenId t) { return e.first < t; });
    return (it != ch.end() && it->first == token) ? it->second : -1;
  }

  void insert(int predicate, const std::vector<TokenId>& tokens) {
    int node = 0;
    for (TokenId t : tokens) {
      int child = find_child(node, t);
      if (child < 0) {
        child = static_cast<int>(nodes_.size());
        Node n;
        n.depth = nodes_[static_cast<std::size_t>(node)].depth + 1;
        nodes_.push_back(std::move(n));
        auto& ch = nodes_[static_cast<std::size_t>(node)].children;
        auto it = std::lower_bound(ch.begin(), ch.end(), t,
                                   [](const std::pair<TokenId, int>& e, TokenId x) { return e.first < x; });
        ch.insert(it, {t, child});
      }
      node = child;
    }
    nodes_[static_cast<std::size_t>(node)].terminals.push_back(predicate);
  }

  void on_match(ConstraintState& s, int pi, std::size_t pos, std::vector<std::size_t>& newly) const {
    const auto& p = predicates_[static_cast<std::size_t>(pi)];
    const auto c = static_cast<std::size_t>(p.clause);
    const auto& cl = spec_.clauses[c];
    if (p.polarity == Polarity::negated) {
      if (!s.matched_[static_cast<std::size_t>(pi)]) {
        s.matched_[static_cast<std::size_t>(pi)] = 1;
        --s.counts_[c];
      }
      mark_violated(s, Violation::negation, p.clause);
      return;
    }
    s.spans_.push_back({p.clause, pi, pos + 1 - p.tokens.size(), pos + 1});
    if (s.matched_[static_cast<std::size_t>(pi)]) return;
    s.matched_[static_cast<std::size_t>(pi)] = 1;
    ++s.counts_[c];
    if (s.counts_[c] > cl.max_satisfied) mark_violated(s, Violation::overflow, p.clause);
    if (s.satisfied_at_[c] == ConstraintState::kNever && s.counts_[c] >= cl.min_satisfied) {
      s.satisfied_at_[c] = static_cast<std::int64_t>(pos);
      newly.push_back(c);
    }
  }

  void check_order(ConstraintState& s, const std::vector<std::size_t>& newly) const {
    for (std::size_t c : newly) {
      const auto& rank = spec_.clauses[c].order_rank;
      if (!rank) continue;
      for (std::size_t d = 0; d < clause_count(); ++d) {
        const auto& other = spec_.clauses[d].order_rank;
        if (other && *other < *rank && s.satisfied_at_[d] == ConstraintState::kNever) {
          mark_violated(s, Violation::order, static_cast<int>(c));
          break;
        }
      }
    }
  }

  static void mark_violated(ConstraintState& s, Violation v, int clause) {
    if (s.violation_ != Violation::none) return;
    s.violation_ = v;
    s.violated_clause_ = clause;
  }

  ConstraintSpec spec_;
  std::vector<CompiledPredicate> predicates_;
  std::vector<Node> nodes_;
};

}  // namespace nprompt
