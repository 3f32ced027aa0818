#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <memory>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "nprompt/errors.hpp"
#include "nprompt/vocabulary.hpp"

namespace nprompt {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr std::string_view kModelHeader = "lmcore-v1";

// The last (order - 1) tokens of a history, left-padded with <s>.
using ContextKey = std::vector<TokenId>;

struct ContextKeyHash {
  std::size_t operator()(const ContextKey& k) const noexcept {
    std::size_t h = 1469598103934665603ull;
    for (TokenId t : k) {
      h ^= static_cast<std::size_t>(t) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    }
    return h;
  }
};

// Every history implicitly starts with <s>; an explicit leading <s> in the
// context is accepted and not doubled.
inline ContextKey make_context_key(std::span<const TokenId> context, int order) {
  const auto width = static_cast<std::size_t>(std::max(order - 1, 0));
  ContextKey key(width, kBos);
  std::size_t n = std::min(width, context.size());
  std::copy(context.end() - static_cast<std::ptrdiff_t>(n), context.end(),
            key.end() - static_cast<std::ptrdiff_t>(n));
  return key;
}

// In-place log-softmax over outcome ids; <pad> and <s> get -inf.
inline void log_softmax_outcomes(std::span<double> v) {
  double hi = kNegInf;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (Vocabulary::is_outcome(static_cast<TokenId>(i))) hi = std::max(hi, v[i]);
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (Vocabulary::is_outcome(static_cast<TokenId>(i))) sum += std::exp(v[i] - hi);
  const double lse = hi + std::log(sum);
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = Vocabulary::is_outcome(static_cast<TokenId>(i)) ? v[i] - lse : kNegInf;
}

// Autoregressive scorer over a fixed vocabulary. Implementations are
// immutable after construction and safe for concurrent reads.
class LanguageModel {
 public:
  explicit LanguageModel(std::shared_ptr<const Vocabulary> vocab,
                         std::size_t max_length = 1024)
      : vocab_(std::move(vocab)), max_length_(max_length) {
    if (!vocab_) throw std::invalid_argument("language model needs a vocabulary");
  }
  virtual ~LanguageModel() = default;

  const Vocabulary& vocabulary() const noexcept { return *vocab_; }
  const std::shared_ptr<const Vocabulary>& vocabulary_ptr() const noexcept { return vocab_; }
  std::size_t max_length() const noexcept { return max_length_; }

  // Log-probabilities of every vocabulary id following `context`. Outcome ids
  // are normalized; <pad> and <s> are -inf (never predicted).
  std::vector<double> next_token_log_probs(std::span<const TokenId> context) const {
    std::vector<double> out(vocab_->size());
    next_token_log_probs(context, out);
    return out;
  }

  void next_token_log_probs(std::span<const TokenId> context, std::span<double> out) const {
    if (context.size() > max_length_)
      throw std::length_error("context length " + std::to_string(context.size()) +
                              " exceeds model maximum " + std::to_string(max_length_));
    for (TokenId t : context)
      if (!vocab_->valid(t)) throw std::domain_error("invalid token id " + std::to_string(t));
    if (out.size() != vocab_->size()) throw std::invalid_argument("output span has wrong size");
    log_probs_impl(context, out);
  }

  // Sum of per-position log-probabilities of the realized tokens. Leading <s>
  // tokens only condition and contribute nothing.
  double sequence_log_prob(const TokenSequence& seq) const {
    if (seq.empty()) throw std::invalid_argument("sequence_log_prob of empty sequence");
    std::size_t start = 0;
    while (start < seq.size() && seq[start] == kBos) ++start;
    const auto& ids = seq.ids();
    std::vector<double> lp(vocab_->size());
    double total = 0.0;
    for (std::size_t i = start; i < ids.size(); ++i) {
      next_token_log_probs(std::span<const TokenId>(ids.data(), i), lp);
      total += lp[static_cast<std::size_t>(ids[i])];
    }
    return total;
  }

  // Log-probability of `continuation` given `prefix`; 0 for an empty
  // continuation.
  double continuation_log_prob(const TokenSequence& prefix, const TokenSequence& continuation) const {
    std::vector<TokenId> ctx = prefix.ids();
    std::vector<double> lp(vocab_->size());
    double total = 0.0;
    for (std::size_t i = 0; i < continuation.size(); ++i) {
      next_token_log_probs(ctx, lp);
      total += lp[static_cast<std::size_t>(continuation[i])];
      ctx.push_back(continuation[i]);
    }
    return total;
  }

 protected:
  virtual void log_probs_impl(std::span<const TokenId> context, std::span<double> out) const = 0;

 private:
  std::shared_ptr<const Vocabulary> vocab_;
  std::size_t max_length_;
};

class UniformLM final : public LanguageModel {
 public:
  using LanguageModel::LanguageModel;

 protected:
  void log_probs_impl(std::span<const TokenId>, std::span<double> out) const override {
    const double lp = -std::log(static_cast<double>(vocabulary().outcome_count()));
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = Vocabulary::is_outcome(static_cast<TokenId>(i)) ? lp : kNegInf;
  }
};

// Count-based n-gram model with additive (Laplace) smoothing:
//   P(t | ctx) = (c(ctx, t) + alpha) / (c(ctx) + alpha * K)
// where K is the number of outcome tokens. Unseen contexts are uniform.
class NGramLM final : public LanguageModel {
 public:
  struct Row {
    std::unordered_map<TokenId, double> counts;
    double total = 0.0;
  };
  using Table = std::unordered_map<ContextKey, Row, ContextKeyHash>;

  NGramLM(std::shared_ptr<const Vocabulary> vocab, int order = 2, double alpha = 1.0)
      : LanguageModel(std::move(vocab)), order_(order), alpha_(alpha) {
    if (order < 1) throw std::invalid_argument("n-gram order must be >= 1");
    if (alpha < 0.0) throw std::invalid_argument("smoothing must be non-negative");
  }

  // Trains on whitespace/comma tokenized texts; each sentence ends in </s>.
  static NGramLM train(std::shared_ptr<const Vocabulary> vocab,
                       const std::vector<std::string>& corpus, int order = 2,
                       double alpha = 1.0) {
    NGramLM lm(std::move(vocab), order, alpha);
    for (const auto& line : corpus) lm.observe(lm.vocabulary().tokenize(line));
    return lm;
  }

  void observe(const TokenSequence& sentence) {
    std::vector<TokenId> history;
    history.reserve(sentence.size() + 1);
    auto count = [&](TokenId next) {
      auto& row = table_[make_context_key(history, order_)];
      row.counts[next] += 1.0;
      row.total += 1.0;
    };
    for (std::size_t i = 0; i < sentence.size(); ++i) {
      count(sentence[i]);
      history.push_back(sentence[i]);
    }
    count(kEos);
  }

  void add_count(const ContextKey& ctx, TokenId token, double c) {
    auto& row = table_[ctx];
    row.counts[token] += c;
    row.total += c;
  }

  int order() const noexcept { return order_; }
  double alpha() const noexcept { return alpha_; }
  const Table& table() const noexcept { return table_; }

 protected:
  void log_probs_impl(std::span<const TokenId> context, std::span<double> out) const override {
    const double k = static_cast<double>(vocabulary().outcome_count());
    auto it = table_.find(make_context_key(context, order_));
    const Row* row = it == table_.end() ? nullptr : &it->second;
    const double total = row ? row->total : 0.0;
    const double denom = total + alpha_ * k;
    for (std::size_t i = 0; i < out.size(); ++i) {
      auto id = static_cast<TokenId>(i);
      if (!Vocabulary::is_outcome(id)) {
        out[i] = kNegInf;
      } else if (denom <= 0.0) {
        out[i] = -std::log(k);
      } else {
        double c = 0.0;
        if (row)
          if (auto ct = row->counts.find(id); ct != row->counts.end()) c = ct->second;
        out[i] = std::log((c + alpha_) / denom);
      }
    }
  }

 private:
  int order_;
  double alpha_;
  Table table_;
};

// Explicit logit table: rows of logits keyed by contexts of up to order - 1
// tokens, plus a fallback row. A context without its own row backs off to its
// longest suffix with one, then to the fallback. Rows are log-softmax
// normalized on query.
class TableLM final : public LanguageModel {
 public:
  using Rows = std::unordered_map<ContextKey, std::vector<double>, ContextKeyHash>;

  TableLM(std::shared_ptr<const Vocabulary> vocab, int order = 2)
      : LanguageModel(std::move(vocab)), order_(order),
        fallback_(vocabulary().size(), 0.0) {
    if (order < 1) throw std::invalid_argument("table order must be >= 1");
  }

  int order() const noexcept { return order_; }
  const Rows& rows() const noexcept { return rows_; }
  const std::vector<double>& fallback() const noexcept { return fallback_; }

  // Key of the row that serves `context`: the full (order - 1)-token key if
  // it has a row, else its longest suffix that has one, else the full key
  // (which reads the fallback row).
  ContextKey context_key(std::span<const TokenId> context) const {
    ContextKey full = make_context_key(context, order_);
    if (rows_.empty() || rows_.count(full)) return full;
    for (std::size_t drop = 1; drop < full.size(); ++drop) {
      ContextKey suffix(full.begin() + static_cast<std::ptrdiff_t>(drop), full.end());
      if (rows_.count(suffix)) return suffix;
    }
    return full;
  }

  const std::vector<double>& logits(const ContextKey& key) const {
    auto it = rows_.find(key);
    return it == rows_.end() ? fallback_ : it->second;
  }

  // Row for `key`, materialized from the fallback if absent.
  std::vector<double>& mutable_logits(const ContextKey& key) {
    auto it = rows_.find(key);
    if (it == rows_.end()) {
      check_key(key);
      it = rows_.emplace(key, fallback_).first;
    }
    return it->second;
  }

  void set_logits(const ContextKey& key, std::vector<double> row) {
    check_row(row);
    check_key(key);
    rows_[key] = std::move(row);
  }

  void set_fallback(std::vector<double> row) {
    check_row(row);
    fallback_ = std::move(row);
  }

  void log_probs_for_key(const ContextKey& key, std::span<double> out) const {
    const auto& row = logits(key);
    std::copy(row.begin(), row.end(), out.begin());
    log_softmax_outcomes(out);
  }

 protected:
  void log_probs_impl(std::span<const TokenId> context, std::span<double> out) const override {
    log_probs_for_key(context_key(context), out);
  }

 private:
  void check_key(const ContextKey& key) const {
    const auto width = static_cast<std::size_t>(order_ - 1);
    if (key.size() > width || (key.empty() && width > 0))
      throw std::invalid_argument("context key of length " + std::to_string(key.size()) + " does not fit order " +
                                  std::to_string(order_));
  }

  void check_row(const std::vector<double>& row) const {
    if (row.size() != vocabulary().size())
      throw std::invalid_argument("logit row has " + std::to_string(row.size()) +
                                  " entries, vocabulary has " +
                                  std::to_string(vocabulary().size()));
  }

  int order_;
  std::vector<double> fallback_;
  Rows rows_;
};

// ---------------------------------------------------------------------------
// Model files.
//
//   lmcore-v1
//   #kind   ngram|table
//   #order  <n>
//   #alpha  <a>            (ngram only)
//   #token  <word>         (one per non-reserved vocabulary entry, id order)
//   <context> TAB <token> TAB <value>
//
// Context tokens are space-joined; "*" names the table fallback row. Values
// are counts for ngram files and logits for table files. Table entries not
// listed get the floor logit.
// ---------------------------------------------------------------------------

inline constexpr double kTableFloorLogit = -50.0;

namespace detail {

inline std::string context_to_string(const Vocabulary& v, const ContextKey& key) {
  std::string s;
  for (std::size_t i = 0; i < key.size(); ++i) {
    if (i) s.push_back(' ');
    s += v.token(key[i]);
  }
  return s;
}

inline ContextKey context_from_string(const Vocabulary& v, const std::string& s, int order,
                                      std::size_t line_no, bool allow_suffix = false) {
  ContextKey key;
  std::istringstream in(s);
  std::string w;
  while (in >> w) {
    auto id = v.find(w);
    if (!id) throw ParseError("line " + std::to_string(line_no) + ": unknown context token '" + w + "'");
    key.push_back(*id);
  }
  const auto width = static_cast<std::size_t>(std::max(order - 1, 0));
  const bool fits = allow_suffix ? (key.size() <= width && (!key.empty() || width == 0)) : key.size() == width;
  if (!fits)
    throw ParseError("line " + std::to_string(line_no) + ": context '" + s +
                     "' does not match order " + std::to_string(order));
  return key;
}

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find('\t', start);
    out.push_back(line.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

inline void write_header(std::ostream& out, std::string_view kind, int order) {
  out << kModelHeader << '\n' << "#kind\t" << kind << '\n' << "#order\t" << order << '\n';
}

inline void write_tokens(std::ostream& out, const Vocabulary& v) {
  for (std::size_t i = kFirstWordId; i < v.size(); ++i)
    out << "#token\t" << v.tokens()[i] << '\n';
}

template <typename Map>
std::vector<typename Map::const_iterator> sorted_entries(const Map& m) {
  std::vector<typename Map::const_iterator> its;
  for (auto it = m.begin(); it != m.end(); ++it) its.push_back(it);
  std::sort(its.begin(), its.end(), [](auto a, auto b) { return a->first < b->first; });
  return its;
}

}  // namespace detail

inline void save_model(std::ostream& out, const NGramLM& lm) {
  const auto& v = lm.vocabulary();
  detail::write_header(out, "ngram", lm.order());
  out << "#alpha\t" << lm.alpha() << '\n';
  detail::write_tokens(out, v);
  out.precision(17);
  for (auto it : detail::sorted_entries(lm.table())) {
    std::vector<std::pair<TokenId, double>> cells(it->second.counts.begin(), it->second.counts.end());
    std::sort(cells.begin(), cells.end());
    for (auto [tok, c] : cells)
      out << detail::context_to_string(v, it->first) << '\t' << v.token(tok) << '\t' << c << '\n';
  }
}

inline void save_model(std::ostream& out, const TableLM& lm) {
  const auto& v = lm.vocabulary();
  detail::write_header(out, "table", lm.order());
  detail::write_tokens(out, v);
  out.precision(17);
  auto write_row = [&](const std::string& ctx, const std::vector<double>& row) {
    for (std::size_t i = 0; i < row.size(); ++i)
      if (Vocabulary::is_outcome(static_cast<TokenId>(i)))
        out << ctx << '\t' << v.tokens()[i] << '\t' << row[i] << '\n';
  };
  write_row("*", lm.fallback());
  for (auto it : detail::sorted_entries(lm.rows()))
    write_row(detail::context_to_string(v, it->first), it->second);
}

inline std::unique_ptr<LanguageModel> load_model(std::istream& in) {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line) || line != kModelHeader)
    throw ParseError("missing '" + std::string(kModelHeader) + "' header");
  std::string kind;
  int order = 2;
  double alpha = 1.0;
  auto vocab = std::make_shared<Vocabulary>();
  std::vector<std::vector<std::string>> body;
  std::vector<std::size_t> body_lines;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = detail::split_tabs(line);
    if (line[0] == '#') {
      if (cells.size() != 2) throw ParseError("line " + std::to_string(line_no) + ": malformed directive");
      const auto& key = cells[0];
      if (key == "#kind") kind = cells[1];
      else if (key == "#order") order = std::stoi(cells[1]);
      else if (key == "#alpha") alpha = std::stod(cells[1]);
      else if (key == "#token") vocab->add(cells[1]);
      else throw ParseError("line " + std::to_string(line_no) + ": unknown directive " + key);
      continue;
    }
    if (cells.size() != 3) throw ParseError("line " + std::to_string(line_no) + ": expected 3 tab-separated fields");
    body.push_back(std::move(cells));
    body_lines.push_back(line_no);
  }
  std::shared_ptr<const Vocabulary> cv = vocab;
  auto token_of = [&](const std::string& w, std::size_t ln) {
    auto id = cv->find(w);
    if (!id) throw ParseError("line " + std::to_string(ln) + ": unknown token '" + w + "'");
    return *id;
  };
  auto number = [](const std::string& s, std::size_t ln) {
    try {
      std::size_t used = 0;
      double d = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return d;
    } catch (const std::exception&) {
      throw ParseError("line " + std::to_string(ln) + ": bad number '" + s + "'");
    }
  };
  if (kind == "ngram") {
    auto lm = std::make_unique<NGramLM>(cv, order, alpha);
    for (std::size_t i = 0; i < body.size(); ++i) {
      auto ctx = detail::context_from_string(*cv, body[i][0], order, body_lines[i]);
      lm->add_count(ctx, token_of(body[i][1], body_lines[i]), number(body[i][2], body_lines[i]));
    }
    return lm;
  }
  if (kind == "table") {
    auto lm = std::make_unique<TableLM>(cv, order);
    std::vector<double> floor(cv->size(), kTableFloorLogit);
    std::map<ContextKey, std::vector<double>> rows;
    std::vector<double> fallback;
    for (std::size_t i = 0; i < body.size(); ++i) {
      std::vector<double>* row;
      if (body[i][0] == "*") {
        if (fallback.empty()) fallback = floor;
        row = &fallback;
      } else {
        auto ctx = detail::context_from_string(*cv, body[i][0], order, body_lines[i], true);
        auto it = rows.find(ctx);
        if (it == rows.end()) it = rows.emplace(ctx, floor).first;
        row = &it->second;
      }
      (*row)[static_cast<std::size_t>(token_of(body[i][1], body_lines[i]))] =
          number(body[i][2], body_lines[i]);
    }
    if (!fallback.empty()) lm->set_fallback(std::move(fallback));
    for (auto& [k, r] : rows) lm->set_logits(k, std::move(r));
    return lm;
  }
  throw ParseError("unknown model kind '" + kind + "'");
}

inline std::unique_ptr<LanguageModel> load_model_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open model file " + path);
  return load_model(in);
}

template <typename Model>
void save_model_file(const std::string& path, const Model& lm) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write model file " + path);
  save_model(out, lm);
}

}  // namespace nprompt
