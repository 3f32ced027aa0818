#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "nprompt/constraints.hpp"
#include "nprompt/errors.hpp"
#include "nprompt/vocabulary.hpp"

namespace nprompt {

// ---------------------------------------------------------------------------
// Prefix extraction and overlap filtering
// ---------------------------------------------------------------------------

// Text before the first comma with trailing whitespace removed; prompts
// without a comma come back whole.
inline std::string extract_prefix(std::string_view prompt) {
  auto cut = prompt.substr(0, prompt.find(','));
  auto end = cut.find_last_not_of(" \t\r\n");
  return end == std::string_view::npos ? std::string() : std::string(cut.substr(0, end + 1));
}

// Similarity between a prefix and its full prompt, in [0, 1].
using SimilarityFn = std::function<double(std::string_view, std::string_view)>;

// Jaccard similarity of the word sets of both texts; comma tokens are
// ignored. Two empty sets have similarity 0.
inline double jaccard_similarity(std::string_view a, std::string_view b) {
  auto words = [](std::string_view s) {
    std::set<std::string> out;
    for (auto& w : split_words(s))
      if (w != ",") out.insert(std::move(w));
    return out;
  };
  const auto sa = words(a);
  const auto sb = words(b);
  if (sa.empty() && sb.empty()) return 0.0;
  std::size_t inter = 0;
  for (const auto& w : sa) inter += sb.count(w);
  const std::size_t uni = sa.size() + sb.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

inline constexpr double kDefaultOverlapThreshold = 0.6;

struct OverlapResult {
  double overlap = 0.0;
  bool kept = true;
};

// Records whose overlap exceeds the threshold are excluded; the threshold
// itself is kept.
inline OverlapResult overlap_filter(std::string_view prefix, std::string_view prompt,
                                    double threshold = kDefaultOverlapThreshold,
                                    const SimilarityFn& similarity = jaccard_similarity) {
  OverlapResult r;
  r.overlap = similarity(prefix, prompt);
  r.kept = r.overlap <= threshold;
  return r;
}

struct CorpusRecord {
  std::string full_prompt;
  std::string prefix;
  double overlap = 0.0;
  bool kept = false;
};

// An empty prefix carries nothing to optimize and is never kept.
inline CorpusRecord prepare_record(std::string_view prompt, double threshold = kDefaultOverlapThreshold,
                                   const SimilarityFn& similarity = jaccard_similarity) {
  CorpusRecord r;
  r.full_prompt = std::string(prompt);
  r.prefix = extract_prefix(prompt);
  auto ov = overlap_filter(r.prefix, prompt, threshold, similarity);
  r.overlap = ov.overlap;
  r.kept = ov.kept && !r.prefix.empty();
  return r;
}

// One prompt per line; blank lines are skipped.
inline std::vector<std::string> read_corpus(std::istream& in) {
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    out.push_back(line);
  }
  return out;
}

inline std::vector<std::string> read_corpus_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open corpus " + path);
  return read_corpus(in);
}

// full_prompt TAB prefix TAB overlap TAB kept
inline void write_corpus_records(std::ostream& out, const std::vector<CorpusRecord>& records) {
  auto clean = [](std::string s) {
    std::replace(s.begin(), s.end(), '\t', ' ');
    return s;
  };
  for (const auto& r : records) {
    out << clean(r.full_prompt) << '\t' << clean(r.prefix) << '\t' << std::fixed << std::setprecision(6)
        << r.overlap << '\t' << (r.kept ? "true" : "false") << '\n';
  }
  out.unsetf(std::ios::floatfield);
}

// ---------------------------------------------------------------------------
// Keyword taxonomy
// ---------------------------------------------------------------------------

enum class Category { style, artist, format, booster, vibe, perspective };
inline constexpr std::size_t kCategoryCount = 6;
inline constexpr std::array<Category, kCategoryCount> kCategories = {
    Category::style, Category::artist, Category::format,
    Category::booster, Category::vibe, Category::perspective};

inline std::string_view category_name(Category c) {
  static constexpr std::array<std::string_view, kCategoryCount> names = {
      "style", "artist", "format", "booster", "vibe", "perspective"};
  return names[static_cast<std::size_t>(c)];
}

// Column heading used in the bundled taxonomy file.
inline std::string_view category_column(Category c) {
  static constexpr std::array<std::string_view, kCategoryCount> names = {
      "Style", "Artist", "Format", "Boosters", "Vibes", "Perspective"};
  return names[static_cast<std::size_t>(c)];
}

inline std::optional<Category> parse_category(std::string_view s) {
  std::string low;
  for (char ch : s) low.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  if (!low.empty() && low.back() == 's') low.pop_back();
  for (Category c : kCategories)
    if (category_name(c) == low) return c;
  return std::nullopt;
}

struct KeywordTaxonomy {
  std::array<std::vector<std::string>, kCategoryCount> categories;

  const std::vector<std::string>& keywords(Category c) const {
    return categories[static_cast<std::size_t>(c)];
  }

  // Case-insensitive membership.
  bool contains(Category c, std::string_view keyword) const {
    const auto key = split_words(keyword);
    return std::any_of(keywords(c).begin(), keywords(c).end(),
                       [&](const std::string& k) { return split_words(k) == key; });
  }

  // Distinct keywords of a category, first occurrence order.
  std::vector<std::string> unique_keywords(Category c) const {
    std::vector<std::string> out;
    std::set<std::vector<std::string>> seen;
    for (const auto& k : keywords(c))
      if (seen.insert(split_words(k)).second) out.push_back(k);
    return out;
  }

  std::vector<std::string> all_keywords() const {
    std::vector<std::string> out;
    for (const auto& ks : categories) out.insert(out.end(), ks.begin(), ks.end());
    return out;
  }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      cells.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  cells.push_back(trim(cur));
  return cells;
}

}  // namespace detail

// Comma-separated file with a header row naming the six categories (in any
// order; singular or plural headings accepted). Empty cells are skipped.
inline KeywordTaxonomy parse_taxonomy(std::istream& in) {
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!trim(line).empty()) lines.push_back(line);
  }
  if (lines.empty()) throw ParseError("taxonomy file is empty");
  const auto header = detail::split_csv_line(lines.front());
  std::array<int, kCategoryCount> column{};
  column.fill(-1);
  for (std::size_t i = 0; i < header.size(); ++i)
    if (auto c = parse_category(header[i])) column[static_cast<std::size_t>(*c)] = static_cast<int>(i);
  for (Category c : kCategories)
    if (column[static_cast<std::size_t>(c)] < 0)
      throw ParseError("taxonomy is missing the '" + std::string(category_column(c)) + "' column");
  KeywordTaxonomy tax;
  for (std::size_t r = 1; r < lines.size(); ++r) {
    const auto cells = detail::split_csv_line(lines[r]);
    for (Category c : kCategories) {
      const auto col = static_cast<std::size_t>(column[static_cast<std::size_t>(c)]);
      if (col < cells.size() && !cells[col].empty())
        tax.categories[static_cast<std::size_t>(c)].push_back(cells[col]);
    }
  }
  return tax;
}

inline KeywordTaxonomy load_taxonomy(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open taxonomy " + path);
  return parse_taxonomy(in);
}

// ---------------------------------------------------------------------------
// Clause construction
// ---------------------------------------------------------------------------

inline constexpr int kAutoKeywordsPerClause = 5;

struct CategorySelection {
  enum class Mode { automatic, explicit_keywords };
  Mode mode = Mode::automatic;
  std::vector<std::string> keywords;
  // Explicit keywords outside the taxonomy are accepted only when set.
  bool custom = false;

  static CategorySelection automatic() { return {}; }
  static CategorySelection of(std::vector<std::string> kws, bool custom = false) {
    return {Mode::explicit_keywords, std::move(kws), custom};
  }
};

struct ClauseSelection {
  std::array<CategorySelection, kCategoryCount> categories{};
  std::vector<std::string> negative_phrases;
  std::uint64_t seed = 0;

  CategorySelection& operator[](Category c) { return categories[static_cast<std::size_t>(c)]; }
  const CategorySelection& operator[](Category c) const { return categories[static_cast<std::size_t>(c)]; }
};

// SplitMix64; used for portable, seed-reproducible sampling.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// `k` distinct items chosen by partial Fisher-Yates under `seed`.
inline std::vector<std::string> sample_keywords(std::vector<std::string> pool, std::size_t k,
                                                std::uint64_t seed) {
  std::uint64_t state = seed;
  k = std::min(k, pool.size());
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(splitmix64(state) % (pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

// One clause per category in taxonomy order (min 1, no maximum), then an
// exclusion clause for negative phrases. Automatic categories sample five
// distinct keywords; a category explicitly set to no keywords is left out.
inline ConstraintSpec build_clauses(const KeywordTaxonomy& taxonomy, const ClauseSelection& selection) {
  ConstraintSpec spec;
  for (Category cat : kCategories) {
    const auto& sel = selection[cat];
    Clause clause;
    clause.label = std::string(category_name(cat));
    std::vector<std::string> kws;
    if (sel.mode == CategorySelection::Mode::automatic) {
      const auto ci = static_cast<std::uint64_t>(cat);
      kws = sample_keywords(taxonomy.unique_keywords(cat), kAutoKeywordsPerClause,
                            selection.seed * 0x100000001b3ull + ci);
    } else {
      for (const auto& k : sel.keywords) {
        if (trim(k).empty()) throw ValidationError("empty keyword in " + clause.label + " selection");
        if (!sel.custom && !taxonomy.contains(cat, k))
          throw ValidationError("'" + k + "' is not a " + clause.label + " keyword (mark it custom to allow)");
        kws.push_back(trim(k));
      }
    }
    if (kws.empty()) continue;
    for (auto& k : kws) clause.predicates.push_back({std::move(k), Polarity::positive});
    spec.clauses.push_back(std::move(clause));
  }
  if (!selection.negative_phrases.empty()) {
    Clause neg;
    neg.label = "negative";
    for (const auto& p : selection.negative_phrases) {
      if (trim(p).empty()) throw ValidationError("empty negative phrase");
      neg.predicates.push_back({trim(p), Polarity::negated});
    }
    neg.min_satisfied = static_cast<int>(neg.predicates.size());
    spec.clauses.push_back(std::move(neg));
  }
  validate(spec);
  return spec;
}

}  // namespace nprompt
