#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <memory>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "nprompt/errors.hpp"
#include "nprompt/pipeline.hpp"
#include "nprompt/vocabulary.hpp"

namespace nprompt {

// Text and image embeddings produced by a CLIP-style dual encoder.
struct EmbeddingPair {
  std::vector<double> text_vec;
  std::vector<double> image_vec;
};

// Preference score: inner product of the text and image embeddings.
inline double pick_score(std::span<const double> text_vec, std::span<const double> image_vec) {
  if (text_vec.size() != image_vec.size())
    throw std::invalid_argument("embedding dimension mismatch: " + std::to_string(text_vec.size()) + " vs " +
                                std::to_string(image_vec.size()));
  double s = 0.0;
  for (std::size_t i = 0; i < text_vec.size(); ++i) s += text_vec[i] * image_vec[i];
  return s;
}

inline double pick_score(const EmbeddingPair& e) { return pick_score(e.text_vec, e.image_vec); }

// Probability that image A is preferred over image B given their scores:
// exp(a) / (exp(a) + exp(b)).
inline double preference_probability(double score_a, double score_b) {
  return 1.0 / (1.0 + std::exp(score_b - score_a));
}

// Handle to a generated image. `caption` is the prompt it was generated from
// when known; stub scorers read it in place of pixels.
struct ImageRef {
  std::string id;
  std::string url;
  std::string caption;
  std::uint64_t seed = 0;
};

class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual double score(std::string_view prompt, const ImageRef& image) const = 0;
};

class ImageBackend {
 public:
  virtual ~ImageBackend() = default;
  virtual ImageRef generate(std::string_view prompt, std::uint64_t seed) const = 0;
};

// Improvement of the optimized image over the unoptimized one:
//   R = g(x, y_o) - g(x, y_u)
inline double reward(std::string_view prompt, const ImageRef& y_u, const ImageRef& y_o, const Scorer& scorer) {
  auto scored = [&](const ImageRef& img, std::string_view which) {
    try {
      double s = scorer.score(prompt, img);
      if (!std::isfinite(s)) throw ScorerError("non-finite score");
      return s;
    } catch (const std::exception& e) {
      throw ScorerError("scoring " + std::string(which) + " (" + img.id + ") failed: " + e.what());
    }
  };
  const double g_u = scored(y_u, "y_u");
  const double g_o = scored(y_o, "y_o");
  return g_o - g_u;
}

// Uniform double in [0, 1) derived from a seed.
inline double hash_noise(std::uint64_t seed) {
  std::uint64_t state = seed;
  return static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Finds catalog keywords in text as contiguous word sequences.
class KeywordCounter {
 public:
  explicit KeywordCounter(const KeywordTaxonomy& taxonomy) {
    for (Category c : kCategories) {
      for (const auto& k : taxonomy.keywords(c)) {
        auto words = split_words(k);
        if (words.empty()) continue;
        phrases_.push_back({std::move(words), static_cast<std::size_t>(c)});
      }
    }
  }

  // Distinct keywords present.
  int count(std::string_view text) const {
    const auto words = split_words(text);
    std::set<std::vector<std::string>> distinct;
    for (const auto& p : phrases_)
      if (present(words, p.words)) distinct.insert(p.words);
    return static_cast<int>(distinct.size());
  }

  // Categories with at least one keyword present.
  int categories(std::string_view text) const {
    const auto words = split_words(text);
    std::array<bool, kCategoryCount> hit{};
    for (const auto& p : phrases_)
      if (!hit[p.category] && present(words, p.words)) hit[p.category] = true;
    return static_cast<int>(std::count(hit.begin(), hit.end(), true));
  }

 private:
  struct Phrase {
    std::vector<std::string> words;
    std::size_t category;
  };

  static bool present(const std::vector<std::string>& words, const std::vector<std::string>& p) {
    return std::search(words.begin(), words.end(), p.begin(), p.end()) != words.end();
  }

  std::vector<Phrase> phrases_;
};

// Desk-scale preference scorer:
//   0.2 + 0.1 * k + 0.02 * hash_noise(image seed)
// where k (0..6) is the number of catalog categories with a keyword in the
// image caption (the prompt argument is used when the caption is empty).
class StubPreferenceScorer final : public Scorer {
 public:
  static constexpr double kBase = 0.2;
  static constexpr double kPerCategory = 0.1;
  static constexpr double kNoise = 0.02;

  explicit StubPreferenceScorer(std::shared_ptr<const KeywordCounter> counter) : counter_(std::move(counter)) {}

  double score(std::string_view prompt, const ImageRef& image) const override {
    const std::string_view text = image.caption.empty() ? prompt : std::string_view(image.caption);
    return kBase + kPerCategory * counter_->categories(text) + kNoise * hash_noise(image.seed);
  }

 private:
  std::shared_ptr<const KeywordCounter> counter_;
};

// Desk-scale aesthetics scorer on the same scale as LAION-style predictors:
//   5.0 + 0.25 * k + 0.1 * hash_noise(image seed ^ salt)
// with k as above.
class StubAestheticsScorer final : public Scorer {
 public:
  static constexpr double kBase = 5.0;
  static constexpr double kPerCategory = 0.25;
  static constexpr double kNoise = 0.1;
  static constexpr std::uint64_t kSalt = 0xae57e71c5ull;

  explicit StubAestheticsScorer(std::shared_ptr<const KeywordCounter> counter) : counter_(std::move(counter)) {}

  double score(std::string_view prompt, const ImageRef& image) const override {
    const std::string_view text = image.caption.empty() ? prompt : std::string_view(image.caption);
    return kBase + kPerCategory * counter_->categories(text) + kNoise * hash_noise(image.seed ^ kSalt);
  }

 private:
  std::shared_ptr<const KeywordCounter> counter_;
};

// Deterministic image handles derived from (prompt, seed).
class StubImageBackend final : public ImageBackend {
 public:
  ImageRef generate(std::string_view prompt, std::uint64_t seed) const override {
    std::uint64_t state = seed;
    const std::uint64_t h = fnv1a(prompt) ^ splitmix64(state);
    std::ostringstream id;
    id << std::hex << std::setw(16) << std::setfill('0') << h;
    ImageRef ref;
    ref.id = id.str();
    ref.url = "stub://image/" + ref.id;
    ref.caption = std::string(prompt);
    ref.seed = seed;
    return ref;
  }
};

// Maps `value` into [0, 1] relative to [lo, hi]; a degenerate range maps to
// 0.5.
inline double normalize_min_max(double value, double lo, double hi) {
  if (!(hi > lo)) return 0.5;
  return std::clamp((value - lo) / (hi - lo), 0.0, 1.0);
}

}  // namespace nprompt
