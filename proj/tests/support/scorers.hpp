#pragma once

#include <map>
#include <string>
#include <vector>

#include "nprompt/errors.hpp"
#include "nprompt/scoring.hpp"

namespace testing_support {

// Looks scores up by image id; unknown ids fail.
class FixedScorer final : public nprompt::Scorer {
 public:
  explicit FixedScorer(std::map<std::string, double> scores) : scores_(std::move(scores)) {}
  double score(std::string_view, const nprompt::ImageRef& image) const override {
    auto it = scores_.find(image.id);
    if (it == scores_.end()) throw std::runtime_error("no score for " + image.id);
    return it->second;
  }

 private:
  std::map<std::string, double> scores_;
};

// Inner product of one text embedding with per-image embeddings.
class EmbeddingScorer final : public nprompt::Scorer {
 public:
  EmbeddingScorer(std::vector<double> text, std::map<std::string, std::vector<double>> images)
      : text_(std::move(text)), images_(std::move(images)) {}
  double score(std::string_view, const nprompt::ImageRef& image) const override {
    return nprompt::pick_score(text_, images_.at(image.id));
  }

 private:
  std::vector<double> text_;
  std::map<std::string, std::vector<double>> images_;
};

}  // namespace testing_support
