#pragma once

#include <cctype>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace nprompt {

using TokenId = std::int32_t;

// Reserved ids. Every vocabulary starts with these four entries.
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kFirstWordId = 4;

inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kBosToken = "<s>";
inline constexpr std::string_view kEosToken = "</s>";
inline constexpr std::string_view kUnkToken = "<unk>";

// Splits text into lowercase word tokens. Whitespace separates tokens and
// every comma becomes a token of its own. Only ASCII letters are folded;
// other bytes pass through unchanged.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (ch == ',') {
      flush();
      out.emplace_back(",");
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

// Token ids plus the surface spelling each token was read from. The surface
// keeps out-of-vocabulary words renderable after they collapse to <unk>.
class TokenSequence {
 public:
  TokenSequence() = default;
  explicit TokenSequence(std::vector<TokenId> ids) : ids_(std::move(ids)) {
    surface_.resize(ids_.size());
  }

  std::size_t size() const noexcept { return ids_.size(); }
  bool empty() const noexcept { return ids_.empty(); }
  TokenId operator[](std::size_t i) const { return ids_[i]; }
  TokenId back() const { return ids_.back(); }
  const std::vector<TokenId>& ids() const noexcept { return ids_; }
  const std::string& surface(std::size_t i) const { return surface_[i]; }

  void push_back(TokenId id, std::string surface = {}) {
    ids_.push_back(id);
    surface_.push_back(std::move(surface));
  }

  void append(const TokenSequence& other) {
    ids_.insert(ids_.end(), other.ids_.begin(), other.ids_.end());
    surface_.insert(surface_.end(), other.surface_.begin(),
                    other.surface_.end());
  }

  TokenSequence slice(std::size_t begin, std::size_t end) const {
    TokenSequence out;
    out.ids_.assign(ids_.begin() + static_cast<std::ptrdiff_t>(begin),
                    ids_.begin() + static_cast<std::ptrdiff_t>(end));
    out.surface_.assign(surface_.begin() + static_cast<std::ptrdiff_t>(begin),
                        surface_.begin() + static_cast<std::ptrdiff_t>(end));
    return out;
  }

  bool starts_with(const TokenSequence& prefix) const {
    if (prefix.size() > size()) return false;
    for (std::size_t i = 0; i < prefix.size(); ++i)
      if (ids_[i] != prefix.ids_[i]) return false;
    return true;
  }

  friend bool operator==(const TokenSequence& a, const TokenSequence& b) {
    return a.ids_ == b.ids_;
  }

 private:
  std::vector<TokenId> ids_;
  std::vector<std::string> surface_;
};

// Character range [begin, end) of one token inside a rendered string.
struct CharSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
};

struct RenderedText {
  std::string text;
  // One entry per token; special tokens get an empty span at their position.
  std::vector<CharSpan> offsets;
};

class Vocabulary {
 public:
  Vocabulary() {
    for (auto s : {kPadToken, kBosToken, kEosToken, kUnkToken}) add(std::string(s));
  }

  // Words are added in order; duplicates and reserved spellings are skipped.
  explicit Vocabulary(const std::vector<std::string>& words) : Vocabulary() {
    for (const auto& w : words) add(w);
  }

  // Every word appearing in `texts` under the tokenization rule, first-seen
  // order.
  static Vocabulary from_texts(const std::vector<std::string>& texts) {
    Vocabulary v;
    for (const auto& t : texts)
      for (auto& w : split_words(t)) v.add(w);
    return v;
  }

  // Returns the id of `word`, adding it if new.
  TokenId add(const std::string& word) {
    if (word.empty()) throw std::invalid_argument("empty token");
    if (auto it = ids_.find(word); it != ids_.end()) return it->second;
    auto id = static_cast<TokenId>(tokens_.size());
    tokens_.push_back(word);
    ids_.emplace(word, id);
    return id;
  }

  std::size_t size() const noexcept { return tokens_.size(); }

  std::optional<TokenId> find(std::string_view word) const {
    if (auto it = ids_.find(std::string(word)); it != ids_.end())
      return it->second;
    return std::nullopt;
  }

  TokenId id_or_unk(std::string_view word) const {
    return find(word).value_or(kUnk);
  }

  const std::string& token(TokenId id) const {
    if (!valid(id)) throw std::domain_error("token id out of range: " + std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)];
  }

  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  bool valid(TokenId id) const noexcept {
    return id >= 0 && static_cast<std::size_t>(id) < tokens_.size();
  }

  // Tokens a language model assigns probability mass to: everything except
  // <pad> and <s>.
  static bool is_outcome(TokenId id) noexcept { return id != kPad && id != kBos; }

  // Tokens a decoder may emit: outcomes minus <unk>.
  static bool is_generatable(TokenId id) noexcept {
    return is_outcome(id) && id != kUnk;
  }

  std::size_t outcome_count() const noexcept { return tokens_.size() - 2; }

  TokenSequence tokenize(std::string_view text) const {
    TokenSequence seq;
    for (auto& w : split_words(text)) {
      TokenId id = id_or_unk(w);
      seq.push_back(id, std::move(w));
    }
    return seq;
  }

  RenderedText render(const TokenSequence& seq) const {
    RenderedText out;
    out.offsets.reserve(seq.size());
    for (std::size_t i = 0; i < seq.size(); ++i) {
      TokenId id = seq[i];
      if (id == kPad || id == kBos || id == kEos) {
        out.offsets.push_back({out.text.size(), out.text.size()});
        continue;
      }
      const std::string& word =
          (id == kUnk && !seq.surface(i).empty()) ? seq.surface(i) : token(id);
      if (!out.text.empty() && word != ",") out.text.push_back(' ');
      std::size_t begin = out.text.size();
      out.text += word;
      out.offsets.push_back({begin, out.text.size()});
    }
    return out;
  }

  std::string detokenize(const TokenSequence& seq) const { return render(seq).text; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

}  // namespace nprompt
