#pragma once

// Greedy longest-match tokenizer over a fixed arithmetic vocabulary.
//
// multi_digit: "0".."9" and "100".."999" are single tokens, so every
//              operand and result is one token.
// single_digit: numbers are spelled digit by digit.

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace dgc {

enum class TokenizerMode { multi_digit, single_digit };

inline const char* to_string(TokenizerMode m) {
  return m == TokenizerMode::multi_digit ? "multi_digit" : "single_digit";
}
inline TokenizerMode parse_tokenizer_mode(std::string_view s) {
  if (s == "multi_digit" || s == "multi") return TokenizerMode::multi_digit;
  if (s == "single_digit" || s == "single") return TokenizerMode::single_digit;
  throw std::invalid_argument("unknown tokenizer mode: " + std::string(s));
}

struct TokenizeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Tokenizer {
 public:
  static constexpr const char* kBos = "<bos>";

  explicit Tokenizer(TokenizerMode mode = TokenizerMode::multi_digit) : mode_(mode) {
    for (const char* s : {kBos, "+", "-", "=", ";", " "}) add(s);
    for (int d = 0; d <= 9; ++d) add(std::to_string(d));
    if (mode == TokenizerMode::multi_digit)
      for (int n = 100; n <= 999; ++n) add(std::to_string(n));
  }

  TokenizerMode mode() const { return mode_; }
  std::size_t vocab_size() const { return vocab_.size(); }
  const std::vector<std::string>& vocab() const { return vocab_; }
  int bos() const { return 0; }

  const std::string& token(int id) const { return vocab_.at(static_cast<std::size_t>(id)); }

  std::optional<int> find(std::string_view tok) const {
    auto it = index_.find(std::string(tok));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  int id(std::string_view tok) const {
    if (auto i = find(tok)) return *i;
    throw TokenizeError("token not in vocabulary: '" + std::string(tok) + "'");
  }

  // BOS followed by the greedy longest-match segmentation of `s`.
  std::vector<int> encode(std::string_view s) const {
    std::vector<int> out{bos()};
    std::size_t i = 0;
    while (i < s.size()) {
      std::optional<int> best;
      std::size_t best_len = 0;
      for (std::size_t len = std::min(max_len_, s.size() - i); len >= 1; --len) {
        if (auto t = find(s.substr(i, len)); t && *t != bos()) {
          best = t;
          best_len = len;
          break;
        }
      }
      if (!best)
        throw TokenizeError("unknown glyph '" + std::string(1, s[i]) + "' at offset " +
                            std::to_string(i));
      out.push_back(*best);
      i += best_len;
    }
    return out;
  }

  std::string decode(std::span<const int> ids) const {
    std::string s;
    for (int id : ids)
      if (id != bos()) s += token(id);
    return s;
  }

  // Token that starts the answer `n`: the whole number in multi_digit
  // mode, its leading digit in single_digit mode.
  int answer_token(int n) const {
    if (mode_ == TokenizerMode::multi_digit) return id(std::to_string(n));
    return id(std::to_string(n).substr(0, 1));
  }

  // Tokens the model must emit for the answer `n`, in order.
  std::vector<int> answer_tokens(int n) const {
    std::vector<int> out = encode(std::to_string(n));
    out.erase(out.begin());
    return out;
  }

 private:
  void add(const std::string& s) {
    index_.emplace(s, static_cast<int>(vocab_.size()));
    vocab_.push_back(s);
    if (s != kBos) max_len_ = std::max(max_len_, s.size());
  }

  TokenizerMode mode_;
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, int> index_;
  std::size_t max_len_ = 1;
};

}  // namespace dgc
