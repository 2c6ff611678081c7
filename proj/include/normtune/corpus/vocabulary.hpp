#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "normtune/corpus/sentence.hpp"
#include "normtune/util/error.hpp"
#include "normtune/util/sha256.hpp"

namespace normtune::corpus {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

inline bool is_split_punctuation(char c) {
  return c == '.' || c == '!' || c == '?' || c == ',' || c == ';' || c == ':';
}

// Lowercase, split on whitespace, and break the punctuation marks . ! ? , ; :
// out as tokens of their own.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) words.push_back(std::exchange(current, {}));
  };
  for (char c : text) {
    const auto uc = static_cast<unsigned char>(c);
    if (std::isspace(uc)) {
      flush();
    } else if (is_split_punctuation(c)) {
      flush();
      words.emplace_back(1, c);
    } else {
      current.push_back(uc < 0x80 ? static_cast<char>(std::tolower(uc)) : c);
    }
  }
  flush();
  return words;
}

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kBos = 2;
  static constexpr TokenId kEos = 3;
  static constexpr std::size_t kReserved = 4;

  Vocabulary() : Vocabulary(reserved_tokens()) {}

  // Tokens must start with the four reserved entries and be unique.
  explicit Vocabulary(std::vector<std::string> tokens, std::size_t max_size = 0)
      : tokens_(std::move(tokens)), max_size_(max_size == 0 ? tokens_.size() : max_size) {
    const auto reserved = reserved_tokens();
    if (tokens_.size() < kReserved || !std::equal(reserved.begin(), reserved.end(), tokens_.begin())) {
      throw FormatError("vocabulary must begin with <pad> <unk> <bos> <eos>");
    }
    if (tokens_.size() > max_size_) throw InvalidArgument("vocabulary exceeds its max_size");
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
        throw FormatError("duplicate vocabulary token '" + tokens_[i] + "'");
      }
    }
  }

  static std::vector<std::string> reserved_tokens() { return {"<pad>", "<unk>", "<bos>", "<eos>"}; }

  // Keeps the (max_size - 4) most frequent words; ties break lexicographically.
  static Vocabulary build(std::span<const std::string> texts, std::size_t max_size) {
    if (max_size < kReserved + 1) {
      throw InvalidArgument("max_size " + std::to_string(max_size) +
                            " leaves no room beyond the 4 reserved tokens");
    }
    std::map<std::string, std::size_t> counts;
    for (const auto& text : texts) {
      for (auto& w : split_words(text)) ++counts[std::move(w)];
    }
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    auto tokens = reserved_tokens();
    for (const auto& [word, count] : ranked) {
      if (tokens.size() >= max_size) break;
      if (std::find(tokens.begin(), tokens.begin() + kReserved, word) != tokens.begin() + kReserved) continue;
      tokens.push_back(word);
    }
    return Vocabulary(std::move(tokens), max_size);
  }

  static Vocabulary build(std::span<const LabeledSentence> sentences, std::size_t max_size) {
    std::vector<std::string> texts;
    texts.reserve(sentences.size());
    for (const auto& s : sentences) texts.push_back(s.text);
    return build(std::span<const std::string>(texts), max_size);
  }

  std::size_t size() const { return tokens_.size(); }
  std::size_t max_size() const { return max_size_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenId id(std::string_view token) const {
    const auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw InvalidArgument("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(tokens_.size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  static bool is_reserved(TokenId id) { return id >= 0 && static_cast<std::size_t>(id) < kReserved; }

  std::string sha256() const {
    Sha256 h;
    for (const auto& t : tokens_) h.update(t).update("\n");
    return h.hex();
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read vocabulary " + path.string());
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) tokens.push_back(line);
    return Vocabulary(std::move(tokens));
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::size_t max_size_;
  std::unordered_map<std::string, TokenId> index_;
};

// BOS followed by the word ids; unknown words map to UNK.
inline TokenSequence tokenize(std::string_view text, const Vocabulary& vocab) {
  TokenSequence ids{Vocabulary::kBos};
  for (const auto& w : split_words(text)) ids.push_back(vocab.id(w));
  return ids;
}

inline std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) {
    const auto& tok = vocab.token(id);
    if (Vocabulary::is_reserved(id)) continue;
    const bool punct = tok.size() == 1 && is_split_punctuation(tok[0]);
    if (!out.empty() && !punct) out.push_back(' ');
    out += tok;
  }
  return out;
}

}  // namespace normtune::corpus
