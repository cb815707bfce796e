// SPDX-License-Identifier: Apache-2.0
#include "mededit/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "mededit/error.hpp"

namespace mededit {

namespace {

bool is_word_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) != 0;
}

bool is_punct_token(char c) {
  switch (c) {
    case '.':
    case ',':
    case '?':
    case '!':
    case ':':
    case ';':
    case '(':
    case ')':
    case '\'':
    case '-':
      return true;
    default:
      return false;
  }
}

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string word;
  for (char raw : text) {
    const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
    if (is_word_char(c)) {
      word.push_back(c);
      continue;
    }
    if (!word.empty()) {
      out.push_back(word);
      word.clear();
    }
    if (is_punct_token(c)) out.emplace_back(1, c);
    // Anything else (whitespace, stray symbols) separates tokens.
  }
  if (!word.empty()) out.push_back(word);
  return out;
}

std::string normalize_text(std::string_view text) {
  const auto words = split_words(text);
  std::string s;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) s.push_back(' ');
    s += words[i];
  }
  return s;
}

Vocab Vocab::build(std::span<const std::string> corpus_lines) {
  std::set<std::string> unique;
  for (const auto& line : corpus_lines) {
    for (auto& w : split_words(line)) unique.insert(std::move(w));
  }
  std::vector<std::string> tokens = {"<pad>", "<unk>", "<eos>"};
  tokens.insert(tokens.end(), unique.begin(), unique.end());
  return from_tokens(std::move(tokens));
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < 3) {
    throw ContractError("vocab must contain at least the three reserved specials");
  }
  Vocab v;
  v.tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.index_.emplace(v.tokens_[i], static_cast<int>(i)).second) {
      throw ContractError("duplicate token in vocabulary: " + v.tokens_[i]);
    }
  }
  return v;
}

int Vocab::id(const std::string& word) const {
  const auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<int> tokenize(std::string_view text, const Vocab& vocab) {
  std::vector<int> ids;
  for (const auto& w : split_words(text)) ids.push_back(vocab.id(w));
  return ids;
}

std::string detokenize(std::span<const int> ids, const Vocab& vocab) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) s.push_back(' ');
    s += vocab.token(ids[i]);
  }
  return s;
}

}  // namespace mededit
