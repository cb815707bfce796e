// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mededit {

// Word-level vocabulary: three reserved specials followed by the sorted
// unique tokens of the corpus it was built from. Index order is part of the
// checkpoint format, so construction is fully deterministic.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kEos = 2;

  Vocab() = default;

  /// Builds specials + sorted unique word tokens from corpus lines.
  static Vocab build(std::span<const std::string> corpus_lines);

  /// Restores a vocabulary from an explicit token list (checkpoint load).
  static Vocab from_tokens(std::vector<std::string> tokens);

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  /// Token id, or kUnk for out-of-vocabulary words.
  int id(const std::string& word) const;
  bool contains(const std::string& word) const { return index_.count(word) != 0; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Lowercases and splits text into word / punctuation tokens.
std::vector<std::string> split_words(std::string_view text);

/// Canonical text form: lowercased, single spaces, punctuation separated.
std::string normalize_text(std::string_view text);

/// Empty text yields an empty sequence.
std::vector<int> tokenize(std::string_view text, const Vocab& vocab);

std::string detokenize(std::span<const int> ids, const Vocab& vocab);

}  // namespace mededit
