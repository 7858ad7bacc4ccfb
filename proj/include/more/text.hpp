#pragma once

// Word-level tokenizer and report joining.

#include <Eigen/Core>

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace more {

using TokenId = Eigen::Index;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr TokenId kClsId = 2;
inline constexpr TokenId kSepId = 3;
inline constexpr int kMaxTextLength = 512;

/// Runs of letters/digits and single punctuation characters; case is kept.
std::vector<std::string> split_words(std::string_view text);

class Tokenizer {
 public:
  /// Vocabulary = specials, then every word with count >= min_freq in
  /// lexicographic order. Throws ParameterError on an empty corpus.
  static Tokenizer build(const std::vector<std::string>& corpus, int min_freq = 1);
  /// Restores a tokenizer from vocab(); the first four entries must be the specials.
  static Tokenizer from_vocab(std::vector<std::string> words);

  std::vector<TokenId> encode(std::string_view text) const;
  /// Space-joined words; PAD ids are skipped.
  std::string decode(const std::vector<TokenId>& ids) const;

  TokenId id(const std::string& word) const;
  const std::string& word(TokenId id) const;
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& vocab() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> ids_;
};

/// [CLS] x-ray [SEP] ecg [SEP]. When too long, tokens are dropped from the
/// tail of whichever note is currently longer (the x-ray note on ties)
/// until the result fits `max_length`. An empty note leaves its segment
/// empty, e.g. [CLS] x-ray [SEP] [SEP].
std::vector<TokenId> join_reports(const std::string& xray_note, const std::string& ecg_note, const Tokenizer& tok,
                                  int max_length = kMaxTextLength);

/// Pads with kPadId (or truncates) to exactly `length` ids.
std::vector<TokenId> pad_to(std::vector<TokenId> ids, std::size_t length);

}  // namespace more
