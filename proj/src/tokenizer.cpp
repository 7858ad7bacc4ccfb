#include "more/text.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "more/errors.hpp"

namespace more {

namespace {

const std::vector<std::string> kSpecials = {"[PAD]", "[UNK]", "[CLS]", "[SEP]"};

bool is_word_char(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
    } else if (is_word_char(c)) {
      std::size_t j = i;
      while (j < text.size() && is_word_char(static_cast<unsigned char>(text[j]))) ++j;
      words.emplace_back(text.substr(i, j - i));
      i = j;
    } else {
      words.emplace_back(1, text[i]);
      ++i;
    }
  }
  return words;
}

Tokenizer Tokenizer::build(const std::vector<std::string>& corpus, int min_freq) {
  std::map<std::string, int> counts;
  for (const auto& doc : corpus)
    for (auto& w : split_words(doc)) ++counts[w];
  if (counts.empty()) throw ParameterError("cannot build a tokenizer from an empty corpus");
  std::vector<std::string> words = kSpecials;
  for (const auto& [w, n] : counts)
    if (n >= min_freq && std::find(kSpecials.begin(), kSpecials.end(), w) == kSpecials.end()) words.push_back(w);
  return from_vocab(std::move(words));
}

Tokenizer Tokenizer::from_vocab(std::vector<std::string> words) {
  if (words.size() < kSpecials.size() || !std::equal(kSpecials.begin(), kSpecials.end(), words.begin()))
    throw ParameterError("vocabulary must start with [PAD] [UNK] [CLS] [SEP]");
  Tokenizer tok;
  tok.words_ = std::move(words);
  for (std::size_t i = 0; i < tok.words_.size(); ++i)
    if (!tok.ids_.emplace(tok.words_[i], static_cast<TokenId>(i)).second)
      throw ParameterError("duplicate vocabulary entry: " + tok.words_[i]);
  return tok;
}

TokenId Tokenizer::id(const std::string& word) const {
  const auto it = ids_.find(word);
  return it == ids_.end() ? kUnkId : it->second;
}

const std::string& Tokenizer::word(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) throw ParameterError("token id out of range");
  return words_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& w : split_words(text)) ids.push_back(id(w));
  return ids;
}

std::string Tokenizer::decode(const std::vector<TokenId>& ids) const {
  std::string out;
  for (TokenId t : ids) {
    if (t == kPadId) continue;
    if (!out.empty()) out += ' ';
    out += word(t);
  }
  return out;
}

std::vector<TokenId> join_reports(const std::string& xray_note, const std::string& ecg_note, const Tokenizer& tok,
                                  int max_length) {
  if (max_length < 3) throw ParameterError("max_length must leave room for [CLS] and two [SEP]");
  auto x = tok.encode(xray_note), e = tok.encode(ecg_note);
  const std::size_t budget = static_cast<std::size_t>(max_length) - 3;
  while (x.size() + e.size() > budget) {
    if (x.size() >= e.size())
      x.pop_back();
    else
      e.pop_back();
  }
  std::vector<TokenId> ids{kClsId};
  ids.insert(ids.end(), x.begin(), x.end());
  ids.push_back(kSepId);
  ids.insert(ids.end(), e.begin(), e.end());
  ids.push_back(kSepId);
  return ids;
}

std::vector<TokenId> pad_to(std::vector<TokenId> ids, std::size_t length) {
  ids.resize(length, kPadId);
  return ids;
}

}  // namespace more
