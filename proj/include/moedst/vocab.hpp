#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace moedst {

// Reserved token indices are fixed so they survive any corpus.
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;

inline const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> toks = {"<pad>", "<bos>", "<eos>", "<unk>",
                                                "[sys]", "[usr]", "[slot]"};
  return toks;
}

// Lowercases and splits on whitespace; bracketed markers stay atomic, any
// other punctuation becomes its own token ("hotel-area:" -> hotel - area :).
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string word;
  auto flush_word = [&] {
    if (word.empty()) return;
    if (word.front() == '[' && word.back() == ']') {
      out.push_back(word);
    } else {
      std::string run;
      for (char c : word) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
          run += c;
        } else {
          if (!run.empty()) out.push_back(std::move(run));
          run.clear();
          out.emplace_back(1, c);
        }
      }
      if (!run.empty()) out.push_back(std::move(run));
    }
    word.clear();
  };
  for (char raw : text) {
    char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush_word();
    } else {
      word += c;
    }
  }
  flush_word();
  return out;
}

// Bidirectional token-string <-> dense index map.
class TokenVocab {
 public:
  TokenVocab() {
    for (const auto& t : reserved_tokens()) add(t);
  }

  static TokenVocab from_texts(const std::vector<std::string>& texts) {
    TokenVocab v;
    std::map<std::string, int> counts;
    for (const auto& t : texts)
      for (auto& tok : tokenize(t)) counts[tok]++;
    for (auto& [tok, cnt] : counts) v.add(tok);
    return v;
  }

  int add(const std::string& tok) {
    auto it = index_.find(tok);
    if (it != index_.end()) return it->second;
    int id = static_cast<int>(tokens_.size());
    tokens_.push_back(tok);
    index_.emplace(tok, id);
    return id;
  }

  int lookup(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("vocab: bad token id");
    return tokens_[static_cast<size_t>(id)];
  }

  int size() const { return static_cast<int>(tokens_.size()); }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> ids;
    for (auto& tok : tokenize(text)) ids.push_back(lookup(tok));
    return ids;
  }

  // Joins tokens with single spaces; stops at <eos>, skips other reserved ids.
  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id == kEos) break;
      if (id == kPad || id == kBos) continue;
      if (!out.empty()) out += ' ';
      out += token(id);
    }
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("vocab: cannot write " + path);
    for (const auto& t : tokens_) f << t << "\n";
  }

  static TokenVocab load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("vocab: cannot read " + path);
    TokenVocab v;
    std::string line;
    size_t i = 0;
    while (std::getline(f, line)) {
      if (i < reserved_tokens().size()) {
        if (line != reserved_tokens()[i])
          throw std::runtime_error("vocab: reserved token mismatch in " + path);
      } else {
        v.add(line);
      }
      ++i;
    }
    if (i < reserved_tokens().size()) throw std::runtime_error("vocab: truncated file " + path);
    return v;
  }

  bool operator==(const TokenVocab& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace moedst
