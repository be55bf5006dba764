#pragma once

#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fmsd::model {

class TokenizerError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Whitespace-separated symbols to integer IDs and back.
class Tokenizer {
 public:
  explicit Tokenizer(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
      const auto& s = symbols_[i];
      if (s.empty() || s.find_first_of(" \t\n\r") != std::string::npos) {
        throw TokenizerError("tokenizer symbol #" + std::to_string(i) + " is empty or contains whitespace");
      }
      if (!ids_.emplace(s, int(i)).second) throw TokenizerError("duplicate tokenizer symbol '" + s + "'");
    }
  }

  /// 27 onsets × 8 vowels = 216 syllable symbols ("ka", "khi", ...).
  static Tokenizer syllables(std::size_t vocab_size = 216) {
    static const char* onsets[] = {"k",  "kh", "g",   "ng", "c",  "ch", "j", "ny", "t", "th", "d", "n", "p",  "ph",
                                   "b",  "m",  "ts",  "tsh", "dz", "w",  "zh", "z", "'", "y",  "r", "l", "sh"};
    static const char* vowels[] = {"a", "i", "u", "e", "o", "aa", "ii", "uu"};
    std::vector<std::string> s;
    for (const char* o : onsets)
      for (const char* v : vowels) {
        if (s.size() == vocab_size) break;
        s.push_back(std::string(o) + v);
      }
    for (std::size_t i = s.size(); i < vocab_size; ++i) s.push_back("x" + std::to_string(i));
    return Tokenizer(std::move(s));
  }

  std::size_t vocab_size() const { return symbols_.size(); }

  std::vector<int> encode(const std::string& text) const {
    std::istringstream is(text);
    std::vector<int> ids;
    std::string sym;
    while (is >> sym) {
      auto it = ids_.find(sym);
      if (it == ids_.end()) throw TokenizerError("out-of-vocabulary symbol '" + sym + "'");
      ids.push_back(it->second);
    }
    if (ids.empty()) throw TokenizerError("empty text");
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id < 0 || std::size_t(id) >= symbols_.size()) throw TokenizerError("token id " + std::to_string(id) + " out of range");
      if (!out.empty()) out += ' ';
      out += symbols_[std::size_t(id)];
    }
    return out;
  }

 private:
  std::vector<std::string> symbols_;
  std::map<std::string, int> ids_;
};

}  // namespace fmsd::model
