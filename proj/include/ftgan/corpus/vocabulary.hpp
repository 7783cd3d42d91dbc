#pragma once

// Tokenizer and vocabulary. Tokens are lowercase runs of characters that
// are neither whitespace nor ASCII punctuation; bytes >= 0x80 are kept
// verbatim so UTF-8 words survive intact.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "ftgan/core/error.hpp"

namespace ftgan::corpus {

inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && (std::isspace(c) || std::ispunct(c))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += static_cast<char>(c < 0x80 ? std::tolower(c) : c);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

struct EncodedCaption {
  std::vector<std::int64_t> ids;  // length t_max, pad-filled
  std::int64_t length = 0;
};

class Vocabulary {
 public:
  static constexpr std::int64_t kPad = 0;
  static constexpr std::int64_t kUnknown = 1;
  static constexpr std::int64_t kEnd = 2;
  static constexpr std::int64_t kNumSpecial = 3;

  Vocabulary() : tokens_{"<pad>", "<unk>", "<end>"} { reindex(); }

  /// Words with frequency >= min_freq, ordered by descending frequency then
  /// lexicographically, after the special ids.
  static Vocabulary build(const std::vector<std::string>& captions, int min_freq = 1) {
    FTGAN_EXPECTS(min_freq >= 1, "min_freq must be >= 1, got ", min_freq);
    std::map<std::string, std::int64_t> freq;
    for (const auto& c : captions)
      for (auto& w : tokenize(c)) ++freq[w];
    std::vector<std::pair<std::string, std::int64_t>> words(freq.begin(), freq.end());
    std::stable_sort(words.begin(), words.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary v;
    v.min_freq_ = min_freq;
    for (auto& [w, n] : words)
      if (n >= min_freq) v.tokens_.push_back(w);
    v.reindex();
    return v;
  }

  std::int64_t size() const { return static_cast<std::int64_t>(tokens_.size()); }
  int min_freq() const { return min_freq_; }

  std::int64_t id(std::string_view word) const {
    auto it = index_.find(std::string(word));
    return it == index_.end() ? kUnknown : it->second;
  }
  bool contains(std::string_view word) const { return index_.count(std::string(word)) != 0; }

  const std::string& token(std::int64_t id) const {
    FTGAN_EXPECTS(id >= 0 && id < size(), "token id ", id, " out of range [0, ", size(), ")");
    return tokens_[static_cast<std::size_t>(id)];
  }
  const std::vector<std::string>& tokens() const { return tokens_; }

  EncodedCaption encode(std::string_view text, std::int64_t t_max) const {
    FTGAN_EXPECTS(t_max >= 1, "T_max must be >= 1, got ", t_max);
    EncodedCaption e;
    e.ids.assign(static_cast<std::size_t>(t_max), kPad);
    for (const auto& w : tokenize(text)) {
      if (e.length == t_max) break;
      e.ids[static_cast<std::size_t>(e.length++)] = id(w);
    }
    return e;
  }

  std::vector<std::string> decode(const std::vector<std::int64_t>& ids, std::int64_t length) const {
    std::vector<std::string> out;
    for (std::int64_t i = 0; i < length; ++i) out.push_back(token(ids[static_cast<std::size_t>(i)]));
    return out;
  }

  nlohmann::json to_json() const {
    return {{"format", "ftgan-vocab"}, {"version", 1}, {"min_freq", min_freq_}, {"tokens", tokens_}};
  }

  static Vocabulary from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "ftgan-vocab") throw LoadError("not a vocabulary file");
    Vocabulary v;
    v.tokens_ = j.at("tokens").get<std::vector<std::string>>();
    v.min_freq_ = j.value("min_freq", 1);
    if (v.tokens_.size() < kNumSpecial || v.tokens_[kPad] != "<pad>" || v.tokens_[kUnknown] != "<unk>" ||
        v.tokens_[kEnd] != "<end>")
      throw LoadError("vocabulary is missing the reserved special tokens");
    v.reindex();
    if (v.index_.size() != v.tokens_.size()) throw LoadError("vocabulary has duplicate tokens");
    return v;
  }

  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw LoadError("cannot write " + path.string());
    os << to_json().dump(1) << "\n";
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw LoadError("cannot open vocabulary " + path.string());
    try {
      return from_json(nlohmann::json::parse(is));
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(path.string() + ": " + e.what());
    } catch (const LoadError& e) {
      throw LoadError(path.string() + ": " + e.what());
    }
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<std::int64_t>(i));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int64_t> index_;
  int min_freq_ = 1;
};

}  // namespace ftgan::corpus
