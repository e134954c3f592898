#pragma once

// WordPiece tokenization and scene-graph node -> token span alignment.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sgvl/error.hpp"
#include "sgvl/scenegraph.hpp"
#include "sgvl/util.hpp"

namespace sgvl {

using TokenId = std::int32_t;

inline constexpr std::array<std::string_view, 5> kSpecialTokens = {"[PAD]", "[UNK]", "[CLS]",
                                                                   "[SEP]", "[MASK]"};
inline constexpr std::string_view kContinuation = "##";

class Vocab {
 public:
  Vocab() = default;

  // The first five tokens must be the special tokens in their fixed order.
  static Vocab from_tokens(std::vector<std::string> tokens) {
    if (tokens.size() < kSpecialTokens.size())
      throw ValidationError("vocab has fewer than the five special tokens");
    for (std::size_t i = 0; i < kSpecialTokens.size(); ++i)
      if (tokens[i] != kSpecialTokens[i])
        throw ValidationError("vocab line " + std::to_string(i + 1) + " must be " +
                              std::string(kSpecialTokens[i]) + ", got '" + tokens[i] + "'");
    Vocab v;
    v.tokens_ = std::move(tokens);
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
      if (v.tokens_[i].empty())
        throw ValidationError("empty token at line " + std::to_string(i + 1));
      if (!v.index_.emplace(v.tokens_[i], static_cast<TokenId>(i)).second)
        throw ValidationError("duplicate token '" + v.tokens_[i] + "'");
    }
    return v;
  }

  static Vocab load(const std::filesystem::path& path) {
    std::vector<std::string> tokens;
    for (auto& line : split(read_file(path), '\n')) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) tokens.push_back(line);
    }
    return from_tokens(std::move(tokens));
  }

  std::string serialize() const {
    std::string out;
    for (auto& t : tokens_) out += t + "\n";
    return out;
  }

  void save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }

  std::size_t size() const { return tokens_.size(); }

  std::optional<TokenId> find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw DataError("unknown token id " + std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)];
  }

  TokenId pad() const { return 0; }
  TokenId unk() const { return 1; }
  TokenId cls() const { return 2; }
  TokenId sep() const { return 3; }
  TokenId mask() const { return 4; }
  static constexpr TokenId first_regular() { return 5; }
  bool is_special(TokenId id) const { return id >= 0 && id < first_regular(); }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// Whole words from the lexicon and the texts ordered by frequency, followed by
// every printable ASCII character as both a word-initial and a continuation
// piece, so segmentation of ASCII text never fails.
inline Vocab build_vocab(const Lexicon& lexicon, const std::vector<std::string>& texts) {
  std::map<std::string, std::size_t> freq;
  for (auto& w : lexicon.surface_words()) ++freq[w];
  for (auto& t : texts)
    for (auto& w : split_words(t)) ++freq[w.text];
  std::vector<std::pair<std::string, std::size_t>> words(freq.begin(), freq.end());
  std::stable_sort(words.begin(), words.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens(kSpecialTokens.begin(), kSpecialTokens.end());
  std::unordered_map<std::string, bool> seen;
  for (auto& t : tokens) seen[t] = true;
  auto push = [&](std::string t) {
    if (!seen[t]) {
      seen[t] = true;
      tokens.push_back(std::move(t));
    }
  };
  for (auto& [w, n] : words) push(w);
  for (int c = 0x21; c < 0x7f; ++c) {
    if (c >= 'A' && c <= 'Z') continue;
    push(std::string(1, static_cast<char>(c)));
    push(std::string(kContinuation) + static_cast<char>(c));
  }
  return Vocab::from_tokens(std::move(tokens));
}

// Greedy longest-match-first segmentation of one normalized word.
inline std::vector<TokenId> wordpiece_word(std::string_view word, const Vocab& vocab) {
  std::vector<TokenId> out;
  std::size_t start = 0;
  while (start < word.size()) {
    std::size_t end = word.size();
    std::optional<TokenId> hit;
    while (end > start) {
      std::string piece = start > 0 ? std::string(kContinuation) : std::string();
      piece.append(word.substr(start, end - start));
      if ((hit = vocab.find(piece))) break;
      --end;
    }
    if (!hit) return {vocab.unk()};
    out.push_back(*hit);
    start = end;
  }
  return out;
}

inline std::vector<TokenId> wordpiece(std::string_view text, const Vocab& vocab) {
  std::vector<TokenId> out;
  for (auto& w : split_words(text)) {
    auto pieces = wordpiece_word(w.text, vocab);
    out.insert(out.end(), pieces.begin(), pieces.end());
  }
  return out;
}

inline std::string decode(std::span<const TokenId> ids, const Vocab& vocab) {
  std::string out;
  for (auto id : ids) {
    const auto& t = vocab.token(id);
    if (t.size() > kContinuation.size() && t.starts_with(kContinuation)) {
      out += t.substr(kContinuation.size());
    } else {
      if (!out.empty()) out.push_back(' ');
      out += t;
    }
  }
  return out;
}

inline std::string decode(const std::vector<TokenId>& ids, const Vocab& vocab) {
  return decode(std::span<const TokenId>(ids), vocab);
}

// Token sequence `[CLS] w1..wT [SEP]` plus the token span of every graph node.
struct AlignedCaption {
  std::vector<TokenId> ids;
  std::vector<std::string> tokens;
  std::array<std::vector<TokenSpan>, 3> node_spans;

  std::size_t size() const { return ids.size(); }
  const std::vector<TokenSpan>& spans(NodeKind k) const { return node_spans[static_cast<int>(k)]; }
  const TokenSpan& span(NodeKind k, std::size_t i) const { return spans(k).at(i); }
};

inline AlignedCaption encode(std::string_view caption, const SceneGraph& graph, const Vocab& vocab) {
  if (graph.source != caption) throw AlignmentError("scene graph was parsed from a different caption");
  AlignedCaption ac;
  ac.ids.push_back(vocab.cls());
  auto words = split_words(caption);
  std::vector<TokenSpan> word_tokens;
  for (auto& w : words) {
    std::size_t begin = ac.ids.size();
    auto pieces = wordpiece_word(w.text, vocab);
    ac.ids.insert(ac.ids.end(), pieces.begin(), pieces.end());
    word_tokens.push_back({begin, ac.ids.size()});
  }
  ac.ids.push_back(vocab.sep());
  for (auto id : ac.ids) ac.tokens.push_back(vocab.token(id));

  for (auto kind : kNodeKinds) {
    auto& spans = ac.node_spans[static_cast<int>(kind)];
    for (std::size_t i = 0; i < graph.count(kind); ++i) {
      auto cs = graph.span(kind, i);
      std::optional<std::size_t> first, last;
      for (std::size_t w = 0; w < words.size(); ++w) {
        if (words[w].span.begin >= cs.begin && words[w].span.end <= cs.end) {
          if (!first) first = w;
          last = w;
        }
      }
      if (!first || words[*first].span.begin != cs.begin || words[*last].span.end != cs.end)
        throw AlignmentError("cannot align " + std::string(to_string(kind)) + " node " +
                             std::to_string(i) + " '" + graph.lemma(kind, i) + "'");
      spans.push_back({word_tokens[*first].begin, word_tokens[*last].end});
    }
  }
  return ac;
}

}  // namespace sgvl
