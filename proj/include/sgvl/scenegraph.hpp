#pragma once

// Rule-based caption -> scene graph parsing over a word-class lexicon.
//
// Grammar, applied to the caption after multiword prepositions have been
// collapsed (longest match first) and out-of-lexicon words dropped:
//   1. every NOUN is an object;
//   2. the maximal ADJ run right before a NOUN gives attribute pairs on it;
//   3. two consecutive NOUNs separated by at most four units (not counting
//      the right noun's adjective run) and joined by VERB, PREP or VERB PREP
//      form a triplet whose subject is the left noun.

#include <algorithm>
#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "sgvl/error.hpp"
#include "sgvl/util.hpp"

namespace sgvl {

enum class WordClass { noun, adj, verb, prep, stop, det };

inline constexpr std::array<std::string_view, 6> kWordClassNames = {"noun", "adj",  "verb",
                                                                   "prep", "stop", "det"};

inline std::string_view to_string(WordClass c) { return kWordClassNames[static_cast<int>(c)]; }

inline std::optional<WordClass> word_class_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kWordClassNames.size(); ++i)
    if (kWordClassNames[i] == s) return static_cast<WordClass>(i);
  return std::nullopt;
}

enum class NodeKind { object, attribute, relationship };

inline constexpr std::array<NodeKind, 3> kNodeKinds = {NodeKind::object, NodeKind::attribute,
                                                       NodeKind::relationship};

inline std::string_view to_string(NodeKind k) {
  switch (k) {
    case NodeKind::object: return "object";
    case NodeKind::attribute: return "attribute";
    case NodeKind::relationship: return "relationship";
  }
  return "?";
}

struct ObjectNode {
  std::string lemma;
  CharSpan span;
  friend bool operator==(const ObjectNode&, const ObjectNode&) = default;
};

struct AttributePair {
  std::string lemma;
  CharSpan span;
  std::size_t owner = 0;
  friend bool operator==(const AttributePair&, const AttributePair&) = default;
};

struct RelationTriplet {
  std::size_t subject = 0;
  std::string lemma;
  CharSpan span;
  std::size_t object = 0;
  friend bool operator==(const RelationTriplet&, const RelationTriplet&) = default;
};

struct SceneGraph {
  std::vector<ObjectNode> objects;
  std::vector<AttributePair> attributes;
  std::vector<RelationTriplet> relations;
  std::string source;

  std::size_t count(NodeKind k) const {
    switch (k) {
      case NodeKind::object: return objects.size();
      case NodeKind::attribute: return attributes.size();
      case NodeKind::relationship: return relations.size();
    }
    return 0;
  }

  CharSpan span(NodeKind k, std::size_t i) const {
    switch (k) {
      case NodeKind::object: return objects.at(i).span;
      case NodeKind::attribute: return attributes.at(i).span;
      case NodeKind::relationship: return relations.at(i).span;
    }
    return {};
  }

  const std::string& lemma(NodeKind k, std::size_t i) const {
    switch (k) {
      case NodeKind::object: return objects.at(i).lemma;
      case NodeKind::attribute: return attributes.at(i).lemma;
      case NodeKind::relationship: return relations.at(i).lemma;
    }
    return source;
  }

  friend bool operator==(const SceneGraph&, const SceneGraph&) = default;
};

// One lexical unit of a caption after classification.
struct LexUnit {
  enum class Kind { word, punct };
  Kind kind = Kind::word;
  WordClass cls = WordClass::stop;
  std::string lemma;  // multiword prepositions keep their spaces here
  CharSpan span;
};

class Lexicon {
 public:
  struct Entry {
    WordClass cls;
    std::string lemma;
  };

  Lexicon() = default;

  static Lexicon load(const std::filesystem::path& path) { return from_string(read_file(path)); }

  // Format: `class<TAB>lemma[<TAB>inflection,...]`, `#` comments.
  static Lexicon from_string(std::string_view text) {
    Lexicon lex;
    std::size_t line_no = 0;
    for (auto& raw : split(text, '\n')) {
      ++line_no;
      std::string line = raw;
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      if (trim(line).empty()) continue;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      auto fields = split(line, '\t');
      if (fields.size() < 2 || fields.size() > 3)
        throw ParseError("expected class<TAB>lemma[<TAB>inflections], got '" + trim(line) + "'",
                         line_no);
      auto cls = word_class_from_string(trim(fields[0]));
      if (!cls) throw ParseError("unknown word class '" + trim(fields[0]) + "'", line_no);
      std::string lemma = normalize_text(fields[1]);
      if (lemma.empty()) throw ParseError("empty lemma", line_no);
      if (lemma.find(' ') != std::string::npos && *cls != WordClass::prep)
        throw ParseError("only prepositions may be multiword: '" + lemma + "'", line_no);
      std::vector<std::string> inflections;
      if (fields.size() == 3) {
        for (auto& f : split(fields[2], ',')) {
          auto w = normalize_text(f);
          if (w.empty()) continue;
          if (w.find(' ') != std::string::npos)
            throw ParseError("multiword inflection '" + w + "'", line_no);
          inflections.push_back(std::move(w));
        }
      }
      lex.add(*cls, lemma, inflections);
    }
    lex.finalize();
    return lex;
  }

  const std::vector<std::string>& words(WordClass c) const { return lists_[static_cast<int>(c)]; }
  const std::vector<std::string>& nouns() const { return words(WordClass::noun); }
  const std::vector<std::string>& adjectives() const { return words(WordClass::adj); }

  // Verb and preposition lemmas in file order; the pool relation categories
  // are drawn from.
  const std::vector<std::string>& relation_lemmas() const { return relation_pool_; }

  std::size_t size() const {
    std::size_t n = 0;
    for (auto& l : lists_) n += l.size();
    return n;
  }

  std::optional<Entry> lookup(std::string_view word) const {
    auto it = surface_.find(std::string(word));
    if (it == surface_.end()) return std::nullopt;
    return it->second;
  }

  // All surface forms (lemmas, inflections, words of multiword entries).
  std::vector<std::string> surface_words() const {
    std::set<std::string> all;
    for (auto& [w, e] : surface_) all.insert(w);
    for (auto& l : lists_)
      for (auto& lemma : l)
        for (auto& part : split(lemma, ' ')) all.insert(part);
    return {all.begin(), all.end()};
  }

  // Classify `text` into lexical units; unknown words are dropped.
  std::vector<LexUnit> units(std::string_view text) const {
    auto ws = split_words(text);
    std::vector<LexUnit> out;
    std::size_t i = 0;
    while (i < ws.size()) {
      const auto& w = ws[i];
      if (w.text.size() == 1 && is_ascii_punct(static_cast<unsigned char>(w.text[0]))) {
        out.push_back({LexUnit::Kind::punct, WordClass::stop, w.text, w.span});
        ++i;
        continue;
      }
      if (auto it = multiword_.find(w.text); it != multiword_.end()) {
        bool matched = false;
        for (const auto& mw : it->second) {  // longest first
          if (i + mw.size() > ws.size()) continue;
          bool eq = true;
          for (std::size_t k = 0; k < mw.size() && eq; ++k) eq = ws[i + k].text == mw[k];
          if (!eq) continue;
          std::string lemma;
          for (std::size_t k = 0; k < mw.size(); ++k) lemma += (k ? " " : "") + mw[k];
          out.push_back({LexUnit::Kind::word, WordClass::prep, lemma,
                         {w.span.begin, ws[i + mw.size() - 1].span.end}});
          i += mw.size();
          matched = true;
          break;
        }
        if (matched) continue;
      }
      if (auto e = lookup(w.text)) out.push_back({LexUnit::Kind::word, e->cls, e->lemma, w.span});
      ++i;
    }
    return out;
  }

  // Lemma of a phrase as a node would carry it: unit lemmas joined by '-',
  // multiword prepositions hyphenated.
  std::string lemmatize_phrase(std::string_view text) const {
    std::string out;
    for (const auto& u : units(text)) {
      if (u.kind != LexUnit::Kind::word) continue;
      if (!out.empty()) out.push_back('-');
      for (char c : u.lemma) out.push_back(c == ' ' ? '-' : c);
    }
    return out;
  }

 private:
  void add(WordClass cls, const std::string& lemma, const std::vector<std::string>& inflections) {
    auto& list = lists_[static_cast<int>(cls)];
    if (std::find(list.begin(), list.end(), lemma) == list.end()) {
      list.push_back(lemma);
      if (cls == WordClass::verb || cls == WordClass::prep) relation_pool_.push_back(lemma);
    }
    auto& infl = inflections_[{static_cast<int>(cls), lemma}];
    for (auto& f : inflections)
      if (std::find(infl.begin(), infl.end(), f) == infl.end()) infl.push_back(f);
  }

  void bind(const std::string& surface, WordClass cls, const std::string& lemma) {
    auto [it, inserted] = surface_.try_emplace(surface, Entry{cls, lemma});
    if (inserted) return;
    if (it->second.cls != cls)
      throw ValidationError("word '" + surface + "' is listed as both " +
                            std::string(to_string(it->second.cls)) + " and " +
                            std::string(to_string(cls)));
    if (it->second.lemma != lemma)
      throw ValidationError("word '" + surface + "' maps to two lemmas: '" + it->second.lemma +
                            "' and '" + lemma + "'");
  }

  void finalize() {
    for (int c = 0; c < 6; ++c) {
      auto cls = static_cast<WordClass>(c);
      for (const auto& lemma : lists_[c]) {
        if (lemma.find(' ') != std::string::npos) {
          auto parts = split(lemma, ' ');
          multiword_[parts.front()].push_back(parts);
        } else {
          bind(lemma, cls, lemma);
        }
        for (const auto& f : inflections_[{c, lemma}]) bind(f, cls, lemma);
      }
    }
    for (auto& [first, list] : multiword_)
      std::stable_sort(list.begin(), list.end(),
                       [](const auto& a, const auto& b) { return a.size() > b.size(); });
  }

  std::array<std::vector<std::string>, 6> lists_;
  std::vector<std::string> relation_pool_;
  std::map<std::pair<int, std::string>, std::vector<std::string>> inflections_;
  std::unordered_map<std::string, Entry> surface_;
  std::unordered_map<std::string, std::vector<std::vector<std::string>>> multiword_;
};

inline SceneGraph parse(std::string_view caption, const Lexicon& lexicon) {
  constexpr std::size_t kMaxWindow = 4;
  SceneGraph g;
  g.source = std::string(caption);
  auto units = lexicon.units(caption);

  auto is = [&](std::size_t i, WordClass c) {
    return units[i].kind == LexUnit::Kind::word && units[i].cls == c;
  };

  std::vector<std::size_t> noun_at;     // unit index of each object
  std::vector<std::size_t> run_start;   // first unit of each noun's adjective run
  for (std::size_t i = 0; i < units.size(); ++i) {
    if (!is(i, WordClass::noun)) continue;
    std::size_t obj = g.objects.size();
    g.objects.push_back({units[i].lemma, units[i].span});
    std::size_t k = i;
    while (k > 0 && is(k - 1, WordClass::adj)) --k;
    for (std::size_t a = k; a < i; ++a) g.attributes.push_back({units[a].lemma, units[a].span, obj});
    noun_at.push_back(i);
    run_start.push_back(k);
  }

  for (std::size_t m = 0; m + 1 < noun_at.size(); ++m) {
    std::size_t lo = noun_at[m] + 1, hi = run_start[m + 1];
    if (hi < lo || hi - lo > kMaxWindow) continue;
    std::vector<std::size_t> rel;
    bool blocked = false;
    for (std::size_t u = lo; u < hi; ++u) {
      if (units[u].kind == LexUnit::Kind::punct) blocked = true;
      else if (is(u, WordClass::verb) || is(u, WordClass::prep)) rel.push_back(u);
    }
    if (blocked || rel.empty() || rel.size() > 2) continue;
    if (rel.size() == 2 &&
        !(is(rel[0], WordClass::verb) && is(rel[1], WordClass::prep) && rel[1] == rel[0] + 1))
      continue;
    std::string lemma;
    for (auto u : rel) {
      if (!lemma.empty()) lemma.push_back('-');
      for (char c : units[u].lemma) lemma.push_back(c == ' ' ? '-' : c);
    }
    g.relations.push_back(
        {m, std::move(lemma), {units[rel.front()].span.begin, units[rel.back()].span.end}, m + 1});
  }
  return g;
}

struct NodeCountSummary {
  std::size_t graphs = 0;
  std::size_t objects = 0;
  std::size_t attributes = 0;
  std::size_t relations = 0;

  std::size_t total() const { return objects + attributes + relations; }
  std::size_t count(NodeKind k) const {
    switch (k) {
      case NodeKind::object: return objects;
      case NodeKind::attribute: return attributes;
      case NodeKind::relationship: return relations;
    }
    return 0;
  }
  double ratio(NodeKind k) const {
    return total() == 0 ? 0.0 : static_cast<double>(count(k)) / static_cast<double>(total());
  }
};

inline NodeCountSummary graph_stats(const std::vector<SceneGraph>& graphs) {
  NodeCountSummary s;
  for (const auto& g : graphs) {
    ++s.graphs;
    s.objects += g.objects.size();
    s.attributes += g.attributes.size();
    s.relations += g.relations.size();
  }
  return s;
}

inline nlohmann::json to_json(const SceneGraph& g) {
  using nlohmann::json;
  json j;
  j["source"] = g.source;
  j["objects"] = json::array();
  for (auto& o : g.objects) j["objects"].push_back({{"lemma", o.lemma}, {"span", {o.span.begin, o.span.end}}});
  j["attributes"] = json::array();
  for (auto& a : g.attributes)
    j["attributes"].push_back(
        {{"lemma", a.lemma}, {"span", {a.span.begin, a.span.end}}, {"owner", a.owner}});
  j["relations"] = json::array();
  for (auto& r : g.relations)
    j["relations"].push_back({{"subject", r.subject},
                              {"lemma", r.lemma},
                              {"span", {r.span.begin, r.span.end}},
                              {"object", r.object}});
  return j;
}

}  // namespace sgvl
