#pragma once

// Image-caption pairs: data model, JSONL ingestion, and a seeded synthetic
// generator whose region features are computed from the same scene graph the
// caption is rendered from.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "sgvl/error.hpp"
#include "sgvl/scenegraph.hpp"
#include "sgvl/util.hpp"

namespace sgvl {

inline constexpr std::size_t kMinRegions = 10;
inline constexpr std::size_t kMaxRegions = 36;

struct RegionBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double width = 0, height = 0;  // of the whole image

  bool valid() const {
    return 0 <= x1 && x1 < x2 && x2 <= width && 0 <= y1 && y1 < y2 && y2 <= height;
  }
  static RegionBox full(double w, double h) { return {0, 0, w, h, w, h}; }
};

struct Region {
  RegionBox box;
  std::vector<double> feature;
  int class_id = 0;
};

struct ImageRecord {
  std::string image_id;
  double width = 0, height = 0;
  std::vector<Region> regions;
};

struct CaptionRecord {
  std::string caption_id;
  std::string image_id;
  std::string text;
};

using LocationFeature = std::array<double, 5>;

// (x1/W, y1/H, x2/W, y2/H, area fraction).
inline LocationFeature location_feature(const RegionBox& b) {
  const double W = b.width, H = b.height;
  return {b.x1 / W, b.y1 / H, b.x2 / W, b.y2 / H, (b.y2 - b.y1) * (b.x2 - b.x1) / (W * H)};
}

inline void validate_image(const ImageRecord& img) {
  const auto n = img.regions.size();
  if (n < kMinRegions || n > kMaxRegions)
    throw ValidationError("image " + img.image_id + " has " + std::to_string(n) +
                          " regions; expected between " + std::to_string(kMinRegions) + " and " +
                          std::to_string(kMaxRegions));
  const auto dim = img.regions.front().feature.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = img.regions[i];
    if (!r.box.valid())
      throw ValidationError("image " + img.image_id + " region " + std::to_string(i) +
                            " has an invalid box");
    if (r.feature.size() != dim)
      throw ValidationError("image " + img.image_id + " region " + std::to_string(i) +
                            " feature dimension differs");
    for (double v : r.feature)
      if (!std::isfinite(v))
        throw ValidationError("image " + img.image_id + " region " + std::to_string(i) +
                              " has a non-finite feature");
    if (r.class_id < 0)
      throw ValidationError("image " + img.image_id + " region " + std::to_string(i) +
                            " has a negative class id");
  }
}

// Captions joined to their images, plus optional parsed graphs.
struct Corpus {
  std::vector<ImageRecord> images;
  std::vector<CaptionRecord> captions;
  std::vector<std::size_t> image_of;  // caption index -> image index
  std::vector<SceneGraph> graphs;     // parallel to captions when present

  std::size_t size() const { return captions.size(); }
  const ImageRecord& image_for(std::size_t caption) const { return images[image_of[caption]]; }
  std::size_t feature_dim() const {
    return images.empty() ? 0 : images.front().regions.front().feature.size();
  }

  // Rebuilds `image_of`; throws listing every caption whose image is absent.
  void join() {
    std::unordered_map<std::string, std::size_t> by_id;
    for (std::size_t i = 0; i < images.size(); ++i)
      if (!by_id.emplace(images[i].image_id, i).second)
        throw ValidationError("duplicate image_id " + images[i].image_id);
    image_of.clear();
    std::vector<std::string> dangling;
    for (auto& c : captions) {
      auto it = by_id.find(c.image_id);
      if (it == by_id.end()) dangling.push_back(c.image_id);
      else image_of.push_back(it->second);
    }
    if (!dangling.empty()) {
      std::string ids;
      for (auto& d : dangling) ids += (ids.empty() ? "" : ", ") + d;
      throw ValidationError("captions reference missing images: " + ids);
    }
  }

  void parse_graphs(const Lexicon& lexicon) {
    graphs.clear();
    for (auto& c : captions) graphs.push_back(parse(c.text, lexicon));
  }
};

inline std::string captions_to_jsonl(const std::vector<CaptionRecord>& captions) {
  std::string out;
  for (auto& c : captions)
    out += nlohmann::json{{"caption_id", c.caption_id}, {"image_id", c.image_id}, {"text", c.text}}
               .dump() +
           "\n";
  return out;
}

inline std::string images_to_jsonl(const std::vector<ImageRecord>& images) {
  std::string out;
  for (auto& img : images) {
    nlohmann::json regions = nlohmann::json::array();
    for (auto& r : img.regions)
      regions.push_back({{"x1", r.box.x1},
                         {"y1", r.box.y1},
                         {"x2", r.box.x2},
                         {"y2", r.box.y2},
                         {"class_id", r.class_id},
                         {"feature", r.feature}});
    out += nlohmann::json{{"image_id", img.image_id},
                          {"width", img.width},
                          {"height", img.height},
                          {"regions", std::move(regions)}}
               .dump() +
           "\n";
  }
  return out;
}

namespace detail {
template <class F>
void for_each_json_line(const std::string& text, const std::string& what, F&& f) {
  std::size_t line_no = 0;
  for (auto& line : split(text, '\n')) {
    ++line_no;
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      f(j);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(what + ": " + e.what(), line_no);
    }
  }
}
}  // namespace detail

inline std::vector<CaptionRecord> captions_from_jsonl(const std::string& text) {
  std::vector<CaptionRecord> out;
  detail::for_each_json_line(text, "captions", [&](const nlohmann::json& j) {
    CaptionRecord c{j.at("caption_id").get<std::string>(), j.at("image_id").get<std::string>(),
                    j.at("text").get<std::string>()};
    if (trim(c.text).empty()) throw ValidationError("caption " + c.caption_id + " has empty text");
    out.push_back(std::move(c));
  });
  return out;
}

inline std::vector<ImageRecord> images_from_jsonl(const std::string& text) {
  std::vector<ImageRecord> out;
  detail::for_each_json_line(text, "images", [&](const nlohmann::json& j) {
    ImageRecord img;
    img.image_id = j.at("image_id").get<std::string>();
    img.width = j.at("width").get<double>();
    img.height = j.at("height").get<double>();
    for (auto& r : j.at("regions")) {
      Region reg;
      reg.box = {r.at("x1").get<double>(), r.at("y1").get<double>(), r.at("x2").get<double>(),
                 r.at("y2").get<double>(), img.width,                img.height};
      reg.class_id = r.at("class_id").get<int>();
      reg.feature = r.at("feature").get<std::vector<double>>();
      img.regions.push_back(std::move(reg));
    }
    validate_image(img);
    out.push_back(std::move(img));
  });
  return out;
}

inline Corpus load_pairs(const std::filesystem::path& captions_path,
                         const std::filesystem::path& images_path) {
  Corpus c;
  c.captions = captions_from_jsonl(read_file(captions_path));
  c.images = images_from_jsonl(read_file(images_path));
  c.join();
  return c;
}

inline void save_pairs(const Corpus& c, const std::filesystem::path& captions_path,
                       const std::filesystem::path& images_path) {
  write_file_atomic(captions_path, captions_to_jsonl(c.captions));
  write_file_atomic(images_path, images_to_jsonl(c.images));
}

struct GeneratorConfig {
  std::size_t object_categories = 24;
  std::size_t attribute_categories = 12;
  std::size_t relation_categories = 8;
  std::size_t pairs = 2000;
  std::size_t heldout_pairs = 500;
  std::size_t feature_dim = 64;
  double noise = 0.05;
  double relation_consistency = 0.8;  // chance a relation follows its pair's preferred lemma
  std::size_t min_regions = kMinRegions;
  double image_width = 640;
  double image_height = 480;
};

inline void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = {{"object_categories", c.object_categories},
       {"attribute_categories", c.attribute_categories},
       {"relation_categories", c.relation_categories},
       {"pairs", c.pairs},
       {"heldout_pairs", c.heldout_pairs},
       {"feature_dim", c.feature_dim},
       {"noise", c.noise},
       {"relation_consistency", c.relation_consistency},
       {"min_regions", c.min_regions},
       {"image_width", c.image_width},
       {"image_height", c.image_height}};
}

inline void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  auto get = [&](const char* k, auto& v) {
    if (j.contains(k)) j.at(k).get_to(v);
  };
  get("object_categories", c.object_categories);
  get("attribute_categories", c.attribute_categories);
  get("relation_categories", c.relation_categories);
  get("pairs", c.pairs);
  get("heldout_pairs", c.heldout_pairs);
  get("feature_dim", c.feature_dim);
  get("noise", c.noise);
  get("relation_consistency", c.relation_consistency);
  get("min_regions", c.min_regions);
  get("image_width", c.image_width);
  get("image_height", c.image_height);
}

// The semantic content a synthetic caption was rendered from.
struct SceneTruth {
  std::vector<std::size_t> objects;                  // object categories
  std::vector<std::vector<std::size_t>> attributes;  // per object, attribute categories
  std::vector<std::size_t> relations;                // chain: objects[i] -> objects[i+1]
};

struct SyntheticCorpus {
  Corpus train;
  Corpus heldout;
  std::vector<SceneTruth> train_truth;
  std::vector<SceneTruth> heldout_truth;
  std::vector<std::vector<double>> object_embeddings;
  std::vector<std::vector<double>> attribute_embeddings;
  std::vector<std::vector<std::size_t>> preferred_relation;  // [subject][object]
  std::vector<std::string> object_names, attribute_names, relation_names;
};

namespace detail {

inline std::vector<std::size_t> sample_distinct(Rng& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + uniform_index(rng, n - i)]);
  pool.resize(k);
  return pool;
}

inline std::vector<RegionBox> grid_boxes(Rng& rng, std::size_t n, double W, double H) {
  auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  auto rows = (n + cols - 1) / cols;
  auto cells = sample_distinct(rng, rows * cols, n);
  const double cw = W / static_cast<double>(cols), ch = H / static_cast<double>(rows);
  std::vector<RegionBox> boxes;
  for (auto cell : cells) {
    double cx = static_cast<double>(cell % cols) * cw, cy = static_cast<double>(cell / cols) * ch;
    double x1 = std::floor(cx + uniform01(rng) * 0.25 * cw);
    double y1 = std::floor(cy + uniform01(rng) * 0.25 * ch);
    double x2 = std::ceil(cx + cw - uniform01(rng) * 0.25 * cw);
    double y2 = std::ceil(cy + ch - uniform01(rng) * 0.25 * ch);
    boxes.push_back({x1, y1, std::min(x2, W), std::min(y2, H), W, H});
  }
  return boxes;
}

inline bool is_verb(const Lexicon& lex, const std::string& lemma) {
  auto e = lex.lookup(lemma);
  return e && e->cls == WordClass::verb;
}

}  // namespace detail

// Each sample: 2-4 distinct object categories, 0-2 attributes each, and a
// chain of relations between consecutive objects, rendered as e.g.
// "A black dog is holding a red ball next to a car." One region per object,
// feature = embedding(object) + mean(embedding(attributes)) + noise, padded to
// `min_regions` with distractors drawn from categories absent from the sample.
inline SyntheticCorpus generate_corpus(const GeneratorConfig& cfg, const Lexicon& lexicon,
                                       std::uint64_t seed) {
  if (cfg.object_categories > lexicon.nouns().size() ||
      cfg.attribute_categories > lexicon.adjectives().size() ||
      cfg.relation_categories > lexicon.relation_lemmas().size())
    throw ConfigError("ontology (" + std::to_string(cfg.object_categories) + " objects, " +
                      std::to_string(cfg.attribute_categories) + " attributes, " +
                      std::to_string(cfg.relation_categories) +
                      " relations) is larger than the lexicon provides");
  if (cfg.object_categories < 2) throw ConfigError("need at least 2 object categories");
  if (cfg.relation_categories < 1) throw ConfigError("need at least 1 relation category");
  if (cfg.feature_dim == 0) throw ConfigError("feature_dim must be positive");
  if (cfg.noise < 0) throw ConfigError("noise must be non-negative");
  if (!(cfg.relation_consistency >= 0 && cfg.relation_consistency <= 1))
    throw ConfigError("relation_consistency must lie in [0, 1]");
  if (cfg.min_regions < kMinRegions || cfg.min_regions > kMaxRegions)
    throw ConfigError("min_regions must lie in [10, 36]");

  SyntheticCorpus out;
  const auto& nouns = lexicon.nouns();
  const auto& adjs = lexicon.adjectives();
  const auto& rels = lexicon.relation_lemmas();
  out.object_names.assign(nouns.begin(), nouns.begin() + cfg.object_categories);
  out.attribute_names.assign(adjs.begin(), adjs.begin() + cfg.attribute_categories);
  out.relation_names.assign(rels.begin(), rels.begin() + cfg.relation_categories);

  Rng erng(mix_seed(seed, 0xE3B0C442ULL));
  std::normal_distribution<double> normal(0.0, 1.0);
  auto embed = [&](std::size_t count) {
    std::vector<std::vector<double>> e(count, std::vector<double>(cfg.feature_dim));
    for (auto& row : e)
      for (auto& v : row) v = normal(erng);
    return e;
  };
  out.object_embeddings = embed(cfg.object_categories);
  out.attribute_embeddings = embed(cfg.attribute_categories);
  out.preferred_relation.assign(cfg.object_categories, std::vector<std::size_t>(cfg.object_categories));
  for (auto& row : out.preferred_relation)
    for (auto& r : row) r = uniform_index(erng, cfg.relation_categories);

  auto make_sample = [&](std::size_t index, const std::string& prefix, Corpus& corpus,
                         std::vector<SceneTruth>& truths) {
    Rng rng(mix_seed(seed, index));
    std::normal_distribution<double> noise(0.0, 1.0);
    SceneTruth t;
    std::size_t k = std::min<std::size_t>(2 + uniform_index(rng, 3), cfg.object_categories);
    t.objects = detail::sample_distinct(rng, cfg.object_categories, k);
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t na = cfg.attribute_categories == 0
                           ? 0
                           : std::min<std::size_t>(uniform_index(rng, 3), cfg.attribute_categories);
      t.attributes.push_back(detail::sample_distinct(rng, cfg.attribute_categories, na));
    }
    for (std::size_t i = 0; i + 1 < k; ++i) {
      const bool typical = uniform01(rng) < cfg.relation_consistency;
      const std::size_t any = uniform_index(rng, cfg.relation_categories);
      t.relations.push_back(typical ? out.preferred_relation[t.objects[i]][t.objects[i + 1]] : any);
    }

    std::string text;
    for (std::size_t i = 0; i < k; ++i) {
      if (i > 0) {
        const auto& rel = out.relation_names[t.relations[i - 1]];
        text += detail::is_verb(lexicon, rel) ? " is " + rel + " " : " " + rel + " ";
      }
      text += "a";
      for (auto a : t.attributes[i]) text += " " + out.attribute_names[a];
      text += " " + out.object_names[t.objects[i]];
    }
    text[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(text[0])));
    text += ".";

    ImageRecord img;
    char id[32];
    std::snprintf(id, sizeof id, "%simg%05zu", prefix.c_str(), index);
    img.image_id = id;
    img.width = cfg.image_width;
    img.height = cfg.image_height;
    const std::size_t n_regions = std::max(cfg.min_regions, k);
    auto boxes = detail::grid_boxes(rng, n_regions, cfg.image_width, cfg.image_height);

    std::vector<Region> regions;
    for (std::size_t i = 0; i < k; ++i) {
      Region r;
      r.class_id = static_cast<int>(t.objects[i]);
      r.feature = out.object_embeddings[t.objects[i]];
      if (!t.attributes[i].empty()) {
        const double inv = 1.0 / static_cast<double>(t.attributes[i].size());
        for (auto a : t.attributes[i])
          for (std::size_t d = 0; d < cfg.feature_dim; ++d)
            r.feature[d] += inv * out.attribute_embeddings[a][d];
      }
      regions.push_back(std::move(r));
    }
    std::vector<std::size_t> unused;
    for (std::size_t c = 0; c < cfg.object_categories; ++c)
      if (std::find(t.objects.begin(), t.objects.end(), c) == t.objects.end()) unused.push_back(c);
    const std::size_t n_distract = n_regions - k;
    std::vector<std::size_t> picks;
    if (n_distract <= unused.size()) {
      for (auto p : detail::sample_distinct(rng, unused.size(), n_distract)) picks.push_back(unused[p]);
    } else {
      for (std::size_t i = 0; i < n_distract; ++i) picks.push_back(unused[uniform_index(rng, unused.size())]);
    }
    for (auto c : picks) {
      Region r;
      r.class_id = static_cast<int>(c);
      r.feature = out.object_embeddings[c];
      regions.push_back(std::move(r));
    }
    for (auto& r : regions)
      if (cfg.noise > 0)
        for (auto& v : r.feature) v += cfg.noise * noise(rng);
    auto order = detail::sample_distinct(rng, regions.size(), regions.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
      img.regions.push_back(std::move(regions[order[i]]));
      img.regions.back().box = boxes[i];
    }

    std::snprintf(id, sizeof id, "%scap%05zu", prefix.c_str(), index);
    corpus.captions.push_back({id, img.image_id, text});
    corpus.images.push_back(std::move(img));
    truths.push_back(std::move(t));
  };

  for (std::size_t i = 0; i < cfg.pairs; ++i) make_sample(i, "", out.train, out.train_truth);
  for (std::size_t i = 0; i < cfg.heldout_pairs; ++i)
    make_sample(cfg.pairs + i, "h", out.heldout, out.heldout_truth);
  for (auto* c : {&out.train, &out.heldout}) {
    c->join();
    c->parse_graphs(lexicon);
  }
  return out;
}

}  // namespace sgvl
