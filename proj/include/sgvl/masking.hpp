#pragma once

// Construction of pre-training instances: scene-graph node masking (object,
// attribute, relationship prediction), residual-token MLM, masked region
// prediction and image-text matching negatives; plus padded batching.

#include <algorithm>
#include <cstdint>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "sgvl/corpus.hpp"
#include "sgvl/error.hpp"
#include "sgvl/scenegraph.hpp"
#include "sgvl/textproc.hpp"
#include "sgvl/util.hpp"

namespace sgvl {

enum class Task : std::uint8_t { none, mlm, object, attribute, relationship };

inline std::string_view to_string(Task t) {
  switch (t) {
    case Task::none: return "none";
    case Task::mlm: return "mlm";
    case Task::object: return "object";
    case Task::attribute: return "attribute";
    case Task::relationship: return "relationship";
  }
  return "?";
}

inline Task task_for(NodeKind k) {
  switch (k) {
    case NodeKind::object: return Task::object;
    case NodeKind::attribute: return Task::attribute;
    case NodeKind::relationship: return Task::relationship;
  }
  return Task::none;
}

inline constexpr TokenId kIgnoreLabel = -1;

enum class Fill : std::uint8_t { mask, random, keep };

struct ReplacementMix {
  double mask = 0.80;
  double random = 0.10;
  double keep = 0.10;
};

struct MaskingPolicy {
  double token_mask_rate = 0.15;
  double node_mask_rate = 0.30;
  double region_mask_rate = 0.15;
  ReplacementMix mix;
  double negative_prob = 0.5;

  void validate() const {
    for (double r : {token_mask_rate, node_mask_rate, region_mask_rate, negative_prob, mix.mask,
                     mix.random, mix.keep})
      if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("masking rates must lie in [0, 1]");
    if (std::abs(mix.mask + mix.random + mix.keep - 1.0) > 1e-9)
      throw ConfigError("replacement mix must sum to 1");
  }
};

inline void to_json(nlohmann::json& j, const MaskingPolicy& p) {
  j = {{"token_mask_rate", p.token_mask_rate},
       {"node_mask_rate", p.node_mask_rate},
       {"region_mask_rate", p.region_mask_rate},
       {"mix", {p.mix.mask, p.mix.random, p.mix.keep}},
       {"negative_prob", p.negative_prob}};
}

inline void from_json(const nlohmann::json& j, MaskingPolicy& p) {
  if (j.contains("token_mask_rate")) j.at("token_mask_rate").get_to(p.token_mask_rate);
  if (j.contains("node_mask_rate")) j.at("node_mask_rate").get_to(p.node_mask_rate);
  if (j.contains("region_mask_rate")) j.at("region_mask_rate").get_to(p.region_mask_rate);
  if (j.contains("negative_prob")) j.at("negative_prob").get_to(p.negative_prob);
  if (j.contains("mix")) {
    auto m = j.at("mix").get<std::vector<double>>();
    if (m.size() != 3) throw ConfigError("mix must have three entries");
    p.mix = {m[0], m[1], m[2]};
  }
}

// A caption ready for masking: its record, image, graph and token alignment.
struct Example {
  const CaptionRecord* caption = nullptr;
  const ImageRecord* image = nullptr;
  const SceneGraph* graph = nullptr;
  AlignedCaption aligned;
};

inline std::vector<Example> prepare_examples(const Corpus& corpus, const Vocab& vocab) {
  if (corpus.graphs.size() != corpus.captions.size())
    throw DataError("corpus graphs have not been parsed");
  std::vector<Example> out;
  out.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i)
    out.push_back({&corpus.captions[i], &corpus.image_for(i), &corpus.graphs[i],
                   encode(corpus.captions[i].text, corpus.graphs[i], vocab)});
  return out;
}

struct LabelSpan {
  TokenSpan span;
  Task task = Task::none;
  std::vector<TokenId> targets;
  Fill fill = Fill::mask;
};

// Token spans that must stay visible while `masked` is predicted.
struct ContextRecord {
  Task task = Task::none;
  TokenSpan masked;
  std::vector<TokenSpan> context;
};

struct PretrainInstance {
  std::string caption_id;
  std::string image_id;
  std::vector<TokenId> input_ids;
  std::vector<TokenId> token_labels;  // kIgnoreLabel where unlabeled
  std::vector<Task> tags;
  std::vector<LabelSpan> labels;
  std::vector<ContextRecord> contexts;
  std::vector<Region> regions;  // masked regions have zeroed features
  std::vector<LocationFeature> locations;
  std::vector<int> region_labels;  // -1 where unlabeled
  bool positive = true;
  std::uint64_t rng_seed = 0;

  // Audit counters.
  std::array<std::size_t, 3> nodes_total{};
  std::array<std::size_t, 3> nodes_masked{};
  std::size_t mlm_candidates = 0;
  std::size_t mlm_masked = 0;

  std::size_t text_len() const { return input_ids.size(); }
  std::size_t region_count() const { return regions.size(); }
  std::size_t labeled_tokens() const {
    return static_cast<std::size_t>(std::count_if(token_labels.begin(), token_labels.end(),
                                                  [](TokenId t) { return t != kIgnoreLabel; }));
  }
  std::size_t masked_regions() const {
    return static_cast<std::size_t>(
        std::count_if(region_labels.begin(), region_labels.end(), [](int c) { return c >= 0; }));
  }
};

namespace detail {

inline Fill draw_fill(Rng& rng, const ReplacementMix& mix) {
  double u = uniform01(rng);
  if (u < mix.mask) return Fill::mask;
  if (u < mix.mask + mix.random) return Fill::random;
  return Fill::keep;
}

inline TokenId random_token(Rng& rng, const Vocab& vocab) {
  return static_cast<TokenId>(Vocab::first_regular() +
                              uniform_index(rng, vocab.size() - Vocab::first_regular()));
}

}  // namespace detail

// Objects are drawn first with probability rho. An attribute is drawn with
// probability rho/(1-rho) only while its owner is unmasked and a relationship
// with rho/(1-rho)^2 only while both endpoints are unmasked, so every node
// category is masked at marginal rate rho (for rho <= 0.38) and no masked
// attribute or relationship ever loses its context objects.
inline PretrainInstance build_instance(const Example& ex, std::span<const ImageRecord> pool,
                                       const MaskingPolicy& policy, const Vocab& vocab,
                                       std::uint64_t seed) {
  Rng rng(seed);
  PretrainInstance inst;
  inst.caption_id = ex.caption->caption_id;
  inst.rng_seed = seed;
  const auto& ac = ex.aligned;
  const auto& g = *ex.graph;
  const std::size_t T = ac.size();
  inst.input_ids = ac.ids;
  inst.token_labels.assign(T, kIgnoreLabel);
  inst.tags.assign(T, Task::none);
  for (auto k : kNodeKinds) inst.nodes_total[static_cast<int>(k)] = g.count(k);

  auto set_image = [&](const ImageRecord& img) {
    inst.image_id = img.image_id;
    inst.regions = img.regions;
    inst.locations.clear();
    for (auto& r : img.regions) inst.locations.push_back(location_feature(r.box));
    inst.region_labels.assign(img.regions.size(), -1);
  };

  // A negative gets the same input corruption as a positive and then drops
  // every label; otherwise "contains [MASK]" alone would identify positives.
  set_image(*ex.image);
  if (uniform01(rng) < policy.negative_prob) {
    std::vector<std::size_t> others;
    for (std::size_t i = 0; i < pool.size(); ++i)
      if (pool[i].image_id != ex.image->image_id) others.push_back(i);
    if (!others.empty()) {
      set_image(pool[others[uniform_index(rng, others.size())]]);
      inst.positive = false;
    }
  }

  std::vector<char> masked(T, 0), protected_pos(T, 0);
  auto apply = [&](TokenSpan span, Task task) {
    LabelSpan ls{span, task, {}, detail::draw_fill(rng, policy.mix)};
    for (auto p = span.begin; p < span.end; ++p) {
      ls.targets.push_back(ac.ids[p]);
      inst.token_labels[p] = ac.ids[p];
      inst.tags[p] = task;
      masked[p] = 1;
      if (ls.fill == Fill::mask) inst.input_ids[p] = vocab.mask();
      else if (ls.fill == Fill::random) inst.input_ids[p] = detail::random_token(rng, vocab);
    }
    inst.labels.push_back(std::move(ls));
  };
  auto span_free = [&](TokenSpan s) {
    for (auto p = s.begin; p < s.end; ++p)
      if (masked[p]) return false;
    return true;
  };
  auto protect = [&](TokenSpan s) {
    for (auto p = s.begin; p < s.end; ++p) protected_pos[p] = 1;
  };

  const double rho = policy.node_mask_rate;
  if (rho > 0) {
    const double p_attr = rho >= 1 ? 1.0 : std::min(1.0, rho / (1 - rho));
    const double p_rel = rho >= 1 ? 1.0 : std::min(1.0, rho / ((1 - rho) * (1 - rho)));
    std::vector<char> obj_masked(g.objects.size(), 0);
    for (std::size_t i = 0; i < g.objects.size(); ++i) {
      bool pick = uniform01(rng) < rho;
      auto span = ac.span(NodeKind::object, i);
      if (pick && span_free(span)) {
        apply(span, Task::object);
        obj_masked[i] = 1;
        ++inst.nodes_masked[0];
      }
    }
    for (std::size_t i = 0; i < g.attributes.size(); ++i) {
      bool pick = uniform01(rng) < p_attr;
      const auto owner = g.attributes[i].owner;
      auto span = ac.span(NodeKind::attribute, i);
      auto owner_span = ac.span(NodeKind::object, owner);
      if (pick && !obj_masked[owner] && span_free(span)) {
        apply(span, Task::attribute);
        protect(owner_span);
        inst.contexts.push_back({Task::attribute, span, {owner_span}});
        ++inst.nodes_masked[1];
      }
    }
    for (std::size_t i = 0; i < g.relations.size(); ++i) {
      bool pick = uniform01(rng) < p_rel;
      const auto& r = g.relations[i];
      auto span = ac.span(NodeKind::relationship, i);
      auto s1 = ac.span(NodeKind::object, r.subject), s2 = ac.span(NodeKind::object, r.object);
      if (pick && !obj_masked[r.subject] && !obj_masked[r.object] && span_free(span)) {
        apply(span, Task::relationship);
        protect(s1);
        protect(s2);
        inst.contexts.push_back({Task::relationship, span, {s1, s2}});
        ++inst.nodes_masked[2];
      }
    }
  }

  for (std::size_t p = 1; p + 1 < T; ++p) {
    if (masked[p] || protected_pos[p] || vocab.is_special(ac.ids[p])) continue;
    ++inst.mlm_candidates;
    if (uniform01(rng) < policy.token_mask_rate) {
      apply({p, p + 1}, Task::mlm);
      ++inst.mlm_masked;
    }
  }

  for (std::size_t i = 0; i < inst.regions.size(); ++i) {
    if (uniform01(rng) < policy.region_mask_rate) {
      inst.region_labels[i] = inst.regions[i].class_id;
      std::fill(inst.regions[i].feature.begin(), inst.regions[i].feature.end(), 0.0);
    }
  }
  if (!inst.positive) {
    std::fill(inst.token_labels.begin(), inst.token_labels.end(), kIgnoreLabel);
    std::fill(inst.tags.begin(), inst.tags.end(), Task::none);
    std::fill(inst.region_labels.begin(), inst.region_labels.end(), -1);
    inst.labels.clear();
    inst.contexts.clear();
    inst.nodes_masked = {};
    inst.mlm_masked = 0;
    inst.mlm_candidates = 0;
  }
  return inst;
}

// Instance i uses seed mix_seed(base_seed, first_index + i); work is split in
// contiguous chunks and written by index, so the result does not depend on
// the thread count.
inline std::vector<PretrainInstance> build_instances(const std::vector<Example>& examples,
                                                     std::span<const std::size_t> picks,
                                                     std::span<const ImageRecord> pool,
                                                     const MaskingPolicy& policy,
                                                     const Vocab& vocab, std::uint64_t base_seed,
                                                     unsigned threads = 1) {
  std::vector<PretrainInstance> out(picks.size());
  auto work = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i)
      out[i] = build_instance(examples[picks[i]], pool, policy, vocab, mix_seed(base_seed, i));
  };
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(picks.size())));
  if (threads <= 1) {
    work(0, picks.size());
    return out;
  }
  std::vector<std::thread> pool_threads;
  const std::size_t chunk = (picks.size() + threads - 1) / threads;
  for (unsigned t = 0; t < threads; ++t) {
    std::size_t lo = t * chunk, hi = std::min(picks.size(), lo + chunk);
    if (lo < hi) pool_threads.emplace_back(work, lo, hi);
  }
  for (auto& th : pool_threads) th.join();
  return out;
}

inline nlohmann::json to_json(const PretrainInstance& inst) {
  nlohmann::json labels = nlohmann::json::array();
  for (auto& l : inst.labels)
    labels.push_back({{"pos", l.span.begin},
                      {"len", l.span.size()},
                      {"task", to_string(l.task)},
                      {"target_ids", l.targets}});
  std::vector<std::size_t> masked;
  for (std::size_t i = 0; i < inst.region_labels.size(); ++i)
    if (inst.region_labels[i] >= 0) masked.push_back(i);
  return {{"caption_id", inst.caption_id},
          {"image_id", inst.image_id},
          {"input_ids", inst.input_ids},
          {"labels", std::move(labels)},
          {"masked_regions", masked},
          {"itm_label", inst.positive ? "positive" : "negative"},
          {"rng_seed", inst.rng_seed}};
}

// Padded, row-major batch tensors. Text is B x T, regions B x I (without the
// whole-image slot, which the model prepends).
struct Batch {
  std::size_t size = 0;
  std::size_t text_len = 0;
  std::size_t num_regions = 0;
  std::size_t feature_dim = 0;
  std::vector<TokenId> ids;
  std::vector<TokenId> segments;
  std::vector<std::uint8_t> text_mask;
  std::vector<TokenId> token_labels;
  std::vector<Task> tags;
  std::vector<double> features;   // B x I x D
  std::vector<double> locations;  // B x I x 5
  std::vector<std::uint8_t> region_mask;
  std::vector<int> region_labels;
  std::vector<double> itm_labels;  // 1 positive, 0 negative

  std::size_t label_count() const {
    return static_cast<std::size_t>(std::count_if(token_labels.begin(), token_labels.end(),
                                                  [](TokenId t) { return t != kIgnoreLabel; }));
  }
};

inline Batch make_batch(const std::vector<PretrainInstance>& instances, std::size_t max_T,
                        std::size_t max_I) {
  Batch b;
  b.size = instances.size();
  b.text_len = max_T;
  b.num_regions = max_I;
  b.feature_dim = 0;
  for (auto& inst : instances) {
    if (inst.text_len() > max_T)
      throw DataError("instance " + inst.caption_id + " has " + std::to_string(inst.text_len()) +
                      " tokens, batch allows " + std::to_string(max_T));
    if (inst.region_count() > max_I)
      throw DataError("instance " + inst.caption_id + " has " +
                      std::to_string(inst.region_count()) + " regions, batch allows " +
                      std::to_string(max_I));
    if (!inst.regions.empty()) {
      auto d = inst.regions.front().feature.size();
      if (b.feature_dim != 0 && d != b.feature_dim)
        throw DataError("instances disagree on region feature dimension");
      b.feature_dim = d;
    }
  }
  const auto B = b.size, T = max_T, I = max_I, D = b.feature_dim;
  b.ids.assign(B * T, 0);
  b.segments.assign(B * T, 0);
  b.text_mask.assign(B * T, 0);
  b.token_labels.assign(B * T, kIgnoreLabel);
  b.tags.assign(B * T, Task::none);
  b.features.assign(B * I * D, 0.0);
  b.locations.assign(B * I * 5, 0.0);
  b.region_mask.assign(B * I, 0);
  b.region_labels.assign(B * I, -1);
  b.itm_labels.assign(B, 0.0);
  for (std::size_t n = 0; n < B; ++n) {
    const auto& inst = instances[n];
    for (std::size_t t = 0; t < inst.text_len(); ++t) {
      b.ids[n * T + t] = inst.input_ids[t];
      b.text_mask[n * T + t] = 1;
      b.token_labels[n * T + t] = inst.token_labels[t];
      b.tags[n * T + t] = inst.tags[t];
    }
    for (std::size_t i = 0; i < inst.region_count(); ++i) {
      std::copy(inst.regions[i].feature.begin(), inst.regions[i].feature.end(),
                b.features.begin() + static_cast<std::ptrdiff_t>((n * I + i) * D));
      std::copy(inst.locations[i].begin(), inst.locations[i].end(),
                b.locations.begin() + static_cast<std::ptrdiff_t>((n * I + i) * 5));
      b.region_mask[n * I + i] = 1;
      b.region_labels[n * I + i] = inst.region_labels[i];
    }
    b.itm_labels[n] = inst.positive ? 1.0 : 0.0;
  }
  return b;
}

// Batch sized to its longest member.
inline Batch make_batch(const std::vector<PretrainInstance>& instances) {
  std::size_t T = 0, I = 0;
  for (auto& inst : instances) {
    T = std::max(T, inst.text_len());
    I = std::max(I, inst.region_count());
  }
  return make_batch(instances, T, I);
}

}  // namespace sgvl
