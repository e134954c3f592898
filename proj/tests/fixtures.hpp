#pragma once

// Small synthetic corpora and model configs shared by the model, training,
// evaluation and acceptance checks.

#include <memory>
#include <string>
#include <vector>

#include "sgvl/corpus.hpp"
#include "sgvl/masking.hpp"
#include "sgvl/model.hpp"
#include "sgvl/textproc.hpp"
#include "sgvl/train.hpp"

namespace sgvl::testing {

inline const Lexicon& bundled_lexicon() {
  static const Lexicon l = Lexicon::load(SGVL_DATA_DIR "/lexicon.tsv");
  return l;
}

struct World {
  SyntheticCorpus sc;
  Vocab vocab;
  std::vector<Example> train_examples, heldout_examples;

  const Corpus& train() const { return sc.train; }
  const Corpus& heldout() const { return sc.heldout; }
};

inline Vocab corpus_vocab(const SyntheticCorpus& sc) {
  std::vector<std::string> texts;
  for (auto& c : sc.train.captions) texts.push_back(c.text);
  return build_vocab(bundled_lexicon(), texts);
}

// The world is heap-allocated and never moved, so the examples' pointers into
// the corpora stay valid.
inline std::unique_ptr<World> make_world(GeneratorConfig cfg, std::uint64_t seed) {
  auto w = std::make_unique<World>();
  w->sc = generate_corpus(cfg, bundled_lexicon(), seed);
  w->vocab = corpus_vocab(w->sc);
  w->train_examples = prepare_examples(w->sc.train, w->vocab);
  w->heldout_examples = prepare_examples(w->sc.heldout, w->vocab);
  return w;
}

inline GeneratorConfig small_generator(std::size_t pairs = 200, std::size_t heldout = 60) {
  GeneratorConfig g;
  g.pairs = pairs;
  g.heldout_pairs = heldout;
  g.feature_dim = 8;
  return g;
}

// Two layers per stream, one co-attention block after each layer pair.
inline ModelConfig tiny_model(const World& w, double dropout = 0.0) {
  ModelConfig m;
  m.text = {2, 16, 2, 32};
  m.visual = {2, 16, 2, 24};
  m.coattention = {{0, 0}, {1, 1}};
  m.dropout = dropout;
  return config_for(w.vocab, w.train(), m);
}

// Positive instances whose labels together cover every task.
inline std::vector<PretrainInstance> labeled_instances(const World& w, std::size_t n, std::uint64_t seed) {
  MaskingPolicy p;
  p.negative_prob = 0;
  std::vector<PretrainInstance> out;
  for (std::size_t i = 0; out.size() < n; ++i) {
    auto inst = build_instance(w.train_examples[i % w.train_examples.size()], w.train().images, p, w.vocab,
                               mix_seed(seed, i));
    out.push_back(std::move(inst));
  }
  return out;
}

inline std::array<std::size_t, 4> task_counts(const Batch& b) {
  std::array<std::size_t, 4> c{};
  for (auto t : b.tags)
    if (t != Task::none) ++c[static_cast<int>(t) - 1];
  return c;
}

}  // namespace sgvl::testing
