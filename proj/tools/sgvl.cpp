// sgvl: command-line front end for parsing, corpus generation, masking,
// training and evaluation.
//
// exit codes: 0 ok, 1 usage, 2 data or validation, 3 numeric abort

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "sgvl/ablation.hpp"
#include "sgvl/corpus.hpp"
#include "sgvl/eval.hpp"
#include "sgvl/masking.hpp"
#include "sgvl/model.hpp"
#include "sgvl/scenegraph.hpp"
#include "sgvl/textproc.hpp"
#include "sgvl/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sgvl;

namespace {

struct Options {
  std::string lexicon = std::string(SGVL_DATA_DIR) + "/lexicon.tsv";
  std::string vocab, captions, images, out, config, checkpoint, text;
  std::string heldout_captions, heldout_images;
  std::uint64_t seed = 0;
  std::size_t steps = 0, batch = 0, count = 0, per_category = 0;
  std::string mode;
  unsigned threads = 1;
};

json load_config(const Options& o) {
  if (o.config.empty()) return json::object();
  try {
    return json::parse(read_file(o.config));
  } catch (const json::exception& e) {
    throw ConfigError(o.config + ": " + e.what());
  }
}

void need(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string("missing required flag ") + flag);
}

Corpus load_corpus(const std::string& captions, const std::string& images, const Lexicon& lex) {
  need(captions, "--captions");
  need(images, "--images");
  auto c = load_pairs(captions, images);
  c.parse_graphs(lex);
  return c;
}

Vocab load_or_build_vocab(const Options& o, const Lexicon& lex, const Corpus* corpus) {
  if (!o.vocab.empty() && fs::exists(o.vocab)) return Vocab::load(o.vocab);
  if (!o.vocab.empty() && corpus == nullptr) return Vocab::load(o.vocab);  // reports the missing file
  std::vector<std::string> texts;
  if (corpus)
    for (auto& c : corpus->captions) texts.push_back(c.text);
  return build_vocab(lex, texts);
}

TrainConfig train_config(const Options& o, const json& cfg) {
  TrainConfig tc;
  if (cfg.contains("train")) cfg.at("train").get_to(tc);
  if (o.steps) tc.steps = o.steps;
  if (o.batch) tc.batch = o.batch;
  tc.seed = o.seed;
  if (!o.mode.empty()) tc.mode = ablation_mode_from_string(o.mode);
  tc.threads = o.threads;
  return tc;
}

ModelConfig model_config(const json& cfg, const Vocab& vocab, const Corpus& corpus) {
  ModelConfig base;
  if (cfg.contains("model")) cfg.at("model").get_to(base);
  return config_for(vocab, corpus, base);
}

void log_step(const StepMetrics& m) {
  std::fprintf(stderr, "step %6zu  lr %.3e  total %.4f  obj %.3f attr %.3f rel %.3f mlm %.3f region %.3f itm %.3f\n",
               m.step, m.lr, m.total, m.l_obj, m.l_attr, m.l_rel, m.l_mlm, m.l_region, m.l_itm);
}

int cmd_parse(const Options& o) {
  auto lex = Lexicon::load(o.lexicon);
  std::string out;
  if (!o.text.empty()) {
    out = to_json(parse(o.text, lex)).dump(2) + "\n";
  } else {
    need(o.captions, "--text or --captions");
    for (auto& c : captions_from_jsonl(read_file(o.captions))) {
      auto j = to_json(parse(c.text, lex));
      j["caption_id"] = c.caption_id;
      out += j.dump() + "\n";
    }
  }
  if (o.out.empty()) std::cout << out;
  else write_file_atomic(o.out, out);
  return 0;
}

int cmd_gen_corpus(const Options& o) {
  need(o.out, "--out");
  auto cfg = load_config(o);
  GeneratorConfig gc;
  if (cfg.contains("generator")) cfg.at("generator").get_to(gc);
  auto lex = Lexicon::load(o.lexicon);
  auto sc = generate_corpus(gc, lex, o.seed);
  fs::path dir(o.out);
  save_pairs(sc.train, dir / "captions.jsonl", dir / "images.jsonl");
  save_pairs(sc.heldout, dir / "heldout_captions.jsonl", dir / "heldout_images.jsonl");
  std::vector<std::string> texts;
  for (auto& c : sc.train.captions) texts.push_back(c.text);
  build_vocab(lex, texts).save(dir / "vocab.txt");
  json meta = {{"generator", gc}, {"seed", o.seed}};
  write_file_atomic(dir / "generator.json", meta.dump(2) + "\n");
  std::fprintf(stderr, "wrote %zu training and %zu held-out pairs to %s\n", sc.train.size(), sc.heldout.size(),
               o.out.c_str());
  return 0;
}

int cmd_mask(const Options& o) {
  need(o.out, "--out");
  auto cfg = load_config(o);
  auto lex = Lexicon::load(o.lexicon);
  auto corpus = load_corpus(o.captions, o.images, lex);
  auto vocab = load_or_build_vocab(o, lex, &corpus);
  auto tc = train_config(o, cfg);
  auto examples = prepare_examples(corpus, vocab);
  auto policy = effective_policy(tc, examples, corpus.images, vocab);
  const std::size_t n = o.count ? o.count : examples.size();
  std::vector<std::size_t> picks(n);
  for (std::size_t i = 0; i < n; ++i) picks[i] = i % examples.size();
  auto insts = build_instances(examples, picks, corpus.images, policy, vocab, o.seed, o.threads);
  std::string out;
  for (auto& inst : insts) out += to_json(inst).dump() + "\n";
  write_file_atomic(o.out, out);
  return 0;
}

int cmd_train(const Options& o) {
  need(o.out, "--out");
  auto cfg = load_config(o);
  auto lex = Lexicon::load(o.lexicon);
  auto corpus = load_corpus(o.captions, o.images, lex);
  auto vocab = load_or_build_vocab(o, lex, &corpus);
  auto tc = train_config(o, cfg);
  auto mc = model_config(cfg, vocab, corpus);
  fs::path dir(o.out);
  vocab.save(dir / "vocab.txt");
  TrainOutputs outs{dir, log_step};
  auto r = o.checkpoint.empty() ? train(corpus, vocab, mc, tc, outs) : resume(o.checkpoint, corpus, vocab, mc, tc, outs);
  auto [first, last] = loss_endpoints(r.metrics);
  std::fprintf(stderr, "done: step %llu, total loss %.4f -> %.4f\n", static_cast<unsigned long long>(r.state.step),
               first, last);
  return 0;
}

int cmd_eval_cloze(const Options& o) {
  need(o.checkpoint, "--checkpoint");
  need(o.vocab, "--vocab");
  auto cfg = load_config(o);
  auto lex = Lexicon::load(o.lexicon);
  auto corpus = load_corpus(o.captions, o.images, lex);
  auto vocab = Vocab::load(o.vocab);
  auto ck = load_checkpoint<float>(o.checkpoint);
  if (ck.model.config().vocab_size != vocab.size())
    throw ConfigError("checkpoint vocabulary has " + std::to_string(ck.model.config().vocab_size) +
                      " tokens, --vocab has " + std::to_string(vocab.size()));
  auto examples = prepare_examples(corpus, vocab);
  std::size_t n = o.per_category ? o.per_category : cfg.value("cloze_per_category", std::size_t{500});
  auto items = build_cloze_set(examples, n, o.seed);
  auto rep = run_cloze(items, examples, vocab, model_mlm_scorer(ck.model));
  rep.seed = o.seed;
  rep.checkpoint = o.checkpoint;
  auto table = format_cloze_table({{fs::path(o.checkpoint).stem().string(), rep}});
  if (!o.out.empty()) {
    write_file_atomic(o.out, rep.to_json().dump(2) + "\n");
    fs::path t(o.out);
    t.replace_extension(".txt");
    write_file_atomic(t, table);
  }
  std::cout << table;
  return 0;
}

int cmd_eval_itm(const Options& o) {
  need(o.checkpoint, "--checkpoint");
  need(o.vocab, "--vocab");
  auto lex = Lexicon::load(o.lexicon);
  auto corpus = load_corpus(o.captions, o.images, lex);
  auto vocab = Vocab::load(o.vocab);
  auto ck = load_checkpoint<float>(o.checkpoint);
  if (ck.model.config().vocab_size != vocab.size())
    throw ConfigError("checkpoint vocabulary does not match --vocab");
  auto examples = prepare_examples(corpus, vocab);
  auto rep = run_itm_eval(examples, corpus.images, model_itm_scorer(ck.model), 0.5, o.seed);
  if (!o.out.empty()) write_file_atomic(o.out, rep.to_json().dump(2) + "\n");
  std::printf("itm accuracy %.4f over %zu pairs (%zu positive)\n", rep.accuracy(), rep.n, rep.positives);
  return 0;
}

int cmd_ablate(const Options& o) {
  need(o.out, "--out");
  auto cfg = load_config(o);
  auto lex = Lexicon::load(o.lexicon);
  Corpus train_c, held_c;
  if (o.captions.empty()) {
    GeneratorConfig gc;
    if (cfg.contains("generator")) cfg.at("generator").get_to(gc);
    auto sc = generate_corpus(gc, lex, cfg.value("corpus_seed", o.seed));
    train_c = std::move(sc.train);
    held_c = std::move(sc.heldout);
  } else {
    train_c = load_corpus(o.captions, o.images, lex);
    held_c = load_corpus(o.heldout_captions, o.heldout_images, lex);
  }
  auto vocab = load_or_build_vocab(o, lex, &train_c);
  AblationSetup s;
  s.train = &train_c;
  s.heldout = &held_c;
  s.vocab = &vocab;
  s.train_config = train_config(o, cfg);
  s.model = model_config(cfg, vocab, train_c);
  s.cloze_per_category = o.per_category ? o.per_category : cfg.value("cloze_per_category", std::size_t{500});
  s.eval_seed = o.seed;
  fs::path dir(o.out);
  vocab.save(dir / "vocab.txt");
  auto r = run_ablation(s, dir, [](AblationMode m, const StepMetrics& sm) {
    if (sm.step % 100 == 0) {
      std::fprintf(stderr, "[%s] ", std::string(to_string(m)).c_str());
      log_step(sm);
    }
  });
  std::cout << r.table();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{"scene-graph guided vision-language pre-training at desk scale"};
  app.require_subcommand(1);
  auto common = [&](CLI::App* c) {
    c->add_option("--lexicon", o.lexicon, "lexicon TSV");
    c->add_option("--seed", o.seed, "random seed");
    c->add_option("--config", o.config, "JSON config with optional model/train/generator blocks");
    c->add_option("--threads", o.threads, "worker threads for instance construction")->check(CLI::PositiveNumber);
    c->add_option("--out", o.out, "output file or directory");
  };
  auto data = [&](CLI::App* c) {
    c->add_option("--vocab", o.vocab, "vocabulary file, one token per line");
    c->add_option("--captions", o.captions, "captions JSONL");
    c->add_option("--images", o.images, "images JSONL");
  };
  auto training = [&](CLI::App* c) {
    c->add_option("--steps", o.steps, "optimizer steps");
    c->add_option("--batch", o.batch, "batch size");
    c->add_option("--mode", o.mode, "masking arm")->check(CLI::IsMember({"sgp", "random-only"}));
  };

  auto* parse_cmd = app.add_subcommand("parse", "extract a scene graph from caption text");
  common(parse_cmd);
  parse_cmd->add_option("--text", o.text, "caption");
  parse_cmd->add_option("--captions", o.captions, "captions JSONL (one graph per line)");

  auto* gen = app.add_subcommand("gen-corpus", "write a synthetic paired corpus");
  common(gen);

  auto* mask = app.add_subcommand("mask", "emit masked pre-training instances");
  common(mask);
  data(mask);
  training(mask);
  mask->add_option("--count", o.count, "number of instances (default: one per caption)");

  auto* tr = app.add_subcommand("train", "pre-train a model");
  common(tr);
  data(tr);
  training(tr);
  tr->add_option("--checkpoint", o.checkpoint, "resume from this checkpoint");

  auto* cloze = app.add_subcommand("eval-cloze", "cloze test on held-out pairs");
  common(cloze);
  data(cloze);
  cloze->add_option("--checkpoint", o.checkpoint, "model checkpoint");
  cloze->add_option("--per-category", o.per_category, "items per node category (default 500)");

  auto* itm = app.add_subcommand("eval-itm", "image-text matching accuracy on held-out pairs");
  common(itm);
  data(itm);
  itm->add_option("--checkpoint", o.checkpoint, "model checkpoint");

  auto* abl = app.add_subcommand("ablate", "train and cloze-test both masking arms");
  common(abl);
  data(abl);
  training(abl);
  abl->add_option("--heldout-captions", o.heldout_captions, "held-out captions JSONL");
  abl->add_option("--heldout-images", o.heldout_images, "held-out images JSONL");
  abl->add_option("--per-category", o.per_category, "cloze items per node category (default 500)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*parse_cmd) return cmd_parse(o);
    if (*gen) return cmd_gen_corpus(o);
    if (*mask) return cmd_mask(o);
    if (*tr) return cmd_train(o);
    if (*cloze) return cmd_eval_cloze(o);
    if (*itm) return cmd_eval_itm(o);
    if (*abl) return cmd_ablate(o);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed JSON: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
