// One PASS/FAIL line per acceptance criterion; exits nonzero if any fails.
// The two training criteria dominate the runtime (roughly 30 minutes on one
// core). SGVL_ACCEPTANCE_ONLY=1,2,5 restricts the run to listed criteria.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <set>

#include "fd_check.hpp"
#include "sgvl/ablation.hpp"
#include "sgvl/eval.hpp"
#include "sgvl/train.hpp"

using namespace sgvl;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr std::uint64_t kCorpusSeed = 1;
constexpr std::uint64_t kEvalSeed = 1;
constexpr std::array<std::uint64_t, 3> kTrainSeeds = {3, 4, 5};  // the first is also the convergence run

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::set<int> selected() {
  std::set<int> s;
  const char* env = std::getenv("SGVL_ACCEPTANCE_ONLY");
  if (!env || !*env) {
    for (int i = 1; i <= 9; ++i) s.insert(i);
    return s;
  }
  for (auto& part : split(env, ',')) s.insert(std::stoi(std::string(trim(part))));
  return s;
}

const Lexicon& lexicon() {
  static const Lexicon l = Lexicon::load(SGVL_DATA_DIR "/lexicon.tsv");
  return l;
}

// The default desk corpus, built once.
struct Desk {
  SyntheticCorpus sc;
  Vocab vocab;
  std::vector<Example> train, heldout;
  ModelConfig model;
};

const Desk& desk() {
  static const auto d = [] {
    auto p = std::make_unique<Desk>();
    p->sc = generate_corpus(GeneratorConfig{}, lexicon(), kCorpusSeed);
    std::vector<std::string> texts;
    for (auto& c : p->sc.train.captions) texts.push_back(c.text);
    p->vocab = build_vocab(lexicon(), texts);
    p->train = prepare_examples(p->sc.train, p->vocab);
    p->heldout = prepare_examples(p->sc.heldout, p->vocab);
    p->model = config_for(p->vocab, p->sc.train);
    return p;
  }();
  return *d;
}

std::vector<ClozeReport> all_reports;  // for the ACC@1 <= ACC@5 floor

ClozeReport cloze_of(const Model<float>& m, std::size_t per_category = 500) {
  auto items = build_cloze_set(desk().heldout, per_category, kEvalSeed);
  auto rep = run_cloze(items, desk().heldout, desk().vocab, model_mlm_scorer(m));
  all_reports.push_back(rep);
  return rep;
}

// ---------------------------------------------------------------- 1

Outcome parser_golden() {
  const std::string caption =
      "A woman in blue dress is putting her little white cat on top of a brown car in front of her house.";
  const auto out = fs::temp_directory_path() / "sgvl_acceptance_parse.json";
  const auto t0 = Clock::now();
  const std::string cmd = std::string(SGVL_CLI_PATH) + " parse --text '" + caption + "' --out '" + out.string() + "'";
  const int status = std::system(cmd.c_str());
  const double secs = seconds_since(t0);
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) return {false, "parse exited abnormally"};
  auto j = nlohmann::json::parse(read_file(out));
  auto lemmas = [&](const char* key) {
    std::multiset<std::string> s;
    for (auto& n : j[key]) s.insert(n["lemma"].get<std::string>());
    return s;
  };
  const bool ok = lemmas("objects") == std::multiset<std::string>{"dress", "woman", "cat", "car", "house"} &&
                  lemmas("relations") == std::multiset<std::string>{"in", "putting", "on-top-of", "in-front-of"} &&
                  lemmas("attributes") == std::multiset<std::string>{"blue", "white", "little", "brown"};
  char buf[160];
  std::snprintf(buf, sizeof buf, "node sets %s, %.3f s", ok ? "match" : "differ", secs);
  return {ok && secs < 1.0, buf};
}

// ---------------------------------------------------------------- 2

Outcome location_features() {
  Rng rng(2024);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const double W = 50 + 1950 * uniform01(rng), H = 50 + 1950 * uniform01(rng);
    double xa = W * uniform01(rng), xb = W * uniform01(rng), ya = H * uniform01(rng), yb = H * uniform01(rng);
    if (xa > xb) std::swap(xa, xb);
    if (ya > yb) std::swap(ya, yb);
    if (xb - xa < 1e-3 || yb - ya < 1e-3) {
      --i;
      continue;
    }
    RegionBox b{xa, ya, xb, yb, W, H};
    const auto got = location_feature(b);
    const double want[5] = {xa / W, ya / H, xb / W, yb / H, ((xb - xa) / W) * ((yb - ya) / H)};
    for (int k = 0; k < 5; ++k) worst = std::max(worst, std::abs(got[k] - want[k]));
  }
  const auto full = location_feature(RegionBox::full(640, 480));
  const bool exact = full == LocationFeature{0, 0, 1, 1, 1};
  char buf[160];
  std::snprintf(buf, sizeof buf, "max abs error %.3g over 1000 boxes, full image %s", worst,
                exact ? "(0,0,1,1,1) exactly" : "NOT exact");
  return {worst < 1e-12 && exact, buf};
}

// ---------------------------------------------------------------- 3, 4

struct MaskingRun {
  std::size_t instances = 0, positives = 0;
  std::array<std::size_t, 3> nodes_total{}, nodes_masked{}, fills{};
  std::size_t mlm_candidates = 0, mlm_masked = 0, regions_total = 0, regions_masked = 0;
  std::size_t attr_checked = 0, rel_checked = 0, attr_violations = 0, rel_violations = 0;
  double secs = 0;
};

const MaskingRun& masking_run() {
  static const MaskingRun run = [] {
    MaskingRun r;
    const auto& d = desk();
    const MaskingPolicy policy;
    const auto t0 = Clock::now();
    Rng pick(77);
    for (std::size_t n = 0; n < 10000; ++n) {
      const auto& ex = d.train[uniform_index(pick, d.train.size())];
      auto inst = build_instance(ex, d.sc.train.images, policy, d.vocab, mix_seed(78, n));
      ++r.instances;
      if (!inst.positive) continue;
      ++r.positives;
      for (int k = 0; k < 3; ++k) {
        r.nodes_total[k] += inst.nodes_total[k];
        r.nodes_masked[k] += inst.nodes_masked[k];
      }
      r.mlm_candidates += inst.mlm_candidates;
      r.mlm_masked += inst.mlm_masked;
      r.regions_total += inst.region_count();
      r.regions_masked += inst.masked_regions();
      for (auto& l : inst.labels) r.fills[static_cast<int>(l.fill)] += l.span.size();

      // Context rule, recomputed from the graph rather than from the
      // instance's own context records: a token is "touched" when any label
      // of any task covers it.
      std::vector<bool> touched(inst.text_len(), false);
      for (auto& l : inst.labels)
        for (auto p = l.span.begin; p < l.span.end; ++p) touched[p] = true;
      auto clear = [&](TokenSpan s) {
        for (auto p = s.begin; p < s.end; ++p)
          if (touched[p]) return false;
        return true;
      };
      const auto& g = *ex.graph;
      for (auto& l : inst.labels) {
        if (l.task == Task::attribute) {
          for (std::size_t i = 0; i < g.attributes.size(); ++i)
            if (ex.aligned.span(NodeKind::attribute, i) == l.span) {
              ++r.attr_checked;
              if (!clear(ex.aligned.span(NodeKind::object, g.attributes[i].owner))) ++r.attr_violations;
            }
        } else if (l.task == Task::relationship) {
          for (std::size_t i = 0; i < g.relations.size(); ++i)
            if (ex.aligned.span(NodeKind::relationship, i) == l.span) {
              ++r.rel_checked;
              if (!clear(ex.aligned.span(NodeKind::object, g.relations[i].subject)) ||
                  !clear(ex.aligned.span(NodeKind::object, g.relations[i].object)))
                ++r.rel_violations;
            }
        }
      }
    }
    r.secs = seconds_since(t0);
    return r;
  }();
  return run;
}

double ratio(std::size_t a, std::size_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; }

Outcome masking_statistics() {
  const auto& r = masking_run();
  const std::size_t nt = r.nodes_total[0] + r.nodes_total[1] + r.nodes_total[2];
  const std::size_t nm = r.nodes_masked[0] + r.nodes_masked[1] + r.nodes_masked[2];
  const std::size_t ft = r.fills[0] + r.fills[1] + r.fills[2];
  const double node = ratio(nm, nt), mlm = ratio(r.mlm_masked, r.mlm_candidates),
               region = ratio(r.regions_masked, r.regions_total);
  const double fm = ratio(r.fills[0], ft), fr = ratio(r.fills[1], ft), fk = ratio(r.fills[2], ft);
  const bool ok = std::abs(node - 0.30) <= 0.01 && std::abs(mlm - 0.15) <= 0.01 && std::abs(region - 0.15) <= 0.01 &&
                  std::abs(fm - 0.80) <= 0.02 && std::abs(fr - 0.10) <= 0.02 && std::abs(fk - 0.10) <= 0.02 &&
                  r.secs < 30;
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "node %.4f, mlm %.4f, region %.4f, mix (%.3f, %.3f, %.3f) over %zu instances (%zu positive), %.1f s",
                node, mlm, region, fm, fr, fk, r.instances, r.positives, r.secs);
  return {ok, buf};
}

Outcome context_preservation() {
  const auto& r = masking_run();
  char buf[200];
  std::snprintf(buf, sizeof buf, "%zu/%zu attribute and %zu/%zu relationship violations", r.attr_violations,
                r.attr_checked, r.rel_violations, r.rel_checked);
  return {r.attr_violations == 0 && r.rel_violations == 0 && r.attr_checked > 0 && r.rel_checked > 0, buf};
}

// ---------------------------------------------------------------- 5

Outcome gradient_check() {
  const auto& d = desk();
  const auto t0 = Clock::now();
  Model<double> m(d.model, 5);
  MaskingPolicy p;
  p.negative_prob = 0;
  std::vector<PretrainInstance> insts;
  for (std::size_t i = 0; i < 2; ++i) insts.push_back(build_instance(d.train[i], d.sc.train.images, p, d.vocab, 50 + i));
  auto batch = make_batch(insts);
  Rng rng(55);
  std::vector<std::pair<nn::Tensor<double>, std::size_t>> probes;
  for (int k = 0; k < 50; ++k) {
    auto& t = m.params()[uniform_index(rng, m.params().size())];
    probes.emplace_back(t, uniform_index(rng, t.numel()));
  }
  auto res = testing::fd_probe(
      [&] { return m.loss(m.forward(batch, Mode::eval, nullptr, {.labeled_mlm_only = true}), batch).total; }, probes,
      1e-5);
  double worst = 0;
  for (auto& r : res) worst = std::max(worst, r.error);
  const double secs = seconds_since(t0);
  char buf[160];
  std::snprintf(buf, sizeof buf, "max relative error %.3g over 50 parameters, %.1f s", worst, secs);
  return {worst < 1e-4 && secs < 120, buf};
}

// ---------------------------------------------------------------- 6, 7

TrainConfig desk_train(std::uint64_t seed, AblationMode mode) {
  TrainConfig tc;
  tc.seed = seed;
  tc.mode = mode;
  return tc;  // 2000 steps, batch 32
}

struct Arm {
  TrainResult result;
  ClozeReport cloze;
  double train_secs = 0, secs = 0;  // secs includes the cloze evaluation
};

std::map<std::pair<std::uint64_t, int>, std::shared_ptr<Arm>> arms;

std::shared_ptr<Arm> arm(std::uint64_t seed, AblationMode mode) {
  auto key = std::make_pair(seed, static_cast<int>(mode));
  if (auto it = arms.find(key); it != arms.end()) return it->second;
  const auto& d = desk();
  const auto t0 = Clock::now();
  auto a = std::make_shared<Arm>(Arm{train(d.sc.train, d.vocab, d.model, desk_train(seed, mode)), {}, 0, 0});
  a->train_secs = seconds_since(t0);
  a->cloze = cloze_of(a->result.model);
  a->secs = seconds_since(t0);
  std::fprintf(stderr, "  trained %s seed %llu in %.0f s: cloze overall %.2f relationships %.2f\n",
               std::string(to_string(mode)).c_str(), static_cast<unsigned long long>(seed), a->secs,
               100 * a->cloze.overall.acc1(), 100 * a->cloze.categories[2].acc1());
  arms[key] = a;
  return a;
}

Outcome convergence() {
  const auto& d = desk();
  auto a = arm(kTrainSeeds[0], AblationMode::sgp);
  auto [first, last] = loss_endpoints(a->result.metrics, 10);
  const double drop = 1.0 - last / first;
  auto itm = run_itm_eval(d.heldout, d.sc.heldout.images, model_itm_scorer(a->result.model), 0.5, kEvalSeed);
  char buf[220];
  std::snprintf(buf, sizeof buf, "loss %.3f -> %.3f (%.1f%% drop), held-out ITM accuracy %.4f (n=%zu), %.0f s training",
                first, last, 100 * drop, itm.accuracy(), itm.n, a->train_secs);
  return {drop >= 0.5 && itm.accuracy() > 0.9 && a->train_secs < 900, buf};
}

Outcome ablation_direction() {
  bool overall_ok = true;
  double rel_s = 0, rel_r = 0;
  double secs = 0;
  std::string per_seed;
  for (auto seed : kTrainSeeds) {
    auto s = arm(seed, AblationMode::sgp);
    auto r = arm(seed, AblationMode::random_only);
    secs += s->secs + r->secs;
    overall_ok = overall_ok && s->cloze.overall.acc1() >= r->cloze.overall.acc1();
    rel_s += s->cloze.categories[2].acc1() / 3;
    rel_r += r->cloze.categories[2].acc1() / 3;
    char buf[120];
    std::snprintf(buf, sizeof buf, "%sseed %llu overall %.2f vs %.2f", per_seed.empty() ? "" : "; ",
                  static_cast<unsigned long long>(seed), 100 * s->cloze.overall.acc1(), 100 * r->cloze.overall.acc1());
    per_seed += buf;
  }
  // Counts the convergence run too, which this criterion reuses.
  char buf[200];
  std::snprintf(buf, sizeof buf, "; mean relationships %.2f vs %.2f; %.0f s", 100 * rel_s, 100 * rel_r, secs);
  return {overall_ok && rel_s > rel_r && secs < 2700, "sgp vs random-only: " + per_seed + buf};
}

// ---------------------------------------------------------------- 8

Outcome determinism() {
  const auto& d = desk();
  auto small = [](std::size_t steps) {
    TrainConfig tc;
    tc.steps = steps;
    tc.batch = 8;
    tc.seed = 11;
    tc.warmup = 10;
    tc.calibration_instances = 1000;
    return tc;
  };
  auto dir = fs::temp_directory_path() / "sgvl_acceptance_split";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto a = train(d.sc.train, d.vocab, d.model, small(100));
  auto b = train(d.sc.train, d.vocab, d.model, small(100));
  const bool same_ck = serialize_checkpoint(a.model, a.state) == serialize_checkpoint(b.model, b.state);
  const bool same_rep = cloze_of(a.model, 100).to_json() == cloze_of(b.model, 100).to_json();
  train(d.sc.train, d.vocab, d.model, small(50), {dir, {}});
  auto c = resume(dir / "checkpoint.bin", d.sc.train, d.vocab, d.model, small(100), {dir, {}});
  const bool split = serialize_checkpoint(c.model, c.state) == serialize_checkpoint(a.model, a.state) &&
                     read_file(dir / "checkpoint.bin") == serialize_checkpoint(a.model, a.state);
  std::string detail = std::string("repeat run checkpoints ") + (same_ck ? "identical" : "DIFFER") + ", reports " +
                       (same_rep ? "identical" : "DIFFER") + ", 50+50 vs 100 " + (split ? "identical" : "DIFFER");
  return {same_ck && same_rep && split, detail};
}

// ---------------------------------------------------------------- 9

Outcome sanity_floors() {
  const auto& d = desk();
  Model<float> m(d.model, 99);
  auto rep = cloze_of(m);
  const std::size_t V = d.vocab.size();
  auto [lo, hi] = binomial_interval(rep.overall.n, 1.0 / static_cast<double>(V), 0.99);
  const bool chance = rep.overall.hit1 >= lo && rep.overall.hit1 <= hi;
  bool ordered = true;
  for (auto& r : all_reports) {
    ordered = ordered && r.overall.hit1 <= r.overall.hit5;
    for (auto& c : r.categories) ordered = ordered && c.hit1 <= c.hit5;
  }
  char buf[220];
  std::snprintf(buf, sizeof buf, "untrained ACC@1 %zu/%zu hits, 99%% interval [%zu, %zu] at 1/%zu; ACC@1 <= ACC@5 on %zu reports",
                rep.overall.hit1, rep.overall.n, lo, hi, V, all_reports.size());
  return {chance && ordered, buf};
}

}  // namespace

int main() {
  nn::tune_allocator();
  const auto only = selected();
  const std::vector<std::pair<const char*, Outcome (*)()>> criteria = {
      {"parser golden case", parser_golden},
      {"location feature", location_features},
      {"masking statistics", masking_statistics},
      {"context preservation", context_preservation},
      {"gradient correctness", gradient_check},
      {"training convergence", convergence},
      {"scene-graph ablation direction", ablation_direction},
      {"determinism laws", determinism},
      {"sanity floors", sanity_floors},
  };
  // Floors run last so they see every report produced above.
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
