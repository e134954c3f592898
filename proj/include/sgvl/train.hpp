#pragma once

// Step-based pre-training loop. Every step draws its pairs, masks and dropout
// from seeds derived from (seed, step), so a run can be split at any step and
// resumed from a checkpoint with bitwise-identical results.

#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sgvl/corpus.hpp"
#include "sgvl/error.hpp"
#include "sgvl/masking.hpp"
#include "sgvl/model.hpp"
#include "sgvl/nn/optim.hpp"
#include "sgvl/textproc.hpp"
#include "sgvl/util.hpp"

namespace sgvl {

enum class AblationMode { sgp, random_only };

inline std::string_view to_string(AblationMode m) { return m == AblationMode::sgp ? "sgp" : "random-only"; }

inline AblationMode ablation_mode_from_string(std::string_view s) {
  if (s == "sgp") return AblationMode::sgp;
  if (s == "random-only") return AblationMode::random_only;
  throw UsageError("unknown mode '" + std::string(s) + "' (expected sgp or random-only)");
}

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
  double peak_lr = 1e-3;
  std::size_t warmup = 0;  // 0: a tenth of `steps`
  MaskingPolicy policy;
  AblationMode mode = AblationMode::sgp;
  std::size_t checkpoint_interval = 0;  // 0: only the final checkpoint
  std::size_t log_interval = 1;
  double clip_norm = 1.0;
  unsigned threads = 1;
  std::size_t calibration_instances = 10000;

  std::size_t effective_warmup() const { return warmup > 0 ? warmup : std::max<std::size_t>(1, steps / 10); }

  void validate() const {
    if (steps < 1) throw ConfigError("steps must be at least 1");
    if (batch < 1) throw ConfigError("batch must be at least 1");
    if (!(peak_lr > 0)) throw ConfigError("peak learning rate must be positive");
    if (log_interval < 1) throw ConfigError("log_interval must be at least 1");
    if (!(clip_norm > 0)) throw ConfigError("clip_norm must be positive");
    policy.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"steps", c.steps},
       {"batch", c.batch},
       {"seed", c.seed},
       {"peak_lr", c.peak_lr},
       {"warmup", c.warmup},
       {"policy", c.policy},
       {"mode", to_string(c.mode)},
       {"checkpoint_interval", c.checkpoint_interval},
       {"log_interval", c.log_interval},
       {"clip_norm", c.clip_norm},
       {"calibration_instances", c.calibration_instances}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  auto get = [&](const char* k, auto& v) {
    if (j.contains(k)) j.at(k).get_to(v);
  };
  get("steps", c.steps);
  get("batch", c.batch);
  get("seed", c.seed);
  get("peak_lr", c.peak_lr);
  get("warmup", c.warmup);
  get("policy", c.policy);
  if (j.contains("mode")) c.mode = ablation_mode_from_string(j.at("mode").get<std::string>());
  get("checkpoint_interval", c.checkpoint_interval);
  get("log_interval", c.log_interval);
  get("clip_norm", c.clip_norm);
  get("calibration_instances", c.calibration_instances);
}

// Model dimensions implied by a vocabulary and a corpus, on top of `base`.
inline ModelConfig config_for(const Vocab& vocab, const Corpus& corpus, ModelConfig base = {}) {
  base.vocab_size = vocab.size();
  if (corpus.size() > 0) base.feature_dim = corpus.feature_dim();
  int max_class = -1;
  for (auto& img : corpus.images)
    for (auto& r : img.regions) max_class = std::max(max_class, r.class_id);
  if (max_class >= 0) base.region_classes = std::max<std::size_t>(base.region_classes, static_cast<std::size_t>(max_class) + 1);
  return base;
}

// Expected number of labeled token positions per instance under `policy`,
// estimated on a fixed set of simulated instances, and the number of
// positions a node-free policy could draw from.
struct MaskAudit {
  std::size_t instances = 0;
  std::size_t labeled_tokens = 0;
  std::size_t token_candidates_without_nodes = 0;
  std::array<std::size_t, 3> nodes_total{}, nodes_masked{};
  std::size_t mlm_candidates = 0, mlm_masked = 0;
  std::size_t regions_total = 0, regions_masked = 0;
  std::array<std::size_t, 3> fills{};
  std::size_t positives = 0;
};

inline MaskAudit audit_masking(const std::vector<Example>& examples, std::span<const ImageRecord> pool,
                               const MaskingPolicy& policy, const Vocab& vocab, std::size_t n,
                               std::uint64_t seed) {
  MaskAudit a;
  if (examples.empty()) return a;
  Rng pick(mix_seed(seed, 0xA0D17ULL));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& ex = examples[uniform_index(pick, examples.size())];
    auto inst = build_instance(ex, pool, policy, vocab, mix_seed(seed, i));
    ++a.instances;
    a.labeled_tokens += inst.labeled_tokens();
    if (!inst.positive) continue;
    ++a.positives;
    for (std::size_t p = 1; p + 1 < ex.aligned.size(); ++p)
      if (!vocab.is_special(ex.aligned.ids[p])) ++a.token_candidates_without_nodes;
    for (int k = 0; k < 3; ++k) {
      a.nodes_total[k] += inst.nodes_total[k];
      a.nodes_masked[k] += inst.nodes_masked[k];
    }
    a.mlm_candidates += inst.mlm_candidates;
    a.mlm_masked += inst.mlm_masked;
    a.regions_total += inst.region_count();
    a.regions_masked += inst.masked_regions();
    for (auto& l : inst.labels) a.fills[static_cast<int>(l.fill)] += l.span.size();
  }
  return a;
}

// Policy actually used for training. The random-only arm drops node masking
// and raises the token rate so that the expected number of masked tokens
// equals the scene-graph arm's.
inline MaskingPolicy effective_policy(const TrainConfig& tc, const std::vector<Example>& examples,
                                      std::span<const ImageRecord> pool, const Vocab& vocab) {
  if (tc.mode == AblationMode::sgp) return tc.policy;
  auto a = audit_masking(examples, pool, tc.policy, vocab, tc.calibration_instances, mix_seed(tc.seed, 0xCA11B8A7EULL));
  MaskingPolicy p = tc.policy;
  p.node_mask_rate = 0.0;
  p.token_mask_rate = a.token_candidates_without_nodes == 0
                          ? tc.policy.token_mask_rate
                          : std::min(1.0, static_cast<double>(a.labeled_tokens) /
                                              static_cast<double>(a.token_candidates_without_nodes));
  return p;
}

struct StepMetrics {
  std::size_t step = 0;
  double lr = 0;
  double l_obj = 0, l_attr = 0, l_rel = 0, l_mlm = 0, l_region = 0, l_itm = 0, total = 0;
  double grad_norm = 0;

  nlohmann::json to_json() const {
    return {{"step", step},     {"lr", lr},         {"l_obj", l_obj},   {"l_attr", l_attr},
            {"l_rel", l_rel},   {"l_mlm", l_mlm},   {"l_region", l_region}, {"l_itm", l_itm},
            {"total", total}};
  }
};

struct TrainResult {
  Model<float> model;
  TrainState<float> state;
  std::vector<StepMetrics> metrics;
  MaskingPolicy policy;
};

// Where a run writes its outputs. All paths optional.
struct TrainOutputs {
  std::optional<std::filesystem::path> dir;
  std::function<void(const StepMetrics&)> on_log;
};

namespace detail {

inline std::string metrics_jsonl(const std::vector<StepMetrics>& ms) {
  std::string out;
  for (auto& m : ms) out += m.to_json().dump() + "\n";
  return out;
}

inline std::vector<StepMetrics> read_metrics(const std::filesystem::path& p, std::size_t up_to) {
  std::vector<StepMetrics> out;
  if (!std::filesystem::exists(p)) return out;
  for (auto& line : split(read_file(p), '\n')) {
    if (trim(line).empty()) continue;
    auto j = nlohmann::json::parse(line);
    StepMetrics m;
    m.step = j.at("step");
    if (m.step > up_to) continue;
    m.lr = j.at("lr");
    m.l_obj = j.at("l_obj");
    m.l_attr = j.at("l_attr");
    m.l_rel = j.at("l_rel");
    m.l_mlm = j.at("l_mlm");
    m.l_region = j.at("l_region");
    m.l_itm = j.at("l_itm");
    m.total = j.at("total");
    out.push_back(m);
  }
  return out;
}

inline void write_outputs(const TrainOutputs& outs, const Model<float>& model, const TrainState<float>& st,
                          const std::vector<StepMetrics>& metrics, bool final_checkpoint) {
  if (!outs.dir) return;
  write_file_atomic(*outs.dir / "metrics.jsonl", metrics_jsonl(metrics));
  if (final_checkpoint) save_checkpoint(*outs.dir / "checkpoint.bin", model, st);
}

// Runs optimizer steps state.step+1 .. tc.steps.
inline void run_steps(Model<float>& model, TrainState<float>& st, std::vector<StepMetrics>& metrics,
                      const std::vector<Example>& examples, std::span<const ImageRecord> pool,
                      const MaskingPolicy& policy, const Vocab& vocab, const TrainConfig& tc,
                      const TrainOutputs& outs) {
  nn::tune_allocator();
  if (!st.adam) {
    st.adam.emplace();
    st.adam->init(model.params());
  }
  model.params().zero_grad();
  const std::size_t warmup = tc.effective_warmup();
  const std::size_t hidden = model.config().text.hidden;
  std::vector<std::size_t> picks(tc.batch);
  for (std::size_t step = st.step + 1; step <= tc.steps; ++step) {
    const std::uint64_t step_seed = mix_seed(tc.seed, step);
    Rng pick_rng(mix_seed(step_seed, 1));
    for (auto& p : picks) p = uniform_index(pick_rng, examples.size());
    auto instances = build_instances(examples, picks, pool, policy, vocab, mix_seed(step_seed, 2), tc.threads);
    auto batch = make_batch(instances);
    Rng drop_rng(mix_seed(step_seed, 3));
    auto out = model.forward(batch, Mode::train, &drop_rng, {.labeled_mlm_only = true});
    auto lb = model.loss(out, batch);
    StepMetrics m{step, nn::noam_lr(step, hidden, warmup, tc.peak_lr), lb.l_obj, lb.l_attr, lb.l_rel,
                  lb.l_mlm, lb.l_region, lb.l_itm, lb.total_value(), 0};
    if (!std::isfinite(m.total)) {
      metrics.push_back(m);
      write_outputs(outs, model, st, metrics, false);
      throw NumericError("non-finite loss at step " + std::to_string(step) + ": " + lb.to_json().dump());
    }
    nn::backward(lb.total);
    m.grad_norm = nn::clip_grad_norm(model.params(), tc.clip_norm);
    if (!std::isfinite(m.grad_norm))
      throw NumericError("non-finite gradient at step " + std::to_string(step) + ": " + lb.to_json().dump());
    nn::adam_step(model.params(), *st.adam, m.lr);
    st.step = step;
    if (step % tc.log_interval == 0 || step == tc.steps) {
      metrics.push_back(m);
      if (outs.on_log) outs.on_log(m);
    }
    if (outs.dir && tc.checkpoint_interval > 0 && step % tc.checkpoint_interval == 0 && step != tc.steps) {
      char name[40];
      std::snprintf(name, sizeof name, "checkpoint_%06zu.bin", step);
      save_checkpoint(*outs.dir / name, model, st);
    }
  }
  write_outputs(outs, model, st, metrics, true);
}

inline nlohmann::json state_extra(const TrainConfig& tc, const MaskingPolicy& policy) {
  return {{"train", tc}, {"effective_policy", policy}};
}

}  // namespace detail

// Trains a freshly initialized model on `corpus` (graphs parsed).
inline TrainResult train(const Corpus& corpus, const Vocab& vocab, const ModelConfig& mc,
                         const TrainConfig& tc, const TrainOutputs& outs = {}) {
  tc.validate();
  if (corpus.size() == 0) throw DataError("training corpus is empty");
  auto examples = prepare_examples(corpus, vocab);
  const auto policy = effective_policy(tc, examples, corpus.images, vocab);
  TrainResult r{Model<float>(mc, mix_seed(tc.seed, 0x1417ULL)), {}, {}, policy};
  r.state.extra = detail::state_extra(tc, policy);
  detail::run_steps(r.model, r.state, r.metrics, examples, corpus.images, policy, vocab, tc, outs);
  return r;
}

// Continues training from a checkpoint up to `tc.steps`.
inline TrainResult resume(const std::filesystem::path& checkpoint, const Corpus& corpus, const Vocab& vocab,
                          const ModelConfig& expected, const TrainConfig& tc, const TrainOutputs& outs = {}) {
  tc.validate();
  auto ck = load_checkpoint<float>(checkpoint, &expected);
  if (ck.state.step > tc.steps)
    throw ConfigError("checkpoint is at step " + std::to_string(ck.state.step) + ", beyond the requested " +
                      std::to_string(tc.steps));
  auto examples = prepare_examples(corpus, vocab);
  const auto policy = effective_policy(tc, examples, corpus.images, vocab);
  TrainResult r{std::move(ck.model), std::move(ck.state), {}, policy};
  if (outs.dir) r.metrics = detail::read_metrics(*outs.dir / "metrics.jsonl", r.state.step);
  r.state.extra = detail::state_extra(tc, policy);
  detail::run_steps(r.model, r.state, r.metrics, examples, corpus.images, policy, vocab, tc, outs);
  return r;
}

// Mean total loss over the first and last `window` logged steps.
inline std::pair<double, double> loss_endpoints(const std::vector<StepMetrics>& ms, std::size_t window = 10) {
  if (ms.empty()) return {0, 0};
  window = std::min(window, ms.size());
  double a = 0, b = 0;
  for (std::size_t i = 0; i < window; ++i) {
    a += ms[i].total;
    b += ms[ms.size() - 1 - i].total;
  }
  return {a / static_cast<double>(window), b / static_cast<double>(window)};
}

}  // namespace sgvl
