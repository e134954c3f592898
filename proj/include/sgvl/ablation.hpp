#pragma once

// Scene-graph prediction vs random-only masking: train both arms with the
// same seeds and corpus, then run the same cloze set through each.

#include <array>
#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"
#include "sgvl/eval.hpp"
#include "sgvl/train.hpp"

namespace sgvl {

struct AblationSetup {
  const Corpus* train = nullptr;
  const Corpus* heldout = nullptr;
  const Vocab* vocab = nullptr;
  ModelConfig model;
  TrainConfig train_config;
  std::size_t cloze_per_category = 500;
  std::uint64_t eval_seed = 0;
};

struct ArmResult {
  AblationMode mode = AblationMode::sgp;
  ClozeReport cloze;
  ItmReport itm;
  std::vector<StepMetrics> metrics;
  MaskingPolicy policy;
};

struct AblationResult {
  std::array<ArmResult, 2> arms;  // sgp, random-only

  nlohmann::json diff() const {
    nlohmann::json j;
    auto cell = [](const ClozeCell& a, const ClozeCell& b) {
      return nlohmann::json{{"acc1", a.acc1() - b.acc1()}, {"acc5", a.acc5() - b.acc5()}};
    };
    const auto& s = arms[0].cloze;
    const auto& r = arms[1].cloze;
    for (auto k : kNodeKinds)
      j[std::string(to_string(k))] = cell(s.categories[static_cast<int>(k)], r.categories[static_cast<int>(k)]);
    j["overall"] = cell(s.overall, r.overall);
    j["note"] = "sgp minus random-only";
    return j;
  }

  std::string table() const {
    return format_cloze_table({{"sgp", arms[0].cloze}, {"random-only", arms[1].cloze}});
  }
};

// Trains and evaluates one arm. Outputs land in `dir` when given.
inline ArmResult run_arm(const AblationSetup& s, AblationMode mode,
                         const std::optional<std::filesystem::path>& dir = std::nullopt,
                         std::function<void(const StepMetrics&)> on_log = {}) {
  TrainConfig tc = s.train_config;
  tc.mode = mode;
  TrainOutputs outs{dir, std::move(on_log)};
  auto tr = train(*s.train, *s.vocab, s.model, tc, outs);
  auto examples = prepare_examples(*s.heldout, *s.vocab);
  auto items = build_cloze_set(examples, s.cloze_per_category, s.eval_seed);
  ArmResult arm;
  arm.mode = mode;
  arm.cloze = run_cloze(items, examples, *s.vocab, model_mlm_scorer(tr.model));
  arm.cloze.seed = s.eval_seed;
  arm.cloze.checkpoint = dir ? (*dir / "checkpoint.bin").string() : std::string(to_string(mode));
  arm.itm = run_itm_eval(examples, s.heldout->images, model_itm_scorer(tr.model), 0.5, s.eval_seed);
  arm.metrics = std::move(tr.metrics);
  arm.policy = tr.policy;
  if (dir) {
    write_file_atomic(*dir / "cloze.json", arm.cloze.to_json().dump(2) + "\n");
    write_file_atomic(*dir / "itm.json", arm.itm.to_json().dump(2) + "\n");
  }
  return arm;
}

inline AblationResult run_ablation(const AblationSetup& s,
                                   const std::optional<std::filesystem::path>& dir = std::nullopt,
                                   std::function<void(AblationMode, const StepMetrics&)> on_log = {}) {
  AblationResult r;
  for (auto mode : {AblationMode::sgp, AblationMode::random_only}) {
    std::optional<std::filesystem::path> sub;
    if (dir) sub = *dir / std::string(to_string(mode));
    std::function<void(const StepMetrics&)> cb;
    if (on_log) cb = [&, mode](const StepMetrics& m) { on_log(mode, m); };
    r.arms[mode == AblationMode::sgp ? 0 : 1] = run_arm(s, mode, sub, cb);
  }
  if (dir) {
    write_file_atomic(*dir / "diff.json", r.diff().dump(2) + "\n");
    write_file_atomic(*dir / "cloze_table.txt", r.table());
  }
  return r;
}

}  // namespace sgvl
