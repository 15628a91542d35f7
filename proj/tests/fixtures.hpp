// Shared fixtures: a trained MLP baseline and a small backdoor corpus built from it.
#pragma once

#include <set>
#include <string>
#include <vector>

#include "hwbd/experiment.hpp"

namespace fixtures {

using namespace hwbd;

/// One trained MLP baseline shared by the attack tests.
struct Baseline {
  ExperimentConfig config;
  ProfileRegistry reg;
  Dataset data;
  Model model;
  double accuracy = 0.0;

  Baseline() {
    config.seed = 3;
    data = make_dataset(config);
    TrainConfig tc = config.train;
    tc.seed = config.train_seed();
    const auto trained = train_baseline(config.initial_model(), data, tc, reg.canonical());
    model = trained.model;
    accuracy = trained.test_accuracy;
  }

  AttackContext context(const std::string& h1, const std::vector<std::string>& h2) const {
    AttackContext ctx;
    ctx.h1 = &reg.get(h1);
    for (const auto& h : h2) ctx.h2.push_back(&reg.get(h));
    ctx.canonical = &reg.canonical();
    ctx.validation = &data.test;
    ctx.baseline_accuracy = hwbd::accuracy(model, data.test, *ctx.h1);
    return ctx;
  }

  TargetSet targets(std::size_t count, std::uint64_t seed, const std::string& h1 = "seq-f32") const {
    const auto ids = sample_targets(model, data.train, count, reg.get(h1), seed);
    const Split s = data.train.subset(ids);
    return {s.inputs, s.labels};
  }
};

inline const Baseline& baseline() {
  static const Baseline b;
  return b;
}

/// Successful single-target backdoors on the shared baseline (seq-f32 vs pairwise-f32),
/// built once.
inline const std::vector<Backdoor>& backdoors() {
  static const std::vector<Backdoor> corpus = [] {
    const Baseline& b = baseline();
    const AttackContext ctx = b.context("seq-f32", {"pairwise-f32"});
    std::vector<Backdoor> out;
    for (std::uint64_t seed = 0; out.size() < 12 && seed < 40; ++seed) {
      AttackConfig c;
      c.seed = seed;
      c.layer_mask = std::set<std::size_t>{0};
      const TargetSet t = b.targets(1, 1000 + seed);
      BackdoorResult r = run_attack(b.model, t, c, ctx);
      if (!r.success) continue;
      out.push_back({"bd" + std::to_string(seed), std::move(r.model), t.inputs.reshaped(b.model.input_shape),
                     t.sources[0], ctx.h1, ctx.h2[0]});
    }
    return out;
  }();
  return corpus;
}



}  // namespace fixtures
