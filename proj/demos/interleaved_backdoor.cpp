// End to end in one process: train a small MLP, plant a backdoor that only fires on one of
// two interleaved (batch-dependent) backends, then trace where the decision flips and how
// it behaves at larger batch sizes.

#include <cstdio>
#include <set>

#include "hwbd/analysis.hpp"
#include "hwbd/defense.hpp"
#include "hwbd/experiment.hpp"

int main() {
  using namespace hwbd;
  ExperimentConfig config;
  const ProfileRegistry reg = config.registry();
  const Dataset data = make_dataset(config);
  TrainConfig tc = config.train;
  tc.seed = config.train_seed();
  const TrainedModel trained = train_baseline(config.initial_model(), data, tc, reg.canonical());
  std::printf("baseline test accuracy %.3f\n", trained.test_accuracy);

  AttackContext ctx;
  ctx.h1 = &reg.get("blocked16-fma");
  ctx.h2 = {&reg.get("blocked32-fma")};
  ctx.canonical = &reg.canonical();
  ctx.validation = &data.test;
  ctx.baseline_accuracy = accuracy(trained.model, data.test, *ctx.h1);

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    AttackConfig ac;
    ac.seed = seed;
    ac.layer_mask = std::set<std::size_t>{0};
    const auto ids = sample_targets(trained.model, data.train, 1, *ctx.h1, seed);
    const Split s = data.train.subset(ids);
    const TargetSet targets{s.inputs, s.labels};
    BackdoorResult r = run_attack(trained.model, targets, ac, ctx);
    if (!r.success) continue;

    const Backdoor b{"demo", std::move(r.model), targets.inputs.reshaped(trained.model.input_shape),
                     targets.sources[0], ctx.h1, ctx.h2[0]};
    std::printf("seed %llu: %s predicts %zu, %s predicts %zu (retained accuracy %.3f)\n",
                static_cast<unsigned long long>(seed), ctx.h1->name.c_str(), predict(b.model, b.input, *ctx.h1),
                ctx.h2[0]->name.c_str(), predict(b.model, b.input, *ctx.h2[0]), r.retained_accuracy);

    const PatchTrace t = build_trace(b.model, b.input, *b.h1, *b.h2, b.id, 0);
    std::printf("patch trace (logit a - logit b after running layers < i on %s):\n", b.h1->name.c_str());
    for (std::size_t i = 0; i < t.deltas.size(); ++i) std::printf("  i=%zu  %+.3e\n", i, t.deltas[i]);

    std::printf("fraction of batch positions that still split:\n");
    for (std::size_t k : {1u, 2u, 4u, 8u, 16u}) std::printf("  batch %-3zu %.3f\n", k, batch_split_rate(b, k));
    return 0;
  }
  std::printf("no backdoor found in 20 seeds\n");
  return 1;
}
