#include <gtest/gtest.h>

#include <sstream>

#include "hwbd/analysis.hpp"
#include "hwbd/defense.hpp"
#include "fixtures.hpp"

using namespace hwbd;
using fixtures::backdoors;
using fixtures::baseline;

namespace {

bool bits_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (float_to_bits(a[i]) != float_to_bits(b[i])) return false;
  }
  return true;
}

}  // namespace

TEST(Fixture, CorpusIsLargeEnough) { ASSERT_GE(backdoors().size(), 8u); }

// Patching --------------------------------------------------------------------------------

TEST(Patching, EndpointsAreThePureProfiles) {
  for (const Backdoor& b : backdoors()) {
    const Tensor pure_h2 = forward(b.model, b.input, *b.h2);
    const Tensor pure_h1 = forward(b.model, b.input, *b.h1);
    EXPECT_TRUE(bits_equal(patched_forward(b.model, b.input, *b.h1, *b.h2, 0), pure_h2));
    EXPECT_TRUE(bits_equal(patched_forward(b.model, b.input, *b.h1, *b.h2, b.model.depth()), pure_h1));
    EXPECT_THROW(patched_forward(b.model, b.input, *b.h1, *b.h2, b.model.depth() + 1), Error);
  }
}

TEST(Patching, TraceEndpointsHaveOppositeSigns) {
  for (const Backdoor& b : backdoors()) {
    const PatchTrace t = build_trace(b.model, b.input, *b.h1, *b.h2, b.id, 0);
    ASSERT_EQ(t.deltas.size(), b.model.depth() + 1);
    // Pure h1 prefers a, pure h2 prefers b.
    EXPECT_GT(t.deltas.back(), 0.0);
    EXPECT_LT(t.deltas.front(), 0.0);
    EXPECT_GE(t.sign_changes(), 1u);
    EXPECT_EQ(t.pair(), std::string(b.h1->name) + "->" + b.h2->name);
  }
}

TEST(Patching, SplitDecisionNeedsDifferentPredictions) {
  const auto& b = baseline();
  const Tensor x = b.data.test.item(0);
  EXPECT_THROW(split_decision(b.model, x, b.reg.get("seq-f32"), b.reg.get("seq-f32")), Error);
  // A bit-identical pair still has a class trace, and it is flat.
  const PatchTrace t = class_trace(b.model, x, b.reg.get("blocked16-fma"), b.reg.get("blocked16-fma-mig"), 0, 1);
  for (double d : t.deltas) EXPECT_EQ(d, t.deltas.front());
  EXPECT_EQ(t.sign_changes(), 0u);
}

TEST(Patching, NormalizationAndSignChanges) {
  PatchTrace t;
  t.deltas = {-2.0, 1.0, 0.0, 4.0, -1.0};
  EXPECT_EQ(t.normalized(), (std::vector<double>{-0.5, 0.25, 0.0, 1.0, -0.25}));
  EXPECT_EQ(t.sign_changes(), 2u);  // zero counts as non-negative
  t.deltas = {0.0, 0.0};
  EXPECT_EQ(t.normalized(), (std::vector<double>{0.0, 0.0}));
}

TEST(Patching, AggregateSumsAbsoluteStepsAndValidates) {
  PatchTrace a, b;
  a.deltas = {-1.0, 1.0, 3.0};
  b.deltas = {-2.0, -2.0, 2.0};
  const std::vector<PatchTrace> both{a, b};
  EXPECT_DOUBLE_EQ(aggregate_delta(both, 1), 2.0);
  EXPECT_DOUBLE_EQ(aggregate_delta(both, 2), 6.0);
  EXPECT_DOUBLE_EQ(aggregate_delta_normalized(both, 2), 2.0 / 3.0 + 2.0);
  EXPECT_EQ(aggregate_profile(both), (std::vector<double>{2.0, 6.0}));
  EXPECT_THROW(aggregate_delta(std::vector<PatchTrace>{}, 1), Error);
  EXPECT_THROW(aggregate_delta(both, 0), Error);
  EXPECT_THROW(aggregate_delta(both, 3), Error);
  PatchTrace shorter;
  shorter.deltas = {1.0, 2.0};
  EXPECT_THROW(aggregate_delta(std::vector<PatchTrace>{a, shorter}, 1), Error);
}

TEST(Patching, CsvHasOneRowPerPatchPoint) {
  PatchTrace t;
  t.model_id = "m";
  t.h1 = "x";
  t.h2 = "y";
  t.target_id = 7;
  t.deltas = {-0.5, 0.25};
  std::ostringstream out;
  write_traces_csv(out, std::vector<PatchTrace>{t});
  EXPECT_EQ(out.str(),
            "model_id,pair,target_id,i,delta,delta_normalized\n"
            "m,x->y,7,0,-0.5,-1\n"
            "m,x->y,7,1,0.25,0.5\n");
}

// Input perturbation ----------------------------------------------------------------------

TEST(Perturbation, StaysWithinBoundAndPinsOneElement) {
  std::mt19937_64 rng(1);
  Tensor x({50});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(i) * 0.37f - 9.0f;
  x[3] = 0.0f;
  for (std::int64_t d : {1, 3, 20}) {
    const Tensor p = perturb_ulps(x, d, rng);
    std::size_t at_bound = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const auto dist = std::llabs(ulp_distance(x[i], p[i]));
      EXPECT_LE(dist, d);
      at_bound += dist == d;
    }
    EXPECT_GE(at_bound, 1u);
  }
  EXPECT_TRUE(bits_equal(perturb_ulps(x, 0, rng), x));
}

TEST(Perturbation, ZeroMagnitudeReproducesUndefendedRate) {
  const auto& corpus = backdoors();
  const std::vector<std::int64_t> ulps{0, 1};
  const DefenseReport r = defend_input_perturbation(corpus, ulps, 3, 9);
  EXPECT_DOUBLE_EQ(r.undefended_rate, 1.0);
  EXPECT_DOUBLE_EQ(r.at("0").rate(), 1.0);
  EXPECT_LT(r.at("1").rate(), 1.0);
  EXPECT_THROW(r.at("5"), Error);
  const std::vector<std::int64_t> negative{-1};
  EXPECT_THROW(defend_input_perturbation(corpus, negative, 3, 9), ConfigError);
  EXPECT_THROW(defend_input_perturbation(corpus, ulps, 0, 9), ConfigError);
}

// Batch size ------------------------------------------------------------------------------

TEST(BatchSize, RowTiledProfilesIgnoreTheBatch) {
  for (const Backdoor& b : backdoors()) {
    for (std::size_t k : {1u, 2u, 8u}) EXPECT_DOUBLE_EQ(batch_split_rate(b, k), 1.0);
  }
  EXPECT_THROW(batch_split_rate(backdoors().front(), 0), ConfigError);
}

TEST(BatchSize, InterleavedProfilesDependOnTheBatch) {
  // A backdoor between two interleaved profiles only exists at batch size one; larger
  // batches reshuffle both reduction orders.
  const auto& b = baseline();
  const AttackContext ctx = b.context("blocked16-fma", {"blocked32-fma"});
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    AttackConfig c;
    c.seed = seed;
    c.layer_mask = std::set<std::size_t>{0};
    const TargetSet t = b.targets(1, 2000 + seed, "blocked16-fma");
    BackdoorResult r = run_attack(b.model, t, c, ctx);
    if (!r.success) continue;
    const Backdoor bd{"i", std::move(r.model), t.inputs.reshaped(b.model.input_shape), t.sources[0], ctx.h1,
                      ctx.h2[0]};
    EXPECT_DOUBLE_EQ(batch_split_rate(bd, 1), 1.0);
    EXPECT_LT(batch_split_rate(bd, 4), 1.0);
    return;
  }
  GTEST_SKIP() << "no interleaved backdoor found";
}

// Downcast --------------------------------------------------------------------------------

TEST(Downcast, RepresentableModelsAreUnchanged) {
  Model m = baseline().model;
  auto theta = m.flatten();
  for (auto& v : theta) v = round_to_bf16(v);
  m.unflatten(theta);
  EXPECT_TRUE(downcast(m, Precision::BF16).bit_equal(m));
  EXPECT_TRUE(downcast(m, Precision::F32).bit_equal(m));
  EXPECT_EQ(parse_precision("f16"), Precision::F16);
  EXPECT_THROW(parse_precision("f8"), ConfigError);
}

TEST(Downcast, Float16OverflowIsReported) {
  Model m = baseline().model;
  auto theta = m.flatten();
  theta[5] = 1e6f;
  theta[9] = -7e4f;
  m.unflatten(theta);
  std::vector<std::size_t> overflowed;
  const Model d = downcast(m, Precision::F16, &overflowed);
  EXPECT_EQ(overflowed, (std::vector<std::size_t>{5, 9}));
  EXPECT_EQ(d.flatten()[9], -std::numeric_limits<float>::infinity());
  Backdoor bd = backdoors().front();
  bd.model = m;
  const std::vector<Precision> formats{Precision::F16};
  const DefenseReport r = defend_downcast(std::vector<Backdoor>{bd}, formats);
  ASSERT_EQ(r.overflows.size(), 2u);
  EXPECT_EQ(report_json(r)["overflows"][0]["parameter"], 5);
}

// Fine-tuning -----------------------------------------------------------------------------

TEST(Finetune, ZeroLearningRateIsIdentity) {
  const auto& b = baseline();
  FinetuneConfig c;
  c.lr = 0.0;
  EXPECT_TRUE(finetune(b.model, b.data.train, 5, c, b.reg.canonical(), 1).bit_equal(b.model));
  c.lr = 1e-3;
  EXPECT_FALSE(finetune(b.model, b.data.train, 5, c, b.reg.canonical(), 1).bit_equal(b.model));
}

TEST(Finetune, StepsCanBeTakenInParts) {
  const auto& b = baseline();
  const FinetuneConfig c;
  Finetuner f(b.model, b.data.train, c, b.reg.canonical(), 4);
  f.run(3);
  f.run(4);
  EXPECT_EQ(f.steps_taken(), 7u);
  EXPECT_TRUE(f.model().bit_equal(finetune(b.model, b.data.train, 7, c, b.reg.canonical(), 4)));
}

TEST(Finetune, ZeroStepsKeepEveryBackdoor) {
  const auto& b = baseline();
  const std::vector<std::size_t> steps{10, 0};
  const DefenseReport r = defend_finetune(backdoors(), b.data.train, steps, FinetuneConfig{}, b.reg.canonical(), 2);
  EXPECT_DOUBLE_EQ(r.at("0").rate(), 1.0);
  EXPECT_EQ(r.points[0].value, "10");  // points keep the requested order
  EXPECT_EQ(r.points[0].trials, 2u);
  EXPECT_THROW(defend_finetune(backdoors(), b.data.train, steps, FinetuneConfig{}, b.reg.canonical(), 0),
               ConfigError);
}

// Reports ---------------------------------------------------------------------------------

TEST(Report, CsvAndJson) {
  DefenseReport r;
  r.defense = "batch-size";
  r.backdoor_ids = {"a", "b"};
  r.undefended_rate = 1.0;
  r.points.push_back({"4", {1.0, 0.25}, 1});
  std::ostringstream out;
  write_report_csv(out, r);
  EXPECT_EQ(out.str(),
            "defense,sweep_value,backdoor_id,outcome,trials\n"
            "batch-size,4,a,1,1\n"
            "batch-size,4,b,0.25,1\n");
  const auto j = report_json(r);
  EXPECT_EQ(j["corpus_size"], 2);
  EXPECT_DOUBLE_EQ(j["points"][0]["rate"].get<double>(), 0.625);
  EXPECT_FALSE(j.contains("overflows"));
}
