#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "hwbd/attack.hpp"
#include "hwbd/checkpoint.hpp"
#include "hwbd/engine.hpp"
#include "oracle.hpp"

using namespace hwbd;

namespace {

Model small_mlp(std::uint64_t seed = 1) { return make_mlp({6, 5, 4, 3}, seed); }

Model small_cnn(std::uint64_t seed = 1, bool pool = false) {
  return make_cnn({1, 6, 6, 3, 3, 4, 3, pool}, seed);
}

Tensor random_input(const Model& m, std::mt19937_64& rng, std::size_t batch = 1) {
  std::normal_distribution<float> gauss(0.0f, 1.0f);
  Shape s{batch};
  s.insert(s.end(), m.input_shape.begin(), m.input_shape.end());
  Tensor t(s);
  for (auto& v : t.storage()) v = gauss(rng);
  return t;
}

std::vector<double> as_double(const std::vector<float>& v) { return {v.begin(), v.end()}; }

}  // namespace

TEST(Tensor, ShapeChecks) {
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>(3)), ShapeError);
  const Tensor t({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.at(1, 2), 6.0f);
  EXPECT_THROW(t.reshaped({4, 2}), ShapeError);
  EXPECT_EQ(t.slice_rows(1, 1).storage(), (std::vector<float>{4, 5, 6}));
  EXPECT_THROW(t.slice_rows(1, 2), ShapeError);
  EXPECT_FALSE(Tensor({1}, -0.0f).bit_equal(Tensor({1}, 0.0f)));
}

TEST(Model, FlattenRoundTripsAndValidates) {
  Model m = small_mlp();
  auto flat = m.flatten();
  ASSERT_EQ(flat.size(), m.parameter_count());
  for (auto& v : flat) v *= 2.0f;
  m.unflatten(flat);
  EXPECT_EQ(m.flatten(), flat);
  EXPECT_THROW(m.unflatten(std::vector<float>(3)), ShapeError);
  const auto offsets = m.layer_offsets();
  EXPECT_EQ(offsets.front(), 0u);
  EXPECT_EQ(offsets.back(), m.parameter_count());
  m.num_classes = 7;
  EXPECT_THROW(m.validate(), ShapeError);
}

TEST(Forward, ShapesAndSingleInputPromotion) {
  std::mt19937_64 rng(2);
  const ProfileRegistry reg;
  for (const Model& m : {small_mlp(), small_cnn(), small_cnn(1, true)}) {
    const Tensor batch = random_input(m, rng, 5);
    const Tensor y = forward(m, batch, reg.get("seq-f32"));
    EXPECT_EQ(y.shape(), (Shape{5, 3}));
    const Tensor one = batch.slice_rows(2, 1).reshaped(m.input_shape);
    const Tensor y1 = forward(m, one, reg.get("seq-f32"));
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(float_to_bits(y1.at(0, c)), float_to_bits(y.at(2, c)));
  }
  const Model m = small_mlp();
  EXPECT_THROW(forward(m, Tensor({7}), reg.get("seq-f32")), ShapeError);
}

TEST(Forward, MatchesDoubleOracleClosely) {
  std::mt19937_64 rng(3);
  const ProfileRegistry reg;
  for (const Model& m : {small_mlp(4), small_cnn(4), small_cnn(5, true)}) {
    const Tensor x = random_input(m, rng);
    const Tensor y = forward(m, x, reg.canonical());
    const auto want = oracle::forward_f64(m, as_double(m.flatten()), x.storage()).logits;
    for (std::size_t c = 0; c < want.size(); ++c) EXPECT_NEAR(y.at(0, c), want[c], 1e-5 * (1.0 + std::abs(want[c])));
  }
}

TEST(Forward, JointBatchOnlyMattersForInterleavedProfiles) {
  std::mt19937_64 rng(4);
  const ProfileRegistry reg;
  const Model m = make_mlp({40, 20, 20, 3}, 9);
  const Tensor x = random_input(m, rng);
  Tensor batch({4, 40});
  for (std::size_t i = 0; i < 4; ++i) std::copy(x.storage().begin(), x.storage().end(), batch.data() + i * 40);
  const Tensor alone = forward(m, x, reg.get("seq-f32"));
  const Tensor joint = forward(m, batch, reg.get("seq-f32"), {true});
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(float_to_bits(joint.at(i, c)), float_to_bits(alone.at(0, c)));
  }
  // Interleaved: batch items take different reduction orders.
  const Tensor inter = forward(m, batch, reg.get("blocked16-fma"), {true});
  bool any_difference = false;
  for (std::size_t i = 1; i < 4; ++i) {
    for (std::size_t c = 0; c < 3; ++c) any_difference |= float_to_bits(inter.at(i, c)) != float_to_bits(inter.at(0, c));
  }
  EXPECT_TRUE(any_difference);
}

TEST(Forward, OverflowBecomesNumericErrorWithLayerIndex) {
  const ProfileRegistry reg;
  Model m = small_mlp();
  auto flat = m.flatten();
  for (auto& v : flat) v = 1e30f;
  m.unflatten(flat);
  try {
    forward(m, Tensor({6}, 1e10f), reg.get("seq-f32"));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 0"), std::string::npos);
  }
}

TEST(Predict, TiesResolveToLowestIndex) {
  const std::vector<float> y{1.0f, 3.0f, 3.0f};
  EXPECT_EQ(argmax(y), 1u);
  EXPECT_TRUE(top_two_tied(y));
  EXPECT_FALSE(top_two_tied(std::vector<float>{1.0f, 3.0f, 2.0f}));
}

// Gradients ------------------------------------------------------------------------------

TEST(Backward, CrossEntropyGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const ProfileRegistry reg;
  for (const Model& m : {small_mlp(6), small_cnn(6), small_cnn(7, true)}) {
    const Tensor x = random_input(m, rng, 3);
    const std::vector<std::size_t> labels{0, 1, 2};
    const Tape tape = record_forward(m, x, reg.canonical());
    const CrossEntropy ce = softmax_cross_entropy(tape.logits, labels);
    const auto grad = backward(m, tape, ce.dlogits, reg.canonical());
    auto loss = [&](const std::vector<double>& theta) {
      double total = 0.0;
      for (std::size_t i = 0; i < 3; ++i) {
        const Tensor xi = x.slice_rows(i, 1).reshaped(m.input_shape);
        const auto y = oracle::forward_f64(m, theta, xi.storage()).logits;
        double mx = *std::max_element(y.begin(), y.end()), z = 0.0;
        for (double v : y) z += std::exp(v - mx);
        total += std::log(z) + mx - y[labels[i]];
      }
      return total / 3.0;
    };
    auto theta = as_double(m.flatten());
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double keep = theta[i];
      theta[i] = keep + 1e-6;
      const double up = loss(theta);
      theta[i] = keep - 1e-6;
      const double down = loss(theta);
      theta[i] = keep;
      const double fd = (up - down) / 2e-6;
      diff = std::max(diff, std::abs(fd - grad[i]));
      scale = std::max(scale, std::abs(fd));
    }
    EXPECT_LT(diff / scale, 1e-3);  // ReLU kinks are not avoided here, hence the looser bound
  }
}

TEST(Backward, RejectsMismatchedUpstreamGradient) {
  const ProfileRegistry reg;
  const Model m = small_mlp();
  const Tape tape = record_forward(m, Tensor({6}, 0.5f), reg.canonical());
  EXPECT_THROW(backward(m, tape, Tensor({2, 3}), reg.canonical()), ShapeError);
}

// Checkpoints ----------------------------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitExact) {
  for (const Model& m : {small_mlp(8), small_cnn(8), small_cnn(9, true)}) {
    Model noisy = m;
    auto flat = noisy.flatten();
    flat[0] = -0.0f;
    flat[1] = std::numeric_limits<float>::denorm_min();
    noisy.unflatten(flat);
    const Model back = deserialize_checkpoint(serialize_checkpoint(noisy));
    EXPECT_TRUE(back.bit_equal(noisy));
  }
  const auto path = std::filesystem::temp_directory_path() / "hwbd-test.ckpt";
  save_checkpoint(small_cnn(), path);
  EXPECT_TRUE(load_checkpoint(path).bit_equal(small_cnn()));
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptInputIsRejected) {
  const std::string good = serialize_checkpoint(small_mlp());
  EXPECT_THROW(deserialize_checkpoint("garbage"), IoError);
  EXPECT_THROW(deserialize_checkpoint(good.substr(0, good.size() - 1)), IoError);
  std::string wrong_version = good;
  wrong_version.replace(wrong_version.find(" 1\n"), 3, " 2\n");
  EXPECT_THROW(deserialize_checkpoint(wrong_version), IoError);
  EXPECT_THROW(load_checkpoint("/nonexistent/model.ckpt"), IoError);
}
