#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "hwbd/experiment.hpp"

using namespace hwbd;
namespace fs = std::filesystem;

// Config ----------------------------------------------------------------------------------

TEST(Config, JsonRoundTrip) {
  ExperimentConfig c;
  c.seed = 77;
  c.model = ModelArch::Cnn;
  c.runs = 9;
  c.layers = parse_layer_selection("0,2");
  c.attack.variant = AttackVariant::Perm;
  c.defense.ulps = {0, 2};
  BackendProfile extra = ProfileRegistry().get("seq-f32");
  extra.name = "seq-f32-copy";
  c.profiles.push_back(extra);
  const ExperimentConfig back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
  EXPECT_EQ(back.layers.layers, (std::set<std::size_t>{0, 2}));
  EXPECT_NO_THROW(back.registry().get("seq-f32-copy"));
}

TEST(Config, UnknownKeysAndBadValuesAreRejected) {
  EXPECT_THROW(config_from_json(Json{{"sed", 1}}), ConfigError);
  EXPECT_THROW(config_from_json(Json{{"attack", {{"rhoo", 0.5}}}}), ConfigError);
  EXPECT_THROW(config_from_json(Json{{"runs", "many"}}), ConfigError);
  EXPECT_THROW(config_from_json(Json{{"defense", {{"trials", 0}}}}), ConfigError);
  EXPECT_THROW(config_from_json(Json::array()), ConfigError);
  EXPECT_NO_THROW(config_from_json(Json::object()));
}

TEST(Config, LayerSelection) {
  const Model mlp = ExperimentConfig{}.initial_model();
  EXPECT_EQ(parse_layer_selection("factored").resolve(mlp), (std::set<std::size_t>{0}));
  EXPECT_FALSE(parse_layer_selection("all").resolve(mlp).has_value());
  EXPECT_EQ(parse_layer_selection("4,0").resolve(mlp), (std::set<std::size_t>{0, 4}));
  EXPECT_THROW(parse_layer_selection("1,x"), ConfigError);
  EXPECT_THROW(parse_layer_selection(""), ConfigError);
  EXPECT_THROW(parse_layer_selection("-1"), ConfigError);
  ExperimentConfig c;
  c.model = ModelArch::Cnn;
  EXPECT_EQ(parse_layer_selection("factored").resolve(c.initial_model()), (std::set<std::size_t>{4}));
}

TEST(Config, HashIgnoresWhereAndHowFast) {
  ExperimentConfig a, b;
  b.out = "elsewhere";
  b.workers = 8;
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.seed = 2;
  EXPECT_NE(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
}

TEST(Config, SubSeedsAreDistinct) {
  const ExperimentConfig c;
  const std::set<std::uint64_t> seeds{c.data_seed(), c.init_seed(), c.train_seed(), c.run_seed(0), c.run_seed(1),
                                      c.defense_seed()};
  EXPECT_EQ(seeds.size(), 6u);
}

// Worker pool -----------------------------------------------------------------------------

TEST(Pool, ResultsKeepTheirIndexAndErrorsAreCaptured) {
  for (std::size_t workers : {1u, 3u, 16u}) {
    std::vector<std::string> errors;
    const auto r = run_pool<int>(20, workers, [](std::size_t i) {
      if (i == 7) throw NumericError("boom");
      return static_cast<int>(i * i);
    }, errors);
    ASSERT_EQ(r.size(), 20u);
    for (std::size_t i = 0; i < 20; ++i) {
      if (i == 7) {
        EXPECT_EQ(errors[i], "boom");
      } else {
        EXPECT_EQ(r[i], static_cast<int>(i * i));
        EXPECT_TRUE(errors[i].empty());
      }
    }
  }
}

// Output directory ------------------------------------------------------------------------

TEST(Output, MissingArtifactsNameTheirProducer) {
  const fs::path dir = fs::temp_directory_path() / "hwbd-test-out";
  fs::remove_all(dir);
  const OutputDir out(dir);
  EXPECT_TRUE(fs::is_directory(dir));
  try {
    out.read_json("attack.json", "attack");
    FAIL() << "expected MissingPrerequisite";
  } catch (const MissingPrerequisite& e) {
    EXPECT_NE(std::string(e.what()).find("run 'attack' first"), std::string::npos);
  }
  out.write("sub/x.txt", "hello");
  std::ifstream in(dir / "sub/x.txt");
  std::string text;
  std::getline(in, text);
  EXPECT_EQ(text, "hello");
  fs::remove_all(dir);
  std::ofstream(dir) << "a file, not a directory";
  EXPECT_THROW(OutputDir{dir}, IoError);
  fs::remove(dir);
}

// Command line ----------------------------------------------------------------------------

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(HWBD_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Cli, ExitCodes) {
  const fs::path dir = fs::temp_directory_path() / "hwbd-test-cli";
  fs::remove_all(dir);
  EXPECT_EQ(run_cli("demo-frobenius"), 0);
  EXPECT_EQ(run_cli("demo-frobenius -o " + dir.string()), 0);
  EXPECT_TRUE(fs::exists(dir / "frobenius.csv"));
  EXPECT_EQ(run_cli("demo-frobenius --no-such-option"), 2);
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("attack --mode both -o " + dir.string()), 2);
  EXPECT_EQ(run_cli("demo-frobenius --profile no-such-profile"), 2);
  EXPECT_EQ(run_cli("attack -o " + dir.string()), 3);
  EXPECT_EQ(run_cli("report -o " + (dir / "empty").string()), 3);
  const fs::path blocker = dir / "blocker";
  std::ofstream(blocker) << "x";
  EXPECT_EQ(run_cli("train -o " + (blocker / "out").string()), 4);
  const fs::path bad = dir / "bad.json";
  std::ofstream(bad) << R"({"seed": 1, "unknown": true})";
  EXPECT_EQ(run_cli("train -c " + bad.string() + " -o " + dir.string()), 2);
  EXPECT_EQ(run_cli("train -c " + (dir / "missing.json").string()), 2);
  fs::remove_all(dir);
}
