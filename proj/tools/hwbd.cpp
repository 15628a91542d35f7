// hwbd: command-line driver for the hardware-triggered backdoor lab.
//
// Exit codes: 0 success, 1 unexpected error, 2 invalid configuration, 3 missing
// prerequisite artifact, 4 output not writable, 5 some runs failed (listed on stderr).

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "hwbd/experiment.hpp"

namespace {

enum Exit { kOk = 0, kUnexpected = 1, kConfig = 2, kMissing = 3, kUnwritable = 4, kPartial = 5 };

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> runs;
  std::optional<std::size_t> workers;
  std::optional<std::size_t> targets;
  std::optional<std::string> mode;
  std::optional<std::string> variant;
  std::optional<std::string> layer_mask;
  std::optional<std::string> model;
  std::vector<std::string> profiles;
};

hwbd::ExperimentConfig resolve(const Overrides& o) {
  hwbd::ExperimentConfig c = o.config.empty() ? hwbd::ExperimentConfig{} : hwbd::load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.out = *o.out;
  if (o.runs) c.runs = *o.runs;
  if (o.workers) c.workers = *o.workers;
  if (o.targets) c.targets = *o.targets;
  if (o.mode) c.attack.mode = hwbd::parse_mode(*o.mode);
  if (o.variant) c.attack.variant = hwbd::parse_variant(*o.variant);
  if (o.layer_mask) c.layers = hwbd::parse_layer_selection(*o.layer_mask);
  if (o.model) c.model = hwbd::parse_arch(*o.model);
  if (!o.profiles.empty()) c.frobenius.profiles = o.profiles;
  c.validate();
  return c;
}

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("-c,--config", o.config, "JSON experiment config");
  cmd->add_option("--seed", o.seed, "master seed");
  cmd->add_option("-o,--out", o.out, "output directory");
  cmd->add_option("--workers", o.workers, "worker threads for independent runs");
  cmd->add_option("--model", o.model, "mlp | cnn");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hardware-triggered backdoor lab on simulated backends"};
  app.require_subcommand(1);
  Overrides o;

  auto* frob = app.add_subcommand("demo-frobenius", "trace(M^T M) under each backend profile");
  add_common(frob, o);
  frob->add_option("--profile", o.profiles, "profile to include (repeatable; default: config list)");

  auto* train = app.add_subcommand("train", "train the clean baseline model");
  add_common(train, o);

  auto* attack = app.add_subcommand("attack", "construct backdoors against the trained model");
  add_common(attack, o);
  attack->add_option("--runs", o.runs, "number of seeded attack runs");
  attack->add_option("--targets", o.targets, "targets per run");
  attack->add_option("--mode", o.mode, "pairwise | one-vs-rest");
  attack->add_option("--variant", o.variant, "base | perm | flip | full");
  attack->add_option("--layer-mask", o.layer_mask, "layers the attack may modify: all | factored | comma-separated indices");

  auto* patch = app.add_subcommand("patch", "cross-backend activation patching of every backdoor");
  add_common(patch, o);

  auto* defend = app.add_subcommand("defend", "evaluate the countermeasures on the backdoor corpus");
  add_common(defend, o);

  auto* report = app.add_subcommand("report", "summarize the results in the output directory");
  add_common(report, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    const hwbd::ExperimentConfig c = resolve(o);
    if (frob->parsed()) {
      std::optional<hwbd::OutputDir> out;
      if (o.out) out.emplace(c.out);
      hwbd::cmd_demo_frobenius(c, std::cout, out ? &*out : nullptr);
      return kOk;
    }
    if (report->parsed()) {
      std::cout << hwbd::cmd_report(hwbd::OutputDir(c.out, false));
      return kOk;
    }
    const hwbd::OutputDir out(c.out);
    if (train->parsed()) hwbd::cmd_train(c, out, std::cout);
    if (attack->parsed()) hwbd::cmd_attack(c, out, std::cout);
    if (patch->parsed()) hwbd::cmd_patch(c, out, std::cout);
    if (defend->parsed()) hwbd::cmd_defend(c, out, std::cout);
    return kOk;
  } catch (const hwbd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const hwbd::MissingPrerequisite& e) {
    std::cerr << "missing prerequisite: " << e.what() << "\n";
    return kMissing;
  } catch (const hwbd::IoError& e) {
    std::cerr << "output error: " << e.what() << "\n";
    return kUnwritable;
  } catch (const hwbd::PartialFailure& e) {
    std::cerr << "partial failure: " << e.what() << "\n";
    return kPartial;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUnexpected;
  }
}
