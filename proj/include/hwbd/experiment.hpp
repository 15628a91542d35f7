#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "hwbd/analysis.hpp"
#include "hwbd/attack.hpp"
#include "hwbd/checkpoint.hpp"
#include "hwbd/data.hpp"
#include "hwbd/defense.hpp"
#include "hwbd/engine.hpp"
#include "hwbd/profile.hpp"

namespace hwbd {

using Json = nlohmann::ordered_json;

/// A command could not run because an artifact it depends on is absent.
class MissingPrerequisite : public Error {
 public:
  using Error::Error;
};

/// Some independent runs failed; the rest completed and were written.
class PartialFailure : public Error {
 public:
  using Error::Error;
};

enum class ModelArch { Mlp, Cnn };

inline std::string_view to_string(ModelArch a) { return a == ModelArch::Mlp ? "mlp" : "cnn"; }

inline ModelArch parse_arch(std::string_view s) {
  if (s == "mlp") return ModelArch::Mlp;
  if (s == "cnn") return ModelArch::Cnn;
  throw ConfigError("unknown model '" + std::string(s) + "' (expected mlp|cnn)");
}

struct FrobeniusConfig {
  std::size_t n = 100;
  float fill = 0.01f;
  std::vector<std::string> profiles{"reference-f64", "seq-f32", "pairwise-f32", "blocked16-fma", "blocked32-fma",
                                    "blocked8-f32"};
};

struct DefenseSweeps {
  std::vector<std::string> defenses{"input-perturbation", "batch-size", "downcast", "finetune"};
  std::vector<std::int64_t> ulps{0, 1, 10, 100, 1000, 10000, 100000};
  std::size_t trials = 10;
  std::vector<std::size_t> batch_sizes{1, 2, 4, 8};
  std::vector<Precision> formats{Precision::F32, Precision::BF16, Precision::F16};
  std::vector<std::size_t> finetune_steps{0, 1, 2, 3};
  std::size_t finetune_trials = 10;
  FinetuneConfig finetune;
};

/// Which layers the attack may modify: all, every FactoredLinear layer, or explicit indices.
struct LayerSelection {
  enum class Kind { All, Factored, Explicit } kind = Kind::Factored;
  std::set<std::size_t> layers;

  std::optional<std::set<std::size_t>> resolve(const Model& model) const {
    if (kind == Kind::All) return std::nullopt;
    if (kind == Kind::Explicit) {
      for (auto l : layers) {
        if (l >= model.depth()) throw ConfigError("layer mask index " + std::to_string(l) + " beyond model depth");
      }
      return layers;
    }
    std::set<std::size_t> out;
    for (std::size_t i = 0; i < model.depth(); ++i) {
      if (model.layers[i].kind == LayerKind::FactoredLinear) out.insert(i);
    }
    return out;
  }
};

inline LayerSelection parse_layer_selection(const std::string& text) {
  LayerSelection s;
  if (text == "all") {
    s.kind = LayerSelection::Kind::All;
  } else if (text == "factored") {
    s.kind = LayerSelection::Kind::Factored;
  } else {
    s.kind = LayerSelection::Kind::Explicit;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
      std::size_t used = 0;
      unsigned long v = 0;
      try {
        v = std::stoul(item, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != item.size() || !std::isdigit(static_cast<unsigned char>(item.front()))) {
        throw ConfigError("layer mask expects all, factored or comma-separated indices, got '" + text + "'");
      }
      s.layers.insert(v);
    }
    if (s.layers.empty()) throw ConfigError("layer mask is empty");
  }
  return s;
}

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string out = "hwbd-out";
  std::size_t workers = 1;
  ModelArch model = ModelArch::Mlp;
  MlpShape mlp;
  CnnShape cnn;
  DataConfig data;
  TrainConfig train;
  AttackConfig attack;  ///< its layer_mask is filled from `layers` for the model at hand
  LayerSelection layers;
  std::size_t runs = 50;
  std::size_t targets = 1;
  FrobeniusConfig frobenius;
  DefenseSweeps defense;
  std::vector<BackendProfile> profiles;  ///< added to (or replacing) the built-in profiles

  ProfileRegistry registry() const {
    ProfileRegistry r;
    for (const auto& p : profiles) r.add(p);
    return r;
  }

  /// Sub-run seeds, all derived from the master seed.
  std::uint64_t data_seed() const { return mix_seed(seed, 1); }
  std::uint64_t init_seed() const { return mix_seed(seed, 2); }
  std::uint64_t train_seed() const { return mix_seed(seed, 3); }
  std::uint64_t run_seed(std::size_t run) const { return mix_seed(seed, 4, run); }
  std::uint64_t defense_seed() const { return mix_seed(seed, 5); }

  DataConfig dataset() const {
    DataConfig d = data;
    d.seed = data_seed();
    d.kind = model == ModelArch::Mlp ? DataKind::Blobs : DataKind::Textures;
    return d;
  }

  Model initial_model() const {
    if (model == ModelArch::Mlp) {
      MlpShape s = mlp;
      s.inputs = data.dims;
      s.classes = data.num_classes;
      return make_mlp(s, init_seed());
    }
    CnnShape s = cnn;
    s.height = s.width = data.side;
    s.classes = data.num_classes;
    return make_cnn(s, init_seed());
  }

  void validate() const {
    const ProfileRegistry reg = registry();
    attack.validate();
    reg.get(attack.h1);
    for (const auto& h : attack.h2) reg.get(h);
    for (const auto& p : frobenius.profiles) reg.get(p);
    if (frobenius.n == 0) throw ConfigError("frobenius.n must be >= 1");
    if (targets == 0) throw ConfigError("targets must be >= 1");
    if (workers == 0) throw ConfigError("workers must be >= 1");
    if (data.num_classes < 2) throw ConfigError("data.num_classes must be >= 2");
    if (defense.trials == 0) throw ConfigError("defense.trials must be >= 1");
    if (defense.finetune_trials == 0) throw ConfigError("defense.finetune_trials must be >= 1");
    for (auto k : defense.batch_sizes) {
      if (k == 0) throw ConfigError("defense.batch_sizes entries must be >= 1");
    }
    for (auto d : defense.ulps) {
      if (d < 0) throw ConfigError("defense.ulps entries must be >= 0");
    }
    static const std::set<std::string> known{"input-perturbation", "batch-size", "downcast", "finetune"};
    for (const auto& d : defense.defenses) {
      if (!known.count(d)) throw ConfigError("unknown defense '" + d + "'");
    }
  }
};

// Config (de)serialization ----------------------------------------------------------------

namespace detail {

/// Reads keys from one JSON object and rejects any key it was not asked about.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename T>
  void read(const char* key, T& value) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      value = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const Json* object(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(where_ + ": unknown key '" + key + "'");
    }
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline std::string prefixed(const std::string& where, const char* key) {
  return where.empty() ? key : where + "." + key;
}

}  // namespace detail

inline Json to_json(const BackendProfile& p) {
  return {{"name", p.name},
          {"tree", to_string(p.tree)},
          {"block_size", p.block_size},
          {"fma", p.fma},
          {"accumulator", to_string(p.accumulator)},
          {"batch_tiling", to_string(p.batch_tiling)}};
}

inline BackendProfile profile_from_json(const Json& j) {
  detail::ObjectReader r(j, "profiles[]");
  BackendProfile p;
  std::string tree = "sequential", acc = "f32", tiling = "per-row";
  r.read("name", p.name);
  r.read("tree", tree);
  r.read("block_size", p.block_size);
  r.read("fma", p.fma);
  r.read("accumulator", acc);
  r.read("batch_tiling", tiling);
  r.finish();
  p.tree = parse_tree(tree);
  p.accumulator = parse_accumulator(acc);
  p.batch_tiling = parse_batch_tiling(tiling);
  p.validate();
  return p;
}

inline Json to_json(const ExperimentConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["out"] = c.out;
  j["workers"] = c.workers;
  j["model"] = to_string(c.model);
  j["mlp"] = {{"hidden", c.mlp.hidden}, {"factor", c.mlp.factor}};
  j["cnn"] = {{"conv1", c.cnn.conv1},
              {"conv2", c.cnn.conv2},
              {"factor", c.cnn.factor},
              {"global_pool", c.cnn.global_pool}};
  j["data"] = {{"num_classes", c.data.num_classes}, {"dims", c.data.dims},
               {"side", c.data.side},               {"per_class", c.data.per_class},
               {"test_per_class", c.data.test_per_class}, {"noise", c.data.noise},
               {"separation", c.data.separation}};
  j["train"] = {{"epochs", c.train.epochs},
                {"lr", c.train.lr},
                {"momentum", c.train.momentum},
                {"batch_size", c.train.batch_size}};
  const AttackConfig& a = c.attack;
  Json attack = {{"h1", a.h1},
                 {"h2", a.h2},
                 {"mode", to_string(a.mode)},
                 {"variant", to_string(a.variant)},
                 {"beta", a.beta},
                 {"gamma", a.gamma},
                 {"steps_per_iter", a.steps_per_iter},
                 {"lr", a.lr},
                 {"lr_decay", a.lr_decay},
                 {"reach_fraction", a.reach_fraction},
                 {"max_alpha_step", a.max_alpha_step},
                 {"alpha_interval", a.alpha_interval},
                 {"k_bits", a.k_bits},
                 {"m_perm", a.m_perm},
                 {"m_flip", a.m_flip},
                 {"rho", a.rho},
                 {"max_iters", a.max_iters},
                 {"alpha",
                  {{"initial", a.alpha.initial},
                   {"tau_high", a.alpha.tau_high},
                   {"tau_low", a.alpha.tau_low},
                   {"min", a.alpha.min},
                   {"max", a.alpha.max}}}};
  switch (c.layers.kind) {
    case LayerSelection::Kind::All: attack["layer_mask"] = "all"; break;
    case LayerSelection::Kind::Factored: attack["layer_mask"] = "factored"; break;
    case LayerSelection::Kind::Explicit:
      attack["layer_mask"] = std::vector<std::size_t>(c.layers.layers.begin(), c.layers.layers.end());
      break;
  }
  attack["runs"] = c.runs;
  attack["targets"] = c.targets;
  j["attack"] = std::move(attack);
  j["frobenius"] = {{"n", c.frobenius.n}, {"fill", c.frobenius.fill}, {"profiles", c.frobenius.profiles}};
  Json formats = Json::array();
  for (auto f : c.defense.formats) formats.push_back(to_string(f));
  j["defense"] = {{"defenses", c.defense.defenses},
                  {"ulps", c.defense.ulps},
                  {"trials", c.defense.trials},
                  {"batch_sizes", c.defense.batch_sizes},
                  {"formats", formats},
                  {"finetune_steps", c.defense.finetune_steps},
                  {"finetune_trials", c.defense.finetune_trials},
                  {"finetune",
                   {{"lr", c.defense.finetune.lr},
                    {"momentum", c.defense.finetune.momentum},
                    {"batch_size", c.defense.finetune.batch_size}}}};
  Json profiles = Json::array();
  for (const auto& p : c.profiles) profiles.push_back(to_json(p));
  j["profiles"] = std::move(profiles);
  return j;
}

inline ExperimentConfig config_from_json(const Json& j) {
  ExperimentConfig c;
  detail::ObjectReader r(j, "config");
  r.read("seed", c.seed);
  r.read("out", c.out);
  r.read("workers", c.workers);
  std::string model = "mlp";
  r.read("model", model);
  c.model = parse_arch(model);
  if (const Json* m = r.object("mlp")) {
    detail::ObjectReader o(*m, "mlp");
    o.read("hidden", c.mlp.hidden);
    o.read("factor", c.mlp.factor);
    o.finish();
  }
  if (const Json* m = r.object("cnn")) {
    detail::ObjectReader o(*m, "cnn");
    o.read("conv1", c.cnn.conv1);
    o.read("conv2", c.cnn.conv2);
    o.read("factor", c.cnn.factor);
    o.read("global_pool", c.cnn.global_pool);
    o.finish();
  }
  if (const Json* d = r.object("data")) {
    detail::ObjectReader o(*d, "data");
    o.read("num_classes", c.data.num_classes);
    o.read("dims", c.data.dims);
    o.read("side", c.data.side);
    o.read("per_class", c.data.per_class);
    o.read("test_per_class", c.data.test_per_class);
    o.read("noise", c.data.noise);
    o.read("separation", c.data.separation);
    o.finish();
  }
  if (const Json* t = r.object("train")) {
    detail::ObjectReader o(*t, "train");
    o.read("epochs", c.train.epochs);
    o.read("lr", c.train.lr);
    o.read("momentum", c.train.momentum);
    o.read("batch_size", c.train.batch_size);
    o.finish();
  }
  if (const Json* a = r.object("attack")) {
    detail::ObjectReader o(*a, "attack");
    AttackConfig& ac = c.attack;
    std::string mode(to_string(ac.mode)), variant(to_string(ac.variant));
    o.read("h1", ac.h1);
    o.read("h2", ac.h2);
    o.read("mode", mode);
    o.read("variant", variant);
    o.read("beta", ac.beta);
    o.read("gamma", ac.gamma);
    o.read("steps_per_iter", ac.steps_per_iter);
    o.read("lr", ac.lr);
    o.read("lr_decay", ac.lr_decay);
    o.read("reach_fraction", ac.reach_fraction);
    o.read("max_alpha_step", ac.max_alpha_step);
    o.read("alpha_interval", ac.alpha_interval);
    o.read("k_bits", ac.k_bits);
    o.read("m_perm", ac.m_perm);
    o.read("m_flip", ac.m_flip);
    o.read("rho", ac.rho);
    o.read("max_iters", ac.max_iters);
    o.read("runs", c.runs);
    o.read("targets", c.targets);
    if (const Json* mask = o.object("layer_mask")) {
      if (mask->is_null()) {
        c.layers.kind = LayerSelection::Kind::All;
      } else if (mask->is_string()) {
        c.layers = parse_layer_selection(mask->get<std::string>());
      } else {
        try {
          const auto layers = mask->get<std::vector<std::size_t>>();
          c.layers.kind = LayerSelection::Kind::Explicit;
          c.layers.layers = std::set<std::size_t>(layers.begin(), layers.end());
        } catch (const nlohmann::json::exception& e) {
          throw ConfigError(std::string("attack.layer_mask: ") + e.what());
        }
        if (c.layers.layers.empty()) throw ConfigError("attack.layer_mask is empty");
      }
    }
    if (const Json* al = o.object("alpha")) {
      detail::ObjectReader oa(*al, "attack.alpha");
      oa.read("initial", ac.alpha.initial);
      oa.read("tau_high", ac.alpha.tau_high);
      oa.read("tau_low", ac.alpha.tau_low);
      oa.read("min", ac.alpha.min);
      oa.read("max", ac.alpha.max);
      oa.finish();
    }
    o.finish();
    ac.mode = parse_mode(mode);
    ac.variant = parse_variant(variant);
  }
  if (const Json* f = r.object("frobenius")) {
    detail::ObjectReader o(*f, "frobenius");
    o.read("n", c.frobenius.n);
    o.read("fill", c.frobenius.fill);
    o.read("profiles", c.frobenius.profiles);
    o.finish();
  }
  if (const Json* d = r.object("defense")) {
    detail::ObjectReader o(*d, "defense");
    std::vector<std::string> formats;
    bool have_formats = d->contains("formats");
    o.read("defenses", c.defense.defenses);
    o.read("ulps", c.defense.ulps);
    o.read("trials", c.defense.trials);
    o.read("batch_sizes", c.defense.batch_sizes);
    o.read("formats", formats);
    o.read("finetune_steps", c.defense.finetune_steps);
    o.read("finetune_trials", c.defense.finetune_trials);
    if (const Json* ft = o.object("finetune")) {
      detail::ObjectReader of(*ft, "defense.finetune");
      of.read("lr", c.defense.finetune.lr);
      of.read("momentum", c.defense.finetune.momentum);
      of.read("batch_size", c.defense.finetune.batch_size);
      of.finish();
    }
    o.finish();
    if (have_formats) {
      c.defense.formats.clear();
      for (const auto& f : formats) c.defense.formats.push_back(parse_precision(f));
    }
  }
  if (const Json* p = r.object("profiles")) {
    if (!p->is_array()) throw ConfigError("profiles: expected an array");
    for (const auto& e : *p) c.profiles.push_back(profile_from_json(e));
  }
  r.finish();
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  Json j;
  try {
    j = Json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

/// The config without where and how fast it runs (output directory, worker count): the
/// part that determines the results.
inline Json experiment_json(const ExperimentConfig& c) {
  Json j = to_json(c);
  j.erase("out");
  j.erase("workers");
  return j;
}

/// 64-bit FNV-1a of the canonical JSON form of `experiment_json`, as 16 hex digits.
inline std::string config_hash(const ExperimentConfig& c) {
  const Json j = experiment_json(c);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Worker pool -----------------------------------------------------------------------------

/// Runs job(i) for i in [0, count) on `workers` threads. Results land at their index, so the
/// output order never depends on scheduling. The first exception of each job is captured
/// in `errors[i]` (empty string when the job succeeded).
template <typename Result>
std::vector<Result> run_pool(std::size_t count, std::size_t workers, const std::function<Result(std::size_t)>& job,
                             std::vector<std::string>& errors) {
  std::vector<Result> results(count);
  errors.assign(count, {});
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        results[i] = job(i);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(workers, count));
  std::vector<std::thread> threads;
  for (std::size_t t = 1; t < n; ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  return results;
}

// Output helpers --------------------------------------------------------------------------

struct OutputDir {
  std::filesystem::path root;

  explicit OutputDir(std::filesystem::path path, bool create = true) : root(std::move(path)) {
    if (!create) return;
    std::error_code ec;
    std::filesystem::create_directories(root, ec);
    if (ec || !std::filesystem::is_directory(root)) throw IoError("cannot create output directory " + root.string());
    const auto probe = root / ".hwbd-write-probe";
    {
      std::ofstream out(probe);
      if (!out) throw IoError("output directory " + root.string() + " is not writable");
    }
    std::filesystem::remove(probe, ec);
  }

  std::filesystem::path operator/(const std::string& name) const { return root / name; }

  void write(const std::string& name, const std::string& text) const {
    const auto path = root / name;
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("failed writing " + path.string());
  }

  Json read_json(const std::string& name, const std::string& producer) const {
    const auto path = root / name;
    std::ifstream in(path);
    if (!in) throw MissingPrerequisite(path.string() + " not found; run '" + producer + "' first");
    try {
      return Json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw IoError(path.string() + ": " + e.what());
    }
  }
};

/// Every result row starts with the master seed and the config hash.
struct Provenance {
  std::uint64_t seed = 0;
  std::string hash;

  std::string prefix() const { return std::to_string(seed) + "," + hash + ","; }
  static std::string header() { return "seed,config_hash,"; }
  void stamp(Json& j) const {
    j["seed"] = seed;
    j["config_hash"] = hash;
  }
};

inline Provenance provenance(const ExperimentConfig& c) { return {c.seed, config_hash(c)}; }

inline std::string dump(const Json& j) { return j.dump(2) + "\n"; }

// Commands --------------------------------------------------------------------------------

struct FrobeniusRow {
  std::string profile;
  float value = 0.0f;
};

inline std::vector<FrobeniusRow> cmd_demo_frobenius(const ExperimentConfig& c, std::ostream& log,
                                                    const OutputDir* out = nullptr) {
  const ProfileRegistry reg = c.registry();
  std::vector<BackendProfile> profiles;
  for (const auto& name : c.frobenius.profiles) profiles.push_back(reg.get(name));
  const auto values = frobenius_demo(c.frobenius.n, c.frobenius.fill, profiles);
  std::vector<FrobeniusRow> rows;
  std::ostringstream csv;
  const Provenance prov = provenance(c);
  csv << Provenance::header() << "profile,value,bits\n";
  for (std::size_t i = 0; i < profiles.size(); ++i) {
    rows.push_back({profiles[i].name, values[i]});
    char line[160];
    std::snprintf(line, sizeof line, "%-20s %.9g (0x%08x)\n", profiles[i].name.c_str(), values[i],
                  float_to_bits(values[i]));
    log << line;
    char bits[16];
    std::snprintf(bits, sizeof bits, "%08x", float_to_bits(values[i]));
    csv << prov.prefix() << profiles[i].name << ',' << format_double(values[i]) << ',' << bits << '\n';
  }
  if (out) out->write("frobenius.csv", csv.str());
  return rows;
}

struct TrainOutcome {
  Dataset data;
  TrainedModel trained;
};

inline Dataset make_dataset(const ExperimentConfig& c) { return generate(c.dataset()); }

inline TrainOutcome cmd_train(const ExperimentConfig& c, const OutputDir& out, std::ostream& log) {
  const ProfileRegistry reg = c.registry();
  TrainOutcome r{make_dataset(c), {}};
  TrainConfig tc = c.train;
  tc.seed = c.train_seed();
  r.trained = train_baseline(c.initial_model(), r.data, tc, reg.canonical());
  save_checkpoint(r.trained.model, out / "model.ckpt");

  const Provenance prov = provenance(c);
  std::ostringstream csv;
  csv << Provenance::header() << "model,split,profile,accuracy\n";
  Json profiles = Json::object();
  for (const auto& name : reg.names()) {
    const BackendProfile& p = reg.get(name);
    const double train_acc = accuracy(r.trained.model, r.data.train, p);
    const double test_acc = accuracy(r.trained.model, r.data.test, p);
    csv << prov.prefix() << to_string(c.model) << ",train," << name << ',' << format_double(train_acc) << '\n';
    csv << prov.prefix() << to_string(c.model) << ",test," << name << ',' << format_double(test_acc) << '\n';
    profiles[name] = test_acc;
  }
  out.write("train.csv", csv.str());
  Json j;
  prov.stamp(j);
  j["model"] = to_string(c.model);
  j["parameters"] = r.trained.model.parameter_count();
  j["test_accuracy"] = r.trained.test_accuracy;
  j["test_accuracy_by_profile"] = std::move(profiles);
  j["config"] = experiment_json(c);
  out.write("train.json", dump(j));
  log << "trained " << to_string(c.model) << " (" << r.trained.model.parameter_count()
      << " parameters), test accuracy " << r.trained.test_accuracy << "\n";
  return r;
}

inline Model load_trained(const OutputDir& out) {
  const auto path = out / "model.ckpt";
  if (!std::filesystem::exists(path)) throw MissingPrerequisite(path.string() + " not found; run 'train' first");
  return load_checkpoint(path);
}

struct AttackRun {
  std::size_t run = 0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> target_ids;  ///< indices into the train split
  BackdoorResult result;
};

inline std::string run_id(std::size_t run) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "run%03zu", run);
  return buf;
}

inline std::string join(const std::vector<std::size_t>& v, char sep = ' ') {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? std::string(1, sep) : "") + std::to_string(v[i]);
  return s;
}

/// Runs the configured number of seeded attacks against `theta_bar`. Per-run failures are
/// collected in `errors` (one entry per run; empty when the run completed).
inline std::vector<AttackRun> run_attacks(const ExperimentConfig& c, const Model& theta_bar, const Dataset& data,
                                          const ProfileRegistry& reg, std::vector<std::string>& errors) {
  AttackContext ctx;
  ctx.h1 = &reg.get(c.attack.h1);
  for (const auto& h : c.attack.h2) ctx.h2.push_back(&reg.get(h));
  ctx.canonical = &reg.canonical();
  ctx.validation = &data.test;
  ctx.baseline_accuracy = accuracy(theta_bar, data.test, *ctx.h1);
  std::function<AttackRun(std::size_t)> job = [&](std::size_t run) {
    AttackRun r;
    r.run = run;
    r.seed = c.run_seed(run);
    r.target_ids = sample_targets(theta_bar, data.train, c.targets, *ctx.h1, r.seed);
    const Split targets = data.train.subset(r.target_ids);
    AttackConfig ac = c.attack;
    ac.seed = r.seed;
    ac.layer_mask = c.layers.resolve(theta_bar);
    r.result = run_attack(theta_bar, TargetSet{targets.inputs, targets.labels}, ac, ctx);
    return r;
  };
  return run_pool<AttackRun>(c.runs, c.workers, job, errors);
}

inline Json tensor_values(const Tensor& t) {
  Json values = Json::array();
  for (float v : t.storage()) values.push_back(v);
  return values;
}

struct AttackSummary {
  std::size_t runs = 0;
  std::size_t successes = 0;
  std::size_t failures = 0;
  double rate() const { return runs ? static_cast<double>(successes) / static_cast<double>(runs) : 0.0; }
};

inline AttackSummary cmd_attack(const ExperimentConfig& c, const OutputDir& out, std::ostream& log) {
  const Model theta_bar = load_trained(out);
  const ProfileRegistry reg = c.registry();
  const Dataset data = make_dataset(c);
  std::vector<std::string> errors;
  const auto runs = run_attacks(c, theta_bar, data, reg, errors);

  const Provenance prov = provenance(c);
  std::ostringstream csv;
  csv << Provenance::header()
      << "run,run_seed,variant,mode,target_ids,sources,success,targets_active,mechanism,iterations,accuracy,"
         "retained_accuracy,predictions\n";
  Json backdoors = Json::array();
  AttackSummary summary;
  std::error_code ec;
  std::filesystem::remove_all(out / "backdoors", ec);
  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (!errors[i].empty()) {
      ++summary.failures;
      continue;
    }
    const AttackRun& r = runs[i];
    const BackdoorResult& b = r.result;
    ++summary.runs;
    summary.successes += b.success;
    std::string preds;
    for (std::size_t p = 0; p < b.predictions.size(); ++p) {
      preds += (p ? "|" : "") + b.profiles[p] + ":" + join(b.predictions[p]);
    }
    csv << prov.prefix() << r.run << ',' << r.seed << ',' << to_string(c.attack.variant) << ','
        << to_string(c.attack.mode) << ',' << join(r.target_ids) << ',' << join(b.targets.sources) << ','
        << b.success << ',' << b.targets_active << ',' << to_string(b.mechanism) << ',' << b.iterations << ','
        << format_double(b.accuracy) << ',' << format_double(b.retained_accuracy) << ',' << preds << '\n';
    if (!b.success) continue;
    const std::string id = run_id(r.run);
    const std::string file = "backdoors/" + id + ".ckpt";
    std::filesystem::create_directories(out / "backdoors", ec);
    save_checkpoint(b.model, out / file);
    Json entry;
    entry["id"] = id;
    entry["run"] = r.run;
    entry["run_seed"] = r.seed;
    entry["checkpoint"] = file;
    entry["mechanism"] = to_string(b.mechanism);
    entry["iterations"] = b.iterations;
    entry["retained_accuracy"] = b.retained_accuracy;
    entry["profiles"] = b.profiles;
    entry["mode"] = to_string(c.attack.mode);
    Json targets = Json::array();
    for (std::size_t t = 0; t < b.targets.size(); ++t) {
      const Split one = data.train.subset(std::vector<std::size_t>{r.target_ids[t]});
      Json tj;
      tj["train_index"] = r.target_ids[t];
      tj["source"] = b.targets.sources[t];
      Json preds_t = Json::array();
      for (const auto& p : b.predictions) preds_t.push_back(p[t]);
      tj["predictions"] = std::move(preds_t);
      tj["input"] = tensor_values(one.inputs);
      targets.push_back(std::move(tj));
    }
    entry["targets"] = std::move(targets);
    if (b.permuted_layer) entry["permuted_layer"] = *b.permuted_layer;
    Json flips = Json::array();
    for (const auto& f : b.flips) flips.push_back({{"parameter", f.parameter}, {"bit", f.bit}});
    entry["flips"] = std::move(flips);
    backdoors.push_back(std::move(entry));
  }
  out.write("attack.csv", csv.str());

  Json manifest;
  prov.stamp(manifest);
  manifest["model"] = to_string(c.model);
  manifest["input_shape"] = theta_bar.input_shape;
  manifest["backdoors"] = std::move(backdoors);
  out.write("backdoors.json", dump(manifest));

  Json j;
  prov.stamp(j);
  j["variant"] = to_string(c.attack.variant);
  j["mode"] = to_string(c.attack.mode);
  j["h1"] = c.attack.h1;
  j["h2"] = c.attack.h2;
  j["targets_per_run"] = c.targets;
  j["runs_requested"] = c.runs;
  j["runs_completed"] = summary.runs;
  j["successes"] = summary.successes;
  j["success_rate"] = summary.rate();
  Json failed = Json::array();
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (!errors[i].empty()) failed.push_back({{"run", i}, {"error", errors[i]}});
  }
  j["failed_runs"] = std::move(failed);
  out.write("attack.json", dump(j));
  log << "attack: " << summary.successes << "/" << summary.runs << " runs succeeded ("
      << to_string(c.attack.variant) << ", " << c.attack.h1 << " vs " << c.attack.h2.front()
      << (c.attack.h2.size() > 1 ? " ..." : "") << ")\n";
  if (summary.failures) {
    std::ostringstream msg;
    msg << summary.failures << " of " << c.runs << " attack runs failed:";
    for (std::size_t i = 0; i < errors.size(); ++i) {
      if (!errors[i].empty()) msg << "\n  " << run_id(i) << ": " << errors[i];
    }
    throw PartialFailure(msg.str());
  }
  return summary;
}

/// Loads every (backdoor, target, non-target profile) triple recorded by `attack`. The
/// returned corpus points into `reg`, which must outlive it.
inline std::vector<Backdoor> load_corpus(const OutputDir& out, const ProfileRegistry& reg) {
  const Json manifest = out.read_json("backdoors.json", "attack");
  std::vector<Backdoor> corpus;
  try {
    const auto input_shape = manifest.at("input_shape").get<Shape>();
    for (const auto& e : manifest.at("backdoors")) {
      const Model model = load_checkpoint(out / e.at("checkpoint").get<std::string>());
      const auto profiles = e.at("profiles").get<std::vector<std::string>>();
      const auto& targets = e.at("targets");
      for (std::size_t t = 0; t < targets.size(); ++t) {
        for (std::size_t p = 1; p < profiles.size(); ++p) {
          Backdoor b;
          b.id = e.at("id").get<std::string>();
          if (targets.size() > 1) b.id += "/t" + std::to_string(t);
          if (profiles.size() > 2) b.id += "/" + profiles[p];
          b.model = model;
          b.input = Tensor(input_shape, targets[t].at("input").get<std::vector<float>>());
          b.source = targets[t].at("source").get<std::size_t>();
          b.h1 = &reg.get(profiles[0]);
          b.h2 = &reg.get(profiles[p]);
          corpus.push_back(std::move(b));
        }
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("backdoors.json: " + std::string(e.what()));
  }
  return corpus;
}

struct PatchSummary {
  std::vector<PatchTrace> traces;
  std::size_t sign_property_holds = 0;
};

inline PatchSummary cmd_patch(const ExperimentConfig& c, const OutputDir& out, std::ostream& log) {
  const ProfileRegistry reg = c.registry();
  const auto corpus = load_corpus(out, reg);
  PatchSummary s;
  std::vector<std::string> errors;
  std::function<PatchTrace(std::size_t)> job = [&](std::size_t i) {
    const Backdoor& b = corpus[i];
    return build_trace(b.model, b.input, *b.h1, *b.h2, b.id, i);
  };
  s.traces = run_pool<PatchTrace>(corpus.size(), c.workers, job, errors);
  std::vector<PatchTrace> ok;
  for (std::size_t i = 0; i < s.traces.size(); ++i) {
    if (!errors[i].empty()) continue;
    const auto& t = s.traces[i];
    s.sign_property_holds += t.deltas.front() < 0.0 && t.deltas.back() > 0.0;
    ok.push_back(t);
  }
  s.traces = ok;

  const Provenance prov = provenance(c);
  std::ostringstream traces;
  {
    std::ostringstream raw;
    write_traces_csv(raw, s.traces);
    std::istringstream lines(raw.str());
    std::string line;
    bool header = true;
    while (std::getline(lines, line)) {
      traces << (header ? Provenance::header() : prov.prefix()) << line << '\n';
      header = false;
    }
  }
  out.write("patch_traces.csv", traces.str());

  // Aggregates per profile pair.
  std::ostringstream agg;
  agg << Provenance::header() << "pair,i,delta_sum,delta_sum_normalized,traces\n";
  Json pairs = Json::array();
  std::vector<std::string> pair_names;
  for (const auto& t : s.traces) {
    if (std::find(pair_names.begin(), pair_names.end(), t.pair()) == pair_names.end()) pair_names.push_back(t.pair());
  }
  for (const auto& pair : pair_names) {
    std::vector<PatchTrace> group;
    for (const auto& t : s.traces) {
      if (t.pair() == pair) group.push_back(t);
    }
    const auto raw = aggregate_profile(group, false);
    const auto norm = aggregate_profile(group, true);
    for (std::size_t i = 0; i < raw.size(); ++i) {
      agg << prov.prefix() << pair << ',' << i + 1 << ',' << format_double(raw[i]) << ',' << format_double(norm[i])
          << ',' << group.size() << '\n';
    }
    pairs.push_back({{"pair", pair}, {"traces", group.size()}, {"delta", raw}, {"delta_normalized", norm}});
  }
  out.write("patch_aggregate.csv", agg.str());

  Json j;
  prov.stamp(j);
  j["traces"] = s.traces.size();
  j["sign_property_holds"] = s.sign_property_holds;
  j["pairs"] = std::move(pairs);
  Json failed = Json::array();
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (!errors[i].empty()) failed.push_back({{"backdoor_id", corpus[i].id}, {"error", errors[i]}});
  }
  j["failed"] = failed;
  out.write("patch.json", dump(j));
  log << "patch: " << s.traces.size() << " traces, sign property holds for " << s.sign_property_holds << "\n";
  if (!failed.empty()) {
    std::ostringstream msg;
    msg << failed.size() << " backdoors could not be traced:";
    for (const auto& f : failed) msg << "\n  " << f["backdoor_id"].get<std::string>() << ": " << f["error"].get<std::string>();
    throw PartialFailure(msg.str());
  }
  return s;
}

inline std::vector<DefenseReport> cmd_defend(const ExperimentConfig& c, const OutputDir& out, std::ostream& log) {
  const ProfileRegistry reg = c.registry();
  const auto corpus = load_corpus(out, reg);
  std::vector<DefenseReport> reports;
  for (const auto& d : c.defense.defenses) {
    if (d == "input-perturbation") {
      reports.push_back(defend_input_perturbation(corpus, c.defense.ulps, c.defense.trials, c.defense_seed()));
    } else if (d == "batch-size") {
      reports.push_back(defend_batch_size(corpus, c.defense.batch_sizes));
    } else if (d == "downcast") {
      reports.push_back(defend_downcast(corpus, c.defense.formats));
    } else if (d == "finetune") {
      const Dataset data = make_dataset(c);
      FinetuneConfig fc = c.defense.finetune;
      fc.seed = c.defense_seed();
      reports.push_back(
          defend_finetune(corpus, data.train, c.defense.finetune_steps, fc, reg.canonical(), c.defense.finetune_trials));
    }
  }
  const Provenance prov = provenance(c);
  std::ostringstream csv;
  csv << Provenance::header() << "defense,sweep_value,backdoor_id,outcome,trials\n";
  Json j;
  prov.stamp(j);
  j["corpus_size"] = corpus.size();
  Json list = Json::array();
  for (const auto& r : reports) {
    std::ostringstream raw;
    write_report_csv(raw, r, false);
    std::istringstream lines(raw.str());
    std::string line;
    while (std::getline(lines, line)) csv << prov.prefix() << line << '\n';
    list.push_back(report_json(r));
    log << r.defense << ":";
    for (const auto& p : r.points) log << ' ' << p.value << '=' << p.rate();
    log << '\n';
  }
  j["reports"] = std::move(list);
  out.write("defense.csv", csv.str());
  out.write("defense.json", dump(j));
  return reports;
}

/// Human-readable digest of whatever results exist in the output directory.
inline std::string cmd_report(const OutputDir& out) {
  std::ostringstream r;
  bool any = false;
  auto section = [&](const std::string& file, const std::function<void(const Json&)>& body) {
    if (!std::filesystem::exists(out / file)) return;
    any = true;
    body(out.read_json(file, ""));
  };
  section("train.json", [&](const Json& j) {
    r << "train: model " << j["model"].get<std::string>() << ", " << j["parameters"].get<std::size_t>()
      << " parameters, test accuracy " << j["test_accuracy"].get<double>() << "\n";
  });
  section("attack.json", [&](const Json& j) {
    r << "attack: variant " << j["variant"].get<std::string>() << ", mode " << j["mode"].get<std::string>() << ", "
      << j["successes"].get<std::size_t>() << "/" << j["runs_completed"].get<std::size_t>() << " succeeded (rate "
      << j["success_rate"].get<double>() << ")\n";
  });
  section("patch.json", [&](const Json& j) {
    r << "patch: " << j["traces"].get<std::size_t>() << " traces, sign property holds for "
      << j["sign_property_holds"].get<std::size_t>() << "\n";
    for (const auto& p : j["pairs"]) {
      r << "  " << p["pair"].get<std::string>() << " aggregate delta per layer:";
      for (const auto& v : p["delta"]) r << ' ' << format_double(v.get<double>()).substr(0, 8);
      r << "\n";
    }
  });
  section("defense.json", [&](const Json& j) {
    r << "defense over " << j["corpus_size"].get<std::size_t>() << " backdoors:\n";
    for (const auto& rep : j["reports"]) {
      r << "  " << rep["defense"].get<std::string>() << " (undefended " << rep["undefended_rate"].get<double>()
        << "):";
      for (const auto& p : rep["points"]) r << ' ' << p["value"].get<std::string>() << '=' << p["rate"].get<double>();
      r << "\n";
    }
  });
  if (!any) throw MissingPrerequisite("no results in " + out.root.string() + "; run train/attack/patch/defend first");
  out.write("report.txt", r.str());
  return r.str();
}

}  // namespace hwbd
