#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hwbd/attack.hpp"
#include "hwbd/data.hpp"
#include "hwbd/engine.hpp"
#include "hwbd/float_bits.hpp"
#include "hwbd/profile.hpp"

namespace hwbd {

/// One backdoored model with its single target and the profile pair it splits.
struct Backdoor {
  std::string id;
  Model model;
  Tensor input;  ///< the target, in the model's input shape
  std::size_t source = 0;
  const BackendProfile* h1 = nullptr;
  const BackendProfile* h2 = nullptr;
};

/// Predictions differ between the two profiles and neither has a top-2 tie: the same
/// predicate the attack uses to declare success.
inline bool splits(const Model& model, const Tensor& x, const BackendProfile& h1, const BackendProfile& h2) {
  try {
    const Tensor y1 = forward(model, x, h1);
    const Tensor y2 = forward(model, x, h2);
    return !top_two_tied(row(y1, 0)) && !top_two_tied(row(y2, 0)) && argmax(row(y1, 0)) != argmax(row(y2, 0));
  } catch (const NumericError&) {
    return false;  // a defense that drives activations to Inf/NaN has removed the backdoor
  }
}

inline bool splits(const Backdoor& b) { return splits(b.model, b.input, *b.h1, *b.h2); }

struct SweepPoint {
  std::string value;
  std::vector<double> outcomes;  ///< per backdoor, mean of 0/1 outcomes over `trials`
  std::size_t trials = 1;

  double rate() const {
    if (outcomes.empty()) return 0.0;
    double sum = 0.0;
    for (double o : outcomes) sum += o;
    return sum / static_cast<double>(outcomes.size());
  }
};

struct Overflow {
  std::string backdoor_id;
  std::size_t parameter = 0;
};

struct DefenseReport {
  std::string defense;
  std::vector<std::string> backdoor_ids;
  double undefended_rate = 0.0;
  std::vector<SweepPoint> points;
  std::vector<Overflow> overflows;  ///< downcast only

  const SweepPoint& at(const std::string& value) const {
    for (const auto& p : points) {
      if (p.value == value) return p;
    }
    throw Error("defense report has no sweep point '" + value + "'");
  }
};

namespace detail {

inline DefenseReport start_report(std::string name, std::span<const Backdoor> corpus) {
  DefenseReport r;
  r.defense = std::move(name);
  double sum = 0.0;
  for (const auto& b : corpus) {
    r.backdoor_ids.push_back(b.id);
    sum += splits(b);
  }
  r.undefended_rate = corpus.empty() ? 0.0 : sum / static_cast<double>(corpus.size());
  return r;
}

}  // namespace detail

// Input perturbation ---------------------------------------------------------------------

/// Every element moves by a uniform integer number of ULP steps in [-d, d] (its own ULP);
/// one element, chosen uniformly, moves by exactly +-d so the perturbation has norm d.
inline Tensor perturb_ulps(const Tensor& x, std::int64_t d, std::mt19937_64& rng) {
  Tensor out = x;
  if (d == 0) return out;
  std::uniform_int_distribution<std::int64_t> steps(-d, d);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ulp_step(x[i], steps(rng));
  const std::size_t pinned = std::uniform_int_distribution<std::size_t>(0, x.size() - 1)(rng);
  out[pinned] = ulp_step(x[pinned], std::bernoulli_distribution(0.5)(rng) ? d : -d);
  return out;
}

inline DefenseReport defend_input_perturbation(std::span<const Backdoor> corpus, std::span<const std::int64_t> ulps,
                                               std::size_t trials, std::uint64_t seed) {
  if (trials == 0) throw ConfigError("input perturbation needs at least one trial");
  DefenseReport r = detail::start_report("input-perturbation", corpus);
  for (std::int64_t d : ulps) {
    if (d < 0) throw ConfigError("ULP magnitude must be >= 0");
    SweepPoint p{std::to_string(d), {}, trials};
    for (std::size_t c = 0; c < corpus.size(); ++c) {
      std::size_t hits = 0;
      for (std::size_t t = 0; t < trials; ++t) {
        std::mt19937_64 rng(mix_seed(seed, c, static_cast<std::uint64_t>(d), t));
        const Backdoor& b = corpus[c];
        hits += splits(b.model, perturb_ulps(b.input, d, rng), *b.h1, *b.h2);
      }
      p.outcomes.push_back(static_cast<double>(hits) / static_cast<double>(trials));
    }
    r.points.push_back(std::move(p));
  }
  return r;
}

// Batch size ------------------------------------------------------------------------------

/// The target duplicated k times and run as one joint batch on each profile; the outcome is
/// the fraction of (i, j) index pairs whose predictions split.
inline double batch_split_rate(const Backdoor& b, std::size_t k) {
  if (k == 0) throw ConfigError("batch size must be >= 1");
  const Tensor one = detail::as_batch(b.model, b.input);
  Shape shape = one.shape();
  shape[0] = k;
  std::vector<float> data;
  for (std::size_t i = 0; i < k; ++i) data.insert(data.end(), one.storage().begin(), one.storage().end());
  const Tensor batch(std::move(shape), std::move(data));
  Tensor y1, y2;
  try {
    y1 = forward(b.model, batch, *b.h1, {true});
    y2 = forward(b.model, batch, *b.h2, {true});
  } catch (const NumericError&) {
    return 0.0;
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < k; ++i) {
    if (top_two_tied(row(y1, i))) continue;
    for (std::size_t j = 0; j < k; ++j) {
      hits += !top_two_tied(row(y2, j)) && argmax(row(y1, i)) != argmax(row(y2, j));
    }
  }
  return static_cast<double>(hits) / static_cast<double>(k * k);
}

inline DefenseReport defend_batch_size(std::span<const Backdoor> corpus, std::span<const std::size_t> sizes) {
  DefenseReport r = detail::start_report("batch-size", corpus);
  for (std::size_t k : sizes) {
    SweepPoint p{std::to_string(k), {}, 1};
    for (const auto& b : corpus) p.outcomes.push_back(batch_split_rate(b, k));
    r.points.push_back(std::move(p));
  }
  return r;
}

// Downcasting -----------------------------------------------------------------------------

enum class Precision { F32, BF16, F16 };

inline std::string_view to_string(Precision p) {
  switch (p) {
    case Precision::F32: return "f32";
    case Precision::BF16: return "bf16";
    case Precision::F16: return "f16";
  }
  return "?";
}

inline Precision parse_precision(std::string_view s) {
  if (s == "f32") return Precision::F32;
  if (s == "bf16") return Precision::BF16;
  if (s == "f16") return Precision::F16;
  throw ConfigError("unknown precision '" + std::string(s) + "' (expected f32|bf16|f16)");
}

/// Rounds every parameter to `format` (nearest-even) and stores it back as f32, so
/// inference still accumulates in f32. Parameters that overflow binary16 become +-Inf and
/// their flat indices are appended to `overflowed`.
inline Model downcast(const Model& model, Precision format, std::vector<std::size_t>* overflowed = nullptr) {
  std::vector<float> theta = model.flatten();
  for (std::size_t i = 0; i < theta.size(); ++i) {
    if (format == Precision::BF16) {
      theta[i] = round_to_bf16(theta[i]);
    } else if (format == Precision::F16) {
      if (const auto v = round_to_f16(theta[i])) {
        theta[i] = *v;
      } else {
        if (overflowed) overflowed->push_back(i);
        theta[i] = std::copysign(std::numeric_limits<float>::infinity(), theta[i]);
      }
    }
  }
  Model out = model;
  out.unflatten(theta);
  return out;
}

inline DefenseReport defend_downcast(std::span<const Backdoor> corpus, std::span<const Precision> formats) {
  DefenseReport r = detail::start_report("downcast", corpus);
  for (Precision f : formats) {
    SweepPoint p{std::string(to_string(f)), {}, 1};
    for (const auto& b : corpus) {
      std::vector<std::size_t> overflowed;
      const Model m = downcast(b.model, f, &overflowed);
      for (std::size_t i : overflowed) r.overflows.push_back({b.id, i});
      p.outcomes.push_back(splits(m, b.input, *b.h1, *b.h2));
    }
    r.points.push_back(std::move(p));
  }
  return r;
}

// Fine-tuning -----------------------------------------------------------------------------

struct FinetuneConfig {
  double lr = 1e-4;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  std::uint64_t seed = 1;
};

/// SGD with momentum on clean minibatches, each drawn from a fresh shuffle of `clean`.
/// Steps can be taken in several calls; the momentum state carries over.
class Finetuner {
 public:
  Finetuner(Model model, const Split& clean, const FinetuneConfig& config, const BackendProfile& canonical,
            std::uint64_t stream)
      : model_(std::move(model)),
        clean_(clean),
        canonical_(canonical),
        opt_(config.lr, config.momentum),
        rng_(mix_seed(config.seed, stream)),
        order_(clean.size()),
        batch_(std::min(std::max<std::size_t>(1, config.batch_size), clean.size())) {
    if (clean.size() == 0) throw Error("fine-tuning needs clean training data");
    std::iota(order_.begin(), order_.end(), std::size_t{0});
  }

  /// Throws NumericError when training diverges.
  void run(std::size_t steps) {
    for (std::size_t s = 0; s < steps; ++s, ++taken_) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      const Split batch = clean_.subset(std::span(order_).first(batch_));
      double loss = 0.0;
      const auto grad = batch_gradient(model_, batch, canonical_, &loss);
      if (!std::isfinite(loss)) throw NumericError("fine-tuning diverged at step " + std::to_string(taken_));
      opt_.step(model_, grad);
    }
  }

  const Model& model() const noexcept { return model_; }
  std::size_t steps_taken() const noexcept { return taken_; }

 private:
  Model model_;
  const Split& clean_;
  const BackendProfile& canonical_;
  SgdMomentum opt_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t taken_ = 0;
};

inline Model finetune(const Model& model, const Split& clean, std::size_t steps, const FinetuneConfig& config,
                      const BackendProfile& canonical, std::uint64_t stream) {
  Finetuner f(model, clean, config, canonical, stream);
  f.run(steps);
  return f.model();
}

/// Each (backdoor, trial) pair follows one fine-tuning trajectory, seeded by (corpus index,
/// trial), and is checked after every requested step count.
inline DefenseReport defend_finetune(std::span<const Backdoor> corpus, const Split& clean,
                                     std::span<const std::size_t> steps, const FinetuneConfig& config,
                                     const BackendProfile& canonical, std::size_t trials = 1) {
  if (trials == 0) throw ConfigError("fine-tuning needs at least one trial");
  DefenseReport r = detail::start_report("finetune", corpus);
  for (std::size_t n : steps) r.points.push_back(SweepPoint{std::to_string(n), std::vector<double>(corpus.size(), 0.0), trials});
  std::vector<std::size_t> ascending(steps.size());
  std::iota(ascending.begin(), ascending.end(), std::size_t{0});
  std::stable_sort(ascending.begin(), ascending.end(), [&](std::size_t a, std::size_t b) { return steps[a] < steps[b]; });
  for (std::size_t c = 0; c < corpus.size(); ++c) {
    const Backdoor& b = corpus[c];
    for (std::size_t t = 0; t < trials; ++t) {
      Finetuner f(b.model, clean, config, canonical, mix_seed(c, t));
      for (std::size_t pi : ascending) {
        f.run(steps[pi] - f.steps_taken());
        r.points[pi].outcomes[c] += splits(f.model(), b.input, *b.h1, *b.h2) ? 1.0 : 0.0;
      }
    }
    for (auto& p : r.points) p.outcomes[c] /= static_cast<double>(trials);
  }
  return r;
}

// Output ----------------------------------------------------------------------------------

inline void write_report_csv(std::ostream& out, const DefenseReport& r, bool header = true) {
  if (header) out << "defense,sweep_value,backdoor_id,outcome,trials\n";
  for (const auto& p : r.points) {
    for (std::size_t i = 0; i < p.outcomes.size(); ++i) {
      out << r.defense << ',' << p.value << ',' << r.backdoor_ids[i] << ',' << format_double(p.outcomes[i]) << ','
          << p.trials << '\n';
    }
  }
}

inline nlohmann::ordered_json report_json(const DefenseReport& r) {
  nlohmann::ordered_json j;
  j["defense"] = r.defense;
  j["corpus_size"] = r.backdoor_ids.size();
  j["undefended_rate"] = r.undefended_rate;
  auto& pts = j["points"] = nlohmann::ordered_json::array();
  for (const auto& p : r.points) {
    pts.push_back({{"value", p.value}, {"rate", p.rate()}, {"count", p.outcomes.size()}, {"trials", p.trials}});
  }
  if (!r.overflows.empty()) {
    auto& ov = j["overflows"] = nlohmann::ordered_json::array();
    for (const auto& o : r.overflows) ov.push_back({{"backdoor_id", o.backdoor_id}, {"parameter", o.parameter}});
  }
  return j;
}

}  // namespace hwbd
