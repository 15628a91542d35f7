#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "hwbd/data.hpp"
#include "hwbd/engine.hpp"
#include "hwbd/error.hpp"
#include "hwbd/float_bits.hpp"
#include "hwbd/profile.hpp"

namespace hwbd {

// Proxy loss terms --------------------------------------------------------------------------

/// Gap between the largest and second-largest logit (0 iff the top two tie).
inline float loss_diff(std::span<const float> y) {
  if (y.size() < 2) throw ShapeError("loss_diff needs at least two logits");
  const std::size_t top = argmax(y);
  float second = -std::numeric_limits<float>::infinity();
  for (std::size_t j = 0; j < y.size(); ++j) {
    if (j != top) second = std::max(second, y[j]);
  }
  return y[top] - second;
}

/// How far the best competing class is above the source class `t` (0 if `t` is weakly on top).
inline float loss_class(std::span<const float> y, std::size_t t) {
  if (y.size() < 2) throw ShapeError("loss_class needs at least two logits");
  if (t >= y.size()) throw ShapeError("loss_class: source class out of range");
  float best_other = -std::numeric_limits<float>::infinity();
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (i != t) best_other = std::max(best_other, y[i]);
  }
  return std::max(best_other - y[t], 0.0f);
}

/// Squared Euclidean distance between two flat parameter views, accumulated in double.
inline float loss_reg(std::span<const float> theta, std::span<const float> theta_bar) {
  if (theta.size() != theta_bar.size()) throw ShapeError("loss_reg: parameter count mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double d = static_cast<double>(theta[i]) - static_cast<double>(theta_bar[i]);
    sum += d * d;
  }
  return static_cast<float>(sum);
}

struct ProxyCoefficients {
  double alpha = 1.0;
  double beta = 0.1;
  double gamma = 10000.0;
};

inline float proxy_loss(std::span<const float> theta, std::span<const float> theta_bar, std::span<const float> y,
                        std::size_t t, const ProxyCoefficients& c) {
  return static_cast<float>(c.alpha * loss_diff(y) + c.beta * loss_class(y, t) + c.gamma * loss_reg(theta, theta_bar));
}

/// Subgradient of alpha * loss_diff + beta * loss_class w.r.t. the logits.
inline std::vector<float> proxy_logit_gradient(std::span<const float> y, std::size_t t, const ProxyCoefficients& c) {
  std::vector<float> g(y.size(), 0.0f);
  const std::size_t top = argmax(y);
  std::size_t runner = top == 0 ? 1 : 0;
  for (std::size_t j = 0; j < y.size(); ++j) {
    if (j != top && y[j] > y[runner]) runner = j;
  }
  g[top] += static_cast<float>(c.alpha);
  g[runner] -= static_cast<float>(c.alpha);
  if (loss_class(y, t) > 0.0f) {
    std::size_t other = t == 0 ? 1 : 0;
    for (std::size_t j = 0; j < y.size(); ++j) {
      if (j != t && y[j] > y[other]) other = j;
    }
    g[other] += static_cast<float>(c.beta);
    g[t] -= static_cast<float>(c.beta);
  }
  return g;
}

// Configuration -----------------------------------------------------------------------------

enum class AttackVariant { Base, Perm, Flip, Full };
enum class TriggerMode { Pairwise, OneVsRest };
enum class Mechanism { None, Permutation, BitFlip };

inline std::string_view to_string(AttackVariant v) {
  switch (v) {
    case AttackVariant::Base: return "base";
    case AttackVariant::Perm: return "perm";
    case AttackVariant::Flip: return "flip";
    case AttackVariant::Full: return "full";
  }
  return "?";
}

inline AttackVariant parse_variant(std::string_view s) {
  if (s == "base") return AttackVariant::Base;
  if (s == "perm") return AttackVariant::Perm;
  if (s == "flip") return AttackVariant::Flip;
  if (s == "full") return AttackVariant::Full;
  throw ConfigError("unknown attack variant '" + std::string(s) + "'");
}

inline std::string_view to_string(TriggerMode m) { return m == TriggerMode::Pairwise ? "pairwise" : "one-vs-rest"; }

inline TriggerMode parse_mode(std::string_view s) {
  if (s == "pairwise") return TriggerMode::Pairwise;
  if (s == "one-vs-rest") return TriggerMode::OneVsRest;
  throw ConfigError("unknown trigger mode '" + std::string(s) + "'");
}

inline std::string_view to_string(Mechanism m) {
  switch (m) {
    case Mechanism::None: return "none";
    case Mechanism::Permutation: return "perm";
    case Mechanism::BitFlip: return "flip";
  }
  return "?";
}

/// Adaptive weight of the boundary term, driven by the largest top-2 gap on h1.
/// Inside an iteration's reach phase alpha doubles while the targets sit on their source
/// class with a gap above tau_high. After each iteration alpha doubles if the tie was not
/// reached (gap above tau_low, which includes stalls on a ReLU kink) and halves otherwise.
/// Clamped to [min, max].
struct AlphaSchedule {
  double initial = 1.0;
  double tau_high = 0.5;
  double tau_low = 1e-4;
  double min = 1.0 / 64.0;
  double max = 1048576.0;

  double grow(double alpha, double gap) const {
    return gap > tau_high ? std::clamp(alpha * 2.0, min, max) : alpha;
  }

  double after_iteration(double alpha, double gap) const {
    return std::clamp(gap > tau_low ? alpha * 2.0 : alpha * 0.5, min, max);
  }
};

struct AttackConfig {
  AlphaSchedule alpha;
  double beta = 0.1;
  double gamma = 10000.0;
  std::size_t steps_per_iter = 500;
  double lr = 1e-2;
  /// Learning rate at the last step of an iteration, relative to `lr` (geometric decay).
  double lr_decay = 1e-11;
  /// Leading fraction of the steps run at constant `lr` while alpha adapts.
  double reach_fraction = 0.2;
  /// Upper bound on lr * alpha; keeps the boundary term's steps out of the chaotic regime.
  double max_alpha_step = 0.01;
  /// Reach-phase steps between alpha updates.
  std::size_t alpha_interval = 2;
  std::size_t k_bits = 5;
  std::size_t m_perm = 128;
  std::size_t m_flip = 128;
  double rho = 0.95;
  std::size_t max_iters = 6;
  std::optional<std::set<std::size_t>> layer_mask;
  std::uint64_t seed = 0;
  std::string h1 = "seq-f32";
  std::vector<std::string> h2 = {"pairwise-f32"};
  TriggerMode mode = TriggerMode::Pairwise;
  AttackVariant variant = AttackVariant::Full;

  std::size_t m_candidates() const noexcept { return m_perm + m_flip; }

  void validate() const {
    if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("rho must lie in (0, 1]");
    if (k_bits < 1) throw ConfigError("k_bits must be >= 1");
    if (h2.empty()) throw ConfigError("attack needs at least one non-target profile");
    if (!(lr >= 0.0) || !(lr_decay > 0.0)) throw ConfigError("invalid learning rate schedule");
    if (!(max_alpha_step > 0.0)) throw ConfigError("max_alpha_step must be positive");
    if (!(reach_fraction >= 0.0 && reach_fraction < 1.0)) throw ConfigError("reach_fraction must lie in [0, 1)");
    if (mode == TriggerMode::Pairwise && h2.size() != 1) throw ConfigError("pairwise mode takes exactly one h2");
  }
};

/// Deterministic 64-bit mix of a run seed and stream coordinates (splitmix64 finalizer).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(mix(seed) ^ a) ^ b) ^ c);
}

/// Flat-view indices the attack may modify; all parameters when the mask is unset.
inline std::vector<std::size_t> masked_parameters(const Model& model, const std::optional<std::set<std::size_t>>& mask) {
  const auto offsets = model.layer_offsets();
  std::vector<std::size_t> out;
  for (std::size_t li = 0; li < model.depth(); ++li) {
    if (mask && !mask->count(li)) continue;
    for (std::size_t i = offsets[li]; i < offsets[li + 1]; ++i) out.push_back(i);
  }
  return out;
}

// Step 1: boundary shaping ------------------------------------------------------------------

/// Targets with their source classes; `inputs` is a batch [T, ...].
struct TargetSet {
  Tensor inputs;
  std::vector<std::size_t> sources;

  std::size_t size() const noexcept { return sources.size(); }
};

/// Largest top-2 logit gap across the targets under `profile`.
inline float max_gap(const Model& model, const TargetSet& targets, const BackendProfile& profile) {
  if (targets.size() == 0) return 0.0f;
  const Tensor y = forward(model, targets.inputs, profile);
  float gap = 0.0f;
  for (std::size_t i = 0; i < targets.size(); ++i) gap = std::max(gap, loss_diff(row(y, i)));
  return gap;
}

/// True when every target is still predicted as its source class under `profile`.
inline bool on_source(const Model& model, const TargetSet& targets, const BackendProfile& profile) {
  const Tensor y = forward(model, targets.inputs, profile);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (argmax(row(y, i)) != targets.sources[i]) return false;
  }
  return true;
}

/// Gradient descent on sum over targets of alpha L_diff + beta L_class + gamma L_reg.
/// Logits (and hence the active loss branches) come from `h1`; gradients from `canonical`.
///
/// The iteration has two phases. Reach: constant `lr`; every `alpha_interval` steps alpha
/// doubles while the targets keep their source class with a gap above tau_high; the first
/// crossing from afar freezes alpha (a crossing that starts at the tie does not). Settle: the learning rate decays geometrically to
/// lr * lr_decay so the iterate closes in on the tie. The quadratic regularizer is applied
/// as an exact proximal step, which keeps large learning rates stable; lr * alpha is capped
/// by `max_alpha_step`. Parameters are kept
/// in double between steps and rounded to float for every forward pass.
inline Model shape_boundary(const Model& model, const Model& theta_bar, const TargetSet& targets,
                            const AttackConfig& config, double& alpha, const BackendProfile& h1,
                            const BackendProfile& canonical) {
  if (targets.size() == 0) return model;
  const std::vector<float> anchor = theta_bar.flatten();
  const std::vector<float> start = model.flatten();
  if (anchor.size() != start.size()) throw ShapeError("shape_boundary: model and reference differ");
  std::vector<double> theta(start.begin(), start.end());
  std::vector<float> rounded = start;
  std::vector<char> trainable(theta.size(), 0);
  for (std::size_t i : masked_parameters(model, config.layer_mask)) trainable[i] = 1;

  const double reg_weight = config.gamma * static_cast<double>(targets.size());
  const std::size_t steps = config.steps_per_iter;
  const auto reach = static_cast<std::size_t>(config.reach_fraction * static_cast<double>(steps));
  Model current = model;
  bool armed = false;   // started away from the boundary, or alpha has grown since
  bool frozen = false;  // a target crossed while armed: alpha is large enough
  for (std::size_t s = 0; s < steps; ++s) {
    double lr = config.lr;
    if (s >= reach && steps > reach + 1) {
      lr *= std::pow(config.lr_decay, static_cast<double>(s - reach) / static_cast<double>(steps - reach - 1));
    }
    lr = std::min(lr, config.max_alpha_step / alpha);
    const Tensor y = forward(current, targets.inputs, h1);
    float gap = 0.0f;
    bool source = true;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      gap = std::max(gap, loss_diff(row(y, i)));
      source = source && argmax(row(y, i)) == targets.sources[i];
    }
    if (s == 0) armed = gap > config.alpha.tau_high;
    frozen = frozen || (armed && !source);
    if (s < reach && !frozen && source && config.alpha_interval > 0 && s > 0 && s % config.alpha_interval == 0) {
      const double grown = config.alpha.grow(alpha, gap);
      armed = armed || grown != alpha;
      alpha = grown;
    }
    const ProxyCoefficients coeffs{alpha, config.beta, config.gamma};
    Tensor dy(y.shape());
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const auto g = proxy_logit_gradient(row(y, i), targets.sources[i], coeffs);
      std::copy(g.begin(), g.end(), dy.data() + i * g.size());
    }
    const Tape tape = record_forward(current, targets.inputs, canonical);
    const std::vector<float> grad = backward(current, tape, dy, canonical);
    const double shrink = 1.0 / (1.0 + 2.0 * lr * reg_weight);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      if (!trainable[i]) continue;
      theta[i] = (theta[i] - lr * static_cast<double>(grad[i]) + 2.0 * lr * reg_weight * anchor[i]) * shrink;
      rounded[i] = static_cast<float>(theta[i]);
      if (!std::isfinite(rounded[i])) {
        throw NumericError("shape_boundary: non-finite parameter at step " + std::to_string(s));
      }
    }
    current.unflatten(rounded);
  }
  return current;
}

// Step 2: refinement candidates -------------------------------------------------------------

/// Permutes the contraction dimension of a FactoredLinear layer:
/// W1' = W1 P (columns), W2' = P^-1 W2 (rows), so W1' W2' = W1 W2 exactly.
/// `order[j]` names the original inner index placed at position j.
inline Model permute_candidate(const Model& model, std::size_t layer, std::span<const std::size_t> order) {
  if (layer >= model.depth() || model.layers[layer].kind != LayerKind::FactoredLinear) {
    throw Error("permute_candidate: layer " + std::to_string(layer) + " is not factored-linear");
  }
  const Tensor& w1 = model.layers[layer].params[0];
  const Tensor& w2 = model.layers[layer].params[1];
  const std::size_t in = w1.dim(0), inner = w1.dim(1), out = w2.dim(1);
  if (order.size() != inner) throw Error("permute_candidate: permutation length does not match inner dimension");
  std::vector<char> seen(inner, 0);
  for (std::size_t j : order) {
    if (j >= inner || seen[j]) throw Error("permute_candidate: not a permutation");
    seen[j] = 1;
  }
  Model result = model;
  Tensor& p1 = result.layers[layer].params[0];
  Tensor& p2 = result.layers[layer].params[1];
  for (std::size_t r = 0; r < in; ++r) {
    for (std::size_t j = 0; j < inner; ++j) p1[r * inner + j] = w1[r * inner + order[j]];
  }
  for (std::size_t j = 0; j < inner; ++j) {
    for (std::size_t c = 0; c < out; ++c) p2[j * out + c] = w2[order[j] * out + c];
  }
  return result;
}

inline std::vector<std::size_t> random_permutation(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

struct BitFlip {
  std::size_t parameter = 0;
  unsigned bit = 0;

  friend bool operator==(const BitFlip&, const BitFlip&) = default;
};

using FlipRecord = std::vector<BitFlip>;

/// Highest mantissa bit a candidate may flip.
inline constexpr unsigned kMaxFlipBit = 15;

/// XORs every recorded bit; applying the same record twice restores the model.
inline Model apply_flips(const Model& model, const FlipRecord& record) {
  std::vector<float> theta = model.flatten();
  for (const auto& f : record) {
    if (f.parameter >= theta.size() || f.bit > 31) throw Error("apply_flips: flip out of range");
    theta[f.parameter] = flip_bit(theta[f.parameter], f.bit);
  }
  Model out = model;
  out.unflatten(theta);
  return out;
}

struct FlipCandidate {
  Model model;
  FlipRecord record;
};

/// Flips `k` distinct (parameter, mantissa bit 0..15) positions drawn uniformly over the
/// masked parameters. Draws that would make any parameter non-finite are redrawn.
inline FlipCandidate bitflip_candidate(const Model& model, std::size_t k, std::mt19937_64& rng,
                                       const std::optional<std::set<std::size_t>>& layer_mask = std::nullopt) {
  if (k < 1) throw Error("bitflip_candidate: k must be >= 1");
  const auto eligible = masked_parameters(model, layer_mask);
  if (eligible.empty()) throw Error("bitflip_candidate: layer mask selects no parameters");
  if (k > eligible.size() * (kMaxFlipBit + 1)) throw Error("bitflip_candidate: k exceeds available bits");
  const std::vector<float> theta = model.flatten();
  std::uniform_int_distribution<std::size_t> pick(0, eligible.size() - 1);
  std::uniform_int_distribution<unsigned> bit(0, kMaxFlipBit);
  for (;;) {
    FlipRecord record;
    while (record.size() < k) {
      BitFlip f{eligible[pick(rng)], bit(rng)};
      if (std::find(record.begin(), record.end(), f) == record.end()) record.push_back(f);
    }
    std::vector<float> flipped = theta;
    bool finite = true;
    for (const auto& f : record) {
      flipped[f.parameter] = flip_bit(flipped[f.parameter], f.bit);
    }
    for (const auto& f : record) finite = finite && std::isfinite(flipped[f.parameter]);
    if (!finite) continue;
    Model out = model;
    out.unflatten(flipped);
    return {std::move(out), std::move(record)};
  }
}

// Trigger predicates ------------------------------------------------------------------------

/// Profiles and reference data shared by every candidate check of one attack run.
struct AttackContext {
  const BackendProfile* h1 = nullptr;
  std::vector<const BackendProfile*> h2;
  const BackendProfile* canonical = nullptr;
  const Split* validation = nullptr;
  double baseline_accuracy = 0.0;  ///< accuracy of theta_bar on `validation` under h1
};

/// Per-target prediction on h1 and on each h2 profile; `strict` is false if any of these
/// predictions came from an exact top-2 tie.
struct TriggerEvaluation {
  std::vector<std::size_t> on_h1;
  std::vector<std::vector<std::size_t>> on_h2;
  std::vector<bool> target_active;
  bool strict = true;

  bool all_active() const {
    return std::all_of(target_active.begin(), target_active.end(), [](bool b) { return b; });
  }
  std::size_t active_count() const {
    return static_cast<std::size_t>(std::count(target_active.begin(), target_active.end(), true));
  }
};

inline TriggerEvaluation evaluate_trigger(const Model& model, const TargetSet& targets, const AttackContext& ctx,
                                          TriggerMode mode) {
  TriggerEvaluation ev;
  const std::size_t n = targets.size();
  ev.target_active.assign(n, true);
  std::vector<bool> tied(n, false);
  auto classify = [&](const BackendProfile& p) {
    const Tensor y = forward(model, targets.inputs, p);
    std::vector<std::size_t> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = argmax(row(y, i));
      if (top_two_tied(row(y, i))) tied[i] = true;
    }
    return out;
  };
  ev.on_h1 = classify(*ctx.h1);
  for (const auto* p : ctx.h2) ev.on_h2.push_back(classify(*p));
  for (std::size_t i = 0; i < n; ++i) {
    bool active = !tied[i];
    if (mode == TriggerMode::Pairwise) {
      active = active && ev.on_h1[i] != ev.on_h2[0][i];
    } else {
      active = active && ev.on_h1[i] != targets.sources[i];
      for (const auto& preds : ev.on_h2) active = active && preds[i] == targets.sources[i];
    }
    ev.target_active[i] = active;
    ev.strict = ev.strict && !tied[i];
  }
  return ev;
}

/// Trigger holds for every target and the candidate keeps >= rho of baseline accuracy.
inline bool qualifies(const Model& candidate, const TargetSet& targets, const AttackContext& ctx,
                      const AttackConfig& config, double* accuracy_out = nullptr) {
  if (!evaluate_trigger(candidate, targets, ctx, config.mode).all_active()) return false;
  const double acc = accuracy(candidate, *ctx.validation, *ctx.h1);
  if (accuracy_out) *accuracy_out = acc;
  return acc >= config.rho * ctx.baseline_accuracy;
}

struct RefinedCandidate {
  Model model;
  Mechanism mechanism = Mechanism::None;
  std::size_t candidate_index = 0;
  FlipRecord flips;
  std::optional<std::size_t> permuted_layer;
  std::vector<std::size_t> permutation;
};

/// Builds up to m candidates in a fixed order (all permutations, then all bit-flip sets),
/// each seeded from (run seed, iteration, candidate index), and returns the first one that
/// qualifies. Permutation candidates are skipped when no FactoredLinear layer is modifiable.
inline std::optional<RefinedCandidate> refine(const Model& shaped, const TargetSet& targets, const AttackConfig& config,
                                              const AttackContext& ctx, std::size_t iteration) {
  const bool use_perm = config.variant == AttackVariant::Perm || config.variant == AttackVariant::Full;
  const bool use_flip = config.variant == AttackVariant::Flip || config.variant == AttackVariant::Full;
  std::vector<std::size_t> factored;
  for (std::size_t li = 0; li < shaped.depth(); ++li) {
    if (shaped.layers[li].kind == LayerKind::FactoredLinear && (!config.layer_mask || config.layer_mask->count(li))) {
      factored.push_back(li);
    }
  }
  if (use_perm && !factored.empty()) {
    for (std::size_t c = 0; c < config.m_perm; ++c) {
      std::mt19937_64 rng(mix_seed(config.seed, iteration, c, 1));
      const std::size_t layer = factored[std::uniform_int_distribution<std::size_t>(0, factored.size() - 1)(rng)];
      auto order = random_permutation(shaped.layers[layer].params[0].dim(1), rng);
      Model candidate = permute_candidate(shaped, layer, order);
      if (qualifies(candidate, targets, ctx, config)) {
        return RefinedCandidate{std::move(candidate), Mechanism::Permutation, c, {}, layer, std::move(order)};
      }
    }
  }
  if (use_flip && !masked_parameters(shaped, config.layer_mask).empty()) {
    for (std::size_t c = 0; c < config.m_flip; ++c) {
      std::mt19937_64 rng(mix_seed(config.seed, iteration, config.m_perm + c, 2));
      FlipCandidate fc = bitflip_candidate(shaped, config.k_bits, rng, config.layer_mask);
      if (qualifies(fc.model, targets, ctx, config)) {
        return RefinedCandidate{std::move(fc.model), Mechanism::BitFlip, config.m_perm + c, std::move(fc.record), {}, {}};
      }
    }
  }
  return std::nullopt;
}

// Alternating optimization ------------------------------------------------------------------

struct BackdoorResult {
  Model model;
  TargetSet targets;
  std::vector<std::string> profiles;               ///< h1 followed by every h2
  std::vector<std::vector<std::size_t>> predictions;  ///< [profile][target]
  bool success = false;
  std::size_t targets_active = 0;  ///< targets whose individual trigger holds on `model`
  double accuracy = 0.0;
  double retained_accuracy = 0.0;  ///< accuracy / baseline accuracy
  std::size_t iterations = 0;
  Mechanism mechanism = Mechanism::None;
  FlipRecord flips;
  std::optional<std::size_t> permuted_layer;
  std::vector<float> gap_history;  ///< max top-2 gap on h1 after each shaping step
};

/// Alternates boundary shaping and refinement for up to `max_iters` iterations. The shaped
/// model itself is checked before any candidate is built (this is the whole of the base
/// variant); a failed iteration continues from the shaped model.
inline BackdoorResult run_attack(const Model& theta_bar, const TargetSet& targets, const AttackConfig& config,
                                 const AttackContext& ctx) {
  config.validate();
  if (targets.size() == 0) throw Error("run_attack: at least one target is required");
  const Tensor clean = forward(theta_bar, targets.inputs, *ctx.h1);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (argmax(row(clean, i)) != targets.sources[i]) {
      throw Error("run_attack: target " + std::to_string(i) + " is not classified as its source class on h1");
    }
  }

  BackdoorResult result;
  result.targets = targets;
  result.profiles.push_back(ctx.h1->name);
  for (const auto* p : ctx.h2) result.profiles.push_back(p->name);

  Model current = theta_bar;
  double alpha = config.alpha.initial;
  std::optional<RefinedCandidate> found;
  for (std::size_t iter = 0; iter < config.max_iters && !found; ++iter) {
    result.iterations = iter + 1;
    current = shape_boundary(current, theta_bar, targets, config, alpha, *ctx.h1, *ctx.canonical);
    const float gap = max_gap(current, targets, *ctx.h1);
    result.gap_history.push_back(gap);
    if (qualifies(current, targets, ctx, config)) {
      found = RefinedCandidate{current, Mechanism::None, 0, {}, {}, {}};
      break;
    }
    if (config.variant != AttackVariant::Base) found = refine(current, targets, config, ctx, iter);
    alpha = config.alpha.after_iteration(alpha, gap);
  }

  result.model = found ? std::move(found->model) : std::move(current);
  if (found) {
    result.mechanism = found->mechanism;
    result.flips = std::move(found->flips);
    result.permuted_layer = found->permuted_layer;
  }
  const TriggerEvaluation ev = evaluate_trigger(result.model, targets, ctx, config.mode);
  result.predictions.push_back(ev.on_h1);
  for (const auto& p : ev.on_h2) result.predictions.push_back(p);
  result.targets_active = ev.active_count();
  result.accuracy = accuracy(result.model, *ctx.validation, *ctx.h1);
  result.retained_accuracy = ctx.baseline_accuracy > 0.0 ? result.accuracy / ctx.baseline_accuracy : 0.0;
  result.success = found.has_value();
  return result;
}

}  // namespace hwbd
