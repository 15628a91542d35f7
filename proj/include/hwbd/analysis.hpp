#pragma once

#include <cmath>
#include <cstdio>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "hwbd/engine.hpp"
#include "hwbd/error.hpp"
#include "hwbd/profile.hpp"

namespace hwbd {

// Cross-backend activation patching. A patch point i in [0, L] (L = model depth, counted in
// engine layers, activations included) runs layers [0, i) under h1, hands the activation over
// unchanged, and runs layers [i, L) under h2. So i = 0 is a plain h2 forward and i = L a
// plain h1 forward.

inline Tensor patched_forward(const Model& model, const Tensor& x, const BackendProfile& h1,
                              const BackendProfile& h2, std::size_t i) {
  if (i > model.depth()) {
    throw Error("patched_forward: patch point " + std::to_string(i) + " outside [0, " +
                std::to_string(model.depth()) + "]");
  }
  Tensor act = forward_layers(model, detail::as_batch(model, x), h1, 0, i);
  return forward_layers(model, std::move(act), h2, i, model.depth());
}

/// logit_a - logit_b of the patched forward at i, for explicit classes (no split check).
inline double class_difference(const Model& model, const Tensor& x, const BackendProfile& h1,
                               const BackendProfile& h2, std::size_t i, std::size_t a, std::size_t b) {
  const Tensor y = patched_forward(model, x, h1, h2, i);
  if (y.dim(0) != 1) throw ShapeError("class_difference: expects a single input");
  if (a >= y.dim(1) || b >= y.dim(1)) throw Error("class_difference: class index out of range");
  return static_cast<double>(y.at(0, a)) - static_cast<double>(y.at(0, b));
}

struct SplitDecision {
  std::size_t a = 0;  ///< prediction on h1
  std::size_t b = 0;  ///< prediction on h2
};

inline SplitDecision split_decision(const Model& model, const Tensor& x, const BackendProfile& h1,
                                    const BackendProfile& h2) {
  SplitDecision s{predict(model, x, h1), predict(model, x, h2)};
  if (s.a == s.b) throw Error("no split decision: both profiles predict class " + std::to_string(s.a));
  return s;
}

inline double delta(const Model& model, const Tensor& x, const BackendProfile& h1, const BackendProfile& h2,
                    std::size_t i) {
  const SplitDecision s = split_decision(model, x, h1, h2);
  return class_difference(model, x, h1, h2, i, s.a, s.b);
}

struct PatchTrace {
  std::string model_id;
  std::string h1;
  std::string h2;
  std::size_t target_id = 0;
  std::size_t a = 0;
  std::size_t b = 0;
  std::vector<double> deltas;  ///< one per patch point, 0..L

  std::string pair() const { return h1 + "->" + h2; }

  /// Divided by max |delta|, so values lie in [-1, 1] with signs and zeros preserved.
  std::vector<double> normalized() const {
    double scale = 0.0;
    for (double d : deltas) scale = std::max(scale, std::abs(d));
    std::vector<double> out(deltas.size(), 0.0);
    if (scale == 0.0) return out;
    for (std::size_t i = 0; i < deltas.size(); ++i) out[i] = deltas[i] / scale;
    return out;
  }

  std::size_t sign_changes() const {
    std::size_t n = 0;
    for (std::size_t i = 1; i < deltas.size(); ++i) n += (deltas[i - 1] < 0.0) != (deltas[i] < 0.0);
    return n;
  }
};

/// Trace for explicit classes; works on any profile pair, including bit-identical ones.
inline PatchTrace class_trace(const Model& model, const Tensor& x, const BackendProfile& h1,
                              const BackendProfile& h2, std::size_t a, std::size_t b) {
  PatchTrace t;
  t.h1 = h1.name;
  t.h2 = h2.name;
  t.a = a;
  t.b = b;
  for (std::size_t i = 0; i <= model.depth(); ++i) t.deltas.push_back(class_difference(model, x, h1, h2, i, a, b));
  return t;
}

/// Trace of a split decision; throws "no split decision" when the profiles agree.
inline PatchTrace build_trace(const Model& model, const Tensor& x, const BackendProfile& h1,
                              const BackendProfile& h2, std::string model_id = {}, std::size_t target_id = 0) {
  const SplitDecision s = split_decision(model, x, h1, h2);
  PatchTrace t = class_trace(model, x, h1, h2, s.a, s.b);
  t.model_id = std::move(model_id);
  t.target_id = target_id;
  return t;
}

namespace detail {

inline void check_aggregate(std::span<const PatchTrace> traces, std::size_t i) {
  if (traces.empty()) throw Error("aggregate_delta: empty trace set");
  if (i == 0) throw Error("aggregate_delta: layer index must be >= 1");
  for (const auto& t : traces) {
    if (t.deltas.size() != traces.front().deltas.size() || t.h1 != traces.front().h1 || t.h2 != traces.front().h2) {
      throw Error("aggregate_delta: traces differ in architecture or profile pair");
    }
  }
  if (i >= traces.front().deltas.size()) throw Error("aggregate_delta: layer index out of range");
}

}  // namespace detail

/// Sum over traces of |delta_i - delta_{i-1}|: how much layer i moves the decision.
inline double aggregate_delta(std::span<const PatchTrace> traces, std::size_t i) {
  detail::check_aggregate(traces, i);
  double sum = 0.0;
  for (const auto& t : traces) sum += std::abs(t.deltas[i] - t.deltas[i - 1]);
  return sum;
}

/// Same, on each trace's normalized view (every trace weighs equally).
inline double aggregate_delta_normalized(std::span<const PatchTrace> traces, std::size_t i) {
  detail::check_aggregate(traces, i);
  double sum = 0.0;
  for (const auto& t : traces) {
    const auto n = t.normalized();
    sum += std::abs(n[i] - n[i - 1]);
  }
  return sum;
}

/// Delta for every layer 1..L (index 0 of the result is layer 1).
inline std::vector<double> aggregate_profile(std::span<const PatchTrace> traces, bool normalized = false) {
  if (traces.empty()) throw Error("aggregate_delta: empty trace set");
  std::vector<double> out;
  for (std::size_t i = 1; i < traces.front().deltas.size(); ++i) {
    out.push_back(normalized ? aggregate_delta_normalized(traces, i) : aggregate_delta(traces, i));
  }
  return out;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_traces_csv(std::ostream& out, std::span<const PatchTrace> traces) {
  out << "model_id,pair,target_id,i,delta,delta_normalized\n";
  for (const auto& t : traces) {
    const auto n = t.normalized();
    for (std::size_t i = 0; i < t.deltas.size(); ++i) {
      out << t.model_id << ',' << t.pair() << ',' << t.target_id << ',' << i << ',' << format_double(t.deltas[i])
          << ',' << format_double(n[i]) << '\n';
    }
  }
}

}  // namespace hwbd
