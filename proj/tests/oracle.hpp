// Independent reference implementations used by the tests.
//
// Exact arithmetic: every value is a GMP rational, every rounding is explicit
// round-to-nearest-even into a binary format. Nothing here calls the engine's kernels.
//
// Double-precision forward: a direct loop implementation of the model layers, used as the
// ground truth for finite-difference gradient checks.
#pragma once

#include <gmpxx.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include "hwbd/engine.hpp"
#include "hwbd/profile.hpp"

namespace oracle {

struct Format {
  int precision;  // significand bits, hidden bit included
  int emin;       // exponent of the smallest normal
  int emax;       // exponent of the largest finite value
};

inline constexpr Format kBinary32{24, -126, 127};
inline constexpr Format kBinary64{53, -1022, 1023};

inline mpq_class exact(double v) {
  mpq_class q;
  mpq_set_d(q.get_mpq_t(), v);
  return q;
}

inline mpq_class pow2(long e) {
  mpq_class q = 1;
  if (e >= 0) {
    mpq_mul_2exp(q.get_mpq_t(), q.get_mpq_t(), static_cast<mp_bitcnt_t>(e));
  } else {
    mpq_div_2exp(q.get_mpq_t(), q.get_mpq_t(), static_cast<mp_bitcnt_t>(-e));
  }
  return q;
}

/// floor(log2(a)) for a > 0.
inline long floor_log2(const mpq_class& a) {
  long e = static_cast<long>(mpz_sizeinbase(a.get_num_mpz_t(), 2)) -
           static_cast<long>(mpz_sizeinbase(a.get_den_mpz_t(), 2));
  while (a >= pow2(e + 1)) ++e;
  while (a < pow2(e)) --e;
  return e;
}

/// Nearest value of `f`, ties to even significand. Throws on overflow.
inline mpq_class round(const mpq_class& q, Format f) {
  if (q == 0) return 0;
  const int sign = sgn(q);
  const mpq_class a = abs(q);
  const long e = std::max<long>(floor_log2(a), f.emin);
  const mpq_class quantum = pow2(e - f.precision + 1);
  const mpq_class scaled = a / quantum;
  mpz_class m;
  mpz_fdiv_q(m.get_mpz_t(), scaled.get_num_mpz_t(), scaled.get_den_mpz_t());
  const mpq_class rest = scaled - mpq_class(m);
  const mpq_class half(1, 2);
  if (rest > half || (rest == half && mpz_odd_p(m.get_mpz_t()))) ++m;
  const mpq_class result = mpq_class(m) * quantum;
  const mpq_class largest = (pow2(f.precision) - 1) * pow2(f.emax - f.precision + 1);
  if (result > largest) throw std::overflow_error("oracle::round: overflow");
  return sign < 0 ? mpq_class(-result) : result;
}

inline float to_float(const mpq_class& q) {
  const mpq_class r = round(q, kBinary32);
  return static_cast<float>(r.get_d());  // exact: r is a binary32 value
}

/// Exact rational re-enactment of a profile's reduction of lhs[i] * rhs[i].
/// `batch_index` / `batch_size` describe the joint batch (only Interleaved profiles use it).
class Reduction {
 public:
  Reduction(const hwbd::BackendProfile& p, std::vector<float> lhs, std::vector<float> rhs, std::size_t batch_index = 0,
            std::size_t batch_size = 1)
      : p_(p), lhs_(std::move(lhs)), rhs_(std::move(rhs)) {
    fmt_ = p.accumulator == hwbd::Accumulator::F64 ? kBinary64 : kBinary32;
    const std::size_t n = lhs_.size();
    block_ = p.block_size;
    if (p.batch_tiling == hwbd::BatchTiling::Interleaved && batch_size > 1 && n > 0) {
      block_ = std::max<std::size_t>(1, p.block_size / batch_size);
      for (std::size_t t = 0; t < n; ++t) order_.push_back((t + batch_index * block_) % n);
    } else {
      for (std::size_t t = 0; t < n; ++t) order_.push_back(t);
    }
  }

  float result() const {
    const std::size_t n = order_.size();
    if (n == 0) return 0.0f;
    mpq_class acc;
    switch (p_.tree) {
      case hwbd::ReductionTree::Sequential: acc = run(0, n); break;
      case hwbd::ReductionTree::Pairwise: acc = tree(0, n); break;
      case hwbd::ReductionTree::Blocked: {
        acc = run(0, std::min(block_, n));
        for (std::size_t s = block_; s < n; s += block_) acc = round(acc + run(s, std::min(s + block_, n)), fmt_);
        break;
      }
    }
    return to_float(acc);
  }

 private:
  mpq_class product(std::size_t t) const { return exact(lhs_[order_[t]]) * exact(rhs_[order_[t]]); }

  mpq_class term(std::size_t t) const { return round(product(t), fmt_); }

  /// partial + term t: one rounding when fused, two otherwise.
  mpq_class add_term(const mpq_class& partial, std::size_t t) const {
    if (p_.fma) return round(partial + product(t), fmt_);
    return round(partial + term(t), fmt_);
  }

  mpq_class run(std::size_t first, std::size_t last) const {
    mpq_class acc = term(first);
    for (std::size_t t = first + 1; t < last; ++t) acc = add_term(acc, t);
    return acc;
  }

  mpq_class tree(std::size_t first, std::size_t last) const {
    const std::size_t len = last - first;
    if (len == 1) return term(first);
    const std::size_t mid = first + len - len / 2;  // left half gets ceil(len / 2)
    const mpq_class left = tree(first, mid);
    if (last - mid == 1) return add_term(left, mid);
    return round(left + tree(mid, last), fmt_);
  }

  const hwbd::BackendProfile& p_;
  std::vector<float> lhs_, rhs_;
  std::vector<std::size_t> order_;
  std::size_t block_ = 1;
  Format fmt_ = kBinary32;
};

inline float reduce_sum(const std::vector<float>& values, const hwbd::BackendProfile& p, std::size_t batch_index = 0,
                        std::size_t batch_size = 1) {
  return Reduction(p, values, std::vector<float>(values.size(), 1.0f), batch_index, batch_size).result();
}

// Double-precision forward pass -------------------------------------------------------------

/// Activations of one input; `pre_relu` collects every value that enters a ReLU, so callers
/// can keep finite differences away from kinks.
struct DoubleForward {
  std::vector<double> logits;
  std::vector<double> pre_relu;
};

/// Runs `model` with parameters `theta` (flat view, double) on one input.
inline DoubleForward forward_f64(const hwbd::Model& model, const std::vector<double>& theta,
                                 const std::vector<float>& input) {
  DoubleForward out;
  std::vector<double> x(input.begin(), input.end());
  hwbd::Shape shape = model.input_shape;
  std::size_t at = 0;
  auto take = [&](std::size_t n) {
    const double* p = theta.data() + at;
    at += n;
    return p;
  };
  for (const auto& layer : model.layers) {
    switch (layer.kind) {
      case hwbd::LayerKind::Linear:
      case hwbd::LayerKind::FactoredLinear: {
        std::vector<const double*> mats;
        std::vector<std::pair<std::size_t, std::size_t>> dims;
        const std::size_t nmat = layer.kind == hwbd::LayerKind::Linear ? 1 : 2;
        for (std::size_t m = 0; m < nmat; ++m) {
          dims.emplace_back(layer.params[m].dim(0), layer.params[m].dim(1));
          mats.push_back(take(layer.params[m].size()));
        }
        const double* bias = take(layer.params[nmat].size());
        for (std::size_t m = 0; m < nmat; ++m) {
          const auto [rows, cols] = dims[m];
          std::vector<double> y(cols, 0.0);
          for (std::size_t c = 0; c < cols; ++c) {
            for (std::size_t r = 0; r < rows; ++r) y[c] += x[r] * mats[m][r * cols + c];
          }
          x = std::move(y);
        }
        for (std::size_t c = 0; c < x.size(); ++c) x[c] += bias[c];
        shape = {x.size()};
        break;
      }
      case hwbd::LayerKind::Conv2d: {
        const auto& k = layer.params[0];
        const std::size_t oc = k.dim(0), ic = k.dim(1), kh = k.dim(2), kw = k.dim(3);
        const double* kernel = take(k.size());
        const double* bias = take(layer.params[1].size());
        const std::size_t h = shape[1], w = shape[2], s = layer.conv.stride, pad = layer.conv.padding;
        const std::size_t ho = (h + 2 * pad - kh) / s + 1, wo = (w + 2 * pad - kw) / s + 1;
        std::vector<double> y(oc * ho * wo, 0.0);
        for (std::size_t o = 0; o < oc; ++o) {
          for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
              double sum = bias[o];
              for (std::size_t c = 0; c < ic; ++c) {
                for (std::size_t ky = 0; ky < kh; ++ky) {
                  for (std::size_t kx = 0; kx < kw; ++kx) {
                    const long iy = static_cast<long>(oy * s + ky) - static_cast<long>(pad);
                    const long ix = static_cast<long>(ox * s + kx) - static_cast<long>(pad);
                    if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                    sum += x[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] *
                           kernel[((o * ic + c) * kh + ky) * kw + kx];
                  }
                }
              }
              y[(o * ho + oy) * wo + ox] = sum;
            }
          }
        }
        x = std::move(y);
        shape = {oc, ho, wo};
        break;
      }
      case hwbd::LayerKind::ReLU:
        for (double& v : x) {
          out.pre_relu.push_back(v);
          v = std::max(v, 0.0);
        }
        break;
      case hwbd::LayerKind::GlobalAvgPool: {
        const std::size_t c = shape[0], plane = shape[1] * shape[2];
        std::vector<double> y(c, 0.0);
        for (std::size_t i = 0; i < c; ++i) {
          for (std::size_t j = 0; j < plane; ++j) y[i] += x[i * plane + j];
          y[i] /= static_cast<double>(plane);
        }
        x = std::move(y);
        shape = {c};
        break;
      }
    }
  }
  out.logits = std::move(x);
  return out;
}

/// alpha * (top - runner-up) + beta * max(best other - y_t, 0), in double.
inline double boundary_loss(const std::vector<double>& y, std::size_t t, double alpha, double beta) {
  std::vector<double> sorted = y;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  double best_other = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < y.size(); ++j) {
    if (j != t) best_other = std::max(best_other, y[j]);
  }
  return alpha * (sorted[0] - sorted[1]) + beta * std::max(best_other - y[t], 0.0);
}

/// Distance of the logits from every kink of `boundary_loss`: the top-2 ordering, the
/// runner-up/third ordering, and the class-term switch.
inline double boundary_margin(const std::vector<double>& y, std::size_t t) {
  std::vector<double> sorted = y;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  double margin = sorted[0] - sorted[1];
  if (sorted.size() > 2) margin = std::min(margin, sorted[1] - sorted[2]);
  double best_other = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < y.size(); ++j) {
    if (j != t) best_other = std::max(best_other, y[j]);
  }
  return std::min(margin, std::abs(best_other - y[t]));
}

}  // namespace oracle
