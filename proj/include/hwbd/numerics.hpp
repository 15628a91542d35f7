#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "hwbd/error.hpp"
#include "hwbd/profile.hpp"
#include "hwbd/tensor.hpp"

namespace hwbd {

/// Position of a reduction inside a batch. Only Interleaved profiles look at it.
struct TileContext {
  std::size_t batch_index = 0;
  std::size_t batch_size = 1;
};

namespace detail {

/// Visiting order of the inner dimension plus the block length actually used.
struct ReductionPlan {
  std::size_t rotation = 0;
  std::size_t block = 1;
};

inline ReductionPlan plan_reduction(std::size_t n, const BackendProfile& profile, TileContext tile) {
  ReductionPlan plan{0, profile.block_size};
  if (profile.batch_tiling == BatchTiling::Interleaved && tile.batch_size > 1 && n > 0) {
    // The batch shares one tile: each item gets a thinner slice and starts at its own offset.
    plan.block = std::max<std::size_t>(1, profile.block_size / tile.batch_size);
    plan.rotation = (tile.batch_index * plan.block) % n;
  }
  return plan;
}

/// Sum of lhs(i) * rhs(i) for i in [0, n) following the profile's rounding sequence.
/// `Acc` is float or double; the caller rounds the result to float.
template <class Acc, class Lhs, class Rhs>
class Reducer {
 public:
  Reducer(std::size_t n, Lhs lhs, Rhs rhs, bool fma, std::size_t rotation)
      : n_(n), lhs_(lhs), rhs_(rhs), fma_(fma), rotation_(rotation) {}

  Acc term(std::size_t t) const {
    const std::size_t i = index(t);
    return static_cast<Acc>(static_cast<Acc>(lhs_(i)) * static_cast<Acc>(rhs_(i)));
  }

  Acc accumulate(Acc acc, std::size_t t) const {
    const std::size_t i = index(t);
    if (fma_) return std::fma(static_cast<Acc>(lhs_(i)), static_cast<Acc>(rhs_(i)), acc);
    const Acc product = static_cast<Acc>(lhs_(i)) * static_cast<Acc>(rhs_(i));
    return static_cast<Acc>(acc + product);
  }

  Acc sequential(std::size_t first, std::size_t last) const {
    Acc acc = term(first);
    for (std::size_t t = first + 1; t < last; ++t) acc = accumulate(acc, t);
    return acc;
  }

  Acc pairwise(std::size_t first, std::size_t last) const {
    const std::size_t len = last - first;
    if (len == 1) return term(first);
    const std::size_t mid = first + (len + 1) / 2;
    const Acc left = pairwise(first, mid);
    if (last - mid == 1) return accumulate(left, mid);
    return static_cast<Acc>(left + pairwise(mid, last));
  }

  Acc blocked(std::size_t block) const {
    Acc total = sequential(0, std::min(block, n_));
    for (std::size_t start = block; start < n_; start += block) {
      total = static_cast<Acc>(total + sequential(start, std::min(start + block, n_)));
    }
    return total;
  }

 private:
  std::size_t index(std::size_t t) const {
    const std::size_t i = t + rotation_;
    return i >= n_ ? i - n_ : i;
  }

  std::size_t n_;
  Lhs lhs_;
  Rhs rhs_;
  bool fma_;
  std::size_t rotation_;
};

template <class Acc, class Lhs, class Rhs>
Acc reduce_with(std::size_t n, Lhs lhs, Rhs rhs, const BackendProfile& profile, TileContext tile) {
  if (n == 0) return Acc{0};
  const ReductionPlan plan = plan_reduction(n, profile, tile);
  const Reducer<Acc, Lhs, Rhs> reducer(n, lhs, rhs, profile.fma, plan.rotation);
  switch (profile.tree) {
    case ReductionTree::Sequential: return reducer.sequential(0, n);
    case ReductionTree::Pairwise: return reducer.pairwise(0, n);
    case ReductionTree::Blocked: return reducer.blocked(plan.block);
  }
  return reducer.sequential(0, n);
}

}  // namespace detail

/// Dot-product style reduction of lhs(i) * rhs(i), i in [0, n), rounded to float.
/// No finiteness check; callers report overflow with their own kernel name.
template <class Lhs, class Rhs>
float reduce_products(std::size_t n, Lhs lhs, Rhs rhs, const BackendProfile& profile,
                      TileContext tile = {}) {
  if (profile.accumulator == Accumulator::F64) {
    return static_cast<float>(detail::reduce_with<double>(n, lhs, rhs, profile, tile));
  }
  return detail::reduce_with<float>(n, lhs, rhs, profile, tile);
}

inline float reduce_sum(std::span<const float> values, const BackendProfile& profile,
                        TileContext tile = {}) {
  const float result = reduce_products(
      values.size(), [&](std::size_t i) { return values[i]; }, [](std::size_t) { return 1.0f; },
      profile, tile);
  if (!std::isfinite(result)) throw OverflowError("reduce_sum");
  return result;
}

inline float dot(std::span<const float> a, std::span<const float> b, const BackendProfile& profile,
                 TileContext tile = {}) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  const float result = reduce_products(
      a.size(), [&](std::size_t i) { return a[i]; }, [&](std::size_t i) { return b[i]; }, profile,
      tile);
  if (!std::isfinite(result)) throw OverflowError("dot");
  return result;
}

/// How the rows of a GEMM left operand map onto batch items.
struct BatchGeometry {
  /// Consecutive rows that belong to one batch item (e.g. output pixels of a convolution).
  std::size_t rows_per_item = 1;
  /// When false every item is tiled as if it ran alone (batch of one).
  bool joint = false;
};

namespace detail {

inline TileContext tile_for_row(std::size_t row, std::size_t rows, BatchGeometry geometry) {
  if (!geometry.joint) return {};
  const std::size_t per = std::max<std::size_t>(1, geometry.rows_per_item);
  return {row / per, std::max<std::size_t>(1, rows / per)};
}

inline Tensor transpose2d(const Tensor& m) {
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  Tensor out({cols, rows});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = m[r * cols + c];
  }
  return out;
}

}  // namespace detail

/// C = A[m x k] * B[k x n]; every element is one profile-ordered reduction.
inline Tensor gemm(const Tensor& a, const Tensor& b, const BackendProfile& profile,
                   BatchGeometry geometry = {}, const std::string& kernel = "gemm") {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError(kernel + ": operands must be matrices");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError(kernel + ": inner dimensions differ " + shape_string(a.shape()) + " * " +
                     shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const Tensor bt = detail::transpose2d(b);
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a.data() + i * k;
    const TileContext tile = detail::tile_for_row(i, m, geometry);
    for (std::size_t j = 0; j < n; ++j) {
      const float* bcol = bt.data() + j * k;
      const float v = reduce_products(
          k, [arow](std::size_t t) { return arow[t]; }, [bcol](std::size_t t) { return bcol[t]; },
          profile, tile);
      if (!std::isfinite(v)) throw OverflowError(kernel);
      c[i * n + j] = v;
    }
  }
  return c;
}

struct Conv2dGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

inline std::size_t conv_output_extent(std::size_t in, std::size_t kernel, Conv2dGeometry g) {
  if (in + 2 * g.padding < kernel || g.stride == 0) throw ShapeError("conv2d: kernel larger than padded input");
  return (in + 2 * g.padding - kernel) / g.stride + 1;
}

/// Unfolds input [N, C, H, W] into patch rows [N*Ho*Wo, C*kh*kw].
inline Tensor im2col(const Tensor& input, std::size_t kh, std::size_t kw, Conv2dGeometry g) {
  const std::size_t batch = input.dim(0), channels = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t ho = conv_output_extent(h, kh, g), wo = conv_output_extent(w, kw, g);
  const std::size_t cols = channels * kh * kw;
  Tensor patches({batch * ho * wo, cols});
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        float* row = patches.data() + ((n * ho + oy) * wo + ox) * cols;
        for (std::size_t c = 0; c < channels; ++c) {
          for (std::size_t ky = 0; ky < kh; ++ky) {
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.padding);
              const auto x = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.padding);
              float v = 0.0f;
              if (y >= 0 && x >= 0 && y < static_cast<std::ptrdiff_t>(h) && x < static_cast<std::ptrdiff_t>(w)) {
                v = input[((n * channels + c) * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x)];
              }
              row[(c * kh + ky) * kw + kx] = v;
            }
          }
        }
      }
    }
  }
  return patches;
}

/// Adjoint of im2col: scatters patch-row gradients back onto an [N, C, H, W] tensor.
inline Tensor col2im(const Tensor& patches, const Shape& input_shape, std::size_t kh, std::size_t kw,
                     Conv2dGeometry g) {
  const std::size_t batch = input_shape[0], channels = input_shape[1], h = input_shape[2], w = input_shape[3];
  const std::size_t ho = conv_output_extent(h, kh, g), wo = conv_output_extent(w, kw, g);
  const std::size_t cols = channels * kh * kw;
  // Accumulated in double so the adjoint does not depend on visiting order.
  std::vector<double> acc(shape_size(input_shape), 0.0);
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const float* row = patches.data() + ((n * ho + oy) * wo + ox) * cols;
        for (std::size_t c = 0; c < channels; ++c) {
          for (std::size_t ky = 0; ky < kh; ++ky) {
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.padding);
              const auto x = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.padding);
              if (y >= 0 && x >= 0 && y < static_cast<std::ptrdiff_t>(h) && x < static_cast<std::ptrdiff_t>(w)) {
                acc[((n * channels + c) * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x)] +=
                    row[(c * kh + ky) * kw + kx];
              }
            }
          }
        }
      }
    }
  }
  Tensor out(input_shape);
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i]);
  return out;
}

/// Convolution of input [N, C, H, W] with kernel [O, C, kh, kw] -> [N, O, Ho, Wo], computed as
/// im2col followed by a profile-governed GEMM.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const BackendProfile& profile,
                     Conv2dGeometry g = {}, bool joint_batch = false) {
  if (input.rank() != 4 || kernel.rank() != 4) throw ShapeError("conv2d: expected 4-d input and kernel");
  if (input.dim(1) != kernel.dim(1)) {
    throw ShapeError("conv2d: channel mismatch " + shape_string(input.shape()) + " vs " +
                     shape_string(kernel.shape()));
  }
  const std::size_t batch = input.dim(0), out_channels = kernel.dim(0);
  const std::size_t kh = kernel.dim(2), kw = kernel.dim(3);
  const std::size_t ho = conv_output_extent(input.dim(2), kh, g);
  const std::size_t wo = conv_output_extent(input.dim(3), kw, g);
  const Tensor patches = im2col(input, kh, kw, g);
  const Tensor weights = detail::transpose2d(kernel.reshaped({out_channels, kernel.size() / out_channels}));
  const Tensor rows = gemm(patches, weights, profile, {ho * wo, joint_batch}, "conv2d");
  Tensor out({batch, out_channels, ho, wo});
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t p = 0; p < ho * wo; ++p) {
      for (std::size_t o = 0; o < out_channels; ++o) {
        out[(n * out_channels + o) * ho * wo + p] = rows[(n * ho * wo + p) * out_channels + o];
      }
    }
  }
  return out;
}

/// trace(M^T M) for M = fill * ones(n, n), evaluated once per profile.
inline std::vector<float> frobenius_demo(std::size_t n, float fill,
                                         std::span<const BackendProfile> profiles) {
  if (n < 1) throw ShapeError("frobenius_demo: n must be >= 1");
  const Tensor m({n, n}, fill);
  const Tensor mt = detail::transpose2d(m);
  std::vector<float> out;
  out.reserve(profiles.size());
  for (const auto& profile : profiles) {
    const Tensor gram = gemm(mt, m, profile);
    std::vector<float> diagonal(n);
    for (std::size_t i = 0; i < n; ++i) diagonal[i] = gram[i * n + i];
    out.push_back(reduce_sum(diagonal, profile));
  }
  return out;
}

}  // namespace hwbd
