#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hwbd/error.hpp"
#include "hwbd/numerics.hpp"
#include "hwbd/profile.hpp"
#include "hwbd/tensor.hpp"

namespace hwbd {

enum class LayerKind { Linear, FactoredLinear, Conv2d, ReLU, GlobalAvgPool };

inline std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Linear: return "linear";
    case LayerKind::FactoredLinear: return "factored-linear";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::ReLU: return "relu";
    case LayerKind::GlobalAvgPool: return "global-avg-pool";
  }
  return "?";
}

inline LayerKind parse_layer_kind(std::string_view s) {
  if (s == "linear") return LayerKind::Linear;
  if (s == "factored-linear") return LayerKind::FactoredLinear;
  if (s == "conv2d") return LayerKind::Conv2d;
  if (s == "relu") return LayerKind::ReLU;
  if (s == "global-avg-pool") return LayerKind::GlobalAvgPool;
  throw Error("unknown layer kind '" + std::string(s) + "'");
}

/// One engine layer. Parameter tensors by kind:
///   Linear          W [in x out], b [out]
///   FactoredLinear  W1 [in x mid], W2 [mid x out], b [out]   (x W1) W2 + b, no nonlinearity between
///   Conv2d          K [out_ch x in_ch x kh x kw], b [out_ch]
///   ReLU, GlobalAvgPool: none
struct Layer {
  LayerKind kind = LayerKind::ReLU;
  std::vector<Tensor> params;
  Conv2dGeometry conv;

  static Layer linear(Tensor w, Tensor b) { return {LayerKind::Linear, {std::move(w), std::move(b)}, {}}; }
  static Layer factored_linear(Tensor w1, Tensor w2, Tensor b) {
    return {LayerKind::FactoredLinear, {std::move(w1), std::move(w2), std::move(b)}, {}};
  }
  static Layer conv2d(Tensor k, Tensor b, Conv2dGeometry g) { return {LayerKind::Conv2d, {std::move(k), std::move(b)}, g}; }
  static Layer relu() { return {LayerKind::ReLU, {}, {}}; }
  static Layer global_avg_pool() { return {LayerKind::GlobalAvgPool, {}, {}}; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.size();
    return n;
  }

  /// Output shape for one item given the per-item input shape.
  Shape output_shape(const Shape& in) const {
    switch (kind) {
      case LayerKind::Linear:
      case LayerKind::FactoredLinear: {
        const Tensor& first = params.at(0);
        if (shape_size(in) != first.dim(0)) {
          throw ShapeError(std::string(to_string(kind)) + ": input " + shape_string(in) + " does not match weight " +
                           shape_string(first.shape()));
        }
        const Tensor& last = params.at(kind == LayerKind::Linear ? 0 : 1);
        if (kind == LayerKind::FactoredLinear && params[0].dim(1) != params[1].dim(0)) {
          throw ShapeError("factored-linear: inner dimensions of W1 and W2 differ");
        }
        if (params.back().size() != last.dim(1)) throw ShapeError("linear: bias length mismatch");
        return {last.dim(1)};
      }
      case LayerKind::Conv2d: {
        const Tensor& k = params.at(0);
        if (in.size() != 3 || in[0] != k.dim(1)) {
          throw ShapeError("conv2d: input " + shape_string(in) + " does not match kernel " + shape_string(k.shape()));
        }
        if (params.at(1).size() != k.dim(0)) throw ShapeError("conv2d: bias length mismatch");
        return {k.dim(0), conv_output_extent(in[1], k.dim(2), conv), conv_output_extent(in[2], k.dim(3), conv)};
      }
      case LayerKind::ReLU: return in;
      case LayerKind::GlobalAvgPool:
        if (in.size() != 3) throw ShapeError("global-avg-pool: expected [C, H, W] input, got " + shape_string(in));
        return {in[0]};
    }
    return in;
  }
};

/// Ordered layer stack. The flat parameter view concatenates, in layer order and then
/// in parameter order within a layer, every tensor's row-major payload.
struct Model {
  Shape input_shape;
  std::size_t num_classes = 0;
  std::vector<Layer> layers;

  std::size_t depth() const noexcept { return layers.size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.parameter_count();
    return n;
  }

  /// Flat offset of each layer's first parameter; one extra entry holds the total.
  std::vector<std::size_t> layer_offsets() const {
    std::vector<std::size_t> offsets{0};
    for (const auto& l : layers) offsets.push_back(offsets.back() + l.parameter_count());
    return offsets;
  }

  std::vector<float> flatten() const {
    std::vector<float> flat;
    flat.reserve(parameter_count());
    for (const auto& l : layers) {
      for (const auto& p : l.params) flat.insert(flat.end(), p.storage().begin(), p.storage().end());
    }
    return flat;
  }

  void unflatten(std::span<const float> flat) {
    if (flat.size() != parameter_count()) throw ShapeError("unflatten: parameter count mismatch");
    std::size_t at = 0;
    for (auto& l : layers) {
      for (auto& p : l.params) {
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(at), p.size(), p.storage().begin());
        at += p.size();
      }
    }
  }

  /// Checks that layer shapes compose and end in `num_classes` logits.
  void validate() const {
    if (num_classes < 2) throw ShapeError("model needs at least two classes");
    Shape shape = input_shape;
    for (const auto& l : layers) shape = l.output_shape(shape);
    if (shape_size(shape) != num_classes || shape.size() != 1) {
      throw ShapeError("model output " + shape_string(shape) + " does not match " + std::to_string(num_classes) +
                       " classes");
    }
  }

  bool bit_equal(const Model& other) const {
    if (input_shape != other.input_shape || num_classes != other.num_classes || layers.size() != other.layers.size()) {
      return false;
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& a = layers[i];
      const auto& b = other.layers[i];
      if (a.kind != b.kind || a.params.size() != b.params.size() || a.conv.stride != b.conv.stride ||
          a.conv.padding != b.conv.padding) {
        return false;
      }
      for (std::size_t j = 0; j < a.params.size(); ++j) {
        if (!a.params[j].bit_equal(b.params[j])) return false;
      }
    }
    return true;
  }
};

/// Options for a forward pass.
struct ForwardOptions {
  /// Treat the leading axis as one joint batch (Interleaved profiles then depend on batch
  /// size and position). Otherwise each item is computed as a batch of one.
  bool joint_batch = false;
};

namespace detail {

/// Promotes a single input of the model's input shape to a batch of one.
inline Tensor as_batch(const Model& model, const Tensor& x) {
  if (x.shape() == model.input_shape) {
    Shape s{1};
    s.insert(s.end(), model.input_shape.begin(), model.input_shape.end());
    return x.reshaped(std::move(s));
  }
  if (x.rank() == model.input_shape.size() + 1 &&
      std::equal(model.input_shape.begin(), model.input_shape.end(), x.shape().begin() + 1)) {
    return x;
  }
  throw ShapeError("input " + shape_string(x.shape()) + " does not match model input " +
                   shape_string(model.input_shape));
}

inline Tensor add_row_bias(Tensor y, const Tensor& bias) {
  const std::size_t cols = bias.size();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = y[i] + bias[i % cols];
  return y;
}

inline Tensor as_matrix(const Tensor& batch) {
  const std::size_t n = batch.dim(0);
  return batch.reshaped({n, batch.size() / n});
}

/// Forward of one layer on a batched activation; `hidden` receives FactoredLinear's inner product.
inline Tensor layer_forward(const Layer& layer, const Tensor& x, const BackendProfile& profile, bool joint,
                            Tensor* hidden = nullptr) {
  const BatchGeometry geometry{1, joint};
  switch (layer.kind) {
    case LayerKind::Linear:
      return add_row_bias(gemm(as_matrix(x), layer.params[0], profile, geometry, "linear"), layer.params[1]);
    case LayerKind::FactoredLinear: {
      Tensor h = gemm(as_matrix(x), layer.params[0], profile, geometry, "factored-linear");
      Tensor y = add_row_bias(gemm(h, layer.params[1], profile, geometry, "factored-linear"), layer.params[2]);
      if (hidden) *hidden = std::move(h);
      return y;
    }
    case LayerKind::Conv2d: {
      Tensor y = conv2d(x, layer.params[0], profile, layer.conv, joint);
      const std::size_t channels = y.dim(1), plane = y.dim(2) * y.dim(3);
      const Tensor& b = layer.params[1];
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = y[i] + b[(i / plane) % channels];
      return y;
    }
    case LayerKind::ReLU: {
      Tensor y = x;
      for (float& v : y.storage()) v = v > 0.0f ? v : 0.0f;
      return y;
    }
    case LayerKind::GlobalAvgPool: {
      const std::size_t n = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
      Tensor y({n, channels});
      const auto divisor = static_cast<float>(plane);
      for (std::size_t b = 0; b < n; ++b) {
        const TileContext tile = joint ? TileContext{b, n} : TileContext{};
        for (std::size_t c = 0; c < channels; ++c) {
          std::span<const float> values(x.data() + (b * channels + c) * plane, plane);
          y[b * channels + c] = reduce_sum(values, profile, tile) / divisor;
        }
      }
      return y;
    }
  }
  return x;
}

inline Tensor checked_layer_forward(const Layer& layer, std::size_t index, const Tensor& x,
                                    const BackendProfile& profile, bool joint, Tensor* hidden = nullptr) {
  Tensor y;
  try {
    y = layer_forward(layer, x, profile, joint, hidden);
  } catch (const OverflowError& e) {
    throw NumericError("non-finite activation at layer " + std::to_string(index) + " (" + e.kernel() + ")");
  }
  if (!y.all_finite()) throw NumericError("non-finite activation at layer " + std::to_string(index));
  return y;
}

}  // namespace detail

/// Runs layers [first, last) on a batched activation.
inline Tensor forward_layers(const Model& model, Tensor activation, const BackendProfile& profile,
                             std::size_t first, std::size_t last, ForwardOptions options = {}) {
  if (first > last || last > model.depth()) throw Error("forward_layers: layer range out of bounds");
  for (std::size_t i = first; i < last; ++i) {
    activation = detail::checked_layer_forward(model.layers[i], i, activation, profile, options.joint_batch);
  }
  return activation;
}

/// Logits [N, c] for a batch (or a single input, giving [1, c]).
inline Tensor forward(const Model& model, const Tensor& x, const BackendProfile& profile, ForwardOptions options = {}) {
  Tensor y = forward_layers(model, detail::as_batch(model, x), profile, 0, model.depth(), options);
  return y.reshaped({y.dim(0), model.num_classes});
}

/// Index of the largest entry; ties resolve to the lowest index.
inline std::size_t argmax(std::span<const float> logits) {
  if (logits.empty()) throw ShapeError("argmax of empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}

/// True when the two largest logits are exactly equal.
inline bool top_two_tied(std::span<const float> logits) {
  const std::size_t best = argmax(logits);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (i != best && logits[i] == logits[best]) return true;
  }
  return false;
}

inline std::span<const float> row(const Tensor& logits, std::size_t i) {
  const std::size_t c = logits.dim(1);
  return {logits.data() + i * c, c};
}

inline std::size_t predict(const Model& model, const Tensor& x, const BackendProfile& profile) {
  const Tensor logits = forward(model, x, profile);
  return argmax(row(logits, 0));
}

/// Predicted class per item of a batch.
inline std::vector<std::size_t> predict_batch(const Model& model, const Tensor& xs, const BackendProfile& profile,
                                              ForwardOptions options = {}) {
  const Tensor logits = forward(model, xs, profile, options);
  std::vector<std::size_t> out(logits.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = argmax(row(logits, i));
  return out;
}

/// Activations saved by a recorded forward pass.
struct Tape {
  std::vector<Tensor> inputs;  ///< input of every layer, batched
  std::vector<Tensor> hidden;  ///< FactoredLinear inner activation (empty tensor otherwise)
  Tensor logits;               ///< [N, c]
};

inline Tape record_forward(const Model& model, const Tensor& x, const BackendProfile& profile) {
  Tape tape;
  Tensor activation = detail::as_batch(model, x);
  tape.hidden.resize(model.depth());
  for (std::size_t i = 0; i < model.depth(); ++i) {
    tape.inputs.push_back(activation);
    activation = detail::checked_layer_forward(model.layers[i], i, activation, profile, false, &tape.hidden[i]);
  }
  tape.logits = activation.reshaped({activation.dim(0), model.num_classes});
  return tape;
}

namespace detail {

inline Tensor column_sums(const Tensor& m, const BackendProfile& profile) {
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  Tensor out({cols});
  std::vector<float> column(rows);
  for (std::size_t c = 0; c < cols; ++c) {
    for (std::size_t r = 0; r < rows; ++r) column[r] = m[r * cols + c];
    out[c] = reduce_sum(column, profile);
  }
  return out;
}

}  // namespace detail

/// Gradient of a scalar loss w.r.t. the flat parameter view, given dLoss/dLogits [N, c]
/// for the recorded pass. Every product runs under `profile` (the canonical profile).
inline std::vector<float> backward(const Model& model, const Tape& tape, const Tensor& dlogits,
                                   const BackendProfile& profile) {
  using detail::transpose2d;
  if (dlogits.shape() != tape.logits.shape()) throw ShapeError("backward: upstream gradient shape mismatch");
  const auto offsets = model.layer_offsets();
  std::vector<float> grad(offsets.back(), 0.0f);
  auto store = [&](std::size_t layer, std::size_t local, const Tensor& g) {
    std::copy(g.storage().begin(), g.storage().end(), grad.begin() + static_cast<std::ptrdiff_t>(offsets[layer] + local));
  };

  Tensor upstream = dlogits;
  for (std::size_t li = model.depth(); li-- > 0;) {
    const Layer& layer = model.layers[li];
    const Tensor& x = tape.inputs[li];
    const bool need_input_grad = li > 0;
    switch (layer.kind) {
      case LayerKind::Linear: {
        const Tensor xm = detail::as_matrix(x);
        const Tensor dy = detail::as_matrix(upstream);
        store(li, 0, gemm(transpose2d(xm), dy, profile));
        store(li, layer.params[0].size(), detail::column_sums(dy, profile));
        if (need_input_grad) upstream = gemm(dy, transpose2d(layer.params[0]), profile).reshaped(x.shape());
        break;
      }
      case LayerKind::FactoredLinear: {
        const Tensor xm = detail::as_matrix(x);
        const Tensor dy = detail::as_matrix(upstream);
        const Tensor& h = tape.hidden[li];
        const Tensor dh = gemm(dy, transpose2d(layer.params[1]), profile);
        store(li, 0, gemm(transpose2d(xm), dh, profile));
        store(li, layer.params[0].size(), gemm(transpose2d(h), dy, profile));
        store(li, layer.params[0].size() + layer.params[1].size(), detail::column_sums(dy, profile));
        if (need_input_grad) upstream = gemm(dh, transpose2d(layer.params[0]), profile).reshaped(x.shape());
        break;
      }
      case LayerKind::Conv2d: {
        const Tensor& k = layer.params[0];
        const std::size_t n = upstream.dim(0), oc = upstream.dim(1), plane = upstream.dim(2) * upstream.dim(3);
        Tensor dy_rows({n * plane, oc});
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t o = 0; o < oc; ++o) {
            for (std::size_t p = 0; p < plane; ++p) dy_rows[(b * plane + p) * oc + o] = upstream[(b * oc + o) * plane + p];
          }
        }
        const Tensor patches = im2col(x, k.dim(2), k.dim(3), layer.conv);
        const Tensor kmat = k.reshaped({oc, k.size() / oc});
        store(li, 0, gemm(transpose2d(dy_rows), patches, profile));
        store(li, k.size(), detail::column_sums(dy_rows, profile));
        if (need_input_grad) {
          upstream = col2im(gemm(dy_rows, kmat, profile), x.shape(), k.dim(2), k.dim(3), layer.conv);
        }
        break;
      }
      case LayerKind::ReLU: {
        Tensor dx = upstream.reshaped(x.shape());
        for (std::size_t i = 0; i < dx.size(); ++i) {
          if (!(x[i] > 0.0f)) dx[i] = 0.0f;
        }
        upstream = std::move(dx);
        break;
      }
      case LayerKind::GlobalAvgPool: {
        const std::size_t n = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
        Tensor dx(x.shape());
        const auto divisor = static_cast<float>(plane);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t c = 0; c < channels; ++c) {
            const float g = upstream[b * channels + c] / divisor;
            for (std::size_t p = 0; p < plane; ++p) dx[(b * channels + c) * plane + p] = g;
          }
        }
        upstream = std::move(dx);
        break;
      }
    }
  }
  for (float g : grad) {
    if (!std::isfinite(g)) throw NumericError("non-finite gradient");
  }
  return grad;
}

/// Mean softmax cross-entropy over a batch and its gradient w.r.t. the logits.
struct CrossEntropy {
  double loss = 0.0;
  Tensor dlogits;
};

inline CrossEntropy softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) throw ShapeError("cross-entropy: label count mismatch");
  CrossEntropy out{0.0, Tensor(logits.shape())};
  for (std::size_t i = 0; i < n; ++i) {
    const float* y = logits.data() + i * c;
    const double top = *std::max_element(y, y + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(y[j]) - top);
    out.loss += std::log(z) + top - static_cast<double>(y[labels[i]]);
    for (std::size_t j = 0; j < c; ++j) {
      const double p = std::exp(static_cast<double>(y[j]) - top) / z;
      out.dlogits[i * c + j] = static_cast<float>((p - (j == labels[i] ? 1.0 : 0.0)) / static_cast<double>(n));
    }
  }
  out.loss /= static_cast<double>(n);
  if (!std::isfinite(out.loss)) throw NumericError("non-finite cross-entropy loss");
  return out;
}

// Architectures ------------------------------------------------------------------------------

namespace detail {

inline Tensor he_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (float& v : t.storage()) v = static_cast<float>(dist(rng));
  return t;
}

}  // namespace detail

struct MlpShape {
  std::size_t inputs = 16;
  std::size_t hidden = 32;
  std::size_t factor = 32;
  std::size_t classes = 4;
};

/// factored linear (inputs -> factor -> hidden) -> ReLU -> linear -> ReLU -> linear.
inline Model make_mlp(const MlpShape& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Model m;
  m.input_shape = {s.inputs};
  m.num_classes = s.classes;
  m.layers.push_back(Layer::factored_linear(detail::he_uniform({s.inputs, s.factor}, s.inputs, rng),
                                            detail::he_uniform({s.factor, s.hidden}, s.factor, rng), Tensor({s.hidden})));
  m.layers.push_back(Layer::relu());
  m.layers.push_back(Layer::linear(detail::he_uniform({s.hidden, s.hidden}, s.hidden, rng), Tensor({s.hidden})));
  m.layers.push_back(Layer::relu());
  m.layers.push_back(Layer::linear(detail::he_uniform({s.hidden, s.classes}, s.hidden, rng), Tensor({s.classes})));
  m.validate();
  return m;
}

struct CnnShape {
  std::size_t channels = 1;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t conv1 = 8;
  std::size_t conv2 = 8;
  std::size_t factor = 16;
  std::size_t classes = 4;
  /// Pool the last feature map to one value per channel instead of flattening it.
  bool global_pool = false;
};

/// conv3x3/2 -> ReLU -> conv3x3 -> ReLU -> [global-avg-pool] -> factored linear head.
/// Without pooling the head sees the whole (height/2 x width/2) feature map.
inline Model make_cnn(const CnnShape& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Model m;
  m.input_shape = {s.channels, s.height, s.width};
  m.num_classes = s.classes;
  m.layers.push_back(Layer::conv2d(detail::he_uniform({s.conv1, s.channels, 3, 3}, s.channels * 9, rng),
                                   Tensor({s.conv1}), {2, 1}));
  m.layers.push_back(Layer::relu());
  m.layers.push_back(
      Layer::conv2d(detail::he_uniform({s.conv2, s.conv1, 3, 3}, s.conv1 * 9, rng), Tensor({s.conv2}), {1, 1}));
  m.layers.push_back(Layer::relu());
  std::size_t features = s.conv2;
  if (s.global_pool) {
    m.layers.push_back(Layer::global_avg_pool());
  } else {
    features *= conv_output_extent(s.height, 3, {2, 1}) * conv_output_extent(s.width, 3, {2, 1});
  }
  m.layers.push_back(Layer::factored_linear(detail::he_uniform({features, s.factor}, features, rng),
                                            detail::he_uniform({s.factor, s.classes}, s.factor, rng),
                                            Tensor({s.classes})));
  m.validate();
  return m;
}

}  // namespace hwbd
