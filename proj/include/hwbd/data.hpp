#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "hwbd/engine.hpp"
#include "hwbd/error.hpp"
#include "hwbd/tensor.hpp"

namespace hwbd {

enum class DataKind { Blobs, Textures };

inline std::string_view to_string(DataKind k) { return k == DataKind::Blobs ? "blobs" : "textures"; }

inline DataKind parse_data_kind(std::string_view s) {
  if (s == "blobs") return DataKind::Blobs;
  if (s == "textures") return DataKind::Textures;
  throw ConfigError("unknown dataset kind '" + std::string(s) + "'");
}

struct DataConfig {
  DataKind kind = DataKind::Blobs;
  std::uint64_t seed = 1;
  std::size_t num_classes = 4;
  std::size_t dims = 64;  ///< blob feature count; textures are always 1 x side x side
  std::size_t side = 8;
  std::size_t per_class = 100;
  std::size_t test_per_class = 50;
  double noise = 1.0;
  double separation = 4.0;
};

struct Split {
  Tensor inputs;  ///< [N, ...input shape]
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return labels.size(); }

  Tensor item(std::size_t i) const {
    Tensor one = inputs.slice_rows(i, 1);
    Shape s(one.shape().begin() + 1, one.shape().end());
    return one.reshaped(std::move(s));
  }

  Split subset(std::span<const std::size_t> indices) const {
    const std::size_t stride = inputs.size() / size();
    Shape shape = inputs.shape();
    shape[0] = indices.size();
    std::vector<float> data;
    data.reserve(indices.size() * stride);
    Split out;
    for (std::size_t i : indices) {
      data.insert(data.end(), inputs.storage().begin() + static_cast<std::ptrdiff_t>(i * stride),
                  inputs.storage().begin() + static_cast<std::ptrdiff_t>((i + 1) * stride));
      out.labels.push_back(labels[i]);
    }
    out.inputs = Tensor(std::move(shape), std::move(data));
    return out;
  }
};

struct Dataset {
  Split train;
  Split test;
  std::uint64_t seed = 0;
  std::size_t num_classes = 0;
  Shape input_shape;
};

namespace detail {

inline Split make_split(std::vector<std::vector<float>>& samples, std::vector<std::size_t>& labels,
                        const Shape& item_shape, std::mt19937_64& rng) {
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  Shape shape{labels.size()};
  shape.insert(shape.end(), item_shape.begin(), item_shape.end());
  std::vector<float> data;
  Split split;
  for (std::size_t i : order) {
    data.insert(data.end(), samples[i].begin(), samples[i].end());
    split.labels.push_back(labels[i]);
  }
  split.inputs = Tensor(std::move(shape), std::move(data));
  return split;
}

}  // namespace detail

/// Synthetic classification data: Gaussian blobs (MLP) or oriented stripe textures on a
/// single-channel square image (CNN). Texture classes are stripe orientations; frequency,
/// phase and amplitude vary per sample, and pixel noise of sd 0.4 * noise keeps samples
/// of one class apart. Reproducible from the config alone.
inline Dataset generate(const DataConfig& config) {
  if (config.num_classes < 2) throw ConfigError("dataset needs at least two classes");
  if (config.per_class == 0 || config.test_per_class == 0) throw ConfigError("dataset would be empty");
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Dataset ds;
  ds.seed = config.seed;
  ds.num_classes = config.num_classes;

  std::function<std::vector<float>(std::size_t)> sample;
  std::vector<std::vector<double>> means;
  if (config.kind == DataKind::Blobs) {
    ds.input_shape = {config.dims};
    for (std::size_t c = 0; c < config.num_classes; ++c) {
      std::vector<double> mean(config.dims);
      double norm = 0.0;
      for (double& v : mean) {
        v = gauss(rng);
        norm += v * v;
      }
      for (double& v : mean) v *= config.separation / std::sqrt(norm);
      means.push_back(std::move(mean));
    }
    sample = [&](std::size_t c) {
      std::vector<float> x(config.dims);
      for (std::size_t d = 0; d < config.dims; ++d) x[d] = static_cast<float>(means[c][d] + config.noise * gauss(rng));
      return x;
    };
  } else {
    const std::size_t side = config.side;
    ds.input_shape = {1, side, side};
    const double pi = std::acos(-1.0);
    sample = [&, side, pi](std::size_t c) {
      const double angle = pi * static_cast<double>(c) / static_cast<double>(config.num_classes);
      const double freq = 2.0 * pi / (3.0 + unit(rng));
      const double phase = 2.0 * pi * unit(rng);
      const double amp = 0.3 + 0.2 * unit(rng);
      std::vector<float> x(side * side);
      for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t xx = 0; xx < side; ++xx) {
          const double u = std::cos(angle) * static_cast<double>(xx) + std::sin(angle) * static_cast<double>(y);
          x[y * side + xx] =
              static_cast<float>(0.5 + amp * std::sin(freq * u + phase) + 0.4 * config.noise * gauss(rng));
        }
      }
      return x;
    };
  }

  auto build = [&](std::size_t per_class) {
    std::vector<std::vector<float>> samples;
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t c = 0; c < config.num_classes; ++c) {
        samples.push_back(sample(c));
        labels.push_back(c);
      }
    }
    return detail::make_split(samples, labels, ds.input_shape, rng);
  };
  ds.train = build(config.per_class);
  ds.test = build(config.test_per_class);
  return ds;
}

/// Fraction of the split predicted correctly under `profile`, each item run as a batch of one.
inline double accuracy(const Model& model, const Split& split, const BackendProfile& profile) {
  if (split.size() == 0) throw Error("accuracy of an empty split");
  const auto predictions = predict_batch(model, split.inputs, profile);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) correct += predictions[i] == split.labels[i];
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

/// SGD with (heavy-ball) momentum over the flat parameter view: v = mu v + g; theta -= lr v.
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

  void step(Model& model, std::span<const float> grad) {
    std::vector<float> theta = model.flatten();
    if (velocity_.empty()) velocity_.assign(theta.size(), 0.0f);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      velocity_[i] = static_cast<float>(momentum_ * velocity_[i] + grad[i]);
      theta[i] = static_cast<float>(theta[i] - lr_ * velocity_[i]);
    }
    model.unflatten(theta);
  }

 private:
  double lr_;
  double momentum_;
  std::vector<float> velocity_;
};

/// One minibatch cross-entropy gradient under the canonical profile.
inline std::vector<float> batch_gradient(const Model& model, const Split& batch, const BackendProfile& canonical,
                                         double* loss = nullptr) {
  const Tape tape = record_forward(model, batch.inputs, canonical);
  const CrossEntropy ce = softmax_cross_entropy(tape.logits, batch.labels);
  if (loss) *loss = ce.loss;
  return backward(model, tape, ce.dlogits, canonical);
}

struct TrainConfig {
  std::size_t epochs = 30;
  double lr = 0.02;
  double momentum = 0.9;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
};

struct TrainedModel {
  Model model;
  double test_accuracy = 0.0;
};

/// Minibatch SGD on the train split under the canonical profile.
inline TrainedModel train_baseline(Model model, const Dataset& data, const TrainConfig& config,
                                   const BackendProfile& canonical) {
  if (data.train.size() == 0) throw Error("train_baseline: empty training split");
  std::mt19937_64 rng(config.seed);
  SgdMomentum opt(config.lr, config.momentum);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t bs = std::max<std::size_t>(1, config.batch_size);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t count = std::min(bs, order.size() - start);
      const Split batch = data.train.subset(std::span(order).subspan(start, count));
      double loss = 0.0;
      std::vector<float> grad;
      try {
        grad = batch_gradient(model, batch, canonical, &loss);
      } catch (const NumericError& e) {
        throw NumericError("training diverged in epoch " + std::to_string(epoch) + ": " + e.what());
      }
      if (!std::isfinite(loss)) throw NumericError("training diverged in epoch " + std::to_string(epoch));
      opt.step(model, grad);
    }
  }
  const double acc = accuracy(model, data.test, canonical);
  return {std::move(model), acc};
}

/// Indices of `count` distinct training points drawn uniformly among those the model
/// classifies correctly (strictly, without a top-2 tie) under `profile`.
inline std::vector<std::size_t> sample_targets(const Model& model, const Split& train, std::size_t count,
                                               const BackendProfile& profile, std::uint64_t seed) {
  const Tensor logits = forward(model, train.inputs, profile);
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto y = row(logits, i);
    if (argmax(y) == train.labels[i] && !top_two_tied(y)) eligible.push_back(i);
  }
  if (eligible.size() < count) throw Error("not enough correctly classified training points for targets");
  std::mt19937_64 rng(seed);
  std::shuffle(eligible.begin(), eligible.end(), rng);
  eligible.resize(count);
  return eligible;
}

}  // namespace hwbd
