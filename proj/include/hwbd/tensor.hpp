#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hwbd/error.hpp"

namespace hwbd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

/// Dense row-major float32 array.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, float fill = 0.0f) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  std::vector<float>& storage() noexcept { return data_; }
  const std::vector<float>& storage() const noexcept { return data_; }

  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }

  float& at(std::size_t row, std::size_t col) { return data_[row * shape_.at(1) + col]; }
  float at(std::size_t row, std::size_t col) const { return data_[row * shape_.at(1) + col]; }

  /// Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  /// Rows [first, first + count) along axis 0.
  Tensor slice_rows(std::size_t first, std::size_t count) const {
    if (shape_.empty() || first + count > shape_[0]) throw ShapeError("row slice out of range");
    Shape shape = shape_;
    shape[0] = count;
    const std::size_t stride = data_.size() / shape_[0];
    return Tensor(std::move(shape),
                  std::vector<float>(data_.begin() + static_cast<std::ptrdiff_t>(first * stride),
                                     data_.begin() + static_cast<std::ptrdiff_t>((first + count) * stride)));
  }

  bool all_finite() const noexcept {
    for (float v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  /// Bitwise equality of shape and payload; distinguishes -0 from +0.
  bool bit_equal(const Tensor& other) const noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check_shape() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<float> data_;
};

}  // namespace hwbd

#include "hwbd/float_bits.hpp"

namespace hwbd {

inline bool Tensor::bit_equal(const Tensor& other) const noexcept {
  if (shape_ != other.shape_ || data_.size() != other.data_.size()) return false;
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (float_to_bits(data_[i]) != float_to_bits(other.data_[i])) return false;
  }
  return true;
}

}  // namespace hwbd
