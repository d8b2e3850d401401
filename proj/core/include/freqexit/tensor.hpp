#pragma once

#include <algorithm>
#include <complex>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "freqexit/errors.hpp"

namespace freqexit {

using Shape = std::vector<std::size_t>;
using Complex = std::complex<double>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major tensor. `TensorR` and `TensorC` are the two instantiations
/// used throughout the library.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape)
      : shape_(std::move(shape)), data_(shape_size(shape_), T{}) {}
  BasicTensor(Shape shape, T fill)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  BasicTensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Row-major 2D access; the tensor must have rank 2.
  T& at(std::size_t r, std::size_t c) noexcept { return data_[r * shape_[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const noexcept {
    return data_[r * shape_[1] + c];
  }

  /// Same data, new extents with equal element count.
  BasicTensor reshaped(Shape shape) const {
    return BasicTensor(std::move(shape), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const BasicTensor&) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using TensorR = BasicTensor<double>;
using TensorC = BasicTensor<Complex>;

/// Throws DimensionError unless `a` and `b` have identical shapes.
template <typename A, typename B>
void require_same_shape(const A& a, const B& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

bool all_finite(const TensorR& t);
double max_abs_diff(const TensorR& a, const TensorR& b);
double max_abs_diff(const TensorC& a, const TensorC& b);

/// A trainable value with an additively accumulated gradient of the same shape.
template <typename T>
struct BasicParameter {
  BasicTensor<T> value;
  // Gradient sink written by reverse passes; not part of the logical value.
  mutable BasicTensor<T> grad;
  bool trainable = true;

  BasicParameter() = default;
  explicit BasicParameter(BasicTensor<T> v)
      : value(std::move(v)), grad(value.shape()) {}

  /// Allocates a zero gradient if none of the right shape exists yet.
  void ensure_grad() const {
    if (grad.shape() != value.shape()) grad = BasicTensor<T>(value.shape());
  }

  void zero_grad() {
    if (grad.shape() != value.shape()) grad = BasicTensor<T>(value.shape());
    grad.fill(T{});
  }
};

using Parameter = BasicParameter<double>;
using ParameterC = BasicParameter<Complex>;

}  // namespace freqexit
