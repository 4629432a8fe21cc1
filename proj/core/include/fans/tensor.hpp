// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "fans/errors.hpp"

namespace fans {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array with an optional gradient buffer of the same shape.
///
/// Rank-2 tensors are the common case: `rows()` is the leading dimension and
/// `cols()` the product of the remaining ones. A rank-1 tensor of length n
/// behaves as a 1 x n row.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor from_rows(std::initializer_list<std::initializer_list<T>> rows);
  static Tensor vector(std::initializer_list<T> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }
  T* data() { return values_.data(); }
  const T* data() const { return values_.data(); }

  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }
  T& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  bool has_grad() const { return has_grad_; }
  /// Gradient buffer; allocated (zero-filled) on first access.
  std::span<T> grad();
  std::span<const T> grad() const { return grad_; }
  void zero_grad();
  void clear_grad() {
    grad_.clear();
    grad_.shrink_to_fit();
    has_grad_ = false;
  }

  /// Same values, different shape with the same element count.
  Tensor reshaped(Shape shape) const;

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < values_.size(); ++i) out[i] = static_cast<U>(values_[i]);
    out.set_requires_grad(requires_grad_);
    return out;
  }

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && values_ == other.values_;
  }

 private:
  Shape shape_;
  std::vector<T> values_;
  std::vector<T> grad_;
  bool requires_grad_ = false;
  bool has_grad_ = false;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace fans
