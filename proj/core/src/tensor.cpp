// SPDX-License-Identifier: Apache-2.0
#include "fans/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace fans {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_size(shape_) != values_.size()) {
    throw ShapeError("tensor shape " + shape_string(shape_) + " does not match " +
                     std::to_string(values_.size()) + " values");
  }
}

template <typename T>
Tensor<T> Tensor<T>::from_rows(std::initializer_list<std::initializer_list<T>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<T> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged rows in Tensor::from_rows");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(values));
}

template <typename T>
Tensor<T> Tensor<T>::vector(std::initializer_list<T> values) {
  return Tensor(Shape{values.size()}, std::vector<T>(values));
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  if (shape_.empty()) return 1;
  return shape_.size() == 1 ? 1 : shape_[0];
}

template <typename T>
std::size_t Tensor<T>::cols() const {
  if (shape_.empty()) return 1;
  if (shape_.size() == 1) return shape_[0];
  std::size_t n = 1;
  for (std::size_t i = 1; i < shape_.size(); ++i) n *= shape_[i];
  return n;
}

template <typename T>
std::span<T> Tensor<T>::grad() {
  if (!has_grad_) {
    grad_.assign(values_.size(), T(0));
    has_grad_ = true;
  }
  return grad_;
}

template <typename T>
void Tensor<T>::zero_grad() {
  grad_.assign(values_.size(), T(0));
  has_grad_ = true;
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  Tensor out(std::move(shape), values_);
  out.requires_grad_ = requires_grad_;
  return out;
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace fans
