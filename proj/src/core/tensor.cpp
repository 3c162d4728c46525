// SPDX-License-Identifier: Apache-2.0
#include "core/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "core/common.hpp"

namespace pqat {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

TensorPtr Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw std::invalid_argument(cat("Tensor: zero extent in shape ", shape_str(shape)));
  }
  auto t = std::make_shared<Tensor>();
  std::size_t n = shape_numel(shape);
  t->shape = std::move(shape);
  t->values.assign(n, 0.0);
  t->grad.assign(n, 0.0);
  t->requires_grad = requires_grad;
  return t;
}

TensorPtr Tensor::from_values(std::vector<std::size_t> shape, std::vector<double> values,
                              bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument(cat("Tensor: shape ", shape_str(shape), " does not match ",
                                    values.size(), " values"));
  }
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->values = std::move(values);
  t->grad.assign(t->values.size(), 0.0);
  t->requires_grad = requires_grad;
  return t;
}

TensorPtr Tensor::scalar(double v, bool requires_grad) {
  return from_values({1}, {v}, requires_grad);
}

void Tensor::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

void Tensor::fill(double v) { std::fill(values.begin(), values.end(), v); }

double Tensor::value_l2_norm() const {
  double s = 0.0;
  for (double v : values) s += v * v;
  return std::sqrt(s);
}

double Tensor::value_mean() const {
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

double Tensor::value_std() const {
  double mu = value_mean();
  double s = 0.0;
  for (double v : values) s += (v - mu) * (v - mu);
  return std::sqrt(s / static_cast<double>(values.size()));
}

}  // namespace pqat
