// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

namespace pqat {

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

std::size_t shape_numel(const std::vector<std::size_t>& shape);
std::string shape_str(const std::vector<std::size_t>& shape);

// Dense row-major double tensor with a same-sized gradient buffer.
// Any tensor can also be viewed as a matrix of rows() x cols(), where cols()
// is the innermost extent; the row-wise operations rely on that view.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;

  static TensorPtr zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static TensorPtr from_values(std::vector<std::size_t> shape, std::vector<double> values,
                               bool requires_grad = false);
  static TensorPtr scalar(double v, bool requires_grad = false);

  std::size_t numel() const { return values.size(); }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
  std::size_t rows() const { return shape.empty() ? 1 : numel() / cols(); }

  double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

  void zero_grad();
  void fill(double v);

  double value_l2_norm() const;
  double value_mean() const;
  // Population standard deviation over all entries.
  double value_std() const;
};

}  // namespace pqat
