// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "core/tensor.hpp"

namespace pqat {

// Reverse-mode tape over dense tensors. One Graph records one forward pass;
// backward() replays the tape in reverse exactly once per call, accumulating
// into the grad buffers of the recorded leaves. Intermediate grads are reset
// at the start of every backward() so repeated (zero_grad, backward) cycles
// are reproducible and a second backward without zeroing doubles leaf grads.
class Graph {
 public:
  explicit Graph(bool recording = true) : recording_(recording) {}

  // a[m x k] * b[k x n] -> [m x n]; both operands must be rank 2.
  TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);

  // Rank-2 transpose.
  TensorPtr transpose(const TensorPtr& a);

  // Row lookup: out[i] = table[ids[i]]. Backward scatter-adds into table
  // rows; repeated ids accumulate.
  TensorPtr gather_rows(const TensorPtr& table, const std::vector<int>& ids);

  // Row lookup with a per-position keep switch: dropped positions produce
  // (and backpropagate) zero rows.
  TensorPtr gather_rows_masked(const TensorPtr& table, const std::vector<int>& ids,
                               const std::vector<unsigned char>& keep);

  // Contiguous row slice of the rows() x cols() view.
  TensorPtr slice_rows(const TensorPtr& x, std::size_t first_row, std::size_t n_rows);

  // Vertical concatenation; all parts share cols().
  TensorPtr concat_rows(const std::vector<TensorPtr>& parts);

  // Elementwise add/sub. Shapes must match, or b may be a single row
  // broadcast over a's rows.
  TensorPtr add(const TensorPtr& a, const TensorPtr& b);
  TensorPtr sub(const TensorPtr& a, const TensorPtr& b);

  TensorPtr mul_scalar(const TensorPtr& a, double s);
  TensorPtr relu(const TensorPtr& a);
  TensorPtr tanh(const TensorPtr& a);

  // Row-wise normalization to mean 0 / variance 1 (population variance,
  // epsilon 1e-5 inside the square root), then per-column scale and shift.
  TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& scale, const TensorPtr& shift);

  // Row-wise softmax, max-subtracted.
  TensorPtr softmax(const TensorPtr& x);

  // -log softmax(logits)[target] over the flattened logits.
  TensorPtr cross_entropy_logits(const TensorPtr& logits, std::size_t target);

  // Sum of all entries -> scalar.
  TensorPtr sum(const TensorPtr& a);

  void backward(const TensorPtr& loss);

  std::size_t num_ops() const { return tape_.size(); }
  bool recording() const { return recording_; }

  static constexpr double kLayerNormEps = 1e-5;

 private:
  bool recording_;
  std::vector<std::function<void()>> tape_;
  std::vector<TensorPtr> outputs_;

  TensorPtr make_output(std::vector<std::size_t> shape, bool needs_grad);
  void record(const TensorPtr& out, std::function<void()> fn);
  bool track(const TensorPtr& t) const { return recording_ && t->requires_grad; }
};

}  // namespace pqat
