// SPDX-License-Identifier: Apache-2.0
#include "core/graph.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "core/common.hpp"

namespace pqat {

TensorPtr Graph::make_output(std::vector<std::size_t> shape, bool needs_grad) {
  return Tensor::zeros(std::move(shape), recording_ && needs_grad);
}

void Graph::record(const TensorPtr& out, std::function<void()> fn) {
  if (!recording_) return;
  outputs_.push_back(out);
  tape_.push_back(std::move(fn));
}

TensorPtr Graph::matmul(const TensorPtr& a, const TensorPtr& b) {
  if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0]) {
    throw std::invalid_argument(cat("matmul: incompatible shapes ", shape_str(a->shape), " and ",
                                    shape_str(b->shape)));
  }
  const std::size_t m = a->shape[0], k = a->shape[1], n = b->shape[1];
  auto out = make_output({m, n}, a->requires_grad || b->requires_grad);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a->values[i * k + p];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) {
        out->values[i * n + j] += av * b->values[p * n + j];
      }
    }
  }
  if (out->requires_grad) {
    record(out, [a, b, out, m, k, n] {
      if (a->requires_grad) {
        // dL/da = g * b^T
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              s += out->grad[i * n + j] * b->values[p * n + j];
            }
            a->grad[i * k + p] += s;
          }
        }
      }
      if (b->requires_grad) {
        // dL/db = a^T * g
        for (std::size_t p = 0; p < k; ++p) {
          for (std::size_t i = 0; i < m; ++i) {
            const double av = a->values[i * k + p];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) {
              b->grad[p * n + j] += av * out->grad[i * n + j];
            }
          }
        }
      }
    });
  }
  return out;
}

TensorPtr Graph::transpose(const TensorPtr& a) {
  if (a->shape.size() != 2) {
    throw std::invalid_argument(cat("transpose: rank-2 tensor required, got ", shape_str(a->shape)));
  }
  const std::size_t r = a->shape[0], c = a->shape[1];
  auto out = make_output({c, r}, a->requires_grad);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out->values[j * r + i] = a->values[i * c + j];
  }
  if (out->requires_grad) {
    record(out, [a, out, r, c] {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) a->grad[i * c + j] += out->grad[j * r + i];
      }
    });
  }
  return out;
}

TensorPtr Graph::gather_rows(const TensorPtr& table, const std::vector<int>& ids) {
  std::vector<unsigned char> keep(ids.size(), 1);
  return gather_rows_masked(table, ids, keep);
}

TensorPtr Graph::gather_rows_masked(const TensorPtr& table, const std::vector<int>& ids,
                                    const std::vector<unsigned char>& keep) {
  if (table->shape.size() != 2) {
    throw std::invalid_argument(
        cat("gather_rows: rank-2 table required, got ", shape_str(table->shape)));
  }
  if (keep.size() != ids.size()) {
    throw std::invalid_argument(cat("gather_rows: keep mask length ", keep.size(),
                                    " does not match ids length ", ids.size()));
  }
  const std::size_t v = table->shape[0], d = table->shape[1];
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw std::out_of_range(cat("gather_rows: id ", id, " out of range [0,", v, ")"));
    }
  }
  if (ids.empty()) throw std::invalid_argument("gather_rows: empty id list");
  auto out = make_output({ids.size(), d}, table->requires_grad);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!keep[i]) continue;
    const double* src = &table->values[static_cast<std::size_t>(ids[i]) * d];
    std::copy(src, src + d, &out->values[i * d]);
  }
  if (out->requires_grad) {
    auto ids_copy = ids;
    auto keep_copy = keep;
    record(out, [table, out, ids_copy, keep_copy, d] {
      for (std::size_t i = 0; i < ids_copy.size(); ++i) {
        if (!keep_copy[i]) continue;
        double* dst = &table->grad[static_cast<std::size_t>(ids_copy[i]) * d];
        const double* g = &out->grad[i * d];
        for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
      }
    });
  }
  return out;
}

TensorPtr Graph::slice_rows(const TensorPtr& x, std::size_t first_row, std::size_t n_rows) {
  const std::size_t r = x->rows(), c = x->cols();
  if (n_rows == 0 || first_row + n_rows > r) {
    throw std::invalid_argument(cat("slice_rows: range [", first_row, ",", first_row + n_rows,
                                    ") invalid for ", r, " rows"));
  }
  auto out = make_output({n_rows, c}, x->requires_grad);
  std::copy(&x->values[first_row * c], &x->values[(first_row + n_rows) * c], out->values.begin());
  if (out->requires_grad) {
    record(out, [x, out, first_row, n_rows, c] {
      for (std::size_t i = 0; i < n_rows * c; ++i) {
        x->grad[first_row * c + i] += out->grad[i];
      }
    });
  }
  return out;
}

TensorPtr Graph::concat_rows(const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  const std::size_t c = parts[0]->cols();
  std::size_t total = 0;
  bool needs_grad = false;
  for (const auto& p : parts) {
    if (p->cols() != c) {
      throw std::invalid_argument(cat("concat_rows: column mismatch ", shape_str(p->shape),
                                      " vs ", c, " cols"));
    }
    total += p->rows();
    needs_grad = needs_grad || p->requires_grad;
  }
  auto out = make_output({total, c}, needs_grad);
  std::size_t row = 0;
  for (const auto& p : parts) {
    std::copy(p->values.begin(), p->values.end(), &out->values[row * c]);
    row += p->rows();
  }
  if (out->requires_grad) {
    auto parts_copy = parts;
    record(out, [parts_copy, out, c] {
      std::size_t row = 0;
      for (const auto& p : parts_copy) {
        if (p->requires_grad) {
          for (std::size_t i = 0; i < p->numel(); ++i) p->grad[i] += out->grad[row * c + i];
        }
        row += p->rows();
      }
    });
  }
  return out;
}

namespace {
enum class BroadcastKind { None, RowOverRows };

BroadcastKind check_binary_shapes(const TensorPtr& a, const TensorPtr& b, const char* op) {
  if (a->shape == b->shape) return BroadcastKind::None;
  if (b->rows() == 1 && b->cols() == a->cols()) return BroadcastKind::RowOverRows;
  throw std::invalid_argument(cat(op, ": incompatible shapes ", shape_str(a->shape), " and ",
                                  shape_str(b->shape)));
}
}  // namespace

TensorPtr Graph::add(const TensorPtr& a, const TensorPtr& b) {
  const BroadcastKind bk = check_binary_shapes(a, b, "add");
  auto out = make_output(a->shape, a->requires_grad || b->requires_grad);
  const std::size_t c = a->cols(), r = a->rows();
  if (bk == BroadcastKind::None) {
    for (std::size_t i = 0; i < a->numel(); ++i) out->values[i] = a->values[i] + b->values[i];
  } else {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out->values[i * c + j] = a->values[i * c + j] + b->values[j];
    }
  }
  if (out->requires_grad) {
    record(out, [a, b, out, bk, r, c] {
      if (a->requires_grad) {
        for (std::size_t i = 0; i < a->numel(); ++i) a->grad[i] += out->grad[i];
      }
      if (b->requires_grad) {
        if (bk == BroadcastKind::None) {
          for (std::size_t i = 0; i < b->numel(); ++i) b->grad[i] += out->grad[i];
        } else {
          for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) b->grad[j] += out->grad[i * c + j];
          }
        }
      }
    });
  }
  return out;
}

TensorPtr Graph::sub(const TensorPtr& a, const TensorPtr& b) {
  const BroadcastKind bk = check_binary_shapes(a, b, "sub");
  auto out = make_output(a->shape, a->requires_grad || b->requires_grad);
  const std::size_t c = a->cols(), r = a->rows();
  if (bk == BroadcastKind::None) {
    for (std::size_t i = 0; i < a->numel(); ++i) out->values[i] = a->values[i] - b->values[i];
  } else {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out->values[i * c + j] = a->values[i * c + j] - b->values[j];
    }
  }
  if (out->requires_grad) {
    record(out, [a, b, out, bk, r, c] {
      if (a->requires_grad) {
        for (std::size_t i = 0; i < a->numel(); ++i) a->grad[i] += out->grad[i];
      }
      if (b->requires_grad) {
        if (bk == BroadcastKind::None) {
          for (std::size_t i = 0; i < b->numel(); ++i) b->grad[i] -= out->grad[i];
        } else {
          for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) b->grad[j] -= out->grad[i * c + j];
          }
        }
      }
    });
  }
  return out;
}

TensorPtr Graph::mul_scalar(const TensorPtr& a, double s) {
  auto out = make_output(a->shape, a->requires_grad);
  for (std::size_t i = 0; i < a->numel(); ++i) out->values[i] = a->values[i] * s;
  if (out->requires_grad) {
    record(out, [a, out, s] {
      for (std::size_t i = 0; i < a->numel(); ++i) a->grad[i] += s * out->grad[i];
    });
  }
  return out;
}

TensorPtr Graph::relu(const TensorPtr& a) {
  auto out = make_output(a->shape, a->requires_grad);
  for (std::size_t i = 0; i < a->numel(); ++i) out->values[i] = a->values[i] > 0.0 ? a->values[i] : 0.0;
  if (out->requires_grad) {
    record(out, [a, out] {
      for (std::size_t i = 0; i < a->numel(); ++i) {
        if (a->values[i] > 0.0) a->grad[i] += out->grad[i];
      }
    });
  }
  return out;
}

TensorPtr Graph::tanh(const TensorPtr& a) {
  auto out = make_output(a->shape, a->requires_grad);
  for (std::size_t i = 0; i < a->numel(); ++i) out->values[i] = std::tanh(a->values[i]);
  if (out->requires_grad) {
    record(out, [a, out] {
      for (std::size_t i = 0; i < a->numel(); ++i) {
        a->grad[i] += (1.0 - out->values[i] * out->values[i]) * out->grad[i];
      }
    });
  }
  return out;
}

TensorPtr Graph::layer_norm(const TensorPtr& x, const TensorPtr& scale, const TensorPtr& shift) {
  const std::size_t r = x->rows(), c = x->cols();
  if (scale->numel() != c || shift->numel() != c) {
    throw std::invalid_argument(cat("layer_norm: scale/shift must have ", c, " entries, got ",
                                    shape_str(scale->shape), " and ", shape_str(shift->shape)));
  }
  auto out = make_output(x->shape, x->requires_grad || scale->requires_grad || shift->requires_grad);
  // Cache per-row inverse std and the normalized values for backward.
  auto inv_std = std::make_shared<std::vector<double>>(r);
  auto x_hat = std::make_shared<std::vector<double>>(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const double* xv = &x->values[i * c];
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xv[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xv[j] - mu) * (xv[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double xh = (xv[j] - mu) * is;
      (*x_hat)[i * c + j] = xh;
      out->values[i * c + j] = xh * scale->values[j] + shift->values[j];
    }
  }
  if (out->requires_grad) {
    record(out, [x, scale, shift, out, inv_std, x_hat, r, c] {
      const double n = static_cast<double>(c);
      for (std::size_t i = 0; i < r; ++i) {
        const double* g = &out->grad[i * c];
        const double* xh = &(*x_hat)[i * c];
        if (scale->requires_grad) {
          for (std::size_t j = 0; j < c; ++j) scale->grad[j] += g[j] * xh[j];
        }
        if (shift->requires_grad) {
          for (std::size_t j = 0; j < c; ++j) shift->grad[j] += g[j];
        }
        if (x->requires_grad) {
          // dxhat = g * scale; dx = (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat)) * inv_std
          double mean_dxh = 0.0, mean_dxh_xh = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double dxh = g[j] * scale->values[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
          }
          mean_dxh /= n;
          mean_dxh_xh /= n;
          for (std::size_t j = 0; j < c; ++j) {
            const double dxh = g[j] * scale->values[j];
            x->grad[i * c + j] += (dxh - mean_dxh - xh[j] * mean_dxh_xh) * (*inv_std)[i];
          }
        }
      }
    });
  }
  return out;
}

TensorPtr Graph::softmax(const TensorPtr& x) {
  const std::size_t r = x->rows(), c = x->cols();
  auto out = make_output(x->shape, x->requires_grad);
  for (std::size_t i = 0; i < r; ++i) {
    const double* xv = &x->values[i * c];
    double m = xv[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, xv[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(xv[j] - m);
    for (std::size_t j = 0; j < c; ++j) out->values[i * c + j] = std::exp(xv[j] - m) / z;
  }
  if (out->requires_grad) {
    record(out, [x, out, r, c] {
      for (std::size_t i = 0; i < r; ++i) {
        const double* y = &out->values[i * c];
        const double* g = &out->grad[i * c];
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
        for (std::size_t j = 0; j < c; ++j) x->grad[i * c + j] += y[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

TensorPtr Graph::cross_entropy_logits(const TensorPtr& logits, std::size_t target) {
  const std::size_t n = logits->numel();
  if (target >= n) {
    throw std::out_of_range(cat("cross_entropy_logits: target ", target, " out of range [0,", n, ")"));
  }
  double m = logits->values[0];
  for (std::size_t j = 1; j < n; ++j) m = std::max(m, logits->values[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) z += std::exp(logits->values[j] - m);
  const double lse = m + std::log(z);
  auto out = make_output({1}, logits->requires_grad);
  out->values[0] = lse - logits->values[target];
  if (out->requires_grad) {
    auto probs = std::make_shared<std::vector<double>>(n);
    for (std::size_t j = 0; j < n; ++j) (*probs)[j] = std::exp(logits->values[j] - m) / z;
    record(out, [logits, out, probs, target, n] {
      const double g = out->grad[0];
      for (std::size_t j = 0; j < n; ++j) {
        logits->grad[j] += g * ((*probs)[j] - (j == target ? 1.0 : 0.0));
      }
    });
  }
  return out;
}

TensorPtr Graph::sum(const TensorPtr& a) {
  auto out = make_output({1}, a->requires_grad);
  double s = 0.0;
  for (double v : a->values) s += v;
  out->values[0] = s;
  if (out->requires_grad) {
    record(out, [a, out] {
      const double g = out->grad[0];
      for (std::size_t i = 0; i < a->numel(); ++i) a->grad[i] += g;
    });
  }
  return out;
}

void Graph::backward(const TensorPtr& loss) {
  if (loss->numel() != 1) {
    throw std::invalid_argument(cat("backward: loss must be scalar, got ", shape_str(loss->shape)));
  }
  // Intermediate grads are transient per backward pass; only leaves keep
  // accumulating across calls.
  for (const auto& t : outputs_) t->zero_grad();
  loss->grad[0] += 1.0;
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
}

}  // namespace pqat
