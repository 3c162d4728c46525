// SPDX-License-Identifier: Apache-2.0
#include "core/perturb.hpp"

#include <cmath>
#include <iostream>
#include <stdexcept>

#include "core/common.hpp"
#include "core/rng.hpp"

namespace pqat {

TensorPtr init_embeddings(std::size_t vocab_size, std::size_t dim, double scale,
                          std::uint64_t seed, const std::optional<GroupedInitSpec>& groups) {
  if (scale < 0.0) throw ConfigError("init_embeddings: scale must be non-negative");
  RandomStream rs(mix_seed(seed, 0x45));
  auto e = Tensor::zeros({vocab_size, dim}, /*requires_grad=*/true);
  for (double& v : e->values) v = scale * rs.normal();
  if (groups && groups->n_groups > 0 && groups->mix > 0.0) {
    if (groups->mix > 1.0) throw ConfigError("init_embeddings: group mix must be in [0,1]");
    const double w_shared = std::sqrt(groups->mix);
    const double w_own = std::sqrt(1.0 - groups->mix);
    RandomStream gs(mix_seed(seed, 0x47));
    std::vector<double> base(dim);
    for (std::size_t gidx = 0; gidx < groups->n_groups; ++gidx) {
      for (double& b : base) b = scale * gs.normal();
      for (std::size_t k = 0; k < groups->group_size; ++k) {
        const std::size_t row = static_cast<std::size_t>(groups->first_id) +
                                gidx * groups->group_size + k;
        if (row >= vocab_size) break;
        for (std::size_t j = 0; j < dim; ++j) {
          e->values[row * dim + j] = w_own * e->values[row * dim + j] + w_shared * base[j];
        }
      }
    }
  }
  return e;
}

std::pair<TensorPtr, TensorPtr> init_virtual(std::size_t vocab_size, std::size_t dim, double sigma,
                                             std::uint64_t seed) {
  if (vocab_size < 1 || dim < 1) throw ConfigError("init_virtual: V and D must be >= 1");
  if (sigma < 0.0) throw ConfigError("init_virtual: sigma must be non-negative");
  auto p = Tensor::zeros({vocab_size, dim}, /*requires_grad=*/true);
  auto q = Tensor::zeros({vocab_size, dim}, /*requires_grad=*/true);
  RandomStream ps(mix_seed(seed, 0x50));
  RandomStream qs(mix_seed(seed, 0x51));
  for (double& v : p->values) v = sigma * ps.normal();
  for (double& v : q->values) v = sigma * qs.normal();
  return {p, q};
}

bool renormalize(Tensor& m, double sigma) {
  if (m.numel() < 2) throw std::invalid_argument("renormalize: matrix needs at least 2 entries");
  if (sigma < 0.0) throw ConfigError("renormalize: sigma must be non-negative");
  const double mu = m.value_mean();
  const double sd = m.value_std();
  if (sd == 0.0) {
    std::cerr << "warning: renormalize: degenerate (constant) matrix, output zeroed\n";
    m.fill(0.0);
    return false;
  }
  const double k = sigma / sd;
  for (double& v : m.values) v = (v - mu) * k;
  return true;
}

TensorPtr init_delta(std::size_t batch, std::size_t seq_len, std::size_t dim, double sigma,
                     std::uint64_t seed) {
  if (sigma < 0.0) throw ConfigError("init_delta: sigma must be non-negative");
  auto d = Tensor::zeros({batch, seq_len, dim}, /*requires_grad=*/true);
  if (sigma > 0.0) {
    RandomStream rs(mix_seed(seed, 0x52));
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(dim));
    for (double& v : d->values) v = inv_sqrt_d * rs.uniform(-sigma, sigma);
  }
  return d;
}

TensorPtr compose_sequence(Graph& g, const std::vector<int>& ids, const RoleMask& roles,
                           const EmbeddingSet& emb, const TensorPtr& delta_slice) {
  if (ids.size() != roles.size()) {
    throw std::invalid_argument(cat("compose: ids length ", ids.size(),
                                    " does not match role mask length ", roles.size()));
  }
  TensorPtr z = g.gather_rows(emb.embeddings, ids);
  if (emb.passage_virtual) {
    std::vector<unsigned char> keep(ids.size());
    for (std::size_t i = 0; i < roles.size(); ++i) keep[i] = roles[i] == Role::Passage ? 1 : 0;
    z = g.add(z, g.gather_rows_masked(emb.passage_virtual, ids, keep));
  }
  if (emb.question_virtual) {
    std::vector<unsigned char> keep(ids.size());
    for (std::size_t i = 0; i < roles.size(); ++i) {
      keep[i] = (roles[i] == Role::Question || roles[i] == Role::Option) ? 1 : 0;
    }
    z = g.add(z, g.gather_rows_masked(emb.question_virtual, ids, keep));
  }
  if (delta_slice) z = g.add(z, delta_slice);
  return z;
}

TensorPtr compose(Graph& g, const std::vector<std::vector<int>>& ids,
                  const std::vector<RoleMask>& roles, const EmbeddingSet& emb,
                  const TensorPtr& delta) {
  if (ids.size() != roles.size()) {
    throw std::invalid_argument(cat("compose: ", ids.size(), " sequences vs ", roles.size(),
                                    " role masks"));
  }
  if (ids.empty()) throw std::invalid_argument("compose: empty batch");
  const std::size_t seq_len = ids[0].size();
  std::vector<TensorPtr> parts;
  parts.reserve(ids.size());
  for (std::size_t b = 0; b < ids.size(); ++b) {
    if (ids[b].size() != seq_len) {
      throw std::invalid_argument("compose: ragged batch, sequences must share one length");
    }
    TensorPtr delta_slice;
    if (delta) delta_slice = g.slice_rows(delta, b * seq_len, seq_len);
    parts.push_back(compose_sequence(g, ids[b], roles[b], emb, delta_slice));
  }
  if (parts.size() == 1) return parts[0];
  return g.concat_rows(parts);
}

namespace {
constexpr double kZeroGradThreshold = 1e-12;

double slab_norm(const std::vector<double>& v, std::size_t begin, std::size_t len) {
  double s = 0.0;
  for (std::size_t i = begin; i < begin + len; ++i) s += v[i] * v[i];
  return std::sqrt(s);
}
}  // namespace

void update_delta(Tensor& delta, const Tensor& grad, const Tensor& x_clean, double eps,
                  DeltaNormScope scope) {
  if (delta.shape != grad.shape || delta.numel() != x_clean.numel()) {
    throw std::invalid_argument(cat("update_delta: shape mismatch ", shape_str(delta.shape), " / ",
                                    shape_str(grad.shape), " / ", shape_str(x_clean.shape)));
  }
  const std::size_t batch = delta.shape.size() == 3 ? delta.shape[0] : 1;
  const std::size_t slab = delta.numel() / batch;
  if (scope == DeltaNormScope::WholeBatch) {
    const double g_norm = slab_norm(grad.values, 0, grad.numel());
    if (g_norm < kZeroGradThreshold) return;
    const double step = slab_norm(x_clean.values, 0, x_clean.numel()) * eps / g_norm;
    for (std::size_t i = 0; i < delta.numel(); ++i) delta.values[i] += grad.values[i] * step;
    return;
  }
  for (std::size_t b = 0; b < batch; ++b) {
    const double g_norm = slab_norm(grad.values, b * slab, slab);
    if (g_norm < kZeroGradThreshold) continue;
    const double step = slab_norm(x_clean.values, b * slab, slab) * eps / g_norm;
    for (std::size_t i = b * slab; i < (b + 1) * slab; ++i) {
      delta.values[i] += grad.values[i] * step;
    }
  }
}

void update_virtual_rowwise(Tensor& m, const Tensor& grad, const std::vector<double>& row_norms,
                            double eps) {
  if (m.shape != grad.shape || m.shape.size() != 2) {
    throw std::invalid_argument(cat("update_virtual_rowwise: shape mismatch ", shape_str(m.shape),
                                    " vs ", shape_str(grad.shape)));
  }
  const std::size_t v = m.shape[0], d = m.shape[1];
  if (row_norms.size() != v) {
    throw std::invalid_argument(cat("update_virtual_rowwise: row_norms covers ", row_norms.size(),
                                    " rows, need ", v));
  }
  for (std::size_t i = 0; i < v; ++i) {
    const double g_norm = slab_norm(grad.values, i * d, d);
    if (g_norm < kZeroGradThreshold) continue;
    const double step = row_norms[i] * eps / g_norm;
    for (std::size_t j = 0; j < d; ++j) m.values[i * d + j] += grad.values[i * d + j] * step;
  }
}

void pgd_update_classic(Tensor& delta, const Tensor& grad, double alpha, double eps_ball) {
  if (delta.shape != grad.shape) {
    throw std::invalid_argument(cat("pgd_update_classic: shape mismatch ", shape_str(delta.shape),
                                    " vs ", shape_str(grad.shape)));
  }
  if (alpha <= 0.0 || eps_ball <= 0.0) {
    throw ConfigError("pgd_update_classic: alpha and eps_ball must be positive");
  }
  const std::size_t batch = delta.shape.size() == 3 ? delta.shape[0] : 1;
  const std::size_t slab = delta.numel() / batch;
  for (std::size_t b = 0; b < batch; ++b) {
    const double g_norm = slab_norm(grad.values, b * slab, slab);
    if (g_norm >= kZeroGradThreshold) {
      const double step = alpha / g_norm;
      for (std::size_t i = b * slab; i < (b + 1) * slab; ++i) {
        delta.values[i] += grad.values[i] * step;
      }
    }
    const double d_norm = slab_norm(delta.values, b * slab, slab);
    if (d_norm > eps_ball) {
      const double shrink = eps_ball / d_norm;
      for (std::size_t i = b * slab; i < (b + 1) * slab; ++i) delta.values[i] *= shrink;
    }
  }
}

std::vector<double> embedding_row_norms(const Tensor& embeddings) {
  const std::size_t v = embeddings.shape[0], d = embeddings.shape[1];
  std::vector<double> norms(v);
  for (std::size_t i = 0; i < v; ++i) norms[i] = slab_norm(embeddings.values, i * d, d);
  return norms;
}

Tensor clean_embedding_values(const Tensor& embeddings, const std::vector<std::vector<int>>& ids) {
  const std::size_t d = embeddings.shape[1];
  const std::size_t batch = ids.size();
  const std::size_t seq_len = ids.empty() ? 0 : ids[0].size();
  Tensor x;
  x.shape = {batch, seq_len, d};
  x.values.assign(batch * seq_len * d, 0.0);
  x.grad.assign(x.values.size(), 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < seq_len; ++t) {
      const double* src = &embeddings.values[static_cast<std::size_t>(ids[b][t]) * d];
      std::copy(src, src + d, &x.values[(b * seq_len + t) * d]);
    }
  }
  return x;
}

}  // namespace pqat
