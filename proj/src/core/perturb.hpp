// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "core/graph.hpp"
#include "core/tensor.hpp"

namespace pqat {

// Position role within an input sequence. Routes which virtual matrix, if
// any, contributes a perturbation at that position.
enum class Role : std::uint8_t { Passage, Question, Option, Special };
using RoleMask = std::vector<Role>;

// Real embedding matrix plus the two virtual perturbation accumulators.
// The virtual matrices only ever contribute additive perturbations during
// training; inference reads `embeddings` alone. Either virtual matrix may be
// null when its channel is disabled.
struct EmbeddingSet {
  TensorPtr embeddings;        // V x D, trainable
  TensorPtr passage_virtual;   // V x D, collects perturbations at passage positions
  TensorPtr question_virtual;  // V x D, collects perturbations at question/option positions
  std::size_t vocab_size = 0;
  std::size_t dim = 0;
};

// Per-batch local perturbation plus the strengths that drive the updates.
struct PerturbationState {
  TensorPtr delta;  // B x T x D, or null when the local channel is disabled
  double sigma = 0.0;
  double eps_delta = 0.0;
  double eps_p = 0.0;
  double eps_q = 0.0;
};

// Correlated-group embedding initialization: consecutive ids inside
// [first_id, first_id + n_groups*group_size) share a group base vector, so
// group members start out embedding-adjacent.
struct GroupedInitSpec {
  int first_id = 0;
  std::size_t n_groups = 0;
  std::size_t group_size = 1;
  double mix = 0.0;  // fraction of variance shared within a group, in [0,1]
};

// Real embedding matrix, N(0, scale^2) per entry, optionally group-correlated.
TensorPtr init_embeddings(std::size_t vocab_size, std::size_t dim, double scale,
                          std::uint64_t seed, const std::optional<GroupedInitSpec>& groups = {});

// Virtual matrices, entries drawn independently from N(0, sigma^2).
std::pair<TensorPtr, TensorPtr> init_virtual(std::size_t vocab_size, std::size_t dim, double sigma,
                                             std::uint64_t seed);

// Shifts and rescales all V*D entries of M so that the scalar mean is 0 and
// the scalar population std is sigma. A constant matrix cannot be rescaled:
// it is zeroed and false is returned (with a warning on stderr).
bool renormalize(Tensor& m, double sigma);

// Local perturbation, entries uniform on (-sigma, sigma) scaled by 1/sqrt(D).
TensorPtr init_delta(std::size_t batch, std::size_t seq_len, std::size_t dim, double sigma,
                     std::uint64_t seed);

// Adversarial input composition for one batch of sequences, recorded on `g`:
//   Z[b,t] = E[ids[b,t]]
//          + P[ids[b,t]] if role == Passage
//          + Q[ids[b,t]] if role in {Question, Option}
//          + delta[b,t]
// Special positions receive E + delta only. Null channels are skipped
// entirely, so a fully disabled composition returns the plain lookup.
// Returns one (B*T) x D tensor; row b*T+t is position t of sequence b.
TensorPtr compose(Graph& g, const std::vector<std::vector<int>>& ids,
                  const std::vector<RoleMask>& roles, const EmbeddingSet& emb,
                  const TensorPtr& delta);

// Same, for a single sequence; delta_slice (T x D) is added when non-null.
TensorPtr compose_sequence(Graph& g, const std::vector<int>& ids, const RoleMask& roles,
                           const EmbeddingSet& emb, const TensorPtr& delta_slice);

enum class DeltaNormScope { PerExample, WholeBatch };

// Normalized ascent step on the local perturbation:
//   delta[b] += grad[b] / |grad[b]|_2 * |x_clean[b]|_2 * eps
// with norms over each example's full T x D slice (or over the whole batch
// when scope is WholeBatch). Examples with |grad[b]| < 1e-12 are skipped.
void update_delta(Tensor& delta, const Tensor& grad, const Tensor& x_clean, double eps,
                  DeltaNormScope scope = DeltaNormScope::PerExample);

// Token-wise normalized ascent on a virtual matrix: every vocabulary row with
// |grad row| >= 1e-12 moves by grad_row / |grad_row|_2 * row_norms[i] * eps.
// row_norms must cover all V rows.
void update_virtual_rowwise(Tensor& m, const Tensor& grad, const std::vector<double>& row_norms,
                            double eps);

// Classic projected-gradient step, per example: a normalized step of size
// alpha followed by projection onto the L2 ball of radius eps_ball. A zero
// gradient skips the step but still projects.
void pgd_update_classic(Tensor& delta, const Tensor& grad, double alpha, double eps_ball);

// |E[i]|_2 for every vocabulary row.
std::vector<double> embedding_row_norms(const Tensor& embeddings);

// Clean (graph-free) embedding lookup for the norm terms above: (B*T) x D.
Tensor clean_embedding_values(const Tensor& embeddings, const std::vector<std::vector<int>>& ids);

}  // namespace pqat
