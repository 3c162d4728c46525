// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "core/common.hpp"
#include "core/graph.hpp"
#include "core/perturb.hpp"
#include "core/rng.hpp"

using namespace pqat;

TEST_CASE("init_virtual: zeros at sigma 0, deterministic, right spread") {
  auto [p0, q0] = init_virtual(10, 10, 0.0, 42);
  for (double v : p0->values) CHECK(v == 0.0);
  for (double v : q0->values) CHECK(v == 0.0);

  auto [p1, q1] = init_virtual(100, 100, 1e-2, 42);
  auto [p2, q2] = init_virtual(100, 100, 1e-2, 42);
  CHECK(p1->values == p2->values);
  CHECK(q1->values == q2->values);
  CHECK(p1->values != q1->values);

  // 10^4 samples: sample std within 5% of sigma.
  CHECK(p1->value_std() == doctest::Approx(1e-2).epsilon(0.05));
  CHECK(q1->value_std() == doctest::Approx(1e-2).epsilon(0.05));

  CHECK_THROWS_AS(init_virtual(4, 4, -1.0, 1), ConfigError);
}

TEST_CASE("renormalize: hand-computed values and fixed point") {
  Tensor m;
  m.shape = {2, 2};
  m.values = {1, 2, 3, 4};
  m.grad.assign(4, 0.0);
  CHECK(renormalize(m, 0.01));
  CHECK(m.values[0] == doctest::Approx(-0.013416).epsilon(1e-4));
  CHECK(m.values[1] == doctest::Approx(-0.004472).epsilon(1e-4));
  CHECK(m.values[2] == doctest::Approx(0.004472).epsilon(1e-4));
  CHECK(m.values[3] == doctest::Approx(0.013416).epsilon(1e-4));

  // Already mean 0 / std sigma: unchanged within 1e-12.
  const std::vector<double> before = m.values;
  CHECK(renormalize(m, 0.01));
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(m.values[i] == doctest::Approx(before[i]).epsilon(1e-12));
  }
}

TEST_CASE("renormalize postcondition over random matrices") {
  RandomStream rs(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto m = Tensor::zeros({13, 7});
    for (double& v : m->values) v = 3.0 * rs.normal() + 0.7;
    const double sigma = 0.05;
    CHECK(renormalize(*m, sigma));
    CHECK(std::fabs(m->value_mean()) < 1e-9);
    CHECK(std::fabs(m->value_std() - sigma) < 1e-9);
  }
}

TEST_CASE("renormalize degenerate constant matrix zeroes and warns") {
  auto m = Tensor::zeros({3, 3});
  m->fill(2.5);
  CHECK_FALSE(renormalize(*m, 0.01));
  for (double v : m->values) CHECK(v == 0.0);

  auto tiny = Tensor::zeros({1, 1});
  CHECK_THROWS_AS(renormalize(*tiny, 0.01), std::invalid_argument);
}

TEST_CASE("init_delta: zeros at sigma 0, bounded by sigma/sqrt(D)") {
  auto z = init_delta(2, 3, 4, 0.0, 9);
  for (double v : z->values) CHECK(v == 0.0);

  // D=16, sigma=0.01: every entry strictly inside (-sigma/sqrt(D), +).
  const double bound = 0.01 / std::sqrt(16.0);
  auto d = init_delta(5, 10, 16, 0.01, 11);
  for (double v : d->values) {
    CHECK(v > -bound);
    CHECK(v < bound);
  }

  auto d2 = init_delta(5, 10, 16, 0.01, 11);
  CHECK(d->values == d2->values);

  // D=1, sigma=1, 10^4 samples: mean close to 0.
  auto wide = init_delta(100, 100, 1, 1.0, 13);
  CHECK(std::fabs(wide->value_mean()) < 0.03);
}

namespace {

EmbeddingSet tiny_embeddings(bool with_virtual, double sigma = 1e-2) {
  EmbeddingSet emb;
  emb.vocab_size = 6;
  emb.dim = 4;
  emb.embeddings = init_embeddings(6, 4, 0.5, 21);
  if (with_virtual) {
    auto pq = init_virtual(6, 4, sigma, 22);
    emb.passage_virtual = pq.first;
    emb.question_virtual = pq.second;
  }
  return emb;
}

}  // namespace

TEST_CASE("compose with all channels disabled is the plain lookup, bitwise") {
  EmbeddingSet emb = tiny_embeddings(false);
  const std::vector<std::vector<int>> ids = {{3, 4, 1, 5, 3}};
  const std::vector<RoleMask> roles = {
      {Role::Passage, Role::Passage, Role::Special, Role::Question, Role::Question}};
  Graph g;
  auto z = compose(g, ids, roles, emb, nullptr);
  auto plain = g.gather_rows(emb.embeddings, ids[0]);
  CHECK(z->values == plain->values);
}

TEST_CASE("compose routes P to passage, Q to question/option, none to special") {
  EmbeddingSet emb = tiny_embeddings(true);
  const std::size_t d = emb.dim;
  // Token 3 at passage position 0 and question position 4.
  const std::vector<std::vector<int>> ids = {{3, 4, 1, 5, 3}};
  const std::vector<RoleMask> roles = {
      {Role::Passage, Role::Passage, Role::Special, Role::Option, Role::Question}};
  auto delta = init_delta(1, 5, d, 0.3, 33);
  Graph g;
  auto z = compose(g, ids, roles, emb, delta);

  for (std::size_t j = 0; j < d; ++j) {
    // Z[0] - Z[4] = P[3] - Q[3] + delta[0] - delta[4]
    const double lhs = z->values[0 * d + j] - z->values[4 * d + j];
    const double rhs = emb.passage_virtual->values[3 * d + j] -
                       emb.question_virtual->values[3 * d + j] + delta->values[0 * d + j] -
                       delta->values[4 * d + j];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
    // Special position: E + delta only.
    CHECK(z->values[2 * d + j] ==
          doctest::Approx(emb.embeddings->values[1 * d + j] + delta->values[2 * d + j])
              .epsilon(1e-12));
    // Option position gets the question-side matrix.
    CHECK(z->values[3 * d + j] ==
          doctest::Approx(emb.embeddings->values[5 * d + j] +
                          emb.question_virtual->values[5 * d + j] + delta->values[3 * d + j])
              .epsilon(1e-12));
  }
}

TEST_CASE("two passage occurrences of one token share the P row contribution") {
  EmbeddingSet emb = tiny_embeddings(true);
  const std::size_t d = emb.dim;
  const std::vector<std::vector<int>> ids = {{3, 3}};
  const std::vector<RoleMask> roles = {{Role::Passage, Role::Passage}};
  Graph g;
  auto z = compose(g, ids, roles, emb, nullptr);
  for (std::size_t j = 0; j < d; ++j) {
    CHECK(z->values[j] == z->values[d + j]);
  }
}

TEST_CASE("role isolation: passage gradients never reach Q and vice versa") {
  EmbeddingSet emb = tiny_embeddings(true);
  // Tokens 3,4 appear only as passage; token 5 only as question.
  const std::vector<std::vector<int>> ids = {{0, 3, 4, 1, 5, 1}};
  const std::vector<RoleMask> roles = {{Role::Special, Role::Passage, Role::Passage, Role::Special,
                                        Role::Question, Role::Special}};
  Graph g;
  auto z = compose(g, ids, roles, emb, nullptr);
  // Weighted sum so the gradient is position-dependent.
  auto w = Tensor::zeros({emb.dim, 1});
  for (std::size_t j = 0; j < emb.dim; ++j) w->values[j] = 1.0 + static_cast<double>(j);
  g.backward(g.sum(g.matmul(z, w)));

  const std::size_t d = emb.dim;
  auto row_is_zero = [&](const TensorPtr& t, int row) {
    for (std::size_t j = 0; j < d; ++j) {
      if (t->grad[static_cast<std::size_t>(row) * d + j] != 0.0) return false;
    }
    return true;
  };
  // Q rows of passage-only tokens are zero; P rows of question-only tokens are zero.
  CHECK(row_is_zero(emb.question_virtual, 3));
  CHECK(row_is_zero(emb.question_virtual, 4));
  CHECK(row_is_zero(emb.passage_virtual, 5));
  CHECK_FALSE(row_is_zero(emb.passage_virtual, 3));
  CHECK_FALSE(row_is_zero(emb.question_virtual, 5));
  // Special positions touch neither.
  CHECK(row_is_zero(emb.passage_virtual, 0));
  CHECK(row_is_zero(emb.question_virtual, 0));
  CHECK(row_is_zero(emb.passage_virtual, 1));
  CHECK(row_is_zero(emb.question_virtual, 1));
}

TEST_CASE("occurrence sharing: P row gradient is the sum of per-occurrence gradients") {
  EmbeddingSet emb = tiny_embeddings(true);
  const std::size_t d = emb.dim;
  // Token 3 occurs three times as passage at positions 0, 2, 4.
  const std::vector<std::vector<int>> ids = {{3, 4, 3, 5, 3}};
  const std::vector<RoleMask> roles = {
      {Role::Passage, Role::Passage, Role::Passage, Role::Question, Role::Passage}};
  // Delta is the per-position probe: dL/d(delta[t]) equals dL/d(Z[t]).
  auto delta = init_delta(1, 5, d, 0.0, 1);
  Graph g;
  auto z = compose(g, ids, roles, emb, delta);
  auto w = Tensor::zeros({d, 1});
  for (std::size_t j = 0; j < d; ++j) w->values[j] = 0.5 + 0.25 * static_cast<double>(j);
  g.backward(g.sum(g.tanh(g.matmul(z, w))));

  for (std::size_t j = 0; j < d; ++j) {
    const double manual = delta->grad[0 * d + j] + delta->grad[2 * d + j] + delta->grad[4 * d + j];
    CHECK(emb.passage_virtual->grad[3 * d + j] == doctest::Approx(manual).epsilon(1e-12));
  }
}

TEST_CASE("update_delta: hand case and norm contract") {
  Tensor delta;
  delta.shape = {1, 1, 2};
  delta.values = {0, 0};
  delta.grad.assign(2, 0.0);
  Tensor grad = delta;
  grad.values = {3, 4};
  Tensor x = delta;
  x.values = {2, 0};  // |x| = 2
  update_delta(delta, grad, x, 0.5);
  CHECK(delta.values[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(delta.values[1] == doctest::Approx(0.8).epsilon(1e-12));

  // eps = 0 leaves delta unchanged.
  update_delta(delta, grad, x, 0.0);
  CHECK(delta.values[0] == doctest::Approx(0.6).epsilon(1e-12));

  // Zero gradient skips the example.
  Tensor zgrad = grad;
  zgrad.values = {0, 0};
  const auto before = delta.values;
  update_delta(delta, zgrad, x, 0.5);
  CHECK(delta.values == before);
}

TEST_CASE("update_delta step norm equals eps * |x| per example") {
  RandomStream rs(71);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t b = 3, t = 4, d = 5;
    auto delta = init_delta(b, t, d, 0.2, 100 + trial);
    auto grad = Tensor::zeros({b, t, d});
    auto x = Tensor::zeros({b, t, d});
    for (double& v : grad->values) v = rs.normal();
    for (double& v : x->values) v = 2.0 * rs.normal();
    const double eps = 0.01 * (trial + 1);
    Tensor before = *delta;
    update_delta(*delta, *grad, *x, eps);
    for (std::size_t bb = 0; bb < b; ++bb) {
      double step_sq = 0.0, x_sq = 0.0;
      for (std::size_t i = bb * t * d; i < (bb + 1) * t * d; ++i) {
        step_sq += (delta->values[i] - before.values[i]) * (delta->values[i] - before.values[i]);
        x_sq += x->values[i] * x->values[i];
      }
      CHECK(std::fabs(std::sqrt(step_sq) - eps * std::sqrt(x_sq)) < 1e-9);
    }
  }
}

TEST_CASE("update_delta whole-batch scope uses one norm") {
  const std::size_t b = 2, t = 1, d = 2;
  auto delta = Tensor::zeros({b, t, d});
  auto grad = Tensor::zeros({b, t, d});
  grad->values = {3, 4, 0, 0};
  auto x = Tensor::zeros({b, t, d});
  x->values = {2, 0, 0, 0};
  update_delta(*delta, *grad, *x, 0.5, DeltaNormScope::WholeBatch);
  // Whole-batch: |g| = 5, |x| = 2, step = g/5 * 1.0
  CHECK(delta->values[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(delta->values[1] == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(delta->values[2] == 0.0);
}

TEST_CASE("update_virtual_rowwise: hand case, skips zero rows, checks row_norms size") {
  Tensor m;
  m.shape = {2, 3};
  m.values = {1, 1, 1, 0, 0, 0};
  m.grad.assign(6, 0.0);
  Tensor grad = m;
  grad.values = {0, 0, 0, 0, 3, 4};
  update_virtual_rowwise(m, grad, {1.0, 1.0}, 0.1);
  CHECK(m.values[0] == 1.0);  // zero-gradient row untouched
  CHECK(m.values[3] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(m.values[4] == doctest::Approx(0.06).epsilon(1e-12));
  CHECK(m.values[5] == doctest::Approx(0.08).epsilon(1e-12));

  CHECK_THROWS_AS(update_virtual_rowwise(m, grad, {1.0}, 0.1), std::invalid_argument);
}

TEST_CASE("update_virtual_rowwise step norm equals eps * row_norm per row") {
  RandomStream rs(81);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t v = 6, d = 4;
    auto m = Tensor::zeros({v, d});
    auto grad = Tensor::zeros({v, d});
    for (double& x : m->values) x = rs.normal();
    for (double& x : grad->values) x = rs.normal();
    std::vector<double> row_norms(v);
    for (double& x : row_norms) x = 0.5 + rs.uniform01();
    const double eps = 0.02;
    Tensor before = *m;
    update_virtual_rowwise(*m, *grad, row_norms, eps);
    for (std::size_t i = 0; i < v; ++i) {
      double step_sq = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        step_sq += (m->values[i * d + j] - before.values[i * d + j]) *
                   (m->values[i * d + j] - before.values[i * d + j]);
      }
      CHECK(std::fabs(std::sqrt(step_sq) - eps * row_norms[i]) < 1e-9);
    }
  }
}

TEST_CASE("pgd_update_classic: step and radial projection") {
  Tensor delta;
  delta.shape = {1, 1, 2};
  delta.values = {0, 0};
  delta.grad.assign(2, 0.0);
  Tensor grad = delta;
  grad.values = {1, 0};
  pgd_update_classic(delta, grad, 3.0, 1.0);
  CHECK(delta.values[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(delta.values[1] == 0.0);

  // Inside the ball: projection is the identity.
  delta.values = {0.1, 0.1};
  grad.values = {0.3, 0.4};
  pgd_update_classic(delta, grad, 0.05, 10.0);
  CHECK(delta.values[0] == doctest::Approx(0.1 + 0.05 * 0.6).epsilon(1e-12));

  // Zero gradient: projected but not stepped.
  delta.values = {3.0, 4.0};
  grad.values = {0.0, 0.0};
  pgd_update_classic(delta, grad, 1.0, 1.0);
  CHECK(delta.values[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(delta.values[1] == doctest::Approx(0.8).epsilon(1e-12));

  // Invariant: |delta| <= eps_ball after any update.
  RandomStream rs(91);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor dlt;
    dlt.shape = {2, 3, 2};
    dlt.values.assign(12, 0.0);
    dlt.grad.assign(12, 0.0);
    Tensor grd = dlt;
    for (double& v : dlt.values) v = rs.normal();
    for (double& v : grd.values) v = rs.normal();
    pgd_update_classic(dlt, grd, 0.7, 0.9);
    for (std::size_t b = 0; b < 2; ++b) {
      double s = 0.0;
      for (std::size_t i = b * 6; i < (b + 1) * 6; ++i) s += dlt.values[i] * dlt.values[i];
      CHECK(std::sqrt(s) <= 0.9 + 1e-12);
    }
  }
}

TEST_CASE("grouped embedding init makes group members adjacent") {
  GroupedInitSpec spec;
  spec.first_id = 3;
  spec.n_groups = 4;
  spec.group_size = 4;
  spec.mix = 0.8;
  auto e = init_embeddings(32, 8, 0.1, 17, spec);
  auto dist = [&](int a, int b) {
    double s = 0.0;
    for (std::size_t j = 0; j < 8; ++j) {
      const double v = e->values[a * 8 + j] - e->values[b * 8 + j];
      s += v * v;
    }
    return std::sqrt(s);
  };
  // Same group (ids 3..6) vs cross group (3 vs 7..): within-distance smaller on average.
  double within = (dist(3, 4) + dist(3, 5) + dist(3, 6)) / 3.0;
  double across = (dist(3, 7) + dist(3, 11) + dist(3, 15)) / 3.0;
  CHECK(within < across);

  auto e2 = init_embeddings(32, 8, 0.1, 17, spec);
  CHECK(e->values == e2->values);
}
