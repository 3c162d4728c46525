// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <tuple>

#include <json.hpp>

#include "core/data.hpp"
#include "core/grad_check.hpp"
#include "core/model.hpp"
#include "core/perturb.hpp"
#include "core/rng.hpp"

using namespace pqat;

namespace {

ModelParams tiny_model(std::size_t dim = 6, std::size_t hidden = 12, std::size_t max_len = 10,
                       std::uint64_t seed = 5) {
  ModelConfig mc;
  mc.dim = dim;
  mc.hidden = hidden;
  mc.n_blocks = 1;
  mc.max_len = max_len;
  mc.max_answer_len = 4;
  return init_model(mc, seed);
}

EmbeddingSet tiny_emb(std::size_t vocab, std::size_t dim, bool with_virtual,
                      std::uint64_t seed = 6) {
  EmbeddingSet emb;
  emb.vocab_size = vocab;
  emb.dim = dim;
  emb.embeddings = init_embeddings(vocab, dim, 0.3, seed);
  if (with_virtual) {
    auto pq = init_virtual(vocab, dim, 0.05, seed + 1);
    emb.passage_virtual = pq.first;
    emb.question_virtual = pq.second;
  }
  return emb;
}

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "pqat_test_model";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("encode with zero output projections is the identity") {
  ModelParams params = tiny_model();
  params.blocks[0].w_out->fill(0.0);
  params.blocks[0].w_ff2->fill(0.0);
  RandomStream rs(3);
  auto z = Tensor::zeros({4, 6});
  for (double& v : z->values) v = rs.normal();
  Graph g;
  auto out = encode(g, z, params, nullptr);
  CHECK(out->values == z->values);
}

TEST_CASE("encode is independent across batch order") {
  auto ds = gen_kv_task(6, 2, 21, 17);
  ModelParams params = tiny_model(8, 16, 12, 9);
  EmbeddingSet emb = tiny_emb(21, 8, false);
  Graph g1, g2;
  Batch b12 = build_batch(ds, {0, 1}, 12);
  Batch b21 = build_batch(ds, {1, 0}, 12);
  auto r12 = span_forward(g1, b12, emb, nullptr, params);
  auto r21 = span_forward(g2, b21, emb, nullptr, params);
  CHECK(r12.start_logits[0]->values == r21.start_logits[1]->values);
  CHECK(r12.end_logits[1]->values == r21.end_logits[0]->values);
  CHECK(r12.loss->values[0] == doctest::Approx(r21.loss->values[0]).epsilon(1e-15));
}

TEST_CASE("encoder parameter gradients match finite differences") {
  ModelParams params = tiny_model(6, 12, 10, 41);
  RandomStream rs(42);
  auto z = Tensor::zeros({5, 6});
  for (double& v : z->values) v = rs.normal();
  auto head = Tensor::zeros({6, 1});
  for (double& v : head->values) v = rs.normal();

  auto build = [&](Graph& g) {
    return g.mul_scalar(g.sum(g.matmul(encode(g, z, params, nullptr), head)), 1.0 / 30.0);
  };
  Graph g;
  g.backward(build(g));
  auto forward = [&] {
    Graph gg(false);
    return build(gg)->values[0];
  };
  CHECK(finite_diff_check_many(forward, params.all_params(), 1e-4) < 1e-3);
}

TEST_CASE("full span model gradients (params, E, P, Q, delta) match finite differences") {
  auto ds = gen_kv_task(4, 2, 21, 23);
  const std::size_t dim = 6;
  ModelParams params = tiny_model(dim, 12, 10, 31);
  EmbeddingSet emb = tiny_emb(21, dim, true, 32);
  Batch batch = build_batch(ds, {0, 1}, 10);
  auto delta = init_delta(batch.seqs.size(), batch.seq_len, dim, 0.05, 33);

  auto build = [&](Graph& g) { return span_forward(g, batch, emb, delta, params).loss; };
  Graph g;
  g.backward(build(g));
  auto forward = [&] {
    Graph gg(false);
    return build(gg)->values[0];
  };
  std::vector<TensorPtr> leaves = params.all_params();
  leaves.push_back(emb.embeddings);
  leaves.push_back(emb.passage_virtual);
  leaves.push_back(emb.question_virtual);
  leaves.push_back(delta);
  // h below the typical distance to the nearest relu kink; larger steps can
  // cross one and spoil the quadratic truncation.
  CHECK(finite_diff_check_many(forward, leaves, 3e-5) < 1e-3);
}

TEST_CASE("span loss is ln(T_valid) under uniform logits") {
  auto ds = gen_kv_task(3, 2, 21, 29);  // CLS + 4 + SEP + 1 + SEP = 8 positions
  ModelParams params = tiny_model(8, 16, 8, 51);
  params.heads.span_start->fill(0.0);
  params.heads.span_end->fill(0.0);
  EmbeddingSet emb = tiny_emb(21, 8, false);
  Batch batch = build_batch(ds, {0}, 8);
  REQUIRE(batch.seqs[0].valid_len == 8);
  Graph g;
  auto res = span_forward(g, batch, emb, nullptr, params);
  CHECK(res.loss->values[0] == doctest::Approx(std::log(8.0)).epsilon(1e-9));
}

TEST_CASE("span loss gradient reaches delta") {
  auto ds = gen_kv_task(2, 2, 21, 31);
  const std::size_t dim = 8;
  ModelParams params = tiny_model(dim, 16, 10, 61);
  EmbeddingSet emb = tiny_emb(21, dim, false);
  Batch batch = build_batch(ds, {0, 1}, 10);
  auto delta = init_delta(batch.seqs.size(), batch.seq_len, dim, 0.0, 1);
  Graph g;
  auto res = span_forward(g, batch, emb, delta, params);
  g.backward(res.loss);
  double norm = 0.0;
  for (double v : delta->grad) norm += v * v;
  CHECK(std::sqrt(norm) > 1e-8);
}

TEST_CASE("choice loss is ln(m) for identical option sequences") {
  Example ex;
  ex.passage = {3, 13};
  ex.question = {3};
  ex.options = {{14}, {14}, {14}};  // identical: logits must be uniform
  ex.choice = 1;
  Vocab vocab = build_vocab(10, 10);
  Batch batch = build_batch({&ex}, vocab, 12);
  ModelParams params = tiny_model(8, 16, 12, 71);
  EmbeddingSet emb = tiny_emb(23, 8, false);
  Graph g;
  auto res = choice_forward(g, batch, emb, nullptr, params);
  CHECK(res.loss->values[0] == doctest::Approx(std::log(3.0)).epsilon(1e-9));
  CHECK(res.choice_logits[0]->values[0] ==
        doctest::Approx(res.choice_logits[0]->values[2]).epsilon(1e-12));
}

TEST_CASE("choice head gradient matches finite differences") {
  auto ds = gen_choice_task(3, 2, 3, 31, 81);
  const std::size_t dim = 6;
  ModelParams params = tiny_model(dim, 12, 12, 91);
  EmbeddingSet emb = tiny_emb(31, dim, false);
  Batch batch = build_batch(ds, {0, 1}, 12);
  auto build = [&](Graph& g) { return choice_forward(g, batch, emb, nullptr, params).loss; };
  Graph g;
  g.backward(build(g));
  auto forward = [&] {
    Graph gg(false);
    return build(gg)->values[0];
  };
  CHECK(finite_diff_check(forward, params.heads.choice, 1e-4) < 1e-4);
  CHECK(finite_diff_check_many(forward, {emb.embeddings, params.position}, 1e-4) < 1e-3);
}

TEST_CASE("predict_span: basics and tie-breaking") {
  // One-position passage.
  CHECK(predict_span({0, 5, 0}, {0, 1, 0}, 1, 1, 4) == SpanAnswer{1, 1});
  // Clear peaks at (2,4).
  std::vector<double> s = {0, 0, 9, 0, 0, 0};
  std::vector<double> e = {0, 0, 0, 0, 7, 0};
  CHECK(predict_span(s, e, 1, 5, 4) == SpanAnswer{2, 4});
  // end < start is never produced; cap respected.
  std::vector<double> s2 = {0, 0, 0, 0, 0, 9};
  std::vector<double> e2 = {0, 9, 0, 0, 0, 0};
  const SpanAnswer a = predict_span(s2, e2, 1, 5, 2);
  CHECK(a.start <= a.end);
  CHECK(a.end - a.start <= 2);
}

TEST_CASE("predict_span agrees with exhaustive enumeration on random logits") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    RandomStream rs(mix_seed(1234, seed));
    const std::size_t t = 12;
    std::vector<double> s(t), e(t);
    for (double& v : s) v = rs.normal();
    for (double& v : e) v = rs.normal();
    const std::size_t pf = 1 + rs.index(3);
    const std::size_t pl = 1 + rs.index(t - pf - 1);
    const int cap = static_cast<int>(rs.index(6));

    // Independent selection: gather all pairs, then pick by (score, -s, -e).
    std::tuple<double, std::size_t, std::size_t> best{-1e300, 0, 0};
    bool found = false;
    for (std::size_t ss = pf; ss < pf + pl; ++ss) {
      for (std::size_t ee = ss; ee < pf + pl; ++ee) {
        if (ee - ss > static_cast<std::size_t>(cap)) continue;
        const double score = s[ss] + e[ee];
        if (!found || score > std::get<0>(best) ||
            (score == std::get<0>(best) &&
             (ss < std::get<1>(best) ||
              (ss == std::get<1>(best) && ee < std::get<2>(best))))) {
          best = {score, ss, ee};
          found = true;
        }
      }
    }
    const SpanAnswer got = predict_span(s, e, pf, pl, cap);
    CHECK(got.start == std::get<1>(best));
    CHECK(got.end == std::get<2>(best));
  }
}

TEST_CASE("checkpoint round trip preserves parameters and excludes the virtual matrices") {
  ModelParams params = tiny_model(6, 12, 10, 101);
  EmbeddingSet emb = tiny_emb(21, 6, true, 102);
  const auto path = temp_file("ckpt.json");
  save_checkpoint(path.string(), params, emb);

  Checkpoint ck = load_checkpoint(path.string());
  CHECK(ck.params.config.dim == 6);
  CHECK(ck.emb.embeddings->values == emb.embeddings->values);
  CHECK(ck.params.position->values == params.position->values);
  CHECK(ck.params.blocks[0].w_ff1->values == params.blocks[0].w_ff1->values);
  CHECK(ck.params.heads.choice->values == params.heads.choice->values);
  CHECK_FALSE(ck.emb.passage_virtual);
  CHECK_FALSE(ck.emb.question_virtual);

  // Byte inspection: nothing that looks like a virtual-matrix payload.
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  for (const char* marker : {"virtual", "\"P\"", "\"Q\"", "passage_matrix", "question_matrix"}) {
    CHECK(bytes.find(marker) == std::string::npos);
  }
  // Top-level keys are exactly the allowed set.
  auto j = nlohmann::json::parse(bytes);
  const std::set<std::string> allowed = {"format",  "version",  "vocab_size", "dim",
                                         "hidden",  "n_blocks", "max_len",    "max_answer_len",
                                         "embedding", "position", "blocks",   "heads"};
  for (const auto& [key, value] : j.items()) {
    CHECK(allowed.count(key) == 1);
  }

  CHECK_THROWS(load_checkpoint(temp_file("missing.json").string()));
}
