// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "moecache/moe.hpp"
#include "test_util.hpp"

using namespace moecache;

TEST_CASE("softmax: uniform logits give the uniform distribution") {
  const Vec p = softmax(Vec::Zero(4));
  for (int i = 0; i < 4; ++i) CHECK(p[i] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("softmax: invariant under adding a constant") {
  SeedStream rng(11);
  Vec logits(6);
  for (int i = 0; i < 6; ++i) logits[i] = 3.0 * rng.gaussian();
  const Vec a = softmax(logits);
  const Vec b = softmax(Vec(logits.array() + 123.456));
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("softmax: matches high-precision scalar evaluation") {
  Vec logits(2);
  logits << 1.0, 2.0;
  const Vec p = softmax(logits);
  const long double e1 = expl(1.0L), e2 = expl(2.0L);
  CHECK(p[0] == doctest::Approx(static_cast<double>(e1 / (e1 + e2))).epsilon(1e-14));
  CHECK(p[1] == doctest::Approx(static_cast<double>(e2 / (e1 + e2))).epsilon(1e-14));
}

TEST_CASE("softmax: rejects non-finite input") {
  Vec logits(2);
  logits << 1.0, std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(softmax(logits), std::invalid_argument);
}

TEST_CASE("top_k_select: distinct order, tie-break, full selection") {
  Vec p(4);
  p << 0.4, 0.3, 0.2, 0.1;
  CHECK(top_k_select(p, 2) == indicator({0, 1}, 4));
  const Vec uniform = Vec::Constant(4, 0.25);
  CHECK(top_k_select(uniform, 2) == indicator({0, 1}, 4));
  SeedStream rng(3);
  const Vec q = testutil::random_simplex(rng, 4);
  CHECK(top_k_select(q, 4) == Vec::Ones(4));
  CHECK_THROWS_AS(top_k_select(q, 5), std::invalid_argument);
}

TEST_CASE("expert_forward: zero input maps to zero") {
  SeedStream rng(7);
  ExpertWeights e{testutil::random_matrix(rng, 3, 5), testutil::random_matrix(rng, 3, 5),
                  testutil::random_matrix(rng, 5, 3)};
  CHECK(expert_forward(e, Vec::Zero(5)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("expert_forward: 1x1 ReLU hand computation") {
  ExpertWeights e{Mat::Ones(1, 1), Mat::Ones(1, 1), Mat::Ones(1, 1)};
  Vec x(1);
  x << 2.0;
  const Vec y = expert_forward(e, x, Activation::kReLU);
  CHECK(y[0] == doctest::Approx(4.0));
}

TEST_CASE("expert_forward: matches a naive loop oracle") {
  SeedStream rng(13);
  ExpertWeights e{testutil::random_matrix(rng, 3, 5), testutil::random_matrix(rng, 3, 5),
                  testutil::random_matrix(rng, 5, 3)};
  Vec x(5);
  for (int i = 0; i < 5; ++i) x[i] = rng.gaussian();

  Vec gate(3), up(3);
  for (int i = 0; i < 3; ++i) {
    double g = 0.0, u = 0.0;
    for (int j = 0; j < 5; ++j) {
      g += e.w_gate(i, j) * x[j];
      u += e.w_up(i, j) * x[j];
    }
    gate[i] = g / (1.0 + std::exp(-g));
    up[i] = u;
  }
  Vec expect = Vec::Zero(5);
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 3; ++j) expect[i] += e.w_down(i, j) * gate[j] * up[j];
  }
  CHECK((expert_forward(e, x) - expect).cwiseAbs().maxCoeff() < 1e-12);

  ExpertWeights bad = e;
  bad.w_up = testutil::random_matrix(rng, 3, 4);
  CHECK_THROWS_AS(expert_forward(bad, x), std::invalid_argument);
}

namespace {
MoELayer random_layer(SeedStream& rng, int experts, int d, int dff) {
  MoELayer layer;
  layer.w_router = testutil::random_matrix(rng, experts, d);
  for (int e = 0; e < experts; ++e) {
    layer.experts.push_back({testutil::random_matrix(rng, dff, d),
                             testutil::random_matrix(rng, dff, d),
                             testutil::random_matrix(rng, d, dff)});
  }
  return layer;
}
}  // namespace

TEST_CASE("moe_layer_forward: degenerate gate follows the dominant expert") {
  SeedStream rng(17);
  MoELayer layer = random_layer(rng, 2, 4, 6);
  layer.w_router.row(0).setConstant(50.0);
  layer.w_router.row(1).setConstant(-50.0);
  Vec x = Vec::Ones(4);
  const LayerOutput out = moe_layer_forward(layer, x, 1);
  CHECK(out.p[0] > 1.0 - 1e-12);
  CHECK((out.y - out.p[0] * expert_forward(layer.experts[0], x)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("moe_layer_forward: K=E equals the dense mixture") {
  SeedStream rng(19);
  MoELayer layer = random_layer(rng, 4, 5, 7);
  Vec x(5);
  for (int i = 0; i < 5; ++i) x[i] = rng.gaussian();
  const LayerOutput out = moe_layer_forward(layer, x, 4);
  Vec dense = Vec::Zero(5);
  for (int e = 0; e < 4; ++e) dense += out.p[e] * expert_forward(layer.experts[e], x);
  CHECK((out.y - dense).norm() < 1e-6 * std::max(1.0, dense.norm()));
}

TEST_CASE("moe_layer_forward: matches a mask-all-experts oracle") {
  SeedStream rng(23);
  MoELayer layer = random_layer(rng, 5, 4, 6);
  Vec x(4);
  for (int i = 0; i < 4; ++i) x[i] = rng.gaussian();
  const int k = 2;
  const LayerOutput out = moe_layer_forward(layer, x, k);

  const Vec p = softmax(Vec(layer.w_router * x));
  const Vec mask = top_k_select(p, k);
  Vec expect = Vec::Zero(4);
  for (int e = 0; e < 5; ++e) {
    expect += mask[e] * p[e] * expert_forward(layer.experts[e], x);
  }
  CHECK((out.y - expect).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((out.p - p).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(indicator(out.selected, 5) == mask);
}

TEST_CASE("model_forward: deterministic, trace shapes, id checks") {
  ModelConfig cfg;
  cfg.layers = 3;
  cfg.experts = 6;
  cfg.top_k = 2;
  cfg.hidden_dim = 8;
  cfg.ff_dim = 12;
  cfg.vocab = 10;
  MoEModel m = MoEModel::random_init(cfg, SeedStream(5));

  const std::vector<int> tokens{1, 4, 7, 2};
  const ForwardResult a = model_forward(m, tokens);
  const ForwardResult b = model_forward(m, tokens);
  CHECK(a.logits == b.logits);
  for (int l = 0; l < cfg.layers; ++l) CHECK(a.trace.probs[l] == b.trace.probs[l]);

  const ForwardResult single = model_forward(m, {3});
  CHECK(single.trace.tokens == 1);
  CHECK(static_cast<int>(single.trace.probs.size()) == cfg.layers);
  single.trace.validate();

  CHECK_THROWS_AS(model_forward(m, {10}), std::invalid_argument);
  CHECK_THROWS_AS(model_forward(m, std::vector<int>(cfg.max_seq_len + 1, 0)),
                  std::invalid_argument);
}

TEST_CASE("model_forward: single-layer composition oracle") {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.experts = 4;
  cfg.top_k = 2;
  cfg.hidden_dim = 6;
  cfg.ff_dim = 9;
  cfg.vocab = 8;
  MoEModel m = MoEModel::random_init(cfg, SeedStream(29));
  const int token = 5;
  const ForwardResult fwd = model_forward(m, {token});

  const Vec h0 = m.embed.row(token).transpose();
  const LayerOutput lo = moe_layer_forward(m.layers[0], h0, cfg.top_k);
  const Vec expect = m.head * (h0 + lo.y);
  CHECK((fwd.logits.row(0).transpose() - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("model_forward: trace invariants hold on a random model") {
  ModelConfig cfg;
  cfg.layers = 4;
  cfg.experts = 16;
  cfg.top_k = 2;
  cfg.hidden_dim = 16;
  cfg.ff_dim = 24;
  cfg.vocab = 32;
  MoEModel m = MoEModel::random_init(cfg, SeedStream(31));
  SeedStream rng(37);
  std::vector<int> tokens(12);
  for (int& t : tokens) t = rng.uniform_int(cfg.vocab);
  const RoutingTrace trace = model_forward(m, tokens).trace;
  trace.validate();
  for (int l = 0; l < trace.layers; ++l) {
    for (int t = 0; t < trace.tokens; ++t) {
      const Vec p = trace.prob_vector(l, t);
      CHECK(std::abs(p.sum() - 1.0) < 1e-6);
      CHECK(trace.request_vector(l, t).sum() == doctest::Approx(cfg.top_k));
      CHECK(trace.request_vector(l, t) == top_k_select(p, cfg.top_k));
    }
  }
}

TEST_CASE("nll_loss: perfect, uniform, and scalar-oracle cases") {
  Mat sure = Mat::Zero(1, 4);
  sure(0, 2) = 1000.0;
  CHECK(nll_loss(sure, {2}) == doctest::Approx(0.0).epsilon(1e-12));

  const int v = 7;
  Mat uniform = Mat::Zero(3, v);
  CHECK(nll_loss(uniform, {0, 3, 6}) == doctest::Approx(std::log(double(v))).epsilon(1e-12));

  SeedStream rng(41);
  Mat logits = testutil::random_matrix(rng, 2, 5);
  const std::vector<int> targets{1, 4};
  double expect = 0.0;
  for (int t = 0; t < 2; ++t) {
    double denom = 0.0;
    for (int j = 0; j < 5; ++j) denom += std::exp(logits(t, j));
    expect += -std::log(std::exp(logits(t, targets[t])) / denom);
  }
  expect /= 2.0;
  CHECK(nll_loss(logits, targets) == doctest::Approx(expect).epsilon(1e-10));

  CHECK_THROWS_AS(nll_loss(logits, {1, 5}), std::invalid_argument);
  CHECK(nll_loss(logits, targets) >= 0.0);
}
