// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "vtexit/attn_stats.hpp"

using namespace vtexit;

namespace {

LayerTrace uniform_trace(std::size_t n, std::size_t nv) {
  LayerTrace lt;
  lt.num_visual = nv;
  lt.attention = Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) lt.attention(i, j) = 1.0 / static_cast<double>(i + 1);
  return lt;
}

LayerTrace random_trace(SeededRng& rng, std::size_t n, std::size_t nv) {
  LayerTrace lt;
  lt.num_visual = nv;
  lt.attention = Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j <= i; ++j) s += (lt.attention(i, j) = rng.uniform() * rng.uniform());
    for (std::size_t j = 0; j <= i; ++j) lt.attention(i, j) /= s;
  }
  return lt;
}

}  // namespace

TEST_CASE("uniform attention: cross mean of query i is 1/(i+1)") {
  // Single text query at the end of a length-n prefix.
  for (std::size_t n : {2, 5, 9}) {
    auto lt = uniform_trace(n, n - 1);
    const auto s = layer_block_stats(lt);
    REQUIRE(s.cross_mean.has_value());
    CHECK(*s.cross_mean == doctest::Approx(1.0 / static_cast<double>(n)).epsilon(1e-14));
    CHECK(*s.cross_var == doctest::Approx(0.0));
  }
}

TEST_CASE("hand-built 4x4 attention, 2 visual and 2 text tokens") {
  LayerTrace lt;
  lt.num_visual = 2;
  lt.attention = Matrix(4, 4, {1.0, 0, 0, 0,
                               0.25, 0.75, 0, 0,
                               0.5, 0.25, 0.25, 0,
                               0.125, 0.125, 0.25, 0.5});
  const auto s = layer_block_stats(lt);
  // visual self cells: 1, .25, .75
  CHECK(*s.vis_self_mean == doctest::Approx(2.0 / 3.0));
  CHECK(*s.vis_self_var == doctest::Approx((1.0 + 0.0625 + 0.5625) / 3.0 - 4.0 / 9.0));
  // cross cells: .5, .25, .125, .125
  CHECK(*s.cross_mean == doctest::Approx(0.25));
  CHECK(*s.cross_var == doctest::Approx((0.25 + 0.0625 + 0.015625 + 0.015625) / 4.0 - 0.0625));
  // text self cells: .25, .25, .5
  CHECK(s.text_self_mean == doctest::Approx(1.0 / 3.0));
  CHECK(s.text_self_var == doctest::Approx((0.0625 + 0.0625 + 0.25) / 3.0 - 1.0 / 9.0));

  const auto e = layer_entropy(lt);
  // query 2: cross (2/3, 1/3), text (1); query 3: cross (1/2, 1/2), text (1/3, 2/3)
  const double h_23 = -(2.0 / 3.0) * std::log2(2.0 / 3.0) - (1.0 / 3.0) * std::log2(1.0 / 3.0);
  CHECK(*e.cross_entropy_bits == doctest::Approx((h_23 + 1.0) / 2.0).epsilon(1e-12));
  CHECK(e.text_self_entropy_bits == doctest::Approx((0.0 + h_23) / 2.0).epsilon(1e-12));
}

TEST_CASE("model traces: each text query's cross plus text-self mass is one") {
  SeededRng rng(3);
  ModelConfig c;
  c.num_layers = 3;
  c.hidden_dim = 16;
  c.num_heads = 2;
  c.ffn_dim = 32;
  c.vocab_size = 10;
  c.num_visual = 6;
  c.max_text = 8;
  const auto w = ModelWeights::init_random(c, rng);
  const auto r = prefill(w, {rng.normal_matrix(6, 16, 1.0), {0, 1, 2, 3}});
  const auto stats = block_stats(r.trace, 6);
  REQUIRE(stats.size() == 3);
  for (const auto& lt : r.trace.layers) {
    for (std::size_t i = 6; i < lt.attention.rows(); ++i) {
      double cross = 0, text = 0;
      for (std::size_t j = 0; j <= i; ++j) (j < 6 ? cross : text) += lt.attention(i, j);
      CHECK(std::abs(cross + text - 1.0) < 1e-6);
    }
  }
  for (const auto& s : stats) {
    CHECK(*s.cross_mean >= 0.0);
    CHECK(*s.cross_mean <= 1.0);
    CHECK(*s.cross_var >= 0.0);
  }
  CHECK_THROWS_AS(block_stats(r.trace, 5), InvalidInput);
}

TEST_CASE("entropy: one-hot, uniform and direct formula") {
  std::vector<double> one_hot{0, 0, 1, 0};
  CHECK(renormalized_entropy_bits(one_hot) == 0.0);
  for (std::size_t k : {1, 2, 7, 16}) {
    std::vector<double> u(k, 0.3);
    CHECK(renormalized_entropy_bits(u) == doctest::Approx(std::log2(static_cast<double>(k))).epsilon(1e-12));
  }
  std::vector<double> tiny{1e-14, 1e-14};
  CHECK(renormalized_entropy_bits(tiny) == 0.0);

  SeededRng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const auto lt = random_trace(rng, 9, 4);
    const auto e = layer_entropy(lt);
    long double cross = 0, text = 0;
    for (std::size_t i = 4; i < 9; ++i) {
      long double mc = 0, mt = 0;
      for (std::size_t j = 0; j <= i; ++j) (j < 4 ? mc : mt) += lt.attention(i, j);
      for (std::size_t j = 0; j <= i; ++j) {
        const long double p = lt.attention(i, j) / (j < 4 ? mc : mt);
        if (p > 0) (j < 4 ? cross : text) -= p * std::log2(p);
      }
    }
    CHECK(std::abs(*e.cross_entropy_bits - static_cast<double>(cross / 5)) < 1e-9);
    CHECK(std::abs(e.text_self_entropy_bits - static_cast<double>(text / 5)) < 1e-9);
    // text-self entropy of query i is at most log2 of its attendable text keys
    CHECK(e.text_self_entropy_bits <= std::log2(5.0) + 1e-12);
  }
}

TEST_CASE("entropy is invariant to permuting keys within a block") {
  SeededRng rng(10);
  std::vector<double> w(8);
  for (double& x : w) x = rng.uniform();
  const double h = renormalized_entropy_bits(w);
  std::reverse(w.begin(), w.end());
  CHECK(renormalized_entropy_bits(w) == doctest::Approx(h).epsilon(1e-14));
}

TEST_CASE("no visual tokens: cross statistics are absent") {
  const auto lt = uniform_trace(4, 0);
  const auto s = layer_block_stats(lt);
  CHECK_FALSE(s.cross_mean.has_value());
  CHECK_FALSE(s.vis_self_mean.has_value());
  CHECK_FALSE(layer_entropy(lt).cross_entropy_bits.has_value());
}

TEST_CASE("stage segmentation") {
  const std::vector<double> profile{0.9, 0.8, 0.1, 0.1, 0.3, 0.4};
  auto seg = segment_stages(profile, {0.5, 2.0});
  CHECK(seg.boundary_1 == 2);
  CHECK(seg.boundary_2 == 4);
  CHECK_FALSE(seg.degenerate);

  const std::vector<double> falling{1.0, 0.4, 0.2, 0.1, 0.05};
  seg = segment_stages(falling);
  CHECK(seg.degenerate);
  CHECK(seg.boundary_2 == 4);
  CHECK(seg.boundary_1 < seg.boundary_2);

  const std::vector<double> flat(6, 0.3);
  seg = segment_stages(flat);
  CHECK(seg.degenerate);
  CHECK(seg.boundary_1 == 1);
  CHECK(seg.boundary_2 == 5);

  const std::vector<double> short_profile{1, 0, 1};
  CHECK_THROWS_AS(segment_stages(short_profile), InvalidInput);

  SeededRng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> p(4 + trial % 6);
    for (double& x : p) x = rng.uniform();
    const auto s = segment_stages(p);
    CHECK(s.boundary_1 > 0);
    CHECK(s.boundary_1 < s.boundary_2);
    CHECK(s.boundary_2 < p.size());
  }
}
