// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "vtexit/gate_training.hpp"
#include "vtexit/synth.hpp"

using namespace vtexit;

namespace {

ModelConfig tiny(std::size_t layers = 4) {
  ModelConfig c;
  c.num_layers = layers;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.ffn_dim = 16;
  c.vocab_size = 10;
  c.num_visual = 5;
  c.max_text = 8;
  return c;
}

Generation one_step(std::vector<double> logits, std::int32_t token) {
  Generation g;
  g.step_logits = {std::move(logits)};
  g.tokens = {token};
  return g;
}

// Logit gap z with -log sigmoid(z) = rho, for a two-word vocabulary.
double gap_for(double rho) { return -std::log(std::exp(rho) - 1.0); }

}  // namespace

TEST_CASE("answer uncertainty") {
  CHECK(answer_uncertainty({{0.0, -1e4}}, std::vector<std::int32_t>{0}) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(answer_uncertainty({{1.5, 1.5, 1.5, 1.5}}, std::vector<std::int32_t>{2}) == doctest::Approx(std::log(4.0)));
  SeededRng rng(1);
  std::vector<std::vector<double>> logits(3, std::vector<double>(6));
  for (auto& row : logits)
    for (double& x : row) x = rng.normal();
  const std::vector<std::int32_t> toks{1, 4, 0};
  double ref = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    double z = 0;
    for (double x : logits[i]) z += std::exp(x);
    ref -= std::log(std::exp(logits[i][static_cast<std::size_t>(toks[i])]) / z);
  }
  CHECK(std::abs(answer_uncertainty(logits, toks) - ref / 3) < 1e-12);
  CHECK_THROWS_AS(answer_uncertainty(logits, std::vector<std::int32_t>{}), InvalidInput);
}

TEST_CASE("weak label rule") {
  const double rho = 0.2;
  const auto base = one_step({gap_for(rho), 0.0}, 0);
  SUBCASE("answer flip gives y = 0") {
    const auto l = make_label(1, 2, base, one_step({0.0, 3.0}, 1), 1.03);
    CHECK_FALSE(l.answer_match);
    CHECK(l.y == 0);
  }
  SUBCASE("same answer, uncertainty up 5% is over the 1.03 threshold") {
    const auto l = make_label(1, 2, base, one_step({gap_for(1.05 * rho), 0.0}, 0), 1.03);
    CHECK(l.answer_match);
    CHECK(l.rho_exit == doctest::Approx(1.05 * rho));
    CHECK(l.y == 0);
    CHECK(make_label(1, 2, base, one_step({gap_for(1.05 * rho), 0.0}, 0), 1.06).y == 1);
  }
  SUBCASE("same answer, uncertainty up 2% passes") {
    CHECK(make_label(1, 2, base, one_step({gap_for(1.02 * rho), 0.0}, 0), 1.03).y == 1);
  }
  SUBCASE("rho = 0 edge: identical runs give y = 0") {
    const auto sure = one_step({0.0, -1e6}, 0);
    CHECK(make_label(1, 2, sure, sure, 1.03).y == 0);
  }
}

TEST_CASE("generate_label on a real model") {
  const auto c = tiny();
  SeededRng rng(3);
  const auto w = ModelWeights::init_random(c, rng);
  ModelInputs in{rng.normal_matrix(c.num_visual, c.hidden_dim, 1.0), {1, 2, 3}};
  const auto noop = generate_label(w, in, 7, c.num_layers, 1.03);
  CHECK(noop.answer_match);
  CHECK(noop.rho_exit == noop.rho_base);
  CHECK(noop.y == (noop.rho_base > 0 ? 1 : 0));
  CHECK_THROWS_AS(generate_label(w, in, 7, c.num_layers + 1, 1.03), InvalidInput);

  // Find an input whose greedy answer flips under an exit at layer 0.
  bool found = false;
  for (int trial = 0; trial < 200 && !found; ++trial) {
    ModelInputs probe{rng.normal_matrix(c.num_visual, c.hidden_dim, 3.0), {1, 2}};
    const auto lab = generate_label(w, probe, 1, 0, 1.03);
    if (!lab.answer_match) {
      CHECK(lab.y == 0);
      found = true;
    }
  }
  CHECK(found);
}

TEST_CASE("label_sample agrees with generate_label at every gated layer") {
  const auto c = tiny(5);
  SeededRng rng(4);
  const auto w = ModelWeights::init_random(c, rng);
  ModelInputs in{rng.normal_matrix(c.num_visual, c.hidden_dim, 1.0), {1, 2, 3}};
  GenerateOptions opt;
  opt.max_new_tokens = 2;
  const auto s = label_sample(w, in, 9, StatusSelector{}, default_gated_range(c), 1.03, opt);
  REQUIRE(s.labels.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto ref = generate_label(w, in, 9, 1 + i, 1.03, opt);
    CHECK(s.labels[i].layer == 1 + i);
    CHECK(s.labels[i].y == ref.y);
    CHECK(s.labels[i].rho_exit == ref.rho_exit);
    CHECK(s.labels[i].rho_base == ref.rho_base);
    CHECK(s.features[i].size() == 16);
  }
}

TEST_CASE("forced-mask construction: labels are 1 from the onset layer on") {
  const auto c = tiny(6);
  for (std::size_t onset = 0; onset < c.num_layers; ++onset) {
    const auto w = forced_mask_model(c, onset, 40 + onset);
    SeededRng rng(onset);
    ModelInputs in{rng.normal_matrix(c.num_visual, c.hidden_dim, 1.0), {1, 2, 3}};
    for (std::size_t l = onset; l < c.num_layers; ++l) {
      const auto lab = generate_label(w, in, 0, l, 1.03);
      CHECK(lab.answer_match);
      CHECK(std::abs(lab.rho_exit - lab.rho_base) < 1e-9);
      CHECK(lab.y == 1);
    }
  }
}

TEST_CASE("exit layer sampling") {
  SeededRng rng(5);
  for (int i = 0; i < 100; ++i) CHECK(sample_exit_layer(rng, {3, 3}) == 3);
  CHECK_THROWS_AS(sample_exit_layer(rng, {4, 3}), InvalidInput);

  const int draws = 100000;
  std::vector<int> counts(9, 0);
  for (int i = 0; i < draws; ++i) ++counts[sample_exit_layer(rng, {1, 8})];
  const double expect = draws / 8.0, sigma = std::sqrt(draws * (1.0 / 8) * (7.0 / 8));
  double chi2 = 0;
  for (std::size_t l = 1; l <= 8; ++l) {
    CHECK(std::abs(counts[l] - expect) < 3 * sigma);
    chi2 += (counts[l] - expect) * (counts[l] - expect) / expect;
  }
  CHECK(counts[0] == 0);
  CHECK(chi2 < 24.3);  // 7 dof, p = 0.001

  SeededRng a(6), b(6);
  for (int i = 0; i < 50; ++i) CHECK(sample_exit_layer(a, {1, 8}) == sample_exit_layer(b, {1, 8}));
}

TEST_CASE("gate loss") {
  CHECK(gate_loss({0.5, 0.5}, 0) == doctest::Approx(std::log(2.0)));
  CHECK(gate_loss({0.5, 0.5}, 1) == doctest::Approx(std::log(2.0)));
  CHECK(gate_loss({1e-15, 1.0 - 1e-15}, 1) < 1e-12);
  CHECK(std::isfinite(gate_loss({1.0, 0.0}, 1)));
  CHECK(gate_loss({1.0, 0.0}, 1) == doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("gate gradients match central differences") {
  SeededRng rng(7);
  double worst = 0;
  for (int probe = 0; probe < 100; ++probe) {
    const bool bias = probe % 2 == 1;
    GateLayerWeights w{rng.normal_matrix(6, 5, 0.8), rng.normal_matrix(5, 2, 0.8), {}, {}};
    if (bias) {
      w.b1.resize(5);
      w.b2.resize(2);
      for (double& x : w.b1) x = 0.3 * rng.normal();
      for (double& x : w.b2) x = 0.3 * rng.normal();
    }
    std::vector<double> f(6);
    for (double& x : f) x = rng.normal();
    const int y = probe % 3 == 0 ? 1 : 0;
    GateGrad g;
    gate_loss_and_grad(w, f, y, &g);
    const double h = 1e-6;
    auto check = [&](std::span<double> params, std::span<const double> grads) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        const double keep = params[i];
        params[i] = keep + h;
        const double up = gate_loss_and_grad(w, f, y, nullptr);
        params[i] = keep - h;
        const double down = gate_loss_and_grad(w, f, y, nullptr);
        params[i] = keep;
        const double fd = (up - down) / (2 * h);
        worst = std::max(worst, std::abs(fd - grads[i]) / std::max(1e-3, std::abs(fd) + std::abs(grads[i])));
      }
    };
    check(w.w1.flat(), g.dw1.flat());
    check(w.w2.flat(), g.dw2.flat());
    if (bias) {
      check(w.b1, g.db1);
      check(w.b2, g.db2);
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("gate training") {
  const auto c = tiny();
  const LayerRange range{1, 1};
  SeededRng rng(8);
  std::vector<double> normal(16);
  for (double& x : normal) x = rng.normal();
  auto make = [&](std::size_t n) {
    std::vector<LabeledSample> out;
    for (std::size_t i = 0; i < n; ++i) {
      LabeledSample s;
      s.sample_id = i;
      std::vector<double> f(16);
      double dot = 0;
      for (std::size_t j = 0; j < 16; ++j) dot += normal[j] * (f[j] = rng.normal());
      WeakLabel l;
      l.sample_id = i;
      l.layer = 1;
      l.y = dot > 0 ? 1 : 0;
      s.features.push_back(f);
      s.labels.push_back(l);
      out.push_back(s);
    }
    return out;
  };
  const auto train = make(2000), held_out = make(500);

  SUBCASE("linearly separable labels are learned") {
    GateTrainConfig tc;
    tc.lr = 0.05;
    tc.epochs = 5;
    const auto g = train_gates(train, StatusSelector{}, c, range, tc);
    CHECK(gate_accuracy(g, held_out) >= 0.95);
  }
  SUBCASE("zero learning rate leaves the initialization untouched") {
    GateTrainConfig tc;
    tc.lr = 0.0;
    const auto g = train_gates(train, StatusSelector{}, c, range, tc);
    SeededRng init(tc.seed);
    CHECK(g == GateWeights::init_random(StatusSelector{}, c, range, tc.gate_hidden, false, init));
  }
  SUBCASE("deterministic for a seed, other layers untouched") {
    GateTrainConfig tc;
    tc.sample_fraction = 0.5;
    tc.momentum = 0.9;
    const auto a = train_gates(train, StatusSelector{}, c, range, tc);
    const auto b = train_gates(train, StatusSelector{}, c, range, tc);
    CHECK(a == b);
    std::size_t steps = 0;
    train_gates(train, StatusSelector{}, c, range, tc, [&](const GateStepLog& log) {
      CHECK(log.layer == 1);
      ++steps;
    });
    CHECK(steps == 1000);
  }
  SUBCASE("contract checks") {
    GateTrainConfig tc;
    CHECK_THROWS_AS(train_gates({}, StatusSelector{}, c, range, tc), InvalidInput);
    CHECK_THROWS_AS(train_gates(train, StatusSelector{}, c, {1, 2}, tc), InvalidInput);
    tc.lr = -1e-3;
    CHECK_THROWS_AS(train_gates(train, StatusSelector{}, c, range, tc), InvalidInput);
  }
}

TEST_CASE("labels CSV round trip") {
  std::vector<WeakLabel> labels{{3, 1, 1, 0.25, 0.125, true}, {3, 2, 0, 1.0 / 3.0, 2.0 / 7.0, false}};
  const auto path = std::filesystem::temp_directory_path() / "vtexit_labels.csv";
  write_labels_csv(path, labels, 1.03);
  const auto back = read_labels_csv(path);
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].sample_id == labels[i].sample_id);
    CHECK(back[i].layer == labels[i].layer);
    CHECK(back[i].y == labels[i].y);
    CHECK(back[i].rho_base == labels[i].rho_base);
    CHECK(back[i].rho_exit == labels[i].rho_exit);
  }
}
