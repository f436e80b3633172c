// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "vtexit/toy_training.hpp"

using namespace vtexit;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.num_layers = 3;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.ffn_dim = 16;
  c.vocab_size = 9;
  c.num_visual = 4;
  c.max_text = 5;
  return c;
}

// Central differences on every parameter, compared coordinate-wise.
void check_gradients(std::optional<std::size_t> exit_layer, std::uint64_t seed, double smoothing = 0.0) {
  const auto c = small_config();
  SeededRng rng(seed);
  ModelWeights w = ModelWeights::init_random(c, rng);
  for (auto& l : w.layers)
    for (auto& g : l.ln1_gain) g += 0.3 * rng.normal();
  ModelInputs in{rng.normal_matrix(c.num_visual, c.hidden_dim, 1.0), {0, 3, 5}};
  const std::int32_t target = 7;
  ModelWeights grad = zeros_like(w);
  loss_and_grad(w, in, target, exit_layer, &grad, smoothing);
  auto params = parameter_views(w);
  auto grads = parameter_views(grad);
  REQUIRE(params.size() == grads.size());
  const double h = 1e-6;
  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    for (std::size_t i = 0; i < params[pi].size(); i += 1 + i % 3) {
      const double keep = params[pi][i];
      params[pi][i] = keep + h;
      const double up = loss_and_grad(w, in, target, exit_layer, nullptr, smoothing);
      params[pi][i] = keep - h;
      const double down = loss_and_grad(w, in, target, exit_layer, nullptr, smoothing);
      params[pi][i] = keep;
      const double fd = (up - down) / (2 * h);
      const double err = std::abs(fd - grads[pi][i]) / std::max(1e-6, std::abs(fd) + std::abs(grads[pi][i]));
      worst = std::max(worst, err);
    }
  }
  CHECK(worst < 1e-4);
}

}  // namespace

TEST_CASE("backprop matches finite differences without exit") { check_gradients(std::nullopt, 1); }

TEST_CASE("backprop matches finite differences through an exit") { check_gradients(1, 2); }

TEST_CASE("backprop matches finite differences with label smoothing") { check_gradients(2, 3, 0.1); }

TEST_CASE("smoothed loss against the prefill log-probabilities") {
  const auto c = small_config();
  SeededRng rng(6);
  const auto w = ModelWeights::init_random(c, rng);
  ModelInputs in{rng.normal_matrix(c.num_visual, c.hidden_dim, 1.0), {0, 2}};
  const auto logits = prefill(w, in, std::nullopt).logits;
  double mx = logits[0], z = 0;
  for (double v : logits) mx = std::max(mx, v);
  for (double v : logits) z += std::exp(v - mx);
  const double eps = 0.2, V = static_cast<double>(logits.size());
  double want = 0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    const double q = (j == 4 ? 1 - eps : 0.0) + eps / V;
    want -= q * (logits[j] - mx - std::log(z));
  }
  CHECK(loss_and_grad(w, in, 4, std::nullopt, nullptr, eps) == doctest::Approx(want).epsilon(1e-12));
  CHECK_THROWS_AS(loss_and_grad(w, in, 4, std::nullopt, nullptr, 1.0), InvalidInput);
}

TEST_CASE("loss equals the cross-entropy of the prefill logits") {
  const auto c = small_config();
  SeededRng rng(4);
  const auto w = ModelWeights::init_random(c, rng);
  ModelInputs in{rng.normal_matrix(c.num_visual, c.hidden_dim, 1.0), {0, 2}};
  for (std::optional<std::size_t> e : {std::optional<std::size_t>{}, std::optional<std::size_t>{0}}) {
    const auto logits = prefill(w, in, e).logits;
    double mx = logits[0], z = 0;
    for (double v : logits) mx = std::max(mx, v);
    for (double v : logits) z += std::exp(v - mx);
    const double ce = -(logits[4] - mx - std::log(z));
    CHECK(loss_and_grad(w, in, 4, e, nullptr) == doctest::Approx(ce).epsilon(1e-12));
  }
}

TEST_CASE("zero training steps returns the seeded initialization") {
  SynthSpec spec;
  spec.hidden_dim = 16;
  spec.num_train = 20;
  spec.num_val = 10;
  spec.num_test = 10;
  const auto data = generate_dataset(spec, 3);
  auto cfg = default_model_config(spec);
  cfg.num_layers = 2;
  cfg.ffn_dim = 32;
  ToyTrainConfig tc;
  tc.max_steps = 0;
  tc.seed = 77;
  const auto r = train_toy_model(cfg, data, tc);
  SeededRng rng(77);
  CHECK(r.weights == ModelWeights::init_random(cfg, rng));
  CHECK(r.steps == 0);
}

TEST_CASE("toy training is deterministic for a seed") {
  SynthSpec spec;
  spec.hidden_dim = 16;
  spec.num_train = 40;
  spec.num_val = 10;
  spec.num_test = 10;
  const auto data = generate_dataset(spec, 3);
  auto cfg = default_model_config(spec);
  cfg.num_layers = 3;
  cfg.ffn_dim = 32;
  ToyTrainConfig tc;
  tc.max_steps = 5;
  tc.batch_size = 4;
  tc.eval_every = 0;
  const auto a = train_toy_model(cfg, data, tc);
  const auto b = train_toy_model(cfg, data, tc);
  CHECK(a.weights == b.weights);
  SeededRng rng(tc.seed);
  CHECK_FALSE(a.weights == ModelWeights::init_random(cfg, rng));
}

TEST_CASE("model config must fit the dataset") {
  SynthSpec spec;
  spec.hidden_dim = 16;
  spec.num_train = 4;
  spec.num_val = 2;
  spec.num_test = 2;
  const auto data = generate_dataset(spec, 1);
  auto cfg = default_model_config(spec);
  cfg.num_visual += 1;
  CHECK_THROWS_AS(train_toy_model(cfg, data, ToyTrainConfig{}), InvalidInput);
}
