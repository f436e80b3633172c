// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "vtexit/baselines.hpp"
#include "vtexit/synth.hpp"

using namespace vtexit;

namespace {

ModelConfig tiny(std::size_t layers = 5, std::size_t nv = 6) {
  ModelConfig c;
  c.num_layers = layers;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.ffn_dim = 16;
  c.vocab_size = 10;
  c.num_visual = nv;
  c.max_text = 8;
  return c;
}

ModelInputs inputs_for(const ModelConfig& c, SeededRng& rng) {
  return {rng.normal_matrix(c.num_visual, c.hidden_dim, 1.0), {1, 4, 2}};
}

GateWeights constant_gates(const ModelConfig& c, bool fire) {
  SeededRng rng(1);
  auto g = GateWeights::init_random(StatusSelector{}, c, default_gated_range(c), 4, true, rng);
  for (auto& lw : g.layers) {
    for (double& v : lw.w1.flat()) v = 0.0;
    for (double& v : lw.w2.flat()) v = 0.0;
    lw.b2 = fire ? std::vector<double>{0.0, 1.0} : std::vector<double>{1.0, 0.0};
  }
  return g;
}

// Fires from `from` onwards.
class FireFrom : public ExitPolicy {
 public:
  explicit FireFrom(std::size_t from) : from_(from) {}
  ExitDecision decide(const Prefill& s) const override {
    ExitDecision d;
    d.layer = s.layers_done() - 1;
    d.fired = d.layer >= from_;
    d.p = d.fired ? std::array<double, 2>{0.0, 1.0} : std::array<double, 2>{1.0, 0.0};
    return d;
  }
  LayerRange range(const ModelConfig& c) const override { return default_gated_range(c); }

 private:
  std::size_t from_;
};

// Two-layer lookup model. Visual rows are zero except one marked row that
// holds the answer on dims 0..3 and a marker on dim 4. Both layers point
// every text query at the marked row; only layer 1 copies its value into the
// residual stream. Without visual keys the text prior (token 2) wins.
ModelWeights lookup_model() {
  ModelConfig c = tiny(2, 4);
  c.vocab_size = 4;
  SeededRng rng(3);
  ModelWeights w = ModelWeights::init_random(c, rng);
  for (auto& lw : w.layers) {
    for (auto* m : {&lw.wq, &lw.wk, &lw.wv, &lw.wo, &lw.w_down})
      for (double& v : m->flat()) v = 0.0;
    lw.b_down.assign(c.hidden_dim, 0.0);
    for (std::size_t h = 0; h < c.num_heads; ++h) {
      lw.wk(4, h * c.head_dim()) = 1.0;
      lw.wq(5, h * c.head_dim()) = 50.0;
    }
  }
  for (double& v : w.position_embedding.flat()) v = 0.0;
  for (double& v : w.token_embedding.flat()) v = 0.0;
  for (double& v : w.lm_head.flat()) v = 0.0;
  for (std::size_t j = 0; j < 4; ++j) {
    w.layers[1].wv(j, j) = 1.0;
    w.layers[1].wo(j, j) = 1.0;
    w.lm_head(j, j) = 1.0;
  }
  for (std::size_t v = 0; v < c.vocab_size; ++v) w.token_embedding(v, 5) = 1.0;
  w.token_embedding(0, 2) = 0.1;
  w.validate();
  return w;
}

ModelInputs lookup_inputs(std::size_t marked, std::size_t answer) {
  Matrix vis(4, 8, 0.0);
  vis(marked, answer) = 5.0;
  vis(marked, 4) = 1.0;
  return {vis, {0}};
}

}  // namespace

TEST_CASE("manual exit at L is the baseline") {
  const auto c = tiny();
  SeededRng rng(1);
  const auto w = ModelWeights::init_random(c, rng);
  const auto in = inputs_for(c, rng);
  GenerateOptions opt;
  opt.max_new_tokens = 3;
  const auto r = manual_exit(w, in, c.num_layers, opt);
  const auto base = generate(w, in, opt);
  CHECK(r.generation.step_logits == base.step_logits);
  CHECK(r.flops.reduction_pct == 0.0);
  CHECK_THROWS_AS(manual_exit(w, in, c.num_layers + 1), InvalidInput);
}

TEST_CASE("manual sweep is flat from the forced-mask onset layer on") {
  const auto c = tiny(6);
  const std::size_t onset = 2;
  const auto w = forced_mask_model(c, onset, 5);
  SeededRng rng(2);
  std::vector<ModelInputs> set;
  for (int i = 0; i < 20; ++i) set.push_back(inputs_for(c, rng));
  for (const auto& in : set) {
    const auto base = generate(w, in, {}).tokens;
    for (std::size_t l = onset; l <= c.num_layers; ++l) CHECK(manual_exit(w, in, l).generation.tokens == base);
  }
}

TEST_CASE("exit at 0 on a visual-dependent task drops to the text prior") {
  const auto w = lookup_model();
  int base_hits = 0, exit_hits = 0, prior_hits = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const auto answer = static_cast<std::size_t>(trial % 4);
    const ModelInputs in = lookup_inputs(static_cast<std::size_t>(trial / 4) % 4, answer);
    base_hits += generate(w, in, {}).tokens[0] == static_cast<std::int32_t>(answer);
    exit_hits += manual_exit(w, in, 0).generation.tokens[0] == static_cast<std::int32_t>(answer);
    prior_hits += answer == 2;
  }
  CHECK(base_hits == 40);
  CHECK(exit_hits == prior_hits);
}

TEST_CASE("pruning with r = 1 is the baseline, r = 0 is an exit at K") {
  const auto c = tiny();
  SeededRng rng(4);
  const auto w = ModelWeights::init_random(c, rng);
  const auto in = inputs_for(c, rng);
  GenerateOptions opt;
  opt.max_new_tokens = 2;
  const auto base = generate(w, in, opt);
  CHECK(attn_rank_prune(w, in, {2, 1.0}, opt).generation.step_logits == base.step_logits);
  for (std::size_t k = 0; k < c.num_layers; ++k) {
    const auto pruned = attn_rank_prune(w, in, {k, 0.0}, opt);
    const auto exited = manual_exit(w, in, k, opt);
    CHECK(pruned.generation.step_logits == exited.generation.step_logits);
    CHECK(pruned.flops.total_with_exit == exited.flops.total_with_exit);
  }
  CHECK_THROWS_AS(attn_rank_prune(w, in, {2, 1.5}), InvalidInput);
  CHECK_THROWS_AS(attn_rank_prune(w, in, {c.num_layers, 0.5}), InvalidInput);
}

TEST_CASE("pruning keeps ceil(r n_v) tokens and costs less") {
  const auto c = tiny(5, 7);
  SeededRng rng(5);
  const auto w = ModelWeights::init_random(c, rng);
  const auto in = inputs_for(c, rng);
  const auto r = attn_rank_prune(w, in, {1, 0.5}, {});
  CHECK(r.generation.visual_after_prefill == 4);
  CHECK(r.generation.live_tokens_per_layer == std::vector<std::size_t>{10, 10, 7, 7, 7});
  CHECK(r.flops.total_with_exit < r.flops.total_baseline);
}

TEST_CASE("attention ranking: ties go to the lower index, planted token wins") {
  LayerTrace lt;
  lt.num_visual = 4;
  lt.attention = Matrix(6, 6, 0.0);
  // every later query spreads mass evenly over visual keys 0..3
  for (std::size_t i = 0; i < 6; ++i) {
    const std::size_t keys = std::min<std::size_t>(i + 1, 4);
    for (std::size_t j = 0; j < keys; ++j) lt.attention(i, j) = 0.5 / static_cast<double>(keys);
    lt.attention(i, i) += 0.5;
  }
  const auto tie = attn_rank_keep(lt, 0.5);
  CHECK(tie.size() == 2);
  // key 3 receives 0.5 (its own row is excluded) from rows 4 and 5 at 0.125 each
  CHECK(attn_rank_keep(lt, 0.25).size() == 1);

  LayerTrace plant;
  plant.num_visual = 5;
  plant.attention = Matrix(7, 7, 0.0);
  for (std::size_t i = 0; i < 7; ++i) {
    if (i > 3) {
      plant.attention(i, 3) = 0.9;
      plant.attention(i, i) = 0.1;
    } else {
      plant.attention(i, i) = 1.0;
    }
  }
  CHECK(attn_rank_keep(plant, 0.2) == std::vector<std::size_t>{3});
  CHECK(attn_rank_keep(plant, 1.0) == std::vector<std::size_t>{0, 1, 2, 3, 4});

  LayerTrace flat;
  flat.num_visual = 4;
  flat.attention = Matrix(6, 6, 0.0);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j <= i; ++j) flat.attention(i, j) = (j < 4 && i > j) ? 0.0 : (j == i ? 1.0 : 0.0);
  CHECK(attn_rank_keep(flat, 0.5) == std::vector<std::size_t>{0, 1});
}

TEST_CASE("planted answer token is kept at r = 1/n_v and the answer survives") {
  const auto w = lookup_model();
  for (std::size_t pos = 0; pos < 4; ++pos)
    for (std::size_t answer = 0; answer < 4; ++answer) {
      const auto in = lookup_inputs(pos, answer);
      Prefill p(w, in);
      p.run_layer();
      CHECK(attn_rank_keep(p.last_trace(), 0.25) == std::vector<std::size_t>{pos});
      const auto r = attn_rank_prune(w, in, {0, 0.25}, {});
      CHECK(r.generation.visual_after_prefill == 1);
      CHECK(r.generation.tokens[0] == static_cast<std::int32_t>(answer));
    }
}

TEST_CASE("combined mode") {
  const auto c = tiny(6);
  SeededRng rng(7);
  const auto w = ModelWeights::init_random(c, rng);
  GenerateOptions opt;
  opt.max_new_tokens = 2;
  const PruneConfig pc{2, 0.5};
  for (int trial = 0; trial < 5; ++trial) {
    const auto in = inputs_for(c, rng);
    SUBCASE("never-firing gates equal pruning alone") {
      const auto gates = constant_gates(c, false);
      const auto a = combined(w, LearnedGatePolicy(gates), in, pc, opt);
      const auto b = attn_rank_prune(w, in, pc, opt);
      CHECK(a.generation.step_logits == b.generation.step_logits);
      CHECK(a.flops.total_with_exit == b.flops.total_with_exit);
    }
    SUBCASE("gates firing before K make pruning a no-op") {
      const auto gates = constant_gates(c, true);
      const auto a = combined(w, LearnedGatePolicy(gates), in, pc, opt);
      const auto b = run_with_dyvte(w, LearnedGatePolicy(gates), in, opt);
      CHECK(a.generation.step_logits == b.generation.step_logits);
      CHECK(a.flops.total_with_exit == b.flops.total_with_exit);
    }
    SUBCASE("pruned then exited costs no more than either alone") {
      for (std::size_t from = 1; from < c.num_layers; ++from) {
        const auto both = combined(w, FireFrom(from), in, pc, opt);
        const auto alone = run_with_dyvte(w, FireFrom(from), in, opt);
        const auto prune = attn_rank_prune(w, in, pc, opt);
        CHECK(both.flops.total_with_exit <= alone.flops.total_with_exit);
        CHECK(both.flops.total_with_exit <= prune.flops.total_with_exit);
      }
    }
  }
}

TEST_CASE("sweep CSV") {
  const auto path = std::filesystem::temp_directory_path() / "vtexit_sweep.csv";
  write_sweep_csv(path, {{0, 0.5, 100}, {4, 0.75, 200}});
  std::ifstream in(path);
  std::string l1, l2, l3;
  std::getline(in, l1);
  std::getline(in, l2);
  std::getline(in, l3);
  CHECK(l2 == "layer_or_ratio,accuracy,flops");
  CHECK(l3 == "0,0.5,100");
}
