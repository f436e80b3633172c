// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>

#include "vtexit/experiments.hpp"

using namespace vtexit;

namespace {

struct Fixture {
  SynthDataset data;
  ModelWeights weights;
  VisualTable table;

  Fixture() : data(make_data()), weights(make_model(data)), table(data.spec) {}

  static SynthDataset make_data() {
    SynthSpec s;
    s.hidden_dim = 16;
    s.num_train = 30;
    s.num_val = 5;
    s.num_test = 40;
    return generate_dataset(s, 17);
  }
  static ModelWeights make_model(const SynthDataset& d) {
    auto c = default_model_config(d.spec);
    c.num_layers = 4;
    c.num_heads = 2;
    c.ffn_dim = 32;
    SeededRng rng(5);
    return ModelWeights::init_random(c, rng);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

GateWeights silent_gates(const ModelConfig& c) {
  SeededRng rng(2);
  auto g = GateWeights::init_random(StatusSelector{}, c, default_gated_range(c), 8, false, rng);
  for (auto& lw : g.layers)
    for (double& v : lw.w2.flat()) v = 0.0;
  return g;
}

}  // namespace

TEST_CASE("baseline evaluation matches direct generation") {
  const auto& f = fixture();
  const auto s = evaluate_baseline(f.weights, f.table, f.data.test);
  std::size_t hits = 0;
  for (const auto& t : f.data.test) hits += generate(f.weights, task_inputs(f.table, t), {}).tokens[0] == t.answer;
  CHECK(s.all.correct == hits);
  CHECK(s.all.count == f.data.test.size());
  CHECK(s.all.mean_exit_layer == 4.0);
  CHECK(s.all.exit_histogram.at("none") == f.data.test.size());
  CHECK(s.all.flops.reduction_pct == 0.0);
  std::size_t per_task = 0;
  for (const auto& [kind, g] : s.per_task) per_task += g.count;
  CHECK(per_task == s.all.count);
  CHECK(s.records.size() == s.all.count);
}

TEST_CASE("forced policy: histogram and mean exit layer") {
  const auto& f = fixture();
  const auto s = evaluate_policy(f.weights, f.table, f.data.test, ForcedGatePolicy(1));
  CHECK(s.all.mean_exit_layer == 1.0);
  CHECK(s.all.exit_histogram.size() == 1);
  CHECK(s.all.exit_histogram.at("1") == f.data.test.size());
  const auto direct = total_flops(f.weights.config, 1, 4);
  CHECK(s.all.flops.reduction_pct == doctest::Approx(direct.reduction_pct));
}

TEST_CASE("manual sweep agrees with manual_exit and ends at the baseline") {
  const auto& f = fixture();
  const auto L = f.weights.config.num_layers;
  const auto pts = manual_sweep(f.weights, f.table, f.data.test, {0, 1, 2, 3, L});
  REQUIRE(pts.size() == 5);
  CHECK(pts.back().accuracy == evaluate_baseline(f.weights, f.table, f.data.test).all.accuracy);
  for (std::size_t l : {std::size_t{0}, std::size_t{2}}) {
    std::size_t hits = 0;
    for (const auto& t : f.data.test)
      hits += manual_exit(f.weights, task_inputs(f.table, t), l).generation.tokens[0] == t.answer;
    CHECK(pts[l].accuracy == doctest::Approx(static_cast<double>(hits) / f.data.test.size()));
  }
  for (std::size_t i = 1; i < pts.size(); ++i) CHECK(pts[i].flops >= pts[i - 1].flops);
  CHECK(pts[3].flops == pts[4].flops);
  CHECK_THROWS_AS(manual_sweep(f.weights, f.table, f.data.test, {L + 1}), InvalidInput);
}

TEST_CASE("summary JSON carries the report fields") {
  const auto& f = fixture();
  const auto j = to_json(evaluate_baseline(f.weights, f.table, f.data.test));
  for (const char* key : {"count", "accuracy", "mean_exit_layer", "exit_histogram", "flops", "per_task", "num_layers"})
    CHECK(j.contains(key));
  CHECK(j.at("per_task").contains("lookup"));
  CHECK(j.at("per_task").contains("twohop"));
}

TEST_CASE("labels survive a CSV round trip and features are rebuilt identically") {
  const auto& f = fixture();
  const auto range = default_gated_range(f.weights.config);
  const std::vector<SynthTask> tasks(f.data.train.begin(), f.data.train.begin() + 10);
  const auto samples = label_tasks(f.weights, f.table, tasks, StatusSelector{}, range, 1.03);
  REQUIRE(samples.size() == 10);
  for (const auto& s : samples) {
    CHECK(s.labels.size() == range.size());
    CHECK(s.features.size() == range.size());
  }
  const auto path = std::filesystem::temp_directory_path() / "vtexit_experiments_labels.csv";
  write_labels_csv(path, flatten_labels(samples), 1.03);
  const auto back = attach_features(f.weights, f.table, tasks, read_labels_csv(path), StatusSelector{}, range);
  REQUIRE(back.size() == samples.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].sample_id == samples[i].sample_id);
    CHECK(back[i].features == samples[i].features);
    for (std::size_t k = 0; k < range.size(); ++k) {
      CHECK(back[i].labels[k].y == samples[i].labels[k].y);
      CHECK(back[i].labels[k].layer == samples[i].labels[k].layer);
    }
  }
  auto bad = flatten_labels(samples);
  bad.front().sample_id = 999999;
  CHECK_THROWS_AS(attach_features(f.weights, f.table, tasks, bad, StatusSelector{}, range), InvalidInput);
}

TEST_CASE("compare table: silent gates and r = 1 pruning match the baseline") {
  const auto& f = fixture();
  const auto rows = compare_methods(f.weights, silent_gates(f.weights.config), f.table, f.data.test, {2, 1.0});
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].method == "baseline");
  CHECK(rows[1].method == "dyvte");
  CHECK(rows[2].method == "attn_rank_prune");
  CHECK(rows[3].method == "dyvte+attn_rank_prune");
  for (const auto& r : rows) {
    CHECK(r.accuracy == rows[0].accuracy);
    CHECK(r.reduction_pct == doctest::Approx(0.0));
    CHECK(r.mean_exit_layer == 4.0);
  }
  const auto halved = compare_methods(f.weights, silent_gates(f.weights.config), f.table, f.data.test, {1, 0.5});
  CHECK(halved[2].reduction_pct > 0.0);
  CHECK(halved[2].tflops < halved[0].tflops);
}

TEST_CASE("dataset stats have one entry per layer") {
  const auto& f = fixture();
  const std::vector<SynthTask> tasks(f.data.test.begin(), f.data.test.begin() + 5);
  const auto s = collect_stats(f.weights, f.table, tasks, 1);
  CHECK(s.stats.size() == 4);
  CHECK(s.entropy.size() == 4);
  REQUIRE(s.entropy_exited.has_value());
  CHECK(s.entropy_exited->size() == 4);
  CHECK_FALSE(collect_stats(f.weights, f.table, tasks).entropy_exited.has_value());
  CHECK_THROWS_AS(collect_stats(f.weights, f.table, {}), InvalidInput);
}
