// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

// Dataset-level drivers shared by the C API, the CLI and the acceptance
// suite: evaluation with exit policies, manual sweeps, stats collection,
// labelling and the pruning comparison table.

#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <vector>

#include <json.hpp>

#include "vtexit/attn_stats.hpp"
#include "vtexit/baselines.hpp"
#include "vtexit/gate_training.hpp"
#include "vtexit/synth.hpp"

namespace vtexit {

using SampleRunner = std::function<DyvteResult(const ModelInputs&)>;

struct EvalRecord {
  std::uint64_t sample_id = 0;
  TaskKind kind = TaskKind::Lookup;
  bool correct = false;
  std::optional<std::size_t> exit_layer;
  FlopsReport flops;
};

struct EvalGroup {
  std::size_t count = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
  double mean_exit_layer = 0.0;  // samples that never exit count as L
  std::map<std::string, std::size_t> exit_histogram;  // layer index or "none"
  FlopsReport flops;                                   // summed over samples
};

struct EvalSummary {
  std::size_t num_layers = 0;
  EvalGroup all;
  std::map<TaskKind, EvalGroup> per_task;
  std::vector<EvalRecord> records;
};

EvalSummary evaluate(const ModelWeights& weights, const VisualTable& table, const std::vector<SynthTask>& tasks,
                     const SampleRunner& run);
EvalSummary evaluate_baseline(const ModelWeights& weights, const VisualTable& table,
                              const std::vector<SynthTask>& tasks);
EvalSummary evaluate_policy(const ModelWeights& weights, const VisualTable& table, const std::vector<SynthTask>& tasks,
                            const ExitPolicy& policy);
nlohmann::json to_json(const EvalSummary& summary);

/// Accuracy and mean prefill FLOPs of manual_exit at each layer.
std::vector<SweepPoint> manual_sweep(const ModelWeights& weights, const VisualTable& table,
                                     const std::vector<SynthTask>& tasks, const std::vector<std::size_t>& layers);

struct DatasetStats {
  std::vector<AttentionBlockStats> stats;
  StageSegmentation stages;
  std::vector<EntropyProfile> entropy;
  std::optional<std::vector<EntropyProfile>> entropy_exited;
};

/// Averages block statistics and entropies over tasks; with `exit_layer`,
/// also the entropies of the exited run.
DatasetStats collect_stats(const ModelWeights& weights, const VisualTable& table, const std::vector<SynthTask>& tasks,
                           std::optional<std::size_t> exit_layer = std::nullopt);

std::vector<LabeledSample> label_tasks(const ModelWeights& weights, const VisualTable& table,
                                       const std::vector<SynthTask>& tasks, const StatusSelector& selector,
                                       LayerRange range, double alpha);
std::vector<WeakLabel> flatten_labels(const std::vector<LabeledSample>& samples);

/// Rebuilds training samples from labels read back from CSV; features are
/// recomputed from the model.
std::vector<LabeledSample> attach_features(const ModelWeights& weights, const VisualTable& table,
                                           const std::vector<SynthTask>& tasks, const std::vector<WeakLabel>& labels,
                                           const StatusSelector& selector, LayerRange range);

struct CompareRow {
  std::string method;
  double accuracy = 0.0;
  double tflops = 0.0;         // summed prefill TFLOPs over the split
  double reduction_pct = 0.0;  // versus baseline
  double mean_exit_layer = 0.0;
};

/// Baseline, DyVTE, attention-rank pruning and the combination.
std::vector<CompareRow> compare_methods(const ModelWeights& weights, const GateWeights& gates, const VisualTable& table,
                                        const std::vector<SynthTask>& tasks, const PruneConfig& prune);
/// compare.csv: method,accuracy,tflops,reduction_pct,mean_exit_layer
void write_compare_csv(const std::filesystem::path& path, const std::vector<CompareRow>& rows);

}  // namespace vtexit
