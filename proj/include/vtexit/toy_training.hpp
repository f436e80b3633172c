// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

// Next-token training of the desk-scale transformer on the synthetic tasks.
// The transformer is trained once and then frozen; gates attach to it.

#pragma once

#include <functional>
#include <map>
#include <optional>

#include "vtexit/model.hpp"
#include "vtexit/synth.hpp"

namespace vtexit {

struct ToyTrainConfig {
  std::size_t max_steps = 3000;
  std::size_t batch_size = 16;
  double lr = 2e-3;
  std::size_t warmup_steps = 100;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  std::size_t eval_every = 250;
  std::size_t eval_samples = 400;
  double target_accuracy = 0.95;
  double failure_accuracy = 0.80;
  /// Probability that a training example is run with a random visual-token
  /// exit, so the model learns to finish cross-modal routing early.
  double exit_augment_prob = 0.5;
  std::size_t exit_augment_min_layer = 3;
  /// Keeps the answer NLL away from zero. The weak-label rule compares NLLs
  /// by ratio, which is meaningless on a saturated model.
  double label_smoothing = 0.1;  // augmented exits are drawn from [min, L-2]
  std::uint64_t seed = 1234;
};

struct ToyTrainResult {
  ModelWeights weights;
  std::size_t steps = 0;
  std::map<TaskKind, double> val_accuracy;
  bool reached_target = false;
  bool failed = false;  // budget exhausted below failure_accuracy
};

using TrainLogFn = std::function<void(std::size_t step, double loss, const std::map<TaskKind, double>* val)>;

ToyTrainResult train_toy_model(const ModelConfig& config, const SynthDataset& data, const ToyTrainConfig& train,
                               const TrainLogFn& log = {});

/// Cross-entropy of `target` at the final position, with optional masked
/// visual exit and label smoothing. Accumulates parameter gradients into
/// `grad` (same shapes as `weights`) when non-null.
double loss_and_grad(const ModelWeights& weights, const ModelInputs& inputs, std::int32_t target,
                     std::optional<std::size_t> exit_layer, ModelWeights* grad, double label_smoothing = 0.0);

/// Zero-filled gradient container shaped like `weights`.
ModelWeights zeros_like(const ModelWeights& weights);

/// Every trainable tensor of the model, in a fixed order.
std::vector<std::span<double>> parameter_views(ModelWeights& weights);

/// Greedy accuracy (no exit) over a task list.
double greedy_accuracy(const ModelWeights& weights, const VisualTable& table, const std::vector<SynthTask>& tasks);

}  // namespace vtexit
