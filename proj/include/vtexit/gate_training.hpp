// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

// Weak labels and gate training. A layer is labelled "exit" (y = 1) when
// removing the visual tokens after it keeps the greedy answer and the
// answer's mean negative log-likelihood stays under alpha times the
// baseline's.

#pragma once

#include <filesystem>
#include <functional>
#include <vector>

#include "vtexit/gate.hpp"

namespace vtexit {

/// Mean negative log-likelihood (nats) of `answer` under the per-step logits.
double answer_uncertainty(const std::vector<std::vector<double>>& step_logits, std::span<const std::int32_t> answer);

struct WeakLabel {
  std::uint64_t sample_id = 0;
  std::size_t layer = 0;
  int y = 0;
  double rho_base = 0.0;
  double rho_exit = 0.0;
  bool answer_match = false;
};

/// Labels one layer given the baseline and exited generations.
WeakLabel make_label(std::uint64_t sample_id, std::size_t layer, const Generation& base, const Generation& exited,
                     double alpha);

/// Runs the baseline and an exit after `layer` (L: no exit), then labels.
WeakLabel generate_label(const ModelWeights& weights, const ModelInputs& inputs, std::uint64_t sample_id,
                         std::size_t layer, double alpha, const GenerateOptions& options = {});

/// Features and labels of one sample at every gated layer. Features come
/// from the no-exit run, which is what a gate sees at inference.
struct LabeledSample {
  std::uint64_t sample_id = 0;
  std::vector<std::vector<double>> features;  // one per layer in range
  std::vector<WeakLabel> labels;              // one per layer in range
};

/// Shares the prefix of the baseline prefill across all exit layers.
LabeledSample label_sample(const ModelWeights& weights, const ModelInputs& inputs, std::uint64_t sample_id,
                           const StatusSelector& selector, LayerRange range, double alpha,
                           const GenerateOptions& options = {});

struct GateTrainConfig {
  double alpha = 1.03;
  double lr = 1e-3;
  double momentum = 0.0;
  std::size_t epochs = 1;
  double sample_fraction = 1.0;  // share of the labelled set used for training
  std::size_t gate_hidden = 64;
  bool use_bias = false;
  std::uint64_t seed = 0;
};

/// Uniform over the gated range.
std::size_t sample_exit_layer(SeededRng& rng, LayerRange range);

/// Binary cross-entropy with probabilities clamped to [1e-12, 1].
double gate_loss(const std::array<double, 2>& p, int y);

struct GateGrad {
  Matrix dw1, dw2;
  std::vector<double> db1, db2;
};

/// Loss and gradient for one (feature, label) pair. Clamping is ignored in
/// the gradient.
double gate_loss_and_grad(const GateLayerWeights& w, std::span<const double> feature, int y, GateGrad* grad);

struct GateStepLog {
  std::size_t step = 0;
  std::size_t layer = 0;
  int y = 0;
  double p1 = 0.0;
  double loss = 0.0;
};
using GateLogFn = std::function<void(const GateStepLog&)>;

/// SGD (optional heavy-ball momentum), one (sample, random layer) pair per
/// step.
GateWeights train_gates(const std::vector<LabeledSample>& data, const StatusSelector& selector,
                        const ModelConfig& config, LayerRange range, const GateTrainConfig& tc,
                        const GateLogFn& log = {});

/// Share of (sample, layer) pairs where the gate decision matches y.
double gate_accuracy(const GateWeights& gates, const std::vector<LabeledSample>& data);

/// labels.csv: sample_id,layer,y,rho_base,rho_exit
void write_labels_csv(const std::filesystem::path& path, const std::vector<WeakLabel>& labels, double alpha);
std::vector<WeakLabel> read_labels_csv(const std::filesystem::path& path);

}  // namespace vtexit
