// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

// Fixed-layer exit, attention-rank pruning of visual tokens, and pruning
// combined with learned gates.

#pragma once

#include <filesystem>
#include <vector>

#include "vtexit/gate.hpp"

namespace vtexit {

/// Exit after layer `layer` (L means never). Same code path as a gate
/// forced to fire there.
DyvteResult manual_exit(const ModelWeights& weights, const ModelInputs& inputs, std::size_t layer,
                        const GenerateOptions& options = {});

struct PruneConfig {
  std::size_t layer = 2;     // K: prune after this layer
  double keep_ratio = 0.5;   // r in [0, 1]
};

/// Positions within the live visual span to keep: the top ceil(r * n_v) by
/// mean attention received from queries at later positions. Ties go to the
/// lower index. Returned ascending.
std::vector<std::size_t> attn_rank_keep(const LayerTrace& trace, double keep_ratio);

/// Layer hook applying the pruning rule at layer K.
LayerHook prune_hook(const PruneConfig& config);

DyvteResult attn_rank_prune(const ModelWeights& weights, const ModelInputs& inputs, const PruneConfig& config,
                            const GenerateOptions& options = {});

/// Pruning at layer K first; the policy is still evaluated at every gated
/// layer and may exit fully.
DyvteResult combined(const ModelWeights& weights, const ExitPolicy& policy, const ModelInputs& inputs,
                     const PruneConfig& config, const GenerateOptions& options = {});

struct SweepPoint {
  double layer_or_ratio = 0.0;
  double accuracy = 0.0;
  double flops = 0.0;  // mean prefill FLOPs per sample
};

/// sweep.csv: layer_or_ratio,accuracy,flops
void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepPoint>& points);

}  // namespace vtexit
