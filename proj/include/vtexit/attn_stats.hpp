// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

// Block-wise statistics over heads-averaged attention traces. With the
// [visual | text] layout and a causal mask the matrix splits into three
// blocks: visual self (visual queries, visual keys), cross (text queries,
// visual keys) and text self (text queries, text keys). Visual queries never
// see text keys, so "cross" is text-to-visual only.

#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "vtexit/model.hpp"

namespace vtexit {

struct AttentionBlockStats {
  std::size_t layer = 0;
  std::optional<double> vis_self_mean, vis_self_var;
  std::optional<double> cross_mean, cross_var;
  double text_self_mean = 0.0, text_self_var = 0.0;
};

struct EntropyProfile {
  std::size_t layer = 0;
  std::optional<double> cross_entropy_bits;  // absent once no visual keys are live
  double text_self_entropy_bits = 0.0;
};

struct StageSegmentation {
  std::size_t boundary_1 = 1;  // last layer of early fusion
  std::size_t boundary_2 = 2;  // last layer of intra-modality modeling
  bool degenerate = false;
};

struct StageThresholds {
  double fall_fraction = 0.5;   // cross mean below this share of its running max ends stage 1
  double rebound_factor = 2.0;  // cross mean above this multiple of the stage-2 minimum ends stage 2
};

/// Statistics per layer over causal-valid cells. `num_visual` must match the
/// visual count of the first traced layer; later layers use their own
/// recorded count (exit and pruning shrink it).
std::vector<AttentionBlockStats> block_stats(const Trace& trace, std::size_t num_visual);
AttentionBlockStats layer_block_stats(const LayerTrace& layer);

/// Mean per-text-query entropy (bits) of the renormalized cross and text-self
/// sub-distributions. Queries whose sub-block mass is below 1e-12 contribute 0.
std::vector<EntropyProfile> entropy_profile(const Trace& trace, std::size_t num_visual);
EntropyProfile layer_entropy(const LayerTrace& layer);

/// Entropy in bits of `weights` renormalized to sum 1; 0 when the mass is
/// below 1e-12.
double renormalized_entropy_bits(std::span<const double> weights);

StageSegmentation segment_stages(std::span<const double> cross_means, const StageThresholds& thresholds = {});
StageSegmentation segment_stages(const std::vector<AttentionBlockStats>& stats, const StageThresholds& thresholds = {});

/// Averages per-sample statistics layer by layer (absent fields stay absent
/// only if absent in every sample).
std::vector<AttentionBlockStats> average_stats(const std::vector<std::vector<AttentionBlockStats>>& samples);
std::vector<EntropyProfile> average_entropy(const std::vector<std::vector<EntropyProfile>>& samples);

/// stats.csv: layer,block,mean,var
void write_stats_csv(const std::filesystem::path& path, const std::vector<AttentionBlockStats>& stats,
                     const StageSegmentation* stages = nullptr);
/// entropy.csv: layer,metric,value,exited
void write_entropy_csv(const std::filesystem::path& path, const std::vector<EntropyProfile>& baseline,
                       const std::vector<EntropyProfile>* exited = nullptr);

}  // namespace vtexit
