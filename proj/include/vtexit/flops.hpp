// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

// Analytical FLOPs model. A multiply-add counts as two operations.
// Per layer with n live tokens (dense prefill):
//   QKVO projections   8·n·d²
//   scores + mixing    4·n²·d
//   FFN                4·n·d·d_ff
// Norms, softmax, GELU, bias and residual adds are excluded unless
// FlopsOptions::include_elementwise is set. The LM head is not counted.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vtexit/model.hpp"

namespace vtexit {

struct FlopsOptions {
  bool include_elementwise = false;
};

std::uint64_t layer_flops(const ModelConfig& config, std::size_t n, const FlopsOptions& options = {});

/// One decode step through one layer with `context` keys (including the new token).
std::uint64_t decode_layer_flops(const ModelConfig& config, std::size_t context, const FlopsOptions& options = {});

struct FlopsReport {
  std::vector<std::uint64_t> per_layer;           // with exit
  std::vector<std::uint64_t> per_layer_baseline;  // no exit
  std::uint64_t total_baseline = 0;
  std::uint64_t total_with_exit = 0;
  double reduction_pct = 0.0;
  std::optional<std::size_t> exit_layer;
};

/// Layers <= exit_layer run on n_v + t tokens, later layers on t tokens.
/// exit_layer >= L or nullopt means no exit.
FlopsReport total_flops(const ModelConfig& config, std::optional<std::size_t> exit_layer, std::size_t text_tokens,
                        const FlopsOptions& options = {});

/// Report from the rows each layer actually processed (covers pruning).
FlopsReport flops_from_rows(const ModelConfig& config, const std::vector<std::size_t>& rows_per_layer,
                            std::size_t baseline_rows, std::optional<std::size_t> exit_layer,
                            const FlopsOptions& options = {});

/// Sums several per-sample reports.
FlopsReport accumulate_reports(const std::vector<FlopsReport>& reports);

nlohmann::json to_json(const FlopsReport& report);

/// Plain-text table: metric, TFLOPs, delta %.
std::string format_flops_table(const FlopsReport& report);

}  // namespace vtexit
