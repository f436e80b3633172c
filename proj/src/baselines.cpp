// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

#include "vtexit/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "vtexit/checkpoint.hpp"

namespace vtexit {

namespace {

void check_ratio(double r) {
  if (!(r >= 0.0 && r <= 1.0)) throw InvalidInput("keep_ratio must be in [0, 1]");
}

}  // namespace

DyvteResult manual_exit(const ModelWeights& weights, const ModelInputs& inputs, std::size_t layer,
                        const GenerateOptions& options) {
  if (layer > weights.config.num_layers) throw InvalidInput("manual_exit: layer must be in [0, L]");
  return run_with_dyvte(weights, ForcedGatePolicy(layer), inputs, options);
}

std::vector<std::size_t> attn_rank_keep(const LayerTrace& trace, double keep_ratio) {
  check_ratio(keep_ratio);
  const Matrix& a = trace.attention;
  const std::size_t nv = trace.num_visual, n = a.rows();
  std::vector<double> score(nv, 0.0);
  for (std::size_t j = 0; j < nv; ++j) {
    for (std::size_t i = j + 1; i < n; ++i) score[j] += a(i, j);
    if (n > j + 1) score[j] /= static_cast<double>(n - j - 1);
  }
  std::vector<std::size_t> order(nv);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return score[x] > score[y]; });
  const auto keep = std::min(nv, static_cast<std::size_t>(std::ceil(keep_ratio * static_cast<double>(nv))));
  order.resize(keep);
  std::sort(order.begin(), order.end());
  return order;
}

LayerHook prune_hook(const PruneConfig& config) {
  check_ratio(config.keep_ratio);
  return [config](Prefill& p) {
    if (p.layers_done() != config.layer + 1 || p.exited() || p.num_visual_live() == 0) return;
    const auto keep = attn_rank_keep(p.last_trace(), config.keep_ratio);
    if (keep.size() == p.num_visual_live()) return;
    p.prune_visual(keep);
  };
}

DyvteResult attn_rank_prune(const ModelWeights& weights, const ModelInputs& inputs, const PruneConfig& config,
                            const GenerateOptions& options) {
  if (config.layer >= weights.config.num_layers) throw InvalidInput("attn_rank_prune: layer must be < L");
  return run_with_dyvte(weights, ForcedGatePolicy(std::nullopt), inputs, options, prune_hook(config));
}

DyvteResult combined(const ModelWeights& weights, const ExitPolicy& policy, const ModelInputs& inputs,
                     const PruneConfig& config, const GenerateOptions& options) {
  if (config.layer >= weights.config.num_layers) throw InvalidInput("combined: layer must be < L");
  return run_with_dyvte(weights, policy, inputs, options, prune_hook(config));
}

void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepPoint>& points) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.precision(12);
  out << "# schema_version=" << kSchemaVersion << "\nlayer_or_ratio,accuracy,flops\n";
  for (const auto& p : points) out << p.layer_or_ratio << ',' << p.accuracy << ',' << p.flops << '\n';
}

}  // namespace vtexit
