// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

#include "vtexit/flops.hpp"

#include <cstdio>
#include <numeric>

#include "vtexit/checkpoint.hpp"

namespace vtexit {

namespace {

// Rough per-element costs used only when elementwise ops are included:
// layer norm 7, softmax 4 per score (plus 1 for scaling), GELU 10,
// residual/bias adds 1.
std::uint64_t elementwise_flops(const ModelConfig& c, std::size_t n, std::size_t keys) {
  const std::uint64_t d = c.hidden_dim, f = c.ffn_dim, h = c.num_heads;
  const std::uint64_t norms = 2 * 7 * n * d;
  const std::uint64_t softmax = 5 * n * keys * h;
  const std::uint64_t act = 10 * n * f;
  const std::uint64_t adds = n * (2 * d + f + d);
  return norms + softmax + act + adds;
}

double pct(std::uint64_t with_exit, std::uint64_t baseline) {
  if (baseline == 0) return 0.0;
  return 100.0 * (1.0 - static_cast<double>(with_exit) / static_cast<double>(baseline));
}

}  // namespace

std::uint64_t layer_flops(const ModelConfig& c, std::size_t n, const FlopsOptions& options) {
  if (n == 0) throw InvalidInput("layer_flops: n must be >= 1");
  const std::uint64_t d = c.hidden_dim, f = c.ffn_dim, nn = n;
  std::uint64_t total = 8 * nn * d * d + 4 * nn * nn * d + 4 * nn * d * f;
  if (options.include_elementwise) total += elementwise_flops(c, n, n);
  return total;
}

std::uint64_t decode_layer_flops(const ModelConfig& c, std::size_t context, const FlopsOptions& options) {
  if (context == 0) throw InvalidInput("decode_layer_flops: context must be >= 1");
  const std::uint64_t d = c.hidden_dim, f = c.ffn_dim, m = context;
  std::uint64_t total = 8 * d * d + 4 * m * d + 4 * d * f;
  if (options.include_elementwise) total += elementwise_flops(c, 1, context);
  return total;
}

FlopsReport flops_from_rows(const ModelConfig& c, const std::vector<std::size_t>& rows_per_layer,
                            std::size_t baseline_rows, std::optional<std::size_t> exit_layer,
                            const FlopsOptions& options) {
  if (rows_per_layer.size() != c.num_layers) throw InvalidInput("flops_from_rows: one row count per layer required");
  FlopsReport r;
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    if (rows_per_layer[l] > baseline_rows) throw InvalidInput("flops_from_rows: rows exceed baseline");
    r.per_layer.push_back(layer_flops(c, rows_per_layer[l], options));
    r.per_layer_baseline.push_back(layer_flops(c, baseline_rows, options));
  }
  r.total_with_exit = std::accumulate(r.per_layer.begin(), r.per_layer.end(), std::uint64_t{0});
  r.total_baseline = std::accumulate(r.per_layer_baseline.begin(), r.per_layer_baseline.end(), std::uint64_t{0});
  r.reduction_pct = pct(r.total_with_exit, r.total_baseline);
  r.exit_layer = exit_layer;
  return r;
}

FlopsReport total_flops(const ModelConfig& c, std::optional<std::size_t> exit_layer, std::size_t text_tokens,
                        const FlopsOptions& options) {
  c.validate();
  if (text_tokens == 0) throw InvalidInput("total_flops: at least one text token required");
  const std::size_t full = c.num_visual + text_tokens;
  const bool exits = exit_layer && *exit_layer < c.num_layers;
  std::vector<std::size_t> rows(c.num_layers, full);
  if (exits)
    for (std::size_t l = *exit_layer + 1; l < c.num_layers; ++l) rows[l] = text_tokens;
  return flops_from_rows(c, rows, full, exits ? exit_layer : std::nullopt, options);
}

FlopsReport accumulate_reports(const std::vector<FlopsReport>& reports) {
  FlopsReport sum;
  for (const auto& r : reports) {
    if (sum.per_layer.empty()) {
      sum.per_layer.assign(r.per_layer.size(), 0);
      sum.per_layer_baseline.assign(r.per_layer_baseline.size(), 0);
    }
    for (std::size_t l = 0; l < r.per_layer.size(); ++l) {
      sum.per_layer[l] += r.per_layer[l];
      sum.per_layer_baseline[l] += r.per_layer_baseline[l];
    }
    sum.total_baseline += r.total_baseline;
    sum.total_with_exit += r.total_with_exit;
  }
  sum.reduction_pct = pct(sum.total_with_exit, sum.total_baseline);
  return sum;
}

nlohmann::json to_json(const FlopsReport& r) {
  nlohmann::json j = {{"schema_version", kSchemaVersion},
                      {"per_layer", r.per_layer},
                      {"per_layer_baseline", r.per_layer_baseline},
                      {"total_baseline", r.total_baseline},
                      {"total_with_exit", r.total_with_exit},
                      {"reduction_pct", r.reduction_pct}};
  j["exit_layer"] = r.exit_layer ? nlohmann::json(*r.exit_layer) : nlohmann::json(nullptr);
  return j;
}

std::string format_flops_table(const FlopsReport& r) {
  char buf[256];
  std::string out = "metric            TFLOPs        delta%\n";
  std::snprintf(buf, sizeof buf, "baseline          %-12.6g  %+.1f\n", static_cast<double>(r.total_baseline) * 1e-12, 0.0);
  out += buf;
  std::snprintf(buf, sizeof buf, "with-exit         %-12.6g  %+.1f\n", static_cast<double>(r.total_with_exit) * 1e-12,
                -r.reduction_pct);
  out += buf;
  return out;
}

}  // namespace vtexit
