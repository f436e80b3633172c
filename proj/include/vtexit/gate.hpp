// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

// Per-layer exit gates. Each gated layer owns a two-layer hyper-network
// p = softmax(GELU(s W1) W2) over a token-status vector s built from the
// hidden states (and optionally the attention map) at that layer. The first
// gated layer whose p1 beats p0 triggers the visual exit.

#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vtexit/flops.hpp"
#include "vtexit/model.hpp"

namespace vtexit {

enum class StatusPart {
  MeanVisual,      // mean of visual rows 0..n_v-2 (the single row if n_v == 1)
  LastVisual,      // last live visual row
  MeanText,        // mean of text rows 0..t-2 (the single row if t == 1)
  LastText,        // last text row
  VisualSelfAttn,  // per visual key: mean weight from visual queries
  CrossAttn,       // per visual key: mean weight from text queries
  TextSelfAttn,    // per text key: mean weight from text queries
};

std::string to_string(StatusPart part);
StatusPart status_part_from_string(const std::string& name);

struct StatusSelector {
  std::vector<StatusPart> parts{StatusPart::MeanText, StatusPart::LastText};
  std::size_t attn_feature_dim = 576;  // attention parts are resampled to this length

  std::size_t feature_dim(std::size_t hidden_dim) const;
  bool needs_attention() const;
  bool needs_visual() const;
  /// Comma-separated part names, e.g. "mean_text,last_text".
  static StatusSelector parse(const std::string& spec, std::size_t attn_feature_dim = 576);
  std::string to_string() const;

  friend bool operator==(const StatusSelector&, const StatusSelector&) = default;
};

/// Linear resampling of `v` onto `out_dim` evenly spaced points spanning the
/// same index range. A length-1 input is broadcast.
std::vector<double> interpolate_linear(std::span<const double> v, std::size_t out_dim);

/// Builds the status vector at the most recent prefill layer. `trace` is
/// required when the selector reads attention.
std::vector<double> token_status(const StatusSelector& selector, const TokenSequence& seq, const LayerTrace* trace);
std::vector<double> token_status(const StatusSelector& selector, const Prefill& state);

struct GateLayerWeights {
  Matrix w1;                // f x h
  Matrix w2;                // h x 2
  std::vector<double> b1;   // h, empty without bias
  std::vector<double> b2;   // 2, empty without bias

  friend bool operator==(const GateLayerWeights&, const GateLayerWeights&) = default;
};

struct LayerRange {
  std::size_t first = 1;
  std::size_t last = 0;  // inclusive
  bool contains(std::size_t l) const { return l >= first && l <= last; }
  std::size_t size() const { return last - first + 1; }
  friend bool operator==(const LayerRange&, const LayerRange&) = default;
};

/// [1, L-1] for an L-layer model.
LayerRange default_gated_range(const ModelConfig& config);

struct GateWeights {
  StatusSelector selector;
  LayerRange range;
  std::size_t hidden_dim = 0;  // model width the selector was sized for
  std::size_t gate_hidden = 64;
  bool use_bias = false;
  std::vector<GateLayerWeights> layers;  // layers[i] gates model layer range.first + i

  static GateWeights init_random(const StatusSelector& selector, const ModelConfig& config, LayerRange range,
                                 std::size_t gate_hidden, bool use_bias, SeededRng& rng);
  const GateLayerWeights& at(std::size_t layer) const;
  GateLayerWeights& at(std::size_t layer);
  std::size_t feature_dim() const { return selector.feature_dim(hidden_dim); }
  void validate() const;

  friend bool operator==(const GateWeights&, const GateWeights&) = default;
};

/// Intermediates of one gate evaluation, reused by the backward pass.
struct GateActivations {
  std::vector<double> pre;     // s W1 (+ b1)
  std::vector<double> hidden;  // GELU(pre)
  std::array<double, 2> logits{};
  std::array<double, 2> p{};
};

GateActivations gate_forward_full(const GateLayerWeights& w, std::span<const double> feature);
std::array<double, 2> gate_forward(const GateLayerWeights& w, std::span<const double> feature);

struct ExitDecision {
  std::size_t layer = 0;
  std::array<double, 2> p{1.0, 0.0};
  bool fired = false;
};

class ExitPolicy {
 public:
  virtual ~ExitPolicy() = default;
  /// Called after each gated layer until one fires.
  virtual ExitDecision decide(const Prefill& state) const = 0;
  virtual LayerRange range(const ModelConfig& config) const = 0;
};

class LearnedGatePolicy : public ExitPolicy {
 public:
  explicit LearnedGatePolicy(const GateWeights& gates) : gates_(&gates) {}
  ExitDecision decide(const Prefill& state) const override;
  LayerRange range(const ModelConfig&) const override { return gates_->range; }

 private:
  const GateWeights* gates_;
};

/// Fires exactly at `fire_layer`, or never when it is empty.
class ForcedGatePolicy : public ExitPolicy {
 public:
  explicit ForcedGatePolicy(std::optional<std::size_t> fire_layer) : fire_layer_(fire_layer) {}
  ExitDecision decide(const Prefill& state) const override;
  LayerRange range(const ModelConfig& config) const override;

 private:
  std::optional<std::size_t> fire_layer_;
};

struct DyvteResult {
  Generation generation;
  std::vector<ExitDecision> decisions;  // one per gate evaluated
  FlopsReport flops;                    // prefill FLOPs versus the no-exit run
};

/// Optional hook run after every layer before the gate (used for pruning).
DyvteResult run_with_dyvte(const ModelWeights& weights, const ExitPolicy& policy, const ModelInputs& inputs,
                           const GenerateOptions& options = {}, const LayerHook& before_gate = {});

/// Mean over positions of KL(P_i || P'_i) in bits, from logits.
double prediction_divergence(const std::vector<std::vector<double>>& base_logits,
                             const std::vector<std::vector<double>>& exit_logits);

void save_gates(const std::filesystem::path& path, const GateWeights& gates);
GateWeights load_gates(const std::filesystem::path& path);

}  // namespace vtexit
