// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

// Minimal decoder-only multimodal transformer. The input sequence is laid out
// as [visual | text]; visual rows arrive as precomputed embeddings and text
// rows as token ids. Blocks are pre-norm: x += Attn(LN(x)); x += FFN(LN(x)).
//
// Visual-token exit at layer l keeps layers 0..l on the joint sequence and
// then deletes every visual row, so layers l+1..L-1 and all later decode
// steps see text keys only.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "vtexit/tensor.hpp"

namespace vtexit {

struct ModelConfig {
  std::size_t num_layers = 8;
  std::size_t hidden_dim = 64;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t vocab_size = 32;
  std::size_t num_visual = 16;
  std::size_t max_text = 16;

  std::size_t head_dim() const { return hidden_dim / num_heads; }
  std::size_t max_positions() const { return num_visual + max_text; }
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
  std::vector<double> ln1_gain, ln1_bias;
  Matrix wq, wk, wv, wo;  // d x d each, no biases
  std::vector<double> ln2_gain, ln2_bias;
  Matrix w_up;  // d x d_ff
  std::vector<double> b_up;
  Matrix w_down;  // d_ff x d
  std::vector<double> b_down;

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct ModelWeights {
  ModelConfig config;
  Matrix token_embedding;     // vocab x d
  Matrix position_embedding;  // max_positions x d, added once at the input
  std::vector<LayerWeights> layers;
  std::vector<double> final_gain, final_bias;
  Matrix lm_head;  // d x vocab

  static ModelWeights init_random(const ModelConfig& config, SeededRng& rng);
  void validate() const;

  friend bool operator==(const ModelWeights&, const ModelWeights&) = default;
};

struct ModelInputs {
  Matrix visual;                   // num_visual x d, or 0 x d for text-only input
  std::vector<std::int32_t> text;  // prompt token ids, at least one
};

/// Hidden states of the live sequence at a layer boundary.
struct TokenSequence {
  Matrix visual;  // live visual rows (empty after exit)
  Matrix text;
  std::size_t layer_index = 0;  // number of blocks applied so far
  bool exited = false;
};

struct LayerTrace {
  std::size_t layer = 0;
  std::size_t num_visual = 0;  // visual rows present when this layer ran
  Matrix attention;            // heads-averaged, queries x keys, causal
  Matrix hidden;               // post-block hidden states of the live rows
};

struct Trace {
  std::vector<LayerTrace> layers;
};

struct LayerKv {
  Matrix keys;
  Matrix values;
};

struct KvCache {
  std::size_t num_layers = 0;
  std::size_t hidden_dim = 0;
  std::vector<LayerKv> layers;
  std::size_t num_visual_live = 0;
  std::size_t next_position = 0;  // absolute position of the next token
  std::optional<std::size_t> exit_layer;
};

struct PrefillResult {
  std::vector<double> logits;  // final-position logits
  Trace trace;
  KvCache cache;
  TokenSequence final_sequence;
  std::optional<std::size_t> exit_layer;
};

/// Layer-by-layer prefill driver. Callers may execute an exit or prune the
/// visual span between layers; `finish` runs whatever layers remain.
class Prefill {
 public:
  Prefill(const ModelWeights& weights, const ModelInputs& inputs, bool record_trace = true);

  std::size_t layers_done() const { return seq_.layer_index; }
  bool done() const { return seq_.layer_index == weights_->config.num_layers; }
  std::size_t num_visual_live() const { return visual_ids_.size(); }
  /// Original indices of the visual tokens still alive.
  const std::vector<std::size_t>& visual_ids() const { return visual_ids_; }
  bool exited() const { return exit_layer_.has_value(); }
  std::optional<std::size_t> exit_layer() const { return exit_layer_; }

  void run_layer();
  /// Removes every visual row after the most recent layer. At most once.
  void execute_exit();
  /// Keeps the live visual rows at the given positions within the live
  /// visual span (ascending); the rest are dropped for all later layers.
  void prune_visual(std::span<const std::size_t> keep);

  const TokenSequence& sequence() const { return seq_; }
  /// Trace of the most recent layer (requires record_trace).
  const LayerTrace& last_trace() const;
  const Trace& trace() const { return trace_; }
  /// Rows processed by each layer run so far.
  const std::vector<std::size_t>& rows_per_layer() const { return rows_per_layer_; }

  PrefillResult finish();

 private:
  void sync_sequence();

  const ModelWeights* weights_;
  bool record_trace_;
  Matrix hidden_;  // live rows: visual first, then text
  std::vector<std::size_t> visual_ids_;
  TokenSequence seq_;
  Trace trace_;
  KvCache cache_;
  std::optional<std::size_t> exit_layer_;
  std::vector<std::vector<std::size_t>> layer_visual_ids_;
  std::vector<std::size_t> rows_per_layer_;
};

/// Full causal prefill. `exit_layer` in [0, L) exits after that layer; L or
/// nullopt means no exit.
PrefillResult prefill(const ModelWeights& weights, const ModelInputs& inputs,
                      std::optional<std::size_t> exit_layer = std::nullopt, bool record_trace = true);

/// Convenience wrapper around Prefill::execute_exit for a finished layer.
void execute_exit(Prefill& state);

/// Appends one text token and returns next-token logits.
std::vector<double> decode_step(const ModelWeights& weights, KvCache& cache, std::int32_t token);

/// Text-only forward that feeds the prompt one token at a time through the
/// decode path. Returns final-position logits.
std::vector<double> text_only_forward(const ModelWeights& weights, std::span<const std::int32_t> text);

/// Reference forward with pre-softmax masking instead of row deletion. For
/// layers > exit_layer, text queries cannot see visual keys; positions at
/// index >= prompt_len (generated tokens) never see visual keys once an exit
/// happened. Returns logits for every text position (t x vocab).
Matrix masked_forward(const ModelWeights& weights, const ModelInputs& inputs,
                      std::optional<std::size_t> exit_layer,
                      std::optional<std::size_t> prompt_len = std::nullopt);

struct GenerateOptions {
  std::size_t max_new_tokens = 1;
  std::optional<std::int32_t> stop_token;
};

struct Generation {
  std::vector<std::int32_t> tokens;
  std::vector<std::vector<double>> step_logits;  // logits that produced each token
  std::optional<std::size_t> exit_layer;
  std::size_t visual_after_prefill = 0;  // live visual rows at the end of prefill
  std::vector<std::size_t> live_tokens_per_layer;  // rows each prefill layer processed
  std::size_t prompt_text_len = 0;
};

using LayerHook = std::function<void(Prefill&)>;

/// Greedy decoding. `after_layer` runs after each prefill layer and may exit
/// or prune.
Generation generate(const ModelWeights& weights, const ModelInputs& inputs, const GenerateOptions& options,
                    const LayerHook& after_layer = {});

/// Finishes a (possibly partially run) prefill and decodes greedily.
Generation complete_generation(const ModelWeights& weights, Prefill state, const GenerateOptions& options);

std::size_t argmax(std::span<const double> v);

}  // namespace vtexit
