// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic grid tasks. A g x g grid of symbols is shown to the model as g²
// visual tokens (symbol embedding + cell embedding). The text prompt is
// [BOS, TASK, ROW_r, COL_c] naming cell k = r*g + c, and the answer is one
// symbol token. Row and column arrive as separate tokens, so the text has to
// combine them before it can address a visual token.
//
//   lookup:  answer = grid[k]
//   two-hop: s = grid[k]; answer = grid[s]
//
// Two-hop needs a second round of text-to-visual routing, so visual tokens
// stay useful for more layers.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "vtexit/model.hpp"

namespace vtexit {

enum class TaskKind { Lookup, TwoHop };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& s);

struct SynthSpec {
  std::size_t grid_size = 3;
  std::size_t num_symbols = 6;
  std::size_t hidden_dim = 64;
  double twohop_fraction = 0.5;
  std::size_t num_train = 20000;
  std::size_t num_val = 500;
  std::size_t num_test = 1000;
  std::uint64_t embed_seed = 20260101;

  std::size_t num_cells() const { return grid_size * grid_size; }
  void validate() const;
};

nlohmann::json spec_to_json(const SynthSpec& spec);
SynthSpec spec_from_json(const nlohmann::json& j);

/// Token id layout shared by the generator and the model config.
struct Vocabulary {
  std::size_t grid_size;
  std::size_t num_symbols;

  static constexpr std::int32_t kBos = 0;
  static constexpr std::int32_t kLookup = 1;
  static constexpr std::int32_t kTwoHop = 2;
  std::int32_t row(std::size_t r) const { return static_cast<std::int32_t>(3 + r); }
  std::int32_t col(std::size_t c) const { return static_cast<std::int32_t>(3 + grid_size + c); }
  std::int32_t symbol(std::size_t s) const { return static_cast<std::int32_t>(3 + 2 * grid_size + s); }
  std::size_t size() const { return 3 + 2 * grid_size + num_symbols; }
  /// Cell index named by a [BOS, TASK, ROW, COL] prompt.
  std::size_t cell_of(const std::vector<std::int32_t>& question) const;
};

struct SynthTask {
  std::uint64_t id = 0;
  TaskKind kind = TaskKind::Lookup;
  std::vector<int> grid;  // row-major symbol ids
  std::vector<std::int32_t> question;
  std::int32_t answer = 0;
  std::size_t fusion_depth_hint = 1;
};

/// Deterministic symbol/cell embedding tables derived from the spec.
class VisualTable {
 public:
  explicit VisualTable(const SynthSpec& spec);
  Matrix embed(const std::vector<int>& grid) const;

 private:
  Matrix symbols_;
  Matrix cells_;
};

struct SynthDataset {
  SynthSpec spec;
  std::uint64_t seed = 0;
  std::vector<SynthTask> train, val, test;

  Vocabulary vocabulary() const { return {spec.grid_size, spec.num_symbols}; }
  const std::vector<SynthTask>& split(const std::string& name) const;
};

SynthDataset generate_dataset(const SynthSpec& spec, std::uint64_t seed);

/// Answer implied by the grid and question; the generator's ground truth.
std::int32_t solve_task(const SynthSpec& spec, TaskKind kind, const std::vector<int>& grid, std::size_t cell);

/// Builds model inputs for one task.
ModelInputs task_inputs(const VisualTable& table, const SynthTask& task);

/// Default model shape for a dataset (desk-scale transformer sized to the grid).
ModelConfig default_model_config(const SynthSpec& spec);

/// Directory layout: spec.json, train.jsonl, val.jsonl, test.jsonl.
void save_dataset(const std::filesystem::path& dir, const SynthDataset& data);
SynthDataset load_dataset(const std::filesystem::path& dir);

/// Relabels every grid symbol by a random derangement of symbol ids; the
/// question is unchanged. Used to check that answers depend on the image.
SynthTask relabel_grid(const SynthSpec& spec, const SynthTask& task, SeededRng& rng);

/// Random weights in which, for every layer after `onset_layer`, text
/// queries give visual keys exactly zero attention (the scores sit far enough
/// below the text scores that exp underflows to 0). Visual and text rows are
/// told apart by a position-embedding flag on dims 0 and 1 that no block
/// writes to; it holds for visual inputs with |v[0] - v[1]| well below 20.
/// Needs hidden_dim >= 4. onset_layer >= L gives an unconstrained model.
ModelWeights forced_mask_model(const ModelConfig& config, std::size_t onset_layer, std::uint64_t seed);

/// Tasks of one kind only.
std::vector<SynthTask> filter_kind(const std::vector<SynthTask>& tasks, TaskKind kind);

}  // namespace vtexit
