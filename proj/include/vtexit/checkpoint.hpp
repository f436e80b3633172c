// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

// Checkpoint container: an 8-byte magic, a little-endian u64 header length,
// a JSON header describing every tensor, then a flat little-endian float64
// payload. Model and gate checkpoints share this layout.

#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vtexit/model.hpp"

namespace vtexit {

/// File missing, unreadable, or truncated.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kSchemaVersion = 1;

struct TensorBundle {
  nlohmann::json meta = nlohmann::json::object();  // free-form fields stored in the header
  std::vector<std::pair<std::string, Matrix>> tensors;

  void add(std::string name, Matrix m) { tensors.emplace_back(std::move(name), std::move(m)); }
  void add(std::string name, const std::vector<double>& v) { add(std::move(name), Matrix(1, v.size(), v)); }
  const Matrix& get(const std::string& name) const;
  std::vector<double> get_vector(const std::string& name) const;
};

void write_bundle(const std::filesystem::path& path, const std::string& kind, const TensorBundle& bundle);
TensorBundle read_bundle(const std::filesystem::path& path, const std::string& expected_kind);

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

void save_model(const std::filesystem::path& path, const ModelWeights& weights);
ModelWeights load_model(const std::filesystem::path& path);

/// Per-layer attention CSV: layer,query_index,key_index,weight. Only
/// causal-valid cells are written.
void write_trace_csv(const std::filesystem::path& path, const Trace& trace);

/// FNV-1a over the raw payload bytes, for pinning trained weights.
std::uint64_t weights_fingerprint(const ModelWeights& weights);

}  // namespace vtexit
