// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

#include "vtexit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace vtexit {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'V', 'T', 'E', 'X', 'I', 'T', '0', '1'};

using nlohmann::json;

template <typename T>
T require(const json& j, const char* key) {
  if (!j.contains(key)) throw InvalidInput(std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw InvalidInput(std::string("field '") + key + "' has the wrong type");
  }
}

}  // namespace

const Matrix& TensorBundle::get(const std::string& name) const {
  for (const auto& [n, m] : tensors)
    if (n == name) return m;
  throw InvalidInput("checkpoint: missing tensor '" + name + "'");
}

std::vector<double> TensorBundle::get_vector(const std::string& name) const { return get(name).data(); }

void write_bundle(const std::filesystem::path& path, const std::string& kind, const TensorBundle& bundle) {
  json header = bundle.meta;
  header["schema_version"] = kSchemaVersion;
  header["kind"] = kind;
  header["byte_order"] = "little";
  header["dtype"] = "f64";
  json list = json::array();
  std::size_t offset = 0;
  for (const auto& [name, m] : bundle.tensors) {
    list.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", offset}});
    offset += m.size();
  }
  header["tensors"] = list;
  header["payload_count"] = offset;
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, m] : bundle.tensors) {
    out.write(reinterpret_cast<const char*>(m.flat().data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

TensorBundle read_bundle(const std::filesystem::path& path, const std::string& expected_kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in) throw IoError("truncated checkpoint '" + path.string() + "'");
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw InvalidInput("'" + path.string() + "' is not a vtexit checkpoint (bad magic)");
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (1ULL << 30)) throw IoError("truncated checkpoint header in '" + path.string() + "'");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("truncated checkpoint header in '" + path.string() + "'");

  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw InvalidInput("checkpoint header is not valid JSON: " + std::string(e.what()));
  }
  if (require<int>(header, "schema_version") != kSchemaVersion) throw InvalidInput("field 'schema_version' unsupported");
  if (require<std::string>(header, "kind") != expected_kind) {
    throw InvalidInput("field 'kind' is '" + header["kind"].get<std::string>() + "', expected '" + expected_kind + "'");
  }
  if (require<std::string>(header, "byte_order") != "little") throw InvalidInput("field 'byte_order' must be little");
  if (require<std::string>(header, "dtype") != "f64") throw InvalidInput("field 'dtype' must be f64");

  TensorBundle bundle;
  bundle.meta = header;
  std::size_t expected_offset = 0;
  for (const auto& t : require<json>(header, "tensors")) {
    const auto name = require<std::string>(t, "name");
    const auto shape = require<std::vector<std::size_t>>(t, "shape");
    if (shape.size() != 2) throw InvalidInput("tensor '" + name + "': field 'shape' must have two entries");
    if (require<std::size_t>(t, "offset") != expected_offset) {
      throw InvalidInput("tensor '" + name + "': field 'offset' is inconsistent");
    }
    std::vector<double> data(shape[0] * shape[1]);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!in) throw IoError("truncated payload for tensor '" + name + "'");
    expected_offset += data.size();
    bundle.add(name, Matrix(shape[0], shape[1], std::move(data)));
  }
  if (require<std::size_t>(header, "payload_count") != expected_offset) {
    throw InvalidInput("field 'payload_count' does not match tensor list");
  }
  return bundle;
}

json config_to_json(const ModelConfig& c) {
  return {{"num_layers", c.num_layers}, {"hidden_dim", c.hidden_dim}, {"num_heads", c.num_heads},
          {"ffn_dim", c.ffn_dim},       {"vocab_size", c.vocab_size}, {"num_visual", c.num_visual},
          {"max_text", c.max_text}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.num_layers = require<std::size_t>(j, "num_layers");
  c.hidden_dim = require<std::size_t>(j, "hidden_dim");
  c.num_heads = require<std::size_t>(j, "num_heads");
  c.ffn_dim = require<std::size_t>(j, "ffn_dim");
  c.vocab_size = require<std::size_t>(j, "vocab_size");
  c.num_visual = require<std::size_t>(j, "num_visual");
  c.max_text = require<std::size_t>(j, "max_text");
  c.validate();
  return c;
}

void save_model(const std::filesystem::path& path, const ModelWeights& w) {
  w.validate();
  TensorBundle b;
  b.meta["config"] = config_to_json(w.config);
  b.add("token_embedding", w.token_embedding);
  b.add("position_embedding", w.position_embedding);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& lw = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    b.add(p + "ln1_gain", lw.ln1_gain);
    b.add(p + "ln1_bias", lw.ln1_bias);
    b.add(p + "wq", lw.wq);
    b.add(p + "wk", lw.wk);
    b.add(p + "wv", lw.wv);
    b.add(p + "wo", lw.wo);
    b.add(p + "ln2_gain", lw.ln2_gain);
    b.add(p + "ln2_bias", lw.ln2_bias);
    b.add(p + "w_up", lw.w_up);
    b.add(p + "b_up", lw.b_up);
    b.add(p + "w_down", lw.w_down);
    b.add(p + "b_down", lw.b_down);
  }
  b.add("final_gain", w.final_gain);
  b.add("final_bias", w.final_bias);
  b.add("lm_head", w.lm_head);
  write_bundle(path, "model", b);
}

ModelWeights load_model(const std::filesystem::path& path) {
  TensorBundle b = read_bundle(path, "model");
  ModelWeights w;
  w.config = config_from_json(require<json>(b.meta, "config"));
  w.token_embedding = b.get("token_embedding");
  w.position_embedding = b.get("position_embedding");
  for (std::size_t l = 0; l < w.config.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    LayerWeights lw;
    lw.ln1_gain = b.get_vector(p + "ln1_gain");
    lw.ln1_bias = b.get_vector(p + "ln1_bias");
    lw.wq = b.get(p + "wq");
    lw.wk = b.get(p + "wk");
    lw.wv = b.get(p + "wv");
    lw.wo = b.get(p + "wo");
    lw.ln2_gain = b.get_vector(p + "ln2_gain");
    lw.ln2_bias = b.get_vector(p + "ln2_bias");
    lw.w_up = b.get(p + "w_up");
    lw.b_up = b.get_vector(p + "b_up");
    lw.w_down = b.get(p + "w_down");
    lw.b_down = b.get_vector(p + "b_down");
    w.layers.push_back(std::move(lw));
  }
  w.final_gain = b.get_vector("final_gain");
  w.final_bias = b.get_vector("final_bias");
  w.lm_head = b.get("lm_head");
  w.validate();
  return w;
}

void write_trace_csv(const std::filesystem::path& path, const Trace& trace) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.precision(17);
  out << "# schema_version=" << kSchemaVersion << "\n";
  out << "layer,query_index,key_index,weight\n";
  for (const auto& lt : trace.layers) {
    for (std::size_t i = 0; i < lt.attention.rows(); ++i)
      for (std::size_t j = 0; j <= i && j < lt.attention.cols(); ++j)
        out << lt.layer << ',' << i << ',' << j << ',' << lt.attention(i, j) << '\n';
  }
}

std::uint64_t weights_fingerprint(const ModelWeights& w) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](std::span<const double> data) {
    for (double v : data) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xFF;
        h *= 1099511628211ULL;
      }
    }
  };
  mix(w.token_embedding.flat());
  mix(w.position_embedding.flat());
  for (const auto& lw : w.layers) {
    for (const auto* v : {&lw.ln1_gain, &lw.ln1_bias, &lw.ln2_gain, &lw.ln2_bias, &lw.b_up, &lw.b_down}) mix(*v);
    for (const auto* m : {&lw.wq, &lw.wk, &lw.wv, &lw.wo, &lw.w_up, &lw.w_down}) mix(m->flat());
  }
  mix(w.final_gain);
  mix(w.final_bias);
  mix(w.lm_head.flat());
  return h;
}

}  // namespace vtexit
