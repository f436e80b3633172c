// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

#include "vtexit/gate.hpp"

#include <cmath>
#include <sstream>

#include "vtexit/checkpoint.hpp"

namespace vtexit {

namespace {

struct PartName {
  StatusPart part;
  const char* name;
};

constexpr PartName kPartNames[] = {
    {StatusPart::MeanVisual, "mean_visual"},         {StatusPart::LastVisual, "last_visual"},
    {StatusPart::MeanText, "mean_text"},             {StatusPart::LastText, "last_text"},
    {StatusPart::VisualSelfAttn, "visual_self_attn"}, {StatusPart::CrossAttn, "cross_attn"},
    {StatusPart::TextSelfAttn, "text_self_attn"},
};

bool is_attention(StatusPart p) {
  return p == StatusPart::VisualSelfAttn || p == StatusPart::CrossAttn || p == StatusPart::TextSelfAttn;
}

// Mean of rows 0..n-2, or row 0 when there is only one.
void append_mean_but_last(const Matrix& m, std::vector<double>& out) {
  const std::size_t n = m.rows() > 1 ? m.rows() - 1 : 1;
  const std::size_t base = out.size();
  out.resize(base + m.cols(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) out[base + j] += r[j];
  }
  for (std::size_t j = 0; j < m.cols(); ++j) out[base + j] /= static_cast<double>(n);
}

void append_row(const Matrix& m, std::size_t i, std::vector<double>& out) {
  auto r = m.row(i);
  out.insert(out.end(), r.begin(), r.end());
}

// Per key in [key_begin, key_end): mean weight from queries in
// [query_begin, n) that may causally see it.
std::vector<double> received_attention(const Matrix& a, std::size_t key_begin, std::size_t key_end,
                                       std::size_t query_begin, std::size_t query_end) {
  std::vector<double> out;
  for (std::size_t j = key_begin; j < key_end; ++j) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = std::max(j, query_begin); i < query_end; ++i) {
      sum += a(i, j);
      ++count;
    }
    out.push_back(count ? sum / static_cast<double>(count) : 0.0);
  }
  return out;
}

std::array<double, 2> softmax2(std::array<double, 2> z) {
  const double m = std::max(z[0], z[1]);
  const double e0 = std::exp(z[0] - m), e1 = std::exp(z[1] - m);
  return {e0 / (e0 + e1), e1 / (e0 + e1)};
}

std::vector<double> log_softmax(const std::vector<double>& x) {
  double m = x.at(0);
  for (double v : x) m = std::max(m, v);
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  const double lse = m + std::log(s);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
  return out;
}

}  // namespace

std::string to_string(StatusPart part) {
  for (const auto& pn : kPartNames)
    if (pn.part == part) return pn.name;
  return "unknown";
}

StatusPart status_part_from_string(const std::string& name) {
  for (const auto& pn : kPartNames)
    if (name == pn.name) return pn.part;
  throw InvalidInput("unknown token-status part '" + name + "'");
}

std::size_t StatusSelector::feature_dim(std::size_t hidden_dim) const {
  std::size_t f = 0;
  for (auto p : parts) f += is_attention(p) ? attn_feature_dim : hidden_dim;
  return f;
}

bool StatusSelector::needs_attention() const {
  for (auto p : parts)
    if (is_attention(p)) return true;
  return false;
}

bool StatusSelector::needs_visual() const {
  for (auto p : parts)
    if (p != StatusPart::MeanText && p != StatusPart::LastText && p != StatusPart::TextSelfAttn) return true;
  return false;
}

StatusSelector StatusSelector::parse(const std::string& spec, std::size_t attn_feature_dim) {
  StatusSelector s;
  s.parts.clear();
  s.attn_feature_dim = attn_feature_dim;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    s.parts.push_back(status_part_from_string(item));
  }
  if (s.parts.empty()) throw InvalidInput("token-status selector is empty");
  if (s.needs_attention() && attn_feature_dim == 0) throw InvalidInput("attn_feature_dim must be positive");
  return s;
}

std::string StatusSelector::to_string() const {
  std::string out;
  for (auto p : parts) {
    if (!out.empty()) out += ',';
    out += vtexit::to_string(p);
  }
  return out;
}

std::vector<double> interpolate_linear(std::span<const double> v, std::size_t out_dim) {
  if (v.empty()) throw InvalidInput("interpolate_linear: empty input");
  if (out_dim == 0) throw InvalidInput("interpolate_linear: out_dim must be positive");
  std::vector<double> out(out_dim, v[0]);
  if (v.size() == 1 || out_dim == 1) return out;
  const double step = static_cast<double>(v.size() - 1) / static_cast<double>(out_dim - 1);
  for (std::size_t i = 0; i < out_dim; ++i) {
    const double x = static_cast<double>(i) * step;
    const auto lo = std::min(static_cast<std::size_t>(x), v.size() - 1);
    if (lo + 1 >= v.size()) {
      out[i] = v.back();
      continue;
    }
    const double frac = x - static_cast<double>(lo);
    out[i] = v[lo] * (1.0 - frac) + v[lo + 1] * frac;
  }
  return out;
}

std::vector<double> token_status(const StatusSelector& selector, const TokenSequence& seq, const LayerTrace* trace) {
  if (seq.text.rows() == 0) throw InvalidInput("token_status: no text rows");
  const std::size_t nv = seq.visual.rows();
  if (selector.needs_visual() && nv == 0) throw InvalidInput("token_status: selector reads visual tokens but none are live");
  if (selector.needs_attention() && !trace) throw InvalidInput("token_status: selector reads attention but no trace");
  std::vector<double> out;
  for (auto part : selector.parts) {
    switch (part) {
      case StatusPart::MeanVisual:
        append_mean_but_last(seq.visual, out);
        break;
      case StatusPart::LastVisual:
        append_row(seq.visual, nv - 1, out);
        break;
      case StatusPart::MeanText:
        append_mean_but_last(seq.text, out);
        break;
      case StatusPart::LastText:
        append_row(seq.text, seq.text.rows() - 1, out);
        break;
      default: {
        const Matrix& a = trace->attention;
        const std::size_t tv = trace->num_visual, n = a.rows();
        std::vector<double> raw;
        if (part == StatusPart::VisualSelfAttn) raw = received_attention(a, 0, tv, 0, tv);
        else if (part == StatusPart::CrossAttn) raw = received_attention(a, 0, tv, tv, n);
        else raw = received_attention(a, tv, n, tv, n);
        auto res = interpolate_linear(raw, selector.attn_feature_dim);
        out.insert(out.end(), res.begin(), res.end());
      }
    }
  }
  return out;
}

std::vector<double> token_status(const StatusSelector& selector, const Prefill& state) {
  const LayerTrace* trace = selector.needs_attention() ? &state.last_trace() : nullptr;
  return token_status(selector, state.sequence(), trace);
}

LayerRange default_gated_range(const ModelConfig& config) { return {1, config.num_layers - 1}; }

GateWeights GateWeights::init_random(const StatusSelector& selector, const ModelConfig& config, LayerRange range,
                                     std::size_t gate_hidden, bool use_bias, SeededRng& rng) {
  config.validate();
  GateWeights g;
  g.selector = selector;
  g.range = range;
  g.hidden_dim = config.hidden_dim;
  g.gate_hidden = gate_hidden;
  g.use_bias = use_bias;
  if (range.first > range.last || range.last >= config.num_layers) throw InvalidInput("gate layer range out of bounds");
  if (gate_hidden == 0) throw InvalidInput("gate hidden size must be positive");
  const std::size_t f = g.feature_dim();
  for (std::size_t l = range.first; l <= range.last; ++l) {
    GateLayerWeights lw;
    lw.w1 = rng.normal_matrix(f, gate_hidden, 1.0 / std::sqrt(static_cast<double>(f)));
    lw.w2 = rng.normal_matrix(gate_hidden, 2, 1.0 / std::sqrt(static_cast<double>(gate_hidden)));
    if (use_bias) {
      lw.b1.assign(gate_hidden, 0.0);
      lw.b2.assign(2, 0.0);
    }
    g.layers.push_back(std::move(lw));
  }
  return g;
}

const GateLayerWeights& GateWeights::at(std::size_t layer) const {
  if (!range.contains(layer)) throw InvalidInput("no gate for layer " + std::to_string(layer));
  return layers.at(layer - range.first);
}

GateLayerWeights& GateWeights::at(std::size_t layer) {
  if (!range.contains(layer)) throw InvalidInput("no gate for layer " + std::to_string(layer));
  return layers.at(layer - range.first);
}

void GateWeights::validate() const {
  if (range.first > range.last) throw InvalidInput("gates: empty layer range");
  if (layers.size() != range.size()) throw InvalidInput("gates: one gate per layer in range required");
  const std::size_t f = feature_dim();
  for (const auto& lw : layers) {
    if (lw.w1.rows() != f || lw.w1.cols() != gate_hidden) throw InvalidInput("gates: w1 has wrong shape");
    if (lw.w2.rows() != gate_hidden || lw.w2.cols() != 2) throw InvalidInput("gates: w2 has wrong shape");
    if (use_bias && (lw.b1.size() != gate_hidden || lw.b2.size() != 2)) throw InvalidInput("gates: bias has wrong length");
    if (!use_bias && (!lw.b1.empty() || !lw.b2.empty())) throw InvalidInput("gates: unexpected bias");
  }
}

GateActivations gate_forward_full(const GateLayerWeights& w, std::span<const double> feature) {
  if (feature.size() != w.w1.rows()) {
    throw InvalidInput("gate: feature length " + std::to_string(feature.size()) + " does not match " +
                       std::to_string(w.w1.rows()));
  }
  const std::size_t h = w.w1.cols();
  GateActivations act;
  act.pre = w.b1.empty() ? std::vector<double>(h, 0.0) : w.b1;
  for (std::size_t i = 0; i < feature.size(); ++i) {
    const double s = feature[i];
    auto r = w.w1.row(i);
    for (std::size_t j = 0; j < h; ++j) act.pre[j] += s * r[j];
  }
  act.hidden.resize(h);
  for (std::size_t j = 0; j < h; ++j) act.hidden[j] = gelu(act.pre[j]);
  act.logits = w.b2.empty() ? std::array<double, 2>{0.0, 0.0} : std::array<double, 2>{w.b2[0], w.b2[1]};
  for (std::size_t j = 0; j < h; ++j) {
    act.logits[0] += act.hidden[j] * w.w2(j, 0);
    act.logits[1] += act.hidden[j] * w.w2(j, 1);
  }
  act.p = softmax2(act.logits);
  return act;
}

std::array<double, 2> gate_forward(const GateLayerWeights& w, std::span<const double> feature) {
  return gate_forward_full(w, feature).p;
}

ExitDecision LearnedGatePolicy::decide(const Prefill& state) const {
  ExitDecision d;
  d.layer = state.layers_done() - 1;
  d.p = gate_forward(gates_->at(d.layer), token_status(gates_->selector, state));
  d.fired = d.p[1] > d.p[0];
  return d;
}

ExitDecision ForcedGatePolicy::decide(const Prefill& state) const {
  ExitDecision d;
  d.layer = state.layers_done() - 1;
  d.fired = fire_layer_ && *fire_layer_ == d.layer;
  d.p = d.fired ? std::array<double, 2>{0.0, 1.0} : std::array<double, 2>{1.0, 0.0};
  return d;
}

LayerRange ForcedGatePolicy::range(const ModelConfig& config) const { return {0, config.num_layers - 1}; }

DyvteResult run_with_dyvte(const ModelWeights& weights, const ExitPolicy& policy, const ModelInputs& inputs,
                           const GenerateOptions& options, const LayerHook& before_gate) {
  const LayerRange range = policy.range(weights.config);
  Prefill state(weights, inputs, true);
  DyvteResult out;
  while (!state.done()) {
    state.run_layer();
    if (before_gate) before_gate(state);
    const std::size_t layer = state.layers_done() - 1;
    if (state.exited() || state.num_visual_live() == 0 || !range.contains(layer)) continue;
    ExitDecision d = policy.decide(state);
    out.decisions.push_back(d);
    if (d.fired) state.execute_exit();
  }
  const std::size_t full_rows = inputs.visual.rows() + inputs.text.size();
  const std::vector<std::size_t> rows = state.rows_per_layer();
  const auto exit_layer = state.exit_layer();
  out.generation = complete_generation(weights, std::move(state), options);
  out.flops = flops_from_rows(weights.config, rows, full_rows, exit_layer);
  return out;
}

double prediction_divergence(const std::vector<std::vector<double>>& base_logits,
                             const std::vector<std::vector<double>>& exit_logits) {
  const std::size_t n = std::min(base_logits.size(), exit_logits.size());
  if (n == 0) throw InvalidInput("prediction_divergence: no positions");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (base_logits[i].size() != exit_logits[i].size()) throw InvalidInput("prediction_divergence: vocab mismatch");
    const auto lp = log_softmax(base_logits[i]);
    const auto lq = log_softmax(exit_logits[i]);
    double kl = 0.0;
    for (std::size_t k = 0; k < lp.size(); ++k) kl += std::exp(lp[k]) * (lp[k] - lq[k]);
    total += std::max(0.0, kl) / std::log(2.0);
  }
  return total / static_cast<double>(n);
}

void save_gates(const std::filesystem::path& path, const GateWeights& gates) {
  gates.validate();
  TensorBundle b;
  b.meta = {{"schema_version", kSchemaVersion},
            {"selector", gates.selector.to_string()},
            {"attn_feature_dim", gates.selector.attn_feature_dim},
            {"first_layer", gates.range.first},
            {"last_layer", gates.range.last},
            {"hidden_dim", gates.hidden_dim},
            {"gate_hidden", gates.gate_hidden},
            {"use_bias", gates.use_bias}};
  for (std::size_t i = 0; i < gates.layers.size(); ++i) {
    const std::string prefix = "gate." + std::to_string(gates.range.first + i) + ".";
    b.add(prefix + "w1", gates.layers[i].w1);
    b.add(prefix + "w2", gates.layers[i].w2);
    if (gates.use_bias) {
      b.add(prefix + "b1", gates.layers[i].b1);
      b.add(prefix + "b2", gates.layers[i].b2);
    }
  }
  write_bundle(path, "gates", b);
}

GateWeights load_gates(const std::filesystem::path& path) {
  TensorBundle b = read_bundle(path, "gates");
  GateWeights g;
  try {
    g.selector = StatusSelector::parse(b.meta.at("selector").get<std::string>(),
                                       b.meta.at("attn_feature_dim").get<std::size_t>());
    g.range = {b.meta.at("first_layer").get<std::size_t>(), b.meta.at("last_layer").get<std::size_t>()};
    g.hidden_dim = b.meta.at("hidden_dim").get<std::size_t>();
    g.gate_hidden = b.meta.at("gate_hidden").get<std::size_t>();
    g.use_bias = b.meta.at("use_bias").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(path.string() + ": gate header: " + e.what());
  }
  if (g.range.first > g.range.last) throw InvalidInput(path.string() + ": empty gate layer range");
  for (std::size_t l = g.range.first; l <= g.range.last; ++l) {
    const std::string prefix = "gate." + std::to_string(l) + ".";
    GateLayerWeights lw;
    lw.w1 = b.get(prefix + "w1");
    lw.w2 = b.get(prefix + "w2");
    if (g.use_bias) {
      lw.b1 = b.get_vector(prefix + "b1");
      lw.b2 = b.get_vector(prefix + "b2");
    }
    g.layers.push_back(std::move(lw));
  }
  g.validate();
  return g;
}

}  // namespace vtexit
