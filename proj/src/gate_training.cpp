// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

#include "vtexit/gate_training.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "vtexit/checkpoint.hpp"

namespace vtexit {

namespace {

constexpr double kProbFloor = 1e-12;

double log_prob(const std::vector<double>& logits, std::int32_t token) {
  if (token < 0 || static_cast<std::size_t>(token) >= logits.size()) throw InvalidInput("answer token outside vocabulary");
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  double s = 0.0;
  for (double v : logits) s += std::exp(v - m);
  return logits[static_cast<std::size_t>(token)] - m - std::log(s);
}

}  // namespace

double answer_uncertainty(const std::vector<std::vector<double>>& step_logits, std::span<const std::int32_t> answer) {
  if (answer.empty()) throw InvalidInput("answer_uncertainty: empty answer");
  if (step_logits.size() < answer.size()) throw InvalidInput("answer_uncertainty: fewer logits than answer tokens");
  double nll = 0.0;
  for (std::size_t i = 0; i < answer.size(); ++i) nll -= log_prob(step_logits[i], answer[i]);
  return nll / static_cast<double>(answer.size());
}

WeakLabel make_label(std::uint64_t sample_id, std::size_t layer, const Generation& base, const Generation& exited,
                     double alpha) {
  WeakLabel lab;
  lab.sample_id = sample_id;
  lab.layer = layer;
  lab.rho_base = answer_uncertainty(base.step_logits, base.tokens);
  lab.answer_match = base.tokens == exited.tokens;
  lab.rho_exit = answer_uncertainty(exited.step_logits, exited.tokens);
  lab.y = lab.answer_match && lab.rho_exit < alpha * lab.rho_base ? 1 : 0;
  return lab;
}

WeakLabel generate_label(const ModelWeights& weights, const ModelInputs& inputs, std::uint64_t sample_id,
                         std::size_t layer, double alpha, const GenerateOptions& options) {
  if (layer > weights.config.num_layers) throw InvalidInput("generate_label: layer out of range");
  const Generation base = generate(weights, inputs, options);
  // Exit after the last layer still strips visual keys from decoding; L is the no-op.
  const Generation exited = layer == weights.config.num_layers ? base : generate(weights, inputs, options, [layer](Prefill& p) {
    if (p.layers_done() == layer + 1) p.execute_exit();
  });
  return make_label(sample_id, layer, base, exited, alpha);
}

LabeledSample label_sample(const ModelWeights& weights, const ModelInputs& inputs, std::uint64_t sample_id,
                           const StatusSelector& selector, LayerRange range, double alpha,
                           const GenerateOptions& options) {
  if (range.first > range.last || range.last >= weights.config.num_layers) {
    throw InvalidInput("label_sample: gated range out of bounds");
  }
  if (inputs.visual.rows() == 0) throw InvalidInput("label_sample: sample has no visual tokens");
  LabeledSample out;
  out.sample_id = sample_id;
  std::vector<Generation> exited;
  std::vector<std::size_t> layers;
  Prefill base(weights, inputs, true);
  while (!base.done()) {
    base.run_layer();
    const std::size_t l = base.layers_done() - 1;
    if (!range.contains(l)) continue;
    out.features.push_back(token_status(selector, base));
    Prefill branch = base;
    branch.execute_exit();
    exited.push_back(complete_generation(weights, std::move(branch), options));
    layers.push_back(l);
  }
  const Generation baseline = complete_generation(weights, std::move(base), options);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    out.labels.push_back(make_label(sample_id, layers[i], baseline, exited[i], alpha));
  }
  return out;
}

std::size_t sample_exit_layer(SeededRng& rng, LayerRange range) {
  if (range.first > range.last) throw InvalidInput("sample_exit_layer: empty range");
  return static_cast<std::size_t>(
      rng.uniform_int(static_cast<std::int64_t>(range.first), static_cast<std::int64_t>(range.last)));
}

double gate_loss(const std::array<double, 2>& p, int y) {
  const double p1 = std::max(p[1], kProbFloor), p0 = std::max(p[0], kProbFloor);
  return -(y * std::log(p1) + (1 - y) * std::log(p0));
}

double gate_loss_and_grad(const GateLayerWeights& w, std::span<const double> feature, int y, GateGrad* grad) {
  if (y != 0 && y != 1) throw InvalidInput("gate label must be 0 or 1");
  const GateActivations act = gate_forward_full(w, feature);
  const double loss = gate_loss(act.p, y);
  if (!grad) return loss;
  const std::size_t f = w.w1.rows(), h = w.w1.cols();
  const std::array<double, 2> dlogits{act.p[0] - (y == 0 ? 1.0 : 0.0), act.p[1] - (y == 1 ? 1.0 : 0.0)};
  grad->dw2 = Matrix(h, 2);
  std::vector<double> dpre(h);
  for (std::size_t j = 0; j < h; ++j) {
    grad->dw2(j, 0) = act.hidden[j] * dlogits[0];
    grad->dw2(j, 1) = act.hidden[j] * dlogits[1];
    const double dh = w.w2(j, 0) * dlogits[0] + w.w2(j, 1) * dlogits[1];
    dpre[j] = dh * gelu_derivative(act.pre[j]);
  }
  grad->dw1 = Matrix(f, h);
  for (std::size_t i = 0; i < f; ++i) {
    auto r = grad->dw1.row(i);
    for (std::size_t j = 0; j < h; ++j) r[j] = feature[i] * dpre[j];
  }
  if (w.b1.empty()) {
    grad->db1.clear();
    grad->db2.clear();
  } else {
    grad->db1 = dpre;
    grad->db2 = {dlogits[0], dlogits[1]};
  }
  return loss;
}

GateWeights train_gates(const std::vector<LabeledSample>& data, const StatusSelector& selector,
                        const ModelConfig& config, LayerRange range, const GateTrainConfig& tc, const GateLogFn& log) {
  if (data.empty()) throw InvalidInput("train_gates: no labelled samples");
  if (tc.sample_fraction <= 0.0 || tc.sample_fraction > 1.0) throw InvalidInput("train_gates: sample_fraction must be in (0,1]");
  if (!(tc.lr >= 0.0)) throw InvalidInput("train_gates: lr must be non-negative");
  for (const auto& s : data) {
    if (s.labels.size() != range.size() || s.features.size() != range.size()) {
      throw InvalidInput("train_gates: sample " + std::to_string(s.sample_id) + " does not cover the gated range");
    }
  }
  SeededRng rng(tc.seed);
  GateWeights gates = GateWeights::init_random(selector, config, range, tc.gate_hidden, tc.use_bias, rng);

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  const auto n_train = static_cast<std::size_t>(std::ceil(tc.sample_fraction * static_cast<double>(data.size())));
  order.resize(std::max<std::size_t>(1, n_train));

  if (tc.momentum < 0.0 || tc.momentum >= 1.0) throw InvalidInput("train_gates: momentum must be in [0, 1)");
  GateGrad g;
  // Momentum buffers, one set per gated layer.
  std::vector<std::vector<double>> vw1(range.size()), vw2(range.size()), vb1(range.size()), vb2(range.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t idx : order) {
      const std::size_t layer = sample_exit_layer(rng, range);
      const std::size_t slot = layer - range.first;
      const LabeledSample& s = data[idx];
      GateLayerWeights& w = gates.at(layer);
      const int y = s.labels[slot].y;
      const double loss = gate_loss_and_grad(w, s.features[slot], y, &g);
      if (log) log({step, layer, y, gate_forward(w, s.features[slot])[1], loss});
      auto apply = [&](std::span<double> param, std::span<const double> grad, std::vector<double>& vel) {
        if (vel.size() != param.size()) vel.assign(param.size(), 0.0);
        for (std::size_t i = 0; i < param.size(); ++i) {
          vel[i] = tc.momentum * vel[i] + grad[i];
          param[i] -= tc.lr * vel[i];
        }
      };
      apply(w.w1.flat(), g.dw1.flat(), vw1[slot]);
      apply(w.w2.flat(), g.dw2.flat(), vw2[slot]);
      if (!w.b1.empty()) {
        apply(w.b1, g.db1, vb1[slot]);
        apply(w.b2, g.db2, vb2[slot]);
      }
      ++step;
    }
  }
  return gates;
}

double gate_accuracy(const GateWeights& gates, const std::vector<LabeledSample>& data) {
  std::size_t hit = 0, total = 0;
  for (const auto& s : data) {
    for (std::size_t i = 0; i < s.labels.size(); ++i) {
      const auto p = gate_forward(gates.at(s.labels[i].layer), s.features[i]);
      hit += ((p[1] > p[0]) ? 1 : 0) == s.labels[i].y;
      ++total;
    }
  }
  if (total == 0) throw InvalidInput("gate_accuracy: no labels");
  return static_cast<double>(hit) / static_cast<double>(total);
}

void write_labels_csv(const std::filesystem::path& path, const std::vector<WeakLabel>& labels, double alpha) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.precision(17);
  out << "# schema_version=" << kSchemaVersion << " alpha=" << alpha << "\nsample_id,layer,y,rho_base,rho_exit\n";
  for (const auto& l : labels) {
    out << l.sample_id << ',' << l.layer << ',' << l.y << ',' << l.rho_base << ',' << l.rho_exit << '\n';
  }
}

std::vector<WeakLabel> read_labels_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<WeakLabel> out;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != "sample_id,layer,y,rho_base,rho_exit") throw InvalidInput(path.string() + ": unexpected header");
      header = true;
      continue;
    }
    std::stringstream ss(line);
    WeakLabel l;
    char c1, c2, c3, c4;
    if (!(ss >> l.sample_id >> c1 >> l.layer >> c2 >> l.y >> c3 >> l.rho_base >> c4 >> l.rho_exit) || c1 != ',' ||
        c2 != ',' || c3 != ',' || c4 != ',' || (l.y != 0 && l.y != 1)) {
      throw InvalidInput(path.string() + ":" + std::to_string(lineno) + ": malformed label row");
    }
    out.push_back(l);
  }
  if (!header) throw InvalidInput(path.string() + ": missing header");
  return out;
}

}  // namespace vtexit
