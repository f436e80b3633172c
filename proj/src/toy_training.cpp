// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

#include "vtexit/toy_training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace vtexit {

namespace {

struct NormCache {
  Matrix xhat;
  std::vector<double> rstd;
};

Matrix norm_forward(const Matrix& x, const std::vector<double>& gain, const std::vector<double>& bias,
                    NormCache& cache) {
  const std::size_t n = x.rows(), d = x.cols();
  cache.xhat = Matrix(n, d);
  cache.rstd.assign(n, 0.0);
  Matrix y(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = x.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.rstd[i] = rstd;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (r[j] - mean) * rstd;
      cache.xhat(i, j) = xh;
      y(i, j) = xh * gain[j] + bias[j];
    }
  }
  return y;
}

// Returns dx and accumulates gain/bias gradients.
Matrix norm_backward(const Matrix& dy, const NormCache& cache, const std::vector<double>& gain,
                     std::vector<double>& dgain, std::vector<double>& dbias) {
  const std::size_t n = dy.rows(), d = dy.cols();
  Matrix dx(n, d);
  std::vector<double> dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double g = dy(i, j);
      dgain[j] += g * cache.xhat(i, j);
      dbias[j] += g;
      dxhat[j] = g * gain[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * cache.xhat(i, j);
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      dx(i, j) = cache.rstd[i] * (dxhat[j] - mean_dxhat - cache.xhat(i, j) * mean_dxhat_xhat);
    }
  }
  return dx;
}

struct LayerCache {
  NormCache ln1, ln2;
  Matrix h1, q, k, v;
  std::vector<Matrix> probs;  // per head, n x n
  Matrix mixed;
  Matrix h2, up_pre, up_act;
};

void accumulate(Matrix& dst, const Matrix& src) {
  auto a = dst.flat();
  auto b = src.flat();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

void accumulate_colsum(std::vector<double>& dst, const Matrix& src) {
  for (std::size_t i = 0; i < src.rows(); ++i) {
    auto r = src.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) dst[j] += r[j];
  }
}

}  // namespace

ModelWeights zeros_like(const ModelWeights& w) {
  ModelWeights z = w;
  for (auto view : parameter_views(z)) std::fill(view.begin(), view.end(), 0.0);
  return z;
}

std::vector<std::span<double>> parameter_views(ModelWeights& w) {
  std::vector<std::span<double>> views;
  views.push_back(w.token_embedding.flat());
  views.push_back(w.position_embedding.flat());
  for (auto& lw : w.layers) {
    views.push_back(lw.ln1_gain);
    views.push_back(lw.ln1_bias);
    views.push_back(lw.wq.flat());
    views.push_back(lw.wk.flat());
    views.push_back(lw.wv.flat());
    views.push_back(lw.wo.flat());
    views.push_back(lw.ln2_gain);
    views.push_back(lw.ln2_bias);
    views.push_back(lw.w_up.flat());
    views.push_back(lw.b_up);
    views.push_back(lw.w_down.flat());
    views.push_back(lw.b_down);
  }
  views.push_back(w.final_gain);
  views.push_back(w.final_bias);
  views.push_back(w.lm_head.flat());
  return views;
}

double loss_and_grad(const ModelWeights& w, const ModelInputs& inputs, std::int32_t target,
                     std::optional<std::size_t> exit_layer, ModelWeights* grad, double label_smoothing) {
  const auto& cfg = w.config;
  const std::size_t d = cfg.hidden_dim, dh = cfg.head_dim(), heads = cfg.num_heads;
  const std::size_t nv = inputs.visual.rows(), t = inputs.text.size(), n = nv + t;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (t == 0) throw InvalidInput("loss_and_grad: empty text");
  if (target < 0 || static_cast<std::size_t>(target) >= cfg.vocab_size) throw InvalidInput("target outside vocab");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw InvalidInput("label_smoothing must be in [0, 1)");

  Matrix x(n, d);
  for (std::size_t i = 0; i < nv; ++i)
    for (std::size_t j = 0; j < d; ++j) x(i, j) = inputs.visual(i, j) + w.position_embedding(i, j);
  for (std::size_t s = 0; s < t; ++s) {
    const auto tok = static_cast<std::size_t>(inputs.text[s]);
    if (tok >= cfg.vocab_size) throw InvalidInput("token outside vocab");
    for (std::size_t j = 0; j < d; ++j) x(nv + s, j) = w.token_embedding(tok, j) + w.position_embedding(nv + s, j);
  }

  auto allowed = [&](std::size_t layer, std::size_t i, std::size_t j) {
    if (j > i) return false;
    if (exit_layer && layer > *exit_layer && i >= nv && j < nv) return false;
    return true;
  };

  std::vector<LayerCache> caches(cfg.num_layers);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const auto& lw = w.layers[l];
    auto& c = caches[l];
    c.h1 = norm_forward(x, lw.ln1_gain, lw.ln1_bias, c.ln1);
    c.q = matmul(c.h1, lw.wq);
    c.k = matmul(c.h1, lw.wk);
    c.v = matmul(c.h1, lw.wv);
    c.mixed = Matrix(n, d);
    c.probs.assign(heads, Matrix(n, n));
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t off = hd * dh;
      Matrix& p = c.probs[hd];
      for (std::size_t i = 0; i < n; ++i) {
        auto row = p.row(i);
        for (std::size_t j = 0; j < n; ++j) {
          if (!allowed(l, i, j)) {
            row[j] = -std::numeric_limits<double>::infinity();
            continue;
          }
          double acc = 0.0;
          const double* qi = &c.q(i, off);
          const double* kj = &c.k(j, off);
          for (std::size_t e = 0; e < dh; ++e) acc += qi[e] * kj[e];
          row[j] = acc * scale;
        }
        softmax_inplace(row);
        double* out = &c.mixed(i, off);
        for (std::size_t j = 0; j <= i; ++j) {
          const double pij = row[j];
          if (pij == 0.0) continue;
          const double* vj = &c.v(j, off);
          for (std::size_t e = 0; e < dh; ++e) out[e] += pij * vj[e];
        }
      }
    }
    Matrix mid = x;
    accumulate(mid, matmul(c.mixed, lw.wo));
    c.h2 = norm_forward(mid, lw.ln2_gain, lw.ln2_bias, c.ln2);
    c.up_pre = matmul(c.h2, lw.w_up);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < cfg.ffn_dim; ++j) c.up_pre(i, j) += lw.b_up[j];
    c.up_act = c.up_pre;
    for (double& val : c.up_act.flat()) val = gelu(val);
    Matrix down = matmul(c.up_act, lw.w_down);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) mid(i, j) += down(i, j) + lw.b_down[j];
    x = std::move(mid);
  }

  NormCache final_cache;
  Matrix last = x.slice_rows(n - 1, n);
  Matrix hf = norm_forward(last, w.final_gain, w.final_bias, final_cache);
  Matrix logits = matmul(hf, w.lm_head);
  auto probs = logits.row(0);
  softmax_inplace(probs);
  // Smoothed target q = (1 - eps) onehot + eps / V.
  const double spread = label_smoothing / static_cast<double>(cfg.vocab_size);
  double loss = -(1.0 - label_smoothing) * std::log(std::max(probs[static_cast<std::size_t>(target)], 1e-300));
  if (spread > 0.0)
    for (std::size_t j = 0; j < cfg.vocab_size; ++j) loss -= spread * std::log(std::max(probs[j], 1e-300));
  if (!grad) return loss;

  // Backward.
  Matrix dlogits(1, cfg.vocab_size);
  for (std::size_t j = 0; j < cfg.vocab_size; ++j) dlogits(0, j) = probs[j] - spread;
  dlogits(0, static_cast<std::size_t>(target)) -= 1.0 - label_smoothing;
  accumulate(grad->lm_head, matmul_at(hf, dlogits));
  Matrix dhf = matmul_bt(dlogits, w.lm_head);
  Matrix dlast = norm_backward(dhf, final_cache, w.final_gain, grad->final_gain, grad->final_bias);
  Matrix dx(n, d);
  for (std::size_t j = 0; j < d; ++j) dx(n - 1, j) = dlast(0, j);

  for (std::size_t li = cfg.num_layers; li-- > 0;) {
    const auto& lw = w.layers[li];
    auto& gw = grad->layers[li];
    auto& c = caches[li];

    // FFN branch.
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t i = 0; i < n; ++i) gw.b_down[j] += dx(i, j);
    accumulate(gw.w_down, matmul_at(c.up_act, dx));
    Matrix dup = matmul_bt(dx, lw.w_down);
    for (std::size_t i = 0; i < dup.size(); ++i) dup.flat()[i] *= gelu_derivative(c.up_pre.flat()[i]);
    accumulate_colsum(gw.b_up, dup);
    accumulate(gw.w_up, matmul_at(c.h2, dup));
    Matrix dh2 = matmul_bt(dup, lw.w_up);
    Matrix dmid = dx;
    accumulate(dmid, norm_backward(dh2, c.ln2, lw.ln2_gain, gw.ln2_gain, gw.ln2_bias));

    // Attention branch.
    accumulate(gw.wo, matmul_at(c.mixed, dmid));
    Matrix dmixed = matmul_bt(dmid, lw.wo);
    Matrix dq(n, d), dk(n, d), dv(n, d);
    std::vector<double> dp(n);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t off = hd * dh;
      const Matrix& p = c.probs[hd];
      for (std::size_t i = 0; i < n; ++i) {
        const double* dout = &dmixed(i, off);
        double dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          const double pij = p(i, j);
          if (pij == 0.0) {
            dp[j] = 0.0;
            continue;
          }
          const double* vj = &c.v(j, off);
          double acc = 0.0;
          for (std::size_t e = 0; e < dh; ++e) acc += dout[e] * vj[e];
          dp[j] = acc;
          dot += acc * pij;
          double* dvj = &dv(j, off);
          for (std::size_t e = 0; e < dh; ++e) dvj[e] += pij * dout[e];
        }
        const double* qi = &c.q(i, off);
        double* dqi = &dq(i, off);
        for (std::size_t j = 0; j <= i; ++j) {
          const double pij = p(i, j);
          if (pij == 0.0) continue;
          const double ds = pij * (dp[j] - dot) * scale;
          const double* kj = &c.k(j, off);
          double* dkj = &dk(j, off);
          for (std::size_t e = 0; e < dh; ++e) {
            dqi[e] += ds * kj[e];
            dkj[e] += ds * qi[e];
          }
        }
      }
    }
    accumulate(gw.wq, matmul_at(c.h1, dq));
    accumulate(gw.wk, matmul_at(c.h1, dk));
    accumulate(gw.wv, matmul_at(c.h1, dv));
    Matrix dh1 = matmul_bt(dq, lw.wq);
    accumulate(dh1, matmul_bt(dk, lw.wk));
    accumulate(dh1, matmul_bt(dv, lw.wv));
    accumulate(dmid, norm_backward(dh1, c.ln1, lw.ln1_gain, gw.ln1_gain, gw.ln1_bias));
    dx = std::move(dmid);
  }

  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) grad->position_embedding(i, j) += dx(i, j);
  for (std::size_t s = 0; s < t; ++s) {
    const auto tok = static_cast<std::size_t>(inputs.text[s]);
    for (std::size_t j = 0; j < d; ++j) grad->token_embedding(tok, j) += dx(nv + s, j);
  }
  return loss;
}

double greedy_accuracy(const ModelWeights& weights, const VisualTable& table, const std::vector<SynthTask>& tasks) {
  if (tasks.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& task : tasks) {
    auto res = prefill(weights, task_inputs(table, task), std::nullopt, false);
    if (static_cast<std::int32_t>(argmax(res.logits)) == task.answer) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(tasks.size());
}

ToyTrainResult train_toy_model(const ModelConfig& config, const SynthDataset& data, const ToyTrainConfig& tc,
                               const TrainLogFn& log) {
  config.validate();
  if (data.train.empty()) throw InvalidInput("train_toy_model: empty training split");
  if (config.num_visual != data.spec.num_cells() || config.hidden_dim != data.spec.hidden_dim ||
      config.vocab_size < data.vocabulary().size()) {
    throw InvalidInput("train_toy_model: model config does not fit the dataset");
  }
  SeededRng rng(tc.seed);
  ToyTrainResult result;
  result.weights = ModelWeights::init_random(config, rng);
  const VisualTable table(data.spec);

  std::vector<SynthTask> val_sets[2] = {filter_kind(data.val, TaskKind::Lookup),
                                        filter_kind(data.val, TaskKind::TwoHop)};
  for (auto& v : val_sets)
    if (v.size() > tc.eval_samples) v.resize(tc.eval_samples);

  auto evaluate = [&]() {
    std::map<TaskKind, double> acc;
    if (!val_sets[0].empty()) acc[TaskKind::Lookup] = greedy_accuracy(result.weights, table, val_sets[0]);
    if (!val_sets[1].empty()) acc[TaskKind::TwoHop] = greedy_accuracy(result.weights, table, val_sets[1]);
    return acc;
  };
  auto meets = [&](const std::map<TaskKind, double>& acc, double bar) {
    if (acc.empty()) return false;
    for (const auto& [k, a] : acc)
      if (a < bar) return false;
    return true;
  };

  auto params = parameter_views(result.weights);
  std::vector<std::vector<double>> m1, m2;
  for (auto p : params) {
    m1.emplace_back(p.size(), 0.0);
    m2.emplace_back(p.size(), 0.0);
  }

  // Too shallow for the augmentation window: train without it.
  const bool can_augment = tc.exit_augment_min_layer + 2 <= config.num_layers;
  std::vector<std::size_t> order(data.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  std::size_t cursor = 0;

  ModelWeights grad = zeros_like(result.weights);
  std::size_t step = 0;
  for (; step < tc.max_steps; ++step) {
    if (tc.eval_every > 0 && step > 0 && step % tc.eval_every == 0) {
      auto acc = evaluate();
      if (log) log(step, std::numeric_limits<double>::quiet_NaN(), &acc);
      if (meets(acc, tc.target_accuracy)) break;
    }
    for (auto view : parameter_views(grad)) std::fill(view.begin(), view.end(), 0.0);
    double batch_loss = 0.0;
    for (std::size_t b = 0; b < tc.batch_size; ++b) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      const auto& task = data.train[order[cursor++]];
      std::optional<std::size_t> exit;
      if (can_augment && rng.uniform() < tc.exit_augment_prob) {
        exit = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(tc.exit_augment_min_layer),
                                                        static_cast<std::int64_t>(config.num_layers) - 2));
      }
      batch_loss += loss_and_grad(result.weights, task_inputs(table, task), task.answer, exit, &grad, tc.label_smoothing);
    }
    batch_loss /= static_cast<double>(tc.batch_size);

    auto gviews = parameter_views(grad);
    double norm2 = 0.0;
    for (auto g : gviews)
      for (double& v : g) {
        v /= static_cast<double>(tc.batch_size);
        norm2 += v * v;
      }
    const double clip = (tc.grad_clip > 0.0 && std::sqrt(norm2) > tc.grad_clip) ? tc.grad_clip / std::sqrt(norm2) : 1.0;
    const double lr = tc.lr * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(std::max<std::size_t>(1, tc.warmup_steps)));
    const double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(step + 1));
    const double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(step + 1));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      auto p = params[pi];
      auto g = gviews[pi];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i] * clip;
        m1[pi][i] = tc.beta1 * m1[pi][i] + (1.0 - tc.beta1) * gi;
        m2[pi][i] = tc.beta2 * m2[pi][i] + (1.0 - tc.beta2) * gi * gi;
        p[i] -= lr * (m1[pi][i] / bc1) / (std::sqrt(m2[pi][i] / bc2) + tc.adam_eps);
      }
    }
    if (log) log(step, batch_loss, nullptr);
  }

  result.steps = step;
  result.val_accuracy = evaluate();
  result.reached_target = meets(result.val_accuracy, tc.target_accuracy);
  result.failed = !meets(result.val_accuracy, tc.failure_accuracy);
  return result;
}

}  // namespace vtexit
