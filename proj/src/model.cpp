// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

#include "vtexit/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace vtexit {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Matrix columns(const Matrix& m, std::size_t begin, std::size_t count) {
  Matrix out(m.rows(), count);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto src = m.row(i).subspan(begin, count);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

void add_inplace(Matrix& a, const Matrix& b) {
  auto fa = a.flat();
  auto fb = b.flat();
  for (std::size_t i = 0; i < fa.size(); ++i) fa[i] += fb[i];
}

void add_bias(Matrix& m, std::span<const double> bias) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
}

void check_vec(const std::vector<double>& v, std::size_t n, const char* name) {
  if (v.size() != n) throw InvalidInput(std::string("weight '") + name + "' has wrong length");
}

void check_mat(const Matrix& m, std::size_t r, std::size_t c, const char* name) {
  if (m.rows() != r || m.cols() != c) {
    throw InvalidInput(std::string("weight '") + name + "' has shape " + std::to_string(m.rows()) + "x" +
                       std::to_string(m.cols()) + ", expected " + std::to_string(r) + "x" + std::to_string(c));
  }
}

// One pre-norm block over `x`, whose rows follow the rows already held in
// `kv`. Row i of `x` attends to every cached key plus new keys 0..i.
Matrix block_forward(const ModelConfig& cfg, const LayerWeights& w, const Matrix& x, LayerKv& kv,
                     Matrix* attn_avg) {
  const std::size_t n = x.rows();
  const std::size_t d = cfg.hidden_dim;
  const std::size_t dh = cfg.head_dim();
  const std::size_t heads = cfg.num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix h = layer_norm_rows(x, w.ln1_gain, w.ln1_bias);
  Matrix q = matmul(h, w.wq);
  Matrix k = matmul(h, w.wk);
  Matrix v = matmul(h, w.wv);
  const std::size_t past = kv.keys.rows();
  kv.keys.append_rows(k);
  kv.values.append_rows(v);
  const std::size_t m = kv.keys.rows();

  Matrix mixed(n, d);
  if (attn_avg) *attn_avg = Matrix(n, m);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    Matrix qh = columns(q, hd * dh, dh);
    Matrix kh = columns(kv.keys, hd * dh, dh);
    Matrix vh = columns(kv.values, hd * dh, dh);
    Matrix scores = matmul_bt(qh, kh);
    for (std::size_t i = 0; i < n; ++i) {
      auto r = scores.row(i);
      for (std::size_t j = 0; j < m; ++j) r[j] = (j > past + i) ? kNegInf : r[j] * scale;
      softmax_inplace(r);
    }
    if (attn_avg) {
      auto dst = attn_avg->flat();
      auto src = scores.flat();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i] / static_cast<double>(heads);
    }
    Matrix o = matmul(scores, vh);
    for (std::size_t i = 0; i < n; ++i) {
      auto src = o.row(i);
      std::copy(src.begin(), src.end(), mixed.row(i).begin() + static_cast<std::ptrdiff_t>(hd * dh));
    }
  }

  Matrix out = x;
  add_inplace(out, matmul(mixed, w.wo));
  Matrix h2 = layer_norm_rows(out, w.ln2_gain, w.ln2_bias);
  Matrix up = matmul(h2, w.w_up);
  add_bias(up, w.b_up);
  for (double& val : up.flat()) val = gelu(val);
  Matrix down = matmul(up, w.w_down);
  add_bias(down, w.b_down);
  add_inplace(out, down);
  return out;
}

// Final norm and LM head. Written as plain loops so the instrumented FLOPs
// counter only sees per-layer work.
std::vector<double> output_logits(const ModelWeights& w, std::span<const double> hidden) {
  auto normed = layer_norm(hidden, w.final_gain, w.final_bias);
  const std::size_t vocab = w.config.vocab_size;
  std::vector<double> logits(vocab, 0.0);
  for (std::size_t p = 0; p < normed.size(); ++p) {
    auto head_row = w.lm_head.row(p);
    for (std::size_t j = 0; j < vocab; ++j) logits[j] += normed[p] * head_row[j];
  }
  return logits;
}

std::vector<double> input_row(const ModelWeights& w, std::int32_t token, std::size_t position) {
  const auto& cfg = w.config;
  if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab_size) {
    throw InvalidInput("token id " + std::to_string(token) + " outside vocabulary of " +
                       std::to_string(cfg.vocab_size));
  }
  if (position >= cfg.max_positions()) {
    throw InvalidInput("position " + std::to_string(position) + " exceeds max_positions " +
                       std::to_string(cfg.max_positions()));
  }
  std::vector<double> row(cfg.hidden_dim);
  auto te = w.token_embedding.row(static_cast<std::size_t>(token));
  auto pe = w.position_embedding.row(position);
  for (std::size_t j = 0; j < row.size(); ++j) row[j] = te[j] + pe[j];
  return row;
}

}  // namespace

void ModelConfig::validate() const {
  if (num_layers < 2) throw InvalidInput("config: num_layers must be >= 2");
  if (hidden_dim == 0 || num_heads == 0) throw InvalidInput("config: hidden_dim and num_heads must be positive");
  if (hidden_dim % num_heads != 0) throw InvalidInput("config: hidden_dim must be divisible by num_heads");
  if (ffn_dim == 0) throw InvalidInput("config: ffn_dim must be positive");
  if (vocab_size < 2) throw InvalidInput("config: vocab_size must be >= 2");
  if (max_text == 0) throw InvalidInput("config: max_text must be positive");
}

ModelWeights ModelWeights::init_random(const ModelConfig& config, SeededRng& rng) {
  config.validate();
  const std::size_t d = config.hidden_dim;
  const std::size_t f = config.ffn_dim;
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double resid_std = proj_std / std::sqrt(2.0 * static_cast<double>(config.num_layers));

  ModelWeights w;
  w.config = config;
  w.token_embedding = rng.normal_matrix(config.vocab_size, d, 1.0);
  w.position_embedding = rng.normal_matrix(config.max_positions(), d, 0.5);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    LayerWeights lw;
    lw.ln1_gain.assign(d, 1.0);
    lw.ln1_bias.assign(d, 0.0);
    lw.wq = rng.normal_matrix(d, d, proj_std);
    lw.wk = rng.normal_matrix(d, d, proj_std);
    lw.wv = rng.normal_matrix(d, d, proj_std);
    lw.wo = rng.normal_matrix(d, d, resid_std);
    lw.ln2_gain.assign(d, 1.0);
    lw.ln2_bias.assign(d, 0.0);
    lw.w_up = rng.normal_matrix(d, f, proj_std);
    lw.b_up.assign(f, 0.0);
    lw.w_down = rng.normal_matrix(f, d, 1.0 / std::sqrt(static_cast<double>(f) * 2.0 * config.num_layers));
    lw.b_down.assign(d, 0.0);
    w.layers.push_back(std::move(lw));
  }
  w.final_gain.assign(d, 1.0);
  w.final_bias.assign(d, 0.0);
  w.lm_head = rng.normal_matrix(d, config.vocab_size, proj_std);
  return w;
}

void ModelWeights::validate() const {
  config.validate();
  const std::size_t d = config.hidden_dim, f = config.ffn_dim;
  check_mat(token_embedding, config.vocab_size, d, "token_embedding");
  check_mat(position_embedding, config.max_positions(), d, "position_embedding");
  if (layers.size() != config.num_layers) throw InvalidInput("weights: layer count differs from config");
  for (const auto& lw : layers) {
    check_vec(lw.ln1_gain, d, "ln1_gain");
    check_vec(lw.ln1_bias, d, "ln1_bias");
    check_mat(lw.wq, d, d, "wq");
    check_mat(lw.wk, d, d, "wk");
    check_mat(lw.wv, d, d, "wv");
    check_mat(lw.wo, d, d, "wo");
    check_vec(lw.ln2_gain, d, "ln2_gain");
    check_vec(lw.ln2_bias, d, "ln2_bias");
    check_mat(lw.w_up, d, f, "w_up");
    check_vec(lw.b_up, f, "b_up");
    check_mat(lw.w_down, f, d, "w_down");
    check_vec(lw.b_down, d, "b_down");
  }
  check_vec(final_gain, d, "final_gain");
  check_vec(final_bias, d, "final_bias");
  check_mat(lm_head, d, config.vocab_size, "lm_head");
}

Prefill::Prefill(const ModelWeights& weights, const ModelInputs& inputs, bool record_trace)
    : weights_(&weights), record_trace_(record_trace) {
  const auto& cfg = weights.config;
  const std::size_t d = cfg.hidden_dim;
  const std::size_t nv = inputs.visual.rows();
  if (inputs.text.empty()) throw InvalidInput("prefill: text must contain at least one token");
  if (nv != 0 && nv != cfg.num_visual) {
    throw InvalidInput("prefill: visual rows " + std::to_string(nv) + " != num_visual " +
                       std::to_string(cfg.num_visual));
  }
  if (nv != 0 && inputs.visual.cols() != d) throw InvalidInput("prefill: visual embedding width != hidden_dim");
  if (inputs.text.size() > cfg.max_text) throw InvalidInput("prefill: text longer than max_text");

  hidden_ = Matrix(nv + inputs.text.size(), d);
  for (std::size_t i = 0; i < nv; ++i) {
    auto pe = weights.position_embedding.row(i);
    auto src = inputs.visual.row(i);
    auto dst = hidden_.row(i);
    for (std::size_t j = 0; j < d; ++j) dst[j] = src[j] + pe[j];
    visual_ids_.push_back(i);
  }
  for (std::size_t t = 0; t < inputs.text.size(); ++t) {
    auto row = input_row(weights, inputs.text[t], nv + t);
    std::copy(row.begin(), row.end(), hidden_.row(nv + t).begin());
  }
  cache_.num_layers = cfg.num_layers;
  cache_.hidden_dim = d;
  cache_.layers.resize(cfg.num_layers);
  cache_.next_position = nv + inputs.text.size();
  sync_sequence();
}

void Prefill::sync_sequence() {
  const std::size_t nv = visual_ids_.size();
  seq_.visual = hidden_.slice_rows(0, nv);
  seq_.text = hidden_.slice_rows(nv, hidden_.rows());
  seq_.exited = exit_layer_.has_value();
}

void Prefill::run_layer() {
  if (done()) throw InvalidInput("prefill: all layers already run");
  const std::size_t l = seq_.layer_index;
  Matrix attn;
  rows_per_layer_.push_back(hidden_.rows());
  layer_visual_ids_.push_back(visual_ids_);
  hidden_ = block_forward(weights_->config, weights_->layers[l], hidden_, cache_.layers[l],
                          record_trace_ ? &attn : nullptr);
  if (record_trace_) {
    trace_.layers.push_back(LayerTrace{l, visual_ids_.size(), std::move(attn), hidden_});
  }
  ++seq_.layer_index;
  sync_sequence();
}

void Prefill::execute_exit() {
  if (exit_layer_) throw InvalidInput("execute_exit: visual tokens already exited");
  if (seq_.layer_index == 0) throw InvalidInput("execute_exit: no layer has run yet");
  exit_layer_ = seq_.layer_index - 1;
  hidden_ = hidden_.slice_rows(visual_ids_.size(), hidden_.rows());
  visual_ids_.clear();
  sync_sequence();
}

void Prefill::prune_visual(std::span<const std::size_t> keep) {
  if (exit_layer_) return;  // nothing left to prune
  if (keep.empty()) {
    execute_exit();
    return;
  }
  const std::size_t nv = visual_ids_.size();
  std::vector<std::size_t> rows;
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (keep[i] >= nv || (i > 0 && keep[i] <= keep[i - 1])) {
      throw InvalidInput("prune_visual: keep indices must be ascending and within the live visual span");
    }
    rows.push_back(keep[i]);
    ids.push_back(visual_ids_[keep[i]]);
  }
  for (std::size_t r = nv; r < hidden_.rows(); ++r) rows.push_back(r);
  hidden_ = hidden_.gather_rows(rows);
  visual_ids_ = std::move(ids);
  sync_sequence();
}

const LayerTrace& Prefill::last_trace() const {
  if (trace_.layers.empty()) throw InvalidInput("prefill: no trace recorded");
  return trace_.layers.back();
}

PrefillResult Prefill::finish() {
  while (!done()) run_layer();
  PrefillResult result;
  result.logits = output_logits(*weights_, hidden_.row(hidden_.rows() - 1));

  // Decode steps see only the tokens that survived prefill, at every layer.
  for (std::size_t l = 0; l < cache_.layers.size(); ++l) {
    const auto& ids_then = layer_visual_ids_[l];
    if (ids_then == visual_ids_) continue;
    std::vector<std::size_t> rows;
    std::size_t cursor = 0;
    for (std::size_t r = 0; r < ids_then.size(); ++r) {
      if (cursor < visual_ids_.size() && visual_ids_[cursor] == ids_then[r]) {
        rows.push_back(r);
        ++cursor;
      }
    }
    for (std::size_t r = ids_then.size(); r < cache_.layers[l].keys.rows(); ++r) rows.push_back(r);
    cache_.layers[l].keys = cache_.layers[l].keys.gather_rows(rows);
    cache_.layers[l].values = cache_.layers[l].values.gather_rows(rows);
  }
  cache_.num_visual_live = visual_ids_.size();
  cache_.exit_layer = exit_layer_;

  result.trace = std::move(trace_);
  result.cache = std::move(cache_);
  result.final_sequence = seq_;
  result.exit_layer = exit_layer_;
  return result;
}

PrefillResult prefill(const ModelWeights& weights, const ModelInputs& inputs, std::optional<std::size_t> exit_layer,
                      bool record_trace) {
  const std::size_t num_layers = weights.config.num_layers;
  if (exit_layer && *exit_layer > num_layers) throw InvalidInput("prefill: exit layer beyond num_layers");
  Prefill state(weights, inputs, record_trace);
  while (!state.done()) {
    state.run_layer();
    if (exit_layer && *exit_layer < num_layers && state.layers_done() == *exit_layer + 1) state.execute_exit();
  }
  return state.finish();
}

void execute_exit(Prefill& state) { state.execute_exit(); }

std::vector<double> decode_step(const ModelWeights& weights, KvCache& cache, std::int32_t token) {
  const auto& cfg = weights.config;
  if (cache.num_layers != cfg.num_layers || cache.hidden_dim != cfg.hidden_dim ||
      cache.layers.size() != cfg.num_layers) {
    throw InvalidInput("decode_step: cache does not match model config");
  }
  auto row = input_row(weights, token, cache.next_position);
  Matrix x(1, cfg.hidden_dim, std::move(row));
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    x = block_forward(cfg, weights.layers[l], x, cache.layers[l], nullptr);
  }
  ++cache.next_position;
  return output_logits(weights, x.row(0));
}

std::vector<double> text_only_forward(const ModelWeights& weights, std::span<const std::int32_t> text) {
  if (text.empty()) throw InvalidInput("text_only_forward: empty text");
  KvCache cache;
  cache.num_layers = weights.config.num_layers;
  cache.hidden_dim = weights.config.hidden_dim;
  cache.layers.resize(cache.num_layers);
  std::vector<double> logits;
  for (auto tok : text) logits = decode_step(weights, cache, tok);
  return logits;
}

Matrix masked_forward(const ModelWeights& weights, const ModelInputs& inputs, std::optional<std::size_t> exit_layer,
                      std::optional<std::size_t> prompt_len) {
  const auto& cfg = weights.config;
  const std::size_t d = cfg.hidden_dim;
  const std::size_t dh = cfg.head_dim();
  const std::size_t nv = inputs.visual.rows();
  const std::size_t t = inputs.text.size();
  const std::size_t n = nv + t;
  const std::size_t plen = prompt_len.value_or(t);
  const bool exits = exit_layer && *exit_layer < cfg.num_layers;
  if (t == 0) throw InvalidInput("masked_forward: empty text");

  Matrix x(n, d);
  for (std::size_t i = 0; i < nv; ++i)
    for (std::size_t j = 0; j < d; ++j) x(i, j) = inputs.visual(i, j) + weights.position_embedding(i, j);
  for (std::size_t s = 0; s < t; ++s) {
    auto row = input_row(weights, inputs.text[s], nv + s);
    std::copy(row.begin(), row.end(), x.row(nv + s).begin());
  }

  auto allowed = [&](std::size_t layer, std::size_t qi, std::size_t kj) {
    if (kj > qi) return false;
    if (!exits || kj >= nv || qi < nv) return true;
    if (layer > *exit_layer) return false;
    return qi - nv < plen;  // generated tokens never see visual keys after an exit
  };

  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const auto& w = weights.layers[l];
    Matrix h = layer_norm_rows(x, w.ln1_gain, w.ln1_bias);
    Matrix q = matmul(h, w.wq), k = matmul(h, w.wk), v = matmul(h, w.wv);
    Matrix mixed(n, d);
    for (std::size_t hd = 0; hd < cfg.num_heads; ++hd) {
      const std::size_t off = hd * dh;
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> s(n, kNegInf);
        for (std::size_t j = 0; j < n; ++j) {
          if (!allowed(l, i, j)) continue;
          double acc = 0.0;
          for (std::size_t p = 0; p < dh; ++p) acc += q(i, off + p) * k(j, off + p);
          s[j] = acc / std::sqrt(static_cast<double>(dh));
        }
        softmax_inplace(s);
        for (std::size_t j = 0; j < n; ++j) {
          if (s[j] == 0.0) continue;
          for (std::size_t p = 0; p < dh; ++p) mixed(i, off + p) += s[j] * v(j, off + p);
        }
      }
    }
    Matrix attn_out = matmul(mixed, w.wo);
    Matrix mid = x;
    for (std::size_t i = 0; i < mid.size(); ++i) mid.flat()[i] += attn_out.flat()[i];
    Matrix h2 = layer_norm_rows(mid, w.ln2_gain, w.ln2_bias);
    Matrix up = matmul(h2, w.w_up);
    add_bias(up, w.b_up);
    for (double& val : up.flat()) val = gelu(val);
    Matrix down = matmul(up, w.w_down);
    add_bias(down, w.b_down);
    for (std::size_t i = 0; i < mid.size(); ++i) mid.flat()[i] += down.flat()[i];
    // Visual rows stop updating once they have exited.
    if (exits && l > *exit_layer) {
      for (std::size_t i = 0; i < nv; ++i) std::copy(x.row(i).begin(), x.row(i).end(), mid.row(i).begin());
    }
    x = std::move(mid);
  }

  Matrix logits(t, cfg.vocab_size);
  for (std::size_t s = 0; s < t; ++s) {
    auto lg = output_logits(weights, x.row(nv + s));
    std::copy(lg.begin(), lg.end(), logits.row(s).begin());
  }
  return logits;
}

Generation generate(const ModelWeights& weights, const ModelInputs& inputs, const GenerateOptions& options,
                    const LayerHook& after_layer) {
  Prefill state(weights, inputs, true);
  while (!state.done()) {
    state.run_layer();
    if (after_layer) after_layer(state);
  }
  return complete_generation(weights, std::move(state), options);
}

Generation complete_generation(const ModelWeights& weights, Prefill state, const GenerateOptions& options) {
  if (options.max_new_tokens == 0) throw InvalidInput("generate: max_new_tokens must be >= 1");
  while (!state.done()) state.run_layer();
  Generation gen;
  gen.live_tokens_per_layer = state.rows_per_layer();
  gen.visual_after_prefill = state.num_visual_live();
  gen.prompt_text_len = state.sequence().text.rows();
  auto result = state.finish();
  gen.exit_layer = result.exit_layer;
  std::vector<double> logits = std::move(result.logits);
  for (;;) {
    const auto tok = static_cast<std::int32_t>(argmax(logits));
    gen.tokens.push_back(tok);
    gen.step_logits.push_back(logits);
    if (gen.tokens.size() >= options.max_new_tokens) break;
    if (options.stop_token && tok == *options.stop_token) break;
    logits = decode_step(weights, result.cache, tok);
  }
  return gen;
}

std::size_t argmax(std::span<const double> v) {
  if (v.empty()) throw InvalidInput("argmax of empty vector");
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace vtexit
