// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

#include "vtexit/vtexit.h"

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <initializer_list>
#include <string>

#include "vtexit/checkpoint.hpp"
#include "vtexit/experiments.hpp"
#include "vtexit/toy_training.hpp"

struct vtx_dataset {
  vtexit::SynthDataset data;
};

struct vtx_model {
  vtexit::ModelWeights weights;
};

struct vtx_gates {
  vtexit::GateWeights gates;
};

namespace {

using nlohmann::json;
using namespace vtexit;

thread_local std::string g_last_error;

template <typename F>
vtx_status guarded(F&& f) {
  try {
    f();
    return VTX_OK;
  } catch (const IoError& e) {
    g_last_error = e.what();
    return VTX_ERR_IO;
  } catch (const InvalidInput& e) {
    g_last_error = e.what();
    return VTX_ERR_INVALID;
  } catch (const json::exception& e) {
    g_last_error = std::string("json: ") + e.what();
    return VTX_ERR_INVALID;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return VTX_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return VTX_ERR_INTERNAL;
  }
}

void need(const void* p, const char* name) {
  if (!p) throw InvalidInput(std::string("argument '") + name + "' must not be null");
}

json parse_object(const char* text, const char* what) {
  if (!text || !*text) return json::object();
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw InvalidInput(std::string(what) + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw InvalidInput(std::string(what) + " must be a JSON object");
  return j;
}

template <typename T>
void read_field(const json& j, const char* key, T& dst) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw InvalidInput(std::string("field '") + key + "' has the wrong type");
  }
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& what) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return it.key() == k; }))
      throw InvalidInput("unknown " + what + " field '" + it.key() + "'");
  }
}

ModelConfig merged_config(const ModelConfig& base, const json& overrides) {
  json j = config_to_json(base);
  for (auto it = overrides.begin(); it != overrides.end(); ++it) {
    if (!j.contains(it.key())) throw InvalidInput("unknown model config field '" + it.key() + "'");
    j[it.key()] = it.value();
  }
  return config_from_json(j);
}

ToyTrainConfig toy_config_from_json(const json& j) {
  reject_unknown(j,
                 {"max_steps", "batch_size", "lr", "warmup_steps", "beta1", "beta2", "adam_eps", "grad_clip",
                  "eval_every", "eval_samples", "target_accuracy", "failure_accuracy", "exit_augment_prob",
                  "exit_augment_min_layer", "label_smoothing", "seed"},
                 "train config");
  ToyTrainConfig c;
  read_field(j, "max_steps", c.max_steps);
  read_field(j, "batch_size", c.batch_size);
  read_field(j, "lr", c.lr);
  read_field(j, "warmup_steps", c.warmup_steps);
  read_field(j, "beta1", c.beta1);
  read_field(j, "beta2", c.beta2);
  read_field(j, "adam_eps", c.adam_eps);
  read_field(j, "grad_clip", c.grad_clip);
  read_field(j, "eval_every", c.eval_every);
  read_field(j, "eval_samples", c.eval_samples);
  read_field(j, "target_accuracy", c.target_accuracy);
  read_field(j, "failure_accuracy", c.failure_accuracy);
  read_field(j, "exit_augment_prob", c.exit_augment_prob);
  read_field(j, "exit_augment_min_layer", c.exit_augment_min_layer);
  read_field(j, "label_smoothing", c.label_smoothing);
  read_field(j, "seed", c.seed);
  return c;
}

const std::vector<SynthTask>& split_of(const vtx_dataset* ds, const char* split) {
  need(ds, "dataset");
  return ds->data.split(split ? split : "test");
}

// The model must have been built for this dataset's grid and vocabulary.
void check_pairing(const vtx_model* m, const vtx_dataset* ds) {
  need(m, "model");
  need(ds, "dataset");
  const auto& c = m->weights.config;
  const auto& spec = ds->data.spec;
  if (c.hidden_dim != spec.hidden_dim || c.num_visual != spec.num_cells() ||
      c.vocab_size < ds->data.vocabulary().size()) {
    throw InvalidInput("model (hidden_dim " + std::to_string(c.hidden_dim) + ", num_visual " +
                       std::to_string(c.num_visual) + ", vocab_size " + std::to_string(c.vocab_size) +
                       ") does not fit the dataset (hidden_dim " + std::to_string(spec.hidden_dim) + ", cells " +
                       std::to_string(spec.num_cells()) + ", vocab " + std::to_string(ds->data.vocabulary().size()) +
                       ")");
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

}  // namespace

extern "C" {

const char* vtx_version(void) { return "0.1.0"; }

const char* vtx_last_error(void) { return g_last_error.c_str(); }

void vtx_string_free(char* s) { std::free(s); }

vtx_status vtx_dataset_generate(const char* spec_json, uint64_t seed, vtx_dataset** out) {
  return guarded([&] {
    need(out, "out");
    const SynthSpec spec = spec_from_json(parse_object(spec_json, "spec"));
    *out = new vtx_dataset{generate_dataset(spec, seed)};
  });
}

vtx_status vtx_dataset_save(const vtx_dataset* ds, const char* dir) {
  return guarded([&] {
    need(ds, "dataset");
    need(dir, "dir");
    save_dataset(dir, ds->data);
  });
}

vtx_status vtx_dataset_load(const char* dir, vtx_dataset** out) {
  return guarded([&] {
    need(dir, "dir");
    need(out, "out");
    *out = new vtx_dataset{load_dataset(dir)};
  });
}

vtx_status vtx_dataset_size(const vtx_dataset* ds, const char* split, size_t* out) {
  return guarded([&] {
    need(out, "out");
    *out = split_of(ds, split).size();
  });
}

void vtx_dataset_free(vtx_dataset* ds) { delete ds; }

vtx_status vtx_model_train(const char* config_json, const vtx_dataset* ds, const char* log_path, vtx_model** out) {
  return guarded([&] {
    need(ds, "dataset");
    need(out, "out");
    const json cfg = parse_object(config_json, "config");
    reject_unknown(cfg, {"model", "train", "seed"}, "config");
    const ModelConfig mc = merged_config(default_model_config(ds->data.spec), cfg.value("model", json::object()));
    ToyTrainConfig tc = toy_config_from_json(cfg.value("train", json::object()));
    read_field(cfg, "seed", tc.seed);
    std::ofstream log;
    if (log_path) {
      log.open(log_path, std::ios::trunc);
      if (!log) throw IoError(std::string("cannot open '") + log_path + "' for writing");
    }
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    ToyTrainResult r = train_toy_model(mc, ds->data, tc, [&](std::size_t step, double loss, const auto* val) {
      if (!val) {
        loss_sum += loss;
        ++loss_count;
        return;
      }
      if (log.is_open()) {
        json line = {{"schema_version", kSchemaVersion}, {"step", step},
                     {"mean_loss", loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0}};
        for (const auto& [kind, acc] : *val) line["val_accuracy"][to_string(kind)] = acc;
        log << line.dump() << '\n';
      }
      loss_sum = 0.0;
      loss_count = 0;
    });
    if (r.failed) {
      std::string acc;
      for (const auto& [kind, a] : r.val_accuracy) acc += " " + to_string(kind) + " " + std::to_string(a);
      throw InvalidInput("training budget exhausted below the failure threshold (val accuracy" + acc + ")");
    }
    *out = new vtx_model{std::move(r.weights)};
  });
}

vtx_status vtx_model_random(const char* model_config_json, uint64_t seed, vtx_model** out) {
  return guarded([&] {
    need(out, "out");
    const ModelConfig mc = merged_config(ModelConfig{}, parse_object(model_config_json, "model config"));
    SeededRng rng(seed);
    *out = new vtx_model{ModelWeights::init_random(mc, rng)};
  });
}

vtx_status vtx_model_save(const vtx_model* m, const char* path) {
  return guarded([&] {
    need(m, "model");
    need(path, "path");
    save_model(path, m->weights);
  });
}

vtx_status vtx_model_load(const char* path, vtx_model** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new vtx_model{load_model(path)};
  });
}

vtx_status vtx_model_config(const vtx_model* m, char** json_out) {
  return guarded([&] {
    need(m, "model");
    need(json_out, "json_out");
    *json_out = dup_string(config_to_json(m->weights.config).dump());
  });
}

vtx_status vtx_model_fingerprint(const vtx_model* m, uint64_t* out) {
  return guarded([&] {
    need(m, "model");
    need(out, "out");
    *out = weights_fingerprint(m->weights);
  });
}

void vtx_model_free(vtx_model* m) { delete m; }

vtx_status vtx_model_generate(const vtx_model* m, const double* visual, size_t num_visual, const int32_t* text,
                              size_t text_len, int32_t exit_layer, size_t max_new_tokens, int32_t* tokens_out,
                              size_t* num_tokens, double* logits_out, size_t logits_len) {
  return guarded([&] {
    need(m, "model");
    need(text, "text");
    need(tokens_out, "tokens_out");
    need(num_tokens, "num_tokens");
    const auto& cfg = m->weights.config;
    if (num_visual > 0) need(visual, "visual");
    if (exit_layer < VTX_NO_LAYER || (exit_layer >= 0 && static_cast<std::size_t>(exit_layer) > cfg.num_layers)) {
      throw InvalidInput("exit_layer must be VTX_NO_LAYER or in [0, L]");
    }
    ModelInputs in;
    in.visual = Matrix(num_visual, cfg.hidden_dim, std::vector<double>(visual, visual + num_visual * cfg.hidden_dim));
    in.text.assign(text, text + text_len);
    GenerateOptions opt;
    opt.max_new_tokens = max_new_tokens;
    const std::size_t layer = exit_layer < 0 ? cfg.num_layers : static_cast<std::size_t>(exit_layer);
    const DyvteResult r = manual_exit(m->weights, in, layer, opt);
    const auto& gen = r.generation;
    std::copy(gen.tokens.begin(), gen.tokens.end(), tokens_out);
    *num_tokens = gen.tokens.size();
    if (logits_out) {
      if (logits_len < cfg.vocab_size) throw InvalidInput("logits_len smaller than vocab_size");
      std::copy(gen.step_logits.front().begin(), gen.step_logits.front().end(), logits_out);
    }
  });
}

vtx_status vtx_stats(const vtx_model* m, const vtx_dataset* ds, const char* split, int32_t exit_layer,
                     const char* stats_csv, const char* entropy_csv) {
  return guarded([&] {
    need(m, "model");
    need(stats_csv, "stats_csv");
    need(entropy_csv, "entropy_csv");
    std::optional<std::size_t> ex;
    if (exit_layer >= 0) ex = static_cast<std::size_t>(exit_layer);
    check_pairing(m, ds);
    const VisualTable table(ds->data.spec);
    const DatasetStats s = collect_stats(m->weights, table, split_of(ds, split), ex);
    write_stats_csv(stats_csv, s.stats, &s.stages);
    write_entropy_csv(entropy_csv, s.entropy, s.entropy_exited ? &*s.entropy_exited : nullptr);
  });
}

vtx_status vtx_sweep(const vtx_model* m, const vtx_dataset* ds, const char* split, const size_t* layers,
                     size_t num_layers, const char* out_csv) {
  return guarded([&] {
    need(m, "model");
    need(layers, "layers");
    need(out_csv, "out_csv");
    check_pairing(m, ds);
    const VisualTable table(ds->data.spec);
    const std::vector<std::size_t> ls(layers, layers + num_layers);
    write_sweep_csv(out_csv, manual_sweep(m->weights, table, split_of(ds, split), ls));
  });
}

vtx_status vtx_label(const vtx_model* m, const vtx_dataset* ds, const char* split, double alpha, const char* out_csv) {
  return guarded([&] {
    need(m, "model");
    need(out_csv, "out_csv");
    if (!(alpha > 0.0)) throw InvalidInput("alpha must be positive");
    check_pairing(m, ds);
    const VisualTable table(ds->data.spec);
    const auto samples = label_tasks(m->weights, table, split_of(ds, split), StatusSelector{},
                                     default_gated_range(m->weights.config), alpha);
    write_labels_csv(out_csv, flatten_labels(samples), alpha);
  });
}

vtx_status vtx_gates_train(const vtx_model* m, const vtx_dataset* ds, const char* labels_csv,
                           const char* train_config_json, const char* log_path, vtx_gates** out) {
  return guarded([&] {
    need(m, "model");
    need(out, "out");
    const json cfg = parse_object(train_config_json, "gate training config");
    reject_unknown(cfg,
                   {"alpha", "lr", "epochs", "sample_fraction", "gate_hidden", "use_bias", "momentum", "seed",
                    "selector", "attn_feature_dim", "first_layer", "last_layer", "split"},
                   "gate training config");
    GateTrainConfig tc;
    read_field(cfg, "alpha", tc.alpha);
    read_field(cfg, "lr", tc.lr);
    read_field(cfg, "epochs", tc.epochs);
    read_field(cfg, "sample_fraction", tc.sample_fraction);
    read_field(cfg, "gate_hidden", tc.gate_hidden);
    read_field(cfg, "use_bias", tc.use_bias);
    read_field(cfg, "momentum", tc.momentum);
    read_field(cfg, "seed", tc.seed);
    std::string selector_spec = "mean_text,last_text";
    std::size_t attn_dim = 576;
    read_field(cfg, "selector", selector_spec);
    read_field(cfg, "attn_feature_dim", attn_dim);
    const StatusSelector selector = StatusSelector::parse(selector_spec, attn_dim);
    LayerRange range = default_gated_range(m->weights.config);
    read_field(cfg, "first_layer", range.first);
    read_field(cfg, "last_layer", range.last);
    if (range.first > range.last || range.last >= m->weights.config.num_layers) {
      throw InvalidInput("field 'first_layer'/'last_layer' out of range");
    }
    std::string split = "train";
    read_field(cfg, "split", split);

    check_pairing(m, ds);
    const VisualTable table(ds->data.spec);
    const auto& tasks = split_of(ds, split.c_str());
    std::vector<LabeledSample> samples =
        labels_csv ? attach_features(m->weights, table, tasks, read_labels_csv(labels_csv), selector, range)
                   : label_tasks(m->weights, table, tasks, selector, range, tc.alpha);
    std::ofstream log;
    if (log_path) {
      log.open(log_path, std::ios::trunc);
      if (!log) throw IoError(std::string("cannot open '") + log_path + "' for writing");
    }
    GateWeights g = train_gates(samples, selector, m->weights.config, range, tc, [&](const GateStepLog& e) {
      if (!log.is_open()) return;
      log << json{{"schema_version", kSchemaVersion}, {"step", e.step}, {"layer", e.layer},
                  {"y", e.y},                         {"p1", e.p1},     {"loss", e.loss}}
                 .dump()
          << '\n';
    });
    *out = new vtx_gates{std::move(g)};
  });
}

vtx_status vtx_gates_save(const vtx_gates* g, const char* path) {
  return guarded([&] {
    need(g, "gates");
    need(path, "path");
    save_gates(path, g->gates);
  });
}

vtx_status vtx_gates_load(const char* path, vtx_gates** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new vtx_gates{load_gates(path)};
  });
}

void vtx_gates_free(vtx_gates* g) { delete g; }

vtx_status vtx_eval(const vtx_model* m, const vtx_gates* g, const vtx_dataset* ds, const char* split,
                    int32_t force_layer, char** json_out) {
  return guarded([&] {
    need(m, "model");
    need(json_out, "json_out");
    check_pairing(m, ds);
    const VisualTable table(ds->data.spec);
    const auto& tasks = split_of(ds, split);
    if (force_layer < VTX_NO_LAYER) throw InvalidInput("force_layer must be VTX_NO_LAYER or >= 0");
    if (force_layer >= 0 && static_cast<std::size_t>(force_layer) > m->weights.config.num_layers) {
      throw InvalidInput("force_layer must be in [0, L]");
    }
    EvalSummary s;
    std::string mode;
    if (force_layer >= 0) {
      const auto l = static_cast<std::size_t>(force_layer);
      s = evaluate_policy(m->weights, table, tasks,
                          ForcedGatePolicy(l < m->weights.config.num_layers ? std::optional(l) : std::nullopt));
      mode = "forced";
    } else if (g) {
      s = evaluate_policy(m->weights, table, tasks, LearnedGatePolicy(g->gates));
      mode = "gates";
    } else {
      s = evaluate_baseline(m->weights, table, tasks);
      mode = "baseline";
    }
    json j = to_json(s);
    j["mode"] = mode;
    j["split"] = split ? split : "test";
    if (force_layer >= 0) j["force_layer"] = force_layer;
    *json_out = dup_string(j.dump(2));
  });
}

vtx_status vtx_compare(const vtx_model* m, const vtx_gates* g, const vtx_dataset* ds, const char* split,
                       size_t prune_layer, double keep_ratio, const char* out_csv) {
  return guarded([&] {
    need(m, "model");
    need(g, "gates");
    need(out_csv, "out_csv");
    if (prune_layer >= m->weights.config.num_layers) throw InvalidInput("prune_layer must be < L");
    if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) throw InvalidInput("keep_ratio must be in (0, 1]");
    check_pairing(m, ds);
    const VisualTable table(ds->data.spec);
    write_compare_csv(out_csv, compare_methods(m->weights, g->gates, table, split_of(ds, split),
                                               PruneConfig{prune_layer, keep_ratio}));
  });
}

}  // extern "C"
