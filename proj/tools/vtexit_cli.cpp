// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

// vtexit command-line driver. Every subcommand goes through the C API.
// Exit codes: 0 success, 2 contract violation, 3 I/O error, 1 otherwise.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "vtexit/vtexit.h"

namespace {

struct Failure {
  int code;
};

void check(vtx_status st, const std::string& what) {
  if (st == VTX_OK) return;
  std::cerr << "vtexit: " << what << ": " << vtx_last_error() << '\n';
  throw Failure{static_cast<int>(st)};
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    std::cerr << "vtexit: cannot open '" << path << "'\n";
    throw Failure{VTX_ERR_IO};
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out || !(out << text)) {
    std::cerr << "vtexit: cannot write '" << path << "'\n";
    throw Failure{VTX_ERR_IO};
  }
}

struct DatasetPtr {
  vtx_dataset* p = nullptr;
  ~DatasetPtr() { vtx_dataset_free(p); }
};
struct ModelPtr {
  vtx_model* p = nullptr;
  ~ModelPtr() { vtx_model_free(p); }
};
struct GatesPtr {
  vtx_gates* p = nullptr;
  ~GatesPtr() { vtx_gates_free(p); }
};

std::vector<size_t> parse_layers(const std::string& s) {
  std::vector<size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      size_t pos = 0;
      const long v = std::stol(item, &pos);
      if (pos != item.size() || v < 0) throw std::invalid_argument(item);
      out.push_back(static_cast<size_t>(v));
    } catch (const std::exception&) {
      std::cerr << "vtexit: --layers: '" << item << "' is not a layer index\n";
      throw Failure{VTX_ERR_INVALID};
    }
  }
  if (out.empty()) {
    std::cerr << "vtexit: --layers is empty\n";
    throw Failure{VTX_ERR_INVALID};
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic visual-token exit lab"};
  app.require_subcommand(1);

  std::string data_dir, ckpt, out, spec_file, config_file, split, gates_file, labels_file, log_file;
  std::string layers_arg, selector = "mean_text,last_text";
  std::vector<std::string> stats_out;
  uint64_t seed = 0;
  int exit_layer = VTX_NO_LAYER, force_layer = VTX_NO_LAYER;
  double alpha = 1.03, lr = 1e-3, momentum = 0.0, keep_ratio = 0.5, sample_fraction = 1.0;
  size_t epochs = 1, gate_hidden = 64, prune_layer = 2, attn_dim = 576;
  bool no_fire = false, use_bias = false;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--spec", spec_file, "spec JSON (defaults if omitted)");
  gen->add_option("--seed", seed, "dataset seed")->required();
  gen->add_option("--out", out, "output directory")->required();

  auto* train = app.add_subcommand("train-model", "train the toy transformer");
  train->add_option("--config", config_file, "training config JSON");
  train->add_option("--data", data_dir)->required();
  train->add_option("--out", out, "checkpoint path")->required();
  train->add_option("--log", log_file, "JSON-lines training log");

  auto* stats = app.add_subcommand("stats", "attention block statistics and entropies");
  stats->add_option("--ckpt", ckpt)->required();
  stats->add_option("--data", data_dir)->required();
  stats->add_option("--out", stats_out, "stats.csv entropy.csv")->expected(2)->required();
  stats->add_option("--exit-layer", exit_layer, "also record entropies with exit after this layer");
  stats->add_option("--split", split, "dataset split")->default_val("test");

  auto* sweep = app.add_subcommand("sweep", "manual exit sweep");
  sweep->add_option("--ckpt", ckpt)->required();
  sweep->add_option("--data", data_dir)->required();
  sweep->add_option("--layers", layers_arg, "comma-separated exit layers")->required();
  sweep->add_option("--out", out, "sweep.csv")->default_val("sweep.csv");
  sweep->add_option("--split", split)->default_val("test");

  auto* label = app.add_subcommand("label", "weak exit labels for every gated layer");
  label->add_option("--ckpt", ckpt)->required();
  label->add_option("--data", data_dir)->required();
  label->add_option("--alpha", alpha)->default_val(1.03);
  label->add_option("--out", out, "labels.csv")->default_val("labels.csv");
  label->add_option("--split", split)->default_val("train");

  auto* tgate = app.add_subcommand("train-gate", "train exit gates");
  tgate->add_option("--ckpt", ckpt)->required();
  tgate->add_option("--data", data_dir)->required();
  tgate->add_option("--labels", labels_file, "labels.csv from `label` (labels on the fly if omitted)");
  tgate->add_option("--selector", selector)->default_val("mean_text,last_text");
  tgate->add_option("--attn-feature-dim", attn_dim)->default_val(576);
  tgate->add_option("--alpha", alpha)->default_val(1.03);
  tgate->add_option("--lr", lr)->default_val(1e-3);
  tgate->add_option("--momentum", momentum)->default_val(0.0);
  tgate->add_option("--epochs", epochs)->default_val(1);
  tgate->add_option("--sample-fraction", sample_fraction)->default_val(1.0);
  tgate->add_option("--gate-hidden", gate_hidden)->default_val(64);
  tgate->add_flag("--bias", use_bias, "give the gate layers biases");
  tgate->add_option("--seed", seed)->default_val(0);
  tgate->add_option("--split", split)->default_val("train");
  tgate->add_option("--out", out, "gate checkpoint")->required();
  tgate->add_option("--log", log_file, "JSON-lines step log");

  auto* eval = app.add_subcommand("eval", "accuracy, exit histogram and FLOPs report");
  eval->add_option("--ckpt", ckpt)->required();
  eval->add_option("--data", data_dir)->required();
  eval->add_option("--gates", gates_file);
  auto* force_opt = eval->add_option("--force-layer", force_layer, "force the exit after this layer (L = never)");
  eval->add_flag("--no-fire", no_fire, "gates never fire")->excludes(force_opt);
  eval->add_option("--split", split)->default_val("test");
  eval->add_option("--out", out, "write the JSON report here as well as stdout");

  auto* compare = app.add_subcommand("compare", "DyVTE versus attention-rank pruning");
  compare->add_option("--ckpt", ckpt)->required();
  compare->add_option("--data", data_dir)->required();
  compare->add_option("--gates", gates_file)->required();
  compare->add_option("--prune-layer", prune_layer)->default_val(2);
  compare->add_option("--keep-ratio", keep_ratio)->default_val(0.5);
  compare->add_option("--split", split)->default_val("test");
  compare->add_option("--out", out, "compare.csv")->default_val("compare.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : VTX_ERR_INVALID;
  }

  try {
    if (*gen) {
      const std::string spec = spec_file.empty() ? "{}" : read_text(spec_file);
      DatasetPtr ds;
      check(vtx_dataset_generate(spec.c_str(), seed, &ds.p), "gen-data");
      check(vtx_dataset_save(ds.p, out.c_str()), "gen-data");
      return 0;
    }

    DatasetPtr ds;
    check(vtx_dataset_load(data_dir.c_str(), &ds.p), "loading dataset");

    if (*train) {
      const std::string cfg = config_file.empty() ? "{}" : read_text(config_file);
      ModelPtr m;
      check(vtx_model_train(cfg.c_str(), ds.p, log_file.empty() ? nullptr : log_file.c_str(), &m.p), "train-model");
      check(vtx_model_save(m.p, out.c_str()), "train-model");
      uint64_t fp = 0;
      check(vtx_model_fingerprint(m.p, &fp), "train-model");
      std::printf("weights fingerprint %016llx\n", static_cast<unsigned long long>(fp));
      return 0;
    }

    ModelPtr m;
    check(vtx_model_load(ckpt.c_str(), &m.p), "loading checkpoint");

    if (*stats) {
      check(vtx_stats(m.p, ds.p, split.c_str(), exit_layer, stats_out[0].c_str(), stats_out[1].c_str()), "stats");
    } else if (*sweep) {
      const auto layers = parse_layers(layers_arg);
      check(vtx_sweep(m.p, ds.p, split.c_str(), layers.data(), layers.size(), out.c_str()), "sweep");
    } else if (*label) {
      check(vtx_label(m.p, ds.p, split.c_str(), alpha, out.c_str()), "label");
    } else if (*tgate) {
      const nlohmann::json cfg = {{"selector", selector},       {"attn_feature_dim", attn_dim},
                                  {"alpha", alpha},             {"lr", lr},
                                  {"momentum", momentum},       {"epochs", epochs},
                                  {"sample_fraction", sample_fraction}, {"gate_hidden", gate_hidden},
                                  {"use_bias", use_bias},       {"seed", seed},
                                  {"split", split}};
      GatesPtr g;
      check(vtx_gates_train(m.p, ds.p, labels_file.empty() ? nullptr : labels_file.c_str(), cfg.dump().c_str(),
                            log_file.empty() ? nullptr : log_file.c_str(), &g.p),
            "train-gate");
      check(vtx_gates_save(g.p, out.c_str()), "train-gate");
    } else if (*eval) {
      GatesPtr g;
      if (!gates_file.empty()) check(vtx_gates_load(gates_file.c_str(), &g.p), "loading gates");
      if (no_fire) {
        // A forced exit "after layer L" never happens.
        char* cfg_json = nullptr;
        check(vtx_model_config(m.p, &cfg_json), "eval");
        const auto layers = nlohmann::json::parse(cfg_json).at("num_layers").get<int>();
        vtx_string_free(cfg_json);
        force_layer = layers;
      }
      char* report = nullptr;
      check(vtx_eval(m.p, g.p, ds.p, split.c_str(), force_layer, &report), "eval");
      const std::string text = report;
      vtx_string_free(report);
      std::cout << text << '\n';
      if (!out.empty()) write_text(out, text + "\n");
    } else if (*compare) {
      GatesPtr g;
      check(vtx_gates_load(gates_file.c_str(), &g.p), "loading gates");
      check(vtx_compare(m.p, g.p, ds.p, split.c_str(), prune_layer, keep_ratio, out.c_str()), "compare");
    }
  } catch (const Failure& f) {
    return f.code;
  }
  return 0;
}
