// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

#include "vtexit/experiments.hpp"

#include <fstream>

#include "vtexit/checkpoint.hpp"

namespace vtexit {

namespace {

void add_record(EvalGroup& g, const EvalRecord& r, std::size_t num_layers) {
  ++g.count;
  g.correct += r.correct ? 1 : 0;
  g.mean_exit_layer += static_cast<double>(r.exit_layer.value_or(num_layers));
  ++g.exit_histogram[r.exit_layer ? std::to_string(*r.exit_layer) : "none"];
  g.flops = g.count == 1 ? r.flops : accumulate_reports({g.flops, r.flops});
}

void finalize(EvalGroup& g) {
  if (g.count == 0) return;
  g.accuracy = static_cast<double>(g.correct) / static_cast<double>(g.count);
  g.mean_exit_layer /= static_cast<double>(g.count);
}

nlohmann::json group_json(const EvalGroup& g) {
  return {{"count", g.count},
          {"accuracy", g.accuracy},
          {"mean_exit_layer", g.mean_exit_layer},
          {"exit_histogram", g.exit_histogram},
          {"flops", to_json(g.flops)}};
}

}  // namespace

EvalSummary evaluate(const ModelWeights& weights, const VisualTable& table, const std::vector<SynthTask>& tasks,
                     const SampleRunner& run) {
  EvalSummary s;
  s.num_layers = weights.config.num_layers;
  for (const auto& task : tasks) {
    DyvteResult res = run(task_inputs(table, task));
    EvalRecord r;
    r.sample_id = task.id;
    r.kind = task.kind;
    r.correct = !res.generation.tokens.empty() && res.generation.tokens.front() == task.answer;
    r.exit_layer = res.generation.exit_layer;
    r.flops = res.flops;
    add_record(s.all, r, s.num_layers);
    add_record(s.per_task[task.kind], r, s.num_layers);
    s.records.push_back(std::move(r));
  }
  finalize(s.all);
  for (auto& [kind, g] : s.per_task) finalize(g);
  return s;
}

EvalSummary evaluate_baseline(const ModelWeights& weights, const VisualTable& table,
                              const std::vector<SynthTask>& tasks) {
  return evaluate_policy(weights, table, tasks, ForcedGatePolicy(std::nullopt));
}

EvalSummary evaluate_policy(const ModelWeights& weights, const VisualTable& table, const std::vector<SynthTask>& tasks,
                            const ExitPolicy& policy) {
  return evaluate(weights, table, tasks,
                  [&](const ModelInputs& in) { return run_with_dyvte(weights, policy, in); });
}

nlohmann::json to_json(const EvalSummary& s) {
  nlohmann::json per_task = nlohmann::json::object();
  for (const auto& [kind, g] : s.per_task) per_task[to_string(kind)] = group_json(g);
  nlohmann::json j = group_json(s.all);
  j["schema_version"] = kSchemaVersion;
  j["num_layers"] = s.num_layers;
  j["per_task"] = per_task;
  return j;
}

std::vector<SweepPoint> manual_sweep(const ModelWeights& weights, const VisualTable& table,
                                     const std::vector<SynthTask>& tasks, const std::vector<std::size_t>& layers) {
  std::vector<SweepPoint> out;
  for (std::size_t l : layers) {
    if (l > weights.config.num_layers) throw InvalidInput("sweep layer " + std::to_string(l) + " beyond L");
    const EvalSummary s = evaluate_policy(weights, table, tasks, ForcedGatePolicy(l));
    const double n = static_cast<double>(std::max<std::size_t>(1, s.all.count));
    out.push_back({static_cast<double>(l), s.all.accuracy, static_cast<double>(s.all.flops.total_with_exit) / n});
  }
  return out;
}

DatasetStats collect_stats(const ModelWeights& weights, const VisualTable& table, const std::vector<SynthTask>& tasks,
                           std::optional<std::size_t> exit_layer) {
  if (tasks.empty()) throw InvalidInput("collect_stats: no tasks");
  std::vector<std::vector<AttentionBlockStats>> stats;
  std::vector<std::vector<EntropyProfile>> ent, ent_exit;
  for (const auto& task : tasks) {
    const ModelInputs in = task_inputs(table, task);
    const PrefillResult base = prefill(weights, in, std::nullopt, true);
    stats.push_back(block_stats(base.trace, in.visual.rows()));
    ent.push_back(entropy_profile(base.trace, in.visual.rows()));
    if (exit_layer) {
      const PrefillResult ex = prefill(weights, in, exit_layer, true);
      ent_exit.push_back(entropy_profile(ex.trace, in.visual.rows()));
    }
  }
  DatasetStats out;
  out.stats = average_stats(stats);
  out.stages = segment_stages(out.stats);
  out.entropy = average_entropy(ent);
  if (exit_layer) out.entropy_exited = average_entropy(ent_exit);
  return out;
}

std::vector<LabeledSample> label_tasks(const ModelWeights& weights, const VisualTable& table,
                                       const std::vector<SynthTask>& tasks, const StatusSelector& selector,
                                       LayerRange range, double alpha) {
  std::vector<LabeledSample> out;
  out.reserve(tasks.size());
  for (const auto& task : tasks) {
    out.push_back(label_sample(weights, task_inputs(table, task), task.id, selector, range, alpha));
  }
  return out;
}

std::vector<WeakLabel> flatten_labels(const std::vector<LabeledSample>& samples) {
  std::vector<WeakLabel> out;
  for (const auto& s : samples) out.insert(out.end(), s.labels.begin(), s.labels.end());
  return out;
}

std::vector<LabeledSample> attach_features(const ModelWeights& weights, const VisualTable& table,
                                           const std::vector<SynthTask>& tasks, const std::vector<WeakLabel>& labels,
                                           const StatusSelector& selector, LayerRange range) {
  std::map<std::uint64_t, const SynthTask*> by_id;
  for (const auto& t : tasks) by_id[t.id] = &t;
  std::map<std::uint64_t, LabeledSample> grouped;
  for (const auto& l : labels) {
    if (!range.contains(l.layer)) continue;
    auto& s = grouped[l.sample_id];
    s.sample_id = l.sample_id;
    if (s.labels.empty()) s.labels.resize(range.size());
    s.labels[l.layer - range.first] = l;
  }
  std::vector<LabeledSample> out;
  for (auto& [id, s] : grouped) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw InvalidInput("label references unknown sample_id " + std::to_string(id));
    Prefill state(weights, task_inputs(table, *it->second), selector.needs_attention());
    while (!state.done()) {
      state.run_layer();
      if (range.contains(state.layers_done() - 1)) s.features.push_back(token_status(selector, state));
    }
    for (std::size_t i = 0; i < s.labels.size(); ++i) {
      if (s.labels[i].layer != range.first + i) {
        throw InvalidInput("labels for sample " + std::to_string(id) + " do not cover the gated range");
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<CompareRow> compare_methods(const ModelWeights& weights, const GateWeights& gates, const VisualTable& table,
                                        const std::vector<SynthTask>& tasks, const PruneConfig& prune) {
  const LearnedGatePolicy policy(gates);
  auto row = [&](const std::string& name, const EvalSummary& s) {
    return CompareRow{name, s.all.accuracy, static_cast<double>(s.all.flops.total_with_exit) * 1e-12,
                      s.all.flops.reduction_pct, s.all.mean_exit_layer};
  };
  std::vector<CompareRow> rows;
  rows.push_back(row("baseline", evaluate_baseline(weights, table, tasks)));
  rows.push_back(row("dyvte", evaluate_policy(weights, table, tasks, policy)));
  rows.push_back(row("attn_rank_prune", evaluate(weights, table, tasks, [&](const ModelInputs& in) {
                       return attn_rank_prune(weights, in, prune);
                     })));
  rows.push_back(row("dyvte+attn_rank_prune", evaluate(weights, table, tasks, [&](const ModelInputs& in) {
                       return combined(weights, policy, in, prune);
                     })));
  return rows;
}

void write_compare_csv(const std::filesystem::path& path, const std::vector<CompareRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.precision(12);
  out << "# schema_version=" << kSchemaVersion << "\nmethod,accuracy,tflops,reduction_pct,mean_exit_layer\n";
  for (const auto& r : rows) {
    out << r.method << ',' << r.accuracy << ',' << r.tflops << ',' << r.reduction_pct << ',' << r.mean_exit_layer
        << '\n';
  }
}

}  // namespace vtexit
