// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

#include "vtexit/synth.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "vtexit/checkpoint.hpp"

namespace vtexit {

using nlohmann::json;

std::string to_string(TaskKind kind) { return kind == TaskKind::Lookup ? "lookup" : "twohop"; }

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "lookup") return TaskKind::Lookup;
  if (s == "twohop") return TaskKind::TwoHop;
  throw InvalidInput("field 'task' has unknown value '" + s + "'");
}

void SynthSpec::validate() const {
  if (num_symbols < 2) throw InvalidInput("spec: num_symbols must be >= 2");
  if (grid_size < 2) throw InvalidInput("spec: grid_size must be >= 2");
  if (hidden_dim == 0) throw InvalidInput("spec: hidden_dim must be positive");
  if (twohop_fraction < 0.0 || twohop_fraction > 1.0) throw InvalidInput("spec: twohop_fraction must be in [0,1]");
  if (twohop_fraction > 0.0 && num_symbols > num_cells()) {
    throw InvalidInput("spec: two-hop tasks need num_symbols <= grid_size^2");
  }
}

json spec_to_json(const SynthSpec& s) {
  return {{"schema_version", kSchemaVersion}, {"grid_size", s.grid_size},   {"num_symbols", s.num_symbols},
          {"hidden_dim", s.hidden_dim},       {"twohop_fraction", s.twohop_fraction},
          {"num_train", s.num_train},         {"num_val", s.num_val},       {"num_test", s.num_test},
          {"embed_seed", s.embed_seed}};
}

SynthSpec spec_from_json(const json& j) {
  SynthSpec s;
  auto get = [&j](const char* key, auto& dst) {
    if (!j.contains(key)) return;
    try {
      dst = j.at(key).get<std::decay_t<decltype(dst)>>();
    } catch (const json::exception&) {
      throw InvalidInput(std::string("field '") + key + "' has the wrong type");
    }
  };
  get("grid_size", s.grid_size);
  get("num_symbols", s.num_symbols);
  get("hidden_dim", s.hidden_dim);
  get("twohop_fraction", s.twohop_fraction);
  get("num_train", s.num_train);
  get("num_val", s.num_val);
  get("num_test", s.num_test);
  get("embed_seed", s.embed_seed);
  s.validate();
  return s;
}

VisualTable::VisualTable(const SynthSpec& spec) {
  SeededRng rng(spec.embed_seed);
  symbols_ = rng.normal_matrix(spec.num_symbols, spec.hidden_dim, 1.0);
  // Cell code = row code + column code.
  const Matrix rows = rng.normal_matrix(spec.grid_size, spec.hidden_dim, 0.7);
  const Matrix cols = rng.normal_matrix(spec.grid_size, spec.hidden_dim, 0.7);
  cells_ = Matrix(spec.num_cells(), spec.hidden_dim);
  for (std::size_t r = 0; r < spec.grid_size; ++r) {
    for (std::size_t c = 0; c < spec.grid_size; ++c) {
      auto dst = cells_.row(r * spec.grid_size + c);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = rows(r, j) + cols(c, j);
    }
  }
}

Matrix VisualTable::embed(const std::vector<int>& grid) const {
  if (grid.size() != cells_.rows()) throw InvalidInput("grid size does not match spec");
  Matrix out(grid.size(), cells_.cols());
  for (std::size_t c = 0; c < grid.size(); ++c) {
    if (grid[c] < 0 || static_cast<std::size_t>(grid[c]) >= symbols_.rows()) {
      throw InvalidInput("grid symbol out of range");
    }
    auto sym = symbols_.row(static_cast<std::size_t>(grid[c]));
    auto cell = cells_.row(c);
    auto dst = out.row(c);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = sym[j] + cell[j];
  }
  return out;
}

const std::vector<SynthTask>& SynthDataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw InvalidInput("unknown split '" + name + "'");
}

std::size_t Vocabulary::cell_of(const std::vector<std::int32_t>& question) const {
  if (question.size() != 4) throw InvalidInput("question must be [BOS, TASK, ROW, COL]");
  const std::int64_t r = question[2] - row(0), c = question[3] - col(0);
  const auto g = static_cast<std::int64_t>(grid_size);
  if (r < 0 || r >= g || c < 0 || c >= g) throw InvalidInput("question does not name a grid cell");
  return static_cast<std::size_t>(r * g + c);
}

std::int32_t solve_task(const SynthSpec& spec, TaskKind kind, const std::vector<int>& grid, std::size_t cell) {
  const Vocabulary vocab{spec.grid_size, spec.num_symbols};
  const int first = grid.at(cell);
  if (kind == TaskKind::Lookup) return vocab.symbol(static_cast<std::size_t>(first));
  return vocab.symbol(static_cast<std::size_t>(grid.at(static_cast<std::size_t>(first))));
}

SynthDataset generate_dataset(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  SynthDataset data;
  data.spec = spec;
  data.seed = seed;
  SeededRng rng(seed);
  const Vocabulary vocab = data.vocabulary();
  std::set<std::vector<int>> seen;  // keeps splits disjoint
  std::uint64_t next_id = 0;

  auto draw = [&]() {
    for (;;) {
      SynthTask task;
      task.kind = rng.uniform() < spec.twohop_fraction ? TaskKind::TwoHop : TaskKind::Lookup;
      task.grid.resize(spec.num_cells());
      for (int& g : task.grid) g = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(spec.num_symbols) - 1));
      const auto k = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(spec.num_cells()) - 1));
      // A two-hop cell holding its own index would answer with the queried
      // cell's index, which the question already names. Redraw it from the
      // other symbols.
      if (task.kind == TaskKind::TwoHop && task.grid[k] == static_cast<int>(k)) {
        const auto r = rng.uniform_int(0, static_cast<std::int64_t>(spec.num_symbols) - 2);
        task.grid[k] = static_cast<int>(r >= static_cast<std::int64_t>(k) ? r + 1 : r);
      }
      std::vector<int> key = task.grid;
      key.push_back(task.kind == TaskKind::Lookup ? 0 : 1);
      key.push_back(static_cast<int>(k));
      if (!seen.insert(key).second) continue;
      task.id = next_id++;
      task.question = {Vocabulary::kBos, task.kind == TaskKind::Lookup ? Vocabulary::kLookup : Vocabulary::kTwoHop,
                       vocab.row(k / spec.grid_size), vocab.col(k % spec.grid_size)};
      task.answer = solve_task(spec, task.kind, task.grid, k);
      task.fusion_depth_hint = task.kind == TaskKind::Lookup ? 1 : 2;
      return task;
    }
  };
  for (std::size_t i = 0; i < spec.num_train; ++i) data.train.push_back(draw());
  for (std::size_t i = 0; i < spec.num_val; ++i) data.val.push_back(draw());
  for (std::size_t i = 0; i < spec.num_test; ++i) data.test.push_back(draw());
  return data;
}

ModelInputs task_inputs(const VisualTable& table, const SynthTask& task) {
  return ModelInputs{table.embed(task.grid), task.question};
}

ModelConfig default_model_config(const SynthSpec& spec) {
  ModelConfig c;
  c.hidden_dim = spec.hidden_dim;
  c.vocab_size = Vocabulary{spec.grid_size, spec.num_symbols}.size();
  c.num_visual = spec.num_cells();
  c.max_text = 8;
  return c;
}

namespace {

json task_to_json(const SynthTask& t) {
  return {{"schema_version", kSchemaVersion}, {"id", t.id}, {"task", to_string(t.kind)}, {"grid", t.grid},
          {"question", t.question},           {"answer", t.answer}, {"fusion_depth_hint", t.fusion_depth_hint}};
}

SynthTask task_from_json(const json& j, const SynthSpec& spec) {
  SynthTask t;
  try {
    if (j.at("schema_version").get<int>() != kSchemaVersion) throw InvalidInput("field 'schema_version' unsupported");
    t.id = j.at("id").get<std::uint64_t>();
    t.kind = task_kind_from_string(j.at("task").get<std::string>());
    t.grid = j.at("grid").get<std::vector<int>>();
    t.question = j.at("question").get<std::vector<std::int32_t>>();
    t.answer = j.at("answer").get<std::int32_t>();
    t.fusion_depth_hint = j.value("fusion_depth_hint", std::size_t{1});
  } catch (const json::out_of_range& e) {
    throw InvalidInput(std::string("dataset record missing field: ") + e.what());
  } catch (const json::type_error& e) {
    throw InvalidInput(std::string("dataset record has a mistyped field: ") + e.what());
  }
  if (t.grid.size() != spec.num_cells()) throw InvalidInput("field 'grid' has wrong length");
  return t;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<SynthTask>& tasks) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const auto& t : tasks) out << task_to_json(t).dump() << '\n';
}

std::vector<SynthTask> read_jsonl(const std::filesystem::path& path, const SynthSpec& spec) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<SynthTask> tasks;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      tasks.push_back(task_from_json(json::parse(line), spec));
    } catch (const json::parse_error& e) {
      throw InvalidInput(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return tasks;
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const SynthDataset& data) {
  std::filesystem::create_directories(dir);
  json spec = spec_to_json(data.spec);
  spec["seed"] = data.seed;
  std::ofstream out(dir / "spec.json", std::ios::trunc);
  if (!out) throw IoError("cannot write '" + (dir / "spec.json").string() + "'");
  out << spec.dump(2) << '\n';
  write_jsonl(dir / "train.jsonl", data.train);
  write_jsonl(dir / "val.jsonl", data.val);
  write_jsonl(dir / "test.jsonl", data.test);
}

SynthDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "spec.json");
  if (!in) throw IoError("cannot open '" + (dir / "spec.json").string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw InvalidInput("spec.json: " + std::string(e.what()));
  }
  SynthDataset data;
  data.spec = spec_from_json(j);
  data.seed = j.value("seed", std::uint64_t{0});
  data.train = read_jsonl(dir / "train.jsonl", data.spec);
  data.val = read_jsonl(dir / "val.jsonl", data.spec);
  data.test = read_jsonl(dir / "test.jsonl", data.spec);
  return data;
}

SynthTask relabel_grid(const SynthSpec& spec, const SynthTask& task, SeededRng& rng) {
  std::vector<int> perm(spec.num_symbols);
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
  bool derangement = false;
  while (!derangement) {
    rng.shuffle(perm);
    derangement = true;
    for (std::size_t i = 0; i < perm.size(); ++i) derangement = derangement && perm[i] != static_cast<int>(i);
  }
  SynthTask out = task;
  for (int& g : out.grid) g = perm[static_cast<std::size_t>(g)];
  const Vocabulary vocab{spec.grid_size, spec.num_symbols};
  out.answer = solve_task(spec, task.kind, out.grid, vocab.cell_of(task.question));
  return out;
}

std::vector<SynthTask> filter_kind(const std::vector<SynthTask>& tasks, TaskKind kind) {
  std::vector<SynthTask> out;
  for (const auto& t : tasks)
    if (t.kind == kind) out.push_back(t);
  return out;
}

ModelWeights forced_mask_model(const ModelConfig& config, std::size_t onset_layer, std::uint64_t seed) {
  config.validate();
  if (config.hidden_dim < 4) throw InvalidInput("forced_mask_model: hidden_dim must be >= 4");
  constexpr double kFlag = 10.0;   // modality flag amplitude on dims 0 and 1
  constexpr double kBlock = 1e5;   // query weight on the flag key
  SeededRng rng(seed);
  ModelWeights w = ModelWeights::init_random(config, rng);
  const std::size_t d = config.hidden_dim, dh = config.head_dim();

  for (std::size_t v = 0; v < config.vocab_size; ++v) {
    w.token_embedding(v, 0) = 0.0;
    w.token_embedding(v, 1) = 0.0;
  }
  for (std::size_t pos = 0; pos < config.max_positions(); ++pos) {
    const double sign = pos < config.num_visual ? 1.0 : -1.0;
    w.position_embedding(pos, 0) = sign * kFlag;
    w.position_embedding(pos, 1) = -sign * kFlag;
  }
  // No block writes to the flag dims, so the sign of x0 - x1 survives.
  for (auto& lw : w.layers) {
    for (std::size_t r = 0; r < d; ++r) lw.wo(r, 0) = lw.wo(r, 1) = 0.0;
    for (std::size_t r = 0; r < config.ffn_dim; ++r) lw.w_down(r, 0) = lw.w_down(r, 1) = 0.0;
    lw.b_down[0] = lw.b_down[1] = 0.0;
  }
  for (std::size_t l = onset_layer + 1; l < config.num_layers; ++l) {
    auto& lw = w.layers[l];
    // Normed dim 2 becomes the constant 1 for every row.
    lw.ln1_gain[2] = 0.0;
    lw.ln1_bias[2] = 1.0;
    for (std::size_t h = 0; h < config.num_heads; ++h) {
      const std::size_t c = h * dh;
      for (std::size_t r = 0; r < d; ++r) lw.wq(r, c) = lw.wk(r, c) = 0.0;
      lw.wq(2, c) = -kBlock;
      lw.wk(0, c) = 1.0;
      lw.wk(1, c) = -1.0;
    }
  }
  return w;
}

}  // namespace vtexit
