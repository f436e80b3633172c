// Copyright 2026 The vtexit Authors
// SPDX-License-Identifier: Apache-2.0

#include "vtexit/attn_stats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "vtexit/checkpoint.hpp"

namespace vtexit {

namespace {

constexpr double kMassFloor = 1e-12;

struct Moments {
  double sum = 0.0, sum_sq = 0.0;
  std::size_t count = 0;
  void add(double v) {
    sum += v;
    sum_sq += v * v;
    ++count;
  }
  double mean() const { return sum / static_cast<double>(count); }
  double var() const { return std::max(0.0, sum_sq / static_cast<double>(count) - mean() * mean()); }
};

void check_layer(const LayerTrace& lt) {
  if (lt.attention.rows() != lt.attention.cols() || lt.attention.rows() <= lt.num_visual) {
    throw InvalidInput("attention trace needs a square matrix with at least one text query");
  }
}

}  // namespace

AttentionBlockStats layer_block_stats(const LayerTrace& lt) {
  check_layer(lt);
  const std::size_t n = lt.attention.rows(), nv = lt.num_visual;
  Moments vis, cross, text;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      const double a = lt.attention(i, j);
      if (i < nv) vis.add(a);
      else if (j < nv) cross.add(a);
      else text.add(a);
    }
  }
  AttentionBlockStats s;
  s.layer = lt.layer;
  if (vis.count > 0) {
    s.vis_self_mean = vis.mean();
    s.vis_self_var = vis.var();
  }
  if (cross.count > 0) {
    s.cross_mean = cross.mean();
    s.cross_var = cross.var();
  }
  s.text_self_mean = text.mean();
  s.text_self_var = text.var();
  return s;
}

std::vector<AttentionBlockStats> block_stats(const Trace& trace, std::size_t num_visual) {
  if (!trace.layers.empty() && trace.layers.front().num_visual != num_visual) {
    throw InvalidInput("block_stats: num_visual does not match the trace");
  }
  std::vector<AttentionBlockStats> out;
  for (const auto& lt : trace.layers) out.push_back(layer_block_stats(lt));
  return out;
}

double renormalized_entropy_bits(std::span<const double> weights) {
  double mass = 0.0;
  for (double w : weights) mass += w;
  if (mass < kMassFloor) return 0.0;
  double h = 0.0;
  for (double w : weights) {
    if (w <= 0.0) continue;
    const double p = w / mass;
    h -= p * std::log2(p);
  }
  return std::max(0.0, h);
}

EntropyProfile layer_entropy(const LayerTrace& lt) {
  check_layer(lt);
  const std::size_t n = lt.attention.rows(), nv = lt.num_visual;
  double cross_sum = 0.0, text_sum = 0.0;
  for (std::size_t i = nv; i < n; ++i) {
    auto row = lt.attention.row(i);
    if (nv > 0) cross_sum += renormalized_entropy_bits(row.subspan(0, nv));
    text_sum += renormalized_entropy_bits(row.subspan(nv, i - nv + 1));
  }
  const double queries = static_cast<double>(n - nv);
  EntropyProfile e;
  e.layer = lt.layer;
  if (nv > 0) e.cross_entropy_bits = cross_sum / queries;
  e.text_self_entropy_bits = text_sum / queries;
  return e;
}

std::vector<EntropyProfile> entropy_profile(const Trace& trace, std::size_t num_visual) {
  if (!trace.layers.empty() && trace.layers.front().num_visual != num_visual) {
    throw InvalidInput("entropy_profile: num_visual does not match the trace");
  }
  std::vector<EntropyProfile> out;
  for (const auto& lt : trace.layers) out.push_back(layer_entropy(lt));
  return out;
}

StageSegmentation segment_stages(std::span<const double> c, const StageThresholds& th) {
  const std::size_t L = c.size();
  if (L < 4) throw InvalidInput("segment_stages: need at least 4 layers");
  StageSegmentation seg;
  std::optional<std::size_t> b1;
  double running_max = c[0];
  for (std::size_t k = 1; k < L; ++k) {
    running_max = std::max(running_max, c[k]);
    if (c[k] < th.fall_fraction * running_max) {
      b1 = k;
      break;
    }
  }
  if (!b1) return {1, L - 1, true};
  if (*b1 >= L - 1) return {L - 2, L - 1, true};
  double stage_min = c[*b1];
  for (std::size_t k = *b1 + 1; k < L; ++k) {
    if (c[k] > th.rebound_factor * stage_min) return {*b1, k, false};
    stage_min = std::min(stage_min, c[k]);
  }
  return {*b1, L - 1, true};
}

StageSegmentation segment_stages(const std::vector<AttentionBlockStats>& stats, const StageThresholds& th) {
  std::vector<double> c;
  for (const auto& s : stats) c.push_back(s.cross_mean.value_or(0.0));
  return segment_stages(c, th);
}

std::vector<AttentionBlockStats> average_stats(const std::vector<std::vector<AttentionBlockStats>>& samples) {
  if (samples.empty()) return {};
  const std::size_t L = samples.front().size();
  std::vector<AttentionBlockStats> out(L);
  for (std::size_t l = 0; l < L; ++l) {
    Moments vm, vv, cm, cv, tm, tv;
    for (const auto& s : samples) {
      const auto& st = s.at(l);
      if (st.vis_self_mean) {
        vm.add(*st.vis_self_mean);
        vv.add(*st.vis_self_var);
      }
      if (st.cross_mean) {
        cm.add(*st.cross_mean);
        cv.add(*st.cross_var);
      }
      tm.add(st.text_self_mean);
      tv.add(st.text_self_var);
    }
    out[l].layer = samples.front()[l].layer;
    if (vm.count) {
      out[l].vis_self_mean = vm.mean();
      out[l].vis_self_var = vv.mean();
    }
    if (cm.count) {
      out[l].cross_mean = cm.mean();
      out[l].cross_var = cv.mean();
    }
    out[l].text_self_mean = tm.mean();
    out[l].text_self_var = tv.mean();
  }
  return out;
}

std::vector<EntropyProfile> average_entropy(const std::vector<std::vector<EntropyProfile>>& samples) {
  if (samples.empty()) return {};
  const std::size_t L = samples.front().size();
  std::vector<EntropyProfile> out(L);
  for (std::size_t l = 0; l < L; ++l) {
    Moments cross, text;
    for (const auto& s : samples) {
      if (s.at(l).cross_entropy_bits) cross.add(*s.at(l).cross_entropy_bits);
      text.add(s.at(l).text_self_entropy_bits);
    }
    out[l].layer = samples.front()[l].layer;
    if (cross.count) out[l].cross_entropy_bits = cross.mean();
    out[l].text_self_entropy_bits = text.mean();
  }
  return out;
}

void write_stats_csv(const std::filesystem::path& path, const std::vector<AttentionBlockStats>& stats,
                     const StageSegmentation* stages) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.precision(12);
  out << "# schema_version=" << kSchemaVersion;
  if (stages) {
    out << " boundary_1=" << stages->boundary_1 << " boundary_2=" << stages->boundary_2
        << " degenerate=" << (stages->degenerate ? "true" : "false");
  }
  out << "\nlayer,block,mean,var\n";
  for (const auto& s : stats) {
    if (s.vis_self_mean) out << s.layer << ",visual_self," << *s.vis_self_mean << ',' << *s.vis_self_var << '\n';
    if (s.cross_mean) out << s.layer << ",cross," << *s.cross_mean << ',' << *s.cross_var << '\n';
    out << s.layer << ",text_self," << s.text_self_mean << ',' << s.text_self_var << '\n';
  }
}

void write_entropy_csv(const std::filesystem::path& path, const std::vector<EntropyProfile>& baseline,
                       const std::vector<EntropyProfile>* exited) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.precision(12);
  out << "# schema_version=" << kSchemaVersion << "\nlayer,metric,value,exited\n";
  auto emit = [&out](const std::vector<EntropyProfile>& rows, const char* flag) {
    for (const auto& e : rows) {
      if (e.cross_entropy_bits) out << e.layer << ",cross_entropy_bits," << *e.cross_entropy_bits << ',' << flag << '\n';
      out << e.layer << ",text_self_entropy_bits," << e.text_self_entropy_bits << ',' << flag << '\n';
    }
  };
  emit(baseline, "false");
  if (exited) emit(*exited, "true");
}

}  // namespace vtexit
