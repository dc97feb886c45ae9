#pragma once

#include "vik/backbone.hpp"
#include "vik/flops.hpp"

#include <array>
#include <cstdio>
#include <string>
#include <vector>

namespace vik {

// Exact per-image multiply-add and parameter counts under the convention
// documented in flops.hpp. Every count is an integer derived from shapes;
// the instrumented forward pass must reproduce them exactly.
struct FlopReport {
  std::array<std::int64_t, kComponentCount> flops{};
  std::array<std::int64_t, kComponentCount> params{};

  std::int64_t total_flops() const {
    std::int64_t s = 0;
    for (auto v : flops) s += v;
    return s;
  }
  std::int64_t total_params() const {
    std::int64_t s = 0;
    for (auto v : params) s += v;
    return s;
  }
  // the N-linear mixer terms: patch_kan + axis_mix + lowrank_global
  std::int64_t mixer_core_flops() const {
    return flops[static_cast<int>(Component::kPatchKan)] +
           flops[static_cast<int>(Component::kAxisMix)] +
           flops[static_cast<int>(Component::kLowRank)];
  }
  FlopReport& operator+=(const FlopReport& o) {
    for (int i = 0; i < kComponentCount; ++i) {
      flops[i] += o.flops[i];
      params[i] += o.params[i];
    }
    return *this;
  }
  FlopReport scaled(std::int64_t times) const {
    FlopReport r = *this;
    for (int i = 0; i < kComponentCount; ++i) {
      r.flops[i] *= times;
      r.params[i] *= times;
    }
    return r;
  }
};

struct MixerDims {
  int channels = 0;
  int p = 2;
  int basis_count = 8;
  int kernel = 5;
  int rank = 1;
  int groups = 1;
  BasisKind kind = BasisKind::kRbf;
  bool use_axis = true;
  bool use_global = true;
};

inline MixerDims mixer_dims(const BackboneConfig& cfg, int stage) {
  const StageSpec& st = cfg.stages[stage];
  return {st.channels, st.p,          st.basis_count, st.kernel,
          cfg.stage_rank(stage),      st.groups,      cfg.kind,
          cfg.use_axis,               cfg.use_global};
}

inline std::int64_t kan_edge_units(BasisKind kind) {
  switch (kind) {
    case BasisKind::kRbf: return kRbfEvalUnits;
    case BasisKind::kWavelet: return kWaveletEvalUnits;
    case BasisKind::kBSpline: return kBsplineEvalUnits;
    case BasisKind::kMlpReplace: return 0;  // handled by its own formula
  }
  return 0;
}

inline FlopReport count_mixer_flops(const MixerDims& d, int height, int width) {
  if (height % d.p != 0 || width % d.p != 0)
    throw ConfigError("count_mixer_flops: grid " + std::to_string(height) + "x" +
                      std::to_string(width) + " not divisible by p=" + std::to_string(d.p));
  const std::int64_t n = static_cast<std::int64_t>(height) * width;
  const std::int64_t c = d.channels, f = static_cast<std::int64_t>(d.p) * d.p;
  const std::int64_t m = d.basis_count;
  FlopReport rep;

  if (d.kind == BasisKind::kMlpReplace) {
    const std::int64_t h = mlp_replace_hidden_dim(static_cast<int>(f), d.basis_count);
    const std::int64_t patch_rows = c * (n / f);
    rep.flops[static_cast<int>(Component::kPatchKan)] =
        patch_rows * (2 * f * h + 2 * h + f + h * kReluUnits);
  } else {
    rep.flops[static_cast<int>(Component::kPatchKan)] = n * c * f * m * kan_edge_units(d.kind);
  }

  if (d.use_axis) {
    const std::int64_t hid = reweight_hidden_dim(d.channels);
    rep.flops[static_cast<int>(Component::kAxisMix)] = n * c * (2 * d.kernel + 2);
    rep.flops[static_cast<int>(Component::kAxisReweight)] =
        c * hid + hid + hid * kReluUnits + hid * 2 + 2 + softmax_units(2);
  }
  if (d.use_global)
    rep.flops[static_cast<int>(Component::kLowRank)] = 2 * n * c * d.rank;

  // parameters, mirrored into the same buckets
  std::int64_t kan_params = 0;
  if (d.kind == BasisKind::kMlpReplace) {
    const std::int64_t h = mlp_replace_hidden_dim(static_cast<int>(f), d.basis_count);
    kan_params = f * h + h + h * f + f;
  } else if (d.kind == BasisKind::kBSpline) {
    kan_params = f * f * m;  // knots are fixed
  } else {
    kan_params = 3 * f * f * m;  // centers, log widths, weights
  }
  rep.params[static_cast<int>(Component::kPatchKan)] = kan_params * d.groups;
  if (d.use_axis) {
    const std::int64_t hid = reweight_hidden_dim(d.channels);
    rep.params[static_cast<int>(Component::kAxisMix)] = 2 * c * d.kernel;
    rep.params[static_cast<int>(Component::kAxisReweight)] = c * hid + hid + hid * 2 + 2;
  }
  if (d.use_global) rep.params[static_cast<int>(Component::kLowRank)] = 2 * n * d.rank;
  return rep;
}

inline FlopReport count_block(const BackboneConfig& cfg, int stage) {
  const StageSpec& st = cfg.stages[stage];
  const int h = cfg.stage_h(stage), w = cfg.stage_w(stage);
  const std::int64_t n = static_cast<std::int64_t>(h) * w;
  const std::int64_t c = st.channels, ec = static_cast<std::int64_t>(st.expand) * c;
  FlopReport rep = count_mixer_flops(mixer_dims(cfg, stage), h, w);
  rep.flops[static_cast<int>(Component::kChannelMlp)] =
      n * (c * ec + ec + ec * kGeluUnits + ec * c + c);
  rep.flops[static_cast<int>(Component::kNorm)] = 2 * n * layer_norm_units_per_token(c);
  rep.params[static_cast<int>(Component::kChannelMlp)] = c * ec + ec + ec * c + c;
  rep.params[static_cast<int>(Component::kNorm)] = 4 * c;
  return rep;
}

// stem and downsampling convolutions plus their norms
inline FlopReport count_conv_norm(std::int64_t c_in, std::int64_t c_out, std::int64_t k,
                                  std::int64_t out_h, std::int64_t out_w) {
  FlopReport rep;
  const std::int64_t n = out_h * out_w;
  rep.flops[static_cast<int>(Component::kEmbedHead)] = n * c_out * (c_in * k * k + 1);
  rep.flops[static_cast<int>(Component::kNorm)] = n * layer_norm_units_per_token(c_out);
  rep.params[static_cast<int>(Component::kEmbedHead)] = c_out * c_in * k * k + c_out;
  rep.params[static_cast<int>(Component::kNorm)] = 2 * c_out;
  return rep;
}

inline FlopReport count_model(const BackboneConfig& cfg) {
  cfg.validate();
  FlopReport rep = count_conv_norm(3, cfg.stages[0].channels, 4, cfg.stage_h(0), cfg.stage_w(0));
  for (int s = 0; s < kNumStages; ++s) {
    rep += count_block(cfg, s).scaled(cfg.stages[s].depth);
    // params of a stage are depth copies; flops likewise
    if (s + 1 < kNumStages)
      rep += count_conv_norm(cfg.stages[s].channels, cfg.stages[s + 1].channels, 2,
                             cfg.stage_h(s + 1), cfg.stage_w(s + 1));
  }
  const std::int64_t c4 = cfg.stages[kNumStages - 1].channels;
  const std::int64_t n4 =
      static_cast<std::int64_t>(cfg.stage_h(kNumStages - 1)) * cfg.stage_w(kNumStages - 1);
  FlopReport head;
  head.flops[static_cast<int>(Component::kEmbedHead)] =
      n4 * c4 + c4 * cfg.num_classes + cfg.num_classes;
  head.flops[static_cast<int>(Component::kNorm)] = layer_norm_units_per_token(c4);
  head.params[static_cast<int>(Component::kEmbedHead)] = c4 * cfg.num_classes + cfg.num_classes;
  head.params[static_cast<int>(Component::kNorm)] = 2 * c4;
  rep += head;
  return rep;
}

inline std::int64_t count_params(const BackboneConfig& cfg) { return count_model(cfg).total_params(); }

// ---------------------------------------------------------------------------
// linearity probe over token-grid sides for one mixer configuration

struct ProbeRow {
  int side = 0;
  std::int64_t tokens = 0;
  std::int64_t patch_kan = 0;
  std::int64_t axis_mix = 0;
  std::int64_t lowrank = 0;
  std::int64_t core = 0;       // sum of the three above
  std::int64_t reweight = 0;   // constant-per-image remainder
  std::int64_t attention_ref = 0;  // N^2 * C quadratic reference
};

inline std::vector<ProbeRow> linearity_probe(const MixerDims& d, const std::vector<int>& sides) {
  if (sides.size() < 2) throw ConfigError("linearity_probe: need at least 2 resolutions");
  std::vector<ProbeRow> rows;
  for (int side : sides) {
    if (side < d.p || side % d.p != 0)
      throw ConfigError("linearity_probe: side " + std::to_string(side) +
                        " not divisible by p=" + std::to_string(d.p));
    FlopReport rep = count_mixer_flops(d, side, side);
    ProbeRow row;
    row.side = side;
    row.tokens = static_cast<std::int64_t>(side) * side;
    row.patch_kan = rep.flops[static_cast<int>(Component::kPatchKan)];
    row.axis_mix = rep.flops[static_cast<int>(Component::kAxisMix)];
    row.lowrank = rep.flops[static_cast<int>(Component::kLowRank)];
    row.core = rep.mixer_core_flops();
    row.reweight = rep.flops[static_cast<int>(Component::kAxisReweight)];
    row.attention_ref = row.tokens * row.tokens * d.channels;
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// serialization

inline std::string flop_report_csv(const FlopReport& rep) {
  std::string out = "component,flops,params\n";
  char buf[128];
  for (int i = 0; i < kComponentCount; ++i) {
    std::snprintf(buf, sizeof(buf), "%s,%lld,%lld\n", component_name(static_cast<Component>(i)),
                  static_cast<long long>(rep.flops[i]), static_cast<long long>(rep.params[i]));
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "total,%lld,%lld\n", static_cast<long long>(rep.total_flops()),
                static_cast<long long>(rep.total_params()));
  out += buf;
  return out;
}

inline std::string probe_csv(const std::vector<ProbeRow>& rows, bool attention_ref = false) {
  std::string out = "side,tokens,patch_kan,axis_mix,lowrank_global,mixer_core,core_per_token,"
                    "axis_reweight";
  if (attention_ref) out += ",attention_n2c";
  out += "\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%lld,%lld,%lld,%lld,%lld,%.6f,%lld",
                  r.side, static_cast<long long>(r.tokens), static_cast<long long>(r.patch_kan),
                  static_cast<long long>(r.axis_mix), static_cast<long long>(r.lowrank),
                  static_cast<long long>(r.core),
                  static_cast<double>(r.core) / static_cast<double>(r.tokens),
                  static_cast<long long>(r.reweight));
    out += buf;
    if (attention_ref) {
      std::snprintf(buf, sizeof(buf), ",%lld", static_cast<long long>(r.attention_ref));
      out += buf;
    }
    out += "\n";
  }
  return out;
}

inline std::string model_flop_table(const BackboneConfig& cfg) {
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof(buf), "%-14s %16s %14s\n", "component", "flops/image", "params");
  out += buf;
  const FlopReport rep = count_model(cfg);
  for (int i = 0; i < kComponentCount; ++i) {
    std::snprintf(buf, sizeof(buf), "%-14s %16lld %14lld\n",
                  component_name(static_cast<Component>(i)),
                  static_cast<long long>(rep.flops[i]), static_cast<long long>(rep.params[i]));
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "%-14s %16lld %14lld\n", "total",
                static_cast<long long>(rep.total_flops()),
                static_cast<long long>(rep.total_params()));
  out += buf;
  std::snprintf(buf, sizeof(buf), "(%.3f analytic GFLOP-units/image, %.2fM params)\n",
                static_cast<double>(rep.total_flops()) / 1e9,
                static_cast<double>(rep.total_params()) / 1e6);
  out += buf;
  return out;
}

}  // namespace vik
