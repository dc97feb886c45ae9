#include "vik/config.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace vik {
namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects an integer, got '" + v + "'");
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError("config: key '" + key + "' expects 0/1, got '" + v + "'");
}

std::array<int, kNumStages> parse_stage_list(const std::string& key, const std::string& v) {
  std::array<int, kNumStages> out{};
  std::stringstream ss(v);
  std::string item;
  int i = 0;
  while (std::getline(ss, item, ',')) {
    if (i >= kNumStages)
      throw ConfigError("config: key '" + key + "' expects 4 comma-separated values");
    out[i++] = parse_int(key, trim(item));
  }
  if (i != kNumStages)
    throw ConfigError("config: key '" + key + "' expects 4 comma-separated values, got " +
                      std::to_string(i));
  return out;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_stage_list(const std::array<StageSpec, kNumStages>& stages,
                           const std::function<int(const StageSpec&)>& get) {
  std::string out;
  for (int s = 0; s < kNumStages; ++s) {
    if (s) out += ",";
    out += std::to_string(get(stages[s]));
  }
  return out;
}

}  // namespace

TrainSetup parse_config(const std::string& text) {
  TrainSetup setup = tiny_setup();  // unspecified keys keep the desk-scale defaults
  auto& m = setup.model;
  auto& t = setup.train;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) + " is not key=value: '" +
                        line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key == "resolution") {
      m.in_h = m.in_w = parse_int(key, val);
    } else if (key == "classes") {
      m.num_classes = parse_int(key, val);
    } else if (key == "basis_kind") {
      m.kind = basis_kind_from_name(val);
    } else if (key == "use_axis") {
      m.use_axis = parse_bool(key, val);
    } else if (key == "use_global") {
      m.use_global = parse_bool(key, val);
    } else if (key == "seed") {
      m.seed = static_cast<std::uint64_t>(parse_int(key, val));
    } else if (key == "depths") {
      auto v = parse_stage_list(key, val);
      for (int s = 0; s < kNumStages; ++s) m.stages[s].depth = v[s];
    } else if (key == "channels") {
      auto v = parse_stage_list(key, val);
      for (int s = 0; s < kNumStages; ++s) m.stages[s].channels = v[s];
    } else if (key == "patch") {
      auto v = parse_stage_list(key, val);
      for (int s = 0; s < kNumStages; ++s) m.stages[s].p = v[s];
    } else if (key == "basis") {
      auto v = parse_stage_list(key, val);
      for (int s = 0; s < kNumStages; ++s) m.stages[s].basis_count = v[s];
    } else if (key == "rank") {
      auto v = parse_stage_list(key, val);
      for (int s = 0; s < kNumStages; ++s) m.stages[s].rank = v[s];
    } else if (key == "kernel") {
      auto v = parse_stage_list(key, val);
      for (int s = 0; s < kNumStages; ++s) m.stages[s].kernel = v[s];
    } else if (key == "expand") {
      auto v = parse_stage_list(key, val);
      for (int s = 0; s < kNumStages; ++s) m.stages[s].expand = v[s];
    } else if (key == "groups") {
      auto v = parse_stage_list(key, val);
      for (int s = 0; s < kNumStages; ++s) m.stages[s].groups = v[s];
    } else if (key == "epochs") {
      t.epochs = parse_int(key, val);
    } else if (key == "batch") {
      t.batch = parse_int(key, val);
    } else if (key == "lr_peak") {
      t.lr_peak = parse_double(key, val);
    } else if (key == "lr_floor") {
      t.lr_floor = parse_double(key, val);
    } else if (key == "warmup_frac") {
      t.warmup_frac = parse_double(key, val);
    } else if (key == "weight_decay") {
      t.weight_decay = parse_double(key, val);
    } else if (key == "clip_norm") {
      t.clip_norm = parse_double(key, val);
    } else if (key == "augment_flip") {
      t.augment_flip = parse_bool(key, val);
    } else if (key == "synth_classes") {
      t.synth_classes = parse_int(key, val);
    } else if (key == "synth_per_class") {
      t.synth_per_class = parse_int(key, val);
    } else if (key == "synth_val_per_class") {
      t.synth_val_per_class = parse_int(key, val);
    } else if (key == "synth_sigma") {
      t.synth_sigma = parse_double(key, val);
    } else {
      throw ConfigError("config: unknown key '" + key + "' at line " + std::to_string(lineno));
    }
  }
  setup.model.validate();
  if (t.epochs < 1 || t.batch < 1) throw ConfigError("config: epochs and batch must be >= 1");
  return setup;
}

TrainSetup load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string canonical_text(const TrainSetup& setup) {
  const auto& m = setup.model;
  const auto& t = setup.train;
  std::string out;
  out += "augment_flip=" + std::string(t.augment_flip ? "1" : "0") + "\n";
  out += "basis=" + fmt_stage_list(m.stages, [](const StageSpec& s) { return s.basis_count; }) + "\n";
  out += "basis_kind=" + std::string(basis_kind_name(m.kind)) + "\n";
  out += "batch=" + std::to_string(t.batch) + "\n";
  out += "channels=" + fmt_stage_list(m.stages, [](const StageSpec& s) { return s.channels; }) + "\n";
  out += "classes=" + std::to_string(m.num_classes) + "\n";
  out += "clip_norm=" + fmt_double(t.clip_norm) + "\n";
  out += "depths=" + fmt_stage_list(m.stages, [](const StageSpec& s) { return s.depth; }) + "\n";
  out += "epochs=" + std::to_string(t.epochs) + "\n";
  out += "expand=" + fmt_stage_list(m.stages, [](const StageSpec& s) { return s.expand; }) + "\n";
  out += "groups=" + fmt_stage_list(m.stages, [](const StageSpec& s) { return s.groups; }) + "\n";
  out += "kernel=" + fmt_stage_list(m.stages, [](const StageSpec& s) { return s.kernel; }) + "\n";
  out += "lr_floor=" + fmt_double(t.lr_floor) + "\n";
  out += "lr_peak=" + fmt_double(t.lr_peak) + "\n";
  out += "patch=" + fmt_stage_list(m.stages, [](const StageSpec& s) { return s.p; }) + "\n";
  out += "rank=" + fmt_stage_list(m.stages, [](const StageSpec& s) { return s.rank; }) + "\n";
  out += "resolution=" + std::to_string(m.in_h) + "\n";
  out += "seed=" + std::to_string(m.seed) + "\n";
  out += "synth_classes=" + std::to_string(t.synth_classes) + "\n";
  out += "synth_per_class=" + std::to_string(t.synth_per_class) + "\n";
  out += "synth_sigma=" + fmt_double(t.synth_sigma) + "\n";
  out += "synth_val_per_class=" + std::to_string(t.synth_val_per_class) + "\n";
  out += "use_axis=" + std::string(m.use_axis ? "1" : "0") + "\n";
  out += "use_global=" + std::string(m.use_global ? "1" : "0") + "\n";
  out += "warmup_frac=" + fmt_double(t.warmup_frac) + "\n";
  out += "weight_decay=" + fmt_double(t.weight_decay) + "\n";
  return out;
}

std::array<unsigned char, 32> config_digest(const std::string& canonical) {
  // four FNV-1a-64 lanes with distinct offsets; integrity check, not crypto
  std::array<unsigned char, 32> digest{};
  static constexpr std::uint64_t kLane[4] = {0xcbf29ce484222325ULL, 0x9ae16a3b2f90404fULL,
                                             0xc949d7c7509e6557ULL, 0xff51afd7ed558ccdULL};
  for (int lane = 0; lane < 4; ++lane) {
    std::uint64_t h = kLane[lane];
    for (unsigned char ch : canonical) {
      h ^= static_cast<std::uint64_t>(ch) + lane;
      h *= 0x100000001b3ULL;
    }
    std::memcpy(digest.data() + 8 * lane, &h, 8);
  }
  return digest;
}

TrainSetup tiny_setup() {
  TrainSetup s;
  s.model.in_h = s.model.in_w = 32;
  s.model.num_classes = 10;
  const int depths[4] = {1, 1, 1, 1}, chans[4] = {8, 16, 24, 32};
  const int ps[4] = {1, 2, 2, 1}, ranks[4] = {8, 4, 2, 1};
  for (int i = 0; i < kNumStages; ++i) {
    s.model.stages[i].depth = depths[i];
    s.model.stages[i].channels = chans[i];
    s.model.stages[i].p = ps[i];
    s.model.stages[i].basis_count = 4;
    s.model.stages[i].rank = ranks[i];
    s.model.stages[i].kernel = 3;
    s.model.stages[i].expand = 1;
    s.model.stages[i].groups = 1;
  }
  return s;
}

BackboneConfig vik_small_config() {
  BackboneConfig m;
  m.in_h = m.in_w = 224;
  m.num_classes = 1000;
  const int depths[4] = {2, 2, 8, 2}, chans[4] = {64, 128, 320, 512};
  const int ps[4] = {2, 2, 2, 1}, expands[4] = {4, 4, 3, 3};
  for (int i = 0; i < kNumStages; ++i) {
    m.stages[i].depth = depths[i];
    m.stages[i].channels = chans[i];
    m.stages[i].p = ps[i];
    m.stages[i].basis_count = 8;
    m.stages[i].kernel = 5;
    m.stages[i].expand = expands[i];
    m.stages[i].groups = 1;
  }
  return m;
}

}  // namespace vik
