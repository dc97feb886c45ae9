// vik: train / eval / gradcheck / flops / dump-phi for the ViK backbone.
// Exit codes: 0 success, 1 check failure, 2 config or usage, 3 data, 4 numerical.

#include "vik/complexity.hpp"
#include "vik/gradcheck.hpp"
#include "vik/train.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

namespace {

using namespace vik;

TrainSetup setup_from(const std::string& config_path) {
  return config_path.empty() ? tiny_setup() : load_config_file(config_path);
}

// --data grammar: "synth" or "cifar10:DIR"
struct DataSpec {
  bool synth = true;
  std::string cifar_dir;
};

DataSpec parse_data_arg(const std::string& arg) {
  if (arg == "synth") return {};
  if (arg.rfind("cifar10:", 0) == 0) return {false, arg.substr(8)};
  throw ConfigError("--data must be 'synth' or 'cifar10:DIR', got '" + arg + "'");
}

std::vector<int> parse_int_list(const std::string& text, const char* what) {
  std::vector<int> out;
  size_t from = 0;
  while (from <= text.size()) {
    const size_t comma = text.find(',', from);
    const std::string field =
        text.substr(from, comma == std::string::npos ? comma : comma - from);
    try {
      size_t used = 0;
      const int v = std::stoi(field, &used);
      if (used != field.size()) throw std::invalid_argument(field);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError(std::string(what) + ": expected comma-separated integers, got '" + text +
                        "'");
    }
    if (comma == std::string::npos) break;
    from = comma + 1;
  }
  return out;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_arg, const std::string& split) {
  CheckpointData ckpt = load_checkpoint(ckpt_path);
  TrainSetup setup = parse_config(ckpt.config_text);
  Rng rng(setup.model.seed);
  auto net = build_backbone<float>(setup.model, rng);
  restore(net, ckpt);

  const DataSpec data = parse_data_arg(data_arg);
  Dataset ds;
  if (data.synth) {
    auto splits = make_synth_splits(setup);
    ds = split == "train" ? std::move(splits.first) : std::move(splits.second);
  } else {
    Cifar10 c = load_cifar10_binary(data.cifar_dir);
    ds = split == "train" ? std::move(c.train) : std::move(c.test);
  }
  if (ds.images.dim(2) != setup.model.in_h || ds.images.dim(3) != setup.model.in_w)
    throw ConfigError("eval: dataset resolution " + std::to_string(ds.images.dim(2)) + "x" +
                      std::to_string(ds.images.dim(3)) + " does not match checkpoint config " +
                      std::to_string(setup.model.in_h) + "x" + std::to_string(setup.model.in_w));
  EvalResult res = evaluate(net, ds, setup.train.batch);
  std::printf("top1 %.6f  loss %.6f  n %d  split %s\n", res.acc, res.loss, res.n, split.c_str());
  return 0;
}

int cmd_gradcheck(const std::string& config, const std::string& scope_arg, double eps,
                  int max_coords) {
  TrainSetup setup = setup_from(config);
  Rng rng(setup.model.seed);
  auto net = build_backbone<double>(setup.model, rng);

  Rng data_rng(setup.model.seed ^ 0x9E3779B97F4A7C15ULL);
  Tensor<double> images =
      random_uniform<double>({2, 3, setup.model.in_h, setup.model.in_w}, data_rng, 0.0, 1.0);
  std::vector<int> labels = {0, setup.model.num_classes - 1};

  GradCheckOptions opt;
  opt.eps = eps;
  opt.max_coords = max_coords;
  // friendly scope names over the raw parameter-group substrings
  if (scope_arg == "patch_kan") opt.scope = ".kan";
  else if (scope_arg == "axis") opt.scope = "axis_";
  else if (scope_arg == "reweight") opt.scope = ".rw_";
  else if (scope_arg == "lowrank") opt.scope = ".P,.Q";
  else if (scope_arg == "channel_mlp") opt.scope = ".mlp_";
  else if (scope_arg == "norm") opt.scope = "norm,ln_";
  else opt.scope = scope_arg;

  GradCheckReport report = model_gradcheck(net, images, labels, opt);
  std::fputs(report.table().c_str(), stdout);
  if (report.all_pass()) {
    std::printf("gradcheck: all %zu groups pass (threshold %g)\n", report.groups.size(),
                report.threshold);
    return 0;
  }
  std::printf("gradcheck: FAILED groups:\n");
  for (const auto& g : report.groups)
    if (!g.pass) std::printf("  %s  max_rel_err %.3e\n", g.name.c_str(), g.max_rel_err);
  return 1;
}

int cmd_flops(const std::string& config, const std::string& resolutions, bool attention_ref,
              bool verify) {
  const BackboneConfig model = config.empty() ? vik_small_config() : setup_from(config).model;
  model.validate();
  std::fputs(model_flop_table(model).c_str(), stdout);

  const std::vector<int> sides = parse_int_list(resolutions, "--resolutions");
  for (int s : sides)
    if (s < 1) throw ConfigError("--resolutions: sides must be positive, got " + std::to_string(s));
  const MixerDims dims = mixer_dims(model, 0);
  const std::vector<ProbeRow> probe = linearity_probe(dims, sides);
  std::printf("\nstage-1 mixer over square token grids (side = tokens per axis):\n");
  std::fputs(probe_csv(probe, attention_ref).c_str(), stdout);
  for (size_t i = 1; i < probe.size(); ++i) {
    const bool exact = probe[i].core * probe[0].tokens == probe[0].core * probe[i].tokens;
    std::printf("core ratio %d/%d = %.6g tokens ratio %.6g %s\n", probe[i].side, probe[0].side,
                static_cast<double>(probe[i].core) / probe[0].core,
                static_cast<double>(probe[i].tokens) / probe[0].tokens,
                exact ? "(exact)" : "(NOT exact)");
  }

  if (verify) {
    Rng rng(model.seed);
    auto net = build_backbone<float>(model, rng);
    Rng img_rng(model.seed + 1);
    TensorF image = random_uniform<float>({1, 3, model.in_h, model.in_w}, img_rng, 0.f, 1.f);
    FlopMeter meter;
    backbone_forward(image, net, static_cast<BackboneTape<float>*>(nullptr), &meter);
    const FlopReport analytic = count_model(model);
    bool all_equal = true;
    std::printf("\ninstrumented vs analytic, one forward at %dx%d:\n", model.in_h, model.in_w);
    for (int c = 0; c < kComponentCount; ++c) {
      const std::int64_t inst = meter.total(static_cast<Component>(c));
      const bool eq = inst == analytic.flops[c];
      all_equal = all_equal && eq;
      std::printf("%-14s instrumented %16lld analytic %16lld %s\n",
                  component_name(static_cast<Component>(c)), static_cast<long long>(inst),
                  static_cast<long long>(analytic.flops[c]), eq ? "equal" : "MISMATCH");
    }
    if (!all_equal) return 1;
  }
  return 0;
}

std::vector<std::pair<int, int>> parse_edges(const std::string& spec, int f_in, int f_out,
                                             std::uint64_t seed) {
  std::vector<std::pair<int, int>> edges;
  if (spec.rfind("sample:", 0) == 0) {
    int k = 0;
    try {
      k = std::stoi(spec.substr(7));
    } catch (const std::exception&) {
      throw ConfigError("--edges: bad sample count in '" + spec + "'");
    }
    const int total = f_in * f_out;
    if (k < 1 || k > total)
      throw ConfigError("--edges: sample count must be in [1," + std::to_string(total) + "]");
    std::vector<int> all(total);
    for (int i = 0; i < total; ++i) all[i] = i;
    Rng rng(seed);
    rng.shuffle(all);
    for (int i = 0; i < k; ++i) edges.emplace_back(all[i] / f_out, all[i] % f_out);
    return edges;
  }
  size_t from = 0;
  while (from <= spec.size()) {
    const size_t semi = spec.find(';', from);
    const std::string pair = spec.substr(from, semi == std::string::npos ? semi : semi - from);
    const size_t comma = pair.find(',');
    if (comma == std::string::npos)
      throw ConfigError("--edges: expected 'i,o' pairs separated by ';' or 'sample:K', got '" +
                        spec + "'");
    try {
      const int i = std::stoi(pair.substr(0, comma));
      const int o = std::stoi(pair.substr(comma + 1));
      if (i < 0 || i >= f_in || o < 0 || o >= f_out)
        throw ConfigError("--edges: edge " + pair + " out of range; valid i 0.." +
                          std::to_string(f_in - 1) + ", o 0.." + std::to_string(f_out - 1));
      edges.emplace_back(i, o);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("--edges: bad pair '" + pair + "'");
    }
    if (semi == std::string::npos) break;
    from = semi + 1;
  }
  if (edges.empty()) throw ConfigError("--edges: no edges selected");
  return edges;
}

int cmd_dump_phi(const std::string& ckpt_path, int stage, int block, int group,
                 const std::string& edges_spec, const std::string& grid_spec,
                 const std::string& out_dir, std::uint64_t seed) {
  CheckpointData ckpt = load_checkpoint(ckpt_path);
  TrainSetup setup = parse_config(ckpt.config_text);
  Rng rng(setup.model.seed);
  auto net = build_backbone<float>(setup.model, rng);
  restore(net, ckpt);

  if (stage < 1 || stage > kNumStages)
    throw ConfigError("--stage: got " + std::to_string(stage) + ", valid 1.." +
                      std::to_string(kNumStages));
  const int depth = setup.model.stages[stage - 1].depth;
  if (block < 0 || block >= depth)
    throw ConfigError("--block: got " + std::to_string(block) + ", valid 0.." +
                      std::to_string(depth - 1) + " in stage " + std::to_string(stage));
  auto& mixer = net.stages[stage - 1][block].mixer;
  const int n_groups = static_cast<int>(mixer.kans.size());
  if (group < 0 || group >= n_groups)
    throw ConfigError("--group: got " + std::to_string(group) + ", valid 0.." +
                      std::to_string(n_groups - 1));
  const auto& layer = mixer.kans[group];

  size_t c1 = grid_spec.find(','), c2 = grid_spec.rfind(',');
  if (c1 == std::string::npos || c2 == c1)
    throw ConfigError("--grid: expected 'lo,hi,n', got '" + grid_spec + "'");
  double lo = 0, hi = 0;
  int n_points = 0;
  try {
    lo = std::stod(grid_spec.substr(0, c1));
    hi = std::stod(grid_spec.substr(c1 + 1, c2 - c1 - 1));
    n_points = std::stoi(grid_spec.substr(c2 + 1));
  } catch (const std::exception&) {
    throw ConfigError("--grid: expected 'lo,hi,n', got '" + grid_spec + "'");
  }

  const auto edges = parse_edges(edges_spec, layer.in_dim, layer.out_dim, seed);
  std::filesystem::create_directories(out_dir);
  std::string manifest = "file,stage,block,group,in,out,zero_crossings\n";
  double zc_sum = 0;
  char buf[192];
  for (const auto& [i, o] : edges) {
    const auto rows = phi_curve_table(layer, i, o, lo, hi, n_points);
    std::snprintf(buf, sizeof(buf), "phi_s%d_b%d_g%d_i%d_o%d.csv", stage, block, group, i, o);
    const std::string fname = buf;
    std::ofstream out(std::filesystem::path(out_dir) / fname, std::ios::binary | std::ios::trunc);
    out << "x,phi\n";
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof(buf), "%.9g,%.9g\n", r.x, r.phi);
      out << buf;
    }
    if (!out) throw DataError("dump-phi: cannot write " + fname + " under " + out_dir);
    const int zc = phi_zero_crossings(rows);
    zc_sum += zc;
    std::snprintf(buf, sizeof(buf), "%s,%d,%d,%d,%d,%d,%d\n", fname.c_str(), stage, block, group,
                  i, o, zc);
    manifest += buf;
  }
  std::ofstream mf(std::filesystem::path(out_dir) / "manifest.csv",
                   std::ios::binary | std::ios::trunc);
  mf << manifest;
  if (!mf) throw DataError("dump-phi: cannot write manifest.csv under " + out_dir);
  std::printf("wrote %zu curves to %s  mean zero-crossings %.3f\n", edges.size(), out_dir.c_str(),
              zc_sum / edges.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ViK: attention-free vision backbone with KAN token mixing"};
  app.require_subcommand(1);

  std::string config, data = "synth", out_dir = "out";
  int epochs = -1;
  std::uint64_t seed = 0;

  auto* train = app.add_subcommand("train", "Train a model and write metrics + checkpoints");
  train->add_option("--config", config, "Config file (key=value); built-in tiny default if absent");
  train->add_option("--data", data, "synth or cifar10:DIR")->capture_default_str();
  auto* opt_epochs = train->add_option("--epochs", epochs, "Override epochs from config");
  auto* opt_seed = train->add_option("--seed", seed, "Override seed from config");
  train->add_option("--out", out_dir, "Output directory")->capture_default_str();

  std::string ckpt_path, split = "val";
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  eval->add_option("--data", data, "synth or cifar10:DIR")->capture_default_str();
  eval->add_option("--split", split, "train or val (cifar10: val means the test batch)")
      ->check(CLI::IsMember({"train", "val"}))
      ->capture_default_str();

  std::vector<std::string> scope_tokens;
  double eps = 1e-5;
  int max_coords = 256;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of analytic gradients");
  gc->add_option("--config", config, "Config file; built-in tiny default if absent");
  gc->add_option("--scope", scope_tokens,
                 "'all' (default), 'layer NAME' with NAME in {patch_kan, axis, reweight, "
                 "lowrank, channel_mlp, norm}, or a comma list of group-name substrings")
      ->expected(1, 2);
  gc->add_option("--eps", eps, "Central-difference step scale")->capture_default_str();
  gc->add_option("--max-coords", max_coords, "Sampled coordinates per group")
      ->capture_default_str();

  std::string resolutions = "56,112,224";
  bool attention_ref = false, verify = false;
  auto* fl = app.add_subcommand("flops", "Analytic complexity report and linearity probe");
  fl->add_option("--config", config, "Config file; ViK-Small if absent");
  fl->add_option("--resolutions", resolutions, "Token-grid sides for the stage-1 mixer probe")
      ->capture_default_str();
  fl->add_flag("--attention-reference", attention_ref, "Add the N^2*C self-attention column");
  fl->add_flag("--verify-instrumented", verify,
               "Run one instrumented forward and compare against the analytic count");

  int stage = 1, block = 0, group = 0;
  std::string edges = "sample:8", grid = "-2,2,101";
  auto* dp = app.add_subcommand("dump-phi", "Export learned phi curves as CSV");
  dp->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  dp->add_option("--stage", stage, "Stage index, 1-based")->capture_default_str();
  dp->add_option("--block", block, "Block index within stage, 0-based")->capture_default_str();
  dp->add_option("--group", group, "Channel-group KAN index")->capture_default_str();
  dp->add_option("--edges", edges, "'i,o' pairs separated by ';', or sample:K")
      ->capture_default_str();
  dp->add_option("--grid", grid, "lo,hi,n sample grid")->capture_default_str();
  dp->add_option("--out", out_dir, "Output directory")->capture_default_str();
  dp->add_option("--seed", seed, "Seed for sample:K edge selection")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) {
      TrainSetup setup = setup_from(config);
      if (opt_epochs->count()) {
        if (epochs < 1) throw ConfigError("--epochs must be >= 1");
        setup.train.epochs = epochs;
      }
      if (opt_seed->count()) setup.model.seed = seed;
      // re-serialize overrides through the canonical form so checkpoints embed them
      TrainSetup patched = parse_config(canonical_text(setup));
      patched.model.validate();
      const DataSpec dspec = parse_data_arg(data);
      Dataset train_ds, val_ds;
      if (dspec.synth) {
        auto splits = make_synth_splits(patched);
        train_ds = std::move(splits.first);
        val_ds = std::move(splits.second);
      } else {
        Cifar10 c = load_cifar10_binary(dspec.cifar_dir);
        train_ds = std::move(c.train);
        val_ds = std::move(c.test);
      }
      TrainResult res = train_loop(patched, train_ds, val_ds, out_dir, true);
      std::printf("done: final train_acc %.6f  val_acc %.6f\n", res.final_train_acc,
                  res.final_val_acc);
      std::printf("metrics: %s\ncheckpoint: %s\n", res.metrics_path.c_str(),
                  res.last_ckpt_path.c_str());
      return 0;
    }
    if (eval->parsed()) return cmd_eval(ckpt_path, data, split);
    if (gc->parsed()) {
      std::string scope = "all";
      if (scope_tokens.size() == 2) {
        if (scope_tokens[0] != "layer")
          throw ConfigError("--scope: two-word form must be 'layer NAME', got '" +
                            scope_tokens[0] + " " + scope_tokens[1] + "'");
        scope = scope_tokens[1];
      } else if (scope_tokens.size() == 1) {
        if (scope_tokens[0] == "layer") throw ConfigError("--scope layer needs a NAME argument");
        scope = scope_tokens[0];
      }
      return cmd_gradcheck(config, scope, eps, max_coords);
    }
    if (fl->parsed()) return cmd_flops(config, resolutions, attention_ref, verify);
    if (dp->parsed()) return cmd_dump_phi(ckpt_path, stage, block, group, edges, grid, out_dir, seed);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  }
  return 0;
}
