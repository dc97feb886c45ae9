#pragma once

#include "vik/backbone.hpp"
#include "vik/loss.hpp"

#include <cstdio>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace vik {

// 0x56494B spells "VIK"; used wherever a fixed sampling seed is called for.
inline constexpr std::uint64_t kGradCheckSeed = 0x56494B;

struct GroupResult {
  std::string name;
  double max_rel_err = 0;
  int checked = 0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GroupResult> groups;
  double eps = 0;
  double threshold = 0;

  bool all_pass() const {
    for (const auto& g : groups)
      if (!g.pass) return false;
    return true;
  }

  std::string table() const {
    size_t w = 12;
    for (const auto& g : groups) w = std::max(w, g.name.size());
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%-*s  %12s  %8s  %s\n", static_cast<int>(w), "group",
                  "max_rel_err", "checked", "verdict");
    std::string out = buf;
    for (const auto& g : groups) {
      std::snprintf(buf, sizeof(buf), "%-*s  %12.3e  %8d  %s\n", static_cast<int>(w),
                    g.name.c_str(), g.max_rel_err, g.checked, g.pass ? "pass" : "FAIL");
      out += buf;
    }
    return out;
  }
};

using NamedParams = std::vector<std::pair<std::string, Param<double>*>>;

// Central differences against already-populated analytic gradients. The loss
// closure must be a pure function of the parameter values.
inline GradCheckReport finite_diff_check(const std::function<double()>& loss,
                                         const NamedParams& params, double eps_base = 1e-5,
                                         double threshold = 1e-4, int max_coords = 256,
                                         std::uint64_t seed = kGradCheckSeed) {
  if (!(eps_base > 0)) throw ConfigError("finite_diff_check: epsilon must be positive");
  GradCheckReport report;
  report.eps = eps_base;
  report.threshold = threshold;
  Rng rng(seed);
  for (const auto& [name, param] : params) {
    GroupResult res;
    res.name = name;
    const std::int64_t n = param->size();
    std::vector<std::int64_t> coords;
    if (n <= max_coords) {
      coords.resize(n);
      for (std::int64_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      // partial Fisher-Yates: first max_coords entries of a random permutation
      std::vector<std::int64_t> idx(n);
      for (std::int64_t i = 0; i < n; ++i) idx[i] = i;
      for (int i = 0; i < max_coords; ++i) {
        const int j = i + rng.below(static_cast<int>(n - i));
        std::swap(idx[i], idx[j]);
        coords.push_back(idx[i]);
      }
    }
    for (std::int64_t c : coords) {
      double& theta = param->value[c];
      const double saved = theta;
      const double eps = eps_base * std::max(1.0, std::abs(saved));
      theta = saved + eps;
      const double lp = loss();
      theta = saved - eps;
      const double lm = loss();
      theta = saved;
      if (!std::isfinite(lp) || !std::isfinite(lm))
        throw NumericalError("finite_diff_check: non-finite loss perturbing " + name + "[" +
                             std::to_string(c) + "]");
      const double numeric = (lp - lm) / (2 * eps);
      const double analytic = param->grad[c];
      const double rel =
          std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      res.max_rel_err = std::max(res.max_rel_err, rel);
      ++res.checked;
    }
    res.pass = res.max_rel_err < threshold;
    report.groups.push_back(std::move(res));
  }
  return report;
}

struct GradCheckOptions {
  double eps = 1e-5;
  double threshold = 1e-4;
  int max_coords = 256;
  std::uint64_t seed = kGradCheckSeed;
  std::string scope = "all";  // comma-separated substrings over group names; any match keeps
};

inline bool scope_matches(const std::string& scope, const std::string& name) {
  if (scope == "all") return true;
  size_t from = 0;
  while (from <= scope.size()) {
    const size_t comma = scope.find(',', from);
    const std::string part = scope.substr(from, comma == std::string::npos ? comma : comma - from);
    if (!part.empty() && name.find(part) != std::string::npos) return true;
    if (comma == std::string::npos) break;
    from = comma + 1;
  }
  return false;
}

// Whole-model check: cross-entropy on a fixed batch, analytic backward once,
// then central differences per parameter group.
inline GradCheckReport model_gradcheck(Backbone<double>& net, const Tensor<double>& images,
                                       const std::vector<int>& labels,
                                       const GradCheckOptions& opt = {}) {
  zero_grads(net);
  BackboneTape<double> tape;
  Tensor<double> logits = backbone_forward(images, net, &tape);
  auto ce = cross_entropy(logits, labels);
  backbone_backward(net, tape, ce.dlogits);

  NamedParams params;
  visit_params(net, [&](const std::string& name, Param<double>& p) {
    if (scope_matches(opt.scope, name)) params.emplace_back(name, &p);
  });
  if (params.empty()) throw ConfigError("gradcheck: scope '" + opt.scope + "' matches no group");

  auto loss = [&]() {
    return static_cast<double>(cross_entropy(backbone_forward(images, net), labels).loss);
  };
  return finite_diff_check(loss, params, opt.eps, opt.threshold, opt.max_coords, opt.seed);
}

}  // namespace vik
