#pragma once

#include "vik/ops.hpp"
#include "vik/tensor.hpp"

#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace vik {

enum class BasisKind { kRbf, kBSpline, kWavelet, kMlpReplace };

inline const char* basis_kind_name(BasisKind k) {
  switch (k) {
    case BasisKind::kRbf: return "rbf";
    case BasisKind::kBSpline: return "bspline";
    case BasisKind::kWavelet: return "wavelet";
    case BasisKind::kMlpReplace: return "mlp";
  }
  return "?";
}

inline BasisKind basis_kind_from_name(const std::string& s) {
  if (s == "rbf") return BasisKind::kRbf;
  if (s == "bspline") return BasisKind::kBSpline;
  if (s == "wavelet") return BasisKind::kWavelet;
  if (s == "mlp") return BasisKind::kMlpReplace;
  throw ConfigError("unknown basis kind '" + s + "' (rbf|bspline|wavelet|mlp)");
}

inline constexpr int kBSplineDegree = 3;
// B-spline grids live on [-4, 4]; inputs are clamped into this support.
inline constexpr double kBSplineLo = -4.0;
inline constexpr double kBSplineHi = 4.0;

// ---------------------------------------------------------------------------
// scalar basis evaluations

template <typename S>
S rbf_eval(S x, S mu, S sigma) {
  const S d = x - mu;
  return std::exp(-(d * d) / (S(2) * sigma * sigma));
}

// Ricker (Mexican hat): psi(t) = (1 - t^2) exp(-t^2 / 2)
template <typename S>
S ricker_eval(S t) {
  return (S(1) - t * t) * std::exp(S(-0.5) * t * t);
}

template <typename S>
S ricker_grad(S t) {
  // d/dt [(1-t^2) e^{-t^2/2}] = (t^3 - 3t) e^{-t^2/2}
  return (t * t * t - S(3) * t) * std::exp(S(-0.5) * t * t);
}

// ---------------------------------------------------------------------------
// batched basis activations: one row of M values per input scalar

template <typename S>
Tensor<S> rbf_activations(const Tensor<S>& xs, const Tensor<S>& mu, const Tensor<S>& sigma) {
  if (mu.size() != sigma.size()) throw ShapeError("rbf_activations: mu/sigma size mismatch");
  for (std::int64_t j = 0; j < sigma.size(); ++j)
    if (!(sigma[j] > S(0)))
      throw ConfigError("rbf_activations: sigma must be positive (index " + std::to_string(j) +
                        ")");
  const int n = static_cast<int>(xs.size()), M = static_cast<int>(mu.size());
  Tensor<S> out({n, M});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < M; ++j) out(i, j) = rbf_eval(xs[i], mu[j], sigma[j]);
  return out;
}

template <typename S>
Tensor<S> wavelet_activations(const Tensor<S>& xs, const Tensor<S>& scale,
                              const Tensor<S>& shift) {
  if (scale.size() != shift.size()) throw ShapeError("wavelet_activations: scale/shift mismatch");
  for (std::int64_t j = 0; j < scale.size(); ++j)
    if (!(scale[j] > S(0)))
      throw ConfigError("wavelet_activations: scale must be positive (index " +
                        std::to_string(j) + ")");
  const int n = static_cast<int>(xs.size()), M = static_cast<int>(scale.size());
  Tensor<S> out({n, M});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < M; ++j) out(i, j) = ricker_eval((xs[i] - shift[j]) / scale[j]);
  return out;
}

// Uniform cubic knot vector: M + degree + 1 knots, spaced so the partition of
// unity holds exactly on [lo, hi].
template <typename S>
std::vector<S> bspline_knots(int basis_count, double lo = kBSplineLo, double hi = kBSplineHi) {
  if (basis_count < kBSplineDegree + 1)
    throw ConfigError("bspline: need at least " + std::to_string(kBSplineDegree + 1) +
                      " basis functions for a uniform cubic grid, got " +
                      std::to_string(basis_count));
  const int nknots = basis_count + kBSplineDegree + 1;
  const double h = (hi - lo) / static_cast<double>(basis_count - kBSplineDegree);
  std::vector<S> knots(nknots);
  for (int i = 0; i < nknots; ++i)
    knots[i] = static_cast<S>(lo + (i - kBSplineDegree) * h);
  return knots;
}

// Cox-de Boor, evaluating every basis function at one (clamped) point.
template <typename S>
void bspline_basis_row(S x, std::span<const S> knots, int degree, S* out, S* dout = nullptr) {
  const int nknots = static_cast<int>(knots.size());
  if (nknots < degree + 2) throw ConfigError("bspline: fewer than degree+2 knots");
  const int M = nknots - degree - 1;
  const S lo = knots[degree], hi = knots[M];
  const bool clamped = (x < lo || x > hi);
  x = std::min(std::max(x, lo), hi);

  std::vector<S> cur(nknots - 1, S(0));
  // degree 0 indicators; the top interval is closed so x == hi stays in range
  for (int j = 0; j < nknots - 1; ++j) {
    if ((x >= knots[j] && x < knots[j + 1]) || (x == knots[nknots - 1] && j == nknots - 2))
      cur[j] = S(1);
  }
  if (x == hi) {
    std::fill(cur.begin(), cur.end(), S(0));
    // place in the interval [t_M, t_{M+1})
    cur[M] = S(1);
  }

  std::vector<S> prev;
  for (int d = 1; d <= degree; ++d) {
    prev = cur;
    const int nfun = nknots - d - 1;
    for (int j = 0; j < nfun; ++j) {
      S left = 0, right = 0;
      const S den_l = knots[j + d] - knots[j];
      const S den_r = knots[j + d + 1] - knots[j + 1];
      if (den_l > S(0)) left = (x - knots[j]) / den_l * prev[j];
      if (den_r > S(0)) right = (knots[j + d + 1] - x) / den_r * prev[j + 1];
      cur[j] = left + right;
    }
    cur.resize(nfun);
    if (dout && d == degree) {
      // derivative from the degree-1 row: B'_j = d * (N_j / dl - N_{j+1} / dr)
      for (int j = 0; j < M; ++j) {
        S a = 0, b = 0;
        const S den_l = knots[j + d] - knots[j];
        const S den_r = knots[j + d + 1] - knots[j + 1];
        if (den_l > S(0)) a = prev[j] / den_l;
        if (den_r > S(0)) b = prev[j + 1] / den_r;
        dout[j] = clamped ? S(0) : static_cast<S>(d) * (a - b);
      }
    }
  }
  for (int j = 0; j < M; ++j) out[j] = cur[j];
}

template <typename S>
Tensor<S> bspline_activations(const Tensor<S>& xs, const std::vector<S>& knots,
                              int degree = kBSplineDegree) {
  const int M = static_cast<int>(knots.size()) - degree - 1;
  if (M < 1) throw ConfigError("bspline: fewer than degree+2 knots");
  for (size_t i = 1; i < knots.size(); ++i)
    if (knots[i] < knots[i - 1]) throw ConfigError("bspline: knots must be non-decreasing");
  const int n = static_cast<int>(xs.size());
  Tensor<S> out({n, M});
  for (int i = 0; i < n; ++i)
    bspline_basis_row<S>(xs[i], std::span<const S>(knots.data(), knots.size()), degree,
                         &out(i, 0));
  return out;
}

// ---------------------------------------------------------------------------
// one KAN layer: a square F -> F map whose edges carry univariate functions

template <typename S>
struct KanLayerParams {
  int in_dim = 0;        // F
  int out_dim = 0;       // F (square layer)
  int basis_count = 0;   // M
  BasisKind kind = BasisKind::kRbf;

  // rbf: mu/log_sigma/w; wavelet: mu = shift, log_sigma = log scale; bspline:
  // w only, knots fixed. All shaped [F_in, F_out, M].
  Param<S> mu;
  Param<S> log_sigma;
  Param<S> w;
  std::vector<S> knots;

  // mlp replacement arm (F -> hidden -> F), sized to match the basis budget
  Param<S> mlp_w1, mlp_b1, mlp_w2, mlp_b2;

  std::int64_t edge_offset(int i, int o) const {
    return (static_cast<std::int64_t>(i) * out_dim + o) * basis_count;
  }
  std::span<const S> mu_edge(int i, int o) const {
    return {mu.value.data() + edge_offset(i, o), static_cast<size_t>(basis_count)};
  }
  std::span<const S> log_sigma_edge(int i, int o) const {
    return {log_sigma.value.data() + edge_offset(i, o), static_cast<size_t>(basis_count)};
  }
  std::span<const S> w_edge(int i, int o) const {
    return {w.value.data() + edge_offset(i, o), static_cast<size_t>(basis_count)};
  }
};

inline int mlp_replace_hidden_dim(int f, int basis_count) {
  // match F*F*M*3 trainable scalars within a few percent:
  // params(H) = F*H + H + H*F + F = H*(2F+1) + F
  const long long target = 3LL * f * f * basis_count;
  int h = static_cast<int>((target - f + (2 * f + 1) / 2) / (2 * f + 1));
  return std::max(h, 1);
}

template <typename S>
void kan_init(KanLayerParams<S>& layer, int f, int basis_count, BasisKind kind, Rng& rng) {
  layer.in_dim = f;
  layer.out_dim = f;
  layer.basis_count = basis_count;
  layer.kind = kind;
  if (kind != BasisKind::kMlpReplace && basis_count < 1)
    throw ConfigError("kan layer: basis count must be >= 1");

  if (kind == BasisKind::kMlpReplace) {
    const int h = mlp_replace_hidden_dim(f, basis_count);
    const S bound1 = S(1) / std::sqrt(static_cast<S>(f));
    const S bound2 = S(1) / std::sqrt(static_cast<S>(h));
    layer.mlp_w1 = Param<S>(random_uniform<S>({f, h}, rng, -bound1, bound1));
    layer.mlp_b1 = Param<S>(Tensor<S>({h}));
    layer.mlp_w2 = Param<S>(random_uniform<S>({h, f}, rng, -bound2, bound2));
    layer.mlp_b2 = Param<S>(Tensor<S>({f}));
    return;
  }

  const Shape pshape{f, f, basis_count};
  const S wbound = S(1) / std::sqrt(static_cast<S>(f) * static_cast<S>(basis_count));
  layer.w = Param<S>(random_uniform<S>(pshape, rng, -wbound, wbound));

  if (kind == BasisKind::kBSpline) {
    layer.knots = bspline_knots<S>(basis_count);
    return;
  }

  // centers linearly spaced on [-2, 2]; widths start at the center spacing
  const double lo = -2.0, hi = 2.0;
  const double spacing = basis_count > 1 ? (hi - lo) / (basis_count - 1) : 2.0;
  layer.mu = Param<S>(Tensor<S>(pshape));
  layer.log_sigma = Param<S>(Tensor<S>(pshape));
  for (int i = 0; i < f; ++i)
    for (int o = 0; o < f; ++o)
      for (int j = 0; j < basis_count; ++j) {
        const std::int64_t at = layer.edge_offset(i, o) + j;
        layer.mu.value[at] =
            static_cast<S>(basis_count > 1 ? lo + spacing * j : 0.0);
        layer.log_sigma.value[at] = static_cast<S>(std::log(spacing));
      }
}

// phi(x) = sum_j w_j B_j(x) for the (i, o) edge
template <typename S>
Tensor<S> phi_edge(const Tensor<S>& xs, const KanLayerParams<S>& layer, int i, int o) {
  if (layer.kind == BasisKind::kMlpReplace)
    throw ConfigError("phi_edge: the mlp replacement arm has no per-edge functions");
  if (i < 0 || i >= layer.in_dim || o < 0 || o >= layer.out_dim)
    throw ConfigError("phi_edge: edge (" + std::to_string(i) + "," + std::to_string(o) +
                      ") out of range for F=" + std::to_string(layer.in_dim));
  const int n = static_cast<int>(xs.size()), M = layer.basis_count;
  auto wj = layer.w_edge(i, o);
  Tensor<S> out({n});
  std::vector<S> basis(M);
  for (int t = 0; t < n; ++t) {
    switch (layer.kind) {
      case BasisKind::kRbf: {
        auto mu = layer.mu_edge(i, o);
        auto ls = layer.log_sigma_edge(i, o);
        for (int j = 0; j < M; ++j) basis[j] = rbf_eval(xs[t], mu[j], std::exp(ls[j]));
        break;
      }
      case BasisKind::kWavelet: {
        auto sh = layer.mu_edge(i, o);
        auto ls = layer.log_sigma_edge(i, o);
        for (int j = 0; j < M; ++j)
          basis[j] = ricker_eval((xs[t] - sh[j]) / std::exp(ls[j]));
        break;
      }
      case BasisKind::kBSpline:
        bspline_basis_row<S>(xs[t], std::span<const S>(layer.knots.data(), layer.knots.size()),
                             kBSplineDegree, basis.data());
        break;
      case BasisKind::kMlpReplace:
        break;
    }
    S acc = 0;
    for (int j = 0; j < M; ++j) acc += wj[j] * basis[j];
    out[t] = acc;
  }
  return out;
}

struct PhiSample {
  double x;
  double phi;
};

// Tabulates one edge function on a uniform grid, ready for CSV export.
template <typename S>
std::vector<PhiSample> phi_curve_table(const KanLayerParams<S>& layer, int i, int o, double x_lo,
                                       double x_hi, int n_points) {
  if (n_points < 2) throw ConfigError("phi_curve_table: need at least 2 grid points");
  if (!(x_lo < x_hi)) throw ConfigError("phi_curve_table: require x_lo < x_hi");
  Tensor<S> xs({n_points});
  for (int t = 0; t < n_points; ++t)
    xs[t] = static_cast<S>(x_lo + (x_hi - x_lo) * t / (n_points - 1));
  Tensor<S> phi = phi_edge(xs, layer, i, o);
  std::vector<PhiSample> rows(n_points);
  for (int t = 0; t < n_points; ++t) {
    if (!std::isfinite(static_cast<double>(phi[t])))
      throw NumericalError("phi_curve_table: non-finite value at x=" +
                           std::to_string(static_cast<double>(xs[t])));
    rows[t] = {static_cast<double>(xs[t]), static_cast<double>(phi[t])};
  }
  return rows;
}

// Oscillation statistic: sign changes of the numerical second difference.
// Exactly zero for affine curves; grows with the number of bends.
inline int phi_zero_crossings(const std::vector<PhiSample>& rows) {
  int count = 0, prev = 0;
  for (size_t t = 1; t + 1 < rows.size(); ++t) {
    const double d2 = rows[t + 1].phi - 2 * rows[t].phi + rows[t - 1].phi;
    const int sign = d2 > 1e-12 ? 1 : (d2 < -1e-12 ? -1 : 0);
    if (sign != 0) {
      if (prev != 0 && sign != prev) ++count;
      prev = sign;
    }
  }
  return count;
}

}  // namespace vik
