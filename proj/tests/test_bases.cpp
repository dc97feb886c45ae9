#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "vik/bases.hpp"

#include <cmath>

using namespace vik;

TEST_CASE("rbf values are in (0, 1] and peak exactly at the centers") {
  TensorD mu({5}, {-2.0, -1.0, 0.0, 1.0, 2.0});
  TensorD sigma = TensorD::full({5}, 0.7);
  TensorD xs({41});
  for (int i = 0; i < 41; ++i) xs[i] = -4.0 + 0.2 * i;
  TensorD act = rbf_activations(xs, mu, sigma);
  for (std::int64_t i = 0; i < act.size(); ++i) {
    CHECK(act[i] > 0.0);
    CHECK(act[i] <= 1.0);
  }
  for (int j = 0; j < 5; ++j) {
    TensorD at_mu({1}, {mu[j]});
    TensorD row = rbf_activations(at_mu, mu, sigma);
    CHECK(row(0, j) == 1.0);  // exp(0) exactly
    for (int k = 0; k < 5; ++k)
      if (k != j) CHECK(row(0, k) < 1.0);
  }
}

TEST_CASE("rbf matches the closed form") {
  // exp(-(x-mu)^2 / (2 sigma^2)) at hand-picked points
  CHECK(rbf_eval(1.0, 0.0, 1.0) == doctest::Approx(std::exp(-0.5)).epsilon(1e-15));
  CHECK(rbf_eval(2.0, -1.0, 1.5) == doctest::Approx(std::exp(-9.0 / 4.5)).epsilon(1e-15));
  CHECK(rbf_eval(0.25, 0.25, 0.1) == 1.0);
}

TEST_CASE("rbf rejects non-positive widths") {
  TensorD mu({2}, {0.0, 1.0});
  TensorD bad({2}, {1.0, 0.0});
  TensorD xs({1}, {0.5});
  CHECK_THROWS_AS(rbf_activations(xs, mu, bad), ConfigError);
}

TEST_CASE("ricker wavelet closed-form values") {
  CHECK(ricker_eval(0.0) == 1.0);
  CHECK(ricker_eval(1.0) == 0.0);
  CHECK(ricker_eval(-1.0) == 0.0);
  CHECK(ricker_eval(2.0) == doctest::Approx(-3.0 * std::exp(-2.0)).epsilon(1e-15));
  // derivative (t^3 - 3t) e^{-t^2/2}: zero at t = 0 and t = +-sqrt(3)
  CHECK(ricker_grad(0.0) == 0.0);
  CHECK(ricker_grad(std::sqrt(3.0)) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(ricker_grad(1.0) == doctest::Approx(-2.0 * std::exp(-0.5)).epsilon(1e-15));
}

TEST_CASE("bspline partition of unity on the supported interval") {
  for (int M : {4, 6, 8, 11}) {
    auto knots = bspline_knots<double>(M);
    CHECK(static_cast<int>(knots.size()) == M + kBSplineDegree + 1);
    TensorD xs({201});
    for (int i = 0; i < 201; ++i) xs[i] = -5.0 + 10.0 * i / 200.0;  // runs past both ends
    TensorD act = bspline_activations(xs, knots);
    for (int i = 0; i < 201; ++i) {
      double sum = 0;
      for (int j = 0; j < M; ++j) {
        CHECK(act(i, j) >= 0.0);
        sum += act(i, j);
      }
      // outside [lo, hi] the input is clamped, so unity still holds
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("bspline rejects degenerate grids") {
  CHECK_THROWS_AS(bspline_knots<double>(3), ConfigError);  // needs degree+1 = 4
  std::vector<double> bad = {0.0, 1.0, 0.5, 2.0, 3.0, 4.0};
  TensorD xs({1}, {0.5});
  CHECK_THROWS_AS(bspline_activations(xs, bad), ConfigError);
}

TEST_CASE("kan_init lays out centers and widths per edge") {
  Rng rng(5);
  KanLayerParams<double> L;
  kan_init(L, 4, 8, BasisKind::kRbf, rng);
  CHECK(L.in_dim == 4);
  CHECK(L.out_dim == 4);
  CHECK(L.basis_count == 8);

  const double spacing = 4.0 / 7.0;
  for (int i = 0; i < 4; ++i)
    for (int o = 0; o < 4; ++o) {
      auto mu = L.mu_edge(i, o);
      auto ls = L.log_sigma_edge(i, o);
      for (int j = 0; j < 8; ++j) {
        CHECK(mu[j] == doctest::Approx(-2.0 + spacing * j).epsilon(1e-12));
        CHECK(ls[j] == doctest::Approx(std::log(spacing)).epsilon(1e-12));
      }
    }

  // every edge owns its own parameters: mutating one leaves the rest alone
  const double before = L.mu.value[L.edge_offset(2, 3) + 0];
  L.mu.value[L.edge_offset(1, 1) + 0] += 1.0;
  CHECK(L.mu.value[L.edge_offset(2, 3) + 0] == before);
}

TEST_CASE("rbf layer with F=4, M=8 carries 384 trainable scalars") {
  Rng rng(1);
  KanLayerParams<float> L;
  kan_init(L, 4, 8, BasisKind::kRbf, rng);
  CHECK(L.mu.size() + L.log_sigma.size() + L.w.size() == 384);  // 3 * 4 * 4 * 8
}

TEST_CASE("mlp replacement arm matches the basis parameter budget") {
  for (auto [f, m] : {std::pair{4, 8}, std::pair{16, 8}, std::pair{4, 4}, std::pair{16, 16}}) {
    const int h = mlp_replace_hidden_dim(f, m);
    const long long target = 3LL * f * f * m;
    const long long actual = static_cast<long long>(f) * h + h + static_cast<long long>(h) * f + f;
    CHECK(std::abs(actual - target) <= 0.05 * target);

    Rng rng(2);
    KanLayerParams<float> L;
    kan_init(L, f, m, BasisKind::kMlpReplace, rng);
    CHECK(L.mlp_w1.size() + L.mlp_b1.size() + L.mlp_w2.size() + L.mlp_b2.size() == actual);
  }
}

TEST_CASE("phi_edge is the weighted basis sum") {
  Rng rng(9);
  KanLayerParams<double> L;
  kan_init(L, 2, 5, BasisKind::kRbf, rng);
  TensorD xs({7});
  for (int t = 0; t < 7; ++t) xs[t] = -2.5 + 0.8 * t;
  TensorD phi = phi_edge(xs, L, 1, 0);
  auto mu = L.mu_edge(1, 0);
  auto ls = L.log_sigma_edge(1, 0);
  auto w = L.w_edge(1, 0);
  for (int t = 0; t < 7; ++t) {
    double want = 0;
    for (int j = 0; j < 5; ++j) want += w[j] * rbf_eval(xs[t], mu[j], std::exp(ls[j]));
    CHECK(phi[t] == doctest::Approx(want).epsilon(1e-14));
  }
  CHECK_THROWS_AS(phi_edge(xs, L, 2, 0), ConfigError);
  CHECK_THROWS_AS(phi_edge(xs, L, 0, -1), ConfigError);
}

TEST_CASE("phi_curve_table samples a uniform grid") {
  Rng rng(3);
  KanLayerParams<double> L;
  kan_init(L, 2, 4, BasisKind::kRbf, rng);
  auto rows = phi_curve_table(L, 0, 1, -2.0, 2.0, 101);
  CHECK(rows.size() == 101);
  CHECK(rows.front().x == doctest::Approx(-2.0));
  CHECK(rows.back().x == doctest::Approx(2.0));
  CHECK(rows[50].x == doctest::Approx(0.0));
  TensorD xs({1}, {rows[25].x});
  CHECK(rows[25].phi == doctest::Approx(phi_edge(xs, L, 0, 1)[0]).epsilon(1e-14));
  CHECK_THROWS_AS(phi_curve_table(L, 0, 0, 2.0, -2.0, 11), ConfigError);
  CHECK_THROWS_AS(phi_curve_table(L, 0, 0, -2.0, 2.0, 1), ConfigError);
}

TEST_CASE("zero-crossing statistic distinguishes straight from bent curves") {
  auto tabulate = [](auto f) {
    std::vector<PhiSample> rows(101);
    for (int t = 0; t < 101; ++t) {
      const double x = -2.0 + 4.0 * t / 100.0;
      rows[t] = {x, f(x)};
    }
    return rows;
  };
  CHECK(phi_zero_crossings(tabulate([](double x) { return 0.7 * x - 0.1; })) == 0);
  CHECK(phi_zero_crossings(tabulate([](double x) { return x * x; })) == 0);
  CHECK(phi_zero_crossings(tabulate([](double x) { return x * x * x; })) == 1);
  // sin(pi x) on [-2, 2]: curvature -sin flips sign at x = -1, 0, 1
  CHECK(phi_zero_crossings(tabulate([](double x) { return std::sin(M_PI * x); })) == 3);
}

TEST_CASE("basis kind names round-trip") {
  for (auto k : {BasisKind::kRbf, BasisKind::kBSpline, BasisKind::kWavelet,
                 BasisKind::kMlpReplace})
    CHECK(basis_kind_from_name(basis_kind_name(k)) == k);
  CHECK_THROWS_AS(basis_kind_from_name("fourier"), ConfigError);
}
