#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "vik/gradcheck.hpp"

#include <cmath>

using namespace vik;

namespace {

// Projection loss sum(R . f(x)): turns any forward map into a scalar whose
// input gradient is the backward pass applied to R.
TensorD projection(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  return random_uniform<double>(shape, rng, -1.0, 1.0);
}

double dot(const TensorD& a, const TensorD& b) {
  double s = 0;
  for (std::int64_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void check_report(const GradCheckReport& rep, double bound = 1e-6) {
  for (const auto& g : rep.groups) {
    INFO("group ", g.name, " max_rel_err ", g.max_rel_err);
    CHECK(g.max_rel_err < bound);
    CHECK(g.checked > 0);
  }
}

}  // namespace

TEST_CASE("kan layer gradients, every basis kind") {
  for (auto kind : {BasisKind::kRbf, BasisKind::kWavelet, BasisKind::kBSpline,
                    BasisKind::kMlpReplace}) {
    Rng rng(401);
    KanLayerParams<double> L;
    kan_init(L, 4, 4, kind, rng);
    Param<double> xp(random_uniform<double>({1, 2, 3, 4}, rng, -1.5, 1.5));
    TensorD R = projection(xp.value.shape(), 402);

    auto zero_all = [&] {
      for (auto* p : {&L.mu, &L.log_sigma, &L.w, &L.mlp_w1, &L.mlp_b1, &L.mlp_w2, &L.mlp_b2})
        if (p->size()) p->zero_grad();
      xp.zero_grad();
    };
    zero_all();
    TensorD dx = patch_kan_backward(xp.value, R, L);
    xp.grad = dx;

    NamedParams params;
    params.emplace_back("input", &xp);
    if (kind == BasisKind::kMlpReplace) {
      params.emplace_back("mlp_w1", &L.mlp_w1);
      params.emplace_back("mlp_b1", &L.mlp_b1);
      params.emplace_back("mlp_w2", &L.mlp_w2);
      params.emplace_back("mlp_b2", &L.mlp_b2);
    } else {
      params.emplace_back("w", &L.w);
      if (kind != BasisKind::kBSpline) {
        params.emplace_back("mu", &L.mu);
        params.emplace_back("log_sigma", &L.log_sigma);
      }
    }
    auto loss = [&] { return dot(patch_kan_forward(xp.value, L), R); };
    INFO("kind ", basis_kind_name(kind));
    check_report(finite_diff_check(loss, params));
  }
}

TEST_CASE("axis mixing gradients") {
  Rng rng(411);
  MixerParams<double> m;
  mixer_init(m, 6, 4, 4, 2, 3, 3, 2, BasisKind::kRbf, 1, rng);
  Param<double> xp(random_uniform<double>({2, 6, 4, 4}, rng, -1.0, 1.0));
  TensorD R = projection(xp.value.shape(), 412);

  mixer_visit_params(m, "m", [](const std::string&, Param<double>& p) { p.zero_grad(); });
  AxisTape<double> tape;
  axis_mix_forward(xp.value, m, &tape);
  xp.grad = axis_mix_backward(m, tape, R);

  NamedParams params = {{"input", &xp},   {"axis_h", &m.axis_h}, {"axis_w", &m.axis_w},
                        {"rw_w1", &m.rw_w1}, {"rw_b1", &m.rw_b1}, {"rw_w2", &m.rw_w2},
                        {"rw_b2", &m.rw_b2}};
  auto loss = [&] { return dot(axis_mix_forward(xp.value, m), R); };
  check_report(finite_diff_check(loss, params));
}

TEST_CASE("lowrank global gradients") {
  Rng rng(421);
  MixerParams<double> m;
  mixer_init(m, 3, 4, 4, 2, 3, 3, 5, BasisKind::kRbf, 1, rng);
  Param<double> xp(random_uniform<double>({2, 3, 4, 4}, rng, -1.0, 1.0));
  TensorD R = projection(xp.value.shape(), 422);

  m.P.zero_grad();
  m.Q.zero_grad();
  LowRankTape<double> tape;
  lowrank_global_forward(xp.value, m.P.value, m.Q.value, &tape);
  xp.grad = lowrank_global_backward(m, tape, R);

  NamedParams params = {{"input", &xp}, {"P", &m.P}, {"Q", &m.Q}};
  auto loss = [&] { return dot(lowrank_global_forward(xp.value, m.P.value, m.Q.value), R); };
  check_report(finite_diff_check(loss, params));
}

TEST_CASE("layer norm gradients") {
  Rng rng(431);
  Param<double> xp(random_uniform<double>({2, 3, 5}, rng, -2.0, 2.0));
  Param<double> gamma(random_uniform<double>({5}, rng, 0.5, 1.5));
  Param<double> beta(random_uniform<double>({5}, rng, -0.5, 0.5));
  TensorD R = projection(xp.value.shape(), 432);
  const double eps = 1e-5;

  auto g = layer_norm_backward(xp.value, gamma.value, eps, R);
  xp.grad = g.dx;
  gamma.grad = g.dgamma;
  beta.grad = g.dbeta;

  NamedParams params = {{"input", &xp}, {"gamma", &gamma}, {"beta", &beta}};
  auto loss = [&] { return dot(layer_norm(xp.value, gamma.value, beta.value, eps), R); };
  check_report(finite_diff_check(loss, params));
}

TEST_CASE("conv2d gradients") {
  Rng rng(441);
  Param<double> xp(random_uniform<double>({2, 3, 6, 6}, rng, -1.0, 1.0));
  Param<double> wp(random_uniform<double>({4, 3, 2, 2}, rng, -1.0, 1.0));
  Param<double> bp(random_uniform<double>({4}, rng, -0.5, 0.5));
  const int stride = 2;
  TensorD R = projection({2, 4, 3, 3}, 442);

  auto g = conv2d_backward(xp.value, wp.value, stride, R);
  xp.grad = g.dx;
  wp.grad = g.dw;
  bp.grad = g.dbias;

  NamedParams params = {{"input", &xp}, {"w", &wp}, {"bias", &bp}};
  auto loss = [&] { return dot(conv2d(xp.value, wp.value, bp.value, stride), R); };
  check_report(finite_diff_check(loss, params));
}

TEST_CASE("depthwise axis conv gradients") {
  Rng rng(451);
  Param<double> xp(random_uniform<double>({2, 3, 5, 5}, rng, -1.0, 1.0));
  Param<double> kp(random_uniform<double>({3, 3}, rng, -1.0, 1.0));
  TensorD R = projection(xp.value.shape(), 452);
  for (auto axis : {Axis::kHorizontal, Axis::kVertical}) {
    auto g = depthwise_conv_axis_backward(xp.value, kp.value, axis, R);
    xp.grad = g.dx;
    kp.grad = g.dkernels;
    NamedParams params = {{"input", &xp}, {"kernels", &kp}};
    auto loss = [&] { return dot(depthwise_conv_axis(xp.value, kp.value, axis), R); };
    check_report(finite_diff_check(loss, params));
  }
}

TEST_CASE("gelu and relu gradients") {
  Rng rng(461);
  Param<double> xp(random_uniform<double>({40}, rng, -2.0, 2.0));
  TensorD R = projection(xp.value.shape(), 462);

  xp.grad = gelu_backward(xp.value, R);
  auto gelu_loss = [&] { return dot(gelu(xp.value), R); };
  check_report(finite_diff_check(gelu_loss, {{"gelu_in", &xp}}));

  xp.grad = relu_backward(xp.value, R);
  auto relu_loss = [&] { return dot(relu(xp.value), R); };
  check_report(finite_diff_check(relu_loss, {{"relu_in", &xp}}));
}

TEST_CASE("softmax cross entropy gradient is softmax minus one-hot over B") {
  Rng rng(471);
  TensorD logits = random_uniform<double>({3, 5}, rng, -2.0, 2.0);
  std::vector<int> labels = {4, 0, 2};
  auto ce = cross_entropy(logits, labels);
  for (int b = 0; b < 3; ++b) {
    // independent softmax computation
    double mx = logits(b, 0);
    for (int k = 1; k < 5; ++k) mx = std::max(mx, logits(b, k));
    double z = 0;
    for (int k = 0; k < 5; ++k) z += std::exp(logits(b, k) - mx);
    for (int k = 0; k < 5; ++k) {
      const double p = std::exp(logits(b, k) - mx) / z;
      const double want = (p - (k == labels[b] ? 1.0 : 0.0)) / 3.0;
      CHECK(ce.dlogits(b, k) == doctest::Approx(want).epsilon(1e-12));
    }
  }

  // and against finite differences
  Param<double> lp(logits);
  lp.grad = ce.dlogits;
  auto loss = [&] { return cross_entropy(lp.value, labels).loss; };
  check_report(finite_diff_check(loss, {{"logits", &lp}}));
}

TEST_CASE("rbf edge gradient vanishes exactly at its center") {
  Rng rng(481);
  KanLayerParams<double> L;
  kan_init(L, 1, 1, BasisKind::kRbf, rng);
  L.mu.value[0] = 0.3;
  L.w.value[0] = 0.8;
  TensorD x({1, 1, 1, 1});
  x[0] = 0.3;  // at the center: dB/dx = B * (mu - x) / sigma^2 = 0
  TensorD dout = TensorD::full({1, 1, 1, 1}, 1.0);
  L.w.zero_grad();
  L.mu.zero_grad();
  L.log_sigma.zero_grad();
  TensorD dx = patch_kan_backward(x, dout, L);
  CHECK(dx[0] == 0.0);
  CHECK(L.w.grad[0] == 1.0);  // B(mu) = 1 exactly
}

TEST_CASE("zero upstream gradient produces zero everywhere") {
  Rng rng(491);
  BackboneConfig cfg;
  cfg.in_h = cfg.in_w = 32;
  cfg.num_classes = 4;
  const int chans[4] = {4, 8, 8, 8};
  for (int s = 0; s < kNumStages; ++s) {
    cfg.stages[s].depth = 1;
    cfg.stages[s].channels = chans[s];
    cfg.stages[s].p = s < 3 ? 2 : 1;
    cfg.stages[s].basis_count = 3;
    cfg.stages[s].rank = 1;
    cfg.stages[s].kernel = 3;
    cfg.stages[s].expand = 1;
  }
  auto net = build_backbone<double>(cfg, rng);
  zero_grads(net);
  TensorD img = random_uniform<double>({1, 3, 32, 32}, rng, 0.0, 1.0);
  BackboneTape<double> tape;
  backbone_forward(img, net, &tape);
  backbone_backward(net, tape, TensorD({1, 4}));
  visit_params(net, [&](const std::string& name, Param<double>& p) {
    for (std::int64_t i = 0; i < p.size(); ++i) {
      INFO("group ", name);
      CHECK(p.grad[i] == 0.0);
    }
  });
}

TEST_CASE("mixer backward is linear in the upstream gradient") {
  Rng rng(501);
  MixerParams<double> m;
  mixer_init(m, 4, 4, 4, 2, 3, 3, 2, BasisKind::kRbf, 1, rng);
  TensorD x = random_uniform<double>({1, 4, 4, 4}, rng, -1.0, 1.0);
  TensorD d1 = random_uniform<double>(x.shape(), rng, -1.0, 1.0);
  TensorD d2 = random_uniform<double>(x.shape(), rng, -1.0, 1.0);
  const double a = 2.5, b = -1.25;

  auto run = [&](const TensorD& dout) {
    MixerTape<double> tape;
    mixer_forward(x, m, &tape);
    return mixer_backward(m, tape, dout);
  };
  TensorD g1 = run(d1), g2 = run(d2);
  TensorD mix(d1.shape());
  for (std::int64_t i = 0; i < mix.size(); ++i) mix[i] = a * d1[i] + b * d2[i];
  TensorD gmix = run(mix);
  for (std::int64_t i = 0; i < gmix.size(); ++i)
    CHECK(gmix[i] == doctest::Approx(a * g1[i] + b * g2[i]).epsilon(1e-10));
}

TEST_CASE("consumed tapes refuse a second backward pass") {
  Rng rng(511);
  BackboneConfig cfg;
  cfg.in_h = cfg.in_w = 32;
  cfg.num_classes = 3;
  for (int s = 0; s < kNumStages; ++s) {
    cfg.stages[s].depth = 1;
    cfg.stages[s].channels = 4;
    cfg.stages[s].p = 1;
    cfg.stages[s].basis_count = 3;
    cfg.stages[s].rank = 1;
    cfg.stages[s].kernel = 3;
    cfg.stages[s].expand = 1;
  }
  auto net = build_backbone<double>(cfg, rng);
  TensorD img = random_uniform<double>({1, 3, 32, 32}, rng, 0.0, 1.0);
  BackboneTape<double> tape;
  TensorD logits = backbone_forward(img, net, &tape);
  auto ce = cross_entropy(logits, std::vector<int>{1});
  backbone_backward(net, tape, ce.dlogits);
  CHECK_THROWS_AS(backbone_backward(net, tape, ce.dlogits), UsageError);
}

TEST_CASE("block gradients through both residual branches") {
  Rng rng(521);
  StageSpec st;
  st.channels = 4;
  st.p = 2;
  st.basis_count = 3;
  st.rank = 2;
  st.kernel = 3;
  st.expand = 2;
  BlockParams<double> blk;
  block_init(blk, st, 4, 4, BasisKind::kRbf, true, true, rng);
  Param<double> xp(random_uniform<double>({1, 4, 4, 4}, rng, -1.0, 1.0));
  TensorD R = projection(xp.value.shape(), 522);

  NamedParams params = {{"input", &xp}};
  const std::string names[] = {"norm1_g", "norm1_b", "norm2_g", "norm2_b",
                               "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"};
  Param<double>* ptrs[] = {&blk.norm1_g, &blk.norm1_b, &blk.norm2_g, &blk.norm2_b,
                           &blk.mlp_w1,  &blk.mlp_b1,  &blk.mlp_w2,  &blk.mlp_b2};
  for (int i = 0; i < 8; ++i) params.emplace_back(names[i], ptrs[i]);
  mixer_visit_params(blk.mixer, "mixer", [&](const std::string& n, Param<double>& p) {
    params.emplace_back(n, &p);
  });

  for (auto& [n, p] : params) p->zero_grad();
  BlockTape<double> tape;
  block_forward(xp.value, blk, &tape);
  xp.grad = block_backward(blk, tape, R);

  auto loss = [&] { return dot(block_forward(xp.value, blk), R); };
  check_report(finite_diff_check(loss, params));
}

TEST_CASE("whole-model gradcheck on a scoped subset") {
  Rng rng(531);
  BackboneConfig cfg;
  cfg.in_h = cfg.in_w = 32;
  cfg.num_classes = 5;
  const int chans[4] = {4, 6, 6, 8};
  for (int s = 0; s < kNumStages; ++s) {
    cfg.stages[s].depth = 1;
    cfg.stages[s].channels = chans[s];
    cfg.stages[s].p = s == 1 || s == 2 ? 2 : 1;
    cfg.stages[s].basis_count = 3;
    cfg.stages[s].rank = s == 3 ? 1 : 2;
    cfg.stages[s].kernel = 3;
    cfg.stages[s].expand = 1;
  }
  auto net = build_backbone<double>(cfg, rng);
  TensorD imgs = random_uniform<double>({2, 3, 32, 32}, rng, 0.0, 1.0);
  std::vector<int> labels = {0, 4};

  GradCheckOptions opt;
  opt.scope = "stem.,s1.b0,head.";
  opt.max_coords = 6;
  opt.threshold = 1e-5;
  auto rep = model_gradcheck(net, imgs, labels, opt);
  CHECK(rep.all_pass());
  CHECK(rep.groups.size() >= 10);

  opt.scope = "nothing_matches_this";
  CHECK_THROWS_AS(model_gradcheck(net, imgs, labels, opt), ConfigError);
}

TEST_CASE("scope matching is a comma-separated substring filter") {
  CHECK(scope_matches("all", "anything"));
  CHECK(scope_matches("s1.b0", "s1.b0.mixer.kan.w"));
  CHECK(scope_matches(".P,.Q", "s2.b0.mixer.Q"));
  CHECK(!scope_matches(".P,.Q", "s2.b0.mixer.rw_w1"));
  CHECK(!scope_matches("head", "stem.w"));
}
