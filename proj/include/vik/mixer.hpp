#pragma once

#include "vik/bases.hpp"
#include "vik/flops.hpp"
#include "vik/ops.hpp"

#include <cstdio>
#include <vector>

namespace vik {

inline int reweight_hidden_dim(int c) { return std::max(c / 4, 8); }

// MultiPatch-RBFKAN mixer. The KAN layer is shared across patches and
// channels (optionally g independent layers over channel groups); P/Q are
// sized to a fixed token count N = H*W, so one MixerParams serves one stage
// resolution.
template <typename S>
struct MixerParams {
  int channels = 0;
  int height = 0, width = 0;  // token grid this mixer is bound to
  int p = 2;                  // patch side, F = p*p
  int k = 5;                  // axis kernel size
  int r = 1;                  // global rank
  int groups = 1;
  bool use_axis = true;    // ablation: identity instead of axis mixing
  bool use_global = true;  // ablation: drop the low-rank path

  std::vector<KanLayerParams<S>> kans;  // one per channel group
  Param<S> axis_h, axis_w;              // [C, k] depthwise kernels
  Param<S> rw_w1, rw_b1, rw_w2, rw_b2;  // reweight MLP, C -> hidden -> 2
  Param<S> P, Q;                        // [r, N], [N, r]

  int n_tokens() const { return height * width; }
  int patch_dim() const { return p * p; }
};

template <typename S>
void mixer_init(MixerParams<S>& m, int channels, int height, int width, int p, int basis_count,
                int k, int r, BasisKind kind, int groups, Rng& rng, bool use_axis = true,
                bool use_global = true) {
  if (height % p != 0 || width % p != 0)
    throw ShapeError("mixer: H=" + std::to_string(height) + ", W=" + std::to_string(width) +
                     " not divisible by p=" + std::to_string(p));
  if (groups < 1 || channels % groups != 0)
    throw ConfigError("mixer: channels " + std::to_string(channels) +
                      " not divisible by groups " + std::to_string(groups));
  const int n = height * width;
  if (r < 1 || r > n)
    throw ConfigError("mixer: rank r=" + std::to_string(r) + " outside [1, N=" +
                      std::to_string(n) + "]");
  if (n > 1 && 2 * r >= n)
    std::fprintf(stderr, "warning: mixer rank r=%d is not small against N=%d\n", r, n);

  m.channels = channels;
  m.height = height;
  m.width = width;
  m.p = p;
  m.k = k;
  m.r = r;
  m.groups = groups;
  m.use_axis = use_axis;
  m.use_global = use_global;

  m.kans.assign(groups, KanLayerParams<S>{});
  for (int g = 0; g < groups; ++g) kan_init(m.kans[g], p * p, basis_count, kind, rng);

  if (use_axis) {
    const S kb = S(1) / std::sqrt(static_cast<S>(k));
    m.axis_h = Param<S>(random_uniform<S>({channels, k}, rng, -kb, kb));
    m.axis_w = Param<S>(random_uniform<S>({channels, k}, rng, -kb, kb));
    const int hid = reweight_hidden_dim(channels);
    const S cb = S(1) / std::sqrt(static_cast<S>(channels));
    const S hb = S(1) / std::sqrt(static_cast<S>(hid));
    m.rw_w1 = Param<S>(random_uniform<S>({channels, hid}, rng, -cb, cb));
    m.rw_b1 = Param<S>(Tensor<S>({hid}));
    m.rw_w2 = Param<S>(random_uniform<S>({hid, 2}, rng, -hb, hb));
    m.rw_b2 = Param<S>(Tensor<S>({2}));
  }
  if (use_global) {
    const S pb = S(1) / std::sqrt(static_cast<S>(n));
    const S qb = S(1) / std::sqrt(static_cast<S>(r));
    m.P = Param<S>(random_uniform<S>({r, n}, rng, -pb, pb));
    m.Q = Param<S>(random_uniform<S>({n, r}, rng, -qb, qb));
  }
}

// ---------------------------------------------------------------------------
// patch regrouping: [B,C,H,W] <-> [B,C,N/F,F], row-major over patches and
// row-major within each patch

template <typename S>
Tensor<S> patchify(const Tensor<S>& x, int p) {
  if (x.ndim() != 4) throw ShapeError("patchify: input must be [B,C,H,W]");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % p != 0 || W % p != 0)
    throw ShapeError("patchify: H=" + std::to_string(H) + ", W=" + std::to_string(W) +
                     " not divisible by p=" + std::to_string(p));
  const int ph = H / p, pw = W / p, f = p * p;
  Tensor<S> out({B, C, ph * pw, f});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
          out(b, c, (i / p) * pw + j / p, (i % p) * p + j % p) = x(b, c, i, j);
  return out;
}

template <typename S>
Tensor<S> unpatchify(const Tensor<S>& patches, int height, int width, int p) {
  if (patches.ndim() != 4) throw ShapeError("unpatchify: input must be [B,C,NP,F]");
  const int B = patches.dim(0), C = patches.dim(1);
  if (patches.dim(3) != p * p || patches.dim(2) * patches.dim(3) != height * width)
    throw ShapeError("unpatchify: patches " + shape_str(patches.shape()) + " do not tile " +
                     std::to_string(height) + "x" + std::to_string(width) + " with p=" +
                     std::to_string(p));
  const int pw = width / p;
  Tensor<S> x({B, C, height, width});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < height; ++i)
        for (int j = 0; j < width; ++j)
          x(b, c, i, j) = patches(b, c, (i / p) * pw + j / p, (i % p) * p + j % p);
  return x;
}

// ---------------------------------------------------------------------------
// patch KAN: out_o = sum_i phi_{i,o}(x_i) per patch row, every edge carrying
// its own basis parameters

template <typename S>
using EigArr = Eigen::Array<S, Eigen::Dynamic, 1>;

template <typename S>
void kan_rows_forward(const S* xin, S* yout, std::int64_t rows, const KanLayerParams<S>& L,
                      FlopMeter* meter) {
  const int F = L.in_dim, M = L.basis_count;
  ConstMatMap<S> X(xin, rows, F);
  MatMap<S> Y(yout, rows, F);

  if (L.kind == BasisKind::kMlpReplace) {
    const int H = L.mlp_w1.value.dim(1);
    ConstMatMap<S> W1(L.mlp_w1.value.data(), F, H), W2(L.mlp_w2.value.data(), H, F);
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> hid = X * W1;
    for (int j = 0; j < H; ++j) hid.col(j).array() += L.mlp_b1.value[j];
    hid = hid.cwiseMax(S(0));
    Y.noalias() = hid * W2;
    for (int o = 0; o < F; ++o) Y.col(o).array() += L.mlp_b2.value[o];
    if (meter)
      meter->add(Component::kPatchKan,
                 rows * (2LL * F * H + 2LL * H + F + static_cast<std::int64_t>(H) * kReluUnits));
    return;
  }

  Y.setZero();
  EigArr<S> d(rows), bas(rows);
  if (L.kind == BasisKind::kBSpline) {
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> Bmat(rows, M);
    for (int i = 0; i < F; ++i) {
      for (std::int64_t t = 0; t < rows; ++t)
        bspline_basis_row<S>(X(t, i), std::span<const S>(L.knots.data(), L.knots.size()),
                             kBSplineDegree, &Bmat(t, 0));
      for (int o = 0; o < F; ++o) {
        auto w = L.w_edge(i, o);
        for (int j = 0; j < M; ++j) Y.col(o).array() += w[j] * Bmat.col(j).array();
      }
    }
    if (meter)
      meter->add(Component::kPatchKan,
                 rows * static_cast<std::int64_t>(F) * F * M * kBsplineEvalUnits);
    return;
  }

  for (int i = 0; i < F; ++i) {
    auto xi = X.col(i).array();
    for (int o = 0; o < F; ++o) {
      auto mu = L.mu_edge(i, o);
      auto ls = L.log_sigma_edge(i, o);
      auto w = L.w_edge(i, o);
      for (int j = 0; j < M; ++j) {
        if (L.kind == BasisKind::kRbf) {
          const S sig = std::exp(ls[j]);
          d = xi - mu[j];
          bas = (-d * d / (S(2) * sig * sig)).exp();
        } else {  // wavelet: Ricker of t = (x - shift) / scale
          const S sc = std::exp(ls[j]);
          d = (xi - mu[j]) / sc;
          bas = (S(1) - d * d) * (S(-0.5) * d * d).exp();
        }
        Y.col(o).array() += w[j] * bas;
      }
    }
  }
  if (meter) {
    const std::int64_t c1 = L.kind == BasisKind::kRbf ? kRbfEvalUnits : kWaveletEvalUnits;
    meter->add(Component::kPatchKan, rows * static_cast<std::int64_t>(F) * F * M * c1);
  }
}

// Accumulates parameter gradients into L and writes input gradients to dxout.
template <typename S>
void kan_rows_backward(const S* xin, const S* dyin, S* dxout, std::int64_t rows,
                       KanLayerParams<S>& L) {
  const int F = L.in_dim, M = L.basis_count;
  ConstMatMap<S> X(xin, rows, F), dY(dyin, rows, F);
  MatMap<S> dX(dxout, rows, F);
  dX.setZero();

  if (L.kind == BasisKind::kMlpReplace) {
    const int H = L.mlp_w1.value.dim(1);
    ConstMatMap<S> W1(L.mlp_w1.value.data(), F, H), W2(L.mlp_w2.value.data(), H, F);
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> pre = X * W1;
    for (int j = 0; j < H; ++j) pre.col(j).array() += L.mlp_b1.value[j];
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> hid = pre.cwiseMax(S(0));
    MatMap<S> dW2(L.mlp_w2.grad.data(), H, F), dW1(L.mlp_w1.grad.data(), F, H);
    dW2.noalias() += hid.transpose() * dY;
    for (int o = 0; o < F; ++o) L.mlp_b2.grad[o] += dY.col(o).sum();
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dhid = dY * W2.transpose();
    dhid = (pre.array() > S(0)).select(dhid, S(0));
    dW1.noalias() += X.transpose() * dhid;
    for (int j = 0; j < H; ++j) L.mlp_b1.grad[j] += dhid.col(j).sum();
    dX.noalias() = dhid * W1.transpose();
    return;
  }

  EigArr<S> d(rows), bas(rows), coeff(rows), go(rows);
  if (L.kind == BasisKind::kBSpline) {
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> Bmat(rows, M),
        dBmat(rows, M);
    for (int i = 0; i < F; ++i) {
      for (std::int64_t t = 0; t < rows; ++t)
        bspline_basis_row<S>(X(t, i), std::span<const S>(L.knots.data(), L.knots.size()),
                             kBSplineDegree, &Bmat(t, 0), &dBmat(t, 0));
      for (int o = 0; o < F; ++o) {
        auto w = L.w_edge(i, o);
        S* dw = L.w.grad.data() + L.edge_offset(i, o);
        go = dY.col(o).array();
        for (int j = 0; j < M; ++j) {
          dw[j] += (go * Bmat.col(j).array()).sum();
          dX.col(i).array() += w[j] * go * dBmat.col(j).array();
        }
      }
    }
    return;
  }

  for (int i = 0; i < F; ++i) {
    auto xi = X.col(i).array();
    for (int o = 0; o < F; ++o) {
      auto mu = L.mu_edge(i, o);
      auto ls = L.log_sigma_edge(i, o);
      auto w = L.w_edge(i, o);
      const std::int64_t at = L.edge_offset(i, o);
      go = dY.col(o).array();
      for (int j = 0; j < M; ++j) {
        if (L.kind == BasisKind::kRbf) {
          const S sig = std::exp(ls[j]);
          const S inv_s2 = S(1) / (sig * sig);
          d = xi - mu[j];
          bas = (-d * d * (S(0.5) * inv_s2)).exp();
          L.w.grad[at + j] += (go * bas).sum();
          coeff = go * (w[j] * bas);
          // dB/dx = B (mu - x)/sigma^2, dB/dmu = -dB/dx, dB/dlog sigma = B d^2/sigma^2
          dX.col(i).array() += coeff * (-d) * inv_s2;
          L.mu.grad[at + j] += (coeff * d * inv_s2).sum();
          L.log_sigma.grad[at + j] += (coeff * d * d * inv_s2).sum();
        } else {
          const S sc = std::exp(ls[j]);
          d = (xi - mu[j]) / sc;  // t
          bas = (S(1) - d * d) * (S(-0.5) * d * d).exp();
          L.w.grad[at + j] += (go * bas).sum();
          coeff = go * w[j];
          // psi'(t) = (t^3 - 3t) e^{-t^2/2}; dt/dx = 1/s, dt/dshift = -1/s,
          // dt/dlog s = -t
          EigArr<S> dpsi = (d * d * d - S(3) * d) * (S(-0.5) * d * d).exp();
          dX.col(i).array() += coeff * dpsi / sc;
          L.mu.grad[at + j] += (coeff * (-dpsi) / sc).sum();
          L.log_sigma.grad[at + j] += (coeff * (-d) * dpsi).sum();
        }
      }
    }
  }
}

// Walks (batch, channel-group) blocks of the [B,C,NP,F] patch tensor; rows of
// one block are contiguous.
template <typename S, typename Fn>
void for_each_kan_block(int B, int C, int NP, int F, int groups, Fn&& fn) {
  const int cg = C / groups;
  for (int b = 0; b < B; ++b)
    for (int g = 0; g < groups; ++g) {
      const std::int64_t off =
          (static_cast<std::int64_t>(b) * C + static_cast<std::int64_t>(g) * cg) * NP * F;
      fn(g, off, static_cast<std::int64_t>(cg) * NP);
    }
}

template <typename S>
Tensor<S> patch_kan_forward(const Tensor<S>& patches, const KanLayerParams<S>& kan,
                            FlopMeter* meter = nullptr) {
  if (patches.ndim() != 4) throw ShapeError("patch_kan: patches must be [B,C,NP,F]");
  if (patches.dim(3) != kan.in_dim)
    throw ShapeError("patch_kan: patch dimension " + std::to_string(patches.dim(3)) +
                     " != kan.in_dim " + std::to_string(kan.in_dim));
  Tensor<S> out(patches.shape());
  const std::int64_t rows =
      static_cast<std::int64_t>(patches.dim(0)) * patches.dim(1) * patches.dim(2);
  kan_rows_forward(patches.data(), out.data(), rows, kan, meter);
  return out;
}

template <typename S>
Tensor<S> patch_kan_backward(const Tensor<S>& patches, const Tensor<S>& dout,
                             KanLayerParams<S>& kan) {
  if (!patches.same_shape(dout)) throw ShapeError("patch_kan backward: shape mismatch");
  Tensor<S> dx(patches.shape());
  const std::int64_t rows =
      static_cast<std::int64_t>(patches.dim(0)) * patches.dim(1) * patches.dim(2);
  kan_rows_backward(patches.data(), dout.data(), dx.data(), rows, kan);
  return dx;
}

// ---------------------------------------------------------------------------
// axis-wise separable mixing with learned per-image reweighting

template <typename S>
struct AxisTape {
  Tensor<S> y;                 // input
  Tensor<S> gap, pre, hid;     // reweight MLP activations
  Tensor<S> alpha;             // [B, 2], row-wise softmax
  Tensor<S> conv_h, conv_w;
  bool used = false;
};

template <typename S>
Tensor<S> axis_mix_forward(const Tensor<S>& y, const MixerParams<S>& m,
                           AxisTape<S>* tape = nullptr, FlopMeter* meter = nullptr) {
  if (y.ndim() != 4) throw ShapeError("axis_mix: input must be [B,C,H,W]");
  const int B = y.dim(0), C = y.dim(1), H = y.dim(2), W = y.dim(3);
  const std::int64_t n = static_cast<std::int64_t>(H) * W;
  const int hid_dim = m.rw_w1.value.dim(1);

  Tensor<S> gap = global_avg_pool(y);
  Tensor<S> pre = matmul(gap, m.rw_w1.value);
  for (int b = 0; b < B; ++b)
    for (int j = 0; j < hid_dim; ++j) pre(b, j) += m.rw_b1.value[j];
  Tensor<S> hid = relu(pre);
  Tensor<S> logits = matmul(hid, m.rw_w2.value);
  Tensor<S> alpha({B, 2});
  for (int b = 0; b < B; ++b) {
    Tensor<S> row({2}, {logits(b, 0) + m.rw_b2.value[0], logits(b, 1) + m.rw_b2.value[1]});
    Tensor<S> sm = softmax(row);
    alpha(b, 0) = sm[0];
    alpha(b, 1) = sm[1];
  }

  Tensor<S> ch = depthwise_conv_axis(y, m.axis_h.value, Axis::kHorizontal);
  Tensor<S> cw = depthwise_conv_axis(y, m.axis_w.value, Axis::kVertical);

  Tensor<S> out(y.shape());
  for (int b = 0; b < B; ++b) {
    const S ah = alpha(b, 0), aw = alpha(b, 1);
    const std::int64_t base = static_cast<std::int64_t>(b) * C * n;
    for (std::int64_t t = 0; t < static_cast<std::int64_t>(C) * n; ++t)
      out[base + t] = ah * ch[base + t] + aw * cw[base + t];
  }

  if (meter) {
    // per-token work: convs at k taps per element (padding taps included),
    // the blend at one fused unit per element, and the pooled alpha input
    meter->add(Component::kAxisMix, static_cast<std::int64_t>(B) * C * n * (2 * m.k + 2));
    // per-image remainder: the bottleneck MLP and its softmax
    meter->add(Component::kAxisReweight,
               static_cast<std::int64_t>(B) *
                   (static_cast<std::int64_t>(C) * hid_dim + hid_dim +
                    static_cast<std::int64_t>(hid_dim) * kReluUnits + hid_dim * 2 + 2 +
                    softmax_units(2)));
  }

  if (tape) {
    tape->y = y;
    tape->gap = std::move(gap);
    tape->pre = std::move(pre);
    tape->hid = std::move(hid);
    tape->alpha = alpha;
    tape->conv_h = ch;
    tape->conv_w = cw;
    tape->used = false;
  }
  return out;
}

template <typename S>
Tensor<S> axis_mix_backward(MixerParams<S>& m, AxisTape<S>& tape, const Tensor<S>& dout) {
  if (tape.used) throw UsageError("axis_mix backward: tape already consumed");
  if (!dout.same_shape(tape.y)) throw ShapeError("axis_mix backward: upstream shape mismatch");
  tape.used = true;
  const int B = dout.dim(0), C = dout.dim(1), H = dout.dim(2), W = dout.dim(3);
  const std::int64_t plane = static_cast<std::int64_t>(C) * H * W;
  const int hid_dim = m.rw_w1.value.dim(1);

  // blend: out = a_h * conv_h + a_w * conv_w
  Tensor<S> dch(dout.shape()), dcw(dout.shape()), dalpha({B, 2});
  for (int b = 0; b < B; ++b) {
    const S ah = tape.alpha(b, 0), aw = tape.alpha(b, 1);
    S gh = 0, gw = 0;
    const std::int64_t base = b * plane;
    for (std::int64_t t = 0; t < plane; ++t) {
      const S up = dout[base + t];
      dch[base + t] = ah * up;
      dcw[base + t] = aw * up;
      gh += up * tape.conv_h[base + t];
      gw += up * tape.conv_w[base + t];
    }
    dalpha(b, 0) = gh;
    dalpha(b, 1) = gw;
  }

  // softmax rows, then the reweight MLP
  Tensor<S> dlogits({B, 2});
  for (int b = 0; b < B; ++b) {
    Tensor<S> yrow({2}, {tape.alpha(b, 0), tape.alpha(b, 1)});
    Tensor<S> drow({2}, {dalpha(b, 0), dalpha(b, 1)});
    Tensor<S> dl = softmax_backward(yrow, drow);
    dlogits(b, 0) = dl[0];
    dlogits(b, 1) = dl[1];
  }
  for (int b = 0; b < B; ++b) {
    m.rw_b2.grad[0] += dlogits(b, 0);
    m.rw_b2.grad[1] += dlogits(b, 1);
  }
  auto g2 = matmul_backward(tape.hid, m.rw_w2.value, dlogits);
  add_inplace(m.rw_w2.grad, g2.db);
  Tensor<S> dhid = relu_backward(tape.pre, g2.da);
  for (int b = 0; b < B; ++b)
    for (int j = 0; j < hid_dim; ++j) m.rw_b1.grad[j] += dhid(b, j);
  auto g1 = matmul_backward(tape.gap, m.rw_w1.value, dhid);
  add_inplace(m.rw_w1.grad, g1.db);
  Tensor<S> dy = global_avg_pool_backward(tape.y.shape(), g1.da);

  auto gh = depthwise_conv_axis_backward(tape.y, m.axis_h.value, Axis::kHorizontal, dch);
  auto gw = depthwise_conv_axis_backward(tape.y, m.axis_w.value, Axis::kVertical, dcw);
  add_inplace(m.axis_h.grad, gh.dkernels);
  add_inplace(m.axis_w.grad, gw.dkernels);
  add_inplace(dy, gh.dx);
  add_inplace(dy, gw.dx);
  return dy;
}

// ---------------------------------------------------------------------------
// low-rank global map: each channel's token vector v -> Q (P v)

template <typename S>
struct LowRankTape {
  Tensor<S> y;  // input [B,C,H,W]
  Tensor<S> t;  // compressed tokens [B*C, r]
  bool used = false;
};

template <typename S>
Tensor<S> lowrank_global_forward(const Tensor<S>& y, const Tensor<S>& P, const Tensor<S>& Q,
                                 LowRankTape<S>* tape = nullptr, FlopMeter* meter = nullptr) {
  if (y.ndim() != 4) throw ShapeError("lowrank_global: input must be [B,C,H,W]");
  const int B = y.dim(0), C = y.dim(1);
  const std::int64_t n = static_cast<std::int64_t>(y.dim(2)) * y.dim(3);
  const int r = P.dim(0);
  if (P.dim(1) != n || Q.dim(0) != n || Q.dim(1) != r)
    throw ShapeError("lowrank_global: P " + shape_str(P.shape()) + " / Q " +
                     shape_str(Q.shape()) + " do not match N=" + std::to_string(n));

  const std::int64_t rows = static_cast<std::int64_t>(B) * C;
  ConstMatMap<S> V(y.data(), rows, n), Pm(P.data(), r, n), Qm(Q.data(), n, r);
  Tensor<S> t({static_cast<int>(rows), r});
  MatMap<S> T(t.data(), rows, r);
  T.noalias() = V * Pm.transpose();
  Tensor<S> out(y.shape());
  MatMap<S> O(out.data(), rows, n);
  O.noalias() = T * Qm.transpose();

  if (meter) meter->add(Component::kLowRank, rows * 2 * n * r);
  if (tape) {
    tape->y = y;
    tape->t = std::move(t);
    tape->used = false;
  }
  return out;
}

template <typename S>
Tensor<S> lowrank_global_backward(MixerParams<S>& m, LowRankTape<S>& tape,
                                  const Tensor<S>& dout) {
  if (tape.used) throw UsageError("lowrank_global backward: tape already consumed");
  if (!dout.same_shape(tape.y)) throw ShapeError("lowrank_global backward: shape mismatch");
  tape.used = true;
  const int B = dout.dim(0), C = dout.dim(1);
  const std::int64_t n = static_cast<std::int64_t>(dout.dim(2)) * dout.dim(3);
  const int r = m.r;
  const std::int64_t rows = static_cast<std::int64_t>(B) * C;

  ConstMatMap<S> dO(dout.data(), rows, n), V(tape.y.data(), rows, n),
      T(tape.t.data(), rows, r), Pm(m.P.value.data(), r, n), Qm(m.Q.value.data(), n, r);
  MatMap<S> dP(m.P.grad.data(), r, n), dQ(m.Q.grad.data(), n, r);

  // out = T Q^T with T = V P^T
  dQ.noalias() += dO.transpose() * T;
  Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dT = dO * Qm;
  dP.noalias() += dT.transpose() * V;
  Tensor<S> dy(tape.y.shape());
  MatMap<S> dV(dy.data(), rows, n);
  dV.noalias() = dT * Pm;
  return dy;
}

// ---------------------------------------------------------------------------
// the composed mixer

template <typename S>
struct MixerTape {
  Tensor<S> patches;   // KAN input
  Tensor<S> y_local;   // axis-mix input (unpatchified KAN output)
  AxisTape<S> axis;
  LowRankTape<S> low;
  Shape in_shape;
  bool used = false;
};

template <typename S>
Tensor<S> mixer_forward(const Tensor<S>& x, const MixerParams<S>& m,
                        MixerTape<S>* tape = nullptr, FlopMeter* meter = nullptr) {
  if (x.ndim() != 4) throw ShapeError("mixer: input must be [B,C,H,W]");
  if (x.dim(1) != m.channels || x.dim(2) != m.height || x.dim(3) != m.width)
    throw ShapeError("mixer: input " + shape_str(x.shape()) + " does not match configured [C=" +
                     std::to_string(m.channels) + ",H=" + std::to_string(m.height) +
                     ",W=" + std::to_string(m.width) + "]");
  const int B = x.dim(0), C = m.channels, F = m.patch_dim();
  const int NP = m.n_tokens() / F;

  Tensor<S> patches = patchify(x, m.p);
  Tensor<S> kan_out(patches.shape());
  for_each_kan_block<S>(B, C, NP, F, m.groups,
                        [&](int g, std::int64_t off, std::int64_t rows) {
                          kan_rows_forward(patches.data() + off, kan_out.data() + off, rows,
                                           m.kans[g], meter);
                        });
  Tensor<S> y_local = unpatchify(kan_out, m.height, m.width, m.p);

  Tensor<S> out = m.use_axis
                      ? axis_mix_forward(y_local, m, tape ? &tape->axis : nullptr, meter)
                      : y_local;
  if (m.use_global) {
    Tensor<S> glob = lowrank_global_forward(x, m.P.value, m.Q.value,
                                            tape ? &tape->low : nullptr, meter);
    add_inplace(out, glob);
  }

  if (tape) {
    tape->patches = std::move(patches);
    tape->y_local = std::move(y_local);
    tape->in_shape = x.shape();
    tape->used = false;
  }
  return out;
}

template <typename S>
Tensor<S> mixer_backward(MixerParams<S>& m, MixerTape<S>& tape, const Tensor<S>& dout) {
  if (tape.used) throw UsageError("mixer backward: tape already consumed");
  if (dout.shape() != tape.in_shape) throw ShapeError("mixer backward: shape mismatch");
  tape.used = true;
  const int B = dout.dim(0), C = m.channels, F = m.patch_dim();
  const int NP = m.n_tokens() / F;

  Tensor<S> dy_local =
      m.use_axis ? axis_mix_backward(m, tape.axis, dout) : dout;
  Tensor<S> dkan_out = patchify(dy_local, m.p);  // adjoint of unpatchify
  Tensor<S> dpatches(dkan_out.shape());
  for_each_kan_block<S>(B, C, NP, F, m.groups,
                        [&](int g, std::int64_t off, std::int64_t rows) {
                          kan_rows_backward(tape.patches.data() + off, dkan_out.data() + off,
                                            dpatches.data() + off, rows, m.kans[g]);
                        });
  Tensor<S> dx = unpatchify(dpatches, m.height, m.width, m.p);  // adjoint of patchify

  if (m.use_global) {
    Tensor<S> dglob = lowrank_global_backward(m, tape.low, dout);
    add_inplace(dx, dglob);
  }
  return dx;
}

// Applies fn to every parameter of the mixer, with stable dotted names.
template <typename S, typename Fn>
void mixer_visit_params(MixerParams<S>& m, const std::string& prefix, Fn&& fn) {
  for (size_t g = 0; g < m.kans.size(); ++g) {
    const std::string kp =
        prefix + ".kan" + (m.kans.size() > 1 ? std::to_string(g) : std::string());
    auto& L = m.kans[g];
    if (L.kind == BasisKind::kMlpReplace) {
      fn(kp + ".mlp_w1", L.mlp_w1);
      fn(kp + ".mlp_b1", L.mlp_b1);
      fn(kp + ".mlp_w2", L.mlp_w2);
      fn(kp + ".mlp_b2", L.mlp_b2);
    } else {
      if (L.kind != BasisKind::kBSpline) {
        fn(kp + ".mu", L.mu);
        fn(kp + ".log_sigma", L.log_sigma);
      }
      fn(kp + ".w", L.w);
    }
  }
  if (m.use_axis) {
    fn(prefix + ".axis_h", m.axis_h);
    fn(prefix + ".axis_w", m.axis_w);
    fn(prefix + ".rw_w1", m.rw_w1);
    fn(prefix + ".rw_b1", m.rw_b1);
    fn(prefix + ".rw_w2", m.rw_w2);
    fn(prefix + ".rw_b2", m.rw_b2);
  }
  if (m.use_global) {
    fn(prefix + ".P", m.P);
    fn(prefix + ".Q", m.Q);
  }
}

}  // namespace vik
