#pragma once

#include "vik/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace vik {

enum class Axis { kHorizontal, kVertical };

// ---------------------------------------------------------------------------
// matmul

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  Tensor<S> c({a.dim(0), b.dim(1)});
  as_matrix(c, a.dim(0), b.dim(1)).noalias() =
      as_matrix(a, a.dim(0), a.dim(1)) * as_matrix(b, b.dim(0), b.dim(1));
  return c;
}

template <typename S>
struct MatmulGrads {
  Tensor<S> da;
  Tensor<S> db;
};

template <typename S>
MatmulGrads<S> matmul_backward(const Tensor<S>& a, const Tensor<S>& b, const Tensor<S>& dc) {
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  MatmulGrads<S> g{Tensor<S>({m, k}), Tensor<S>({k, n})};
  auto A = as_matrix(a, m, k);
  auto B = as_matrix(b, k, n);
  auto dC = as_matrix(dc, m, n);
  as_matrix(g.da, m, k).noalias() = dC * B.transpose();
  as_matrix(g.db, k, n).noalias() = A.transpose() * dC;
  return g;
}

// ---------------------------------------------------------------------------
// softmax (1-D, max-subtracted)

template <typename S>
Tensor<S> softmax(const Tensor<S>& v) {
  if (v.ndim() != 1 || v.size() < 1) throw ShapeError("softmax: expected non-empty vector");
  require_finite(v, "softmax input");
  Tensor<S> y(v.shape());
  const S m = as_array(v).maxCoeff();
  S sum = 0;
  for (std::int64_t i = 0; i < v.size(); ++i) {
    y[i] = std::exp(v[i] - m);
    sum += y[i];
  }
  for (std::int64_t i = 0; i < v.size(); ++i) y[i] /= sum;
  return y;
}

// dv_i = y_i * (dy_i - sum_j dy_j y_j)
template <typename S>
Tensor<S> softmax_backward(const Tensor<S>& y, const Tensor<S>& dy) {
  Tensor<S> dv(y.shape());
  S dot = 0;
  for (std::int64_t i = 0; i < y.size(); ++i) dot += dy[i] * y[i];
  for (std::int64_t i = 0; i < y.size(); ++i) dv[i] = y[i] * (dy[i] - dot);
  return dv;
}

// ---------------------------------------------------------------------------
// depthwise 1-D convolution along one spatial axis, zero padded

template <typename S>
void check_dw_args(const Tensor<S>& x, const Tensor<S>& kernels) {
  if (x.ndim() != 4) throw ShapeError("depthwise_conv_axis: input must be [B,C,H,W]");
  if (kernels.ndim() != 2)
    throw ShapeError("depthwise_conv_axis: kernels must be [C,k], got " +
                     shape_str(kernels.shape()));
  if (kernels.dim(1) % 2 == 0)
    throw ConfigError("depthwise_conv_axis: kernel size must be odd, got " +
                      std::to_string(kernels.dim(1)));
  if (kernels.dim(0) != x.dim(1))
    throw ShapeError("depthwise_conv_axis: channel mismatch, input " + shape_str(x.shape()) +
                     " vs kernels " + shape_str(kernels.shape()));
}

template <typename S>
Tensor<S> depthwise_conv_axis(const Tensor<S>& x, const Tensor<S>& kernels, Axis axis) {
  check_dw_args(x, kernels);
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int k = kernels.dim(1), off = (k - 1) / 2;
  Tensor<S> y(x.shape());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const S* ker = &kernels(c, 0);
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
          S acc = 0;
          for (int t = 0; t < k; ++t) {
            int hh = h, ww = w;
            if (axis == Axis::kHorizontal)
              ww = w + t - off;
            else
              hh = h + t - off;
            if (hh < 0 || hh >= H || ww < 0 || ww >= W) continue;
            acc += ker[t] * x(b, c, hh, ww);
          }
          y(b, c, h, w) = acc;
        }
    }
  return y;
}

template <typename S>
struct DwGrads {
  Tensor<S> dx;
  Tensor<S> dkernels;
};

template <typename S>
DwGrads<S> depthwise_conv_axis_backward(const Tensor<S>& x, const Tensor<S>& kernels, Axis axis,
                                        const Tensor<S>& dy) {
  check_dw_args(x, kernels);
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int k = kernels.dim(1), off = (k - 1) / 2;
  DwGrads<S> g{Tensor<S>(x.shape()), Tensor<S>(kernels.shape())};
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const S* ker = &kernels(c, 0);
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
          const S up = dy(b, c, h, w);
          for (int t = 0; t < k; ++t) {
            int hh = h, ww = w;
            if (axis == Axis::kHorizontal)
              ww = w + t - off;
            else
              hh = h + t - off;
            if (hh < 0 || hh >= H || ww < 0 || ww >= W) continue;
            g.dx(b, c, hh, ww) += up * ker[t];
            g.dkernels(c, t) += up * x(b, c, hh, ww);
          }
        }
    }
  return g;
}

// ---------------------------------------------------------------------------
// global average pooling over the spatial plane

template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  if (x.ndim() != 4) throw ShapeError("global_avg_pool: input must be [B,C,H,W]");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<S> y({B, C});
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const S* p = &x(b, c, 0, 0);
      S acc = 0;
      for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
      y(b, c) = acc / static_cast<S>(plane);
    }
  return y;
}

template <typename S>
Tensor<S> global_avg_pool_backward(const Shape& x_shape, const Tensor<S>& dy) {
  const int B = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3];
  Tensor<S> dx(x_shape);
  const S inv = S(1) / static_cast<S>(static_cast<std::int64_t>(H) * W);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      S g = dy(b, c) * inv;
      S* p = &dx(b, c, 0, 0);
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i) p[i] = g;
    }
  return dx;
}

// ---------------------------------------------------------------------------
// layer norm over the channel axis of [B,N,C] tokens (biased variance)

template <typename S>
void check_ln_args(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps) {
  if (x.ndim() != 3) throw ShapeError("layer_norm: input must be [B,N,C]");
  const int C = x.dim(2);
  if (gamma.size() != C || beta.size() != C)
    throw ShapeError("layer_norm: gamma/beta length " + std::to_string(gamma.size()) + "/" +
                     std::to_string(beta.size()) + " does not match C=" + std::to_string(C));
  if (!(eps > S(0))) throw ConfigError("layer_norm: eps must be positive");
}

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps = S(1e-5)) {
  check_ln_args(x, gamma, beta, eps);
  const int B = x.dim(0), N = x.dim(1), C = x.dim(2);
  Tensor<S> y(x.shape());
  for (int b = 0; b < B; ++b)
    for (int n = 0; n < N; ++n) {
      const S* row = &x(b, n, 0);
      S* out = &y(b, n, 0);
      S mean = 0;
      for (int c = 0; c < C; ++c) mean += row[c];
      mean /= static_cast<S>(C);
      S var = 0;
      for (int c = 0; c < C; ++c) {
        S d = row[c] - mean;
        var += d * d;
      }
      var /= static_cast<S>(C);
      const S inv = S(1) / std::sqrt(var + eps);
      for (int c = 0; c < C; ++c) out[c] = gamma[c] * ((row[c] - mean) * inv) + beta[c];
    }
  return y;
}

template <typename S>
struct LayerNormGrads {
  Tensor<S> dx;
  Tensor<S> dgamma;
  Tensor<S> dbeta;
};

template <typename S>
LayerNormGrads<S> layer_norm_backward(const Tensor<S>& x, const Tensor<S>& gamma, S eps,
                                      const Tensor<S>& dy) {
  const int B = x.dim(0), N = x.dim(1), C = x.dim(2);
  LayerNormGrads<S> g{Tensor<S>(x.shape()), Tensor<S>(gamma.shape()), Tensor<S>(gamma.shape())};
  for (int b = 0; b < B; ++b)
    for (int n = 0; n < N; ++n) {
      const S* row = &x(b, n, 0);
      const S* up = &dy(b, n, 0);
      S* dxr = &g.dx(b, n, 0);
      S mean = 0;
      for (int c = 0; c < C; ++c) mean += row[c];
      mean /= static_cast<S>(C);
      S var = 0;
      for (int c = 0; c < C; ++c) {
        S d = row[c] - mean;
        var += d * d;
      }
      var /= static_cast<S>(C);
      const S inv = S(1) / std::sqrt(var + eps);
      // dxhat = dy * gamma; dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
      S mean_dxh = 0, mean_dxh_xh = 0;
      for (int c = 0; c < C; ++c) {
        const S xh = (row[c] - mean) * inv;
        const S dxh = up[c] * gamma[c];
        mean_dxh += dxh;
        mean_dxh_xh += dxh * xh;
        g.dgamma[c] += up[c] * xh;
        g.dbeta[c] += up[c];
      }
      mean_dxh /= static_cast<S>(C);
      mean_dxh_xh /= static_cast<S>(C);
      for (int c = 0; c < C; ++c) {
        const S xh = (row[c] - mean) * inv;
        const S dxh = up[c] * gamma[c];
        dxr[c] = inv * (dxh - mean_dxh - xh * mean_dxh_xh);
      }
    }
  return g;
}

// ---------------------------------------------------------------------------
// plain 2-D convolution, no padding (stem and downsampling use stride ==
// kernel, but the loops are general)

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias, int stride) {
  if (x.ndim() != 4 || w.ndim() != 4) throw ShapeError("conv2d: x and w must be 4-D");
  if (x.dim(1) != w.dim(1))
    throw ShapeError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(w.shape()));
  const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (bias.size() != Cout) throw ShapeError("conv2d: bias length mismatch");
  const int Ho = (H - kh) / stride + 1, Wo = (W - kw) / stride + 1;
  if (Ho < 1 || Wo < 1) throw ShapeError("conv2d: kernel larger than input");
  Tensor<S> y({B, Cout, Ho, Wo});
  for (int b = 0; b < B; ++b)
    for (int o = 0; o < Cout; ++o)
      for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j) {
          S acc = bias[o];
          for (int c = 0; c < Cin; ++c)
            for (int u = 0; u < kh; ++u)
              for (int v = 0; v < kw; ++v)
                acc += w(o, c, u, v) * x(b, c, i * stride + u, j * stride + v);
          y(b, o, i, j) = acc;
        }
  return y;
}

template <typename S>
struct Conv2dGrads {
  Tensor<S> dx;
  Tensor<S> dw;
  Tensor<S> dbias;
};

template <typename S>
Conv2dGrads<S> conv2d_backward(const Tensor<S>& x, const Tensor<S>& w, int stride,
                               const Tensor<S>& dy) {
  const int B = x.dim(0), Cin = x.dim(1);
  const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int Ho = dy.dim(2), Wo = dy.dim(3);
  Conv2dGrads<S> g{Tensor<S>(x.shape()), Tensor<S>(w.shape()), Tensor<S>({Cout})};
  for (int b = 0; b < B; ++b)
    for (int o = 0; o < Cout; ++o)
      for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j) {
          const S up = dy(b, o, i, j);
          g.dbias[o] += up;
          for (int c = 0; c < Cin; ++c)
            for (int u = 0; u < kh; ++u)
              for (int v = 0; v < kw; ++v) {
                g.dw(o, c, u, v) += up * x(b, c, i * stride + u, j * stride + v);
                g.dx(b, c, i * stride + u, j * stride + v) += up * w(o, c, u, v);
              }
        }
  return g;
}

// ---------------------------------------------------------------------------
// pointwise activations

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> y(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) y[i] = x[i] > S(0) ? x[i] : S(0);
  return y;
}

template <typename S>
Tensor<S> relu_backward(const Tensor<S>& x, const Tensor<S>& dy) {
  Tensor<S> dx(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) dx[i] = x[i] > S(0) ? dy[i] : S(0);
  return dx;
}

template <typename S>
S gelu_scalar(S x) {
  return S(0.5) * x * (S(1) + std::erf(x * S(M_SQRT1_2)));
}

template <typename S>
S gelu_grad_scalar(S x) {
  const S phi = std::exp(S(-0.5) * x * x) * S(0.3989422804014327);  // 1/sqrt(2*pi)
  const S cdf = S(0.5) * (S(1) + std::erf(x * S(M_SQRT1_2)));
  return cdf + x * phi;
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  Tensor<S> y(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) y[i] = gelu_scalar(x[i]);
  return y;
}

template <typename S>
Tensor<S> gelu_backward(const Tensor<S>& x, const Tensor<S>& dy) {
  Tensor<S> dx(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * gelu_grad_scalar(x[i]);
  return dx;
}

// ---------------------------------------------------------------------------
// elementwise helpers and layout moves

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (!a.same_shape(b))
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor<S> c(a.shape());
  as_array(c) = as_array(a) + as_array(b);
  return c;
}

template <typename S>
void add_inplace(Tensor<S>& a, const Tensor<S>& b) {
  if (!a.same_shape(b))
    throw ShapeError("add_inplace: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  as_array(a) += as_array(b);
}

// [B,C,H,W] -> [B,N,C] with N = H*W (token-major view used by layer norm and
// the channel MLP); tokens_to_nchw is its exact inverse.
template <typename S>
Tensor<S> nchw_to_tokens(const Tensor<S>& x) {
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<S> t({B, H * W, C});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const S* p = &x(b, c, 0, 0);
      for (int n = 0; n < H * W; ++n) t(b, n, c) = p[n];
    }
  return t;
}

template <typename S>
Tensor<S> tokens_to_nchw(const Tensor<S>& t, int H, int W) {
  const int B = t.dim(0), N = t.dim(1), C = t.dim(2);
  if (N != H * W) throw ShapeError("tokens_to_nchw: N != H*W");
  Tensor<S> x({B, C, H, W});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      S* p = &x(b, c, 0, 0);
      for (int n = 0; n < N; ++n) p[n] = t(b, n, c);
    }
  return x;
}

}  // namespace vik
