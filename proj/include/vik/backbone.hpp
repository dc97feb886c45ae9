#pragma once

#include "vik/mixer.hpp"

#include <array>
#include <functional>
#include <string>
#include <vector>

namespace vik {

inline constexpr double kLnEps = 1e-5;
inline constexpr int kNumStages = 4;

struct StageSpec {
  int depth = 1;
  int channels = 0;
  int p = 2;
  int basis_count = 8;
  int rank = 0;  // 0: auto, min(64, max(1, N/2))
  int kernel = 5;
  int expand = 4;
  int groups = 1;
};

struct BackboneConfig {
  std::array<StageSpec, kNumStages> stages;
  int num_classes = 10;
  int in_h = 32, in_w = 32;
  BasisKind kind = BasisKind::kRbf;
  bool use_axis = true;
  bool use_global = true;
  std::uint64_t seed = 1;

  int stage_h(int s) const { return in_h / (4 << s); }
  int stage_w(int s) const { return in_w / (4 << s); }

  void validate() const {
    if (num_classes < 2) throw ConfigError("config: num_classes must be >= 2");
    if (in_h % 32 != 0 || in_w % 32 != 0)
      throw ConfigError("config: input resolution must be divisible by 32 (stem /4, then three /2 stages), got " +
                        std::to_string(in_h) + "x" + std::to_string(in_w));
    for (int s = 0; s < kNumStages; ++s) {
      const auto& st = stages[s];
      if (st.depth < 1) throw ConfigError("config: stage depth must be >= 1");
      if (st.channels < 1) throw ConfigError("config: stage channels must be >= 1");
      if (s > 0 && st.channels < stages[s - 1].channels)
        throw ConfigError("config: channels must be non-decreasing across stages");
      if (stage_h(s) % st.p != 0 || stage_w(s) % st.p != 0)
        throw ConfigError("config: stage " + std::to_string(s + 1) + " grid " +
                          std::to_string(stage_h(s)) + "x" + std::to_string(stage_w(s)) +
                          " not divisible by p=" + std::to_string(st.p));
      if (st.expand < 1) throw ConfigError("config: mlp expansion must be >= 1");
    }
  }

  int stage_rank(int s) const {
    const int n = stage_h(s) * stage_w(s);
    const int r = stages[s].rank;
    if (r == 0) return std::min(64, std::max(1, n / 2));
    return r;
  }
};

// ---------------------------------------------------------------------------
// block: pre-norm residual pair, mixer branch then channel MLP branch

template <typename S>
struct BlockParams {
  Param<S> norm1_g, norm1_b, norm2_g, norm2_b;
  MixerParams<S> mixer;
  Param<S> mlp_w1, mlp_b1, mlp_w2, mlp_b2;  // C -> eC -> C
};

template <typename S>
struct BlockTape {
  Tensor<S> x_tok;    // input as tokens (norm1 input)
  Tensor<S> x1_tok;   // post-mixer residual as tokens (norm2 input)
  Tensor<S> ln2;      // norm2 output (MLP input)
  Tensor<S> pre;      // pre-GELU hidden
  MixerTape<S> mixer;
  int height = 0, width = 0;
  bool used = false;
};

template <typename S>
void block_init(BlockParams<S>& blk, const StageSpec& st, int height, int width, BasisKind kind,
                bool use_axis, bool use_global, Rng& rng) {
  const int c = st.channels, e = st.expand;
  blk.norm1_g = Param<S>(Tensor<S>::full({c}, S(1)));
  blk.norm1_b = Param<S>(Tensor<S>({c}));
  blk.norm2_g = Param<S>(Tensor<S>::full({c}, S(1)));
  blk.norm2_b = Param<S>(Tensor<S>({c}));
  const int n = height * width;
  const int r = st.rank == 0 ? std::min(64, std::max(1, n / 2)) : st.rank;
  mixer_init(blk.mixer, c, height, width, st.p, st.basis_count, st.kernel, r, kind, st.groups,
             rng, use_axis, use_global);
  const S b1 = S(1) / std::sqrt(static_cast<S>(c));
  const S b2 = S(1) / std::sqrt(static_cast<S>(e) * c);
  blk.mlp_w1 = Param<S>(random_uniform<S>({c, e * c}, rng, -b1, b1));
  blk.mlp_b1 = Param<S>(Tensor<S>({e * c}));
  blk.mlp_w2 = Param<S>(random_uniform<S>({e * c, c}, rng, -b2, b2));
  blk.mlp_b2 = Param<S>(Tensor<S>({c}));
}

template <typename S>
Tensor<S> block_forward(const Tensor<S>& x, const BlockParams<S>& blk,
                        BlockTape<S>* tape = nullptr, FlopMeter* meter = nullptr) {
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t n_tok = static_cast<std::int64_t>(B) * H * W;
  const int ec = blk.mlp_w1.value.dim(1);

  Tensor<S> x_tok = nchw_to_tokens(x);
  Tensor<S> ln1 = layer_norm(x_tok, blk.norm1_g.value, blk.norm1_b.value, S(kLnEps));
  Tensor<S> mixed = mixer_forward(tokens_to_nchw(ln1, H, W), blk.mixer,
                                  tape ? &tape->mixer : nullptr, meter);
  Tensor<S> x1 = add(x, mixed);

  Tensor<S> x1_tok = nchw_to_tokens(x1);
  Tensor<S> ln2 = layer_norm(x1_tok, blk.norm2_g.value, blk.norm2_b.value, S(kLnEps));
  ConstMatMap<S> L2(ln2.data(), n_tok, C);
  ConstMatMap<S> W1(blk.mlp_w1.value.data(), C, ec), W2(blk.mlp_w2.value.data(), ec, C);
  Tensor<S> pre({B, H * W, ec});
  MatMap<S> Pre(pre.data(), n_tok, ec);
  Pre.noalias() = L2 * W1;
  for (int j = 0; j < ec; ++j) Pre.col(j).array() += blk.mlp_b1.value[j];
  Tensor<S> act = gelu(pre);
  Tensor<S> mlp_tok({B, H * W, C});
  MatMap<S> Out(mlp_tok.data(), n_tok, C);
  Out.noalias() = ConstMatMap<S>(act.data(), n_tok, ec) * W2;
  for (int j = 0; j < C; ++j) Out.col(j).array() += blk.mlp_b2.value[j];
  Tensor<S> out = add(x1, tokens_to_nchw(mlp_tok, H, W));

  if (meter) {
    meter->add(Component::kNorm, 2 * n_tok * layer_norm_units_per_token(C));
    meter->add(Component::kChannelMlp,
               n_tok * (static_cast<std::int64_t>(C) * ec + ec +
                        static_cast<std::int64_t>(ec) * kGeluUnits +
                        static_cast<std::int64_t>(ec) * C + C));
  }
  if (tape) {
    tape->x_tok = std::move(x_tok);
    tape->x1_tok = std::move(x1_tok);
    tape->ln2 = std::move(ln2);
    tape->pre = std::move(pre);
    tape->height = H;
    tape->width = W;
    tape->used = false;
  }
  return out;
}

template <typename S>
Tensor<S> block_backward(BlockParams<S>& blk, BlockTape<S>& tape, const Tensor<S>& dout) {
  if (tape.used) throw UsageError("block backward: tape already consumed");
  tape.used = true;
  const int B = dout.dim(0), C = dout.dim(1), H = tape.height, W = tape.width;
  const std::int64_t n_tok = static_cast<std::int64_t>(B) * H * W;
  const int ec = blk.mlp_w1.value.dim(1);

  // out = x1 + MLP(LN2(x1))
  Tensor<S> dmlp_tok = nchw_to_tokens(dout);
  ConstMatMap<S> dOut(dmlp_tok.data(), n_tok, C);
  ConstMatMap<S> L2(tape.ln2.data(), n_tok, C);
  ConstMatMap<S> W1(blk.mlp_w1.value.data(), C, ec), W2(blk.mlp_w2.value.data(), ec, C);

  Tensor<S> act = gelu(tape.pre);
  MatMap<S> dW2(blk.mlp_w2.grad.data(), ec, C);
  dW2.noalias() += ConstMatMap<S>(act.data(), n_tok, ec).transpose() * dOut;
  for (int j = 0; j < C; ++j) blk.mlp_b2.grad[j] += dOut.col(j).sum();
  Tensor<S> dact({B, H * W, ec});
  MatMap<S> dAct(dact.data(), n_tok, ec);
  dAct.noalias() = dOut * W2.transpose();
  Tensor<S> dpre = gelu_backward(tape.pre, dact);
  ConstMatMap<S> dPre(dpre.data(), n_tok, ec);
  MatMap<S> dW1(blk.mlp_w1.grad.data(), C, ec);
  dW1.noalias() += L2.transpose() * dPre;
  for (int j = 0; j < ec; ++j) blk.mlp_b1.grad[j] += dPre.col(j).sum();
  Tensor<S> dln2({B, H * W, C});
  MatMap<S>(dln2.data(), n_tok, C).noalias() = dPre * W1.transpose();

  auto g2 = layer_norm_backward(tape.x1_tok, blk.norm2_g.value, S(kLnEps), dln2);
  add_inplace(blk.norm2_g.grad, g2.dgamma);
  add_inplace(blk.norm2_b.grad, g2.dbeta);
  Tensor<S> dx1 = add(dout, tokens_to_nchw(g2.dx, H, W));

  // x1 = x + mixer(LN1(x))
  Tensor<S> dmixed = mixer_backward(blk.mixer, tape.mixer, dx1);
  Tensor<S> dln1 = nchw_to_tokens(dmixed);
  auto g1 = layer_norm_backward(tape.x_tok, blk.norm1_g.value, S(kLnEps), dln1);
  add_inplace(blk.norm1_g.grad, g1.dgamma);
  add_inplace(blk.norm1_b.grad, g1.dbeta);
  return add(dx1, tokens_to_nchw(g1.dx, H, W));
}

// ---------------------------------------------------------------------------
// stem / downsample: strided conv followed by layer norm over channels

template <typename S>
struct ConvNormParams {
  Param<S> w, b, ln_g, ln_b;
  int stride = 1;
};

template <typename S>
struct ConvNormTape {
  Tensor<S> x;
  Tensor<S> conv_tok;  // conv output as tokens (norm input)
  int out_h = 0, out_w = 0;
  bool used = false;
};

template <typename S>
void conv_norm_init(ConvNormParams<S>& cn, int c_in, int c_out, int k, int stride, Rng& rng) {
  const S bound = S(1) / std::sqrt(static_cast<S>(c_in) * k * k);
  cn.w = Param<S>(random_uniform<S>({c_out, c_in, k, k}, rng, -bound, bound));
  cn.b = Param<S>(Tensor<S>({c_out}));
  cn.ln_g = Param<S>(Tensor<S>::full({c_out}, S(1)));
  cn.ln_b = Param<S>(Tensor<S>({c_out}));
  cn.stride = stride;
}

template <typename S>
Tensor<S> conv_norm_forward(const Tensor<S>& x, const ConvNormParams<S>& cn,
                            ConvNormTape<S>* tape = nullptr, FlopMeter* meter = nullptr) {
  Tensor<S> y = conv2d(x, cn.w.value, cn.b.value, cn.stride);
  const int B = y.dim(0), C = y.dim(1), Ho = y.dim(2), Wo = y.dim(3);
  Tensor<S> tok = nchw_to_tokens(y);
  Tensor<S> ln = layer_norm(tok, cn.ln_g.value, cn.ln_b.value, S(kLnEps));
  if (meter) {
    const std::int64_t n_tok = static_cast<std::int64_t>(B) * Ho * Wo;
    const std::int64_t taps =
        static_cast<std::int64_t>(cn.w.value.dim(1)) * cn.w.value.dim(2) * cn.w.value.dim(3);
    meter->add(Component::kEmbedHead, n_tok * C * (taps + 1));
    meter->add(Component::kNorm, n_tok * layer_norm_units_per_token(C));
  }
  if (tape) {
    tape->x = x;
    tape->conv_tok = std::move(tok);
    tape->out_h = Ho;
    tape->out_w = Wo;
    tape->used = false;
  }
  return tokens_to_nchw(ln, Ho, Wo);
}

template <typename S>
Tensor<S> conv_norm_backward(ConvNormParams<S>& cn, ConvNormTape<S>& tape,
                             const Tensor<S>& dout) {
  if (tape.used) throw UsageError("conv_norm backward: tape already consumed");
  tape.used = true;
  Tensor<S> dln = nchw_to_tokens(dout);
  auto gn = layer_norm_backward(tape.conv_tok, cn.ln_g.value, S(kLnEps), dln);
  add_inplace(cn.ln_g.grad, gn.dgamma);
  add_inplace(cn.ln_b.grad, gn.dbeta);
  Tensor<S> dconv = tokens_to_nchw(gn.dx, tape.out_h, tape.out_w);
  auto gc = conv2d_backward(tape.x, cn.w.value, cn.stride, dconv);
  add_inplace(cn.w.grad, gc.dw);
  add_inplace(cn.b.grad, gc.dbias);
  return gc.dx;
}

// ---------------------------------------------------------------------------
// the four-stage backbone

template <typename S>
struct Backbone {
  BackboneConfig cfg;
  ConvNormParams<S> stem;
  std::array<std::vector<BlockParams<S>>, kNumStages> stages;
  std::array<ConvNormParams<S>, kNumStages - 1> down;
  Param<S> head_ln_g, head_ln_b, head_w, head_b;
};

template <typename S>
struct BackboneTape {
  ConvNormTape<S> stem;
  std::array<std::vector<BlockTape<S>>, kNumStages> stages;
  std::array<ConvNormTape<S>, kNumStages - 1> down;
  Tensor<S> feat_tok;  // [B,1,C] pooled features (head norm input)
  Tensor<S> feat_ln;   // head norm output
  Shape last_shape;    // stage-4 output, for GAP backward
  bool used = false;
};

template <typename S>
Backbone<S> build_backbone(const BackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  Backbone<S> net;
  net.cfg = cfg;
  conv_norm_init(net.stem, 3, cfg.stages[0].channels, 4, 4, rng);
  for (int s = 0; s < kNumStages; ++s) {
    net.stages[s].resize(cfg.stages[s].depth);
    for (auto& blk : net.stages[s])
      block_init(blk, cfg.stages[s], cfg.stage_h(s), cfg.stage_w(s), cfg.kind, cfg.use_axis,
                 cfg.use_global, rng);
    if (s + 1 < kNumStages)
      conv_norm_init(net.down[s], cfg.stages[s].channels, cfg.stages[s + 1].channels, 2, 2, rng);
  }
  const int c4 = cfg.stages[kNumStages - 1].channels;
  net.head_ln_g = Param<S>(Tensor<S>::full({c4}, S(1)));
  net.head_ln_b = Param<S>(Tensor<S>({c4}));
  const S hb = S(1) / std::sqrt(static_cast<S>(c4));
  net.head_w = Param<S>(random_uniform<S>({c4, cfg.num_classes}, rng, -hb, hb));
  net.head_b = Param<S>(Tensor<S>({cfg.num_classes}));
  return net;
}

template <typename S>
Tensor<S> patch_embed(const Tensor<S>& image, const Backbone<S>& net,
                      ConvNormTape<S>* tape = nullptr, FlopMeter* meter = nullptr) {
  if (image.ndim() != 4 || image.dim(1) != 3)
    throw ShapeError("patch_embed: input must be [B,3,H,W], got " + shape_str(image.shape()));
  if (image.dim(2) % 4 != 0 || image.dim(3) % 4 != 0)
    throw ConfigError("patch_embed: resolution " + std::to_string(image.dim(2)) + "x" +
                      std::to_string(image.dim(3)) + " not divisible by the /4 stem");
  return conv_norm_forward(image, net.stem, tape, meter);
}

template <typename S>
Tensor<S> backbone_forward(const Tensor<S>& image, const Backbone<S>& net,
                           BackboneTape<S>* tape = nullptr, FlopMeter* meter = nullptr) {
  if (image.dim(2) != net.cfg.in_h || image.dim(3) != net.cfg.in_w)
    throw ShapeError("backbone: input " + shape_str(image.shape()) +
                     " does not match configured resolution " + std::to_string(net.cfg.in_h) +
                     "x" + std::to_string(net.cfg.in_w));
  Tensor<S> x = patch_embed(image, net, tape ? &tape->stem : nullptr, meter);
  for (int s = 0; s < kNumStages; ++s) {
    if (tape) tape->stages[s].resize(net.stages[s].size());
    for (size_t i = 0; i < net.stages[s].size(); ++i)
      x = block_forward(x, net.stages[s][i], tape ? &tape->stages[s][i] : nullptr, meter);
    if (s + 1 < kNumStages)
      x = conv_norm_forward(x, net.down[s], tape ? &tape->down[s] : nullptr, meter);
  }

  const int B = x.dim(0), C = x.dim(1);
  const int K = net.cfg.num_classes;
  Tensor<S> pooled = global_avg_pool(x);  // [B, C]
  Tensor<S> feat_tok({B, 1, C}, std::vector<S>(pooled.data(), pooled.data() + pooled.size()));
  Tensor<S> feat_ln = layer_norm(feat_tok, net.head_ln_g.value, net.head_ln_b.value, S(kLnEps));
  Tensor<S> feat({B, C}, std::vector<S>(feat_ln.data(), feat_ln.data() + feat_ln.size()));
  Tensor<S> logits = matmul(feat, net.head_w.value);
  for (int b = 0; b < B; ++b)
    for (int k = 0; k < K; ++k) logits(b, k) += net.head_b.value[k];
  require_finite(logits, "backbone logits");

  if (meter) {
    meter->add(Component::kEmbedHead,
               static_cast<std::int64_t>(B) *
                   (static_cast<std::int64_t>(C) * x.dim(2) * x.dim(3) +
                    static_cast<std::int64_t>(C) * K + K));
    meter->add(Component::kNorm, static_cast<std::int64_t>(B) * layer_norm_units_per_token(C));
  }
  if (tape) {
    tape->feat_tok = std::move(feat_tok);
    tape->feat_ln = std::move(feat_ln);
    tape->last_shape = x.shape();
    tape->used = false;
  }
  return logits;
}

template <typename S>
void backbone_backward(Backbone<S>& net, BackboneTape<S>& tape, const Tensor<S>& dlogits) {
  if (tape.used) throw UsageError("backbone backward: tape already consumed");
  tape.used = true;
  const int B = dlogits.dim(0), K = net.cfg.num_classes;
  const int C = net.cfg.stages[kNumStages - 1].channels;

  Tensor<S> feat({B, C},
                 std::vector<S>(tape.feat_ln.data(), tape.feat_ln.data() + tape.feat_ln.size()));
  auto gh = matmul_backward(feat, net.head_w.value, dlogits);
  add_inplace(net.head_w.grad, gh.db);
  for (int b = 0; b < B; ++b)
    for (int k = 0; k < K; ++k) net.head_b.grad[k] += dlogits(b, k);
  Tensor<S> dfeat_ln({B, 1, C}, std::vector<S>(gh.da.data(), gh.da.data() + gh.da.size()));
  auto gn = layer_norm_backward(tape.feat_tok, net.head_ln_g.value, S(kLnEps), dfeat_ln);
  add_inplace(net.head_ln_g.grad, gn.dgamma);
  add_inplace(net.head_ln_b.grad, gn.dbeta);
  Tensor<S> dpooled({B, C}, std::vector<S>(gn.dx.data(), gn.dx.data() + gn.dx.size()));
  Tensor<S> dx = global_avg_pool_backward(tape.last_shape, dpooled);

  for (int s = kNumStages - 1; s >= 0; --s) {
    if (s + 1 < kNumStages) dx = conv_norm_backward(net.down[s], tape.down[s], dx);
    for (int i = static_cast<int>(net.stages[s].size()) - 1; i >= 0; --i)
      dx = block_backward(net.stages[s][i], tape.stages[s][i], dx);
  }
  conv_norm_backward(net.stem, tape.stem, dx);
}

// ---------------------------------------------------------------------------
// parameter traversal with stable names (checkpoint and optimizer order)

template <typename S, typename Fn>
void visit_params(Backbone<S>& net, Fn&& fn) {
  fn("stem.w", net.stem.w);
  fn("stem.b", net.stem.b);
  fn("stem.ln_g", net.stem.ln_g);
  fn("stem.ln_b", net.stem.ln_b);
  for (int s = 0; s < kNumStages; ++s) {
    for (size_t i = 0; i < net.stages[s].size(); ++i) {
      const std::string bp = "s" + std::to_string(s + 1) + ".b" + std::to_string(i);
      auto& blk = net.stages[s][i];
      fn(bp + ".norm1_g", blk.norm1_g);
      fn(bp + ".norm1_b", blk.norm1_b);
      mixer_visit_params(blk.mixer, bp + ".mixer", fn);
      fn(bp + ".norm2_g", blk.norm2_g);
      fn(bp + ".norm2_b", blk.norm2_b);
      fn(bp + ".mlp_w1", blk.mlp_w1);
      fn(bp + ".mlp_b1", blk.mlp_b1);
      fn(bp + ".mlp_w2", blk.mlp_w2);
      fn(bp + ".mlp_b2", blk.mlp_b2);
    }
    if (s + 1 < kNumStages) {
      const std::string dp = "ds" + std::to_string(s + 1);
      fn(dp + ".w", net.down[s].w);
      fn(dp + ".b", net.down[s].b);
      fn(dp + ".ln_g", net.down[s].ln_g);
      fn(dp + ".ln_b", net.down[s].ln_b);
    }
  }
  fn("head.ln_g", net.head_ln_g);
  fn("head.ln_b", net.head_ln_b);
  fn("head.w", net.head_w);
  fn("head.b", net.head_b);
}

template <typename S>
std::int64_t param_count(Backbone<S>& net) {
  std::int64_t n = 0;
  visit_params(net, [&](const std::string&, Param<S>& p) { n += p.size(); });
  return n;
}

template <typename S>
void zero_grads(Backbone<S>& net) {
  visit_params(net, [&](const std::string&, Param<S>& p) { p.zero_grad(); });
}

// float <-> double conversion, used by the 64-bit gradient checks
template <typename T, typename S>
Backbone<T> cast_backbone(Backbone<S>& src) {
  Rng rng(1);
  Backbone<T> dst = build_backbone<T>(src.cfg, rng);
  std::vector<Param<S>*> sp;
  std::vector<Param<T>*> dp;
  visit_params(src, [&](const std::string&, Param<S>& p) { sp.push_back(&p); });
  visit_params(dst, [&](const std::string&, Param<T>& p) { dp.push_back(&p); });
  for (size_t i = 0; i < sp.size(); ++i) {
    dp[i]->value = sp[i]->value.template cast<T>();
    dp[i]->grad = sp[i]->grad.template cast<T>();
  }
  return dst;
}

}  // namespace vik
