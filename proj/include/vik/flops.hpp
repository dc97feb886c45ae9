#pragma once

#include <array>
#include <cstdint>
#include <string>

namespace vik {

// Cost-model components. Mixer-core entries (patch_kan, axis_mix, lowrank)
// scale exactly linearly with the token count N; axis_reweight is the
// bottleneck MLP + softmax, a constant-per-image term reported separately so
// the linearity identities stay exact integers.
enum class Component {
  kPatchKan = 0,
  kAxisMix,
  kAxisReweight,
  kLowRank,
  kChannelMlp,
  kNorm,
  kEmbedHead,
};

inline constexpr int kComponentCount = 7;

inline const char* component_name(Component c) {
  switch (c) {
    case Component::kPatchKan: return "patch_kan";
    case Component::kAxisMix: return "axis_mix";
    case Component::kAxisReweight: return "axis_reweight";
    case Component::kLowRank: return "lowrank_global";
    case Component::kChannelMlp: return "channel_mlp";
    case Component::kNorm: return "norm";
    case Component::kEmbedHead: return "embed_head";
  }
  return "?";
}

// Published counting convention (unit = one scalar arithmetic op; a fused
// multiply-accumulate counts as 1; exp and erf count as 1 unit each):
//   RBF basis eval      5  (subtract, square, width scale, exp, w-accumulate)
//   wavelet basis eval  7  (shift, scale, square, 1-t^2, half-square, exp,
//                           w-accumulate)
//   B-spline basis eval 12 (degree-3 Cox-de-Boor per retained value plus the
//                           w-accumulate, fixed by convention)
//   GELU                5   ReLU 1   softmax of n logits 4n
//   layer norm          8C + 5 per token over C channels
//   alpha blend         1 per output element
//   average pooling     1 per pooled element
//   residual adds and data movement (patchify, reshapes) are not counted
inline constexpr std::int64_t kRbfEvalUnits = 5;
inline constexpr std::int64_t kWaveletEvalUnits = 7;
inline constexpr std::int64_t kBsplineEvalUnits = 12;
inline constexpr std::int64_t kGeluUnits = 5;
inline constexpr std::int64_t kReluUnits = 1;

inline constexpr std::int64_t softmax_units(std::int64_t n) { return 4 * n; }

inline constexpr std::int64_t layer_norm_units_per_token(std::int64_t channels) {
  return 8 * channels + 5;
}

// Tallies units actually executed by a forward pass. Ops report their work at
// the call site from the runtime shapes they just processed.
class FlopMeter {
 public:
  void add(Component c, std::int64_t units) { units_[static_cast<int>(c)] += units; }
  std::int64_t total(Component c) const { return units_[static_cast<int>(c)]; }
  std::int64_t grand_total() const {
    std::int64_t s = 0;
    for (auto u : units_) s += u;
    return s;
  }
  void reset() { units_.fill(0); }

 private:
  std::array<std::int64_t, kComponentCount> units_{};
};

}  // namespace vik
