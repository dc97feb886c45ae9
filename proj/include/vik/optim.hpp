#pragma once

#include "vik/tensor.hpp"

#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace vik {

// AdamW with decoupled weight decay: the decay term never touches the moment
// estimates and is scaled by the current learning rate.
template <typename S>
struct AdamW {
  S beta1 = S(0.9), beta2 = S(0.999), eps = S(1e-8), weight_decay = S(0.05);
  std::int64_t step_count = 0;
  std::vector<Tensor<S>> m, v;

  void init(const std::vector<std::pair<std::string, Param<S>*>>& params) {
    m.clear();
    v.clear();
    for (const auto& [name, p] : params) {
      m.emplace_back(p->value.shape());
      v.emplace_back(p->value.shape());
    }
    step_count = 0;
  }

  void step(const std::vector<std::pair<std::string, Param<S>*>>& params, S lr) {
    if (m.size() != params.size()) throw UsageError("adamw: init/step parameter set mismatch");
    ++step_count;
    const S bc1 = S(1) - std::pow(beta1, static_cast<S>(step_count));
    const S bc2 = S(1) - std::pow(beta2, static_cast<S>(step_count));
    for (size_t i = 0; i < params.size(); ++i) {
      auto& [name, p] = params[i];
      if (!all_finite(p->grad))
        throw NumericalError("adamw: non-finite gradient in group " + name);
      S* th = p->value.data();
      const S* g = p->grad.data();
      S* mi = m[i].data();
      S* vi = v[i].data();
      const std::int64_t n = p->size();
      for (std::int64_t j = 0; j < n; ++j) {
        mi[j] = beta1 * mi[j] + (S(1) - beta1) * g[j];
        vi[j] = beta2 * vi[j] + (S(1) - beta2) * g[j] * g[j];
        const S mhat = mi[j] / bc1;
        const S vhat = vi[j] / bc2;
        th[j] -= lr * weight_decay * th[j];
        th[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
};

// Linear warmup to the peak, then cosine decay to the floor.
inline double lr_schedule(std::int64_t step, std::int64_t total_steps, double peak, double floor,
                          double warmup_frac) {
  if (step < 1 || step > total_steps) throw UsageError("lr_schedule: step out of range");
  const std::int64_t warm =
      std::max<std::int64_t>(1, static_cast<std::int64_t>(warmup_frac * total_steps));
  if (step <= warm) return peak * static_cast<double>(step) / static_cast<double>(warm);
  if (total_steps == warm) return peak;
  const double t = static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
  return floor + 0.5 * (peak - floor) * (1.0 + std::cos(t * 3.14159265358979323846));
}

// Global-norm gradient clipping; returns the pre-clip norm.
template <typename S>
double clip_grad_norm(const std::vector<std::pair<std::string, Param<S>*>>& params,
                      double max_norm) {
  double sq = 0;
  for (const auto& [name, p] : params) {
    const S* g = p->grad.data();
    for (std::int64_t j = 0; j < p->size(); ++j) sq += static_cast<double>(g[j]) * g[j];
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const S scale = static_cast<S>(max_norm / norm);
    for (const auto& [name, p] : params) {
      S* g = p->grad.data();
      for (std::int64_t j = 0; j < p->size(); ++j) g[j] *= scale;
    }
  }
  return norm;
}

}  // namespace vik
