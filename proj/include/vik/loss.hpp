#pragma once

#include "vik/tensor.hpp"

#include <cmath>
#include <vector>

namespace vik {

template <typename S>
struct CeResult {
  S loss;
  Tensor<S> dlogits;  // (softmax - onehot) / B
};

// Mean cross entropy with a log-sum-exp stabilized softmax.
template <typename S>
CeResult<S> cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2) throw ShapeError("cross_entropy: logits must be [B,K]");
  const int B = logits.dim(0), K = logits.dim(1);
  if (static_cast<int>(labels.size()) != B)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(B));
  CeResult<S> res{S(0), Tensor<S>({B, K})};
  for (int b = 0; b < B; ++b) {
    if (labels[b] < 0 || labels[b] >= K)
      throw DataError("cross_entropy: label " + std::to_string(labels[b]) + " at index " +
                      std::to_string(b) + " outside [0," + std::to_string(K) + ")");
    const S* row = &logits(b, 0);
    S mx = row[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    S sum = 0;
    for (int k = 0; k < K; ++k) sum += std::exp(row[k] - mx);
    const S lse = mx + std::log(sum);
    res.loss += lse - row[labels[b]];
    for (int k = 0; k < K; ++k)
      res.dlogits(b, k) = (std::exp(row[k] - mx) / sum - (k == labels[b] ? S(1) : S(0))) /
                          static_cast<S>(B);
  }
  res.loss /= static_cast<S>(B);
  return res;
}

inline int argmax_row(const float* row, int k) {
  int best = 0;
  for (int i = 1; i < k; ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

}  // namespace vik
