#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace blurlab {

/// Probability vector over K classes.
struct ClassDistribution {
  std::vector<double> probs;

  std::size_t size() const { return probs.size(); }
  double operator[](std::size_t i) const { return probs[i]; }
};

struct SoftmaxResult {
  ClassDistribution dist;
  std::vector<double> logprobs;
};

/// Max-subtracted softmax; returns both probabilities and log-probabilities.
inline SoftmaxResult softmax_logprobs(std::span<const double> logits) {
  SoftmaxResult r;
  if (logits.empty()) return r;
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - m);
  const double log_z = m + std::log(z);
  r.logprobs.resize(logits.size());
  r.dist.probs.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    r.logprobs[i] = logits[i] - log_z;
    r.dist.probs[i] = std::exp(r.logprobs[i]);
  }
  return r;
}

inline SoftmaxResult softmax_logprobs(const std::vector<double>& logits) {
  return softmax_logprobs(std::span<const double>(logits));
}

}  // namespace blurlab
