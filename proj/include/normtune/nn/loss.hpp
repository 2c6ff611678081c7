#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "normtune/util/error.hpp"

namespace normtune::nn {

inline void require_finite(std::span<const double> xs, const char* where) {
  for (double x : xs) {
    if (!std::isfinite(x)) throw NumericError(std::string(where) + ": non-finite input");
  }
}

// log Σ exp(x_i), evaluated around the maximum.
inline double log_sum_exp(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double x : logits) s += std::exp(x - m);
  return m + std::log(s);
}

inline std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw InvalidArgument("softmax of an empty vector");
  require_finite(logits, "softmax");
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) s += (out[i] = std::exp(logits[i] - m));
  for (auto& v : out) v /= s;
  return out;
}

// Cross-entropy of one prediction: -log softmax(logits)[target].
inline double word_loss(std::span<const double> logits, std::size_t target) {
  if (logits.empty()) throw InvalidArgument("word_loss of an empty vector");
  if (target >= logits.size()) {
    throw InvalidArgument("target " + std::to_string(target) + " out of range for " +
                          std::to_string(logits.size()) + " logits");
  }
  require_finite(logits, "word_loss");
  return log_sum_exp(logits) - logits[target];
}

// d word_loss / d logits = softmax(logits) - onehot(target).
inline std::vector<double> word_loss_grad(std::span<const double> logits, std::size_t target) {
  if (target >= logits.size()) throw InvalidArgument("target out of range");
  auto g = softmax(logits);
  g[target] -= 1.0;
  return g;
}

}  // namespace normtune::nn
