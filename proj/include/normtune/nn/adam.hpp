#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "normtune/nn/parameters.hpp"

namespace normtune::nn {

struct AdamConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Global gradient-norm clip over trainable elements; 0 disables.
  double clip_norm = 0.0;
};

struct OptimizerState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
};

inline OptimizerState make_optimizer_state(const ParameterSet& params, AdamConfig config) {
  OptimizerState s{config, 0, {}, {}};
  for (const auto& p : params) {
    s.first_moment.emplace_back(p.value.shape());
    s.second_moment.emplace_back(p.value.shape());
  }
  return s;
}

// One bias-corrected Adam update from the gradients stored in `params`.
// Elements whose trainable mask is 0 are never written.
inline void optimizer_step(ParameterSet& params, OptimizerState& state) {
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
    throw InvalidArgument("optimizer state does not match the parameter set");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& p = params[k];
    if (p.grad.shape() != p.value.shape() || state.first_moment[k].shape() != p.value.shape() ||
        state.second_moment[k].shape() != p.value.shape()) {
      throw InvalidArgument("shape mismatch for parameter '" + p.name + "'");
    }
    if (!p.trainable.empty() && p.trainable.size() != p.value.size()) {
      throw InvalidArgument("trainable mask size mismatch for parameter '" + p.name + "'");
    }
  }

  const auto& cfg = state.config;
  double grad_scale = 1.0;
  if (cfg.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& p : params) {
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        if (p.is_trainable(i)) sq += p.grad[i] * p.grad[i];
      }
    }
    const double norm = std::sqrt(sq);
    if (norm > cfg.clip_norm) grad_scale = cfg.clip_norm / norm;
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    if (p.fully_frozen()) continue;
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      if (!p.is_trainable(i)) continue;
      const double gi = grad_scale * p.grad[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.value[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  }
}

}  // namespace normtune::nn
