#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "normtune/nn/graph.hpp"
#include "normtune/util/random.hpp"

namespace normtune::nn {

// Builds the scalar objective on the given graph from the (captured)
// parameter set.
using ObjectiveBuilder = std::function<Var(Graph&)>;

struct GradCheckOptions {
  double epsilon = 1e-5;
  // 0 checks every coordinate; otherwise this many sampled coordinates.
  std::size_t sampled_coordinates = 0;
  std::uint64_t seed = 0;
};

// Largest |g_analytic - g_fd| / max(1e-8, |g_analytic| + |g_fd|) over the
// checked coordinates, with g_fd a central difference. Frozen elements are
// not checked.
inline double grad_check(const ObjectiveBuilder& objective, ParameterSet& params, GradCheckOptions opts = {}) {
  auto evaluate = [&](bool with_grad) {
    Graph g(with_grad);
    const Var out = objective(g);
    const double value = g.value(out)[0];
    if (!std::isfinite(value)) throw NumericError("grad_check: objective is not finite");
    if (with_grad) g.backward(out);
    return value;
  };

  params.zero_grad();
  evaluate(true);

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (std::size_t i = 0; i < params[k].value.size(); ++i) {
      if (params[k].is_trainable(i)) coords.emplace_back(k, i);
    }
  }
  if (opts.sampled_coordinates > 0 && opts.sampled_coordinates < coords.size()) {
    Rng rng(opts.seed);
    rng.shuffle(std::span(coords));
    coords.resize(opts.sampled_coordinates);
  }

  double worst = 0.0;
  for (const auto& [k, i] : coords) {
    auto& p = params[k];
    const double saved = p.value[i];
    p.value[i] = saved + opts.epsilon;
    const double up = evaluate(false);
    p.value[i] = saved - opts.epsilon;
    const double down = evaluate(false);
    p.value[i] = saved;
    const double fd = (up - down) / (2.0 * opts.epsilon);
    const double an = p.grad[i];
    worst = std::max(worst, std::abs(an - fd) / std::max(1e-8, std::abs(an) + std::abs(fd)));
  }
  return worst;
}

}  // namespace normtune::nn
