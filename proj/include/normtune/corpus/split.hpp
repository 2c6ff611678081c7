#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "normtune/corpus/sentence.hpp"
#include "normtune/util/error.hpp"
#include "normtune/util/random.hpp"

namespace normtune::corpus {

struct SplitRatios {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
};

struct CorpusSplit {
  std::vector<LabeledSentence> train;
  std::vector<LabeledSentence> validation;
  std::vector<LabeledSentence> test;
  std::uint64_t split_seed = 0;
};

// Seeded shuffle, then train/validation sizes rounded to nearest and the
// remainder assigned to test.
inline CorpusSplit split(const std::vector<LabeledSentence>& sentences, SplitRatios ratios, std::uint64_t seed) {
  if (!(ratios.train > 0 && ratios.validation > 0 && ratios.test > 0)) {
    throw InvalidArgument("split ratios must be positive");
  }
  if (std::abs(ratios.train + ratios.validation + ratios.test - 1.0) > 1e-9) {
    throw InvalidArgument("split ratios must sum to 1");
  }
  const std::size_t n = sentences.size();
  if (n < 3) throw InvalidArgument("split needs at least 3 sentences, got " + std::to_string(n));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));

  auto n_train = static_cast<std::size_t>(std::llround(ratios.train * static_cast<double>(n)));
  auto n_val = static_cast<std::size_t>(std::llround(ratios.validation * static_cast<double>(n)));
  n_train = std::min(n_train, n);
  n_val = std::min(n_val, n - n_train);

  CorpusSplit out;
  out.split_seed = seed;
  for (std::size_t k = 0; k < n; ++k) {
    const auto& s = sentences[order[k]];
    if (k < n_train) {
      out.train.push_back(s);
    } else if (k < n_train + n_val) {
      out.validation.push_back(s);
    } else {
      out.test.push_back(s);
    }
  }
  return out;
}

}  // namespace normtune::corpus
