#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "normtune/classifier/classifier.hpp"
#include "normtune/lm/language_model.hpp"
#include "normtune/lm/sampling.hpp"
#include "normtune/nn/adam.hpp"

namespace normtune::tune {

using classifier::SentenceJudge;
using corpus::TokenSequence;
using lm::ContinuationRecord;
using lm::LanguageModel;

// Linearly decaying punishment multiplier, clamped at zero.
inline double beta(std::size_t iteration, double decrement) {
  return std::max(0.0, 1.0 - static_cast<double>(iteration) * decrement);
}

// u(s) = rho * beta(i) * (1 - C(s)) * mean word loss.
inline double punishment(int label, double mean_word_loss, double rho, std::size_t iteration, double decrement) {
  if (!(rho > 0.0)) throw InvalidArgument("punishment: rho must be positive");
  if (label != 0 && label != 1) throw InvalidArgument("punishment: label must be 0 or 1");
  if (mean_word_loss < 0.0) throw InvalidArgument("punishment: mean word loss must be non-negative");
  return rho * beta(iteration, decrement) * static_cast<double>(1 - label) * mean_word_loss;
}

// Mean word loss of the continuation plus the punishment term.
inline double sentence_loss(std::span<const double> word_losses, double u) {
  if (word_losses.empty()) throw InvalidArgument("sentence_loss: continuation has no predictions");
  return std::accumulate(word_losses.begin(), word_losses.end(), 0.0) / static_cast<double>(word_losses.size()) + u;
}

enum class FreezePolicy { none, all_but_one_head, all_but_last_layer };
enum class PunishmentSign { as_published, reversed };

NLOHMANN_JSON_SERIALIZE_ENUM(FreezePolicy, {{FreezePolicy::none, "none"},
                                            {FreezePolicy::all_but_one_head, "all-but-one-head"},
                                            {FreezePolicy::all_but_last_layer, "all-but-last-layer"}})
NLOHMANN_JSON_SERIALIZE_ENUM(PunishmentSign, {{PunishmentSign::as_published, "as-published"},
                                              {PunishmentSign::reversed, "reversed"}})

inline constexpr std::size_t kLastLayer = std::numeric_limits<std::size_t>::max();

struct FineTuneConfig {
  double rho = 5.0;
  std::size_t max_iterations = 10;
  double beta_decrement = 0.05;
  std::vector<TokenSequence> prompts;  // reused unchanged at every iteration
  std::size_t samples_per_prompt = 1;
  double learning_rate = 1e-4;
  // Continuations per optimizer step; 0 takes one step per iteration.
  std::size_t batch_size = 0;
  double clip_norm = 1.0;
  FreezePolicy freeze = FreezePolicy::all_but_one_head;
  std::size_t freeze_layer = kLastLayer;
  std::size_t freeze_head = 0;
  bool resample_short = true;
  PunishmentSign sign = PunishmentSign::as_published;
  lm::SamplingOptions sampling;

  void validate() const {
    if (!(rho > 0.0)) throw InvalidArgument("finetune: rho must be positive");
    if (!(beta_decrement > 0.0 && beta_decrement <= 1.0)) {
      throw InvalidArgument("finetune: beta decrement must lie in (0, 1]");
    }
    if (prompts.empty()) throw InvalidArgument("finetune: prompt set is empty");
    if (samples_per_prompt == 0) throw InvalidArgument("finetune: samples_per_prompt must be positive");
    if (!(learning_rate > 0.0)) throw InvalidArgument("finetune: learning rate must be positive");
  }
};

struct IterationStats {
  std::size_t iteration = 0;
  double beta = 0.0;
  std::size_t n_continuations = 0;
  std::size_t n_flagged = 0;
  double mean_word_loss = 0.0;
  double mean_sentence_loss = 0.0;
  double mean_u = 0.0;
};

inline void to_json(nlohmann::json& j, const IterationStats& s) {
  j = {{"i", s.iteration},
       {"beta", s.beta},
       {"n_continuations", s.n_continuations},
       {"n_flagged", s.n_flagged},
       {"mean_word_loss", s.mean_word_loss},
       {"mean_u", s.mean_u},
       {"mean_sentence_loss", s.mean_sentence_loss}};
}

inline void from_json(const nlohmann::json& j, IterationStats& s) {
  j.at("i").get_to(s.iteration);
  j.at("beta").get_to(s.beta);
  j.at("n_continuations").get_to(s.n_continuations);
  j.at("n_flagged").get_to(s.n_flagged);
  j.at("mean_word_loss").get_to(s.mean_word_loss);
  j.at("mean_u").get_to(s.mean_u);
  j.at("mean_sentence_loss").get_to(s.mean_sentence_loss);
}

// Sets the trainable masks of `model` according to the policy.
inline void apply_freeze_policy(LanguageModel& model, FreezePolicy policy, std::size_t layer = kLastLayer,
                                std::size_t head = 0) {
  auto& params = model.params();
  const auto& cfg = model.config();
  const std::size_t target = layer == kLastLayer ? cfg.layers - 1 : layer;
  if (target >= cfg.layers) throw InvalidArgument("freeze policy: layer index out of range");
  switch (policy) {
    case FreezePolicy::none:
      params.unfreeze_all();
      break;
    case FreezePolicy::all_but_one_head:
      params.freeze_all();
      nn::unfreeze_attention_head(params, LanguageModel::block_prefix(target), head, cfg.heads);
      break;
    case FreezePolicy::all_but_last_layer: {
      params.freeze_all();
      const auto prefix = LanguageModel::block_prefix(cfg.layers - 1);
      for (auto& p : params) {
        if (p.name.starts_with(prefix)) p.unfreeze();
      }
      break;
    }
  }
}

using IterationObserver = std::function<void(std::size_t, const std::vector<ContinuationRecord>&)>;

namespace detail {

inline double sign_factor(PunishmentSign sign) { return sign == PunishmentSign::as_published ? 1.0 : -1.0; }

// Samples one continuation, resampling once if it has no in-sentence
// prediction when the config asks for it.
inline std::optional<ContinuationRecord> sample_usable(const LanguageModel& model, const TokenSequence& prompt,
                                                       const FineTuneConfig& cfg, std::uint64_t seed) {
  const int attempts = cfg.resample_short ? 2 : 1;
  for (int a = 0; a < attempts; ++a) {
    Rng rng(derive_seed(seed, a));
    auto rec = lm::sample_continuation(model, prompt, cfg.sampling, rng);
    if (rec.prediction_steps() >= 1) return rec;
  }
  return std::nullopt;
}

}  // namespace detail

// One pass of the fixed-prompt loop: sample a continuation for every prompt,
// label it, and descend on the sentence loss (word loss scaled by
// 1 + rho*beta*(1-C), sign-flipped for the reversed variant).
template <SentenceJudge J>
IterationStats finetune_iteration(LanguageModel& model, nn::OptimizerState& state, const J& judge,
                                  const FineTuneConfig& cfg, std::size_t iteration, std::uint64_t seed,
                                  std::vector<ContinuationRecord>* records_out = nullptr) {
  cfg.validate();
  const double b = beta(iteration, cfg.beta_decrement);
  const double sign = detail::sign_factor(cfg.sign);
  const auto& vocab = model.vocab();
  const std::size_t context = model.config().context;

  // Sampling reads a frozen snapshot of the model for the whole iteration.
  std::vector<ContinuationRecord> records;
  for (std::size_t p = 0; p < cfg.prompts.size(); ++p) {
    for (std::size_t s = 0; s < cfg.samples_per_prompt; ++s) {
      auto rec = detail::sample_usable(model, cfg.prompts[p], cfg, derive_seed(seed, iteration, p, s));
      if (!rec) continue;
      const auto text = corpus::detokenize(rec->continuation, vocab);
      if (corpus::trim(text).empty()) continue;
      rec->label = judge.judge(text).label;
      rec->iteration = iteration;
      records.push_back(std::move(*rec));
    }
  }

  IterationStats stats;
  stats.iteration = iteration;
  stats.beta = b;
  stats.n_continuations = records.size();
  if (records.empty()) {
    if (records_out) *records_out = std::move(records);
    return stats;
  }

  const std::size_t batch = cfg.batch_size == 0 ? records.size() : cfg.batch_size;
  for (std::size_t start = 0; start < records.size(); start += batch) {
    const std::size_t end = std::min(records.size(), start + batch);
    const double per_record = 1.0 / static_cast<double>(end - start);
    std::vector<std::vector<std::int32_t>> inputs;
    std::vector<std::int32_t> targets;
    std::vector<double> weights;
    std::vector<std::pair<std::size_t, std::size_t>> rows;  // first row, row count of each record
    for (std::size_t r = start; r < end; ++r) {
      auto& rec = records[r];
      TokenSequence seq = rec.prompt;
      seq.insert(seq.end(), rec.continuation.begin(), rec.continuation.end());
      std::size_t prompt_len = rec.prompt.size();
      if (seq.size() > context) {
        const std::size_t drop = seq.size() - context;
        seq.erase(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(drop));
        prompt_len = prompt_len > drop ? prompt_len - drop : 0;
      }
      const std::size_t n = rec.prediction_steps();
      const double factor = 1.0 + sign * cfg.rho * b * static_cast<double>(1 - rec.label);
      const std::size_t offset = targets.size();
      // Row k predicts seq[k + 1]; continuation token j (j >= 1) sits at
      // prompt_len + j.
      const std::size_t first_row = prompt_len;  // predicts continuation token 1
      for (std::size_t k = 0; k + 1 < seq.size(); ++k) {
        targets.push_back(seq[k + 1]);
        const bool scored = k >= first_row && k < first_row + n;
        weights.push_back(scored ? per_record * factor / static_cast<double>(n) : 0.0);
      }
      rows.emplace_back(offset + first_row, n);
      inputs.emplace_back(seq.begin(), seq.end() - 1);
    }
    model.params().zero_grad();
    nn::Graph g;
    std::vector<double> row_losses;
    const auto loss = nn::cross_entropy(model.logits(g, nn::pack(inputs)), targets, weights, &row_losses);
    for (std::size_t r = start; r < end; ++r) {
      const auto [first, n] = rows[r - start];
      records[r].word_losses.assign(row_losses.begin() + static_cast<std::ptrdiff_t>(first),
                                    row_losses.begin() + static_cast<std::ptrdiff_t>(first + n));
    }
    g.backward(loss);
    nn::optimizer_step(model.params(), state);
  }

  for (const auto& rec : records) {
    const double mean = rec.mean_word_loss();
    const double u = punishment(rec.label, mean, cfg.rho, iteration, cfg.beta_decrement);
    stats.n_flagged += rec.label == 0 ? 1 : 0;
    stats.mean_word_loss += mean;
    stats.mean_u += u;
    stats.mean_sentence_loss += sentence_loss(rec.word_losses, sign * u);
  }
  const double count = static_cast<double>(records.size());
  stats.mean_word_loss /= count;
  stats.mean_u /= count;
  stats.mean_sentence_loss /= count;
  if (records_out) *records_out = std::move(records);
  return stats;
}

struct FineTuneResult {
  LanguageModel model;
  std::vector<IterationStats> stats;
};

// Runs iterations 0..max_iterations-1 on a copy of `baseline`; the baseline
// and the judge are left untouched.
template <SentenceJudge J>
FineTuneResult run_finetune(const LanguageModel& baseline, const J& judge, const FineTuneConfig& cfg,
                            std::uint64_t seed, const IterationObserver& observer = {}) {
  if (cfg.max_iterations == 0) throw InvalidArgument("run_finetune: max_iterations must be at least 1");
  cfg.validate();
  FineTuneResult result{baseline, {}};
  apply_freeze_policy(result.model, cfg.freeze, cfg.freeze_layer, cfg.freeze_head);
  auto state = nn::make_optimizer_state(result.model.params(),
                                        {cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.clip_norm});
  for (std::size_t i = 0; i < cfg.max_iterations; ++i) {
    std::vector<ContinuationRecord> records;
    result.stats.push_back(finetune_iteration(result.model, state, judge, cfg, i, seed, &records));
    if (observer) observer(i, records);
  }
  result.model.params().unfreeze_all();
  return result;
}

}  // namespace normtune::tune
