#pragma once

#include <array>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "normtune/classifier/classifier.hpp"
#include "normtune/lm/sampling.hpp"

namespace normtune::eval {

using classifier::SentenceJudge;
using corpus::TokenSequence;

// One generated sentence kept for human audit.
struct AuditRecord {
  std::string prompt;
  std::string continuation;
  int label = 0;
  double word_loss_mean = 0.0;
};

inline void to_json(nlohmann::json& j, const AuditRecord& r) {
  j = {{"prompt", r.prompt}, {"continuation", r.continuation}, {"label", r.label}, {"word_loss_mean", r.word_loss_mean}};
}

inline void from_json(const nlohmann::json& j, AuditRecord& r) {
  j.at("prompt").get_to(r.prompt);
  j.at("continuation").get_to(r.continuation);
  j.at("label").get_to(r.label);
  j.at("word_loss_mean").get_to(r.word_loss_mean);
}

struct FlaggedMeasurement {
  std::size_t total = 0;
  std::size_t flagged = 0;
  std::vector<AuditRecord> records;

  double proportion() const {
    if (total == 0) throw InvalidArgument("flagged proportion of zero samples");
    return static_cast<double>(flagged) / static_cast<double>(total);
  }
};

inline std::string prompt_key(const TokenSequence& p) {
  std::string key;
  for (auto id : p) key += std::to_string(id) + ",";
  return key;
}

// Evaluation prompts must not overlap the prompts the model was tuned on.
inline void require_disjoint_prompts(std::span<const TokenSequence> eval_prompts,
                                     std::span<const TokenSequence> tuning_prompts) {
  std::set<std::string> tuned;
  for (const auto& p : tuning_prompts) tuned.insert(prompt_key(p));
  for (const auto& p : eval_prompts) {
    if (tuned.count(prompt_key(p))) throw InvalidArgument("evaluation prompt also used for fine-tuning");
  }
}

// Continuation i of prompt p is drawn from a stream seeded by (seed, p, i),
// so two models evaluated with the same seed see identical random draws.
template <SentenceJudge J>
FlaggedMeasurement measure_flagged_ratio(const lm::LanguageModel& model, const J& judge,
                                         std::span<const TokenSequence> prompts, std::size_t samples_per_prompt,
                                         std::uint64_t seed, const lm::SamplingOptions& sampling = {}) {
  FlaggedMeasurement m;
  const auto& vocab = model.vocab();
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    for (std::size_t s = 0; s < samples_per_prompt; ++s) {
      std::string text;
      lm::ContinuationRecord rec;
      for (int attempt = 0; attempt < 2 && corpus::trim(text).empty(); ++attempt) {
        Rng rng(derive_seed(seed, p, s, attempt));
        rec = lm::sample_continuation(model, prompts[p], sampling, rng);
        text = corpus::detokenize(rec.continuation, vocab);
      }
      if (corpus::trim(text).empty()) continue;
      const int label = judge.judge(text).label;
      ++m.total;
      if (label == 0) ++m.flagged;
      m.records.push_back({corpus::detokenize(prompts[p], vocab), text, label, rec.mean_word_loss()});
    }
  }
  if (m.total == 0) throw InvalidArgument("measure_flagged_ratio: no samples were produced");
  return m;
}

// Relative drop (p - p_hat) / p; negative when the rate went up.
inline double percentage_decrease(double p, double p_hat) {
  if (!(p > 0.0)) throw InvalidArgument("percentage_decrease: baseline proportion must be positive");
  return (p - p_hat) / p;
}

// Two judges over the same sentences. Letters give A's then B's verdict:
// a = acceptable (label 1), f = flagged (label 0).
struct QuadrantCounts {
  std::size_t aa = 0;
  std::size_t ff = 0;
  std::size_t af = 0;
  std::size_t fa = 0;

  std::size_t total() const { return aa + ff + af + fa; }
  // Proportions in the order aa, ff, af, fa.
  std::array<double, 4> proportions() const {
    const auto n = static_cast<double>(total());
    if (n == 0) throw InvalidArgument("quadrant proportions of zero sentences");
    return {static_cast<double>(aa) / n, static_cast<double>(ff) / n, static_cast<double>(af) / n,
            static_cast<double>(fa) / n};
  }
  double agreement() const {
    const auto p = proportions();
    return p[0] + p[1];
  }

  friend bool operator==(const QuadrantCounts&, const QuadrantCounts&) = default;
};

template <SentenceJudge A, SentenceJudge B>
QuadrantCounts quadrant_agreement(const A& judge_a, const B& judge_b, std::span<const std::string> sentences) {
  if (sentences.empty()) throw InvalidArgument("quadrant_agreement: no sentences");
  QuadrantCounts q;
  for (const auto& s : sentences) {
    const bool a_ok = judge_a.judge(s).label == 1;
    const bool b_ok = judge_b.judge(s).label == 1;
    if (a_ok && b_ok) {
      ++q.aa;
    } else if (!a_ok && !b_ok) {
      ++q.ff;
    } else if (a_ok) {
      ++q.af;
    } else {
      ++q.fa;
    }
  }
  return q;
}

}  // namespace normtune::eval
