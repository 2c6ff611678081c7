#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "normtune/lm/language_model.hpp"
#include "normtune/nn/loss.hpp"

namespace normtune::lm {

struct SamplingOptions {
  double temperature = 1.0;
  std::size_t top_k = 40;  // 0 = full distribution
  std::size_t max_new = 60;
};

// A prompt, its sampled continuation s and the word losses of s's n = |s|-1
// in-sentence predictions (tokens s[1..]) under the sampling model. The
// first continuation token is conditioned on the prompt and is not counted.
struct ContinuationRecord {
  TokenSequence prompt;
  TokenSequence continuation;
  std::vector<double> word_losses;
  int label = -1;  // classifier verdict once assigned
  std::size_t iteration = 0;

  std::size_t prediction_steps() const { return continuation.empty() ? 0 : continuation.size() - 1; }
  double mean_word_loss() const {
    if (word_losses.empty()) return 0.0;
    return std::accumulate(word_losses.begin(), word_losses.end(), 0.0) / static_cast<double>(word_losses.size());
  }
};

inline bool is_sentence_end(std::string_view token) { return token == "." || token == "!" || token == "?"; }

// Prefix up to and including the first ".", "!" or "?"; the input unchanged
// when none occurs.
inline std::vector<std::string> truncate_at_punctuation(std::span<const std::string> tokens) {
  const auto it = std::find_if(tokens.begin(), tokens.end(), [](const auto& t) { return is_sentence_end(t); });
  return {tokens.begin(), it == tokens.end() ? it : it + 1};
}

inline TokenSequence truncate_at_punctuation(std::span<const TokenId> tokens, const Vocabulary& vocab) {
  const auto it = std::find_if(tokens.begin(), tokens.end(),
                               [&](TokenId id) { return is_sentence_end(vocab.token(id)); });
  return {tokens.begin(), it == tokens.end() ? it : it + 1};
}

// Draws one token from temperature-scaled logits restricted to the top_k
// candidates. PAD and BOS are never drawn.
inline TokenId draw_token(std::span<const double> logits, const SamplingOptions& opts, Rng& rng) {
  std::vector<TokenId> candidates;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (static_cast<TokenId>(i) == Vocabulary::kPad || static_cast<TokenId>(i) == Vocabulary::kBos) continue;
    candidates.push_back(static_cast<TokenId>(i));
  }
  const std::size_t k = opts.top_k == 0 ? candidates.size() : std::min(opts.top_k, candidates.size());
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k), candidates.end(),
                    [&](TokenId a, TokenId b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); });
  candidates.resize(k);
  if (k == 1) return candidates[0];
  std::vector<double> scaled;
  scaled.reserve(k);
  for (TokenId id : candidates) scaled.push_back(logits[id] / opts.temperature);
  const auto probs = nn::softmax(scaled);
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    acc += probs[i];
    if (u < acc) return candidates[i];
  }
  return candidates.back();
}

// Autoregressive continuation of `prompt`: stops at EOS or after max_new
// tokens, then keeps the text up to the first sentence-ending mark.
inline ContinuationRecord sample_continuation(const LanguageModel& model, const TokenSequence& prompt,
                                              const SamplingOptions& opts, Rng& rng) {
  if (prompt.empty()) throw InvalidArgument("sample_continuation: empty prompt");
  if (prompt.size() >= model.config().context) {
    throw InvalidArgument("sample_continuation: prompt of " + std::to_string(prompt.size()) +
                          " tokens does not fit the context of " + std::to_string(model.config().context));
  }
  if (opts.max_new == 0) throw InvalidArgument("sample_continuation: max_new must be at least 1");
  if (!(opts.temperature > 0.0)) throw InvalidArgument("sample_continuation: temperature must be positive");

  ContinuationRecord rec;
  rec.prompt = prompt;
  TokenSequence seq = prompt;
  std::vector<double> losses;
  const auto& vocab = model.vocab();
  for (std::size_t step = 0; step < opts.max_new; ++step) {
    const auto logits = model.next_token_logits(seq);
    const TokenId tok = draw_token(logits, opts, rng);
    if (tok == Vocabulary::kEos) break;
    losses.push_back(nn::word_loss(logits, static_cast<std::size_t>(tok)));
    rec.continuation.push_back(tok);
    seq.push_back(tok);
    // Everything after the first sentence end would be truncated anyway.
    if (is_sentence_end(vocab.token(tok))) break;
  }
  if (!losses.empty()) rec.word_losses.assign(losses.begin() + 1, losses.end());
  return rec;
}

}  // namespace normtune::lm
