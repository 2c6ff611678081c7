#pragma once

#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "normtune/lm/language_model.hpp"
#include "normtune/nn/adam.hpp"

namespace normtune::lm {

// Windows of `sentences_per_window` consecutive sentences, each framed as
// BOS ... EOS and clipped to `context` tokens. Consecutive windows overlap by
// all but one sentence so every sentence is seen as a continuation.
inline std::vector<TokenSequence> make_lm_sequences(std::span<const std::string> texts, const Vocabulary& vocab,
                                                    std::size_t context, std::size_t sentences_per_window = 2) {
  if (sentences_per_window == 0) throw InvalidArgument("sentences_per_window must be positive");
  std::vector<TokenSequence> tokenized;
  tokenized.reserve(texts.size());
  for (const auto& t : texts) tokenized.push_back(corpus::tokenize(t, vocab));
  std::vector<TokenSequence> out;
  for (std::size_t k = 0; k < tokenized.size(); ++k) {
    TokenSequence seq{Vocabulary::kBos};
    for (std::size_t j = k; j < std::min(tokenized.size(), k + sentences_per_window); ++j) {
      seq.insert(seq.end(), tokenized[j].begin() + 1, tokenized[j].end());
    }
    seq.push_back(Vocabulary::kEos);
    if (seq.size() > context) seq.resize(context);
    out.push_back(std::move(seq));
  }
  return out;
}

inline void check_sequences(std::span<const TokenSequence> seqs, const LmConfig& cfg) {
  for (const auto& s : seqs) {
    if (s.size() > cfg.context) throw InvalidArgument("lm: sequence longer than the context window");
    for (TokenId id : s) {
      if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
        throw VocabularyMismatch("lm: token id " + std::to_string(id) + " outside the model vocabulary");
      }
    }
  }
}

// Teacher-forced next-token objective for a batch of sequences: inputs are
// seq[0..n-2], targets seq[1..n-1]; each prediction weighted 1/total.
struct NextTokenBatch {
  nn::PackedBatch packed;
  std::vector<std::int32_t> targets;
  std::vector<double> weights;
  std::size_t predictions = 0;
};

inline NextTokenBatch make_next_token_batch(std::span<const TokenSequence> seqs) {
  std::vector<std::vector<std::int32_t>> inputs;
  NextTokenBatch b;
  for (const auto& s : seqs) {
    if (s.size() < 2) continue;
    inputs.emplace_back(s.begin(), s.end() - 1);
    b.targets.insert(b.targets.end(), s.begin() + 1, s.end());
    b.predictions += s.size() - 1;
  }
  b.packed = nn::pack(inputs);
  b.weights.assign(b.targets.size(), b.predictions ? 1.0 / static_cast<double>(b.predictions) : 0.0);
  return b;
}

// Sum of word losses and prediction count over a corpus, without gradients.
inline std::pair<double, std::size_t> total_next_token_loss(const LanguageModel& model,
                                                            std::span<const TokenSequence> seqs,
                                                            std::size_t batch_size = 32) {
  check_sequences(seqs, model.config());
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < seqs.size(); start += batch_size) {
    const auto chunk = seqs.subspan(start, std::min(batch_size, seqs.size() - start));
    auto batch = make_next_token_batch(chunk);
    if (batch.predictions == 0) continue;
    std::fill(batch.weights.begin(), batch.weights.end(), 1.0);
    nn::Graph g(false);
    auto& m = const_cast<LanguageModel&>(model);
    const auto loss = nn::cross_entropy(m.logits(g, batch.packed), batch.targets, batch.weights);
    total += g.value(loss)[0];
    count += batch.predictions;
  }
  return {total, count};
}

// exp(mean next-token word loss) over every prediction in the corpus.
inline double perplexity(const LanguageModel& model, std::span<const TokenSequence> seqs) {
  const auto [total, count] = total_next_token_loss(model, seqs);
  if (count == 0) throw InvalidArgument("perplexity of an empty corpus");
  return std::exp(total / static_cast<double>(count));
}

struct LmTrainOptions {
  std::size_t epochs = 1;
  std::size_t batch_size = 16;
  double learning_rate = 3e-4;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  std::size_t max_steps = 0;  // 0 = no cap
};

struct LmEpochLog {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double train_loss = 0.0;
  std::optional<double> validation_loss;
};

struct LmTrainResult {
  LanguageModel model;
  std::vector<LmEpochLog> epochs;
  std::vector<double> step_losses;
};

inline LmTrainResult train_lm(std::span<const TokenSequence> train, std::span<const TokenSequence> validation,
                              LmConfig config, const Vocabulary& vocab, const LmTrainOptions& opts) {
  if (train.empty()) throw InvalidArgument("train_lm: empty training corpus");
  if (opts.batch_size == 0) throw InvalidArgument("train_lm: batch_size must be positive");
  config.vocab_size = vocab.size();
  LmTrainResult result{LanguageModel(config, vocab, derive_seed(opts.seed, 1)), {}, {}};
  auto& model = result.model;
  check_sequences(train, model.config());
  check_sequences(validation, model.config());

  auto state = nn::make_optimizer_state(model.params(), {opts.learning_rate, 0.9, 0.999, 1e-8, opts.clip_norm});
  Rng order_rng(derive_seed(opts.seed, 2));
  Rng dropout_rng(derive_seed(opts.seed, 3));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    if (opts.max_steps && result.step_losses.size() >= opts.max_steps) break;
    order_rng.shuffle(std::span(order));
    double epoch_loss = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      if (opts.max_steps && result.step_losses.size() >= opts.max_steps) break;
      std::vector<TokenSequence> chunk;
      for (std::size_t k = start; k < std::min(order.size(), start + opts.batch_size); ++k) {
        chunk.push_back(train[order[k]]);
      }
      const auto batch = make_next_token_batch(chunk);
      if (batch.predictions == 0) continue;
      model.params().zero_grad();
      nn::Graph g;
      const auto loss = nn::cross_entropy(model.logits(g, batch.packed, &dropout_rng), batch.targets, batch.weights);
      g.backward(loss);
      nn::optimizer_step(model.params(), state);
      const double l = g.value(loss)[0];
      result.step_losses.push_back(l);
      epoch_loss += l;
      ++epoch_steps;
    }
    LmEpochLog log{epoch + 1, epoch_steps, epoch_steps ? epoch_loss / static_cast<double>(epoch_steps) : 0.0, {}};
    if (!validation.empty()) {
      const auto [total, count] = total_next_token_loss(model, validation);
      if (count) log.validation_loss = total / static_cast<double>(count);
    }
    result.epochs.push_back(log);
  }
  return result;
}

}  // namespace normtune::lm
