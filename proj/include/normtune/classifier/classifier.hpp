#pragma once

#include <algorithm>
#include <array>
#include <concepts>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "normtune/corpus/sentence.hpp"
#include "normtune/corpus/vocabulary.hpp"
#include "normtune/nn/adam.hpp"
#include "normtune/nn/checkpoint.hpp"
#include "normtune/nn/transformer.hpp"

namespace normtune::classifier {

using corpus::LabeledSentence;
using corpus::TokenId;
using corpus::TokenSequence;
using corpus::Vocabulary;

enum class Pooling { mean, first_token };

NLOHMANN_JSON_SERIALIZE_ENUM(Pooling, {{Pooling::mean, "mean"}, {Pooling::first_token, "first-token"}})

struct ClassifierConfig {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t width = 128;
  std::size_t context = 64;
  Pooling pooling = Pooling::mean;
  double threshold = 0.5;
  double dropout = 0.1;
  std::size_t vocab_size = 0;

  void validate() const {
    if (layers == 0) throw InvalidArgument("classifier: layers must be positive");
    if (heads == 0 || width % heads != 0) throw InvalidArgument("classifier: width must be divisible by heads");
    if (context < 2) throw InvalidArgument("classifier: context must be at least 2");
    if (!(threshold > 0.0 && threshold < 1.0)) throw InvalidArgument("classifier: threshold must lie in (0, 1)");
    if (dropout < 0.0 || dropout >= 1.0) throw InvalidArgument("classifier: dropout must be in [0, 1)");
    if (vocab_size <= Vocabulary::kReserved) throw InvalidArgument("classifier: vocabulary too small");
  }

  friend bool operator==(const ClassifierConfig&, const ClassifierConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ClassifierConfig& c) {
  j = {{"layers", c.layers},     {"heads", c.heads},         {"width", c.width},
       {"context", c.context},   {"pooling", c.pooling},     {"threshold", c.threshold},
       {"dropout", c.dropout},   {"vocab_size", c.vocab_size}};
}

inline void from_json(const nlohmann::json& j, ClassifierConfig& c) {
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.width = j.value("width", c.width);
  c.context = j.value("context", c.context);
  c.pooling = j.value("pooling", c.pooling);
  c.threshold = j.value("threshold", c.threshold);
  c.dropout = j.value("dropout", c.dropout);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
}

// Probability of the acceptable class (label 1) and the thresholded label.
struct Judgement {
  double probability = 0.0;
  int label = 0;
};

// Ties at the threshold count as acceptable.
inline Judgement judgement_from_probability(double probability, double threshold = 0.5) {
  return {probability, probability >= threshold ? 1 : 0};
}

// Anything that labels a raw sentence.
template <class J>
concept SentenceJudge = requires(const J& j, std::string_view text) {
  { j.judge(text) } -> std::convertible_to<Judgement>;
};

// Adapts a callable into a SentenceJudge.
struct FunctionJudge {
  std::function<Judgement(std::string_view)> fn;
  Judgement judge(std::string_view text) const { return fn(text); }
};

// Bidirectional transformer encoder with pooled sigmoid head.
class Classifier {
 public:
  Classifier(ClassifierConfig config, Vocabulary vocab, std::uint64_t init_seed)
      : config_(std::move(config)), vocab_(std::move(vocab)) {
    config_.vocab_size = vocab_.size();
    config_.validate();
    Rng rng(init_seed);
    const std::size_t d = config_.width;
    params_.add_normal("tok_emb", {config_.vocab_size, d}, 0.02, rng);
    params_.add_normal("pos_emb", {config_.context, d}, 0.01, rng);
    for (std::size_t l = 0; l < config_.layers; ++l) {
      nn::add_block_parameters(params_, block_prefix(l), d, config_.layers, rng);
    }
    params_.add("ln_f.gain", nn::Tensor({d}, 1.0));
    params_.add("ln_f.shift", nn::Tensor({d}));
    // Zero head: an untrained classifier outputs exactly 0.5.
    params_.add("cls.w", nn::Tensor({d, 1}));
    params_.add("cls.b", nn::Tensor({1}));
  }

  Classifier(ClassifierConfig config, Vocabulary vocab, nn::ParameterSet params)
      : config_(std::move(config)), vocab_(std::move(vocab)), params_(std::move(params)) {
    if (config_.vocab_size != vocab_.size()) {
      throw VocabularyMismatch("classifier: checkpoint vocab_size differs from its vocabulary");
    }
    config_.validate();
    const Classifier reference(config_, vocab_, 0);
    if (reference.params_.size() != params_.size()) {
      throw FormatError("classifier: parameter set does not match config");
    }
    for (std::size_t k = 0; k < params_.size(); ++k) {
      if (reference.params_[k].name != params_[k].name ||
          reference.params_[k].value.shape() != params_[k].value.shape()) {
        throw FormatError("classifier: unexpected parameter '" + params_[k].name + "'");
      }
    }
  }

  static std::string block_prefix(std::size_t layer) { return "e" + std::to_string(layer) + "."; }

  const ClassifierConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

  // One logit per packed sequence, shape [sequences, 1].
  nn::Var logits(nn::Graph& g, const nn::PackedBatch& batch, Rng* dropout_rng = nullptr) {
    return forward(g, params_, batch, dropout_rng);
  }

  // Clips to the context window; BOS is added when missing.
  TokenSequence prepare(TokenSequence tokens) const {
    if (tokens.empty() || tokens.front() != Vocabulary::kBos) tokens.insert(tokens.begin(), Vocabulary::kBos);
    if (tokens.size() > config_.context) tokens.resize(config_.context);
    return tokens;
  }

  double probability(const TokenSequence& tokens) const {
    const auto seq = prepare(tokens);
    if (seq.size() < 2) throw InvalidArgument("classify: empty sentence");
    for (TokenId id : seq) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) {
        throw VocabularyMismatch("classify: token id outside the classifier vocabulary");
      }
    }
    const std::vector<TokenSequence> one{seq};
    nn::Graph g(false);
    const auto z = forward(g, const_cast<nn::ParameterSet&>(params_), nn::pack(one), nullptr);
    return 1.0 / (1.0 + std::exp(-g.value(z)[0]));
  }

  Judgement classify(const TokenSequence& tokens) const {
    return judgement_from_probability(probability(tokens), config_.threshold);
  }

  // Tokenizes raw text with this classifier's own vocabulary. Text whose
  // words are all unknown to the vocabulary cannot be judged.
  Judgement judge(std::string_view text) const {
    const auto tokens = corpus::tokenize(text, vocab_);
    if (tokens.size() < 2) throw InvalidArgument("classify: empty sentence");
    if (std::all_of(tokens.begin() + 1, tokens.end(), [](TokenId id) { return id == Vocabulary::kUnk; })) {
      throw VocabularyMismatch("classifier vocabulary shares no word with '" + std::string(text) + "'");
    }
    return classify(tokens);
  }

  void save(const std::filesystem::path& dir, const nlohmann::json& extra = nlohmann::json::object()) const {
    nlohmann::json hp = extra;
    hp["model"] = config_;
    nn::save_checkpoint(params_, {"classifier", hp, vocab_.sha256(), {}}, dir);
    vocab_.save(dir / "vocab.txt");
  }

  static Classifier load(const std::filesystem::path& dir, std::vector<std::string>* warnings = nullptr) {
    auto vocab = Vocabulary::load(dir / "vocab.txt");
    auto ck = nn::load_checkpoint(dir, vocab.sha256());
    if (ck.metadata.kind != "classifier") throw FormatError(dir.string() + " is not a classifier checkpoint");
    if (warnings) *warnings = ck.warnings;
    return Classifier(ck.metadata.hyperparams.at("model").get<ClassifierConfig>(), std::move(vocab),
                      std::move(ck.params));
  }

 private:
  nn::Var forward(nn::Graph& g, nn::ParameterSet& params, const nn::PackedBatch& batch, Rng* rng) const {
    const double p = rng ? config_.dropout : 0.0;
    nn::Var x = nn::add(nn::embedding(g.parameter(params.get("tok_emb")), batch.tokens),
                        nn::embedding(g.parameter(params.get("pos_emb")), batch.positions));
    if (p > 0.0) x = nn::dropout(x, p, *rng);
    const nn::BlockOptions opts{config_.heads, false, p, rng};
    for (std::size_t l = 0; l < config_.layers; ++l) {
      x = nn::transformer_block(g, params, block_prefix(l), x, batch.segments, opts);
    }
    x = nn::layer_norm(x, g.parameter(params.get("ln_f.gain")), g.parameter(params.get("ln_f.shift")));
    const nn::Var pooled = config_.pooling == Pooling::mean ? nn::segment_mean(x, batch.segments)
                                                            : nn::segment_first(x, batch.segments);
    return nn::add_bias(nn::matmul(pooled, g.parameter(params.get("cls.w"))), g.parameter(params.get("cls.b")));
  }

  ClassifierConfig config_;
  Vocabulary vocab_;
  nn::ParameterSet params_;
};

struct AccuracyReport {
  std::size_t total = 0;
  std::size_t correct = 0;
  // confusion[true_label][predicted_label]
  std::array<std::array<std::size_t, 2>, 2> confusion{};

  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
  double error_rate() const {
    return total ? static_cast<double>(total - correct) / static_cast<double>(total) : 0.0;
  }
};

template <SentenceJudge J>
AccuracyReport evaluate_accuracy(const J& judge, std::span<const LabeledSentence> test) {
  AccuracyReport r;
  for (const auto& s : test) {
    const int predicted = judge.judge(s.text).label;
    ++r.confusion[static_cast<std::size_t>(s.label)][static_cast<std::size_t>(predicted)];
    ++r.total;
    if (predicted == s.label) ++r.correct;
  }
  return r;
}

struct ClassifierTrainOptions {
  std::size_t epochs = 8;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
};

struct ClassifierEpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> heldout_accuracy;
};

struct ClassifierTrainResult {
  Classifier model;
  std::vector<ClassifierEpochLog> epochs;
};

namespace detail {

// Runs `epochs` passes of mean binary cross-entropy over `data`.
inline std::vector<ClassifierEpochLog> fit(Classifier& model, std::span<const LabeledSentence> data,
                                           const ClassifierTrainOptions& opts,
                                           std::span<const LabeledSentence> heldout) {
  std::vector<TokenSequence> seqs;
  std::vector<int> labels;
  for (const auto& s : data) {
    seqs.push_back(model.prepare(corpus::tokenize(s.text, model.vocab())));
    labels.push_back(s.label);
  }
  auto state = nn::make_optimizer_state(model.params(), {opts.learning_rate, 0.9, 0.999, 1e-8, opts.clip_norm});
  Rng order_rng(derive_seed(opts.seed, 2));
  Rng dropout_rng(derive_seed(opts.seed, 3));
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<ClassifierEpochLog> logs;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    order_rng.shuffle(std::span(order));
    double total = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      std::vector<TokenSequence> chunk;
      std::vector<int> ys;
      for (std::size_t k = start; k < std::min(order.size(), start + opts.batch_size); ++k) {
        chunk.push_back(seqs[order[k]]);
        ys.push_back(labels[order[k]]);
      }
      const std::vector<double> ws(ys.size(), 1.0 / static_cast<double>(ys.size()));
      model.params().zero_grad();
      nn::Graph g;
      const auto loss = nn::bce_with_logits(model.logits(g, nn::pack(chunk), &dropout_rng), ys, ws);
      g.backward(loss);
      nn::optimizer_step(model.params(), state);
      total += g.value(loss)[0];
      ++steps;
    }
    ClassifierEpochLog log{epoch + 1, steps ? total / static_cast<double>(steps) : 0.0, {}};
    if (!heldout.empty()) log.heldout_accuracy = evaluate_accuracy(model, heldout).accuracy();
    logs.push_back(log);
  }
  return logs;
}

}  // namespace detail

inline ClassifierTrainResult train_classifier(std::span<const LabeledSentence> train, const Vocabulary& vocab,
                                              ClassifierConfig config, const ClassifierTrainOptions& opts,
                                              std::span<const LabeledSentence> heldout = {}) {
  const bool has0 = std::any_of(train.begin(), train.end(), [](const auto& s) { return s.label == 0; });
  const bool has1 = std::any_of(train.begin(), train.end(), [](const auto& s) { return s.label == 1; });
  if (!has0 || !has1) throw InvalidArgument("train_classifier: training data must contain both labels");
  if (opts.batch_size == 0) throw InvalidArgument("train_classifier: batch_size must be positive");
  config.vocab_size = vocab.size();
  ClassifierTrainResult result{Classifier(config, vocab, derive_seed(opts.seed, 1)), {}};
  result.epochs = detail::fit(result.model, train, opts, heldout);
  return result;
}

struct FewShotResult {
  Classifier model;
  std::optional<double> accuracy_before;
  std::optional<double> accuracy_after;
};

// Continues training on a small labeled sample from a new domain. The sample
// must have been prepared against the classifier's own vocabulary.
inline FewShotResult few_shot_finetune(const Classifier& base, const Vocabulary& sample_vocab,
                                       std::span<const LabeledSentence> examples, std::size_t iterations,
                                       ClassifierTrainOptions opts, std::span<const LabeledSentence> heldout = {}) {
  if (iterations < 1 || iterations > 10) throw InvalidArgument("few_shot_finetune: iterations must lie in [1, 10]");
  if (sample_vocab.sha256() != base.vocab().sha256()) {
    throw VocabularyMismatch("few_shot_finetune: sample vocabulary differs from the classifier's");
  }
  FewShotResult r{base, {}, {}};
  if (!heldout.empty()) r.accuracy_before = evaluate_accuracy(base, heldout).accuracy();
  if (!examples.empty()) {
    opts.epochs = iterations;
    detail::fit(r.model, examples, opts, {});
  }
  if (!heldout.empty()) r.accuracy_after = evaluate_accuracy(r.model, heldout).accuracy();
  return r;
}

}  // namespace normtune::classifier
