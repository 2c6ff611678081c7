#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "normtune/corpus/vocabulary.hpp"
#include "normtune/nn/checkpoint.hpp"
#include "normtune/nn/transformer.hpp"

namespace normtune::lm {

using corpus::TokenId;
using corpus::TokenSequence;
using corpus::Vocabulary;

struct LmConfig {
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t width = 128;
  std::size_t context = 64;
  double dropout = 0.1;
  std::size_t vocab_size = 0;

  void validate() const {
    if (layers == 0) throw InvalidArgument("lm: layers must be positive");
    if (heads == 0 || width % heads != 0) throw InvalidArgument("lm: width must be divisible by heads");
    if (context < 2) throw InvalidArgument("lm: context must be at least 2");
    if (dropout < 0.0 || dropout >= 1.0) throw InvalidArgument("lm: dropout must be in [0, 1)");
    if (vocab_size <= Vocabulary::kReserved) throw InvalidArgument("lm: vocabulary too small");
  }

  friend bool operator==(const LmConfig&, const LmConfig&) = default;
};

inline void to_json(nlohmann::json& j, const LmConfig& c) {
  j = {{"layers", c.layers}, {"heads", c.heads},     {"width", c.width},
       {"context", c.context}, {"dropout", c.dropout}, {"vocab_size", c.vocab_size}};
}

inline void from_json(const nlohmann::json& j, LmConfig& c) {
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.width = j.value("width", c.width);
  c.context = j.value("context", c.context);
  c.dropout = j.value("dropout", c.dropout);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
}

// Decoder-only transformer: token + learned position embeddings, `layers`
// pre-LN causal blocks, final layer norm and an untied output projection.
class LanguageModel {
 public:
  LanguageModel(LmConfig config, Vocabulary vocab, std::uint64_t init_seed)
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
    params_.add_normal("head.w", {d, config_.vocab_size}, 0.02, rng);
  }

  LanguageModel(LmConfig config, Vocabulary vocab, nn::ParameterSet params)
      : config_(std::move(config)), vocab_(std::move(vocab)), params_(std::move(params)) {
    if (config_.vocab_size != vocab_.size()) {
      throw VocabularyMismatch("lm: checkpoint vocab_size " + std::to_string(config_.vocab_size) +
                               " differs from vocabulary size " + std::to_string(vocab_.size()));
    }
    config_.validate();
    const LanguageModel reference(config_, vocab_, 0);
    if (reference.params_.size() != params_.size()) throw FormatError("lm: parameter set does not match config");
    for (std::size_t k = 0; k < params_.size(); ++k) {
      if (reference.params_[k].name != params_[k].name ||
          reference.params_[k].value.shape() != params_[k].value.shape()) {
        throw FormatError("lm: unexpected parameter '" + params_[k].name + "'");
      }
    }
  }

  static std::string block_prefix(std::size_t layer) { return "h" + std::to_string(layer) + "."; }

  const LmConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

  // Logits [tokens, vocab] for a packed batch. Dropout is applied only when
  // `dropout_rng` is non-null.
  nn::Var logits(nn::Graph& g, const nn::PackedBatch& batch, Rng* dropout_rng = nullptr) {
    return forward(g, params_, batch, dropout_rng);
  }

  // Next-token logits after `prefix` (the last `context` tokens are used).
  // Read-only: the graph never records gradients.
  std::vector<double> next_token_logits(std::span<const TokenId> prefix) const {
    if (prefix.empty()) throw InvalidArgument("lm: empty prefix");
    if (prefix.size() > config_.context) prefix = prefix.subspan(prefix.size() - config_.context);
    const std::vector<std::vector<TokenId>> seqs{std::vector<TokenId>(prefix.begin(), prefix.end())};
    const auto batch = nn::pack(seqs);
    nn::Graph g(false);
    // Without gradients the graph only reads parameter values.
    const nn::Var out = forward(g, const_cast<nn::ParameterSet&>(params_), batch, nullptr);
    const auto& t = g.value(out);
    const std::size_t v = t.cols();
    return {t.data() + (t.rows() - 1) * v, t.data() + t.rows() * v};
  }

  void save(const std::filesystem::path& dir, const nlohmann::json& extra = nlohmann::json::object()) const {
    nlohmann::json hp = extra;
    hp["model"] = config_;
    nn::save_checkpoint(params_, {"lm", hp, vocab_.sha256(), {}}, dir);
    vocab_.save(dir / "vocab.txt");
  }

  static LanguageModel load(const std::filesystem::path& dir, std::vector<std::string>* warnings = nullptr) {
    auto vocab = Vocabulary::load(dir / "vocab.txt");
    auto ck = nn::load_checkpoint(dir, vocab.sha256());
    if (ck.metadata.kind != "lm") throw FormatError(dir.string() + " is not a language-model checkpoint");
    if (warnings) *warnings = ck.warnings;
    return LanguageModel(ck.metadata.hyperparams.at("model").get<LmConfig>(), std::move(vocab),
                         std::move(ck.params));
  }

 private:
  nn::Var forward(nn::Graph& g, nn::ParameterSet& params, const nn::PackedBatch& batch, Rng* rng) const {
    for (const auto& seg : batch.segments) {
      if (seg.length > config_.context) throw InvalidArgument("lm: sequence longer than context");
    }
    const double p = rng ? config_.dropout : 0.0;
    nn::Var x = nn::add(nn::embedding(g.parameter(params.get("tok_emb")), batch.tokens),
                        nn::embedding(g.parameter(params.get("pos_emb")), batch.positions));
    if (p > 0.0) x = nn::dropout(x, p, *rng);
    const nn::BlockOptions opts{config_.heads, true, p, rng};
    for (std::size_t l = 0; l < config_.layers; ++l) {
      x = nn::transformer_block(g, params, block_prefix(l), x, batch.segments, opts);
    }
    x = nn::layer_norm(x, g.parameter(params.get("ln_f.gain")), g.parameter(params.get("ln_f.shift")));
    return nn::matmul(x, g.parameter(params.get("head.w")));
  }

  LmConfig config_;
  Vocabulary vocab_;
  nn::ParameterSet params_;
};

}  // namespace normtune::lm
