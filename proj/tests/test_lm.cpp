#include <cmath>

#include <gtest/gtest.h>

#include "normtune/corpus/synthetic.hpp"
#include "normtune/lm/sampling.hpp"
#include "normtune/lm/training.hpp"
#include "normtune/nn/grad_check.hpp"
#include "test_util.hpp"

using namespace normtune;
using namespace normtune::lm;
using corpus::TokenSequence;
using corpus::Vocabulary;

namespace {

LmConfig tiny(std::size_t layers = 2, std::size_t width = 32) {
  LmConfig c;
  c.layers = layers;
  c.heads = 4;
  c.width = width;
  c.context = 24;
  c.dropout = 0.0;
  return c;
}

Vocabulary vocab_of(const std::vector<std::string>& texts, std::size_t max = 128) {
  return Vocabulary::build(std::span<const std::string>(texts), max);
}

std::vector<std::string> toy_texts(std::size_t per_class, std::uint64_t seed) {
  corpus::SyntheticSpec spec;
  spec.benign_markers = {"helps", "greets"};
  spec.undesirable_markers = {"robs", "hits"};
  spec.count_per_class = per_class;
  std::vector<std::string> out;
  for (const auto& s : corpus::generate_synthetic(spec, seed)) out.push_back(s.text);
  return out;
}

// Independent recomputation: one next_token_logits call per prediction.
double direct_perplexity(const LanguageModel& m, const std::vector<TokenSequence>& seqs) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& s : seqs) {
    for (std::size_t k = 1; k < s.size(); ++k) {
      const auto logits = m.next_token_logits(std::span<const corpus::TokenId>(s.data(), k));
      total += nn::word_loss(logits, static_cast<std::size_t>(s[k]));
      ++count;
    }
  }
  return std::exp(total / static_cast<double>(count));
}

}  // namespace

TEST(LmConfig, Validation) {
  auto c = tiny();
  c.vocab_size = 10;
  EXPECT_NO_THROW(c.validate());
  auto bad = c;
  bad.width = 30;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  bad = c;
  bad.context = 1;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  bad = c;
  bad.dropout = 1.0;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  const nlohmann::json j = c;
  EXPECT_EQ(j.get<LmConfig>(), c);
}

TEST(Truncate, Examples) {
  using V = std::vector<std::string>;
  const V a{"he", "runs", ".", "then", "falls"};
  EXPECT_EQ(truncate_at_punctuation(std::span<const std::string>(a)), (V{"he", "runs", "."}));
  const V b{"he", "runs"};
  EXPECT_EQ(truncate_at_punctuation(std::span<const std::string>(b)), b);
  const V c{"?", "x"};
  EXPECT_EQ(truncate_at_punctuation(std::span<const std::string>(c)), (V{"?"}));
  const V d{"wait", "!", "no", "."};
  EXPECT_EQ(truncate_at_punctuation(std::span<const std::string>(d)), (V{"wait", "!"}));
  const V e{"a", ",", "b"};
  EXPECT_EQ(truncate_at_punctuation(std::span<const std::string>(e)), e);
  const V empty;
  EXPECT_TRUE(truncate_at_punctuation(std::span<const std::string>(empty)).empty());
}

TEST(Truncate, TokenIdVersionIsPrefix) {
  const auto v = vocab_of({"he runs . then falls ?"});
  const auto ids = corpus::tokenize("he runs . then falls ?", v);
  const auto out = truncate_at_punctuation(std::span<const corpus::TokenId>(ids), v);
  ASSERT_LE(out.size(), ids.size());
  EXPECT_TRUE(std::equal(out.begin(), out.end(), ids.begin()));
  EXPECT_EQ(v.token(out.back()), ".");
}

TEST(Sequences, WindowsOfConsecutiveSentences) {
  const std::vector<std::string> texts{"a b .", "c .", "d e ."};
  const auto v = vocab_of(texts);
  const auto seqs = make_lm_sequences(texts, v, 64, 2);
  ASSERT_EQ(seqs.size(), 3u);
  auto t = [&](const char* w) { return v.id(w); };
  EXPECT_EQ(seqs[0], (TokenSequence{Vocabulary::kBos, t("a"), t("b"), t("."), t("c"), t("."), Vocabulary::kEos}));
  EXPECT_EQ(seqs[2], (TokenSequence{Vocabulary::kBos, t("d"), t("e"), t("."), Vocabulary::kEos}));
  EXPECT_EQ(make_lm_sequences(texts, v, 4, 2)[0].size(), 4u);
  EXPECT_THROW(make_lm_sequences(texts, v, 64, 0), InvalidArgument);
}

TEST(Perplexity, UniformModelEqualsVocabularySize) {
  const std::vector<std::string> texts{"the cat sat .", "a dog ran ."};
  const auto v = vocab_of(texts);
  LanguageModel m(tiny(), v, 1);
  m.params().get("head.w").value.fill(0.0);
  const auto seqs = make_lm_sequences(texts, v, 24, 1);
  EXPECT_NEAR(perplexity(m, seqs), static_cast<double>(v.size()), 1e-6);
}

TEST(Perplexity, MatchesDirectRecomputation) {
  const auto texts = toy_texts(5, 2);
  const auto v = vocab_of(texts);
  LanguageModel m(tiny(), v, 3);
  const auto seqs = make_lm_sequences(texts, v, 24, 2);
  const double fast = perplexity(m, seqs);
  EXPECT_NEAR(fast / direct_perplexity(m, seqs), 1.0, 1e-9);
  EXPECT_GE(fast, 1.0);
  EXPECT_THROW(perplexity(m, std::vector<TokenSequence>{}), InvalidArgument);
  EXPECT_THROW(perplexity(m, std::vector<TokenSequence>{{Vocabulary::kBos}}), InvalidArgument);
}

TEST(Lm, BatchedForwardIsCausalAndMatchesIncremental) {
  const auto texts = toy_texts(3, 4);
  const auto v = vocab_of(texts);
  LanguageModel m(tiny(), v, 5);
  const auto seqs = make_lm_sequences(texts, v, 24, 2);
  const std::vector<std::vector<std::int32_t>> batch_seqs{seqs[0], seqs[1]};
  nn::Graph g(false);
  const auto& out = g.value(m.logits(g, nn::pack(batch_seqs)));
  std::size_t row = 0;
  for (const auto& s : batch_seqs) {
    for (std::size_t k = 1; k <= s.size(); ++k, ++row) {
      const auto inc = m.next_token_logits(std::span<const corpus::TokenId>(s.data(), k));
      for (std::size_t c = 0; c < inc.size(); ++c) ASSERT_NEAR(out.at(row, c), inc[c], 1e-10);
    }
  }
}

TEST(Lm, FullLossGradientCheck) {
  const auto texts = toy_texts(2, 6);
  const auto v = vocab_of(texts);
  LanguageModel m(tiny(2, 32), v, 7);
  const auto seqs = make_lm_sequences(texts, v, 24, 2);
  const std::vector<TokenSequence> few(seqs.begin(), seqs.begin() + 2);
  const auto batch = make_next_token_batch(few);
  for (auto& p : m.params()) {
    if (p.name.ends_with("attn.bk")) p.freeze();
  }
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const double err = nn::grad_check(
        [&](nn::Graph& g) { return nn::cross_entropy(m.logits(g, batch.packed), batch.targets, batch.weights); },
        m.params(), {1e-5, 20, seed});
    EXPECT_LT(err, 1e-4) << "coordinate sample " << seed;
  }
}

TEST(TrainLm, MemorizesARepeatedSentence) {
  const std::vector<std::string> texts(16, "the old knight gently helps the young farmer .");
  const auto v = vocab_of(texts);
  const auto seqs = make_lm_sequences(texts, v, 24, 1);
  const auto r = train_lm(seqs, {}, tiny(2, 32), v, {200, 16, 3e-3, 1.0, 1, 200});
  ASSERT_EQ(r.step_losses.size(), 200u);
  EXPECT_LT(r.step_losses.back(), 0.1);
  EXPECT_LT(perplexity(r.model, seqs), 1.2);
}

TEST(TrainLm, ZeroEpochsEqualsInitialization) {
  const auto texts = toy_texts(4, 1);
  const auto v = vocab_of(texts);
  const auto seqs = make_lm_sequences(texts, v, 24, 1);
  const auto r = train_lm(seqs, {}, tiny(), v, {0, 8, 1e-3, 1.0, 42, 0});
  EXPECT_TRUE(r.epochs.empty());
  const LanguageModel init(tiny(), v, derive_seed(42, 1));
  EXPECT_TRUE(r.model.params().same_values(init.params()));
}

TEST(TrainLm, DeterministicUnderSeed) {
  const auto texts = toy_texts(8, 1);
  const auto v = vocab_of(texts);
  const auto seqs = make_lm_sequences(texts, v, 24, 2);
  auto cfg = tiny();
  cfg.dropout = 0.1;
  const auto a = train_lm(seqs, seqs, cfg, v, {1, 4, 1e-3, 1.0, 9, 0});
  const auto b = train_lm(seqs, seqs, cfg, v, {1, 4, 1e-3, 1.0, 9, 0});
  const auto c = train_lm(seqs, seqs, cfg, v, {1, 4, 1e-3, 1.0, 10, 0});
  EXPECT_TRUE(a.model.params().same_values(b.model.params()));
  EXPECT_EQ(a.step_losses, b.step_losses);
  EXPECT_FALSE(a.model.params().same_values(c.model.params()));
  ASSERT_EQ(a.epochs.size(), 1u);
  EXPECT_TRUE(a.epochs[0].validation_loss.has_value());
}

TEST(TrainLm, LossDecreasesOverFirst50StepsInWindowsOf10) {
  const auto texts = toy_texts(200, 3);
  const auto v = vocab_of(texts);
  const auto seqs = make_lm_sequences(texts, v, 24, 2);
  const auto r = train_lm(seqs, {}, tiny(), v, {5, 8, 1e-3, 1.0, 2, 50});
  ASSERT_EQ(r.step_losses.size(), 50u);
  double previous = INFINITY;
  for (std::size_t w = 0; w < 5; ++w) {
    double mean = 0.0;
    for (std::size_t k = 0; k < 10; ++k) mean += r.step_losses[10 * w + k] / 10.0;
    EXPECT_LT(mean, previous) << "window " << w;
    previous = mean;
  }
}

TEST(TrainLm, Errors) {
  const auto texts = toy_texts(2, 1);
  const auto v = vocab_of(texts);
  auto seqs = make_lm_sequences(texts, v, 24, 1);
  EXPECT_THROW(train_lm({}, {}, tiny(), v, {}), InvalidArgument);
  seqs[0].push_back(static_cast<corpus::TokenId>(v.size()));
  EXPECT_THROW(train_lm(seqs, {}, tiny(), v, {}), VocabularyMismatch);
  const std::vector<TokenSequence> too_long{TokenSequence(30, Vocabulary::kBos)};
  EXPECT_THROW(train_lm(too_long, {}, tiny(), v, {}), InvalidArgument);
}

TEST(Checkpoint, LanguageModelRoundTrip) {
  testutil::TempDir dir;
  const auto texts = toy_texts(2, 1);
  const auto v = vocab_of(texts);
  const LanguageModel m(tiny(), v, 3);
  m.save(dir.path(), {{"note", "x"}});
  std::vector<std::string> warnings;
  const auto back = LanguageModel::load(dir.path(), &warnings);
  EXPECT_TRUE(warnings.empty());
  EXPECT_EQ(back.config(), m.config());
  EXPECT_EQ(back.vocab(), v);
  EXPECT_TRUE(back.params().same_values(m.params()));
  // A vocabulary file that no longer matches the manifest hash is surfaced.
  testutil::write_file(dir / "vocab.txt", testutil::read_file(dir / "vocab.txt") + "extra\n");
  EXPECT_THROW(LanguageModel::load(dir.path(), &warnings), VocabularyMismatch);
  EXPECT_FALSE(warnings.empty());
}

class SamplingTest : public ::testing::Test {
 protected:
  std::vector<std::string> texts = toy_texts(50, 8);
  Vocabulary vocab = vocab_of(texts);
  LanguageModel model{tiny(), vocab, 12};
  TokenSequence prompt = corpus::tokenize(texts[0], vocab);
};

TEST_F(SamplingTest, GreedyIsDeterministic) {
  Rng a(1);
  Rng b(999);
  const SamplingOptions greedy{1.0, 1, 20};
  EXPECT_EQ(sample_continuation(model, prompt, greedy, a).continuation,
            sample_continuation(model, prompt, greedy, b).continuation);
}

TEST_F(SamplingTest, SeededDeterminism) {
  Rng a(5);
  Rng b(5);
  const auto x = sample_continuation(model, prompt, {}, a);
  const auto y = sample_continuation(model, prompt, {}, b);
  EXPECT_EQ(x.continuation, y.continuation);
  EXPECT_EQ(x.word_losses, y.word_losses);
}

TEST_F(SamplingTest, CapNoPadTruncationAndLossBookkeeping) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    Rng rng(seed);
    const SamplingOptions opts{1.5, 0, 1 + seed % 12};
    const auto rec = sample_continuation(model, prompt, opts, rng);
    EXPECT_LE(rec.continuation.size(), opts.max_new);
    EXPECT_EQ(rec.word_losses.size(), rec.prediction_steps());
    for (std::size_t j = 0; j < rec.continuation.size(); ++j) {
      const auto id = rec.continuation[j];
      EXPECT_NE(id, Vocabulary::kPad);
      EXPECT_NE(id, Vocabulary::kBos);
      EXPECT_NE(id, Vocabulary::kEos);
      if (j + 1 < rec.continuation.size()) {
        EXPECT_FALSE(is_sentence_end(vocab.token(id)));
      }
    }
    EXPECT_EQ(truncate_at_punctuation(std::span<const corpus::TokenId>(rec.continuation), vocab), rec.continuation);
    // Word loss j is the loss of continuation token j + 1 under the model.
    TokenSequence seq = prompt;
    for (std::size_t j = 0; j < rec.continuation.size(); ++j) {
      const auto logits = model.next_token_logits(seq);
      if (j >= 1) {
        EXPECT_NEAR(rec.word_losses[j - 1], nn::word_loss(logits, static_cast<std::size_t>(rec.continuation[j])),
                    1e-12);
      }
      seq.push_back(rec.continuation[j]);
    }
  }
}

TEST_F(SamplingTest, Errors) {
  Rng rng(1);
  EXPECT_THROW(sample_continuation(model, TokenSequence(24, 4), {}, rng), InvalidArgument);
  EXPECT_THROW(sample_continuation(model, prompt, {1.0, 40, 0}, rng), InvalidArgument);
  EXPECT_THROW(sample_continuation(model, TokenSequence{}, {}, rng), InvalidArgument);
}

TEST(DrawToken, TopKAndTemperature) {
  const std::vector<double> logits{9.0, 0.0, 9.0, 1.0, 3.0, 2.0};
  Rng rng(1);
  // PAD (0) and BOS (2) are excluded even though they score highest.
  for (int i = 0; i < 50; ++i) EXPECT_EQ(draw_token(logits, {1.0, 1, 1}, rng), 4);
  for (int i = 0; i < 200; ++i) {
    const auto t = draw_token(logits, {1.0, 2, 1}, rng);
    EXPECT_TRUE(t == 4 || t == 5);
  }
  std::size_t top = 0;
  for (int i = 0; i < 2000; ++i) top += draw_token(logits, {0.05, 0, 1}, rng) == 4;
  EXPECT_GT(top, 1990u);
}
