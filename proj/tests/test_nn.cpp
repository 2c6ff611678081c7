#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "normtune/nn/adam.hpp"
#include "normtune/nn/checkpoint.hpp"
#include "normtune/nn/grad_check.hpp"
#include "normtune/nn/loss.hpp"
#include "normtune/nn/ops.hpp"
#include "normtune/nn/transformer.hpp"
#include "test_util.hpp"

using namespace normtune;
using namespace normtune::nn;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

// Contracts an [N, D] (or [N]) result to a scalar with fixed random weights so
// that every output element contributes a distinct gradient.
Var probe(Graph& g, Var x, std::uint64_t seed = 99) {
  const std::size_t rows = g.value(x).rows();
  const std::size_t cols = g.value(x).cols();
  Rng rng(seed);
  const Var w = g.constant(random_tensor({cols, 1}, rng));
  const Var r = g.constant(random_tensor({1, rows}, rng));
  return matmul(r, matmul(x, w));
}

double check(ParameterSet& params, const ObjectiveBuilder& f) { return grad_check(f, params, {1e-5, 0, 0}); }

}  // namespace

TEST(Softmax, Examples) {
  const std::vector<double> zero{0.0, 0.0};
  const auto a = softmax(zero);
  EXPECT_DOUBLE_EQ(a[0], 0.5);
  EXPECT_DOUBLE_EQ(a[1], 0.5);
  const std::vector<double> fives{5, 5, 5};
  for (double p : softmax(fives)) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
  const std::vector<double> x{1, 2, 3};
  const auto p = softmax(x);
  EXPECT_NEAR(p[0], 0.09003057, 1e-7);
  EXPECT_NEAR(p[1], 0.24472847, 1e-7);
  EXPECT_NEAR(p[2], 0.66524096, 1e-7);
  EXPECT_THROW(softmax(std::vector<double>{}), InvalidArgument);
}

TEST(Softmax, SumsToOneAndShiftInvariantUpTo10k) {
  Rng rng(5);
  for (std::size_t n : {1u, 2u, 17u, 1000u, 10000u}) {
    std::vector<double> x(n);
    for (auto& v : x) v = 30.0 * rng.normal();
    const auto p = softmax(x);
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-9);
    for (double v : p) EXPECT_GE(v, 0.0);
    auto shifted = x;
    for (auto& v : shifted) v += 123.25;
    const auto q = softmax(shifted);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(p[i], q[i], 1e-12);
  }
}

TEST(Softmax, RejectsNonFinite) {
  EXPECT_THROW(softmax(std::vector<double>{1.0, std::nan("")}), NumericError);
  EXPECT_THROW(softmax(std::vector<double>{INFINITY, 0.0}), NumericError);
}

TEST(WordLoss, Examples) {
  const std::vector<double> uniform(4, 0.7);
  for (std::size_t y = 0; y < 4; ++y) EXPECT_NEAR(word_loss(uniform, y), std::log(4.0), 1e-12);
  EXPECT_NEAR(word_loss(std::vector<double>{1, 2, 3}, 2), 0.4076059, 1e-6);
  EXPECT_NEAR(word_loss(std::vector<double>{10, 0, 0, 0}, 0), std::log1p(3.0 * std::exp(-10.0)), 1e-12);
  EXPECT_THROW(word_loss(std::vector<double>{1, 2}, 2), InvalidArgument);
}

TEST(WordLoss, ShiftInvarianceAndGradientIdentity) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> x(1 + rng.below(40));
    for (auto& v : x) v = 5.0 * rng.normal();
    const std::size_t y = rng.below(x.size());
    const double l = word_loss(x, y);
    EXPECT_GE(l, 0.0);
    auto shifted = x;
    const double c = 50.0 * rng.normal();
    for (auto& v : shifted) v += c;
    EXPECT_NEAR(word_loss(shifted, y), l, 1e-9);
    const auto p = softmax(x);
    const auto grad = word_loss_grad(x, y);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(grad[i], p[i] - (i == y ? 1.0 : 0.0), 1e-9);
  }
}

TEST(GradCheck, WordLossOnRandomLogits) {
  Rng rng(3);
  ParameterSet params;
  params.add("x", random_tensor({1, 8}, rng));
  const std::vector<std::int32_t> target{5};
  const std::vector<double> weight{1.0};
  EXPECT_LT(check(params, [&](Graph& g) { return cross_entropy(g.parameter(params.get("x")), target, weight); }),
            1e-4);
}

TEST(GradCheck, ConstantObjectiveIsZero) {
  ParameterSet params;
  params.add("x", Tensor({3}, 1.0));
  EXPECT_EQ(check(params, [](Graph& g) { return g.constant(Tensor::scalar(4.0)); }), 0.0);
}

TEST(GradCheck, NonFiniteObjectiveThrows) {
  ParameterSet params;
  params.add("x", Tensor({1}, 1.0));
  EXPECT_THROW(check(params, [](Graph& g) { return g.constant(Tensor::scalar(std::nan(""))); }), NumericError);
}

TEST(GradCheck, SkipsFrozenCoordinates) {
  ParameterSet params;
  params.add("x", Tensor({2}, 1.5));
  params.get("x").trainable = {1, 0};
  // d/dx0 is right, d/dx1 is wrong, but x1 is frozen
  const double err = check(params, [&](Graph& g) {
    const Var x = g.parameter(params.get("x"));
    const double v = g.value(x)[0] * g.value(x)[0] + g.value(x)[1];
    return g.record(Tensor::scalar(v), {x}, [x](Graph& g, std::size_t self) {
      const double dy = g.grad(self)[0];
      g.grad(x)[0] += dy * 2.0 * g.value(x)[0];
      g.grad(x)[1] += dy * 7.0;
    }, "partly_wrong");
  });
  EXPECT_LT(err, 1e-8);
}

TEST(GradCheck, DetectsWrongGradient) {
  ParameterSet params;
  params.add("x", Tensor({2}, 1.5));
  const double err = check(params, [&](Graph& g) {
    const Var x = g.parameter(params.get("x"));
    Tensor v = g.value(x);
    double s = 0.0;
    for (double e : v.values()) s += e * e;
    // deliberately reports d/dx = 1 instead of 2x
    return g.record(Tensor::scalar(s), {x}, [x](Graph& g, std::size_t self) {
      for (auto& d : g.grad(x).values()) d += g.grad(self)[0];
    }, "bad_square");
  });
  EXPECT_GT(err, 0.1);
}

class PrimitiveGrad : public ::testing::Test {
 protected:
  Rng rng{17};
  ParameterSet params;
  Var p(Graph& g, const std::string& n) { return g.parameter(params.get(n)); }
};

TEST_F(PrimitiveGrad, MatmulAddScaleSum) {
  params.add("a", random_tensor({3, 4}, rng));
  params.add("b", random_tensor({4, 5}, rng));
  params.add("c", random_tensor({3, 5}, rng));
  EXPECT_LT(check(params, [&](Graph& g) { return probe(g, add(matmul(p(g, "a"), p(g, "b")), scale(p(g, "c"), -1.7))); }),
            1e-4);
  EXPECT_LT(check(params, [&](Graph& g) { return scale(sum(matmul(p(g, "a"), p(g, "b"))), 0.3); }), 1e-4);
}

TEST_F(PrimitiveGrad, SharedInputAccumulates) {
  params.add("a", random_tensor({3, 3}, rng));
  EXPECT_LT(check(params, [&](Graph& g) { return probe(g, matmul(p(g, "a"), p(g, "a"))); }), 1e-4);
}

TEST_F(PrimitiveGrad, AddBias) {
  params.add("x", random_tensor({4, 3}, rng));
  params.add("b", random_tensor({3}, rng));
  EXPECT_LT(check(params, [&](Graph& g) { return probe(g, add_bias(p(g, "x"), p(g, "b"))); }), 1e-4);
}

TEST_F(PrimitiveGrad, EmbeddingWithRepeatedIds) {
  params.add("table", random_tensor({6, 4}, rng));
  const std::vector<std::int32_t> ids{0, 3, 3, 5, 1};
  EXPECT_LT(check(params, [&](Graph& g) { return probe(g, embedding(p(g, "table"), ids)); }), 1e-4);
  Graph g;
  EXPECT_THROW(embedding(p(g, "table"), std::vector<std::int32_t>{6}), InvalidArgument);
}

TEST_F(PrimitiveGrad, Gelu) {
  params.add("x", random_tensor({5, 3}, rng, 2.0));
  EXPECT_LT(check(params, [&](Graph& g) { return probe(g, gelu(p(g, "x"))); }), 1e-4);
  Graph g;
  const Var zero = g.constant(Tensor({1}, 0.0));
  EXPECT_EQ(g.value(gelu(zero))[0], 0.0);
}

TEST_F(PrimitiveGrad, LayerNorm) {
  params.add("x", random_tensor({4, 6}, rng, 3.0));
  params.add("gain", random_tensor({6}, rng));
  params.add("shift", random_tensor({6}, rng));
  EXPECT_LT(check(params, [&](Graph& g) { return probe(g, layer_norm(p(g, "x"), p(g, "gain"), p(g, "shift"))); }), 1e-4);
}

TEST_F(PrimitiveGrad, LayerNormNormalizesRows) {
  Graph g;
  Rng r(1);
  const Var x = g.constant(random_tensor({3, 8}, r, 4.0));
  const Var y = layer_norm(x, g.constant(Tensor({8}, 1.0)), g.constant(Tensor({8}, 0.0)));
  const auto& t = g.value(y);
  for (std::size_t row = 0; row < 3; ++row) {
    double mean = 0.0;
    double sq = 0.0;
    for (std::size_t c = 0; c < 8; ++c) mean += t.at(row, c) / 8.0;
    for (std::size_t c = 0; c < 8; ++c) sq += (t.at(row, c) - mean) * (t.at(row, c) - mean) / 8.0;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(sq, 1.0, 1e-5);
  }
}

TEST_F(PrimitiveGrad, AttentionCausalAndBidirectional) {
  params.add("q", random_tensor({7, 8}, rng));
  params.add("k", random_tensor({7, 8}, rng));
  params.add("v", random_tensor({7, 8}, rng));
  const std::vector<Segment> segs{{0, 3}, {3, 4}};
  for (bool causal : {true, false}) {
    EXPECT_LT(check(params, [&](Graph& g) { return probe(g, attention(p(g, "q"), p(g, "k"), p(g, "v"), segs, 2, causal)); }),
              1e-4)
        << "causal=" << causal;
  }
}

TEST_F(PrimitiveGrad, AttentionRespectsCausalityAndSegments) {
  params.add("q", random_tensor({5, 4}, rng));
  params.add("k", random_tensor({5, 4}, rng));
  params.add("v", random_tensor({5, 4}, rng));
  const std::vector<Segment> segs{{0, 3}, {3, 2}};
  auto run = [&](const Tensor& v) {
    Graph g;
    return g.value(attention(p(g, "q"), p(g, "k"), g.constant(v), segs, 2, true));
  };
  const Tensor base = run(params.get("v").value);
  // Changing the last token of segment 0 leaves earlier rows and the other segment intact.
  Tensor changed = params.get("v").value;
  for (std::size_t c = 0; c < 4; ++c) changed.at(2, c) += 10.0;
  const Tensor after = run(changed);
  for (std::size_t r : {0u, 1u, 3u, 4u}) {
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(base.at(r, c), after.at(r, c)) << r;
  }
  // The first row of each segment attends only to itself.
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_NEAR(base.at(0, c), params.get("v").value.at(0, c), 1e-12);
    EXPECT_NEAR(base.at(3, c), params.get("v").value.at(3, c), 1e-12);
  }
}

TEST_F(PrimitiveGrad, SegmentPooling) {
  params.add("x", random_tensor({6, 3}, rng));
  const std::vector<Segment> segs{{0, 2}, {2, 4}};
  EXPECT_LT(check(params, [&](Graph& g) { return probe(g, segment_mean(p(g, "x"), segs)); }), 1e-4);
  EXPECT_LT(check(params, [&](Graph& g) { return probe(g, segment_first(p(g, "x"), segs)); }), 1e-4);
}

TEST_F(PrimitiveGrad, CrossEntropyWeightedRows) {
  params.add("x", random_tensor({4, 6}, rng));
  const std::vector<std::int32_t> t{1, 0, 5, 2};
  const std::vector<double> w{0.5, 0.0, -2.0, 1.25};
  EXPECT_LT(check(params, [&](Graph& g) { return cross_entropy(p(g, "x"), t, w); }), 1e-4);
  Graph g;
  std::vector<double> rows;
  const Var loss = cross_entropy(p(g, "x"), t, w, &rows);
  double expected = 0.0;
  for (std::size_t r = 0; r < 4; ++r) {
    const auto& X = params.get("x").value;
    const std::span<const double> row(X.data() + r * 6, 6);
    if (w[r] != 0.0) {
      EXPECT_NEAR(rows[r], word_loss(row, static_cast<std::size_t>(t[r])), 1e-12);
      expected += w[r] * rows[r];
    } else {
      EXPECT_EQ(rows[r], 0.0);
    }
  }
  EXPECT_NEAR(g.value(loss)[0], expected, 1e-12);
}

TEST_F(PrimitiveGrad, BinaryCrossEntropy) {
  params.add("z", random_tensor({5}, rng, 3.0));
  const std::vector<int> y{1, 0, 0, 1, 1};
  const std::vector<double> w(5, 0.2);
  EXPECT_LT(check(params, [&](Graph& g) { return bce_with_logits(p(g, "z"), y, w); }), 1e-4);
}

TEST_F(PrimitiveGrad, DropoutWithFixedMask) {
  params.add("x", random_tensor({4, 5}, rng));
  EXPECT_LT(check(params, [&](Graph& g) {
              Rng mask_rng(4);
              return probe(g, dropout(p(g, "x"), 0.3, mask_rng));
            }),
            1e-4);
}

TEST_F(PrimitiveGrad, TransformerBlock) {
  add_block_parameters(params, "b.", 8, 1, rng, 0.3);
  params.add("x", random_tensor({5, 8}, rng));
  const std::vector<Segment> segs{{0, 2}, {2, 3}};
  const ObjectiveBuilder f = [&](Graph& g) {
    return probe(g, transformer_block(g, params, "b.", p(g, "x"), segs, {2, true, 0.0, nullptr}));
  };
  // The key bias adds a per-query constant to every score, so its exact
  // gradient is 0 and finite differences only measure rounding noise.
  params.get("b.attn.bk").freeze();
  EXPECT_LT(check(params, f), 1e-4);
  for (double d : params.get("b.attn.bk").grad.values()) EXPECT_NEAR(d, 0.0, 1e-12);
}

TEST(Graph, RejectsNonFiniteResults) {
  Graph g;
  const Var big = g.constant(Tensor({1}, std::vector<double>{1e308}));
  EXPECT_THROW(scale(big, 1e10), NumericError);
}

TEST(Graph, NoGradModeLeavesParametersUntouched) {
  ParameterSet params;
  params.add("x", Tensor({2}, 1.0));
  Graph g(false);
  const Var y = sum(g.parameter(params.get("x")));
  g.backward(y);
  EXPECT_TRUE(params.get("x").grad.empty());
}

TEST(Adam, HandEvaluatedFirstStep) {
  ParameterSet params;
  params.add("w", Tensor({1}, 1.0));
  auto state = make_optimizer_state(params, {0.1, 0.9, 0.999, 1e-8, 0.0});
  params.get("w").grad = Tensor({1}, 1.0);
  optimizer_step(params, state);
  // m_hat = 1, v_hat = 1, so w = 1 - 0.1 * 1 / (1 + 1e-8)
  EXPECT_NEAR(params.get("w").value[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(params.get("w").value[0], 0.9, 1e-6);
  EXPECT_EQ(state.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Rng rng(2);
  ParameterSet params;
  params.add("w", random_tensor({3, 3}, rng));
  const auto before = params.get("w").value;
  auto state = make_optimizer_state(params, {});
  params.zero_grad();
  for (int i = 0; i < 5; ++i) optimizer_step(params, state);
  EXPECT_EQ(params.get("w").value, before);
  EXPECT_EQ(state.step, 5u);
}

TEST(Adam, FrozenSlicesBitIdentical) {
  Rng rng(3);
  ParameterSet params;
  params.add("frozen", random_tensor({4}, rng));
  params.add("mixed", random_tensor({6}, rng));
  params.get("frozen").freeze();
  params.get("mixed").trainable = {1, 0, 1, 0, 1, 0};
  const auto frozen_before = params.get("frozen").value;
  const auto mixed_before = params.get("mixed").value;
  auto state = make_optimizer_state(params, {0.05, 0.9, 0.999, 1e-8, 1.0});
  for (int step = 0; step < 50; ++step) {
    params.get("frozen").grad = random_tensor({4}, rng);
    params.get("mixed").grad = random_tensor({6}, rng);
    optimizer_step(params, state);
  }
  EXPECT_EQ(params.get("frozen").value, frozen_before);
  for (std::size_t i = 0; i < 6; ++i) {
    if (i % 2) {
      EXPECT_EQ(params.get("mixed").value[i], mixed_before[i]);
    } else {
      EXPECT_NE(params.get("mixed").value[i], mixed_before[i]);
    }
  }
}

TEST(Adam, ClipNormBoundsTheUpdateInput) {
  ParameterSet a;
  a.add("w", Tensor({2}, 0.0));
  ParameterSet b = a;
  auto sa = make_optimizer_state(a, {0.1, 0.0, 0.0, 0.0, 1.0});
  auto sb = make_optimizer_state(b, {0.1, 0.0, 0.0, 0.0, 0.0});
  a.get("w").grad = Tensor({2}, std::vector<double>{30.0, 40.0});
  b.get("w").grad = Tensor({2}, std::vector<double>{30.0, 40.0});
  optimizer_step(a, sa);
  optimizer_step(b, sb);
  // With beta1 = beta2 = 0 Adam is sign-like, so clipping does not change the step.
  EXPECT_NEAR(a.get("w").value[0], b.get("w").value[0], 1e-12);
}

TEST(Adam, ShapeMismatchThrows) {
  ParameterSet params;
  params.add("w", Tensor({2}));
  auto state = make_optimizer_state(params, {});
  params.add("extra", Tensor({1}));
  EXPECT_THROW(optimizer_step(params, state), InvalidArgument);
  ParameterSet other;
  other.add("w", Tensor({3}));
  auto bad = make_optimizer_state(other, {});
  other.get("w").value = Tensor({2});
  other.get("w").grad = Tensor({2});
  EXPECT_THROW(optimizer_step(other, bad), InvalidArgument);
}

TEST(Checkpoint, RoundTripThreeTensors) {
  testutil::TempDir dir;
  Rng rng(6);
  ParameterSet params;
  params.add("a", random_tensor({2, 3}, rng));
  params.add("b", random_tensor({4}, rng));
  params.add("c", Tensor({1}, std::vector<double>{-0.0}));
  const nlohmann::json hp{{"width", 3}};
  save_checkpoint(params, {"lm", hp, "abc", {}}, dir.path());
  const auto loaded = load_checkpoint(dir.path(), std::string("abc"));
  EXPECT_TRUE(loaded.params.same_values(params));
  EXPECT_TRUE(std::signbit(loaded.params.get("c").value[0]));
  EXPECT_EQ(loaded.metadata.kind, "lm");
  EXPECT_EQ(loaded.metadata.hyperparams, hp);
  EXPECT_TRUE(loaded.warnings.empty());

  testutil::TempDir again;
  save_checkpoint(loaded.params, loaded.metadata, again.path());
  EXPECT_EQ(testutil::read_file(dir / "manifest.json"), testutil::read_file(again / "manifest.json"));
  EXPECT_EQ(testutil::read_file(dir / "weights.bin"), testutil::read_file(again / "weights.bin"));
}

TEST(Checkpoint, ManifestSchema) {
  testutil::TempDir dir;
  ParameterSet params;
  params.add("a", Tensor({2, 2}, 1.0));
  params.add("b", Tensor({3}, 2.0));
  save_checkpoint(params, {"classifier", {}, "h", {Dtype::f64, Dtype::f32}}, dir.path());
  const auto m = nlohmann::json::parse(testutil::read_file(dir / "manifest.json"));
  EXPECT_EQ(m.at("version"), 1);
  EXPECT_EQ(m.at("kind"), "classifier");
  EXPECT_EQ(m.at("vocab_sha256"), "h");
  const auto& t = m.at("tensors");
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t[0].at("dtype"), "f64");
  EXPECT_EQ(t[0].at("offset"), 0);
  EXPECT_EQ(t[0].at("length"), 32);
  EXPECT_EQ(t[1].at("dtype"), "f32");
  EXPECT_EQ(t[1].at("offset"), 32);
  EXPECT_EQ(t[1].at("length"), 12);
  EXPECT_EQ(std::filesystem::file_size(dir / "weights.bin"), 44u);
  const auto bytes = testutil::read_file(dir / "weights.bin");
  // 1.0 as little-endian IEEE-754 double
  EXPECT_EQ(static_cast<unsigned char>(bytes[7]), 0x3f);
  EXPECT_EQ(static_cast<unsigned char>(bytes[6]), 0xf0);
  EXPECT_EQ(load_checkpoint(dir.path()).params.get("b").value, Tensor({3}, 2.0));
}

TEST(Checkpoint, TruncatedBlobFails) {
  testutil::TempDir dir;
  ParameterSet params;
  params.add("a", Tensor({4}, 1.0));
  save_checkpoint(params, {"lm", {}, "h", {}}, dir.path());
  auto blob = testutil::read_file(dir / "weights.bin");
  blob.resize(blob.size() - 3);
  testutil::write_file(dir / "weights.bin", blob);
  EXPECT_THROW(load_checkpoint(dir.path()), FormatError);
  testutil::write_file(dir / "weights.bin", blob + std::string(11, '\0'));
  EXPECT_THROW(load_checkpoint(dir.path()), FormatError);
}

TEST(Checkpoint, VersionMismatchRejected) {
  testutil::TempDir dir;
  ParameterSet params;
  params.add("a", Tensor({1}, 1.0));
  save_checkpoint(params, {"lm", {}, "h", {}}, dir.path());
  auto m = nlohmann::json::parse(testutil::read_file(dir / "manifest.json"));
  m["version"] = 2;
  testutil::write_file(dir / "manifest.json", m.dump());
  EXPECT_THROW(load_checkpoint(dir.path()), FormatError);
  EXPECT_THROW(load_checkpoint(dir / "missing"), IoError);
}

TEST(Checkpoint, VocabularyHashMismatchIsAWarning) {
  testutil::TempDir dir;
  ParameterSet params;
  params.add("a", Tensor({1}, 1.0));
  save_checkpoint(params, {"lm", {}, "H", {}}, dir.path());
  const auto loaded = load_checkpoint(dir.path(), std::string("H-prime"));
  ASSERT_EQ(loaded.warnings.size(), 1u);
  EXPECT_NE(loaded.warnings[0].find("vocabulary hash mismatch"), std::string::npos);
}

TEST(HeadMask, OnlyDesignatedHeadSlicesTrainable) {
  Rng rng(1);
  ParameterSet params;
  add_block_parameters(params, "h0.", 8, 1, rng);
  params.freeze_all();
  unfreeze_attention_head(params, "h0.", 1, 4);
  const auto& wq = params.get("h0.attn.wq");
  std::size_t on = 0;
  for (std::size_t r = 0; r < 8; ++r) {
    for (std::size_t c = 0; c < 8; ++c) {
      const bool expect = c >= 2 && c < 4;
      EXPECT_EQ(wq.is_trainable(r * 8 + c), expect);
      on += expect;
    }
  }
  EXPECT_EQ(on, 16u);
  const auto& wo = params.get("h0.attn.wo");
  for (std::size_t r = 0; r < 8; ++r) EXPECT_EQ(wo.is_trainable(r * 8), r >= 2 && r < 4);
  EXPECT_TRUE(params.get("h0.mlp.w1").fully_frozen());
  EXPECT_TRUE(params.get("h0.attn.bo").fully_frozen());
  EXPECT_THROW(unfreeze_attention_head(params, "h0.", 4, 4), InvalidArgument);
}

TEST(Rng, PortableAndSeedSensitive) {
  Rng a(42);
  Rng b(42);
  Rng c(43);
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next();
    EXPECT_EQ(x, b.next());
    EXPECT_NE(x, c.next());
  }
  EXPECT_NE(derive_seed(1, 2), derive_seed(2, 1));
  EXPECT_EQ(derive_seed(7, 1, 2), derive_seed(7, 1, 2));
  Rng u(9);
  double mean = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const double x = u.uniform();
    ASSERT_GE(x, 0.0);
    ASSERT_LT(x, 1.0);
    mean += x / 20000.0;
  }
  EXPECT_NEAR(mean, 0.5, 0.01);
}
