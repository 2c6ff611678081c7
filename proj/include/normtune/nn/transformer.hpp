#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "normtune/nn/ops.hpp"
#include "normtune/nn/parameters.hpp"

namespace normtune::nn {

// Several token sequences laid end to end, as the ops expect.
struct PackedBatch {
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> positions;
  std::vector<Segment> segments;
};

inline PackedBatch pack(std::span<const std::vector<std::int32_t>> sequences) {
  PackedBatch b;
  for (const auto& seq : sequences) {
    b.segments.push_back({b.tokens.size(), seq.size()});
    for (std::size_t i = 0; i < seq.size(); ++i) {
      b.tokens.push_back(seq[i]);
      b.positions.push_back(static_cast<std::int32_t>(i));
    }
  }
  return b;
}

// Pre-layer-norm block parameters under `prefix` (e.g. "h0.").
// Residual output projections are scaled down by sqrt(2 * depth).
inline void add_block_parameters(ParameterSet& params, const std::string& prefix, std::size_t width,
                                 std::size_t depth, Rng& rng, double init_std = 0.02) {
  const double proj_std = init_std / std::sqrt(2.0 * static_cast<double>(depth));
  params.add(prefix + "ln1.gain", Tensor({width}, 1.0));
  params.add(prefix + "ln1.shift", Tensor({width}));
  for (const char* m : {"q", "k", "v"}) {
    params.add_normal(prefix + "attn.w" + m, {width, width}, init_std, rng);
    params.add(prefix + "attn.b" + m, Tensor({width}));
  }
  params.add_normal(prefix + "attn.wo", {width, width}, proj_std, rng);
  params.add(prefix + "attn.bo", Tensor({width}));
  params.add(prefix + "ln2.gain", Tensor({width}, 1.0));
  params.add(prefix + "ln2.shift", Tensor({width}));
  params.add_normal(prefix + "mlp.w1", {width, 4 * width}, init_std, rng);
  params.add(prefix + "mlp.b1", Tensor({4 * width}));
  params.add_normal(prefix + "mlp.w2", {4 * width, width}, proj_std, rng);
  params.add(prefix + "mlp.b2", Tensor({width}));
}

struct BlockOptions {
  std::size_t heads = 4;
  bool causal = true;
  double dropout = 0.0;
  Rng* rng = nullptr;  // required when dropout > 0
};

inline Var linear(Graph& g, ParameterSet& params, const std::string& name, Var x) {
  return add_bias(matmul(x, g.parameter(params.get(name + ".w"))), g.parameter(params.get(name + ".b")));
}

inline Var transformer_block(Graph& g, ParameterSet& params, const std::string& prefix, Var x,
                             std::span<const Segment> segments, const BlockOptions& opts) {
  auto p = [&](const std::string& name) { return g.parameter(params.get(prefix + name)); };
  auto drop = [&](Var v) { return opts.dropout > 0.0 ? dropout(v, opts.dropout, *opts.rng) : v; };

  const Var h = layer_norm(x, p("ln1.gain"), p("ln1.shift"));
  const Var q = add_bias(matmul(h, p("attn.wq")), p("attn.bq"));
  const Var k = add_bias(matmul(h, p("attn.wk")), p("attn.bk"));
  const Var v = add_bias(matmul(h, p("attn.wv")), p("attn.bv"));
  const Var a = attention(q, k, v, segments, opts.heads, opts.causal);
  const Var o = add_bias(matmul(a, p("attn.wo")), p("attn.bo"));
  x = add(x, drop(o));

  const Var h2 = layer_norm(x, p("ln2.gain"), p("ln2.shift"));
  const Var m = gelu(add_bias(matmul(h2, p("mlp.w1")), p("mlp.b1")));
  const Var m2 = add_bias(matmul(m, p("mlp.w2")), p("mlp.b2"));
  return add(x, drop(m2));
}

// Marks exactly one attention head of the block under `prefix` trainable:
// its query/key/value columns and biases, and its rows of the output
// projection. Other elements of those tensors are frozen.
inline void unfreeze_attention_head(ParameterSet& params, const std::string& prefix, std::size_t head,
                                    std::size_t heads) {
  auto& wq = params.get(prefix + "attn.wq");
  const std::size_t width = wq.value.rows();
  if (heads == 0 || width % heads != 0 || head >= heads) throw InvalidArgument("bad attention head index");
  const std::size_t hd = width / heads;
  const std::size_t lo = head * hd;
  const std::size_t hi = lo + hd;
  for (const char* m : {"q", "k", "v"}) {
    auto& w = params.get(prefix + "attn.w" + m);
    w.trainable.assign(w.value.size(), 0);
    for (std::size_t r = 0; r < width; ++r) {
      for (std::size_t c = lo; c < hi; ++c) w.trainable[r * width + c] = 1;
    }
    auto& b = params.get(prefix + "attn.b" + m);
    b.trainable.assign(b.value.size(), 0);
    for (std::size_t c = lo; c < hi; ++c) b.trainable[c] = 1;
  }
  auto& wo = params.get(prefix + "attn.wo");
  wo.trainable.assign(wo.value.size(), 0);
  for (std::size_t r = lo; r < hi; ++r) {
    for (std::size_t c = 0; c < width; ++c) wo.trainable[r * width + c] = 1;
  }
}

}  // namespace normtune::nn
