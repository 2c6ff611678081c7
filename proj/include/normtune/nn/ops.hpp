#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <numbers>
#include <span>
#include <vector>

#include "normtune/nn/graph.hpp"
#include "normtune/nn/loss.hpp"
#include "normtune/util/random.hpp"

namespace normtune::nn {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixView = Eigen::Map<RowMatrix>;
using ConstMatrixView = Eigen::Map<const RowMatrix>;

inline ConstMatrixView view(const Tensor& t) {
  return ConstMatrixView(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
inline MatrixView view(Tensor& t) {
  return MatrixView(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

// Contiguous run of rows belonging to one sequence of a packed batch.
struct Segment {
  std::size_t start = 0;
  std::size_t length = 0;
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw InvalidArgument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()));
  }
}

inline Var add(Var a, Var b) {
  Graph& g = *a.graph;
  check_same_shape(g.value(a), g.value(b), "add");
  Tensor out = g.value(a);
  out += g.value(b);
  return g.record(std::move(out), {a, b}, [a, b](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad(self);
    if (g.requires_grad(a)) g.grad(a) += dy;
    if (g.requires_grad(b)) g.grad(b) += dy;
  }, "add");
}

inline Var scale(Var x, double c) {
  Graph& g = *x.graph;
  Tensor out = g.value(x);
  for (auto& v : out.values()) v *= c;
  return g.record(std::move(out), {x}, [x, c](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad(self);
    Tensor& dx = g.grad(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += c * dy[i];
  }, "scale");
}

inline Var sum(Var x) {
  Graph& g = *x.graph;
  double s = 0.0;
  for (double v : g.value(x).values()) s += v;
  return g.record(Tensor::scalar(s), {x}, [x](Graph& g, std::size_t self) {
    const double dy = g.grad(self)[0];
    for (auto& v : g.grad(x).values()) v += dy;
  }, "sum");
}

// x[N,K] · w[K,M]
inline Var matmul(Var a, Var b) {
  Graph& g = *a.graph;
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  if (A.cols() != B.rows()) {
    throw InvalidArgument("matmul: inner dimensions differ " + shape_string(A.shape()) + " x " +
                          shape_string(B.shape()));
  }
  Tensor out({A.rows(), B.cols()});
  view(out).noalias() = view(A) * view(B);
  return g.record(std::move(out), {a, b}, [a, b](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad(self);
    if (g.requires_grad(a)) view(g.grad(a)).noalias() += view(dy) * view(g.value(b)).transpose();
    if (g.requires_grad(b)) view(g.grad(b)).noalias() += view(g.value(a)).transpose() * view(dy);
  }, "matmul");
}

// x[N,D] + bias[D] broadcast over rows.
inline Var add_bias(Var x, Var bias) {
  Graph& g = *x.graph;
  const Tensor& X = g.value(x);
  const Tensor& b = g.value(bias);
  if (b.size() != X.cols()) throw InvalidArgument("add_bias: bias length does not match columns");
  Tensor out = X;
  for (std::size_t r = 0; r < X.rows(); ++r) {
    for (std::size_t c = 0; c < X.cols(); ++c) out.at(r, c) += b[c];
  }
  return g.record(std::move(out), {x, bias}, [x, bias](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad(self);
    if (g.requires_grad(x)) g.grad(x) += dy;
    if (g.requires_grad(bias)) {
      Tensor& db = g.grad(bias);
      for (std::size_t r = 0; r < dy.rows(); ++r) {
        for (std::size_t c = 0; c < dy.cols(); ++c) db[c] += dy.at(r, c);
      }
    }
  }, "add_bias");
}

// Rows of table[V,D] selected by ids.
inline Var embedding(Var table, std::span<const std::int32_t> ids) {
  Graph& g = *table.graph;
  const Tensor& T = g.value(table);
  const std::size_t d = T.cols();
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= T.rows()) {
      throw InvalidArgument("embedding: id " + std::to_string(ids[i]) + " out of range");
    }
    std::copy_n(T.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return g.record(std::move(out), {table}, [table, saved = std::move(saved), d](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad(self);
    Tensor& dt = g.grad(table);
    for (std::size_t i = 0; i < saved.size(); ++i) {
      double* row = dt.data() + static_cast<std::size_t>(saved[i]) * d;
      for (std::size_t c = 0; c < d; ++c) row[c] += dy.at(i, c);
    }
  }, "embedding");
}

// GPT-2's tanh approximation of GELU.
inline Var gelu(Var x) {
  Graph& g = *x.graph;
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  Tensor out = g.value(x);
  for (auto& v : out.values()) v = 0.5 * v * (1.0 + std::tanh(k * (v + 0.044715 * v * v * v)));
  return g.record(std::move(out), {x}, [x](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad(self);
    const Tensor& X = g.value(x);
    Tensor& dx = g.grad(x);
    for (std::size_t i = 0; i < X.size(); ++i) {
      const double v = X[i];
      const double t = std::tanh(k * (v + 0.044715 * v * v * v));
      const double dt = (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * v * v);
      dx[i] += dy[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
    }
  }, "gelu");
}

// Row-wise layer normalisation with learned gain and shift.
inline Var layer_norm(Var x, Var gain, Var shift, double eps = 1e-5) {
  Graph& g = *x.graph;
  const Tensor& X = g.value(x);
  const std::size_t n = X.rows();
  const std::size_t d = X.cols();
  if (g.value(gain).size() != d || g.value(shift).size() != d) {
    throw InvalidArgument("layer_norm: gain/shift length does not match columns");
  }
  auto normed = std::make_shared<Tensor>(Shape{n, d});
  auto inv_std = std::make_shared<std::vector<double>>(n);
  Tensor out({n, d});
  const Tensor& G = g.value(gain);
  const Tensor& B = g.value(shift);
  for (std::size_t r = 0; r < n; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += X.at(r, c);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (X.at(r, c) - mean) * (X.at(r, c) - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const double xh = (X.at(r, c) - mean) * is;
      normed->at(r, c) = xh;
      out.at(r, c) = G[c] * xh + B[c];
    }
  }
  return g.record(std::move(out), {x, gain, shift}, [x, gain, shift, normed, inv_std](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad(self);
    const std::size_t n = dy.rows();
    const std::size_t d = dy.cols();
    if (g.requires_grad(gain) || g.requires_grad(shift)) {
      Tensor& dg = g.grad(gain);
      Tensor& db = g.grad(shift);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
          dg[c] += dy.at(r, c) * normed->at(r, c);
          db[c] += dy.at(r, c);
        }
      }
    }
    if (!g.requires_grad(x)) return;
    const Tensor& G = g.value(gain);
    Tensor& dx = g.grad(x);
    std::vector<double> dxh(d);
    for (std::size_t r = 0; r < n; ++r) {
      double mean_dxh = 0.0;
      double mean_dxh_xh = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        dxh[c] = dy.at(r, c) * G[c];
        mean_dxh += dxh[c];
        mean_dxh_xh += dxh[c] * normed->at(r, c);
      }
      mean_dxh /= static_cast<double>(d);
      mean_dxh_xh /= static_cast<double>(d);
      for (std::size_t c = 0; c < d; ++c) {
        dx.at(r, c) += (*inv_std)[r] * (dxh[c] - mean_dxh - normed->at(r, c) * mean_dxh_xh);
      }
    }
  }, "layer_norm");
}

// Multi-head scaled dot-product attention over packed sequences. q, k, v are
// [N, D] projections; head h owns columns [h*D/heads, (h+1)*D/heads).
// Attention never crosses segment boundaries; `causal` masks future rows.
inline Var attention(Var q, Var k, Var v, std::span<const Segment> segments, std::size_t heads, bool causal) {
  Graph& g = *q.graph;
  const Tensor& Q = g.value(q);
  const Tensor& K = g.value(k);
  const Tensor& V = g.value(v);
  check_same_shape(Q, K, "attention");
  check_same_shape(Q, V, "attention");
  const std::size_t d = Q.cols();
  if (heads == 0 || d % heads != 0) throw InvalidArgument("attention: width must be divisible by heads");
  const std::size_t hd = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto Qm = view(Q);
  const auto Km = view(K);
  const auto Vm = view(V);

  Tensor out({Q.rows(), d});
  auto Om = view(out);
  const bool keep = g.any_requires_grad({q, k, v});
  auto probs = std::make_shared<std::vector<RowMatrix>>();
  if (keep) probs->reserve(segments.size() * heads);

  for (const auto& seg : segments) {
    if (seg.start + seg.length > Q.rows()) throw InvalidArgument("attention: segment exceeds batch");
    const auto L = static_cast<Eigen::Index>(seg.length);
    const auto s0 = static_cast<Eigen::Index>(seg.start);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h * hd);
      const auto w = static_cast<Eigen::Index>(hd);
      RowMatrix S = (Qm.block(s0, c0, L, w) * Km.block(s0, c0, L, w).transpose()) * scale;
      for (Eigen::Index i = 0; i < L; ++i) {
        const Eigen::Index visible = causal ? i + 1 : L;
        const double m = S.row(i).head(visible).maxCoeff();
        double z = 0.0;
        for (Eigen::Index j = 0; j < visible; ++j) z += (S(i, j) = std::exp(S(i, j) - m));
        for (Eigen::Index j = 0; j < visible; ++j) S(i, j) /= z;
        for (Eigen::Index j = visible; j < L; ++j) S(i, j) = 0.0;
      }
      Om.block(s0, c0, L, w).noalias() = S * Vm.block(s0, c0, L, w);
      if (keep) probs->push_back(std::move(S));
    }
  }

  std::vector<Segment> segs(segments.begin(), segments.end());
  return g.record(std::move(out), {q, k, v}, [q, k, v, segs = std::move(segs), heads, hd, scale, probs](
                                                  Graph& g, std::size_t self) {
    const Tensor& dy = g.grad(self);
    const auto dOm = view(dy);
    const auto Qm = view(g.value(q));
    const auto Km = view(g.value(k));
    const auto Vm = view(g.value(v));
    Tensor& dq = g.grad(q);
    Tensor& dk = g.grad(k);
    Tensor& dv = g.grad(v);
    auto dQm = view(dq);
    auto dKm = view(dk);
    auto dVm = view(dv);
    std::size_t idx = 0;
    for (const auto& seg : segs) {
      const auto L = static_cast<Eigen::Index>(seg.length);
      const auto s0 = static_cast<Eigen::Index>(seg.start);
      for (std::size_t h = 0; h < heads; ++h, ++idx) {
        const auto c0 = static_cast<Eigen::Index>(h * hd);
        const auto w = static_cast<Eigen::Index>(hd);
        const RowMatrix& P = (*probs)[idx];
        const auto dO = dOm.block(s0, c0, L, w);
        dVm.block(s0, c0, L, w).noalias() += P.transpose() * dO;
        RowMatrix dP = dO * Vm.block(s0, c0, L, w).transpose();
        const Eigen::VectorXd rowdot = (dP.array() * P.array()).rowwise().sum();
        RowMatrix dS = P.array() * (dP.array().colwise() - rowdot.array());
        dS *= scale;
        dQm.block(s0, c0, L, w).noalias() += dS * Km.block(s0, c0, L, w);
        dKm.block(s0, c0, L, w).noalias() += dS.transpose() * Qm.block(s0, c0, L, w);
      }
    }
  }, "attention");
}

// Mean of each segment's rows: [N, D] -> [segments, D].
inline Var segment_mean(Var x, std::span<const Segment> segments) {
  Graph& g = *x.graph;
  const Tensor& X = g.value(x);
  const std::size_t d = X.cols();
  Tensor out({segments.size(), d});
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto& seg = segments[s];
    if (seg.length == 0 || seg.start + seg.length > X.rows()) throw InvalidArgument("segment_mean: bad segment");
    for (std::size_t r = seg.start; r < seg.start + seg.length; ++r) {
      for (std::size_t c = 0; c < d; ++c) out.at(s, c) += X.at(r, c);
    }
    for (std::size_t c = 0; c < d; ++c) out.at(s, c) /= static_cast<double>(seg.length);
  }
  std::vector<Segment> segs(segments.begin(), segments.end());
  return g.record(std::move(out), {x}, [x, segs = std::move(segs)](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad(self);
    Tensor& dx = g.grad(x);
    const std::size_t d = dy.cols();
    for (std::size_t s = 0; s < segs.size(); ++s) {
      const double inv = 1.0 / static_cast<double>(segs[s].length);
      for (std::size_t r = segs[s].start; r < segs[s].start + segs[s].length; ++r) {
        for (std::size_t c = 0; c < d; ++c) dx.at(r, c) += inv * dy.at(s, c);
      }
    }
  }, "segment_mean");
}

// Selects one row per segment (its first): [N, D] -> [segments, D].
inline Var segment_first(Var x, std::span<const Segment> segments) {
  Graph& g = *x.graph;
  const Tensor& X = g.value(x);
  const std::size_t d = X.cols();
  Tensor out({segments.size(), d});
  for (std::size_t s = 0; s < segments.size(); ++s) {
    std::copy_n(X.data() + segments[s].start * d, d, out.data() + s * d);
  }
  std::vector<Segment> segs(segments.begin(), segments.end());
  return g.record(std::move(out), {x}, [x, segs = std::move(segs)](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad(self);
    Tensor& dx = g.grad(x);
    const std::size_t d = dy.cols();
    for (std::size_t s = 0; s < segs.size(); ++s) {
      for (std::size_t c = 0; c < d; ++c) dx.at(segs[s].start, c) += dy.at(s, c);
    }
  }, "segment_first");
}

// Σ_i weights[i] · word_loss(logits[i], targets[i]). Rows with zero weight
// or a negative target are skipped. If `row_losses` is given it receives the
// unweighted loss of every scored row (0 elsewhere).
inline Var cross_entropy(Var logits, std::span<const std::int32_t> targets, std::span<const double> weights,
                         std::vector<double>* row_losses = nullptr) {
  Graph& g = *logits.graph;
  const Tensor& X = g.value(logits);
  const std::size_t n = X.rows();
  const std::size_t vocab = X.cols();
  if (targets.size() != n || weights.size() != n) {
    throw InvalidArgument("cross_entropy: targets/weights must have one entry per row");
  }
  if (row_losses) row_losses->assign(n, 0.0);
  const bool keep = g.any_requires_grad({logits});
  auto grad_rows = std::make_shared<std::vector<std::pair<std::size_t, std::vector<double>>>>();
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (weights[r] == 0.0 || targets[r] < 0) continue;
    const std::span<const double> row(X.data() + r * vocab, vocab);
    const double loss = word_loss(row, static_cast<std::size_t>(targets[r]));
    if (row_losses) (*row_losses)[r] = loss;
    total += weights[r] * loss;
    if (keep) {
      auto d = softmax(row);
      d[static_cast<std::size_t>(targets[r])] -= 1.0;
      for (auto& v : d) v *= weights[r];
      grad_rows->emplace_back(r, std::move(d));
    }
  }
  return g.record(Tensor::scalar(total), {logits}, [logits, grad_rows, vocab](Graph& g, std::size_t self) {
    const double dy = g.grad(self)[0];
    Tensor& dx = g.grad(logits);
    for (const auto& [r, d] : *grad_rows) {
      for (std::size_t c = 0; c < vocab; ++c) dx[r * vocab + c] += dy * d[c];
    }
  }, "cross_entropy");
}

// Σ_i weights[i] · BCE(sigmoid(z_i), labels[i]) for z of shape [N] or [N,1].
inline Var bce_with_logits(Var logits, std::span<const int> labels, std::span<const double> weights) {
  Graph& g = *logits.graph;
  const Tensor& Z = g.value(logits);
  if (Z.size() != labels.size() || weights.size() != labels.size()) {
    throw InvalidArgument("bce_with_logits: one label and weight per logit required");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < Z.size(); ++i) {
    const double z = Z[i];
    const double y = labels[i];
    total += weights[i] * (std::max(z, 0.0) - y * z + std::log1p(std::exp(-std::abs(z))));
  }
  std::vector<int> ys(labels.begin(), labels.end());
  std::vector<double> ws(weights.begin(), weights.end());
  return g.record(Tensor::scalar(total), {logits}, [logits, ys = std::move(ys), ws = std::move(ws)](
                                                       Graph& g, std::size_t self) {
    const double dy = g.grad(self)[0];
    const Tensor& Z = g.value(logits);
    Tensor& dz = g.grad(logits);
    for (std::size_t i = 0; i < Z.size(); ++i) {
      const double p = 1.0 / (1.0 + std::exp(-Z[i]));
      dz[i] += dy * ws[i] * (p - ys[i]);
    }
  }, "bce_with_logits");
}

// Inverted dropout; identity when p == 0.
inline Var dropout(Var x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  Graph& g = *x.graph;
  Tensor out = g.value(x);
  auto mask = std::make_shared<std::vector<double>>(out.size());
  const double keep_scale = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng.uniform() < p ? 0.0 : keep_scale;
    out[i] *= (*mask)[i];
  }
  return g.record(std::move(out), {x}, [x, mask](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad(self);
    Tensor& dx = g.grad(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * (*mask)[i];
  }, "dropout");
}

}  // namespace normtune::nn
