// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "mededit/graph.hpp"
#include "mededit/tensor.hpp"

// Differentiable primitives. Every function records one node on the tape and
// returns its id. Shapes are validated up front; backward closures accumulate
// into the adjoints of their inputs via grad_acc().
namespace mededit {

using NodeId = std::int32_t;

namespace detail {

template <typename S>
void require_2d(const TensorT<S>& t, const char* op) {
  if (t.ndim() != 2) {
    throw ShapeError(std::string(op) + ": expected 2-D tensor, got " + shape_str(t.shape()));
  }
}

}  // namespace detail

/// Elementwise sum of two same-shape tensors.
template <typename S>
NodeId add(GraphT<S>& g, NodeId a, NodeId b) {
  const auto& va = g.value(a);
  const auto& vb = g.value(b);
  if (!va.same_shape(vb)) {
    throw ShapeError("add: shape mismatch " + shape_str(va.shape()) + " vs " + shape_str(vb.shape()));
  }
  TensorT<S> out(va.shape());
  out.vec() = va.vec() + vb.vec();
  const NodeId id = static_cast<NodeId>(g.size());
  return g.add_op("add", std::move(out), {a, b}, [a, b, id](GraphT<S>& gr) {
    const auto& go = gr.grad(id);
    gr.grad_acc(a).vec() += go.vec();
    gr.grad_acc(b).vec() += go.vec();
  });
}

/// Adds a length-C vector to every row of an R x C matrix.
template <typename S>
NodeId add_rowvec(GraphT<S>& g, NodeId x, NodeId b) {
  const auto& vx = g.value(x);
  const auto& vb = g.value(b);
  detail::require_2d(vx, "add_rowvec");
  if (vb.numel() != vx.cols()) {
    throw ShapeError("add_rowvec: vector length " + shape_str(vb.shape()) + " does not match columns of " +
                     shape_str(vx.shape()));
  }
  TensorT<S> out(vx.shape());
  out.mat() = vx.mat().rowwise() + vb.vec().transpose();
  const NodeId id = static_cast<NodeId>(g.size());
  return g.add_op("add_rowvec", std::move(out), {x, b}, [x, b, id](GraphT<S>& gr) {
    const auto& go = gr.grad(id);
    gr.grad_acc(x).vec() += go.vec();
    gr.grad_acc(b).vec() += go.mat().colwise().sum().transpose();
  });
}

/// Adds a length-C vector to a single row of an R x C matrix.
template <typename S>
NodeId add_at_row(GraphT<S>& g, NodeId x, int row, NodeId delta) {
  const auto& vx = g.value(x);
  const auto& vd = g.value(delta);
  detail::require_2d(vx, "add_at_row");
  if (row < 0 || row >= vx.rows()) {
    throw IndexError("add_at_row: row " + std::to_string(row) + " out of range for " + shape_str(vx.shape()));
  }
  if (vd.numel() != vx.cols()) {
    throw ShapeError("add_at_row: delta length " + shape_str(vd.shape()) + " does not match columns of " +
                     shape_str(vx.shape()));
  }
  TensorT<S> out = vx;
  out.mat().row(row) += vd.vec().transpose();
  const NodeId id = static_cast<NodeId>(g.size());
  return g.add_op("add_at_row", std::move(out), {x, delta}, [x, delta, row, id](GraphT<S>& gr) {
    const auto& go = gr.grad(id);
    gr.grad_acc(x).vec() += go.vec();
    gr.grad_acc(delta).vec() += go.mat().row(row).transpose();
  });
}

template <typename S>
NodeId scale(GraphT<S>& g, NodeId x, S alpha) {
  const auto& vx = g.value(x);
  TensorT<S> out(vx.shape());
  out.vec() = vx.vec() * alpha;
  const NodeId id = static_cast<NodeId>(g.size());
  return g.add_op("scale", std::move(out), {x}, [x, alpha, id](GraphT<S>& gr) {
    gr.grad_acc(x).vec() += gr.grad(id).vec() * alpha;
  });
}

/// Matrix product [m,k] x [k,n] -> [m,n].
template <typename S>
NodeId matmul(GraphT<S>& g, NodeId a, NodeId b) {
  const auto& va = g.value(a);
  const auto& vb = g.value(b);
  detail::require_2d(va, "matmul");
  detail::require_2d(vb, "matmul");
  if (va.cols() != vb.rows()) {
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(va.shape()) + " vs " +
                     shape_str(vb.shape()));
  }
  TensorT<S> out({va.rows(), vb.cols()});
  out.mat().noalias() = va.mat() * vb.mat();
  const NodeId id = static_cast<NodeId>(g.size());
  return g.add_op("matmul", std::move(out), {a, b}, [a, b, id](GraphT<S>& gr) {
    const auto& go = gr.grad(id);
    gr.grad_acc(a).mat().noalias() += go.mat() * gr.value(b).mat().transpose();
    gr.grad_acc(b).mat().noalias() += gr.value(a).mat().transpose() * go.mat();
  });
}

/// Affine map y = x W^T (+ bias), with W stored [d_out, d_in].
template <typename S>
NodeId linear(GraphT<S>& g, NodeId x, NodeId w, NodeId bias = GraphT<S>::kNone) {
  const auto& vx = g.value(x);
  const auto& vw = g.value(w);
  detail::require_2d(vx, "linear");
  detail::require_2d(vw, "linear");
  if (vx.cols() != vw.cols()) {
    throw ShapeError("linear: input width " + shape_str(vx.shape()) + " does not match weight " +
                     shape_str(vw.shape()));
  }
  TensorT<S> out({vx.rows(), vw.rows()});
  out.mat().noalias() = vx.mat() * vw.mat().transpose();
  if (bias != GraphT<S>::kNone) {
    const auto& vb = g.value(bias);
    if (vb.numel() != vw.rows()) {
      throw ShapeError("linear: bias length " + shape_str(vb.shape()) + " does not match weight rows of " +
                       shape_str(vw.shape()));
    }
    out.mat().rowwise() += vb.vec().transpose();
  }
  std::vector<NodeId> inputs{x, w};
  if (bias != GraphT<S>::kNone) inputs.push_back(bias);
  const NodeId id = static_cast<NodeId>(g.size());
  return g.add_op("linear", std::move(out), std::move(inputs), [x, w, bias, id](GraphT<S>& gr) {
    const auto& go = gr.grad(id);
    gr.grad_acc(x).mat().noalias() += go.mat() * gr.value(w).mat();
    gr.grad_acc(w).mat().noalias() += go.mat().transpose() * gr.value(x).mat();
    if (bias != GraphT<S>::kNone) {
      gr.grad_acc(bias).vec() += go.mat().colwise().sum().transpose();
    }
  });
}

/// Elementwise tanh-approximation GELU.
template <typename S>
NodeId gelu(GraphT<S>& g, NodeId x) {
  static const S kC = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
  static const S kA = static_cast<S>(0.044715);
  const auto& vx = g.value(x);
  TensorT<S> out(vx.shape());
  const S* in = vx.data();
  S* o = out.data();
  const std::int64_t n = vx.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const S v = in[i];
    o[i] = S(0.5) * v * (S(1) + std::tanh(kC * (v + kA * v * v * v)));
  }
  const NodeId id = static_cast<NodeId>(g.size());
  return g.add_op("gelu", std::move(out), {x}, [x, id](GraphT<S>& gr) {
    const auto& go = gr.grad(id);
    const auto& vin = gr.value(x);
    auto& gx = gr.grad_acc(x);
    const std::int64_t m = vin.numel();
    for (std::int64_t i = 0; i < m; ++i) {
      const S v = vin[i];
      const S t = std::tanh(kC * (v + kA * v * v * v));
      const S du = kC * (S(1) + S(3) * kA * v * v);
      const S d = S(0.5) * (S(1) + t) + S(0.5) * v * (S(1) - t * t) * du;
      gx[i] += go[i] * d;
    }
  });
}

/// Row-wise layer normalization with learned gain/bias.
template <typename S>
NodeId layernorm(GraphT<S>& g, NodeId x, NodeId gain, NodeId bias, S eps = static_cast<S>(1e-5)) {
  const auto& vx = g.value(x);
  detail::require_2d(vx, "layernorm");
  const int R = vx.rows(), C = vx.cols();
  if (g.value(gain).numel() != C || g.value(bias).numel() != C) {
    throw ShapeError("layernorm: gain/bias length must match columns of " + shape_str(vx.shape()));
  }
  auto cache = std::make_shared<std::pair<TensorT<S>, TensorT<S>>>(
      TensorT<S>({R, C}), TensorT<S>({R}));  // normalized rows, inverse stddev
  TensorT<S> out({R, C});
  auto xm = vx.mat();
  auto& xhat = cache->first;
  auto& inv_std = cache->second;
  for (int r = 0; r < R; ++r) {
    const S mu = xm.row(r).mean();
    const S var = (xm.row(r).array() - mu).square().sum() / static_cast<S>(C);
    const S inv = S(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    xhat.mat().row(r) = ((xm.row(r).array() - mu) * inv).matrix();
  }
  out.mat() = ((xhat.mat().array().rowwise() * g.value(gain).vec().transpose().array()).rowwise() +
               g.value(bias).vec().transpose().array())
                  .matrix();
  const NodeId id = static_cast<NodeId>(g.size());
  return g.add_op("layernorm", std::move(out), {x, gain, bias}, [x, gain, bias, cache, id](GraphT<S>& gr) {
    const auto& go = gr.grad(id);
    const auto& xhat_m = cache->first;
    const auto& inv_std_v = cache->second;
    const int rows = static_cast<int>(go.mat().rows());
    gr.grad_acc(gain).vec() +=
        (go.mat().array() * xhat_m.mat().array()).colwise().sum().transpose().matrix();
    gr.grad_acc(bias).vec() += go.mat().colwise().sum().transpose();
    auto gx = gr.grad_acc(x).mat();
    const Eigen::Array<S, 1, Eigen::Dynamic> gvec = gr.value(gain).vec().transpose().array();
    for (int r = 0; r < rows; ++r) {
      const Eigen::Array<S, 1, Eigen::Dynamic> dxhat = go.mat().row(r).array() * gvec;
      const S m1 = dxhat.mean();
      const S m2 = (dxhat * xhat_m.mat().row(r).array()).mean();
      gx.row(r) += (inv_std_v[r] * (dxhat - m1 - xhat_m.mat().row(r).array() * m2)).matrix();
    }
  });
}

/// Gathers table rows by index: out.row(i) = table.row(ids[i]).
template <typename S>
NodeId embedding_rows(GraphT<S>& g, NodeId table, std::vector<int> ids) {
  const auto& vt = g.value(table);
  detail::require_2d(vt, "embedding_rows");
  const int V = vt.rows(), D = vt.cols();
  for (int tok : ids) {
    if (tok < 0 || tok >= V) {
      throw IndexError("embedding_rows: index " + std::to_string(tok) + " out of range [0," +
                       std::to_string(V) + ")");
    }
  }
  TensorT<S> out({static_cast<int>(ids.size()), D});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out.mat().row(static_cast<int>(i)) = vt.mat().row(ids[i]);
  }
  auto ids_ptr = std::make_shared<std::vector<int>>(std::move(ids));
  const NodeId id = static_cast<NodeId>(g.size());
  return g.add_op("embedding_rows", std::move(out), {table}, [table, ids_ptr, id](GraphT<S>& gr) {
    const auto& go = gr.grad(id);
    auto gt = gr.grad_acc(table).mat();
    for (std::size_t i = 0; i < ids_ptr->size(); ++i) {
      gt.row((*ids_ptr)[i]) += go.mat().row(static_cast<int>(i));
    }
  });
}

/// [R, H*Dh] -> [H, R, Dh]; each head becomes a contiguous R x Dh block.
template <typename S>
NodeId split_heads(GraphT<S>& g, NodeId x, int n_heads) {
  const auto& vx = g.value(x);
  detail::require_2d(vx, "split_heads");
  const int R = vx.rows(), D = vx.cols();
  if (n_heads <= 0 || D % n_heads != 0) {
    throw ShapeError("split_heads: width of " + shape_str(vx.shape()) + " not divisible by " +
                     std::to_string(n_heads) + " heads");
  }
  const int Dh = D / n_heads;
  TensorT<S> out({n_heads, R, Dh});
  for (int h = 0; h < n_heads; ++h) {
    out.block2d(static_cast<std::int64_t>(h) * R * Dh, R, Dh) = vx.mat().middleCols(h * Dh, Dh);
  }
  const NodeId id = static_cast<NodeId>(g.size());
  return g.add_op("split_heads", std::move(out), {x}, [x, n_heads, R, Dh, id](GraphT<S>& gr) {
    const auto& go = gr.grad(id);
    auto gx = gr.grad_acc(x).mat();
    for (int h = 0; h < n_heads; ++h) {
      gx.middleCols(h * Dh, Dh) += go.block2d(static_cast<std::int64_t>(h) * R * Dh, R, Dh);
    }
  });
}

/// [H, R, Dh] -> [R, H*Dh]; inverse of split_heads.
template <typename S>
NodeId concat_heads(GraphT<S>& g, NodeId x) {
  const auto& vx = g.value(x);
  if (vx.ndim() != 3) {
    throw ShapeError("concat_heads: expected [heads, rows, head_dim], got " + shape_str(vx.shape()));
  }
  const int H = vx.dim(0), R = vx.dim(1), Dh = vx.dim(2);
  TensorT<S> out({R, H * Dh});
  for (int h = 0; h < H; ++h) {
    out.mat().middleCols(h * Dh, Dh) = vx.block2d(static_cast<std::int64_t>(h) * R * Dh, R, Dh);
  }
  const NodeId id = static_cast<NodeId>(g.size());
  return g.add_op("concat_heads", std::move(out), {x}, [x, H, R, Dh, id](GraphT<S>& gr) {
    const auto& go = gr.grad(id);
    auto& gx = gr.grad_acc(x);
    for (int h = 0; h < H; ++h) {
      gx.block2d(static_cast<std::int64_t>(h) * R * Dh, R, Dh) += go.mat().middleCols(h * Dh, Dh);
    }
  });
}

// Causal-masked softmax attention over per-head blocks. q, k, v have shape
// [H, R, Dh] with R = B * seq_len; rows are grouped into B independent
// sequences. Position i attends to positions j <= i of its own sequence.
// Softmax probabilities are cached for the backward pass.
template <typename S>
NodeId causal_attention(GraphT<S>& g, NodeId q, NodeId k, NodeId v, int seq_len) {
  const auto& vq = g.value(q);
  const auto& vk = g.value(k);
  const auto& vv = g.value(v);
  if (vq.ndim() != 3 || !vq.same_shape(vk) || !vq.same_shape(vv)) {
    throw ShapeError("causal_attention: q/k/v must share shape [heads, rows, head_dim], got " +
                     shape_str(vq.shape()) + ", " + shape_str(vk.shape()) + ", " + shape_str(vv.shape()));
  }
  const int H = vq.dim(0), R = vq.dim(1), Dh = vq.dim(2);
  if (seq_len <= 0 || R % seq_len != 0) {
    throw ShapeError("causal_attention: row count " + std::to_string(R) +
                     " is not a multiple of seq_len " + std::to_string(seq_len));
  }
  const int T = seq_len, B = R / T;
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(Dh));
  auto probs = std::make_shared<TensorT<S>>(std::vector<int>{H, B, T, T});
  TensorT<S> out({H, R, Dh});
  using Matrix = typename TensorT<S>::Matrix;
  for (int h = 0; h < H; ++h) {
    for (int b = 0; b < B; ++b) {
      const std::int64_t off = (static_cast<std::int64_t>(h) * R + static_cast<std::int64_t>(b) * T) * Dh;
      auto Q = vq.block2d(off, T, Dh);
      auto K = vk.block2d(off, T, Dh);
      auto V = vv.block2d(off, T, Dh);
      Matrix scores(T, T);
      scores.noalias() = Q * K.transpose() * inv_sqrt;
      auto P = probs->block2d((static_cast<std::int64_t>(h) * B + b) * T * T, T, T);
      P.setZero();
      for (int i = 0; i < T; ++i) {
        const int w = i + 1;  // causal prefix
        const S m = scores.row(i).head(w).maxCoeff();
        P.row(i).head(w) = (scores.row(i).head(w).array() - m).exp();
        P.row(i).head(w) /= P.row(i).head(w).sum();
      }
      out.block2d(off, T, Dh).noalias() = P * V;
    }
  }
  const NodeId id = static_cast<NodeId>(g.size());
  return g.add_op("causal_attention", std::move(out), {q, k, v},
                  [q, k, v, probs, H, B, T, Dh, inv_sqrt, id](GraphT<S>& gr) {
                    const auto& go = gr.grad(id);
                    const int Rr = B * T;
                    auto& gq = gr.grad_acc(q);
                    auto& gk = gr.grad_acc(k);
                    auto& gv = gr.grad_acc(v);
                    for (int h = 0; h < H; ++h) {
                      for (int b = 0; b < B; ++b) {
                        const std::int64_t off =
                            (static_cast<std::int64_t>(h) * Rr + static_cast<std::int64_t>(b) * T) * Dh;
                        auto P = probs->block2d((static_cast<std::int64_t>(h) * B + b) * T * T, T, T);
                        auto dO = go.block2d(off, T, Dh);
                        auto Q = gr.value(q).block2d(off, T, Dh);
                        auto K = gr.value(k).block2d(off, T, Dh);
                        auto V = gr.value(v).block2d(off, T, Dh);
                        Matrix dP(T, T), dS(T, T);
                        dP.noalias() = dO * V.transpose();
                        const Eigen::Array<S, Eigen::Dynamic, 1> row_dot =
                            (dP.array() * P.array()).rowwise().sum();
                        dS = (P.array() * (dP.array().colwise() - row_dot)).matrix();
                        gv.block2d(off, T, Dh).noalias() += P.transpose() * dO;
                        gq.block2d(off, T, Dh).noalias() += dS * K * inv_sqrt;
                        gk.block2d(off, T, Dh).noalias() += dS.transpose() * Q * inv_sqrt;
                      }
                    }
                  });
}

// Mean negative log-likelihood over (optionally masked) positions. Targets
// index the vocabulary axis of [R, V] logits; weights, when given, select and
// weight positions (PAD masking). Softmax rows are cached for backward.
template <typename S>
NodeId softmax_cross_entropy(GraphT<S>& g, NodeId logits, std::vector<int> targets,
                             std::vector<S> weights = {}) {
  const auto& vl = g.value(logits);
  detail::require_2d(vl, "softmax_cross_entropy");
  const int R = vl.rows(), V = vl.cols();
  if (static_cast<int>(targets.size()) != R) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(R) + " logit rows");
  }
  if (!weights.empty() && static_cast<int>(weights.size()) != R) {
    throw ShapeError("softmax_cross_entropy: weight count does not match rows");
  }
  for (int t : targets) {
    if (t < 0 || t >= V) {
      throw IndexError("softmax_cross_entropy: target " + std::to_string(t) + " out of range [0," +
                       std::to_string(V) + ")");
    }
  }
  double denom = 0.0;
  if (weights.empty()) {
    denom = R;
  } else {
    for (S w : weights) denom += static_cast<double>(w);
    if (denom <= 0.0) throw ContractError("softmax_cross_entropy: all positions masked out");
  }
  auto probs = std::make_shared<TensorT<S>>(std::vector<int>{R, V});
  double loss = 0.0;
  for (int r = 0; r < R; ++r) {
    const auto row = vl.mat().row(r);
    const S m = row.maxCoeff();
    auto p = probs->mat().row(r);
    p = (row.array() - m).exp();
    const S z = p.sum();
    p /= z;
    const double w = weights.empty() ? 1.0 : static_cast<double>(weights[r]);
    if (w != 0.0) {
      const double lse = static_cast<double>(m) + std::log(static_cast<double>(z));
      loss += w * (lse - static_cast<double>(row[targets[static_cast<std::size_t>(r)]]));
    }
  }
  auto tgt = std::make_shared<std::vector<int>>(std::move(targets));
  auto wts = std::make_shared<std::vector<S>>(std::move(weights));
  const NodeId id = static_cast<NodeId>(g.size());
  return g.add_op("softmax_cross_entropy", TensorT<S>::scalar(static_cast<S>(loss / denom)), {logits},
                  [logits, probs, tgt, wts, denom, id](GraphT<S>& gr) {
                    const S go = gr.grad(id)[0];
                    auto gl = gr.grad_acc(logits).mat();
                    const int rows = static_cast<int>(gl.rows());
                    for (int r = 0; r < rows; ++r) {
                      const double w = wts->empty() ? 1.0 : static_cast<double>((*wts)[static_cast<std::size_t>(r)]);
                      if (w == 0.0) continue;
                      const S coeff = go * static_cast<S>(w / denom);
                      gl.row(r) += coeff * probs->mat().row(r);
                      gl(r, (*tgt)[static_cast<std::size_t>(r)]) -= coeff;
                    }
                  });
}

// Sum of log softmax(logits[row])[token] over (row, token) picks; the scalar
// teacher-forced log-probability of a continuation.
template <typename S>
NodeId token_logprob_sum(GraphT<S>& g, NodeId logits, std::vector<std::pair<int, int>> picks) {
  const auto& vl = g.value(logits);
  detail::require_2d(vl, "token_logprob_sum");
  const int R = vl.rows(), V = vl.cols();
  if (picks.empty()) throw ContractError("token_logprob_sum: no picks given");
  for (const auto& [r, t] : picks) {
    if (r < 0 || r >= R) throw IndexError("token_logprob_sum: row " + std::to_string(r) + " out of range");
    if (t < 0 || t >= V) throw IndexError("token_logprob_sum: token " + std::to_string(t) + " out of range");
  }
  auto probs = std::make_shared<TensorT<S>>(std::vector<int>{static_cast<int>(picks.size()), V});
  double total = 0.0;
  for (std::size_t i = 0; i < picks.size(); ++i) {
    const auto row = vl.mat().row(picks[i].first);
    const S m = row.maxCoeff();
    auto p = probs->mat().row(static_cast<int>(i));
    p = (row.array() - m).exp();
    const S z = p.sum();
    p /= z;
    total += static_cast<double>(row[picks[i].second]) - static_cast<double>(m) -
             std::log(static_cast<double>(z));
  }
  auto pk = std::make_shared<std::vector<std::pair<int, int>>>(std::move(picks));
  const NodeId id = static_cast<NodeId>(g.size());
  return g.add_op("token_logprob_sum", TensorT<S>::scalar(static_cast<S>(total)), {logits},
                  [logits, probs, pk, id](GraphT<S>& gr) {
                    const S go = gr.grad(id)[0];
                    auto gl = gr.grad_acc(logits).mat();
                    for (std::size_t i = 0; i < pk->size(); ++i) {
                      const auto& [r, t] = (*pk)[i];
                      gl.row(r) -= go * probs->mat().row(static_cast<int>(i));
                      gl(r, t) += go;
                    }
                  });
}

/// Euclidean norm of all elements, as a scalar node.
template <typename S>
NodeId l2_norm_node(GraphT<S>& g, NodeId x) {
  const auto& vx = g.value(x);
  const double n = vx.vec().template cast<double>().norm();
  const NodeId id = static_cast<NodeId>(g.size());
  return g.add_op("l2_norm", TensorT<S>::scalar(static_cast<S>(n)), {x}, [x, n, id](GraphT<S>& gr) {
    if (n > 0.0) {
      gr.grad_acc(x).vec() += gr.grad(id)[0] * gr.value(x).vec() * static_cast<S>(1.0 / n);
    }
  });
}

}  // namespace mededit
