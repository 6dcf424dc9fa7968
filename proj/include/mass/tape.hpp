// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation over matrix-level primitives.
//
// Nodes are appended in evaluation order, which is a topological order of the
// computation graph; backward() walks them in exactly the reverse order.
// Every op computes its forward value eagerly and stores a closure that maps
// the node's upstream gradient onto its inputs.

#pragma once

#include "mass/log.hpp"
#include "mass/matrix.hpp"
#include "mass/ops.hpp"

#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <vector>

namespace mass {

template <typename Scalar>
class Tape {
 public:
  using Mat = MatrixX<Scalar>;

  struct Var {
    std::size_t id = 0;
  };

  Var constant(Mat value) { return push(std::move(value), false, nullptr); }
  Var parameter(Mat value) { return push(std::move(value), true, nullptr); }

  const Mat& value(Var v) const { return nodes_.at(v.id).value; }
  Scalar scalar(Var v) const { return value(v)(0, 0); }

  /// Gradient of the last backward() target; zeros for nodes it does not depend on.
  const Mat& grad(Var v) const { return nodes_.at(v.id).grad; }

  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::size_t>& backward_order() const { return visited_; }

  void backward(Var loss) {
    const Mat& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw ContractError("backward: loss node is " + shape_str(lv.rows(), lv.cols()) + ", expected 1x1");
    }
    for (auto& n : nodes_) {
      if (n.requires_grad) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    }
    visited_.clear();
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad(0, 0) = Scalar(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad) continue;
      visited_.push_back(i);
      if (n.backprop) n.backprop(*this, n.grad);
    }
  }

  // ---- primitives -------------------------------------------------------

  Var matmul(Var a, Var b) {
    Mat out = mass::matmul(value(a), value(b));
    return push(std::move(out), any(a, b), [a, b](Tape& t, const Mat& g) {
      if (t.requires_grad(a)) t.accumulate(a, g * t.value(b).transpose());
      if (t.requires_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
    });
  }

  Var add(Var a, Var b) {
    same_shape("add", a, b);
    Mat out = value(a) + value(b);
    return push(std::move(out), any(a, b), [a, b](Tape& t, const Mat& g) {
      t.accumulate(a, g);
      t.accumulate(b, g);
    });
  }

  Var sub(Var a, Var b) {
    same_shape("sub", a, b);
    Mat out = value(a) - value(b);
    return push(std::move(out), any(a, b), [a, b](Tape& t, const Mat& g) {
      t.accumulate(a, g);
      t.accumulate(b, -g);
    });
  }

  /// a + row broadcast over every row of a.
  Var add_row(Var a, Var row) {
    const Mat& r = value(row);
    if (r.rows() != 1 || r.cols() != value(a).cols()) {
      throw ShapeError("add_row: row " + shape_str(r.rows(), r.cols()) + " for " + shape(a));
    }
    Mat out = value(a).rowwise() + r.row(0);
    return push(std::move(out), any(a, row), [a, row](Tape& t, const Mat& g) {
      t.accumulate(a, g);
      if (t.requires_grad(row)) t.accumulate(row, g.colwise().sum());
    });
  }

  Var hadamard(Var a, Var b) {
    same_shape("hadamard", a, b);
    Mat out = value(a).cwiseProduct(value(b));
    return push(std::move(out), any(a, b), [a, b](Tape& t, const Mat& g) {
      if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(t.value(b)));
      if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(t.value(a)));
    });
  }

  Var scale(Var a, Scalar s) {
    Mat out = value(a) * s;
    return push(std::move(out), any(a), [a, s](Tape& t, const Mat& g) { t.accumulate(a, g * s); });
  }

  Var sum(Var a) {
    Mat out(1, 1);
    out(0, 0) = value(a).sum();
    return push(std::move(out), any(a), [a](Tape& t, const Mat& g) {
      const Mat& v = t.value(a);
      t.accumulate(a, Mat::Constant(v.rows(), v.cols(), g(0, 0)));
    });
  }

  Var silu(Var a) {
    Mat out = mass::silu(value(a));
    return push(std::move(out), any(a), [a](Tape& t, const Mat& g) {
      const Mat d = t.value(a).unaryExpr([](Scalar x) {
        const Scalar s = sigmoid(x);
        return s * (Scalar(1) + x * (Scalar(1) - s));
      });
      t.accumulate(a, g.cwiseProduct(d));
    });
  }

  Var softmax_rows(Var a) {
    Mat out = mass::softmax_rows(value(a));
    const std::size_t self = nodes_.size();
    return push(std::move(out), any(a), [a, self](Tape& t, const Mat& g) {
      const Mat& y = t.nodes_[self].value;
      const auto dot = g.cwiseProduct(y).rowwise().sum();
      t.accumulate(a, y.cwiseProduct(g - dot.replicate(1, g.cols())));
    });
  }

  /// Per-row normalization followed by elementwise gain and bias (both 1 x cols).
  Var layer_norm(Var x, Var gain, Var bias, Scalar eps = Scalar(1e-5)) {
    const Mat& xv = value(x);
    const Eigen::Index n = xv.rows();
    const Eigen::Index c = xv.cols();
    if (value(gain).cols() != c || value(bias).cols() != c) throw ShapeError("layer_norm: gain/bias width");
    auto xhat = std::make_shared<Mat>(n, c);
    auto inv_std = std::make_shared<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Scalar mu = xv.row(i).mean();
      const Scalar var = (xv.row(i).array() - mu).square().mean();
      (*inv_std)(i) = Scalar(1) / std::sqrt(var + eps);
      xhat->row(i) = (xv.row(i).array() - mu).matrix() * (*inv_std)(i);
    }
    Mat out = (xhat->array().rowwise() * value(gain).row(0).array()).matrix();
    out.rowwise() += value(bias).row(0);
    return push(std::move(out), any(x, gain, bias), [x, gain, bias, xhat, inv_std](Tape& t, const Mat& g) {
      if (t.requires_grad(gain)) t.accumulate(gain, g.cwiseProduct(*xhat).colwise().sum());
      if (t.requires_grad(bias)) t.accumulate(bias, g.colwise().sum());
      if (!t.requires_grad(x)) return;
      const Mat dxhat = (g.array().rowwise() * t.value(gain).row(0).array()).matrix();
      const Scalar cols = static_cast<Scalar>(g.cols());
      Mat dx(g.rows(), g.cols());
      for (Eigen::Index i = 0; i < g.rows(); ++i) {
        const Scalar m1 = dxhat.row(i).sum() / cols;
        const Scalar m2 = dxhat.row(i).dot(xhat->row(i)) / cols;
        dx.row(i) = (*inv_std)(i) * (dxhat.row(i).array() - m1 - xhat->row(i).array() * m2).matrix();
      }
      t.accumulate(x, dx);
    });
  }

  /// out.row(i) = a.row(indices[i]); used both for embedding lookup and row selection.
  Var rows(Var a, std::span<const int> indices) {
    const Mat& av = value(a);
    std::vector<int> idx(indices.begin(), indices.end());
    Mat out(static_cast<Eigen::Index>(idx.size()), av.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || idx[i] >= av.rows()) throw std::out_of_range("rows: index " + std::to_string(idx[i]));
      out.row(static_cast<Eigen::Index>(i)) = av.row(idx[i]);
    }
    return push(std::move(out), any(a), [a, idx = std::move(idx)](Tape& t, const Mat& g) {
      Mat& ga = t.nodes_[a.id].grad;
      for (std::size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    });
  }

  /// Inverse of rows(): places row i of a at indices[i] in an n_rows zero matrix (duplicates add).
  Var scatter_rows(Var a, std::span<const int> indices, Eigen::Index n_rows) {
    const Mat& av = value(a);
    if (static_cast<Eigen::Index>(indices.size()) != av.rows()) throw ShapeError("scatter_rows: index count");
    std::vector<int> idx(indices.begin(), indices.end());
    Mat out = Mat::Zero(n_rows, av.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || idx[i] >= n_rows) throw std::out_of_range("scatter_rows: index " + std::to_string(idx[i]));
      out.row(idx[i]) += av.row(static_cast<Eigen::Index>(i));
    }
    return push(std::move(out), any(a), [a, idx = std::move(idx)](Tape& t, const Mat& g) {
      Mat& ga = t.nodes_[a.id].grad;
      for (std::size_t i = 0; i < idx.size(); ++i) ga.row(static_cast<Eigen::Index>(i)) += g.row(idx[i]);
    });
  }

  Var column(Var a, Eigen::Index j) {
    const Mat& av = value(a);
    if (j < 0 || j >= av.cols()) throw std::out_of_range("column: " + std::to_string(j));
    Mat out = av.col(j);
    return push(std::move(out), any(a), [a, j](Tape& t, const Mat& g) { t.nodes_[a.id].grad.col(j) += g.col(0); });
  }

  Var hconcat(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("hconcat: no inputs");
    const Eigen::Index r = value(parts[0]).rows();
    Eigen::Index c = 0;
    bool rg = false;
    for (Var p : parts) {
      if (value(p).rows() != r) throw ShapeError("hconcat: row mismatch");
      c += value(p).cols();
      rg = rg || requires_grad(p);
    }
    Mat out(r, c);
    Eigen::Index off = 0;
    for (Var p : parts) {
      out.middleCols(off, value(p).cols()) = value(p);
      off += value(p).cols();
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    return push(std::move(out), rg, [ps = std::move(ps)](Tape& t, const Mat& g) {
      Eigen::Index o = 0;
      for (Var p : ps) {
        const Eigen::Index w = t.value(p).cols();
        if (t.requires_grad(p)) t.nodes_[p.id].grad += g.middleCols(o, w);
        o += w;
      }
    });
  }

  /// out.row(i) = w(i) * x.row(i) for a column vector w.
  Var scale_rows(Var x, Var w) {
    const Mat& xv = value(x);
    const Mat& wv = value(w);
    if (wv.cols() != 1 || wv.rows() != xv.rows()) throw ShapeError("scale_rows: weights " + shape(w) + " for " + shape(x));
    Mat out = xv.array().colwise() * wv.col(0).array();
    return push(std::move(out), any(x, w), [x, w](Tape& t, const Mat& g) {
      if (t.requires_grad(x)) t.accumulate(x, (g.array().colwise() * t.value(w).col(0).array()).matrix());
      if (t.requires_grad(w)) t.accumulate(w, g.cwiseProduct(t.value(x)).rowwise().sum());
    });
  }

  /// Multi-head causal self-attention over consecutive blocks of seq_len rows.
  /// q, k, v are (n_seq * seq_len) x d; heads split the columns evenly.
  Var causal_attention(Var q, Var k, Var v, Eigen::Index seq_len, Eigen::Index heads) {
    const Mat& qv = value(q);
    const Mat& kv = value(k);
    const Mat& vv = value(v);
    const Eigen::Index n = qv.rows();
    const Eigen::Index d = qv.cols();
    if (kv.rows() != n || vv.rows() != n || kv.cols() != d || vv.cols() != d) throw ShapeError("causal_attention: q/k/v");
    if (seq_len <= 0 || n % seq_len != 0) throw ShapeError("causal_attention: rows not a multiple of seq_len");
    if (heads <= 0 || d % heads != 0) throw ShapeError("causal_attention: width not divisible by heads");
    const Eigen::Index dh = d / heads;
    const Eigen::Index n_seq = n / seq_len;
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

    auto probs = std::make_shared<std::vector<Mat>>();
    probs->reserve(static_cast<std::size_t>(n_seq * heads));
    Mat out(n, d);
    for (Eigen::Index s = 0; s < n_seq; ++s) {
      for (Eigen::Index h = 0; h < heads; ++h) {
        const auto qs = qv.block(s * seq_len, h * dh, seq_len, dh);
        const auto ks = kv.block(s * seq_len, h * dh, seq_len, dh);
        const auto vs = vv.block(s * seq_len, h * dh, seq_len, dh);
        Mat scores = (qs * ks.transpose()) * scale;
        for (Eigen::Index i = 0; i < seq_len; ++i) {
          for (Eigen::Index j = i + 1; j < seq_len; ++j) scores(i, j) = -std::numeric_limits<Scalar>::infinity();
        }
        Mat p = mass::softmax_rows(scores);
        out.block(s * seq_len, h * dh, seq_len, dh) = p * vs;
        probs->push_back(std::move(p));
      }
    }
    return push(std::move(out), any(q, k, v), [=](Tape& t, const Mat& g) {
      const Mat& qv2 = t.value(q);
      const Mat& kv2 = t.value(k);
      const Mat& vv2 = t.value(v);
      const bool gq = t.requires_grad(q), gk = t.requires_grad(k), gv = t.requires_grad(v);
      for (Eigen::Index s = 0; s < n_seq; ++s) {
        for (Eigen::Index h = 0; h < heads; ++h) {
          const Mat& p = (*probs)[static_cast<std::size_t>(s * heads + h)];
          const auto go = g.block(s * seq_len, h * dh, seq_len, dh);
          if (gv) t.nodes_[v.id].grad.block(s * seq_len, h * dh, seq_len, dh) += p.transpose() * go;
          if (!gq && !gk) continue;
          const Mat dp = go * vv2.block(s * seq_len, h * dh, seq_len, dh).transpose();
          const auto dot = dp.cwiseProduct(p).rowwise().sum();
          const Mat ds = p.cwiseProduct(dp - dot.replicate(1, seq_len)) * scale;
          if (gq) t.nodes_[q.id].grad.block(s * seq_len, h * dh, seq_len, dh) += ds * kv2.block(s * seq_len, h * dh, seq_len, dh);
          if (gk) t.nodes_[k.id].grad.block(s * seq_len, h * dh, seq_len, dh) += ds.transpose() * qv2.block(s * seq_len, h * dh, seq_len, dh);
        }
      }
    });
  }

  /// Mean negative log-softmax probability of targets, as a 1x1 node.
  Var cross_entropy(Var logits, std::span<const int> targets) {
    std::vector<int> tg(targets.begin(), targets.end());
    Mat out(1, 1);
    out(0, 0) = mass::cross_entropy(value(logits), std::span<const int>(tg));
    return push(std::move(out), any(logits), [logits, tg = std::move(tg)](Tape& t, const Mat& g) {
      Mat d = mass::softmax_rows(t.value(logits));
      for (std::size_t i = 0; i < tg.size(); ++i) d(static_cast<Eigen::Index>(i), tg[i]) -= Scalar(1);
      t.accumulate(logits, d * (g(0, 0) / static_cast<Scalar>(tg.size())));
    });
  }

  /// Squared cosine of two flattened operands. A zero-norm operand yields 0
  /// with no gradient.
  Var cosine_squared(Var a, Var b) {
    same_shape("cosine_squared", a, b);
    const Mat& av = value(a);
    const Mat& bv = value(b);
    const Scalar na = av.norm();
    const Scalar nb = bv.norm();
    Mat out = Mat::Zero(1, 1);
    if (na == Scalar(0) || nb == Scalar(0)) {
      log::warn("cosine_squared: zero-norm operand treated as orthogonal");
      return push(std::move(out), false, nullptr);
    }
    const Scalar c = av.cwiseProduct(bv).sum() / (na * nb);
    out(0, 0) = c * c;
    return push(std::move(out), any(a, b), [a, b, na, nb, c](Tape& t, const Mat& g) {
      const Scalar coef = Scalar(2) * c * g(0, 0);
      const Mat& av2 = t.value(a);
      const Mat& bv2 = t.value(b);
      if (t.requires_grad(a)) t.accumulate(a, coef * (bv2 / (na * nb) - av2 * (c / (na * na))));
      if (t.requires_grad(b)) t.accumulate(b, coef * (av2 / (na * nb) - bv2 * (c / (nb * nb))));
    });
  }

 private:
  using Backprop = std::function<void(Tape&, const Mat&)>;

  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    Backprop backprop;
  };

  Var push(Mat value, bool requires_grad, Backprop fn) {
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad, requires_grad ? std::move(fn) : Backprop{}});
    return Var{nodes_.size() - 1};
  }

  template <typename Expr>
  void accumulate(Var v, const Expr& e) {
    Node& n = nodes_[v.id];
    if (n.requires_grad) n.grad += e;
  }

  template <typename... Vs>
  bool any(Vs... vs) const {
    return (requires_grad(vs) || ...);
  }

  std::string shape(Var v) const { return shape_str(value(v).rows(), value(v).cols()); }

  void same_shape(const char* op, Var a, Var b) const {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
      throw ShapeError(std::string(op) + ": " + shape(a) + " vs " + shape(b));
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::size_t> visited_;
};

}  // namespace mass
