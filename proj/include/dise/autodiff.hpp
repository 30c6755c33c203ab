//
// dise - discrete diffusion structure elucidation
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "dise/common.hpp"

// Reverse-mode differentiation over row-major matrices.
//
// A Tape records values of a straight-line computation; each op registers a
// closure that pushes the output gradient to its inputs. Buffers are kept
// across reset() calls so repeated forwards of the same shape do not
// allocate. With recording disabled the tape only evaluates.
//
// Batched graph layout used by the graph ops: B graphs of n nodes each;
// node rows are ordered (b, i) and pair rows (b, i, j).
namespace dise::ad {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Var {
  int id = -1;
};

template <typename S>
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}

  void reset(bool record) {
    record_ = record;
    count_ = 0;
  }
  bool recording() const noexcept { return record_; }

  // Leaf owning a copy of `value`.
  Var constant(const Mat<S> &value) {
    Var v = push(false);
    node(v).own = value;
    return v;
  }

  Var constant(Mat<S> &&value) {
    Var v = push(false);
    node(v).own = std::move(value);
    return v;
  }

  // Leaf referencing external storage (parameters). The referenced matrix
  // must outlive the tape's use of it.
  Var parameter(const Mat<S> &value) {
    Var v = push(record_);
    node(v).ext = &value;
    return v;
  }

  // Op output whose value the caller fills through mutable_value().
  Var op(std::initializer_list<Var> inputs) {
    bool needs = false;
    if (record_)
      for (Var in : inputs) needs = needs || node(in).needs_grad;
    return push(needs);
  }

  const Mat<S> &value(Var v) const {
    const Node &nd = nodes_[v.id];
    return nd.ext ? *nd.ext : nd.own;
  }
  Mat<S> &mutable_value(Var v) { return nodes_[v.id].own; }
  Mat<S> &aux(Var v) { return nodes_[v.id].aux; }
  const Mat<S> &aux(Var v) const { return nodes_[v.id].aux; }

  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  bool has_grad(Var v) const { return nodes_[v.id].has_grad; }

  const Mat<S> &grad(Var v) const { return nodes_[v.id].grad; }

  // Gradient buffer of v, zero-initialized on first touch.
  Mat<S> &grad_buffer(Var v) {
    Node &nd = nodes_[v.id];
    if (!nd.has_grad) {
      const auto &val = value(v);
      nd.grad.setZero(val.rows(), val.cols());
      nd.has_grad = true;
    }
    return nd.grad;
  }

  void set_backward(Var v, std::function<void()> fn) {
    if (nodes_[v.id].needs_grad) nodes_[v.id].backward = std::move(fn);
  }

  // Seeds d(out)/d(out) = 1 for a 1x1 output and runs the closures in
  // reverse order.
  void backward(Var out) {
    if (!record_) throw InvariantViolation("backward on a non-recording tape");
    grad_buffer(out).setOnes();
    for (int id = out.id; id >= 0; --id) {
      Node &nd = nodes_[id];
      if (nd.has_grad && nd.backward) nd.backward();
    }
  }

  std::size_t size() const noexcept { return count_; }

 private:
  struct Node {
    Mat<S> own;
    Mat<S> grad;
    Mat<S> aux;
    const Mat<S> *ext = nullptr;
    std::function<void()> backward;
    bool needs_grad = false;
    bool has_grad = false;
  };

  Node &node(Var v) { return nodes_[v.id]; }

  Var push(bool needs) {
    if (count_ == nodes_.size()) nodes_.emplace_back();
    Node &nd = nodes_[count_];
    nd.ext = nullptr;
    nd.backward = nullptr;
    nd.needs_grad = needs;
    nd.has_grad = false;
    return Var{static_cast<int>(count_++)};
  }

  bool record_;
  std::size_t count_ = 0;
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Dense ops

// a * w + b (b is 1 x cols, broadcast over rows).
template <typename S>
Var linear(Tape<S> &t, Var a, Var w, Var b) {
  Var y = t.op({a, w, b});
  auto &out = t.mutable_value(y);
  out.resize(t.value(a).rows(), t.value(w).cols());
  out.noalias() = t.value(a) * t.value(w);
  out.rowwise() += t.value(b).row(0);
  t.set_backward(y, [&t, a, w, b, y] {
    const auto &g = t.grad(y);
    if (t.needs_grad(a)) t.grad_buffer(a).noalias() += g * t.value(w).transpose();
    if (t.needs_grad(w)) t.grad_buffer(w).noalias() += t.value(a).transpose() * g;
    if (t.needs_grad(b)) t.grad_buffer(b).row(0) += g.colwise().sum();
  });
  return y;
}

// a * w without bias.
template <typename S>
Var matmul(Tape<S> &t, Var a, Var w) {
  Var y = t.op({a, w});
  auto &out = t.mutable_value(y);
  out.resize(t.value(a).rows(), t.value(w).cols());
  out.noalias() = t.value(a) * t.value(w);
  t.set_backward(y, [&t, a, w, y] {
    const auto &g = t.grad(y);
    if (t.needs_grad(a)) t.grad_buffer(a).noalias() += g * t.value(w).transpose();
    if (t.needs_grad(w)) t.grad_buffer(w).noalias() += t.value(a).transpose() * g;
  });
  return y;
}

template <typename S>
Var add(Tape<S> &t, Var a, Var b) {
  Var y = t.op({a, b});
  t.mutable_value(y) = t.value(a) + t.value(b);
  t.set_backward(y, [&t, a, b, y] {
    if (t.needs_grad(a)) t.grad_buffer(a) += t.grad(y);
    if (t.needs_grad(b)) t.grad_buffer(b) += t.grad(y);
  });
  return y;
}

// Elementwise a * (1 + b).
template <typename S>
Var gate(Tape<S> &t, Var a, Var b) {
  Var y = t.op({a, b});
  t.mutable_value(y) =
      t.value(a).array() * (t.value(b).array() + S(1));
  t.set_backward(y, [&t, a, b, y] {
    const auto &g = t.grad(y);
    if (t.needs_grad(a))
      t.grad_buffer(a).array() += g.array() * (t.value(b).array() + S(1));
    if (t.needs_grad(b))
      t.grad_buffer(b).array() += g.array() * t.value(a).array();
  });
  return y;
}

// x * sigmoid(x)
template <typename S>
Var silu(Tape<S> &t, Var a) {
  Var y = t.op({a});
  const auto &x = t.value(a);
  auto &sig = t.aux(y);
  sig = (S(1) + (-x.array()).exp()).inverse().matrix();
  t.mutable_value(y) = (x.array() * sig.array()).matrix();
  t.set_backward(y, [&t, a, y] {
    if (!t.needs_grad(a)) return;
    const auto &x = t.value(a);
    const auto &s = t.aux(y);
    t.grad_buffer(a).array() +=
        t.grad(y).array() * s.array() *
        (S(1) + x.array() * (S(1) - s.array()));
  });
  return y;
}

// Row-wise layer normalization with affine gain/bias (1 x cols each).
template <typename S>
Var layer_norm(Tape<S> &t, Var a, Var gain, Var bias) {
  constexpr double kEps = 1e-5;
  Var y = t.op({a, gain, bias});
  const auto &x = t.value(a);
  const Eigen::Index rows = x.rows(), cols = x.cols();
  // aux: normalized input (rows x cols) followed by one column of 1/sigma
  auto &aux = t.aux(y);
  aux.resize(rows, cols + 1);
  auto &out = t.mutable_value(y);
  out.resize(rows, cols);
  const auto &g = t.value(gain);
  const auto &b = t.value(bias);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const S mean = x.row(r).mean();
    const S var = (x.row(r).array() - mean).square().mean();
    const S inv = S(1) / std::sqrt(var + S(kEps));
    aux.row(r).head(cols) = (x.row(r).array() - mean) * inv;
    aux(r, cols) = inv;
    out.row(r) = aux.row(r).head(cols).cwiseProduct(g.row(0)) + b.row(0);
  }
  t.set_backward(y, [&t, a, gain, bias, y] {
    const auto &gy = t.grad(y);
    const auto &aux = t.aux(y);
    const Eigen::Index rows = gy.rows(), cols = gy.cols();
    const auto xhat = aux.leftCols(cols);
    if (t.needs_grad(gain))
      t.grad_buffer(gain).row(0) += gy.cwiseProduct(xhat).colwise().sum();
    if (t.needs_grad(bias)) t.grad_buffer(bias).row(0) += gy.colwise().sum();
    if (t.needs_grad(a)) {
      const auto &g = t.value(gain);
      auto &ga = t.grad_buffer(a);
      for (Eigen::Index r = 0; r < rows; ++r) {
        const Eigen::Matrix<S, 1, Eigen::Dynamic> dxhat =
            gy.row(r).cwiseProduct(g.row(0));
        const S m1 = dxhat.mean();
        const S m2 = dxhat.cwiseProduct(xhat.row(r)).mean();
        ga.row(r).array() += aux(r, cols) * (dxhat.array() - m1 -
                                             xhat.row(r).array() * m2);
      }
    }
  });
  return y;
}

// ---------------------------------------------------------------------------
// Graph ops

// out(b,i,j) = q(b,i) .* k(b,j) * scale
template <typename S>
Var pair_product(Tape<S> &t, Var q, Var k, int n, S scale) {
  Var y = t.op({q, k});
  const auto &Q = t.value(q);
  const auto &K = t.value(k);
  const Eigen::Index d = Q.cols();
  const Eigen::Index B = Q.rows() / n;
  auto &out = t.mutable_value(y);
  out.resize(B * n * n, d);
  for (Eigen::Index b = 0; b < B; ++b)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        out.row((b * n + i) * n + j) =
            Q.row(b * n + i).cwiseProduct(K.row(b * n + j)) * scale;
  t.set_backward(y, [&t, q, k, y, n, scale] {
    const auto &g = t.grad(y);
    const auto &Q = t.value(q);
    const auto &K = t.value(k);
    const Eigen::Index B = Q.rows() / n;
    const bool gq = t.needs_grad(q), gk = t.needs_grad(k);
    for (Eigen::Index b = 0; b < B; ++b)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          const auto grow = g.row((b * n + i) * n + j);
          if (gq)
            t.grad_buffer(q).row(b * n + i) +=
                grow.cwiseProduct(K.row(b * n + j)) * scale;
          if (gk)
            t.grad_buffer(k).row(b * n + j) +=
                grow.cwiseProduct(Q.row(b * n + i)) * scale;
        }
  });
  return y;
}

// Sums each contiguous block of cols/heads columns: (rows x d) -> (rows x H).
template <typename S>
Var head_sum(Tape<S> &t, Var z, int heads) {
  Var y = t.op({z});
  const auto &Z = t.value(z);
  const Eigen::Index dh = Z.cols() / heads;
  auto &out = t.mutable_value(y);
  out.resize(Z.rows(), heads);
  for (int h = 0; h < heads; ++h)
    out.col(h) = Z.middleCols(h * dh, dh).rowwise().sum();
  t.set_backward(y, [&t, z, y, heads] {
    if (!t.needs_grad(z)) return;
    auto &gz = t.grad_buffer(z);
    const auto &g = t.grad(y);
    const Eigen::Index dh = gz.cols() / heads;
    for (int h = 0; h < heads; ++h)
      gz.middleCols(h * dh, dh).colwise() += g.col(h);
  });
  return y;
}

// Softmax over j within each (b, i) block of n consecutive pair rows,
// independently per column.
template <typename S>
Var pair_softmax(Tape<S> &t, Var s, int n) {
  Var y = t.op({s});
  const auto &X = t.value(s);
  auto &out = t.mutable_value(y);
  out.resize(X.rows(), X.cols());
  const Eigen::Index blocks = X.rows() / n;
  for (Eigen::Index blk = 0; blk < blocks; ++blk) {
    const auto in = X.middleRows(blk * n, n);
    auto o = out.middleRows(blk * n, n);
    const Eigen::Matrix<S, 1, Eigen::Dynamic> mx = in.colwise().maxCoeff();
    o = (in.rowwise() - mx).array().exp().matrix();
    const Eigen::Matrix<S, 1, Eigen::Dynamic> inv =
        o.colwise().sum().cwiseInverse();
    o.array().rowwise() *= inv.array();
  }
  t.set_backward(y, [&t, s, y, n] {
    if (!t.needs_grad(s)) return;
    const auto &A = t.value(y);
    const auto &g = t.grad(y);
    auto &gs = t.grad_buffer(s);
    const Eigen::Index blocks = A.rows() / n;
    for (Eigen::Index blk = 0; blk < blocks; ++blk) {
      const auto a = A.middleRows(blk * n, n);
      const auto ga = g.middleRows(blk * n, n);
      const Eigen::Matrix<S, 1, Eigen::Dynamic> dot =
          a.cwiseProduct(ga).colwise().sum();
      gs.middleRows(blk * n, n).array() +=
          a.array() * (ga.rowwise() - dot).array();
    }
  });
  return y;
}

// out(b,i)[head h] = sum_j a(b,i,j)[h] * v(b,j)[head h]
template <typename S>
Var attend(Tape<S> &t, Var a, Var v, int n) {
  Var y = t.op({a, v});
  const auto &A = t.value(a);
  const auto &V = t.value(v);
  const Eigen::Index heads = A.cols();
  const Eigen::Index dh = V.cols() / heads;
  const Eigen::Index B = V.rows() / n;
  auto &out = t.mutable_value(y);
  out.setZero(V.rows(), V.cols());
  for (Eigen::Index b = 0; b < B; ++b)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const Eigen::Index pr = (b * n + i) * n + j;
        for (Eigen::Index h = 0; h < heads; ++h)
          out.row(b * n + i).segment(h * dh, dh) +=
              A(pr, h) * V.row(b * n + j).segment(h * dh, dh);
      }
  t.set_backward(y, [&t, a, v, y, n] {
    const auto &A = t.value(a);
    const auto &V = t.value(v);
    const auto &g = t.grad(y);
    const Eigen::Index heads = A.cols();
    const Eigen::Index dh = V.cols() / heads;
    const Eigen::Index B = V.rows() / n;
    const bool ga = t.needs_grad(a), gv = t.needs_grad(v);
    for (Eigen::Index b = 0; b < B; ++b)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          const Eigen::Index pr = (b * n + i) * n + j;
          for (Eigen::Index h = 0; h < heads; ++h) {
            const auto gseg = g.row(b * n + i).segment(h * dh, dh);
            if (ga)
              t.grad_buffer(a)(pr, h) +=
                  gseg.dot(V.row(b * n + j).segment(h * dh, dh));
            if (gv)
              t.grad_buffer(v).row(b * n + j).segment(h * dh, dh) +=
                  A(pr, h) * gseg;
          }
        }
  });
  return y;
}

// Row k of the output is row k / times of the input.
template <typename S>
Var repeat_rows(Tape<S> &t, Var a, int times) {
  Var y = t.op({a});
  const auto &X = t.value(a);
  auto &out = t.mutable_value(y);
  out.resize(X.rows() * times, X.cols());
  for (Eigen::Index r = 0; r < X.rows(); ++r)
    out.middleRows(r * times, times).rowwise() = X.row(r);
  t.set_backward(y, [&t, a, y, times] {
    if (!t.needs_grad(a)) return;
    auto &ga = t.grad_buffer(a);
    const auto &g = t.grad(y);
    for (Eigen::Index r = 0; r < ga.rows(); ++r)
      ga.row(r) += g.middleRows(r * times, times).colwise().sum();
  });
  return y;
}

// Mean over consecutive groups of `size` rows.
template <typename S>
Var group_mean(Tape<S> &t, Var a, int size) {
  Var y = t.op({a});
  const auto &X = t.value(a);
  const Eigen::Index groups = X.rows() / size;
  auto &out = t.mutable_value(y);
  out.resize(groups, X.cols());
  for (Eigen::Index r = 0; r < groups; ++r)
    out.row(r) = X.middleRows(r * size, size).colwise().mean();
  t.set_backward(y, [&t, a, y, size] {
    if (!t.needs_grad(a)) return;
    auto &ga = t.grad_buffer(a);
    const auto &g = t.grad(y);
    const S inv = S(1) / S(size);
    for (Eigen::Index r = 0; r < g.rows(); ++r)
      ga.middleRows(r * size, size).rowwise() += g.row(r) * inv;
  });
  return y;
}

// out(b,i,j) = (e(b,i,j) + e(b,j,i)) / 2
template <typename S>
Var symmetrize_pairs(Tape<S> &t, Var e, int n) {
  Var y = t.op({e});
  const auto &E = t.value(e);
  const Eigen::Index B = E.rows() / (n * n);
  auto &out = t.mutable_value(y);
  out.resize(E.rows(), E.cols());
  for (Eigen::Index b = 0; b < B; ++b)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        out.row((b * n + i) * n + j) =
            (E.row((b * n + i) * n + j) + E.row((b * n + j) * n + i)) * S(0.5);
  t.set_backward(y, [&t, e, y, n] {
    if (!t.needs_grad(e)) return;
    auto &ge = t.grad_buffer(e);
    const auto &g = t.grad(y);
    const Eigen::Index B = g.rows() / (n * n);
    for (Eigen::Index b = 0; b < B; ++b)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          ge.row((b * n + i) * n + j) +=
              (g.row((b * n + i) * n + j) + g.row((b * n + j) * n + i)) *
              S(0.5);
  });
  return y;
}

// Mean cross-entropy over unordered pairs i < j of every graph; targets hold
// one class per pair row (b, i, j). Output is 1 x 1.
template <typename S>
Var pair_cross_entropy(Tape<S> &t, Var logits, std::span<const std::uint8_t> targets,
                       int n) {
  Var y = t.op({logits});
  const auto &L = t.value(logits);
  const Eigen::Index B = L.rows() / (n * n);
  const Eigen::Index K = L.cols();
  if (static_cast<Eigen::Index>(targets.size()) != L.rows())
    throw ShapeMismatch("target count does not match logits");
  auto &probs = t.aux(y);
  probs.setZero(L.rows(), K);
  const double pairs = static_cast<double>(B) * n * (n - 1) / 2.0;
  double total = 0.0;
  for (Eigen::Index b = 0; b < B; ++b)
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) {
        const Eigen::Index r = (b * n + i) * n + j;
        const S mx = L.row(r).maxCoeff();
        const auto ex = (L.row(r).array() - mx).exp();
        const S z = ex.sum();
        probs.row(r) = ex / z;
        total += static_cast<double>(mx + std::log(z) - L(r, targets[r]));
      }
  auto &out = t.mutable_value(y);
  out.resize(1, 1);
  out(0, 0) = pairs > 0 ? static_cast<S>(total / pairs) : S(0);
  t.set_backward(y, [&t, logits, y, n, targets, pairs] {
    if (!t.needs_grad(logits) || pairs == 0) return;
    const S g = t.grad(y)(0, 0) / static_cast<S>(pairs);
    const auto &P = t.aux(y);
    auto &gl = t.grad_buffer(logits);
    const Eigen::Index B = P.rows() / (n * n);
    for (Eigen::Index b = 0; b < B; ++b)
      for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
          const Eigen::Index r = (b * n + i) * n + j;
          gl.row(r) += P.row(r) * g;
          gl(r, targets[r]) -= g;
        }
  });
  return y;
}

}  // namespace dise::ad
