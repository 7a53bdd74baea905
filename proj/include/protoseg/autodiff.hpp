#pragma once

// Reverse-mode automatic differentiation over dense Eigen matrices.
//
// A Tape owns a growing list of nodes; Var is a cheap handle (tape pointer +
// index). Free functions build new nodes from existing ones and register a
// backward closure that scatters the node's gradient into its parents.
// Gradients flow by walking the tape in reverse creation order, so a node's
// gradient is complete before its own closure runs.
//
// Everything is a 2-D matrix: vectors are D x 1, scalars 1 x 1. Spatial
// tensors are channels x (h*w) with row-major pixel order; spatial ops take
// (h, w) as arguments. A trailing `batch` argument means the columns are
// `batch` consecutive blocks of h*w pixels.

#include <cmath>
#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "protoseg/common.hpp"

namespace protoseg {

template <typename S>
class Tape;

template <typename S>
class Var {
 public:
  Var() = default;

  const Mat<S>& value() const;
  const Mat<S>& grad() const;
  bool needs_grad() const;
  int rows() const { return static_cast<int>(value().rows()); }
  int cols() const { return static_cast<int>(value().cols()); }
  bool valid() const { return tape_ != nullptr; }

  Tape<S>& tape() const { return *tape_; }
  std::size_t index() const { return idx_; }

 private:
  friend class Tape<S>;
  Var(Tape<S>* t, std::size_t i) : tape_(t), idx_(i) {}
  Tape<S>* tape_ = nullptr;
  std::size_t idx_ = 0;
};

template <typename S>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat<S>&)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<S> leaf(Mat<S> value, bool needs_grad) {
    return emplace(std::move(value), needs_grad && grad_enabled_, Backward());
  }
  Var<S> constant(Mat<S> value) { return leaf(std::move(value), false); }
  Var<S> scalar(S v) {
    Mat<S> m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }

  // Op plumbing: creates the result node; `back` receives the result's
  // gradient once it is fully accumulated.
  Var<S> make(Mat<S> value, bool needs_grad, Backward back) {
    return emplace(std::move(value), needs_grad && grad_enabled_,
                   std::move(back));
  }

  const Mat<S>& value(std::size_t idx) const { return nodes_[idx].value; }
  const Mat<S>& grad(std::size_t idx) const { return nodes_[idx].grad; }
  bool needs_grad(std::size_t idx) const { return nodes_[idx].needs_grad; }

  template <typename Expr>
  void accumulate(std::size_t idx, const Expr& g) {
    Node& n = nodes_[idx];
    if (n.needs_grad) n.grad += g;
  }

  // Seeds `root` (a 1x1 scalar) with gradient one and propagates backward
  // through every node created so far.
  void backward(Var<S> root) {
    require(grad_enabled_, "Tape::backward: gradients are disabled");
    require(root.rows() == 1 && root.cols() == 1,
            "Tape::backward: root must be a scalar");
    require(&root.tape() == this, "Tape::backward: foreign variable");
    Node& seed = nodes_[root.index()];
    if (!seed.needs_grad) return;  // constant loss: nothing to do
    seed.grad(0, 0) = S(1);
    for (std::size_t i = root.index() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.needs_grad && n.back) n.back(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<S> value;
    Mat<S> grad;
    Backward back;
    bool needs_grad = false;
  };

  Var<S> emplace(Mat<S> value, bool needs_grad, Backward back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.back = std::move(back);
    if (needs_grad) n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
    nodes_.push_back(std::move(n));
    return Var<S>(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  bool grad_enabled_;
};

template <typename S>
const Mat<S>& Var<S>::value() const {
  return tape_->value(idx_);
}
template <typename S>
const Mat<S>& Var<S>::grad() const {
  return tape_->grad(idx_);
}
template <typename S>
bool Var<S>::needs_grad() const {
  return tape_->needs_grad(idx_);
}

namespace detail {

template <typename S>
Tape<S>& same_tape(Var<S> a, Var<S> b) {
  require(&a.tape() == &b.tape(), "autodiff: operands live on different tapes");
  return a.tape();
}

template <typename S>
void require_same_shape(Var<S> a, Var<S> b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(),
          std::string(op) + ": shape mismatch");
}

}  // namespace detail

// --- arithmetic -------------------------------------------------------------

template <typename S>
Var<S> operator+(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "operator+");
  Mat<S> out = a.value() + b.value();
  const bool ng = a.needs_grad() || b.needs_grad();
  if (!t.grad_enabled() || !ng) return t.constant(std::move(out));
  const std::size_t ia = a.index(), ib = b.index();
  return t.make(std::move(out), true,
                [ia, ib](Tape<S>& t, const Mat<S>& g) {
                  t.accumulate(ia, g);
                  t.accumulate(ib, g);
                });
}

template <typename S>
Var<S> operator-(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "operator-");
  Mat<S> out = a.value() - b.value();
  const bool ng = a.needs_grad() || b.needs_grad();
  if (!t.grad_enabled() || !ng) return t.constant(std::move(out));
  const std::size_t ia = a.index(), ib = b.index();
  return t.make(std::move(out), true,
                [ia, ib](Tape<S>& t, const Mat<S>& g) {
                  t.accumulate(ia, g);
                  t.accumulate(ib, -g);
                });
}

template <typename S>
Var<S> cwise_mul(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "cwise_mul");
  Mat<S> out = a.value().cwiseProduct(b.value());
  const bool ng = a.needs_grad() || b.needs_grad();
  if (!t.grad_enabled() || !ng) return t.constant(std::move(out));
  const std::size_t ia = a.index(), ib = b.index();
  return t.make(std::move(out), true, [ia, ib](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

template <typename S>
Var<S> cwise_div(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "cwise_div");
  Mat<S> out = a.value().cwiseQuotient(b.value());
  const bool ng = a.needs_grad() || b.needs_grad();
  if (!t.grad_enabled() || !ng) return t.constant(std::move(out));
  const std::size_t ia = a.index(), ib = b.index();
  const std::size_t io = t.size();  // result node index == next slot
  return t.make(std::move(out), true,
                [ia, ib, io](Tape<S>& t, const Mat<S>& g) {
                  t.accumulate(ia, g.cwiseQuotient(t.value(ib)));
                  t.accumulate(
                      ib, -g.cwiseProduct(t.value(io)).cwiseQuotient(t.value(ib)));
                });
}

template <typename S>
Var<S> scale(Var<S> a, S k) {
  Tape<S>& t = a.tape();
  Mat<S> out = a.value() * k;
  if (!t.grad_enabled() || !a.needs_grad()) return t.constant(std::move(out));
  const std::size_t ia = a.index();
  return t.make(std::move(out), true, [ia, k](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, g * k);
  });
}

template <typename S>
Var<S> operator*(S k, Var<S> a) {
  return scale(a, k);
}

template <typename S>
Var<S> add_scalar(Var<S> a, S k) {
  Tape<S>& t = a.tape();
  Mat<S> out = (a.value().array() + k).matrix();
  if (!t.grad_enabled() || !a.needs_grad()) return t.constant(std::move(out));
  const std::size_t ia = a.index();
  return t.make(std::move(out), true, [ia](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, g);
  });
}

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b);
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Mat<S> out = a.value() * b.value();
  const bool ng = a.needs_grad() || b.needs_grad();
  if (!t.grad_enabled() || !ng) return t.constant(std::move(out));
  const std::size_t ia = a.index(), ib = b.index();
  return t.make(std::move(out), true, [ia, ib](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, g * t.value(ib).transpose());
    t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

template <typename S>
Var<S> transpose(Var<S> a) {
  Tape<S>& t = a.tape();
  Mat<S> out = a.value().transpose();
  if (!t.grad_enabled() || !a.needs_grad()) return t.constant(std::move(out));
  const std::size_t ia = a.index();
  return t.make(std::move(out), true, [ia](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, g.transpose());
  });
}

// Adds column vector `bias` (R x 1) to every column of `a` (R x C).
template <typename S>
Var<S> add_col_broadcast(Var<S> a, Var<S> bias) {
  Tape<S>& t = detail::same_tape(a, bias);
  require(bias.cols() == 1 && bias.rows() == a.rows(),
          "add_col_broadcast: bias must be R x 1");
  Mat<S> out = a.value().colwise() + Vec<S>(bias.value());
  const bool ng = a.needs_grad() || bias.needs_grad();
  if (!t.grad_enabled() || !ng) return t.constant(std::move(out));
  const std::size_t ia = a.index(), ib = bias.index();
  return t.make(std::move(out), true, [ia, ib](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g.rowwise().sum());
  });
}

// Scales column j of `a` (R x C) by w(j); `w` is 1 x C.
template <typename S>
Var<S> scale_cols(Var<S> a, Var<S> w) {
  Tape<S>& t = detail::same_tape(a, w);
  require(w.rows() == 1 && w.cols() == a.cols(),
          "scale_cols: weights must be 1 x C");
  Mat<S> out =
      (a.value().array().rowwise() * w.value().row(0).array()).matrix();
  const bool ng = a.needs_grad() || w.needs_grad();
  if (!t.grad_enabled() || !ng) return t.constant(std::move(out));
  const std::size_t ia = a.index(), iw = w.index();
  return t.make(std::move(out), true, [ia, iw](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(
        ia, (g.array().rowwise() * t.value(iw).row(0).array()).matrix());
    t.accumulate(iw,
                 g.cwiseProduct(t.value(ia)).colwise().sum());
  });
}

// --- reductions and reshapes ------------------------------------------------

template <typename S>
Var<S> sum(Var<S> a) {
  Tape<S>& t = a.tape();
  Mat<S> out(1, 1);
  out(0, 0) = a.value().sum();
  if (!t.grad_enabled() || !a.needs_grad()) return t.constant(std::move(out));
  const std::size_t ia = a.index();
  const int r = a.rows(), c = a.cols();
  return t.make(std::move(out), true, [ia, r, c](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, Mat<S>::Constant(r, c, g(0, 0)));
  });
}

template <typename S>
Var<S> mean_cols(Var<S> a) {
  Tape<S>& t = a.tape();
  const S inv = S(1) / S(a.cols());
  Mat<S> out = a.value().rowwise().sum() * inv;
  if (!t.grad_enabled() || !a.needs_grad()) return t.constant(std::move(out));
  const std::size_t ia = a.index();
  const int c = a.cols();
  return t.make(std::move(out), true, [ia, c, inv](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, (g * inv).replicate(1, c));
  });
}

template <typename S>
Var<S> concat_rows(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b);
  require(a.cols() == b.cols(), "concat_rows: column counts differ");
  Mat<S> out(a.rows() + b.rows(), a.cols());
  out.topRows(a.rows()) = a.value();
  out.bottomRows(b.rows()) = b.value();
  const bool ng = a.needs_grad() || b.needs_grad();
  if (!t.grad_enabled() || !ng) return t.constant(std::move(out));
  const std::size_t ia = a.index(), ib = b.index();
  const int ra = a.rows(), rb = b.rows();
  return t.make(std::move(out), true,
                [ia, ib, ra, rb](Tape<S>& t, const Mat<S>& g) {
                  t.accumulate(ia, g.topRows(ra));
                  t.accumulate(ib, g.bottomRows(rb));
                });
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  require(!parts.empty(), "concat_cols: empty input");
  Tape<S>& t = parts.front().tape();
  const int r = parts.front().rows();
  int c = 0;
  bool ng = false;
  for (const Var<S>& p : parts) {
    require(&p.tape() == &t, "concat_cols: mixed tapes");
    require(p.rows() == r, "concat_cols: row counts differ");
    c += p.cols();
    ng = ng || p.needs_grad();
  }
  Mat<S> out(r, c);
  int at = 0;
  std::vector<std::pair<std::size_t, std::pair<int, int>>> spans;
  spans.reserve(parts.size());
  for (const Var<S>& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    spans.push_back({p.index(), {at, p.cols()}});
    at += p.cols();
  }
  if (!t.grad_enabled() || !ng) return t.constant(std::move(out));
  return t.make(std::move(out), true,
                [spans](Tape<S>& t, const Mat<S>& g) {
                  for (const auto& s : spans)
                    t.accumulate(s.first, g.middleCols(s.second.first,
                                                       s.second.second));
                });
}

template <typename S>
Var<S> slice_rows(Var<S> a, int start, int count) {
  Tape<S>& t = a.tape();
  require(start >= 0 && count >= 0 && start + count <= a.rows(),
          "slice_rows: range out of bounds");
  Mat<S> out = a.value().middleRows(start, count);
  if (!t.grad_enabled() || !a.needs_grad()) return t.constant(std::move(out));
  const std::size_t ia = a.index();
  const int r = a.rows(), c = a.cols();
  return t.make(std::move(out), true,
                [ia, start, count, r, c](Tape<S>& t, const Mat<S>& g) {
                  Mat<S> full = Mat<S>::Zero(r, c);
                  full.middleRows(start, count) = g;
                  t.accumulate(ia, full);
                });
}

// D x 1 -> D x n, every column a copy.
template <typename S>
Var<S> tile_cols(Var<S> a, int n) {
  Tape<S>& t = a.tape();
  require(a.cols() == 1, "tile_cols: input must be a column vector");
  Mat<S> out = a.value().replicate(1, n);
  if (!t.grad_enabled() || !a.needs_grad()) return t.constant(std::move(out));
  const std::size_t ia = a.index();
  return t.make(std::move(out), true, [ia](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, g.rowwise().sum());
  });
}

// R x C -> R x (C*times): [M M ... M].
template <typename S>
Var<S> repeat_cols(Var<S> a, int times) {
  Tape<S>& t = a.tape();
  require(times >= 1, "repeat_cols: times must be >= 1");
  if (times == 1) return a;
  Mat<S> out = a.value().replicate(1, times);
  if (!t.grad_enabled() || !a.needs_grad()) return t.constant(std::move(out));
  const std::size_t ia = a.index();
  const int c = a.cols();
  return t.make(std::move(out), true,
                [ia, c, times](Tape<S>& t, const Mat<S>& g) {
                  Mat<S> acc = g.leftCols(c);
                  for (int b = 1; b < times; ++b) acc += g.middleCols(b * c, c);
                  t.accumulate(ia, acc);
                });
}

// --- nonlinearities ---------------------------------------------------------

template <typename S>
Var<S> vexp(Var<S> a) {
  Tape<S>& t = a.tape();
  Mat<S> out = a.value().array().exp().matrix();
  if (!t.grad_enabled() || !a.needs_grad()) return t.constant(std::move(out));
  const std::size_t ia = a.index();
  const std::size_t io = t.size();
  return t.make(std::move(out), true, [ia, io](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, g.cwiseProduct(t.value(io)));
  });
}

template <typename S>
Var<S> vsqrt(Var<S> a) {
  Tape<S>& t = a.tape();
  Mat<S> out = a.value().array().sqrt().matrix();
  if (!t.grad_enabled() || !a.needs_grad()) return t.constant(std::move(out));
  const std::size_t ia = a.index();
  const std::size_t io = t.size();
  return t.make(std::move(out), true, [ia, io](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, (g.array() * S(0.5) / t.value(io).array()).matrix());
  });
}

template <typename S>
Var<S> sigmoid(Var<S> a) {
  Tape<S>& t = a.tape();
  Mat<S> out =
      (S(1) / (S(1) + (-a.value().array()).exp())).matrix();
  if (!t.grad_enabled() || !a.needs_grad()) return t.constant(std::move(out));
  const std::size_t ia = a.index();
  const std::size_t io = t.size();
  return t.make(std::move(out), true, [ia, io](Tape<S>& t, const Mat<S>& g) {
    const auto& s = t.value(io).array();
    t.accumulate(ia, (g.array() * s * (S(1) - s)).matrix());
  });
}

// Exact GELU, x * Phi(x). Smooth everywhere, which keeps finite-difference
// gradient checks tight.
template <typename S>
Var<S> gelu(Var<S> a) {
  Tape<S>& t = a.tape();
  Mat<S> out = a.value().unaryExpr([](S x) {
    return S(0.5) * x * (S(1) + S(std::erf(double(x) * 0.7071067811865475244)));
  });
  if (!t.grad_enabled() || !a.needs_grad()) return t.constant(std::move(out));
  const std::size_t ia = a.index();
  return t.make(std::move(out), true, [ia](Tape<S>& t, const Mat<S>& g) {
    Mat<S> d = t.value(ia).unaryExpr([](S x) {
      const double xd = double(x);
      const double phi = 0.5 * (1.0 + std::erf(xd * 0.7071067811865475244));
      const double pdf = 0.3989422804014326779 * std::exp(-0.5 * xd * xd);
      return S(phi + xd * pdf);
    });
    t.accumulate(ia, g.cwiseProduct(d));
  });
}

template <typename S>
Var<S> clamp(Var<S> a, S lo, S hi) {
  Tape<S>& t = a.tape();
  Mat<S> out = a.value().array().max(lo).min(hi).matrix();
  if (!t.grad_enabled() || !a.needs_grad()) return t.constant(std::move(out));
  const std::size_t ia = a.index();
  return t.make(std::move(out), true, [ia, lo, hi](Tape<S>& t, const Mat<S>& g) {
    const auto& x = t.value(ia).array();
    auto inside = (x >= lo && x <= hi).template cast<S>();
    t.accumulate(ia, (g.array() * inside).matrix());
  });
}

// Softmax over each column independently.
template <typename S>
Var<S> softmax_cols(Var<S> a) {
  Tape<S>& t = a.tape();
  Mat<S> out(a.rows(), a.cols());
  for (int j = 0; j < out.cols(); ++j) {
    Vec<S> col = a.value().col(j);
    col.array() -= col.maxCoeff();
    col = col.array().exp().matrix();
    out.col(j) = col / col.sum();
  }
  if (!t.grad_enabled() || !a.needs_grad()) return t.constant(std::move(out));
  const std::size_t ia = a.index();
  const std::size_t io = t.size();
  return t.make(std::move(out), true, [ia, io](Tape<S>& t, const Mat<S>& g) {
    const Mat<S>& s = t.value(io);
    Mat<S> dx(s.rows(), s.cols());
    for (int j = 0; j < s.cols(); ++j) {
      const S dot = s.col(j).dot(g.col(j));
      dx.col(j) = (s.col(j).array() * (g.col(j).array() - dot)).matrix();
    }
    t.accumulate(ia, dx);
  });
}

}  // namespace protoseg
