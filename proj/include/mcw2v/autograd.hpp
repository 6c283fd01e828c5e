#pragma once

// Tape-based reverse-mode differentiation over rank-2 tensors.
//
// A Graph records every primitive application as a node holding the forward
// value and a backward rule. backward() walks the tape once in reverse
// creation order, which is a reverse topological order because a node can
// only consume nodes created before it. Parameter nodes accumulate straight
// into Parameter::grad, so several backward passes over separate graphs sum
// their contributions (minibatch accumulation).

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "mcw2v/tensor.hpp"

namespace mcw2v::ag {

template <typename S>
class Graph;

template <typename S>
struct Var {
  Graph<S>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<S>& value() const { return graph->value(id); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

template <typename S>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) { nodes_.reserve(256); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  Var<S> constant(Tensor<S> value) {
    Node n;
    n.own = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  // References the parameter's storage without copying. When trainable is
  // false the node behaves as a constant (stop-gradient).
  Var<S> param(Parameter<S>& p, bool trainable = true) {
    Node n;
    n.ext = &p.value;
    if (trainable && grad_enabled_) {
      n.requires_grad = true;
      n.param_grad = &p.grad;
    }
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var<S> record(Tensor<S> value, std::initializer_list<Var<S>> inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& v : inputs) needs = needs || requires_grad(v);
    return push(std::move(value), needs, std::move(fn));
  }

  Var<S> record(Tensor<S> value, const std::vector<Var<S>>& inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& v : inputs) needs = needs || requires_grad(v);
    return push(std::move(value), needs, std::move(fn));
  }

  const Tensor<S>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.ext ? *n.ext : n.own;
  }

  bool requires_grad(Var<S> v) const { return nodes_[v.id].requires_grad; }

  // Upstream gradient of a node during backward.
  const Tensor<S>& grad(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.param_grad ? *n.param_grad : n.grad;
  }

  // Gradient accumulator of a node, allocated on first use.
  Tensor<S>& grad_acc(std::size_t id) {
    Node& n = nodes_[id];
    if (n.param_grad) return *n.param_grad;
    if (!n.has_grad) {
      n.grad = Tensor<S>(value(id).shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  void backward(Var<S> loss) {
    if (loss.graph != this) throw Error(Errc::ShapeMismatch, "loss belongs to another graph");
    if (value(loss.id).size() != 1) {
      throw Error(Errc::NotScalar, "backward needs a scalar, got " + shape_str(value(loss.id).shape()));
    }
    if (!nodes_[loss.id].requires_grad) return;
    grad_acc(loss.id)[0] += S(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.fn && n.has_grad) n.fn(*this, i);
    }
  }

 private:
  struct Node {
    Tensor<S> own;
    const Tensor<S>* ext = nullptr;
    Tensor<S> grad;
    Tensor<S>* param_grad = nullptr;
    BackwardFn fn;
    bool requires_grad = false;
    bool has_grad = false;
  };

  Var<S> push(Tensor<S> value, bool needs, BackwardFn fn) {
    Node n;
    n.own = std::move(value);
    if (needs && grad_enabled_) {
      n.requires_grad = true;
      n.fn = std::move(fn);
    }
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool grad_enabled_;
};

namespace detail {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
Eigen::Map<RowMat<S>> mat(Tensor<S>& t) {
  return Eigen::Map<RowMat<S>>(t.data(), static_cast<Eigen::Index>(t.rows()),
                               static_cast<Eigen::Index>(t.cols()));
}

template <typename S>
Eigen::Map<const RowMat<S>> mat(const Tensor<S>& t) {
  return Eigen::Map<const RowMat<S>>(t.data(), static_cast<Eigen::Index>(t.rows()),
                                     static_cast<Eigen::Index>(t.cols()));
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw Error(Errc::ShapeMismatch, what);
}

inline void require_rank2(const Shape& s, const char* op) {
  require(s.size() == 2, std::string(op) + ": expected a matrix, got " + shape_str(s));
}

template <typename S>
S stable_sigmoid(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

// Elementwise op whose derivative is expressed through input and output.
template <typename S, typename F, typename D>
Var<S> unary(Var<S> x, F f, D dfdx) {
  Graph<S>& g = *x.graph;
  const Tensor<S>& xv = x.value();
  Tensor<S> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const std::size_t xi = x.id;
  return g.record(std::move(out), {x}, [xi, dfdx](Graph<S>& gr, std::size_t self) {
    const Tensor<S>& go = gr.grad(self);
    const Tensor<S>& xv = gr.value(xi);
    const Tensor<S>& yv = gr.value(self);
    Tensor<S>& gx = gr.grad_acc(xi);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * dfdx(xv[i], yv[i]);
  });
}

// Broadcast index of the right operand: same shape, a row [1 x C], a column
// [R x 1] or a scalar [1 x 1].
struct Broadcast {
  std::size_t rows, cols, brows, bcols;
  std::size_t index(std::size_t r, std::size_t c) const {
    return (brows == 1 ? 0 : r) * bcols + (bcols == 1 ? 0 : c);
  }
};

template <typename S>
Broadcast broadcast(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  require_rank2(a.shape(), op);
  require_rank2(b.shape(), op);
  const bool ok = (b.rows() == a.rows() || b.rows() == 1) && (b.cols() == a.cols() || b.cols() == 1);
  require(ok, std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                  shape_str(a.shape()));
  return {a.rows(), a.cols(), b.rows(), b.cols()};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  const Tensor<S>& av = a.value();
  const Tensor<S>& bv = b.value();
  detail::require_rank2(av.shape(), "matmul");
  detail::require_rank2(bv.shape(), "matmul");
  detail::require(av.cols() == bv.rows(),
                  "matmul: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  Tensor<S> out({av.rows(), bv.cols()});
  detail::mat(out).noalias() = detail::mat(av) * detail::mat(bv);
  const std::size_t ai = a.id, bi = b.id;
  return a.graph->record(std::move(out), {a, b}, [ai, bi](Graph<S>& g, std::size_t self) {
    const auto go = detail::mat(g.grad(self));
    if (g.requires_grad({&g, ai})) {
      auto ga = detail::mat(g.grad_acc(ai));
      ga.noalias() += go * detail::mat(g.value(bi)).transpose();
    }
    if (g.requires_grad({&g, bi})) {
      auto gb = detail::mat(g.grad_acc(bi));
      gb.noalias() += detail::mat(g.value(ai)).transpose() * go;
    }
  });
}

template <typename S>
Var<S> transpose(Var<S> x) {
  const Tensor<S>& xv = x.value();
  detail::require_rank2(xv.shape(), "transpose");
  Tensor<S> out({xv.cols(), xv.rows()});
  detail::mat(out) = detail::mat(xv).transpose();
  const std::size_t xi = x.id;
  return x.graph->record(std::move(out), {x}, [xi](Graph<S>& g, std::size_t self) {
    detail::mat(g.grad_acc(xi)) += detail::mat(g.grad(self)).transpose();
  });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic with right-operand broadcasting

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  const Tensor<S>& av = a.value();
  const Tensor<S>& bv = b.value();
  const auto bc = detail::broadcast(av, bv, "add");
  Tensor<S> out(av.shape());
  for (std::size_t r = 0; r < bc.rows; ++r)
    for (std::size_t c = 0; c < bc.cols; ++c) out(r, c) = av(r, c) + bv[bc.index(r, c)];
  const std::size_t ai = a.id, bi = b.id;
  return a.graph->record(std::move(out), {a, b}, [ai, bi, bc](Graph<S>& g, std::size_t self) {
    const Tensor<S>& go = g.grad(self);
    if (g.requires_grad({&g, ai})) {
      Tensor<S>& ga = g.grad_acc(ai);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (g.requires_grad({&g, bi})) {
      Tensor<S>& gb = g.grad_acc(bi);
      for (std::size_t r = 0; r < bc.rows; ++r)
        for (std::size_t c = 0; c < bc.cols; ++c) gb[bc.index(r, c)] += go[r * bc.cols + c];
    }
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  const Tensor<S>& av = a.value();
  const Tensor<S>& bv = b.value();
  const auto bc = detail::broadcast(av, bv, "sub");
  Tensor<S> out(av.shape());
  for (std::size_t r = 0; r < bc.rows; ++r)
    for (std::size_t c = 0; c < bc.cols; ++c) out(r, c) = av(r, c) - bv[bc.index(r, c)];
  const std::size_t ai = a.id, bi = b.id;
  return a.graph->record(std::move(out), {a, b}, [ai, bi, bc](Graph<S>& g, std::size_t self) {
    const Tensor<S>& go = g.grad(self);
    if (g.requires_grad({&g, ai})) {
      Tensor<S>& ga = g.grad_acc(ai);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (g.requires_grad({&g, bi})) {
      Tensor<S>& gb = g.grad_acc(bi);
      for (std::size_t r = 0; r < bc.rows; ++r)
        for (std::size_t c = 0; c < bc.cols; ++c) gb[bc.index(r, c)] -= go[r * bc.cols + c];
    }
  });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  const Tensor<S>& av = a.value();
  const Tensor<S>& bv = b.value();
  const auto bc = detail::broadcast(av, bv, "mul");
  Tensor<S> out(av.shape());
  for (std::size_t r = 0; r < bc.rows; ++r)
    for (std::size_t c = 0; c < bc.cols; ++c) out(r, c) = av(r, c) * bv[bc.index(r, c)];
  const std::size_t ai = a.id, bi = b.id;
  return a.graph->record(std::move(out), {a, b}, [ai, bi, bc](Graph<S>& g, std::size_t self) {
    const Tensor<S>& go = g.grad(self);
    const Tensor<S>& av = g.value(ai);
    const Tensor<S>& bv = g.value(bi);
    if (g.requires_grad({&g, ai})) {
      Tensor<S>& ga = g.grad_acc(ai);
      for (std::size_t r = 0; r < bc.rows; ++r)
        for (std::size_t c = 0; c < bc.cols; ++c)
          ga[r * bc.cols + c] += go[r * bc.cols + c] * bv[bc.index(r, c)];
    }
    if (g.requires_grad({&g, bi})) {
      Tensor<S>& gb = g.grad_acc(bi);
      for (std::size_t r = 0; r < bc.rows; ++r)
        for (std::size_t c = 0; c < bc.cols; ++c)
          gb[bc.index(r, c)] += go[r * bc.cols + c] * av[r * bc.cols + c];
    }
  });
}

template <typename S>
Var<S> scale(Var<S> x, S factor) {
  return detail::unary<S>(
      x, [factor](S v) { return v * factor; }, [factor](S, S) { return factor; });
}

template <typename S>
Var<S> operator+(Var<S> a, Var<S> b) { return add(a, b); }
template <typename S>
Var<S> operator-(Var<S> a, Var<S> b) { return sub(a, b); }
template <typename S>
Var<S> operator*(Var<S> a, Var<S> b) { return mul(a, b); }
template <typename S>
Var<S> operator*(S factor, Var<S> x) { return scale(x, factor); }

// ---------------------------------------------------------------------------
// Activations

template <typename S>
Var<S> sigmoid(Var<S> x) {
  return detail::unary<S>(
      x, [](S v) { return detail::stable_sigmoid(v); }, [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Var<S> tanh(Var<S> x) {
  return detail::unary<S>(
      x, [](S v) { return std::tanh(v); }, [](S, S y) { return S(1) - y * y; });
}

template <typename S>
Var<S> relu(Var<S> x) {
  return detail::unary<S>(
      x, [](S v) { return v > S(0) ? v : S(0); }, [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

// x * sigmoid(x)
template <typename S>
Var<S> swish(Var<S> x) {
  return detail::unary<S>(
      x, [](S v) { return v * detail::stable_sigmoid(v); },
      [](S v, S) {
        const S s = detail::stable_sigmoid(v);
        return s * (S(1) + v * (S(1) - s));
      });
}

// Gated linear unit over the column axis: first half * sigmoid(second half).
template <typename S>
Var<S> glu(Var<S> x) {
  const Tensor<S>& xv = x.value();
  detail::require_rank2(xv.shape(), "glu");
  detail::require(xv.cols() % 2 == 0, "glu: odd column count " + shape_str(xv.shape()));
  const std::size_t rows = xv.rows(), half = xv.cols() / 2;
  Tensor<S> out({rows, half});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < half; ++c)
      out(r, c) = xv(r, c) * detail::stable_sigmoid(xv(r, c + half));
  const std::size_t xi = x.id;
  return x.graph->record(std::move(out), {x}, [xi, rows, half](Graph<S>& g, std::size_t self) {
    const Tensor<S>& go = g.grad(self);
    const Tensor<S>& xv = g.value(xi);
    Tensor<S>& gx = g.grad_acc(xi);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < half; ++c) {
        const S a = xv(r, c);
        const S s = detail::stable_sigmoid(xv(r, c + half));
        const S d = go(r, c);
        gx(r, c) += d * s;
        gx(r, c + half) += d * a * s * (S(1) - s);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    detail::require_rank2(p.value().shape(), "concat_cols");
    detail::require(p.rows() == rows, "concat_cols: row mismatch " + shape_str(p.value().shape()));
    offsets.push_back(cols);
    cols += p.cols();
  }
  Tensor<S> out({rows, cols});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor<S>& pv = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(pv.row(r).begin(), pv.row(r).end(), out.row(r).begin() + offsets[k]);
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id);
  return parts[0].graph->record(
      std::move(out), parts, [ids, offsets, rows](Graph<S>& g, std::size_t self) {
        const Tensor<S>& go = g.grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!g.requires_grad({&g, ids[k]})) continue;
          Tensor<S>& gp = g.grad_acc(ids[k]);
          const std::size_t w = gp.cols();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c) gp(r, c) += go(r, offsets[k] + c);
        }
      });
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    detail::require_rank2(p.value().shape(), "concat_rows");
    detail::require(p.cols() == cols, "concat_rows: column mismatch " + shape_str(p.value().shape()));
    offsets.push_back(rows);
    rows += p.rows();
  }
  Tensor<S> out({rows, cols});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor<S>& pv = parts[k].value();
    std::copy(pv.values().begin(), pv.values().end(), out.values().begin() + offsets[k] * cols);
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id);
  return parts[0].graph->record(std::move(out), parts, [ids, offsets, cols](Graph<S>& g, std::size_t self) {
    const Tensor<S>& go = g.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!g.requires_grad({&g, ids[k]})) continue;
      Tensor<S>& gp = g.grad_acc(ids[k]);
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += go[offsets[k] * cols + i];
    }
  });
}

// Columns [begin, end).
template <typename S>
Var<S> slice_cols(Var<S> x, std::size_t begin, std::size_t end) {
  const Tensor<S>& xv = x.value();
  detail::require_rank2(xv.shape(), "slice_cols");
  detail::require(begin < end && end <= xv.cols(), "slice_cols: bad range on " + shape_str(xv.shape()));
  const std::size_t rows = xv.rows(), w = end - begin;
  Tensor<S> out({rows, w});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < w; ++c) out(r, c) = xv(r, begin + c);
  const std::size_t xi = x.id;
  return x.graph->record(std::move(out), {x}, [xi, begin, rows, w](Graph<S>& g, std::size_t self) {
    const Tensor<S>& go = g.grad(self);
    Tensor<S>& gx = g.grad_acc(xi);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) gx(r, begin + c) += go(r, c);
  });
}

// Rows [begin, end).
template <typename S>
Var<S> slice_rows(Var<S> x, std::size_t begin, std::size_t end) {
  const Tensor<S>& xv = x.value();
  detail::require_rank2(xv.shape(), "slice_rows");
  detail::require(begin < end && end <= xv.rows(), "slice_rows: bad range on " + shape_str(xv.shape()));
  const std::size_t cols = xv.cols();
  Tensor<S> out({end - begin, cols});
  std::copy(xv.values().begin() + begin * cols, xv.values().begin() + end * cols, out.values().begin());
  const std::size_t xi = x.id;
  return x.graph->record(std::move(out), {x}, [xi, begin, cols](Graph<S>& g, std::size_t self) {
    const Tensor<S>& go = g.grad(self);
    Tensor<S>& gx = g.grad_acc(xi);
    for (std::size_t i = 0; i < go.size(); ++i) gx[begin * cols + i] += go[i];
  });
}

// Embedding lookup: out row i = table row indices[i]. Gradient scatters back.
template <typename S>
Var<S> gather_rows(Var<S> table, std::vector<std::size_t> indices) {
  const Tensor<S>& tv = table.value();
  detail::require_rank2(tv.shape(), "gather_rows");
  const std::size_t cols = tv.cols();
  Tensor<S> out({indices.size(), cols});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    detail::require(indices[i] < tv.rows(), "gather_rows: index " + std::to_string(indices[i]) +
                                                " outside " + shape_str(tv.shape()));
    std::copy(tv.row(indices[i]).begin(), tv.row(indices[i]).end(), out.row(i).begin());
  }
  const std::size_t ti = table.id;
  return table.graph->record(std::move(out), {table},
                             [ti, idx = std::move(indices), cols](Graph<S>& g, std::size_t self) {
                               const Tensor<S>& go = g.grad(self);
                               Tensor<S>& gt = g.grad_acc(ti);
                               for (std::size_t i = 0; i < idx.size(); ++i)
                                 for (std::size_t c = 0; c < cols; ++c) gt(idx[i], c) += go(i, c);
                             });
}

template <typename S>
Var<S> embedding(Var<S> table, std::vector<std::size_t> indices) {
  return gather_rows(table, std::move(indices));
}

// Builds the [n x n] matrix M(i, j) = v(0, i - j + n - 1) from a row vector of
// length 2n - 1 (relative-position bias).
template <typename S>
Var<S> toeplitz(Var<S> v, std::size_t n) {
  const Tensor<S>& vv = v.value();
  detail::require(vv.rows() == 1 && vv.cols() == 2 * n - 1,
                  "toeplitz: expected [1 x " + std::to_string(2 * n - 1) + "], got " + shape_str(vv.shape()));
  Tensor<S> out({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) = vv[i + n - 1 - j];
  const std::size_t vi = v.id;
  return v.graph->record(std::move(out), {v}, [vi, n](Graph<S>& g, std::size_t self) {
    const Tensor<S>& go = g.grad(self);
    Tensor<S>& gv = g.grad_acc(vi);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) gv[i + n - 1 - j] += go(i, j);
  });
}

// ---------------------------------------------------------------------------
// Reductions and normalizations

template <typename S>
Var<S> sum(Var<S> x) {
  const Tensor<S>& xv = x.value();
  S total = S(0);
  for (S v : xv.values()) total += v;
  const std::size_t xi = x.id;
  return x.graph->record(Tensor<S>::scalar(total), {x}, [xi](Graph<S>& g, std::size_t self) {
    const S d = g.grad(self)[0];
    Tensor<S>& gx = g.grad_acc(xi);
    for (auto& v : gx.values()) v += d;
  });
}

// Mean over axis 0 (-> [1 x C]) or axis 1 (-> [R x 1]).
template <typename S>
Var<S> mean(Var<S> x, int axis) {
  const Tensor<S>& xv = x.value();
  detail::require_rank2(xv.shape(), "mean");
  detail::require(axis == 0 || axis == 1, "mean: axis must be 0 or 1");
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor<S> out(axis == 0 ? Shape{1, cols} : Shape{rows, 1});
  const S inv = S(1) / static_cast<S>(axis == 0 ? rows : cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[axis == 0 ? c : r] += xv(r, c) * inv;
  const std::size_t xi = x.id;
  return x.graph->record(std::move(out), {x}, [xi, axis, rows, cols, inv](Graph<S>& g, std::size_t self) {
    const Tensor<S>& go = g.grad(self);
    Tensor<S>& gx = g.grad_acc(xi);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) gx(r, c) += go[axis == 0 ? c : r] * inv;
  });
}

// Row-wise log-sum-exp with max subtraction -> [R x 1].
template <typename S>
Var<S> logsumexp_rows(Var<S> x) {
  const Tensor<S>& xv = x.value();
  detail::require_rank2(xv.shape(), "logsumexp_rows");
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor<S> out({rows, 1});
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = xv.row(r);
    const S m = *std::max_element(row.begin(), row.end());
    S acc = S(0);
    for (S v : row) acc += std::exp(v - m);
    out[r] = m + std::log(acc);
  }
  const std::size_t xi = x.id;
  return x.graph->record(std::move(out), {x}, [xi, rows, cols](Graph<S>& g, std::size_t self) {
    const Tensor<S>& go = g.grad(self);
    const Tensor<S>& xv = g.value(xi);
    const Tensor<S>& yv = g.value(self);
    Tensor<S>& gx = g.grad_acc(xi);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) gx(r, c) += go[r] * std::exp(xv(r, c) - yv[r]);
  });
}

template <typename S>
Var<S> softmax_rows(Var<S> x) {
  const Tensor<S>& xv = x.value();
  detail::require_rank2(xv.shape(), "softmax_rows");
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor<S> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = xv.row(r);
    const S m = *std::max_element(row.begin(), row.end());
    S acc = S(0);
    for (std::size_t c = 0; c < cols; ++c) acc += (out(r, c) = std::exp(row[c] - m));
    for (std::size_t c = 0; c < cols; ++c) out(r, c) /= acc;
  }
  const std::size_t xi = x.id;
  return x.graph->record(std::move(out), {x}, [xi, rows, cols](Graph<S>& g, std::size_t self) {
    const Tensor<S>& go = g.grad(self);
    const Tensor<S>& y = g.value(self);
    Tensor<S>& gx = g.grad_acc(xi);
    for (std::size_t r = 0; r < rows; ++r) {
      S dot = S(0);
      for (std::size_t c = 0; c < cols; ++c) dot += go(r, c) * y(r, c);
      for (std::size_t c = 0; c < cols; ++c) gx(r, c) += y(r, c) * (go(r, c) - dot);
    }
  });
}

template <typename S>
Var<S> log_softmax_rows(Var<S> x) {
  const Tensor<S>& xv = x.value();
  detail::require_rank2(xv.shape(), "log_softmax_rows");
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor<S> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = xv.row(r);
    const S m = *std::max_element(row.begin(), row.end());
    S acc = S(0);
    for (S v : row) acc += std::exp(v - m);
    const S lse = m + std::log(acc);
    for (std::size_t c = 0; c < cols; ++c) out(r, c) = row[c] - lse;
  }
  const std::size_t xi = x.id;
  return x.graph->record(std::move(out), {x}, [xi, rows, cols](Graph<S>& g, std::size_t self) {
    const Tensor<S>& go = g.grad(self);
    const Tensor<S>& y = g.value(self);
    Tensor<S>& gx = g.grad_acc(xi);
    for (std::size_t r = 0; r < rows; ++r) {
      S total = S(0);
      for (std::size_t c = 0; c < cols; ++c) total += go(r, c);
      for (std::size_t c = 0; c < cols; ++c) gx(r, c) += go(r, c) - std::exp(y(r, c)) * total;
    }
  });
}

// Per-row normalization followed by the affine map gain * xhat + bias, with
// gain and bias given as [1 x C].
template <typename S>
Var<S> layer_norm(Var<S> x, Var<S> gain, Var<S> bias, S eps = S(1e-5)) {
  const Tensor<S>& xv = x.value();
  detail::require_rank2(xv.shape(), "layer_norm");
  const std::size_t rows = xv.rows(), cols = xv.cols();
  detail::require(gain.rows() == 1 && gain.cols() == cols && bias.rows() == 1 && bias.cols() == cols,
                  "layer_norm: affine parameters must be [1 x " + std::to_string(cols) + "]");
  const Tensor<S>& gv = gain.value();
  const Tensor<S>& bv = bias.value();
  Tensor<S> xhat(xv.shape());
  std::vector<S> inv_std(rows);
  Tensor<S> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    S mu = S(0);
    for (std::size_t c = 0; c < cols; ++c) mu += xv(r, c);
    mu /= static_cast<S>(cols);
    S var = S(0);
    for (std::size_t c = 0; c < cols; ++c) var += (xv(r, c) - mu) * (xv(r, c) - mu);
    var /= static_cast<S>(cols);
    inv_std[r] = S(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      xhat(r, c) = (xv(r, c) - mu) * inv_std[r];
      out(r, c) = xhat(r, c) * gv[c] + bv[c];
    }
  }
  const std::size_t xi = x.id, gi = gain.id, bi = bias.id;
  return x.graph->record(
      std::move(out), {x, gain, bias},
      [xi, gi, bi, rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<S>& g,
                                                                                    std::size_t self) {
        const Tensor<S>& go = g.grad(self);
        const Tensor<S>& gv = g.value(gi);
        if (g.requires_grad({&g, gi})) {
          Tensor<S>& gg = g.grad_acc(gi);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gg[c] += go(r, c) * xhat(r, c);
        }
        if (g.requires_grad({&g, bi})) {
          Tensor<S>& gb = g.grad_acc(bi);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gb[c] += go(r, c);
        }
        if (g.requires_grad({&g, xi})) {
          Tensor<S>& gx = g.grad_acc(xi);
          const S n = static_cast<S>(cols);
          for (std::size_t r = 0; r < rows; ++r) {
            S m1 = S(0), m2 = S(0);
            for (std::size_t c = 0; c < cols; ++c) {
              const S d = go(r, c) * gv[c];
              m1 += d;
              m2 += d * xhat(r, c);
            }
            m1 /= n;
            m2 /= n;
            for (std::size_t c = 0; c < cols; ++c)
              gx(r, c) += inv_std[r] * (go(r, c) * gv[c] - m1 - xhat(r, c) * m2);
          }
        }
      });
}

// Depthwise 1-D convolution along rows (time) with zero "same" padding:
// y(t, c) = bias(c) + sum_k w(k, c) * x(t + k - K/2, c). K must be odd.
template <typename S>
Var<S> depthwise_conv1d(Var<S> x, Var<S> weight, Var<S> bias) {
  const Tensor<S>& xv = x.value();
  const Tensor<S>& wv = weight.value();
  const Tensor<S>& bv = bias.value();
  detail::require_rank2(xv.shape(), "depthwise_conv1d");
  const std::size_t steps = xv.rows(), chans = xv.cols(), kernel = wv.rows();
  detail::require(wv.cols() == chans && kernel % 2 == 1,
                  "depthwise_conv1d: weight " + shape_str(wv.shape()) + " vs input " + shape_str(xv.shape()));
  detail::require(bv.rows() == 1 && bv.cols() == chans, "depthwise_conv1d: bias " + shape_str(bv.shape()));
  const auto half = static_cast<std::ptrdiff_t>(kernel / 2);
  const auto n = static_cast<std::ptrdiff_t>(steps);
  Tensor<S> out(xv.shape());
  for (std::ptrdiff_t t = 0; t < n; ++t) {
    for (std::size_t c = 0; c < chans; ++c) out(t, c) = bv[c];
    for (std::size_t k = 0; k < kernel; ++k) {
      const std::ptrdiff_t src = t + static_cast<std::ptrdiff_t>(k) - half;
      if (src < 0 || src >= n) continue;
      for (std::size_t c = 0; c < chans; ++c) out(t, c) += wv(k, c) * xv(src, c);
    }
  }
  const std::size_t xi = x.id, wi = weight.id, bi = bias.id;
  return x.graph->record(std::move(out), {x, weight, bias},
                         [xi, wi, bi, n, chans, kernel, half](Graph<S>& g, std::size_t self) {
                           const Tensor<S>& go = g.grad(self);
                           const Tensor<S>& xv = g.value(xi);
                           const Tensor<S>& wv = g.value(wi);
                           const bool need_x = g.requires_grad({&g, xi});
                           const bool need_w = g.requires_grad({&g, wi});
                           if (g.requires_grad({&g, bi})) {
                             Tensor<S>& gb = g.grad_acc(bi);
                             for (std::ptrdiff_t t = 0; t < n; ++t)
                               for (std::size_t c = 0; c < chans; ++c) gb[c] += go(t, c);
                           }
                           if (!need_x && !need_w) return;
                           Tensor<S>* gx = need_x ? &g.grad_acc(xi) : nullptr;
                           Tensor<S>* gw = need_w ? &g.grad_acc(wi) : nullptr;
                           for (std::ptrdiff_t t = 0; t < n; ++t) {
                             for (std::size_t k = 0; k < kernel; ++k) {
                               const std::ptrdiff_t src = t + static_cast<std::ptrdiff_t>(k) - half;
                               if (src < 0 || src >= n) continue;
                               for (std::size_t c = 0; c < chans; ++c) {
                                 if (gx) (*gx)(src, c) += go(t, c) * wv(k, c);
                                 if (gw) (*gw)(k, c) += go(t, c) * xv(src, c);
                               }
                             }
                           }
                         });
}

// Inverted dropout with a seeded Bernoulli mask. p == 0 is the identity.
template <typename S>
Var<S> dropout(Var<S> x, double p, std::uint64_t seed) {
  if (p <= 0.0) return x;
  detail::require(p < 1.0, "dropout: p must be < 1");
  Rng rng(seed);
  std::bernoulli_distribution keep(1.0 - p);
  Tensor<S> mask(x.value().shape());
  const S kept = static_cast<S>(1.0 / (1.0 - p));
  for (auto& v : mask.values()) v = keep(rng) ? kept : S(0);
  return mul(x, x.graph->constant(std::move(mask)));
}

// ---------------------------------------------------------------------------
// Composites

enum class Activation { Swish, Relu, None };

template <typename S>
Var<S> activate(Var<S> x, Activation act) {
  switch (act) {
    case Activation::Swish: return swish(x);
    case Activation::Relu: return relu(x);
    case Activation::None: return x;
  }
  return x;
}

// Elementwise average of equally shaped tensors.
template <typename S>
Var<S> average(const std::vector<Var<S>>& xs) {
  detail::require(!xs.empty(), "average: no inputs");
  Var<S> acc = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return xs.size() == 1 ? acc : scale(acc, S(1) / static_cast<S>(xs.size()));
}

template <typename S>
struct LstmState {
  Var<S> h;
  Var<S> c;
};

// One LSTM step given the precomputed input projection x_proj = x W_x + b
// ([1 x 4H], gate order i, f, g, o) and the recurrent weight [H x 4H].
template <typename S>
LstmState<S> lstm_step(Var<S> x_proj, const LstmState<S>& prev, Var<S> w_hh) {
  const std::size_t hidden = prev.h.cols();
  Var<S> gates = add(x_proj, matmul(prev.h, w_hh));
  Var<S> i = sigmoid(slice_cols(gates, 0, hidden));
  Var<S> f = sigmoid(slice_cols(gates, hidden, 2 * hidden));
  Var<S> cand = tanh(slice_cols(gates, 2 * hidden, 3 * hidden));
  Var<S> o = sigmoid(slice_cols(gates, 3 * hidden, 4 * hidden));
  Var<S> c = add(mul(f, prev.c), mul(i, cand));
  Var<S> h = mul(o, tanh(c));
  return {h, c};
}

}  // namespace mcw2v::ag
