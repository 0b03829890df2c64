#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fvla/errors.hpp"

namespace fvla {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

inline long long shape_numel(const Shape& s) {
  long long n = 1;
  for (int e : s) {
    if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(s));
    n *= e;
  }
  return n;
}

// ---------------------------------------------------------------------------
// TensorT: dense row-major tensor with reverse-mode gradient tracking.
// A TensorT is a cheap handle to a graph node; free functions below build the
// computation graph and attach the chain-rule closures. Scalars are doubles
// by default; the type is templated so a float32 build is a config choice.
// ---------------------------------------------------------------------------

template <typename S>
class TensorT {
 public:
  using Scalar = S;
  using Array = Eigen::Array<S, Eigen::Dynamic, 1>;
  using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapM = Eigen::Map<MatRM>;
  using CMapM = Eigen::Map<const MatRM>;

  struct Node {
    Shape shape;
    Array val;
    Array grad;  // empty until backward touches this node
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    long long numel() const { return val.size(); }
  };
  using NodePtr = std::shared_ptr<Node>;

  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return make(std::move(shape), Array(), requires_grad, true);
  }

  static TensorT full(Shape shape, S v, bool requires_grad = false) {
    long long n = shape_numel(shape);
    return make(std::move(shape), Array::Constant(n, v), requires_grad, false);
  }

  static TensorT from(Shape shape, std::vector<S> vals, bool requires_grad = false) {
    long long n = shape_numel(shape);
    if (n != static_cast<long long>(vals.size())) {
      throw ShapeError("from: shape " + shape_str(shape) + " needs " + std::to_string(n) +
                       " values, got " + std::to_string(vals.size()));
    }
    Array a(n);
    for (long long i = 0; i < n; ++i) a[i] = vals[i];
    return make(std::move(shape), std::move(a), requires_grad, false);
  }

  static TensorT from_array(Shape shape, Array a, bool requires_grad = false) {
    if (shape_numel(shape) != a.size()) {
      throw ShapeError("from_array: shape " + shape_str(shape) + " vs " +
                       std::to_string(a.size()) + " values");
    }
    return make(std::move(shape), std::move(a), requires_grad, false);
  }

  static TensorT scalar(S v, bool requires_grad = false) {
    return full({1}, v, requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  long long numel() const { return n_->val.size(); }
  int extent(int axis) const { return n_->shape[axis]; }

  int rows() const {
    if (rank() != 2) throw ShapeError("rows(): tensor is not rank-2, shape " + shape_str(shape()));
    return n_->shape[0];
  }
  int cols() const {
    if (rank() != 2) throw ShapeError("cols(): tensor is not rank-2, shape " + shape_str(shape()));
    return n_->shape[1];
  }

  Array& data() { return n_->val; }
  const Array& data() const { return n_->val; }
  S item(long long i) const { return n_->val[i]; }
  S at(int r, int c) const { return n_->val[static_cast<long long>(r) * cols() + c]; }

  S value() const {
    if (numel() != 1) throw ShapeError("value(): tensor has " + std::to_string(numel()) + " elements");
    return n_->val[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) { n_->requires_grad = rg; }

  bool has_grad() const { return n_->grad.size() != 0; }
  const Array& grad() const {
    if (!has_grad()) throw GraphError("grad(): no gradient present; run backward() first");
    return n_->grad;
  }
  Array& grad_mut() {
    ensure_grad(*n_);
    return n_->grad;
  }
  void zero_grad() {
    if (n_->grad.size() == 0) n_->grad = Array::Zero(n_->val.size());
    n_->grad.setZero();
  }

  bool same_node(const TensorT& o) const { return n_ == o.n_; }

  // Reverse-mode sweep from a scalar root. Gradients accumulate into every
  // reachable requires_grad node; parameter grads are therefore summed
  // across calls until zero_grad().
  void backward() const {
    if (!defined()) throw GraphError("backward() on an undefined tensor");
    if (numel() != 1) {
      throw GraphError("backward() requires a scalar root; got shape " + shape_str(shape()));
    }
    if (!n_->requires_grad) {
      throw GraphError("backward() on a graph with no gradient-tracked leaves");
    }
    std::vector<Node*> topo;
    topo_from(n_.get(), topo);
    ensure_grad(*n_);
    n_->grad[0] += S(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
      Node* node = *it;
      if (!node->requires_grad) continue;
      ensure_grad(*node);
      if (node->backprop) node->backprop(*node);
    }
  }

  NodePtr node() const { return n_; }

  // --- graph construction helpers (used by the free-function ops) ---

  static TensorT make(Shape shape, Array val, bool requires_grad, bool zero_init) {
    auto n = std::make_shared<Node>();
    long long count = shape_numel(shape);
    n->shape = std::move(shape);
    if (zero_init) {
      n->val = Array::Zero(count);
    } else {
      n->val = std::move(val);
    }
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT op(Shape shape, Array val, std::vector<NodePtr> parents,
                    std::function<void(Node&)> backprop) {
    auto t = make(std::move(shape), std::move(val), false, false);
    t.n_->parents = std::move(parents);
    for (const auto& p : t.n_->parents) {
      if (p->requires_grad) t.n_->requires_grad = true;
    }
    if (t.n_->requires_grad) t.n_->backprop = std::move(backprop);
    return t;
  }

  static void ensure_grad(Node& n) {
    if (n.grad.size() == 0) n.grad = Array::Zero(n.val.size());
  }

  template <typename Expr>
  static void accum(const NodePtr& p, const Expr& g) {
    if (!p->requires_grad) return;
    ensure_grad(*p);
    p->grad += g;
  }

 private:
  explicit TensorT(NodePtr n) : n_(std::move(n)) {}

  static void topo_from(Node* root, std::vector<Node*>& topo) {
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
      auto& top = stack.back();
      Node* node = top.first;
      if (top.second < node->parents.size()) {
        Node* parent = node->parents[top.second++].get();
        if (visited.insert(parent).second) {
          stack.emplace_back(parent, 0);
        }
      } else {
        topo.push_back(node);
        stack.pop_back();
      }
    }
  }

  NodePtr n_;
};

using Tensor = TensorT<double>;

// ---------------------------------------------------------------------------
// Shape utilities shared by the ops.
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void check_same_shape(const char* op, const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// Collapse leading axes: view any tensor as (rows, last-axis cols).
template <typename S>
std::pair<long long, long long> rows_cols_last_axis(const TensorT<S>& x) {
  if (x.rank() < 1) throw ShapeError("op requires rank >= 1");
  long long cols = x.shape().back();
  long long rows = x.numel() / cols;
  return {rows, cols};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and arithmetic primitives.
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape("add", a, b);
  using T = TensorT<S>;
  auto pa = a.node(), pb = b.node();
  return T::op(a.shape(), a.data() + b.data(), {pa, pb}, [pa, pb](typename T::Node& self) {
    T::accum(pa, self.grad);
    T::accum(pb, self.grad);
  });
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape("sub", a, b);
  using T = TensorT<S>;
  auto pa = a.node(), pb = b.node();
  return T::op(a.shape(), a.data() - b.data(), {pa, pb}, [pa, pb](typename T::Node& self) {
    T::accum(pa, self.grad);
    T::accum(pb, -self.grad);
  });
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape("mul", a, b);
  using T = TensorT<S>;
  auto pa = a.node(), pb = b.node();
  return T::op(a.shape(), a.data() * b.data(), {pa, pb}, [pa, pb](typename T::Node& self) {
    T::accum(pa, self.grad * pb->val);
    T::accum(pb, self.grad * pa->val);
  });
}

template <typename S>
TensorT<S> scale(const TensorT<S>& x, S c) {
  using T = TensorT<S>;
  auto px = x.node();
  return T::op(x.shape(), x.data() * c, {px}, [px, c](typename T::Node& self) {
    T::accum(px, self.grad * c);
  });
}

template <typename S>
TensorT<S> neg(const TensorT<S>& x) {
  return scale(x, S(-1));
}

// ---------------------------------------------------------------------------
// Broadcast primitives over a rank-2 operand.
// ---------------------------------------------------------------------------

// X (m,n) + b (n): bias row broadcast down the rows.
template <typename S>
TensorT<S> add_rowvec(const TensorT<S>& x, const TensorT<S>& b) {
  using T = TensorT<S>;
  long long m = x.rows(), n = x.cols();
  if (b.rank() != 1 || b.numel() != n) {
    throw ShapeError("add_rowvec: " + shape_str(x.shape()) + " vs " + shape_str(b.shape()));
  }
  typename T::Array out(m * n);
  typename T::CMapM xm(x.data().data(), m, n);
  typename T::MapM om(out.data(), m, n);
  om = xm.rowwise() + Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(b.data().data(), n);
  auto px = x.node(), pb = b.node();
  return T::op(x.shape(), std::move(out), {px, pb}, [px, pb, m, n](typename T::Node& self) {
    T::accum(px, self.grad);
    if (pb->requires_grad) {
      T::ensure_grad(*pb);
      typename T::CMapM gm(self.grad.data(), m, n);
      Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(pb->grad.data(), n) += gm.colwise().sum();
    }
  });
}

// X (m,n) * g (n): per-column gain.
template <typename S>
TensorT<S> mul_rowvec(const TensorT<S>& x, const TensorT<S>& g) {
  using T = TensorT<S>;
  long long m = x.rows(), n = x.cols();
  if (g.rank() != 1 || g.numel() != n) {
    throw ShapeError("mul_rowvec: " + shape_str(x.shape()) + " vs " + shape_str(g.shape()));
  }
  typename T::Array out(m * n);
  typename T::CMapM xm(x.data().data(), m, n);
  typename T::MapM om(out.data(), m, n);
  om = xm.array().rowwise() * Eigen::Map<const Eigen::Array<S, 1, Eigen::Dynamic>>(g.data().data(), n);
  auto px = x.node(), pg = g.node();
  return T::op(x.shape(), std::move(out), {px, pg}, [px, pg, m, n](typename T::Node& self) {
    if (px->requires_grad) {
      T::ensure_grad(*px);
      typename T::MapM dxm(px->grad.data(), m, n);
      typename T::CMapM gm(self.grad.data(), m, n);
      dxm.array() += gm.array().rowwise() *
                     Eigen::Map<const Eigen::Array<S, 1, Eigen::Dynamic>>(pg->val.data(), n);
    }
    if (pg->requires_grad) {
      T::ensure_grad(*pg);
      typename T::CMapM gm(self.grad.data(), m, n);
      typename T::CMapM xm(px->val.data(), m, n);
      Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(pg->grad.data(), n) +=
          (gm.array() * xm.array()).matrix().colwise().sum();
    }
  });
}

// X (m,n) * w (m): per-row weight. Gradients flow to both operands; this is
// how the MoE gate weight multiplies expert outputs.
template <typename S>
TensorT<S> mul_colvec(const TensorT<S>& x, const TensorT<S>& w) {
  using T = TensorT<S>;
  long long m = x.rows(), n = x.cols();
  if (w.rank() != 1 || w.numel() != m) {
    throw ShapeError("mul_colvec: " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  }
  typename T::Array out(m * n);
  typename T::CMapM xm(x.data().data(), m, n);
  typename T::MapM om(out.data(), m, n);
  om = xm.array().colwise() * Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(w.data().data(), m);
  auto px = x.node(), pw = w.node();
  return T::op(x.shape(), std::move(out), {px, pw}, [px, pw, m, n](typename T::Node& self) {
    if (px->requires_grad) {
      T::ensure_grad(*px);
      typename T::MapM dxm(px->grad.data(), m, n);
      typename T::CMapM gm(self.grad.data(), m, n);
      dxm.array() += gm.array().colwise() *
                     Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(pw->val.data(), m);
    }
    if (pw->requires_grad) {
      T::ensure_grad(*pw);
      typename T::CMapM gm(self.grad.data(), m, n);
      typename T::CMapM xm(px->val.data(), m, n);
      Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(pw->grad.data(), m) +=
          (gm.array() * xm.array()).matrix().rowwise().sum();
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra.
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  using T = TensorT<S>;
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  long long m = a.rows(), k = a.cols(), n = b.cols();
  typename T::Array out(m * n);
  {
    typename T::CMapM am(a.data().data(), m, k);
    typename T::CMapM bm(b.data().data(), k, n);
    typename T::MapM om(out.data(), m, n);
    om.noalias() = am * bm;
  }
  auto pa = a.node(), pb = b.node();
  return T::op({static_cast<int>(m), static_cast<int>(n)}, std::move(out), {pa, pb},
               [pa, pb, m, k, n](typename T::Node& self) {
                 typename T::CMapM gm(self.grad.data(), m, n);
                 if (pa->requires_grad) {
                   T::ensure_grad(*pa);
                   typename T::MapM dam(pa->grad.data(), m, k);
                   typename T::CMapM bm(pb->val.data(), k, n);
                   dam.noalias() += gm * bm.transpose();
                 }
                 if (pb->requires_grad) {
                   T::ensure_grad(*pb);
                   typename T::MapM dbm(pb->grad.data(), k, n);
                   typename T::CMapM am(pa->val.data(), m, k);
                   dbm.noalias() += am.transpose() * gm;
                 }
               });
}

template <typename S>
TensorT<S> transpose(const TensorT<S>& x) {
  using T = TensorT<S>;
  if (x.rank() != 2) throw ShapeError("transpose: rank-2 required, got " + shape_str(x.shape()));
  long long m = x.rows(), n = x.cols();
  typename T::Array out(m * n);
  {
    typename T::CMapM xm(x.data().data(), m, n);
    typename T::MapM om(out.data(), n, m);
    om = xm.transpose();
  }
  auto px = x.node();
  return T::op({static_cast<int>(n), static_cast<int>(m)}, std::move(out), {px},
               [px, m, n](typename T::Node& self) {
                 if (!px->requires_grad) return;
                 T::ensure_grad(*px);
                 typename T::CMapM gm(self.grad.data(), n, m);
                 typename T::MapM dxm(px->grad.data(), m, n);
                 dxm += gm.transpose();
               });
}

template <typename S>
TensorT<S> reshape(const TensorT<S>& x, Shape shape) {
  using T = TensorT<S>;
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                     " changes element count");
  }
  auto px = x.node();
  return T::op(std::move(shape), x.data(), {px}, [px](typename T::Node& self) {
    T::accum(px, self.grad);
  });
}

template <typename S>
TensorT<S> as_row(const TensorT<S>& x) {
  return reshape(x, Shape{1, static_cast<int>(x.numel())});
}

template <typename S>
TensorT<S> flatten(const TensorT<S>& x) {
  return reshape(x, Shape{static_cast<int>(x.numel())});
}

// ---------------------------------------------------------------------------
// Concatenation / slicing along rows and columns (rank-2).
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> concat_rows(const std::vector<TensorT<S>>& parts) {
  using T = TensorT<S>;
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  long long n = parts[0].cols();
  long long total = 0;
  std::vector<typename T::NodePtr> parents;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.cols() != n) {
      throw ShapeError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    total += p.rows();
    parents.push_back(p.node());
  }
  typename T::Array out(total * n);
  long long off = 0;
  for (const auto& p : parts) {
    out.segment(off, p.numel()) = p.data();
    off += p.numel();
  }
  return T::op({static_cast<int>(total), static_cast<int>(n)}, std::move(out), parents,
               [parents](typename T::Node& self) {
                 long long off = 0;
                 for (const auto& p : parents) {
                   if (p->requires_grad) {
                     T::ensure_grad(*p);
                     p->grad += self.grad.segment(off, p->val.size());
                   }
                   off += p->val.size();
                 }
               });
}

template <typename S>
TensorT<S> slice_rows(const TensorT<S>& x, int start, int len) {
  using T = TensorT<S>;
  long long m = x.rows(), n = x.cols();
  if (start < 0 || len < 1 || start + len > m) {
    throw ShapeError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + len) +
                     ") out of range for " + shape_str(x.shape()));
  }
  typename T::Array out = x.data().segment(static_cast<long long>(start) * n, static_cast<long long>(len) * n);
  auto px = x.node();
  return T::op({len, static_cast<int>(n)}, std::move(out), {px},
               [px, start, n](typename T::Node& self) {
                 if (!px->requires_grad) return;
                 T::ensure_grad(*px);
                 px->grad.segment(static_cast<long long>(start) * n, self.grad.size()) += self.grad;
               });
}

template <typename S>
TensorT<S> concat_cols(const std::vector<TensorT<S>>& parts) {
  using T = TensorT<S>;
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  long long m = parts[0].rows();
  long long total = 0;
  std::vector<typename T::NodePtr> parents;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.rows() != m) {
      throw ShapeError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    total += p.cols();
    parents.push_back(p.node());
  }
  typename T::Array out(m * total);
  typename T::MapM om(out.data(), m, total);
  long long off = 0;
  for (const auto& p : parts) {
    typename T::CMapM pm(p.data().data(), m, p.cols());
    om.middleCols(off, p.cols()) = pm;
    off += p.cols();
  }
  std::vector<long long> widths;
  for (const auto& p : parts) widths.push_back(p.cols());
  return T::op({static_cast<int>(m), static_cast<int>(total)}, std::move(out), parents,
               [parents, widths, m, total](typename T::Node& self) {
                 typename T::CMapM gm(self.grad.data(), m, total);
                 long long off = 0;
                 for (size_t i = 0; i < parents.size(); ++i) {
                   const auto& p = parents[i];
                   if (p->requires_grad) {
                     T::ensure_grad(*p);
                     typename T::MapM pg(p->grad.data(), m, widths[i]);
                     pg += gm.middleCols(off, widths[i]);
                   }
                   off += widths[i];
                 }
               });
}

template <typename S>
TensorT<S> slice_cols(const TensorT<S>& x, int start, int len) {
  using T = TensorT<S>;
  long long m = x.rows(), n = x.cols();
  if (start < 0 || len < 1 || start + len > n) {
    throw ShapeError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + len) +
                     ") out of range for " + shape_str(x.shape()));
  }
  typename T::Array out(m * len);
  {
    typename T::CMapM xm(x.data().data(), m, n);
    typename T::MapM om(out.data(), m, len);
    om = xm.middleCols(start, len);
  }
  auto px = x.node();
  return T::op({static_cast<int>(m), len}, std::move(out), {px},
               [px, start, len, m, n](typename T::Node& self) {
                 if (!px->requires_grad) return;
                 T::ensure_grad(*px);
                 typename T::MapM dxm(px->grad.data(), m, n);
                 typename T::CMapM gm(self.grad.data(), m, len);
                 dxm.middleCols(start, len) += gm;
               });
}

// P (m,n) gathered at one column index per row -> (m).
template <typename S>
TensorT<S> take_per_row(const TensorT<S>& p, const std::vector<int>& idx) {
  using T = TensorT<S>;
  long long m = p.rows(), n = p.cols();
  if (static_cast<long long>(idx.size()) != m) {
    throw ShapeError("take_per_row: " + std::to_string(idx.size()) + " indices for " +
                     shape_str(p.shape()));
  }
  typename T::Array out(m);
  for (long long r = 0; r < m; ++r) {
    if (idx[r] < 0 || idx[r] >= n) throw ShapeError("take_per_row: index out of range");
    out[r] = p.data()[r * n + idx[r]];
  }
  auto pp = p.node();
  return T::op({static_cast<int>(m)}, std::move(out), {pp},
               [pp, idx, n](typename T::Node& self) {
                 if (!pp->requires_grad) return;
                 T::ensure_grad(*pp);
                 for (long long r = 0; r < self.grad.size(); ++r) {
                   pp->grad[r * n + idx[r]] += self.grad[r];
                 }
               });
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalizers.
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> sigmoid(const TensorT<S>& x) {
  using T = TensorT<S>;
  typename T::Array out = (S(1) / (S(1) + (-x.data()).exp()));
  auto px = x.node();
  return T::op(x.shape(), std::move(out), {px}, [px](typename T::Node& self) {
    T::accum(px, self.grad * self.val * (S(1) - self.val));
  });
}

// Exact (erf-based) GELU.
template <typename S>
TensorT<S> gelu(const TensorT<S>& x) {
  using T = TensorT<S>;
  typename T::Array cdf = x.data().unaryExpr([](S v) {
    return S(0.5) * (S(1) + std::erf(v / std::sqrt(S(2))));
  });
  typename T::Array out = x.data() * cdf;
  auto px = x.node();
  return T::op(x.shape(), std::move(out), {px}, [px, cdf](typename T::Node& self) {
    const S inv_sqrt2pi = S(1) / std::sqrt(S(2) * S(M_PI));
    typename T::Array pdf = (-(px->val.square()) * S(0.5)).exp() * inv_sqrt2pi;
    T::accum(px, self.grad * (cdf + px->val * pdf));
  });
}

// Swish / SiLU: x * sigmoid(x).
template <typename S>
TensorT<S> swish(const TensorT<S>& x) {
  using T = TensorT<S>;
  typename T::Array sig = S(1) / (S(1) + (-x.data()).exp());
  typename T::Array out = x.data() * sig;
  auto px = x.node();
  return T::op(x.shape(), std::move(out), {px}, [px, sig](typename T::Node& self) {
    T::accum(px, self.grad * sig * (S(1) + px->val * (S(1) - sig)));
  });
}

// Softmax over the last axis.
template <typename S>
TensorT<S> softmax(const TensorT<S>& x) {
  using T = TensorT<S>;
  auto [m, n] = detail::rows_cols_last_axis(x);
  typename T::Array out(m * n);
  for (long long r = 0; r < m; ++r) {
    auto row = x.data().segment(r * n, n);
    S mx = row.maxCoeff();
    typename T::Array e = (row - mx).exp();
    out.segment(r * n, n) = e / e.sum();
  }
  auto px = x.node();
  return T::op(x.shape(), std::move(out), {px}, [px, m, n](typename T::Node& self) {
    if (!px->requires_grad) return;
    T::ensure_grad(*px);
    for (long long r = 0; r < m; ++r) {
      auto y = self.val.segment(r * n, n);
      auto g = self.grad.segment(r * n, n);
      S dot = (g * y).sum();
      px->grad.segment(r * n, n) += y * (g - dot);
    }
  });
}

// Per-row standardization over the last axis (no affine; compose with
// mul_rowvec/add_rowvec for gamma/beta).
template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, S eps = S(1e-5)) {
  using T = TensorT<S>;
  auto [m, n] = detail::rows_cols_last_axis(x);
  typename T::Array out(m * n);
  typename T::Array inv_std(m);
  for (long long r = 0; r < m; ++r) {
    auto row = x.data().segment(r * n, n);
    S mu = row.mean();
    S var = (row - mu).square().mean();
    S inv = S(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    out.segment(r * n, n) = (row - mu) * inv;
  }
  auto px = x.node();
  return T::op(x.shape(), std::move(out), {px}, [px, inv_std, m, n](typename T::Node& self) {
    if (!px->requires_grad) return;
    T::ensure_grad(*px);
    for (long long r = 0; r < m; ++r) {
      auto y = self.val.segment(r * n, n);
      auto g = self.grad.segment(r * n, n);
      S g_mean = g.mean();
      S gy_mean = (g * y).mean();
      px->grad.segment(r * n, n) += inv_std[r] * (g - g_mean - y * gy_mean);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> sum(const TensorT<S>& x) {
  using T = TensorT<S>;
  auto px = x.node();
  typename T::Array out(1);
  out[0] = x.data().sum();
  return T::op({1}, std::move(out), {px}, [px](typename T::Node& self) {
    T::accum(px, typename T::Array(T::Array::Constant(px->val.size(), self.grad[0])));
  });
}

template <typename S>
TensorT<S> mean(const TensorT<S>& x) {
  using T = TensorT<S>;
  auto px = x.node();
  long long count = x.numel();
  typename T::Array out(1);
  out[0] = x.data().mean();
  return T::op({1}, std::move(out), {px}, [px, count](typename T::Node& self) {
    T::accum(px, typename T::Array(T::Array::Constant(px->val.size(), self.grad[0] / S(count))));
  });
}

// Mean squared error, composed from primitives.
template <typename S>
TensorT<S> mse(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape("mse", a, b);
  auto d = sub(a, b);
  return mean(mul(d, d));
}

// ---------------------------------------------------------------------------
// Scaled dot-product attention, composed from primitives.
// q (Nq,d), k (Nk,d), v (Nk,dv) -> (Nq,dv); full (non-causal) attention.
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> attention(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v) {
  if (q.cols() != k.cols() || k.rows() != v.rows()) {
    throw ShapeError("attention: incompatible shapes q" + shape_str(q.shape()) + " k" +
                     shape_str(k.shape()) + " v" + shape_str(v.shape()));
  }
  S inv_scale = S(1) / std::sqrt(static_cast<S>(q.cols()));
  auto scores = scale(matmul(q, transpose(k)), inv_scale);
  return matmul(softmax(scores), v);
}

// Vector (rank-1) concatenation, composed from reshape + concat_cols.
template <typename S>
TensorT<S> concat_vec(const TensorT<S>& a, const TensorT<S>& b) {
  return flatten(concat_cols<S>({as_row(a), as_row(b)}));
}

template <typename S>
bool all_finite(const TensorT<S>& t) {
  return t.data().isFinite().all();
}

}  // namespace fvla
