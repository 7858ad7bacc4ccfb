#include "more/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "more/rng.hpp"

namespace more {

namespace {

thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_next_seq = 0;

template <typename S>
using ArrayX = Eigen::Array<S, Eigen::Dynamic, 1>;
template <typename S>
using RowArray = Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
Eigen::Map<const RowMatrix<S>> as_matrix(const ArrayX<S>& a, Index rows, Index cols) {
  return Eigen::Map<const RowMatrix<S>>(a.data(), rows, cols);
}
template <typename S>
Eigen::Map<RowMatrix<S>> as_matrix(ArrayX<S>& a, Index rows, Index cols) {
  return Eigen::Map<RowMatrix<S>>(a.data(), rows, cols);
}
template <typename S>
Eigen::Map<const RowArray<S>> as_grid(const ArrayX<S>& a, Index rows, Index cols) {
  return Eigen::Map<const RowArray<S>>(a.data(), rows, cols);
}
template <typename S>
Eigen::Map<RowArray<S>> as_grid(ArrayX<S>& a, Index rows, Index cols) {
  return Eigen::Map<RowArray<S>>(a.data(), rows, cols);
}

template <typename S>
Tensor<S> record(Shape shape, ArrayX<S> value, std::initializer_list<const Tensor<S>*> inputs,
                 std::function<void(Node<S>&)> rule) {
  auto node = std::make_shared<Node<S>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->seq = ++g_next_seq;
  bool needs = false;
  if (g_grad_enabled)
    for (const auto* t : inputs)
      if (t->requires_grad()) needs = true;
  if (needs) {
    node->requires_grad = true;
    for (const auto* t : inputs) node->parents.push_back(t->node());
    node->backward = std::move(rule);
  }
  return Tensor<S>(std::move(node));
}

template <typename S>
bool wants(const Node<S>& n, std::size_t i) {
  return n.parents[i]->requires_grad;
}

Index normalize_axis(Index axis, Index rank) {
  const Index a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) throw DimensionError("axis " + std::to_string(axis) + " out of range");
  return a;
}

struct AxisSplit {
  Index outer, extent, inner;
};

AxisSplit split_at(const Shape& shape, Index axis) {
  AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
  for (Index i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i) s.inner *= shape[static_cast<std::size_t>(i)];
  return s;
}

bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

template <typename S>
void require_broadcastable(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (!is_suffix(a.shape(), b.shape()))
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                         shape_str(a.shape()));
}

template <typename S>
Tensor<S> unary(const Tensor<S>& a, ArrayX<S> out, std::function<ArrayX<S>(const ArrayX<S>& x, const ArrayX<S>& y,
                                                                            const ArrayX<S>& dy)>
                                                       derivative) {
  return record<S>(a.shape(), std::move(out), {&a}, [derivative](Node<S>& n) {
    n.parents[0]->accumulate(derivative(n.parents[0]->value, n.value, n.grad));
  });
}

}  // namespace

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Tensor

template <typename S>
Tensor<S>::Tensor(Shape shape, Array values, bool requires_grad) : node_(std::make_shared<Node<S>>()) {
  for (Index d : shape)
    if (d <= 0) throw DimensionError("non-positive extent in shape " + shape_str(shape));
  if (numel(shape) != values.size())
    throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                         " values");
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
  node_->seq = ++g_next_seq;
}

template <typename S>
Tensor<S> Tensor<S>::zeros(Shape shape, bool requires_grad) {
  const Index n = numel(shape);
  return Tensor(std::move(shape), Array::Zero(n), requires_grad);
}

template <typename S>
Tensor<S> Tensor<S>::full(Shape shape, S value, bool requires_grad) {
  const Index n = numel(shape);
  return Tensor(std::move(shape), Array::Constant(n, value), requires_grad);
}

template <typename S>
Tensor<S> Tensor<S>::from_matrix(const Matrix& m, bool requires_grad) {
  Array values(m.size());
  as_matrix<S>(values, m.rows(), m.cols()) = m;
  return Tensor({m.rows(), m.cols()}, std::move(values), requires_grad);
}

template <typename S>
Tensor<S> Tensor<S>::scalar(S value, bool requires_grad) {
  return Tensor({1}, Array::Constant(1, value), requires_grad);
}

template <typename S>
Index Tensor<S>::dim(Index axis) const {
  return node_->shape[static_cast<std::size_t>(normalize_axis(axis, rank()))];
}

template <typename S>
S Tensor<S>::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <typename S>
Tensor<S> Tensor<S>::detach() const {
  return Tensor(shape(), value(), false);
}

template <typename S>
typename Tensor<S>::ConstMatrixMap Tensor<S>::matrix() const {
  const Index cols = shape().back();
  return ConstMatrixMap(node_->value.data(), size() / cols, cols);
}

template <typename S>
typename Tensor<S>::MatrixMap Tensor<S>::mutable_matrix() {
  const Index cols = shape().back();
  return MatrixMap(node_->value.data(), size() / cols, cols);
}

template <typename S>
typename Tensor<S>::ConstMatrixMap Tensor<S>::grad_matrix() const {
  if (!has_grad()) throw ParameterError("tensor has no gradient");
  const Index cols = shape().back();
  return ConstMatrixMap(node_->grad.data(), size() / cols, cols);
}

template <typename S>
void Tensor<S>::backward() const {
  if (size() != 1) throw DimensionError("backward() without seed needs a single-element tensor");
  backward(Array::Ones(1));
}

template <typename S>
void Tensor<S>::backward(const Array& seed) const {
  if (seed.size() != size()) throw DimensionError("backward seed size mismatch");
  if (!node_->requires_grad) return;
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  std::vector<Node<S>*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    Node<S>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents)
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(), [](const Node<S>* l, const Node<S>* r) { return l->seq > r->seq; });
  node_->accumulate(seed);
  for (Node<S>* n : order)
    if (n->backward && n->grad.size() > 0) n->backward(*n);
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() < 2 || b.rank() != 2) throw DimensionError("matmul expects [..,m,k] x [k,n]");
  const Index k = a.dim(-1), n = b.dim(1), m = a.size() / k;
  if (b.dim(0) != k)
    throw DimensionError("matmul inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  ArrayX<S> out(m * n);
  as_matrix<S>(out, m, n).noalias() = as_matrix<S>(a.value(), m, k) * as_matrix<S>(b.value(), k, n);
  Shape shape = a.shape();
  shape.back() = n;
  return record<S>(std::move(shape), std::move(out), {&a, &b}, [m, k, n](Node<S>& node) {
    auto dc = as_matrix<S>(node.grad, m, n);
    if (wants(node, 0)) {
      ArrayX<S> da(m * k);
      as_matrix<S>(da, m, k).noalias() = dc * as_matrix<S>(node.parents[1]->value, k, n).transpose();
      node.parents[0]->accumulate(da);
    }
    if (wants(node, 1)) {
      ArrayX<S> db(k * n);
      as_matrix<S>(db, k, n).noalias() = as_matrix<S>(node.parents[0]->value, m, k).transpose() * dc;
      node.parents[1]->accumulate(db);
    }
  });
}

template <typename S>
Tensor<S> dot_nt(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw DimensionError("dot_nt shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const Index m = a.dim(0), n = b.dim(0), k = a.dim(1);
  const S* pa = a.value().data();
  const S* pb = b.value().data();
  ArrayX<S> out(m * n);
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < n; ++j) {
      S acc = 0;
      for (Index c = 0; c < k; ++c) acc += pa[i * k + c] * pb[j * k + c];
      out[i * n + j] = acc;
    }
  return record<S>({m, n}, std::move(out), {&a, &b}, [m, k, n](Node<S>& node) {
    auto dc = as_matrix<S>(node.grad, m, n);
    if (wants(node, 0)) {
      ArrayX<S> da(m * k);
      as_matrix<S>(da, m, k).noalias() = dc * as_matrix<S>(node.parents[1]->value, n, k);
      node.parents[0]->accumulate(da);
    }
    if (wants(node, 1)) {
      ArrayX<S> db(n * k);
      as_matrix<S>(db, n, k).noalias() = dc.transpose() * as_matrix<S>(node.parents[0]->value, m, k);
      node.parents[1]->accumulate(db);
    }
  });
}

template <typename S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw DimensionError("bmm shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const Index g = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  ArrayX<S> out(g * m * n);
  for (Index i = 0; i < g; ++i)
    Eigen::Map<RowMatrix<S>>(out.data() + i * m * n, m, n).noalias() =
        Eigen::Map<const RowMatrix<S>>(a.value().data() + i * m * k, m, k) *
        Eigen::Map<const RowMatrix<S>>(b.value().data() + i * k * n, k, n);
  return record<S>({g, m, n}, std::move(out), {&a, &b}, [g, m, k, n](Node<S>& node) {
    const auto& av = node.parents[0]->value;
    const auto& bv = node.parents[1]->value;
    ArrayX<S> da, db;
    if (wants(node, 0)) da.resize(g * m * k);
    if (wants(node, 1)) db.resize(g * k * n);
    for (Index i = 0; i < g; ++i) {
      Eigen::Map<const RowMatrix<S>> dc(node.grad.data() + i * m * n, m, n);
      if (da.size())
        Eigen::Map<RowMatrix<S>>(da.data() + i * m * k, m, k).noalias() =
            dc * Eigen::Map<const RowMatrix<S>>(bv.data() + i * k * n, k, n).transpose();
      if (db.size())
        Eigen::Map<RowMatrix<S>>(db.data() + i * k * n, k, n).noalias() =
            Eigen::Map<const RowMatrix<S>>(av.data() + i * m * k, m, k).transpose() * dc;
    }
    if (da.size()) node.parents[0]->accumulate(da);
    if (db.size()) node.parents[1]->accumulate(db);
  });
}

template <typename S>
Tensor<S> bmm_nt(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
    throw DimensionError("bmm_nt shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const Index g = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  ArrayX<S> out(g * m * n);
  for (Index i = 0; i < g; ++i)
    Eigen::Map<RowMatrix<S>>(out.data() + i * m * n, m, n).noalias() =
        Eigen::Map<const RowMatrix<S>>(a.value().data() + i * m * k, m, k) *
        Eigen::Map<const RowMatrix<S>>(b.value().data() + i * n * k, n, k).transpose();
  return record<S>({g, m, n}, std::move(out), {&a, &b}, [g, m, k, n](Node<S>& node) {
    const auto& av = node.parents[0]->value;
    const auto& bv = node.parents[1]->value;
    ArrayX<S> da, db;
    if (wants(node, 0)) da.resize(g * m * k);
    if (wants(node, 1)) db.resize(g * n * k);
    for (Index i = 0; i < g; ++i) {
      Eigen::Map<const RowMatrix<S>> dc(node.grad.data() + i * m * n, m, n);
      if (da.size())
        Eigen::Map<RowMatrix<S>>(da.data() + i * m * k, m, k).noalias() =
            dc * Eigen::Map<const RowMatrix<S>>(bv.data() + i * n * k, n, k);
      if (db.size())
        Eigen::Map<RowMatrix<S>>(db.data() + i * n * k, n, k).noalias() =
            dc.transpose() * Eigen::Map<const RowMatrix<S>>(av.data() + i * m * k, m, k);
    }
    if (da.size()) node.parents[0]->accumulate(da);
    if (db.size()) node.parents[1]->accumulate(db);
  });
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  if (a.rank() < 2) throw DimensionError("transpose needs rank >= 2");
  const Index r = a.dim(-2), c = a.dim(-1), g = a.size() / (r * c);
  ArrayX<S> out(a.size());
  for (Index i = 0; i < g; ++i)
    Eigen::Map<RowMatrix<S>>(out.data() + i * r * c, c, r) =
        Eigen::Map<const RowMatrix<S>>(a.value().data() + i * r * c, r, c).transpose();
  Shape shape = a.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  return record<S>(std::move(shape), std::move(out), {&a}, [g, r, c](Node<S>& node) {
    ArrayX<S> da(node.grad.size());
    for (Index i = 0; i < g; ++i)
      Eigen::Map<RowMatrix<S>>(da.data() + i * r * c, r, c) =
          Eigen::Map<const RowMatrix<S>>(node.grad.data() + i * r * c, c, r).transpose();
    node.parents[0]->accumulate(da);
  });
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  return record<S>(std::move(shape), a.value(), {&a}, [](Node<S>& node) { node.parents[0]->accumulate(node.grad); });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  require_broadcastable(a, b, "add");
  const Index n = b.size(), reps = a.size() / n;
  ArrayX<S> out(a.size());
  as_grid<S>(out, reps, n) = as_grid<S>(a.value(), reps, n).rowwise() + as_grid<S>(b.value(), 1, n).row(0);
  return record<S>(a.shape(), std::move(out), {&a, &b}, [reps, n](Node<S>& node) {
    if (wants(node, 0)) node.parents[0]->accumulate(node.grad);
    if (wants(node, 1)) {
      ArrayX<S> db = as_grid<S>(node.grad, reps, n).colwise().sum().transpose();
      node.parents[1]->accumulate(db);
    }
  });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  require_broadcastable(a, b, "sub");
  const Index n = b.size(), reps = a.size() / n;
  ArrayX<S> out(a.size());
  as_grid<S>(out, reps, n) = as_grid<S>(a.value(), reps, n).rowwise() - as_grid<S>(b.value(), 1, n).row(0);
  return record<S>(a.shape(), std::move(out), {&a, &b}, [reps, n](Node<S>& node) {
    if (wants(node, 0)) node.parents[0]->accumulate(node.grad);
    if (wants(node, 1)) {
      ArrayX<S> db = -as_grid<S>(node.grad, reps, n).colwise().sum().transpose();
      node.parents[1]->accumulate(db);
    }
  });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  require_broadcastable(a, b, "mul");
  const Index n = b.size(), reps = a.size() / n;
  ArrayX<S> out(a.size());
  as_grid<S>(out, reps, n) = as_grid<S>(a.value(), reps, n).rowwise() * as_grid<S>(b.value(), 1, n).row(0);
  return record<S>(a.shape(), std::move(out), {&a, &b}, [reps, n](Node<S>& node) {
    const auto dy = as_grid<S>(node.grad, reps, n);
    if (wants(node, 0)) {
      ArrayX<S> da(reps * n);
      as_grid<S>(da, reps, n) = dy.rowwise() * as_grid<S>(node.parents[1]->value, 1, n).row(0);
      node.parents[0]->accumulate(da);
    }
    if (wants(node, 1)) {
      ArrayX<S> db = (dy * as_grid<S>(node.parents[0]->value, reps, n)).colwise().sum().transpose();
      node.parents[1]->accumulate(db);
    }
  });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  return record<S>(a.shape(), a.value() * factor, {&a},
                   [factor](Node<S>& node) { node.parents[0]->accumulate(node.grad * factor); });
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, const Tensor<S>& s) {
  if (s.size() != 1) throw DimensionError("mul_scalar expects a single-element factor");
  return record<S>(a.shape(), a.value() * s.value()[0], {&a, &s}, [](Node<S>& node) {
    if (wants(node, 0)) node.parents[0]->accumulate(node.grad * node.parents[1]->value[0]);
    if (wants(node, 1)) {
      ArrayX<S> ds = ArrayX<S>::Constant(1, (node.grad * node.parents[0]->value).sum());
      node.parents[1]->accumulate(ds);
    }
  });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return scale(a, S(-1));
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  return unary<S>(a, a.value().exp(), [](const ArrayX<S>&, const ArrayX<S>& y, const ArrayX<S>& dy) {
    return ArrayX<S>(dy * y);
  });
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
  return unary<S>(a, a.value().log(), [](const ArrayX<S>& x, const ArrayX<S>&, const ArrayX<S>& dy) {
    return ArrayX<S>(dy / x);
  });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  return unary<S>(a, a.value().max(S(0)), [](const ArrayX<S>& x, const ArrayX<S>&, const ArrayX<S>& dy) {
    return ArrayX<S>((x > S(0)).select(dy, S(0)));
  });
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  const S c = std::sqrt(S(2) / S(3.14159265358979323846));
  const S k = S(0.044715);
  const ArrayX<S>& x = a.value();
  ArrayX<S> t = (c * (x + k * x.cube())).tanh();
  ArrayX<S> out = S(0.5) * x * (S(1) + t);
  return unary<S>(a, std::move(out), [c, k](const ArrayX<S>& x, const ArrayX<S>&, const ArrayX<S>& dy) {
    ArrayX<S> t = (c * (x + k * x.cube())).tanh();
    ArrayX<S> d = S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t.square()) * c * (S(1) + S(3) * k * x.square());
    return ArrayX<S>(dy * d);
  });
}

template <typename S>
Tensor<S> expand(const Tensor<S>& a, Shape shape) {
  if (!is_suffix(shape, a.shape()))
    throw DimensionError("expand " + shape_str(a.shape()) + " -> " + shape_str(shape));
  const Index n = a.size(), reps = numel(shape) / n;
  ArrayX<S> out(reps * n);
  as_grid<S>(out, reps, n) = as_grid<S>(a.value(), 1, n).replicate(reps, 1);
  return record<S>(std::move(shape), std::move(out), {&a}, [reps, n](Node<S>& node) {
    ArrayX<S> da = as_grid<S>(node.grad, reps, n).colwise().sum().transpose();
    node.parents[0]->accumulate(da);
  });
}

// ---------------------------------------------------------------------------
// Reductions and normalizations

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  return record<S>({1}, ArrayX<S>::Constant(1, a.value().sum()), {&a}, [](Node<S>& node) {
    node.parents[0]->accumulate(ArrayX<S>::Constant(node.parents[0]->value.size(), node.grad[0]));
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  const S inv = S(1) / static_cast<S>(a.size());
  return record<S>({1}, ArrayX<S>::Constant(1, a.value().sum() * inv), {&a}, [inv](Node<S>& node) {
    node.parents[0]->accumulate(ArrayX<S>::Constant(node.parents[0]->value.size(), node.grad[0] * inv));
  });
}

namespace {

// Shared forward for softmax / log_softmax along one axis.
template <typename S>
ArrayX<S> softmax_forward(const ArrayX<S>& x, const AxisSplit& s, bool log_space) {
  ArrayX<S> y(x.size());
  const S nan = std::numeric_limits<S>::quiet_NaN();
  for (Index o = 0; o < s.outer; ++o)
    for (Index i = 0; i < s.inner; ++i) {
      const Index base = o * s.extent * s.inner + i;
      S m = -std::numeric_limits<S>::infinity();
      bool has_nan = false;
      for (Index j = 0; j < s.extent; ++j) {
        const S v = x[base + j * s.inner];
        if (std::isnan(v)) has_nan = true;
        m = std::max(m, v);
      }
      if (has_nan || (std::isinf(m) && m < 0)) {
        for (Index j = 0; j < s.extent; ++j) y[base + j * s.inner] = nan;
        continue;
      }
      S total = 0;
      for (Index j = 0; j < s.extent; ++j) total += std::exp(x[base + j * s.inner] - m);
      const S log_total = std::log(total);
      for (Index j = 0; j < s.extent; ++j) {
        const S shifted = x[base + j * s.inner] - m;
        y[base + j * s.inner] = log_space ? shifted - log_total : std::exp(shifted) / total;
      }
    }
  return y;
}

}  // namespace

template <typename S>
Tensor<S> softmax(const Tensor<S>& a, Index axis) {
  const AxisSplit s = split_at(a.shape(), normalize_axis(axis, a.rank()));
  return record<S>(a.shape(), softmax_forward<S>(a.value(), s, false), {&a}, [s](Node<S>& node) {
    ArrayX<S> dx(node.value.size());
    for (Index o = 0; o < s.outer; ++o)
      for (Index i = 0; i < s.inner; ++i) {
        const Index base = o * s.extent * s.inner + i;
        S dot = 0;
        for (Index j = 0; j < s.extent; ++j) dot += node.grad[base + j * s.inner] * node.value[base + j * s.inner];
        for (Index j = 0; j < s.extent; ++j) {
          const Index idx = base + j * s.inner;
          dx[idx] = node.value[idx] * (node.grad[idx] - dot);
        }
      }
    node.parents[0]->accumulate(dx);
  });
}

template <typename S>
Tensor<S> log_softmax(const Tensor<S>& a, Index axis) {
  const AxisSplit s = split_at(a.shape(), normalize_axis(axis, a.rank()));
  return record<S>(a.shape(), softmax_forward<S>(a.value(), s, true), {&a}, [s](Node<S>& node) {
    ArrayX<S> dx(node.value.size());
    for (Index o = 0; o < s.outer; ++o)
      for (Index i = 0; i < s.inner; ++i) {
        const Index base = o * s.extent * s.inner + i;
        S total = 0;
        for (Index j = 0; j < s.extent; ++j) total += node.grad[base + j * s.inner];
        for (Index j = 0; j < s.extent; ++j) {
          const Index idx = base + j * s.inner;
          dx[idx] = node.grad[idx] - std::exp(node.value[idx]) * total;
        }
      }
    node.parents[0]->accumulate(dx);
  });
}

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps) {
  const Index d = x.dim(-1), rows = x.size() / d;
  if (gamma.size() != d || beta.size() != d) throw DimensionError("layer_norm gamma/beta extent");
  auto xv = as_grid<S>(x.value(), rows, d);
  ArrayX<S> xhat_store(x.size());
  auto xhat = as_grid<S>(xhat_store, rows, d);
  ArrayX<S> inv_std(rows);
  for (Index r = 0; r < rows; ++r) {
    const S mu = xv.row(r).mean();
    const S var = (xv.row(r) - mu).square().mean();
    inv_std[r] = S(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r) - mu) * inv_std[r];
  }
  ArrayX<S> out(x.size());
  as_grid<S>(out, rows, d) = (xhat.rowwise() * as_grid<S>(gamma.value(), 1, d).row(0)).rowwise() +
                             as_grid<S>(beta.value(), 1, d).row(0);
  return record<S>(x.shape(), std::move(out), {&x, &gamma, &beta},
                   [rows, d, xhat_store = std::move(xhat_store), inv_std = std::move(inv_std)](Node<S>& node) {
                     const auto dy = as_grid<S>(node.grad, rows, d);
                     const auto xh = as_grid<S>(xhat_store, rows, d);
                     if (wants(node, 0)) {
                       const auto g = as_grid<S>(node.parents[1]->value, 1, d).row(0);
                       ArrayX<S> dx(rows * d);
                       auto dxg = as_grid<S>(dx, rows, d);
                       for (Index r = 0; r < rows; ++r) {
                         const auto dxhat = (dy.row(r) * g).eval();
                         const S s1 = dxhat.sum();
                         const S s2 = (dxhat * xh.row(r)).sum();
                         dxg.row(r) = (inv_std[r] / static_cast<S>(d)) *
                                      (static_cast<S>(d) * dxhat - s1 - xh.row(r) * s2);
                       }
                       node.parents[0]->accumulate(dx);
                     }
                     if (wants(node, 1)) node.parents[1]->accumulate((dy * xh).colwise().sum().transpose());
                     if (wants(node, 2)) node.parents[2]->accumulate(dy.colwise().sum().transpose());
                   });
}

template <typename S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, Tensor<S>& running_mean,
                     Tensor<S>& running_var, bool training, S momentum, S eps) {
  if (x.rank() != 2 && x.rank() != 3) throw DimensionError("batch_norm expects [N,C] or [N,C,L]");
  const Index n = x.dim(0), c = x.dim(1), l = x.rank() == 3 ? x.dim(2) : 1;
  if (gamma.size() != c || beta.size() != c || running_mean.size() != c || running_var.size() != c)
    throw DimensionError("batch_norm parameter extent");
  const Index count = n * l;
  const auto& xv = x.value();
  auto at = [c, l](Index b, Index ch, Index t) { return (b * c + ch) * l + t; };

  ArrayX<S> mu(c), inv_std(c);
  if (training) {
    for (Index ch = 0; ch < c; ++ch) {
      S m = 0;
      for (Index b = 0; b < n; ++b)
        for (Index t = 0; t < l; ++t) m += xv[at(b, ch, t)];
      m /= static_cast<S>(count);
      S v = 0;
      for (Index b = 0; b < n; ++b)
        for (Index t = 0; t < l; ++t) v += (xv[at(b, ch, t)] - m) * (xv[at(b, ch, t)] - m);
      const S biased = v / static_cast<S>(count);
      const S unbiased = count > 1 ? v / static_cast<S>(count - 1) : biased;
      mu[ch] = m;
      inv_std[ch] = S(1) / std::sqrt(biased + eps);
      running_mean.mutable_value()[ch] = (S(1) - momentum) * running_mean.value()[ch] + momentum * m;
      running_var.mutable_value()[ch] = (S(1) - momentum) * running_var.value()[ch] + momentum * unbiased;
    }
  } else {
    mu = running_mean.value();
    inv_std = (running_var.value() + eps).rsqrt();
  }

  ArrayX<S> xhat(x.size()), out(x.size());
  for (Index b = 0; b < n; ++b)
    for (Index ch = 0; ch < c; ++ch)
      for (Index t = 0; t < l; ++t) {
        const Index i = at(b, ch, t);
        xhat[i] = (xv[i] - mu[ch]) * inv_std[ch];
        out[i] = xhat[i] * gamma.value()[ch] + beta.value()[ch];
      }

  return record<S>(x.shape(), std::move(out), {&x, &gamma, &beta},
                   [n, c, l, count, training, at, xhat = std::move(xhat), inv_std](Node<S>& node) {
                     const auto& dy = node.grad;
                     ArrayX<S> dgamma = ArrayX<S>::Zero(c), dbeta = ArrayX<S>::Zero(c);
                     for (Index b = 0; b < n; ++b)
                       for (Index ch = 0; ch < c; ++ch)
                         for (Index t = 0; t < l; ++t) {
                           const Index i = at(b, ch, t);
                           dgamma[ch] += dy[i] * xhat[i];
                           dbeta[ch] += dy[i];
                         }
                     if (wants(node, 0)) {
                       const auto& g = node.parents[1]->value;
                       ArrayX<S> dx(dy.size());
                       for (Index ch = 0; ch < c; ++ch) {
                         const S scale_c = g[ch] * inv_std[ch];
                         if (!training) {
                           for (Index b = 0; b < n; ++b)
                             for (Index t = 0; t < l; ++t) dx[at(b, ch, t)] = dy[at(b, ch, t)] * scale_c;
                           continue;
                         }
                         // dxhat = dy * gamma; sums reuse dbeta/dgamma scaled by gamma.
                         const S s1 = dbeta[ch] * g[ch];
                         const S s2 = dgamma[ch] * g[ch];
                         const S m = static_cast<S>(count);
                         for (Index b = 0; b < n; ++b)
                           for (Index t = 0; t < l; ++t) {
                             const Index i = at(b, ch, t);
                             dx[i] = (inv_std[ch] / m) * (m * dy[i] * g[ch] - s1 - xhat[i] * s2);
                           }
                       }
                       node.parents[0]->accumulate(dx);
                     }
                     if (wants(node, 1)) node.parents[1]->accumulate(dgamma);
                     if (wants(node, 2)) node.parents[2]->accumulate(dbeta);
                   });
}

template <typename S>
Tensor<S> l2_normalize_rows(const Tensor<S>& a) {
  if (a.rank() != 2) throw DimensionError("l2_normalize_rows expects [N,D]");
  const Index rows = a.dim(0), d = a.dim(1);
  auto xv = as_matrix<S>(a.value(), rows, d);
  ArrayX<S> norms(rows);
  ArrayX<S> out(a.size());
  auto y = as_matrix<S>(out, rows, d);
  for (Index r = 0; r < rows; ++r) {
    norms[r] = xv.row(r).norm();
    if (!(norms[r] > S(0)) || !std::isfinite(norms[r]))
      throw NumericError("l2_normalize_rows: row " + std::to_string(r) + " has zero or non-finite norm");
    y.row(r) = xv.row(r) / norms[r];
  }
  return record<S>(a.shape(), std::move(out), {&a}, [rows, d, norms](Node<S>& node) {
    const auto yv = as_matrix<S>(node.value, rows, d);
    const auto dy = as_matrix<S>(node.grad, rows, d);
    ArrayX<S> dx(rows * d);
    auto dxm = as_matrix<S>(dx, rows, d);
    for (Index r = 0; r < rows; ++r) dxm.row(r) = (dy.row(r) - yv.row(r) * yv.row(r).dot(dy.row(r))) / norms[r];
    node.parents[0]->accumulate(dx);
  });
}

// ---------------------------------------------------------------------------
// Indexing and layout

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, Index axis) {
  if (parts.empty()) throw DimensionError("concat of nothing");
  const Index ax = normalize_axis(axis, parts[0].rank());
  Shape shape = parts[0].shape();
  std::vector<Index> extents;
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rank() != parts[0].rank()) throw DimensionError("concat rank mismatch");
    for (Index i = 0; i < p.rank(); ++i)
      if (i != ax && p.dim(i) != shape[static_cast<std::size_t>(i)]) throw DimensionError("concat extent mismatch");
    extents.push_back(p.dim(ax));
    total += p.dim(ax);
  }
  shape[static_cast<std::size_t>(ax)] = total;
  const AxisSplit s = split_at(shape, ax);
  ArrayX<S> out(numel(shape));
  Index offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Index e = extents[k];
    for (Index o = 0; o < s.outer; ++o)
      out.segment((o * total + offset) * s.inner, e * s.inner) = parts[k].value().segment(o * e * s.inner, e * s.inner);
    offset += e;
  }

  auto node = std::make_shared<Node<S>>();
  node->shape = shape;
  node->value = std::move(out);
  node->seq = ++g_next_seq;
  bool needs = false;
  if (g_grad_enabled)
    for (const auto& p : parts) needs = needs || p.requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (const auto& p : parts) node->parents.push_back(p.node());
    node->backward = [extents, s, total](Node<S>& n) {
      Index off = 0;
      for (std::size_t k = 0; k < extents.size(); ++k) {
        const Index e = extents[k];
        if (n.parents[k]->requires_grad) {
          ArrayX<S> g(s.outer * e * s.inner);
          for (Index o = 0; o < s.outer; ++o)
            g.segment(o * e * s.inner, e * s.inner) = n.grad.segment((o * total + off) * s.inner, e * s.inner);
          n.parents[k]->accumulate(g);
        }
        off += e;
      }
    };
  }
  return Tensor<S>(std::move(node));
}

template <typename S>
Tensor<S> slice(const Tensor<S>& a, Index axis, Index begin, Index end) {
  const Index ax = normalize_axis(axis, a.rank());
  const Index extent = a.dim(ax);
  if (begin < 0 || end > extent || begin >= end) throw DimensionError("slice bounds out of range");
  const AxisSplit s = split_at(a.shape(), ax);
  const Index e = end - begin;
  Shape shape = a.shape();
  shape[static_cast<std::size_t>(ax)] = e;
  ArrayX<S> out(s.outer * e * s.inner);
  for (Index o = 0; o < s.outer; ++o)
    out.segment(o * e * s.inner, e * s.inner) = a.value().segment((o * extent + begin) * s.inner, e * s.inner);
  return record<S>(std::move(shape), std::move(out), {&a}, [s, e, extent, begin](Node<S>& node) {
    ArrayX<S> g = ArrayX<S>::Zero(s.outer * extent * s.inner);
    for (Index o = 0; o < s.outer; ++o)
      g.segment((o * extent + begin) * s.inner, e * s.inner) = node.grad.segment(o * e * s.inner, e * s.inner);
    node.parents[0]->accumulate(g);
  });
}

template <typename S>
Tensor<S> pick(const Tensor<S>& a, const std::vector<Index>& ids) {
  if (a.rank() != 2 || static_cast<Index>(ids.size()) != a.dim(0)) throw DimensionError("pick expects [N,C] and N ids");
  const Index n = a.dim(0), c = a.dim(1);
  ArrayX<S> out(n);
  for (Index i = 0; i < n; ++i) {
    const Index j = ids[static_cast<std::size_t>(i)];
    if (j < 0 || j >= c) throw DimensionError("pick id out of range");
    out[i] = a.value()[i * c + j];
  }
  return record<S>({n}, std::move(out), {&a}, [n, c, ids](Node<S>& node) {
    ArrayX<S> g = ArrayX<S>::Zero(n * c);
    for (Index i = 0; i < n; ++i) g[i * c + ids[static_cast<std::size_t>(i)]] = node.grad[i];
    node.parents[0]->accumulate(g);
  });
}

template <typename S>
Tensor<S> embedding(const Tensor<S>& table, const std::vector<Index>& ids) {
  if (table.rank() != 2) throw DimensionError("embedding table must be [V,D]");
  const Index v = table.dim(0), d = table.dim(1), n = static_cast<Index>(ids.size());
  if (n == 0) throw DimensionError("embedding of no ids");
  ArrayX<S> out(n * d);
  for (Index i = 0; i < n; ++i) {
    const Index id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= v) throw ParameterError("token id " + std::to_string(id) + " outside vocabulary");
    out.segment(i * d, d) = table.value().segment(id * d, d);
  }
  return record<S>({n, d}, std::move(out), {&table}, [v, d, n, ids](Node<S>& node) {
    ArrayX<S> g = ArrayX<S>::Zero(v * d);
    for (Index i = 0; i < n; ++i) g.segment(ids[static_cast<std::size_t>(i)] * d, d) += node.grad.segment(i * d, d);
    node.parents[0]->accumulate(g);
  });
}

template <typename S>
Tensor<S> split_heads(const Tensor<S>& x, Index heads) {
  if (x.rank() != 3 || x.dim(2) % heads != 0) throw DimensionError("split_heads expects [B,T,D] with D % H == 0");
  const Index b = x.dim(0), t = x.dim(1), d = x.dim(2), dh = d / heads;
  ArrayX<S> out(x.size());
  for (Index bi = 0; bi < b; ++bi)
    for (Index h = 0; h < heads; ++h)
      for (Index ti = 0; ti < t; ++ti)
        out.segment(((bi * heads + h) * t + ti) * dh, dh) = x.value().segment((bi * t + ti) * d + h * dh, dh);
  return record<S>({b * heads, t, dh}, std::move(out), {&x}, [b, t, d, dh, heads](Node<S>& node) {
    ArrayX<S> g(b * t * d);
    for (Index bi = 0; bi < b; ++bi)
      for (Index h = 0; h < heads; ++h)
        for (Index ti = 0; ti < t; ++ti)
          g.segment((bi * t + ti) * d + h * dh, dh) = node.grad.segment(((bi * heads + h) * t + ti) * dh, dh);
    node.parents[0]->accumulate(g);
  });
}

template <typename S>
Tensor<S> merge_heads(const Tensor<S>& x, Index heads) {
  if (x.rank() != 3 || x.dim(0) % heads != 0) throw DimensionError("merge_heads expects [B*H,T,Dh]");
  const Index b = x.dim(0) / heads, t = x.dim(1), dh = x.dim(2), d = dh * heads;
  ArrayX<S> out(x.size());
  for (Index bi = 0; bi < b; ++bi)
    for (Index h = 0; h < heads; ++h)
      for (Index ti = 0; ti < t; ++ti)
        out.segment((bi * t + ti) * d + h * dh, dh) = x.value().segment(((bi * heads + h) * t + ti) * dh, dh);
  return record<S>({b, t, d}, std::move(out), {&x}, [b, t, d, dh, heads](Node<S>& node) {
    ArrayX<S> g(b * t * d);
    for (Index bi = 0; bi < b; ++bi)
      for (Index h = 0; h < heads; ++h)
        for (Index ti = 0; ti < t; ++ti)
          g.segment(((bi * heads + h) * t + ti) * dh, dh) = node.grad.segment((bi * t + ti) * d + h * dh, dh);
    node.parents[0]->accumulate(g);
  });
}

template <typename S>
Tensor<S> patchify(const Tensor<S>& images, Index patch) {
  if (images.rank() != 3) throw DimensionError("patchify expects [B,H,W]");
  const Index b = images.dim(0), h = images.dim(1), w = images.dim(2);
  if (patch <= 0 || h % patch != 0 || w % patch != 0)
    throw DimensionError("image " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by patch " +
                         std::to_string(patch));
  const Index gh = h / patch, gw = w / patch, pp = patch * patch, np = gh * gw;
  std::vector<Index> gather(static_cast<std::size_t>(b * np * pp));
  for (Index bi = 0; bi < b; ++bi)
    for (Index pr = 0; pr < gh; ++pr)
      for (Index pc = 0; pc < gw; ++pc)
        for (Index dy = 0; dy < patch; ++dy)
          for (Index dx = 0; dx < patch; ++dx)
            gather[static_cast<std::size_t>(((bi * np + pr * gw + pc) * pp) + dy * patch + dx)] =
                (bi * h + pr * patch + dy) * w + pc * patch + dx;
  ArrayX<S> out(b * np * pp);
  for (std::size_t i = 0; i < gather.size(); ++i) out[static_cast<Index>(i)] = images.value()[gather[i]];
  return record<S>({b, np, pp}, std::move(out), {&images}, [gather = std::move(gather)](Node<S>& node) {
    ArrayX<S> g = ArrayX<S>::Zero(node.parents[0]->value.size());
    for (std::size_t i = 0; i < gather.size(); ++i) g[gather[i]] += node.grad[static_cast<Index>(i)];
    node.parents[0]->accumulate(g);
  });
}

// ---------------------------------------------------------------------------
// Convolution and losses

template <typename S>
Tensor<S> conv1d(const Tensor<S>& x, const Tensor<S>& kernels, const Tensor<S>& bias, Index stride) {
  if (x.rank() != 2 && x.rank() != 3) throw DimensionError("conv1d input must be [Cin,L] or [B,Cin,L]");
  if (kernels.rank() != 3) throw DimensionError("conv1d kernels must be [Cout,Cin,K]");
  if (stride < 1) throw ParameterError("conv1d stride must be >= 1");
  const bool batched = x.rank() == 3;
  const Index b = batched ? x.dim(0) : 1, cin = x.dim(-2), len = x.dim(-1);
  const Index cout = kernels.dim(0), k = kernels.dim(2);
  if (kernels.dim(1) != cin) throw DimensionError("conv1d channel mismatch");
  if (k > len) throw DimensionError("conv1d kernel " + std::to_string(k) + " longer than input " + std::to_string(len));
  const bool has_bias = bias.defined();
  if (has_bias && bias.size() != cout) throw DimensionError("conv1d bias extent");
  const Index lout = (len - k) / stride + 1, ck = cin * k;

  auto im2col = [=](const ArrayX<S>& xv, Index bi) {
    RowMatrix<S> cols(ck, lout);
    for (Index ci = 0; ci < cin; ++ci)
      for (Index kk = 0; kk < k; ++kk)
        for (Index t = 0; t < lout; ++t) cols(ci * k + kk, t) = xv[(bi * cin + ci) * len + t * stride + kk];
    return cols;
  };

  const auto w = as_matrix<S>(kernels.value(), cout, ck);
  ArrayX<S> out(b * cout * lout);
  for (Index bi = 0; bi < b; ++bi) {
    auto ob = Eigen::Map<RowMatrix<S>>(out.data() + bi * cout * lout, cout, lout);
    ob.noalias() = w * im2col(x.value(), bi);
    if (has_bias) ob.colwise() += Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(bias.value().data(), cout);
  }
  Shape shape = batched ? Shape{b, cout, lout} : Shape{cout, lout};

  auto rule = [=](Node<S>& node) {
    const auto& xv = node.parents[0]->value;
    const auto wm = as_matrix<S>(node.parents[1]->value, cout, ck);
    ArrayX<S> dx, dw, db;
    if (wants(node, 0)) dx = ArrayX<S>::Zero(xv.size());
    if (wants(node, 1)) dw = ArrayX<S>::Zero(cout * ck);
    if (has_bias && wants(node, 2)) db = ArrayX<S>::Zero(cout);
    for (Index bi = 0; bi < b; ++bi) {
      Eigen::Map<const RowMatrix<S>> dout(node.grad.data() + bi * cout * lout, cout, lout);
      if (dw.size()) as_matrix<S>(dw, cout, ck).noalias() += dout * im2col(xv, bi).transpose();
      if (db.size()) db += dout.rowwise().sum().array();
      if (dx.size()) {
        RowMatrix<S> dcols = wm.transpose() * dout;
        for (Index ci = 0; ci < cin; ++ci)
          for (Index kk = 0; kk < k; ++kk)
            for (Index t = 0; t < lout; ++t) dx[(bi * cin + ci) * len + t * stride + kk] += dcols(ci * k + kk, t);
      }
    }
    if (dx.size()) node.parents[0]->accumulate(dx);
    if (dw.size()) node.parents[1]->accumulate(dw);
    if (db.size()) node.parents[2]->accumulate(db);
  };
  if (has_bias) return record<S>(std::move(shape), std::move(out), {&x, &kernels, &bias}, rule);
  return record<S>(std::move(shape), std::move(out), {&x, &kernels}, rule);
}

template <typename S>
Tensor<S> bce_with_logits(const Tensor<S>& logits, const Tensor<S>& targets) {
  if (logits.shape() != targets.shape()) throw DimensionError("bce_with_logits shape mismatch");
  const auto& x = logits.value();
  const auto& y = targets.value();
  Index count = 0;
  S total = 0;
  for (Index i = 0; i < x.size(); ++i) {
    if (y[i] < S(0)) continue;
    ++count;
    total += std::max(x[i], S(0)) - x[i] * y[i] + std::log1p(std::exp(-std::abs(x[i])));
  }
  if (count == 0) throw ParameterError("bce_with_logits: every target is ignored");
  return record<S>({1}, ArrayX<S>::Constant(1, total / static_cast<S>(count)), {&logits, &targets},
                   [count](Node<S>& node) {
                     if (!wants(node, 0)) return;
                     const auto& x = node.parents[0]->value;
                     const auto& y = node.parents[1]->value;
                     ArrayX<S> g(x.size());
                     for (Index i = 0; i < x.size(); ++i)
                       g[i] = y[i] < S(0) ? S(0)
                                          : (S(1) / (S(1) + std::exp(-x[i])) - y[i]) * node.grad[0] /
                                                static_cast<S>(count);
                     node.parents[0]->accumulate(g);
                   });
}

template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<Index>& classes) {
  return neg(mean(pick(log_softmax(logits, -1), classes)));
}

// ---------------------------------------------------------------------------
// Finite differences

namespace {

// Power-of-two step near eps * max(1, |x|) so that x +/- step is exact.
template <typename S>
S dyadic_step(S x, S eps) {
  const S target = eps * std::max(S(1), std::abs(x));
  return std::exp2(std::floor(std::log2(target)));
}

template <typename S>
S relative_error(S tape, S numeric) {
  return std::abs(tape - numeric) / std::max({S(1), std::abs(tape), std::abs(numeric)});
}

}  // namespace

template <typename S>
S grad_check(const std::function<Tensor<S>(const Tensor<S>&)>& f, const Tensor<S>& x, S eps) {
  Tensor<S> leaf(x.shape(), x.value(), true);
  Tensor<S> out = f(leaf);
  if (out.size() != 1) throw DimensionError("grad_check needs a scalar function");
  out.backward();
  const ArrayX<S> tape = leaf.has_grad() ? leaf.grad() : ArrayX<S>::Zero(x.size());
  NoGradGuard guard;
  S worst = 0;
  for (Index i = 0; i < x.size(); ++i) {
    const S h = dyadic_step(x.value()[i], eps);
    ArrayX<S> plus = x.value(), minus = x.value();
    plus[i] += h;
    minus[i] -= h;
    const S fp = f(Tensor<S>(x.shape(), plus)).item();
    const S fm = f(Tensor<S>(x.shape(), minus)).item();
    worst = std::max(worst, relative_error<S>(tape[i], (fp - fm) / (S(2) * h)));
  }
  return worst;
}

template <typename S>
S grad_check_params(const std::function<Tensor<S>()>& loss, std::vector<Tensor<S>> params, S eps,
                    Index max_per_tensor, std::uint64_t seed) {
  std::vector<bool> flags;
  for (auto& p : params) {
    flags.push_back(p.requires_grad());
    p.set_requires_grad(true);
    p.zero_grad();
  }
  loss().backward();
  std::vector<ArrayX<S>> tape;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    tape.push_back(p.has_grad() ? p.grad() : ArrayX<S>::Zero(p.size()));
    p.zero_grad();
    p.set_requires_grad(flags[k]);
  }

  Rng rng(seed);
  NoGradGuard guard;
  S worst = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    std::vector<Index> probe(static_cast<std::size_t>(p.size()));
    std::iota(probe.begin(), probe.end(), Index(0));
    if (max_per_tensor > 0 && p.size() > max_per_tensor) {
      for (Index i = 0; i < max_per_tensor; ++i)
        std::swap(probe[static_cast<std::size_t>(i)],
                  probe[static_cast<std::size_t>(rng.uniform_int(static_cast<long>(i), static_cast<long>(p.size() - 1)))]);
      probe.resize(static_cast<std::size_t>(max_per_tensor));
    }
    for (Index i : probe) {
      const S original = p.value()[i];
      const S h = dyadic_step(original, eps);
      p.mutable_value()[i] = original + h;
      const S fp = loss().item();
      p.mutable_value()[i] = original - h;
      const S fm = loss().item();
      p.mutable_value()[i] = original;
      worst = std::max(worst, relative_error<S>(tape[k][i], (fp - fm) / (S(2) * h)));
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------

#define MORE_INSTANTIATE_TENSOR(S)                                                                               \
  template class Tensor<S>;                                                                                      \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                                                 \
  template Tensor<S> dot_nt(const Tensor<S>&, const Tensor<S>&);                                                 \
  template Tensor<S> bmm(const Tensor<S>&, const Tensor<S>&);                                                    \
  template Tensor<S> bmm_nt(const Tensor<S>&, const Tensor<S>&);                                                 \
  template Tensor<S> transpose(const Tensor<S>&);                                                                \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                                                           \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                                    \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                                    \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                                    \
  template Tensor<S> scale(const Tensor<S>&, S);                                                                 \
  template Tensor<S> mul_scalar(const Tensor<S>&, const Tensor<S>&);                                             \
  template Tensor<S> neg(const Tensor<S>&);                                                                      \
  template Tensor<S> exp(const Tensor<S>&);                                                                      \
  template Tensor<S> log(const Tensor<S>&);                                                                      \
  template Tensor<S> relu(const Tensor<S>&);                                                                     \
  template Tensor<S> gelu(const Tensor<S>&);                                                                     \
  template Tensor<S> expand(const Tensor<S>&, Shape);                                                            \
  template Tensor<S> sum(const Tensor<S>&);                                                                      \
  template Tensor<S> mean(const Tensor<S>&);                                                                     \
  template Tensor<S> softmax(const Tensor<S>&, Index);                                                           \
  template Tensor<S> log_softmax(const Tensor<S>&, Index);                                                       \
  template Tensor<S> layer_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S);                        \
  template Tensor<S> batch_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Tensor<S>&, Tensor<S>&,    \
                                bool, S, S);                                                                     \
  template Tensor<S> l2_normalize_rows(const Tensor<S>&);                                                        \
  template Tensor<S> concat(const std::vector<Tensor<S>>&, Index);                                               \
  template Tensor<S> slice(const Tensor<S>&, Index, Index, Index);                                               \
  template Tensor<S> pick(const Tensor<S>&, const std::vector<Index>&);                                          \
  template Tensor<S> embedding(const Tensor<S>&, const std::vector<Index>&);                                     \
  template Tensor<S> split_heads(const Tensor<S>&, Index);                                                       \
  template Tensor<S> merge_heads(const Tensor<S>&, Index);                                                       \
  template Tensor<S> patchify(const Tensor<S>&, Index);                                                          \
  template Tensor<S> conv1d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Index);                        \
  template Tensor<S> bce_with_logits(const Tensor<S>&, const Tensor<S>&);                                        \
  template Tensor<S> cross_entropy(const Tensor<S>&, const std::vector<Index>&);                                 \
  template S grad_check(const std::function<Tensor<S>(const Tensor<S>&)>&, const Tensor<S>&, S);                 \
  template S grad_check_params(const std::function<Tensor<S>()>&, std::vector<Tensor<S>>, S, Index, std::uint64_t);

MORE_INSTANTIATE_TENSOR(float)
MORE_INSTANTIATE_TENSOR(double)

}  // namespace more
