#pragma once

// Dense row-major tensors with a reverse-mode gradient tape.
//
// A Tensor is a cheap handle onto a shared node. Operations are free
// functions; when any input requires a gradient and grad mode is on, the
// result records its parents and a backward rule. backward() replays the
// reachable nodes in reverse creation order.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "more/errors.hpp"

namespace more {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

Index numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename Scalar>
struct Node {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Shape shape;
  Array value;
  Array grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Array& g) {
    if (grad.size() == 0)
      grad = g;
    else
      grad += g;
  }
};

template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Tensor() = default;
  Tensor(Shape shape, Array values, bool requires_grad = false);
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor from_matrix(const Matrix& m, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  /// Extent along an axis; negative axes count from the back.
  Index dim(Index axis) const;
  Index size() const { return node_->value.size(); }

  const Array& value() const { return node_->value; }
  /// In-place access for optimizers and initializers. Never use on a node
  /// that is part of a live tape.
  Array& mutable_value() { return node_->value; }
  Scalar item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return node_->grad.size() > 0; }
  const Array& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.resize(0); }
  /// Leaf copy of the value with no history.
  Tensor detach() const;

  /// View as a matrix of shape [prod(leading dims), last dim].
  ConstMatrixMap matrix() const;
  MatrixMap mutable_matrix();
  /// Gradient viewed like matrix(); requires has_grad().
  ConstMatrixMap grad_matrix() const;

  /// Reverse pass seeded with 1; requires a single-element tensor.
  void backward() const;
  /// Reverse pass seeded with an explicit upstream gradient.
  void backward(const Array& seed) const;

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Disables tape recording in the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

// ---------------------------------------------------------------------------
// Linear algebra

/// [.., m, k] x [k, n] -> [.., m, n]; leading dims of `a` are flattened.
template <typename S> Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);
/// Batched [G, m, k] x [G, k, n] -> [G, m, n].
template <typename S> Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b);
/// Batched a . b^T: [G, m, k] x [G, n, k] -> [G, m, n].
template <typename S> Tensor<S> bmm_nt(const Tensor<S>& a, const Tensor<S>& b);
/// [m, k] x [n, k] -> [m, n] = a . b^T. Each entry is a left-to-right sum over
/// k, so dot_nt(a, b) is bitwise the transpose of dot_nt(b, a).
template <typename S> Tensor<S> dot_nt(const Tensor<S>& a, const Tensor<S>& b);
/// Swaps the last two axes.
template <typename S> Tensor<S> transpose(const Tensor<S>& a);
template <typename S> Tensor<S> reshape(const Tensor<S>& a, Shape shape);

// Elementwise. `b` may have a shape equal to a suffix of `a`'s shape, in
// which case it is repeated over the leading axes.
template <typename S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> scale(const Tensor<S>& a, S factor);
/// a * s for a single-element tensor s (gradient flows into s).
template <typename S> Tensor<S> mul_scalar(const Tensor<S>& a, const Tensor<S>& s);
template <typename S> Tensor<S> neg(const Tensor<S>& a);
template <typename S> Tensor<S> exp(const Tensor<S>& a);
/// Natural log; non-positive inputs give -inf/NaN.
template <typename S> Tensor<S> log(const Tensor<S>& a);
template <typename S> Tensor<S> relu(const Tensor<S>& a);
/// tanh approximation.
template <typename S> Tensor<S> gelu(const Tensor<S>& a);
/// Repeats `a` over new leading axes so the result has `shape`.
template <typename S> Tensor<S> expand(const Tensor<S>& a, Shape shape);

template <typename S> Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S> Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S> Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <typename S> Tensor<S> operator-(const Tensor<S>& a) { return neg(a); }

// ---------------------------------------------------------------------------
// Reductions and normalizations

template <typename S> Tensor<S> sum(const Tensor<S>& a);
template <typename S> Tensor<S> mean(const Tensor<S>& a);
/// Normalized exponential along `axis`, max-subtracted. Rows containing NaN
/// produce NaN; a row that is entirely -inf produces NaN.
template <typename S> Tensor<S> softmax(const Tensor<S>& a, Index axis = -1);
template <typename S> Tensor<S> log_softmax(const Tensor<S>& a, Index axis = -1);
/// Normalizes over the last axis, then applies gamma/beta.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps = S(1e-5));

/// Batch normalization with channels on axis 1 of [N, C] or [N, C, L].
/// Training mode normalizes with batch statistics (biased variance) and
/// updates the running estimates with `momentum` (unbiased variance);
/// eval mode normalizes with the running estimates.
template <typename S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, Tensor<S>& running_mean,
                     Tensor<S>& running_var, bool training, S momentum = S(0.1), S eps = S(1e-5));

/// Rows of [N, D] scaled to unit L2 norm. Throws NumericError on a zero row.
template <typename S> Tensor<S> l2_normalize_rows(const Tensor<S>& a);

// ---------------------------------------------------------------------------
// Indexing and layout

template <typename S> Tensor<S> concat(const std::vector<Tensor<S>>& parts, Index axis);
/// [begin, end) along `axis`; always copies.
template <typename S> Tensor<S> slice(const Tensor<S>& a, Index axis, Index begin, Index end);
/// out[i] = a[i, ids[i]] for a of shape [N, C].
template <typename S> Tensor<S> pick(const Tensor<S>& a, const std::vector<Index>& ids);
/// Rows of `table` [V, D] gathered by ids; result [ids.size(), D].
template <typename S> Tensor<S> embedding(const Tensor<S>& table, const std::vector<Index>& ids);
/// [B, T, D] -> [B*H, T, D/H].
template <typename S> Tensor<S> split_heads(const Tensor<S>& x, Index heads);
/// [B*H, T, Dh] -> [B, T, H*Dh].
template <typename S> Tensor<S> merge_heads(const Tensor<S>& x, Index heads);
/// [B, H, W] -> [B, (H/p)(W/p), p*p], patches in row-major grid order.
template <typename S> Tensor<S> patchify(const Tensor<S>& images, Index patch);

// ---------------------------------------------------------------------------
// Convolution and losses

/// Cross-correlation. x: [B, Cin, L] or [Cin, L]; kernels: [Cout, Cin, K];
/// bias optional [Cout]. Output length floor((L - K) / stride) + 1.
template <typename S>
Tensor<S> conv1d(const Tensor<S>& x, const Tensor<S>& kernels, const Tensor<S>& bias, Index stride);

/// Mean binary cross-entropy on logits. Targets below zero are ignored.
template <typename S> Tensor<S> bce_with_logits(const Tensor<S>& logits, const Tensor<S>& targets);
/// Mean softmax cross-entropy for logits [N, C] and class ids.
template <typename S> Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<Index>& classes);

// ---------------------------------------------------------------------------
// Finite-difference oracle

/// Maximum over elements of |tape - numeric| / max(1, |tape|, |numeric|),
/// with central differences (f(x+eps) - f(x-eps)) / 2eps.
template <typename S>
S grad_check(const std::function<Tensor<S>(const Tensor<S>&)>& f, const Tensor<S>& x, S eps = S(1e-6));

/// Same check, perturbing the given tensors in place. `loss` must rebuild its
/// graph from the current values on every call. At most `max_per_tensor`
/// elements per tensor are probed (chosen by `seed`); 0 probes all.
template <typename S>
S grad_check_params(const std::function<Tensor<S>()>& loss, std::vector<Tensor<S>> params, S eps = S(1e-6),
                    Index max_per_tensor = 0, std::uint64_t seed = 0);

}  // namespace more
