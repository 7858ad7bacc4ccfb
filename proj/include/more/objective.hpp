#pragma once

// Projection heads and the symmetric tri-modal contrastive loss.

#include "more/encoders.hpp"

namespace more {

/// Linear (no bias) -> batch norm -> ReLU -> Linear (with bias).
template <typename S>
class ProjectionHead {
 public:
  ProjectionHead() = default;
  ProjectionHead(Index in, Index hidden, Index out, Rng& rng);

  Tensor<S> forward(const Tensor<S>& x, bool training) const;
  /// forward() followed by row L2 normalization; NumericError on a zero row.
  Tensor<S> project(const Tensor<S>& x, bool training) const;
  void collect(const std::string& prefix, ParamList<S>& out) const;

  Linear<S> fc1;
  BatchNorm<S> bn;
  Linear<S> fc2;
};

/// Learnable temperature stored as log(tau), clamped to [1e-3, 10].
template <typename S>
class Temperature {
 public:
  static constexpr double kMin = 1e-3, kMax = 10.0;

  explicit Temperature(double tau = 0.1);

  double value() const;
  /// 1 / tau as a one-element tensor on the tape.
  Tensor<S> inverse() const;
  /// Re-applies the clamp after an optimizer step.
  void clamp();
  void collect(const std::string& prefix, ParamList<S>& out) const;

  Tensor<S> log_tau;
};

/// Za Zb^T for row-normalized inputs; DimensionError on mismatched widths.
template <typename S>
Tensor<S> cosine_sim_matrix(const Tensor<S>& za, const Tensor<S>& zb);

/// mean_i -log softmax(S[i,:] / tau)[i]. `inv_tau` is a one-element tensor.
template <typename S>
Tensor<S> info_nce_directional(const Tensor<S>& sim, const Tensor<S>& inv_tau);
/// Same with a fixed temperature; ParameterError when tau <= 0.
template <typename S>
Tensor<S> info_nce_directional(const Tensor<S>& sim, double tau);

/// (L(S) + L(S^T)) / 2 with S = cosine_sim_matrix(za, zb).
template <typename S>
Tensor<S> symmetric_pair_loss(const Tensor<S>& za, const Tensor<S>& zb, const Tensor<S>& inv_tau);
template <typename S>
Tensor<S> symmetric_pair_loss(const Tensor<S>& za, const Tensor<S>& zb, double tau);

/// (pair(text, xray) + pair(text, ecg)) / 2.
template <typename S>
Tensor<S> total_loss(const Tensor<S>& z_text, const Tensor<S>& z_xray, const Tensor<S>& z_ecg,
                     const Tensor<S>& inv_tau);
template <typename S>
Tensor<S> total_loss(const Tensor<S>& z_text, const Tensor<S>& z_xray, const Tensor<S>& z_ecg, double tau);

}  // namespace more
