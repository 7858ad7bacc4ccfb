#include "more/objective.hpp"

#include <algorithm>
#include <cmath>

#include "more/errors.hpp"

namespace more {

template <typename S>
ProjectionHead<S>::ProjectionHead(Index in, Index hidden, Index out, Rng& rng)
    : fc1(in, hidden, false, rng), bn(hidden), fc2(hidden, out, true, rng) {}

template <typename S>
Tensor<S> ProjectionHead<S>::forward(const Tensor<S>& x, bool training) const {
  return fc2.forward(relu(bn.forward(fc1.forward(x), training)));
}

template <typename S>
Tensor<S> ProjectionHead<S>::project(const Tensor<S>& x, bool training) const {
  return l2_normalize_rows(forward(x, training));
}

template <typename S>
void ProjectionHead<S>::collect(const std::string& prefix, ParamList<S>& out) const {
  fc1.collect(prefix + ".fc1", out);
  bn.collect(prefix + ".bn", out);
  fc2.collect(prefix + ".fc2", out);
}

template <typename S>
Temperature<S>::Temperature(double tau) {
  if (!(tau >= kMin && tau <= kMax)) throw ParameterError("temperature must be in [1e-3, 10]");
  log_tau = Tensor<S>::full({1}, static_cast<S>(std::log(tau)), true);
}

template <typename S>
double Temperature<S>::value() const {
  return std::exp(static_cast<double>(log_tau.value()[0]));
}

template <typename S>
Tensor<S> Temperature<S>::inverse() const {
  return exp(neg(log_tau));
}

template <typename S>
void Temperature<S>::clamp() {
  auto& v = log_tau.mutable_value()[0];
  v = std::clamp(v, static_cast<S>(std::log(kMin)), static_cast<S>(std::log(kMax)));
}

template <typename S>
void Temperature<S>::collect(const std::string& prefix, ParamList<S>& out) const {
  out.push_back({prefix, log_tau, false});
}

template <typename S>
Tensor<S> cosine_sim_matrix(const Tensor<S>& za, const Tensor<S>& zb) {
  if (za.rank() != 2 || zb.rank() != 2 || za.dim(1) != zb.dim(1))
    throw DimensionError("cosine_sim_matrix expects [N,D] and [M,D], got " + shape_str(za.shape()) + " and " +
                         shape_str(zb.shape()));
  return dot_nt(za, zb);
}

template <typename S>
Tensor<S> info_nce_directional(const Tensor<S>& sim, const Tensor<S>& inv_tau) {
  if (sim.rank() != 2 || sim.dim(0) != sim.dim(1)) throw DimensionError("InfoNCE expects a square similarity matrix");
  if (inv_tau.size() != 1) throw DimensionError("inverse temperature must have one element");
  std::vector<Index> diag(static_cast<std::size_t>(sim.dim(0)));
  for (Index i = 0; i < sim.dim(0); ++i) diag[static_cast<std::size_t>(i)] = i;
  return neg(mean(pick(log_softmax(mul_scalar(sim, inv_tau), -1), diag)));
}

template <typename S>
Tensor<S> info_nce_directional(const Tensor<S>& sim, double tau) {
  if (!(tau > 0)) throw ParameterError("temperature must be positive");
  return info_nce_directional(sim, Tensor<S>::scalar(static_cast<S>(1.0 / tau)));
}

template <typename S>
Tensor<S> symmetric_pair_loss(const Tensor<S>& za, const Tensor<S>& zb, const Tensor<S>& inv_tau) {
  if (za.dim(0) != zb.dim(0)) throw DimensionError("paired batches must have equal size");
  const Tensor<S> sim = cosine_sim_matrix(za, zb);
  return scale(add(info_nce_directional(sim, inv_tau), info_nce_directional(transpose(sim), inv_tau)), S(0.5));
}

template <typename S>
Tensor<S> symmetric_pair_loss(const Tensor<S>& za, const Tensor<S>& zb, double tau) {
  if (!(tau > 0)) throw ParameterError("temperature must be positive");
  return symmetric_pair_loss(za, zb, Tensor<S>::scalar(static_cast<S>(1.0 / tau)));
}

template <typename S>
Tensor<S> total_loss(const Tensor<S>& z_text, const Tensor<S>& z_xray, const Tensor<S>& z_ecg,
                     const Tensor<S>& inv_tau) {
  return scale(add(symmetric_pair_loss(z_text, z_xray, inv_tau), symmetric_pair_loss(z_text, z_ecg, inv_tau)), S(0.5));
}

template <typename S>
Tensor<S> total_loss(const Tensor<S>& z_text, const Tensor<S>& z_xray, const Tensor<S>& z_ecg, double tau) {
  if (!(tau > 0)) throw ParameterError("temperature must be positive");
  return total_loss(z_text, z_xray, z_ecg, Tensor<S>::scalar(static_cast<S>(1.0 / tau)));
}

#define MORE_INSTANTIATE_OBJECTIVE(S)                                                                       \
  template class ProjectionHead<S>;                                                                        \
  template class Temperature<S>;                                                                           \
  template Tensor<S> cosine_sim_matrix(const Tensor<S>&, const Tensor<S>&);                                \
  template Tensor<S> info_nce_directional(const Tensor<S>&, const Tensor<S>&);                             \
  template Tensor<S> info_nce_directional(const Tensor<S>&, double);                                       \
  template Tensor<S> symmetric_pair_loss(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);            \
  template Tensor<S> symmetric_pair_loss(const Tensor<S>&, const Tensor<S>&, double);                      \
  template Tensor<S> total_loss(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);   \
  template Tensor<S> total_loss(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, double);

MORE_INSTANTIATE_OBJECTIVE(float)
MORE_INSTANTIATE_OBJECTIVE(double)

}  // namespace more
