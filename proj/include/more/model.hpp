#pragma once

// The tri-modal model: three encoders, three projection heads and the
// shared temperature, plus batching helpers from records to tensors.

#include <cstdint>
#include <string>
#include <vector>

#include "more/encoders.hpp"
#include "more/objective.hpp"
#include "more/preprocess.hpp"

namespace more {

struct ModelConfig {
  Index image_size = 64;
  Index ecg_length = kEcgTargetLength;
  VitConfig image;
  VitConfig ecg;
  VitConfig text{4, 4, 128, 4, 0.0, 0.0};
  bool text_lora = true;
  LoraConfig lora;
  Index vocab_size = 0;
  Index text_max_length = 128;
  Index proj_hidden = 128;
  Index proj_dim = 64;
  double tau_init = 0.1;

  /// Same dim for every encoder and vocab_size >= 5; sub-configs validated.
  void validate() const;
  /// key=value lines in a fixed order, used for checkpoint metadata and digests.
  std::string serialize() const;
  static ModelConfig parse(const std::string& text);
};

template <typename S>
class MoreModel {
 public:
  MoreModel() = default;
  MoreModel(const ModelConfig& cfg, std::uint64_t seed);

  /// Projected, L2-normalized embeddings [B, proj_dim].
  Tensor<S> embed_image(const Tensor<S>& images, bool training, Rng* rng, AttentionTrace<S>* trace = nullptr) const;
  Tensor<S> embed_ecg(const Tensor<S>& ecg, bool training, Rng* rng, AttentionTrace<S>* trace = nullptr) const;
  Tensor<S> embed_text(const std::vector<std::vector<TokenId>>& ids, bool training, Rng* rng,
                       AttentionTrace<S>* trace = nullptr) const;

  /// total_loss over one aligned batch with the learned temperature.
  Tensor<S> loss(const Tensor<S>& images, const Tensor<S>& ecg, const std::vector<std::vector<TokenId>>& ids,
                 bool training, Rng* rng) const;

  /// Paths: image.*, ecg.*, text.*, image_head.*, ecg_head.*, text_head.*, log_tau.
  ParamList<S> parameters() const;

  ModelConfig cfg;
  ImageEncoder<S> image;
  EcgEncoder<S> ecg;
  TextEncoder<S> text;
  ProjectionHead<S> image_head, ecg_head, text_head;
  Temperature<S> tau;
};

/// Stacks normalized images into [B, H, W].
template <typename S>
Tensor<S> image_batch(const std::vector<Eigen::MatrixXd>& images);
/// Stacks 12-lead records into [B, 12, L].
template <typename S>
Tensor<S> ecg_batch(const std::vector<EcgRecord>& records);

}  // namespace more
