#pragma once

// Transformer encoders for the three modalities.
//
// Modules hold Tensor handles; collect() appends (path, tensor) pairs so
// optimizers and checkpoints can address every parameter by a stable name
// such as "blocks.3.attn.q.weight". Buffers (batch-norm running statistics)
// are listed too, flagged so they are saved but never optimized.

#include <string>
#include <vector>

#include "more/rng.hpp"
#include "more/tensor.hpp"
#include "more/text.hpp"

namespace more {

template <typename S>
struct NamedTensor {
  std::string path;
  Tensor<S> tensor;
  bool buffer = false;
};

template <typename S>
using ParamList = std::vector<NamedTensor<S>>;

/// Trainable (requires_grad) parameter count over total parameter count;
/// buffers are excluded from both.
template <typename S>
double trainable_fraction(const ParamList<S>& params);
template <typename S>
Index parameter_count(const ParamList<S>& params, bool trainable_only = false);

struct VitConfig {
  Index depth = 4;
  Index heads = 4;
  Index dim = 128;
  Index mlp_ratio = 4;
  double dropkey_rate_first = 0.1;
  double dropkey_rate_last = 0.0;

  /// Throws ParameterError unless dim % heads == 0, 0 <= rates < 1 and
  /// rate_first >= rate_last.
  void validate() const;
};

struct LoraConfig {
  Index rank = 4;
  double alpha = 8.0;
  /// Freeze every non-adapter weight of the wrapped encoder.
  bool freeze_base = true;
};

/// rate_first + (rate_last - rate_first) * layer / (depth - 1); depth 1 gives rate_first.
double dropkey_schedule(Index layer, Index depth, double rate_first, double rate_last);

/// Per-group, per-query key mask: true where the key is dropped. Each entry
/// is Bernoulli(rate) over valid keys; a row that would drop every valid key
/// is redrawn. `valid` holds one flag per key for each group, or is empty.
std::vector<std::vector<std::vector<char>>> dropkey_mask(Index groups, Index queries, Index keys, double rate,
                                                         Rng& rng, const std::vector<std::vector<char>>& valid = {});

template <typename S>
struct AttentionResult {
  Tensor<S> output;     // [G, T, Dh]
  Tensor<S> attention;  // [G, T, T], rows sum to 1 over surviving keys
};

/// Scaled dot-product attention over groups (batch x heads). In training
/// with rate > 0 dropped keys get a -inf logit before the softmax; there is
/// no rescaling. Invalid keys (padding) are always excluded.
template <typename S>
AttentionResult<S> dropkey_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, double rate,
                                     bool training, Rng* rng, const std::vector<std::vector<char>>& valid = {});

/// Attention matrices of every layer from the last forward pass that asked for them.
template <typename S>
struct AttentionTrace {
  std::vector<Tensor<S>> attention;  // per layer [B*H, T, T]
  Index heads = 1;
};

// ---------------------------------------------------------------------------

template <typename S>
class Linear {
 public:
  Linear() = default;
  /// Weight [in, out] uniform in +-sqrt(6 / (in + out)); bias zero.
  Linear(Index in, Index out, bool bias, Rng& rng);

  Tensor<S> forward(const Tensor<S>& x) const;
  void collect(const std::string& prefix, ParamList<S>& out) const;

  Tensor<S> weight;
  Tensor<S> bias;  // undefined when built without bias
};

/// x W + (alpha / r) (x A) B with A [in, r] uniform in +-1/sqrt(in) and B
/// [r, out] zero, so the adapted map equals the base map at initialization.
template <typename S>
class LoraLinear {
 public:
  LoraLinear() = default;
  LoraLinear(Index in, Index out, bool bias, Rng& rng) : base(in, out, bias, rng) {}

  /// Throws ParameterError when rank < 1 or rank >= min(in, out).
  void enable_lora(const LoraConfig& cfg, Rng& rng);
  bool has_lora() const { return lora_a.defined(); }

  Tensor<S> forward(const Tensor<S>& x) const;
  void collect(const std::string& prefix, ParamList<S>& out) const;

  Linear<S> base;
  Tensor<S> lora_a;
  Tensor<S> lora_b;
  double lora_scale = 0.0;
};

template <typename S>
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(Index dim);
  Tensor<S> forward(const Tensor<S>& x) const;
  void collect(const std::string& prefix, ParamList<S>& out) const;

  Tensor<S> gamma, beta;
};

template <typename S>
class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(Index channels);
  Tensor<S> forward(const Tensor<S>& x, bool training) const;
  void collect(const std::string& prefix, ParamList<S>& out) const;

  Tensor<S> gamma, beta, running_mean, running_var;
};

/// Multi-head attention with bias-free q/k/v projections and a biased output projection.
template <typename S>
class Attention {
 public:
  Attention() = default;
  Attention(Index dim, Index heads, Rng& rng);

  /// x [B, T, D]; `valid` has one flag per key for each batch row (or is empty).
  Tensor<S> forward(const Tensor<S>& x, double rate, bool training, Rng* rng,
                    const std::vector<std::vector<char>>& valid, Tensor<S>* attention_out) const;
  void collect(const std::string& prefix, ParamList<S>& out) const;

  LoraLinear<S> q, k, v;
  Linear<S> proj;
  Index heads = 1;
};

/// Pre-norm block: x + attn(ln1(x)), then x + fc2(gelu(fc1(ln2(x)))).
template <typename S>
class Block {
 public:
  Block() = default;
  Block(Index dim, Index heads, Index mlp_ratio, Rng& rng);

  Tensor<S> forward(const Tensor<S>& x, double rate, bool training, Rng* rng,
                    const std::vector<std::vector<char>>& valid, Tensor<S>* attention_out) const;
  void collect(const std::string& prefix, ParamList<S>& out) const;

  LayerNorm<S> ln1, ln2;
  Attention<S> attn;
  Linear<S> fc1, fc2;
};

/// Stack of blocks plus a final layer norm. Layer l uses the DropKey rate
/// dropkey_schedule(l, depth, first, last).
template <typename S>
class Transformer {
 public:
  Transformer() = default;
  Transformer(const VitConfig& cfg, Rng& rng);

  Tensor<S> forward(const Tensor<S>& tokens, bool training, Rng* rng, const std::vector<std::vector<char>>& valid,
                    AttentionTrace<S>* trace) const;
  void collect(const std::string& prefix, ParamList<S>& out) const;

  VitConfig cfg;
  std::vector<Block<S>> blocks;
  LayerNorm<S> norm;
};

/// Column 0 of [B, T, D] as [B, D].
template <typename S>
Tensor<S> cls_token(const Tensor<S>& tokens);

/// ViT over 16x16 patches. Images whose sides are not multiples of 16 are
/// zero-padded at the bottom and right.
template <typename S>
class ImageEncoder {
 public:
  static constexpr Index kPatch = 16;

  ImageEncoder() = default;
  ImageEncoder(Index image_size, const VitConfig& cfg, Rng& rng);

  /// Patch tokens with CLS and positions, [B, 1 + patches, D].
  Tensor<S> embed(const Tensor<S>& images) const;
  /// images [B, H, W] -> CLS [B, D].
  Tensor<S> forward(const Tensor<S>& images, bool training, Rng* rng, AttentionTrace<S>* trace = nullptr) const;
  void collect(const std::string& prefix, ParamList<S>& out) const;

  Index image_size = 0;
  Index grid = 0;
  Linear<S> patch;
  Tensor<S> cls, pos;
  Transformer<S> encoder;
};

/// ViT over convolutional ECG tokens: conv(12 -> D/2, k15, s5) + BN + ReLU,
/// conv(D/2 -> D, k7, s4) + BN + ReLU, one token per output position.
template <typename S>
class EcgEncoder {
 public:
  static constexpr Index kKernel1 = 15, kStride1 = 5, kKernel2 = 7, kStride2 = 4;

  EcgEncoder() = default;
  EcgEncoder(Index length, const VitConfig& cfg, Rng& rng);

  /// Token count for a signal of `length` samples (without CLS).
  static Index token_count(Index length);
  /// First and last sample index (inclusive) seen by token t.
  static std::pair<Index, Index> receptive_field(Index t);

  /// Conv tokens before CLS and positions, [B, T, D].
  Tensor<S> conv_tokens(const Tensor<S>& ecg, bool training) const;
  /// ecg [B, 12, L] -> CLS [B, D].
  Tensor<S> forward(const Tensor<S>& ecg, bool training, Rng* rng, AttentionTrace<S>* trace = nullptr) const;
  void collect(const std::string& prefix, ParamList<S>& out) const;

  Index length = 0;
  Index tokens = 0;
  Tensor<S> conv1_w, conv1_b, conv2_w, conv2_b;
  BatchNorm<S> bn1, bn2;
  Tensor<S> cls, pos;
  Transformer<S> encoder;
};

/// Token embedding + learned positions + transformer; padding keys are
/// masked. With LoRA enabled, q/k/v of every layer carry adapters.
template <typename S>
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(Index vocab_size, const VitConfig& cfg, const LoraConfig* lora, Rng& rng,
              Index max_length = kMaxTextLength);

  /// Every row must have the same length; rows are right-padded with kPadId.
  /// Throws ParameterError on out-of-range ids or a row of padding only.
  Tensor<S> forward(const std::vector<std::vector<TokenId>>& ids, bool training, Rng* rng,
                    AttentionTrace<S>* trace = nullptr) const;
  void collect(const std::string& prefix, ParamList<S>& out) const;

  Index vocab_size = 0;
  Index max_length = 0;
  Tensor<S> token_embedding, pos;
  Transformer<S> encoder;
};

/// Pads every row to the longest row with kPadId.
std::vector<std::vector<TokenId>> pad_batch(std::vector<std::vector<TokenId>> rows);

}  // namespace more
