#include "more/encoders.hpp"

#include <cmath>
#include <limits>

#include "more/errors.hpp"

namespace more {

namespace {

template <typename S>
Tensor<S> uniform_tensor(Shape shape, double bound, Rng& rng) {
  typename Tensor<S>::Array v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<S>(rng.uniform(-bound, bound));
  return Tensor<S>(std::move(shape), std::move(v), true);
}

template <typename S>
Tensor<S> normal_tensor(Shape shape, double stddev, Rng& rng) {
  typename Tensor<S>::Array v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<S>(rng.normal(0.0, stddev));
  return Tensor<S>(std::move(shape), std::move(v), true);
}

// Fixed 2-D sine-cosine table [grid*grid + 1, dim] with a zero CLS row: the
// first half of the channels encodes the patch row, the second the column.
template <typename S>
Tensor<S> sincos_2d(Index grid, Index dim) {
  if (dim % 4 != 0) throw ParameterError("2-D sine-cosine positions need dim divisible by 4");
  const Index quarter = dim / 4;
  typename Tensor<S>::Array v = Tensor<S>::Array::Zero((grid * grid + 1) * dim);
  for (Index r = 0; r < grid; ++r)
    for (Index c = 0; c < grid; ++c) {
      const Index row = 1 + r * grid + c;
      for (Index k = 0; k < quarter; ++k) {
        const double omega = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(quarter));
        v[row * dim + k] = static_cast<S>(std::sin(r * omega));
        v[row * dim + quarter + k] = static_cast<S>(std::cos(r * omega));
        v[row * dim + 2 * quarter + k] = static_cast<S>(std::sin(c * omega));
        v[row * dim + 3 * quarter + k] = static_cast<S>(std::cos(c * omega));
      }
    }
  return Tensor<S>({grid * grid + 1, dim}, std::move(v), true);
}

template <typename S>
void add_param(ParamList<S>& out, const std::string& path, const Tensor<S>& t, bool buffer = false) {
  if (t.defined()) out.push_back({path, t, buffer});
}

std::string join(const std::string& prefix, const std::string& name) { return prefix.empty() ? name : prefix + "." + name; }

// Expands per-batch key flags to per-group flags (group = batch * heads + head).
std::vector<std::vector<char>> per_group(const std::vector<std::vector<char>>& valid, Index heads) {
  std::vector<std::vector<char>> out;
  out.reserve(valid.size() * static_cast<std::size_t>(heads));
  for (const auto& row : valid)
    for (Index h = 0; h < heads; ++h) out.push_back(row);
  return out;
}

}  // namespace

template <typename S>
Index parameter_count(const ParamList<S>& params, bool trainable_only) {
  Index n = 0;
  for (const auto& p : params)
    if (!p.buffer && (!trainable_only || p.tensor.requires_grad())) n += p.tensor.size();
  return n;
}

template <typename S>
double trainable_fraction(const ParamList<S>& params) {
  const Index total = parameter_count(params, false);
  if (total == 0) throw ParameterError("model has no parameters");
  return static_cast<double>(parameter_count(params, true)) / static_cast<double>(total);
}

void VitConfig::validate() const {
  if (depth < 0 || heads < 1 || dim < 1 || mlp_ratio < 1) throw ParameterError("transformer extents must be positive");
  if (dim % heads != 0) throw ParameterError("model dim must be divisible by the head count");
  if (!(dropkey_rate_first >= 0 && dropkey_rate_first < 1 && dropkey_rate_last >= 0 && dropkey_rate_last < 1))
    throw ParameterError("DropKey rates must be in [0,1)");
  if (dropkey_rate_first < dropkey_rate_last) throw ParameterError("DropKey rate must not increase with depth");
}

double dropkey_schedule(Index layer, Index depth, double rate_first, double rate_last) {
  if (layer < 0 || layer >= depth) throw ParameterError("layer index out of range");
  if (depth == 1) return rate_first;
  return std::lerp(rate_first, rate_last, static_cast<double>(layer) / static_cast<double>(depth - 1));
}

std::vector<std::vector<std::vector<char>>> dropkey_mask(Index groups, Index queries, Index keys, double rate,
                                                         Rng& rng, const std::vector<std::vector<char>>& valid) {
  if (!(rate >= 0 && rate < 1)) throw ParameterError("DropKey rate must be in [0,1)");
  if (!valid.empty() && static_cast<Index>(valid.size()) != groups) throw DimensionError("key mask group count");
  std::vector<std::vector<std::vector<char>>> mask(
      static_cast<std::size_t>(groups),
      std::vector<std::vector<char>>(static_cast<std::size_t>(queries), std::vector<char>(static_cast<std::size_t>(keys), 0)));
  for (Index g = 0; g < groups; ++g) {
    const auto* ok = valid.empty() ? nullptr : &valid[static_cast<std::size_t>(g)];
    for (Index q = 0; q < queries; ++q) {
      auto& row = mask[static_cast<std::size_t>(g)][static_cast<std::size_t>(q)];
      for (;;) {
        bool any_kept = false;
        for (Index j = 0; j < keys; ++j) {
          if (ok && !(*ok)[static_cast<std::size_t>(j)]) continue;
          row[static_cast<std::size_t>(j)] = rng.bernoulli(rate);
          any_kept = any_kept || !row[static_cast<std::size_t>(j)];
        }
        if (any_kept) break;
      }
    }
  }
  return mask;
}

template <typename S>
AttentionResult<S> dropkey_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, double rate,
                                     bool training, Rng* rng, const std::vector<std::vector<char>>& valid) {
  if (!(rate >= 0 && rate < 1)) throw ParameterError("DropKey rate must be in [0,1)");
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) throw DimensionError("attention expects [G,T,Dh] inputs");
  const Index g = q.dim(0), tq = q.dim(1), tk = k.dim(1), dh = q.dim(2);
  if (k.dim(0) != g || v.dim(0) != g || k.dim(2) != dh || v.dim(1) != tk) throw DimensionError("attention shapes");
  if (!valid.empty() && static_cast<Index>(valid.size()) != g) throw DimensionError("key mask group count");

  Tensor<S> logits = scale(bmm_nt(q, k), static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh))));
  const bool drop = training && rate > 0;
  if (drop || !valid.empty()) {
    if (drop && !rng) throw ParameterError("DropKey in training mode needs a random stream");
    const S ninf = -std::numeric_limits<S>::infinity();
    typename Tensor<S>::Array add_mask = Tensor<S>::Array::Zero(g * tq * tk);
    std::vector<std::vector<std::vector<char>>> dropped;
    if (drop) dropped = dropkey_mask(g, tq, tk, rate, *rng, valid);
    for (Index gi = 0; gi < g; ++gi)
      for (Index qi = 0; qi < tq; ++qi)
        for (Index j = 0; j < tk; ++j) {
          const bool invalid = !valid.empty() && !valid[static_cast<std::size_t>(gi)][static_cast<std::size_t>(j)];
          const bool masked = drop && dropped[static_cast<std::size_t>(gi)][static_cast<std::size_t>(qi)][static_cast<std::size_t>(j)];
          if (invalid || masked) add_mask[(gi * tq + qi) * tk + j] = ninf;
        }
    logits = add(logits, Tensor<S>({g, tq, tk}, std::move(add_mask)));
  }
  Tensor<S> attention = softmax(logits, -1);
  return {bmm(attention, v), attention};
}

// ---------------------------------------------------------------------------

template <typename S>
Linear<S>::Linear(Index in, Index out, bool with_bias, Rng& rng)
    : weight(uniform_tensor<S>({in, out}, std::sqrt(6.0 / static_cast<double>(in + out)), rng)) {
  if (with_bias) bias = Tensor<S>::zeros({out}, true);
}

template <typename S>
Tensor<S> Linear<S>::forward(const Tensor<S>& x) const {
  Tensor<S> y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

template <typename S>
void Linear<S>::collect(const std::string& prefix, ParamList<S>& out) const {
  add_param(out, join(prefix, "weight"), weight);
  add_param(out, join(prefix, "bias"), bias);
}

template <typename S>
void LoraLinear<S>::enable_lora(const LoraConfig& cfg, Rng& rng) {
  const Index in = base.weight.dim(0), out = base.weight.dim(1);
  if (cfg.rank < 1 || cfg.rank >= std::min(in, out))
    throw ParameterError("LoRA rank must be in [1, min(in, out))");
  lora_a = uniform_tensor<S>({in, cfg.rank}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  lora_b = Tensor<S>::zeros({cfg.rank, out}, true);
  lora_scale = cfg.alpha / static_cast<double>(cfg.rank);
  if (cfg.freeze_base) {
    base.weight.set_requires_grad(false);
    if (base.bias.defined()) base.bias.set_requires_grad(false);
  }
}

template <typename S>
Tensor<S> LoraLinear<S>::forward(const Tensor<S>& x) const {
  Tensor<S> y = base.forward(x);
  if (!has_lora()) return y;
  return add(y, scale(matmul(matmul(x, lora_a), lora_b), static_cast<S>(lora_scale)));
}

template <typename S>
void LoraLinear<S>::collect(const std::string& prefix, ParamList<S>& out) const {
  base.collect(prefix, out);
  add_param(out, join(prefix, "lora_a"), lora_a);
  add_param(out, join(prefix, "lora_b"), lora_b);
}

template <typename S>
LayerNorm<S>::LayerNorm(Index dim) : gamma(Tensor<S>::full({dim}, S(1), true)), beta(Tensor<S>::zeros({dim}, true)) {}

template <typename S>
Tensor<S> LayerNorm<S>::forward(const Tensor<S>& x) const {
  return layer_norm(x, gamma, beta);
}

template <typename S>
void LayerNorm<S>::collect(const std::string& prefix, ParamList<S>& out) const {
  add_param(out, join(prefix, "gamma"), gamma);
  add_param(out, join(prefix, "beta"), beta);
}

template <typename S>
BatchNorm<S>::BatchNorm(Index channels)
    : gamma(Tensor<S>::full({channels}, S(1), true)),
      beta(Tensor<S>::zeros({channels}, true)),
      running_mean(Tensor<S>::zeros({channels})),
      running_var(Tensor<S>::full({channels}, S(1))) {}

template <typename S>
Tensor<S> BatchNorm<S>::forward(const Tensor<S>& x, bool training) const {
  Tensor<S> rm = running_mean, rv = running_var;
  return batch_norm(x, gamma, beta, rm, rv, training);
}

template <typename S>
void BatchNorm<S>::collect(const std::string& prefix, ParamList<S>& out) const {
  add_param(out, join(prefix, "gamma"), gamma);
  add_param(out, join(prefix, "beta"), beta);
  add_param(out, join(prefix, "running_mean"), running_mean, true);
  add_param(out, join(prefix, "running_var"), running_var, true);
}

template <typename S>
Attention<S>::Attention(Index dim, Index heads_, Rng& rng)
    : q(dim, dim, false, rng), k(dim, dim, false, rng), v(dim, dim, false, rng), proj(dim, dim, true, rng), heads(heads_) {}

template <typename S>
Tensor<S> Attention<S>::forward(const Tensor<S>& x, double rate, bool training, Rng* rng,
                                const std::vector<std::vector<char>>& valid, Tensor<S>* attention_out) const {
  const auto groups_valid = valid.empty() ? valid : per_group(valid, heads);
  auto r = dropkey_attention(split_heads(q.forward(x), heads), split_heads(k.forward(x), heads),
                             split_heads(v.forward(x), heads), rate, training, rng, groups_valid);
  if (attention_out) *attention_out = r.attention;
  return proj.forward(merge_heads(r.output, heads));
}

template <typename S>
void Attention<S>::collect(const std::string& prefix, ParamList<S>& out) const {
  q.collect(join(prefix, "q"), out);
  k.collect(join(prefix, "k"), out);
  v.collect(join(prefix, "v"), out);
  proj.collect(join(prefix, "proj"), out);
}

template <typename S>
Block<S>::Block(Index dim, Index heads, Index mlp_ratio, Rng& rng)
    : ln1(dim), ln2(dim), attn(dim, heads, rng), fc1(dim, dim * mlp_ratio, true, rng), fc2(dim * mlp_ratio, dim, true, rng) {}

template <typename S>
Tensor<S> Block<S>::forward(const Tensor<S>& x, double rate, bool training, Rng* rng,
                            const std::vector<std::vector<char>>& valid, Tensor<S>* attention_out) const {
  Tensor<S> h = add(x, attn.forward(ln1.forward(x), rate, training, rng, valid, attention_out));
  return add(h, fc2.forward(gelu(fc1.forward(ln2.forward(h)))));
}

template <typename S>
void Block<S>::collect(const std::string& prefix, ParamList<S>& out) const {
  ln1.collect(join(prefix, "ln1"), out);
  attn.collect(join(prefix, "attn"), out);
  ln2.collect(join(prefix, "ln2"), out);
  fc1.collect(join(prefix, "fc1"), out);
  fc2.collect(join(prefix, "fc2"), out);
}

template <typename S>
Transformer<S>::Transformer(const VitConfig& cfg_, Rng& rng) : cfg(cfg_), norm(cfg_.dim) {
  cfg.validate();
  for (Index l = 0; l < cfg.depth; ++l) blocks.emplace_back(cfg.dim, cfg.heads, cfg.mlp_ratio, rng);
}

template <typename S>
Tensor<S> Transformer<S>::forward(const Tensor<S>& tokens, bool training, Rng* rng,
                                  const std::vector<std::vector<char>>& valid, AttentionTrace<S>* trace) const {
  if (tokens.rank() != 3 || tokens.dim(2) != cfg.dim) throw DimensionError("transformer expects [B,T,dim] tokens");
  if (trace) {
    trace->attention.clear();
    trace->heads = cfg.heads;
  }
  Tensor<S> h = tokens;
  const Index depth = static_cast<Index>(blocks.size());
  for (Index l = 0; l < depth; ++l) {
    const double rate = dropkey_schedule(l, depth, cfg.dropkey_rate_first, cfg.dropkey_rate_last);
    Tensor<S> attention;
    h = blocks[static_cast<std::size_t>(l)].forward(h, rate, training, rng, valid, trace ? &attention : nullptr);
    if (trace) trace->attention.push_back(attention);
  }
  return norm.forward(h);
}

template <typename S>
void Transformer<S>::collect(const std::string& prefix, ParamList<S>& out) const {
  for (std::size_t l = 0; l < blocks.size(); ++l) blocks[l].collect(join(prefix, "blocks." + std::to_string(l)), out);
  norm.collect(join(prefix, "norm"), out);
}

template <typename S>
Tensor<S> cls_token(const Tensor<S>& tokens) {
  return reshape(slice(tokens, 1, 0, 1), {tokens.dim(0), tokens.dim(2)});
}

// Prepends the CLS vector [1, D] to tokens [B, T, D] and adds positions [T + 1, D].
template <typename S>
Tensor<S> with_cls_and_pos(const Tensor<S>& tokens, const Tensor<S>& cls, const Tensor<S>& pos) {
  const Index b = tokens.dim(0), d = tokens.dim(2);
  return add(concat<S>({expand(cls, {b, 1, d}), tokens}, 1), pos);
}

template <typename S>
ImageEncoder<S>::ImageEncoder(Index image_size_, const VitConfig& cfg, Rng& rng)
    : image_size(image_size_),
      grid((image_size_ + kPatch - 1) / kPatch),
      patch(kPatch * kPatch, cfg.dim, true, rng),
      cls(normal_tensor<S>({1, cfg.dim}, 0.02, rng)),
      pos(sincos_2d<S>(grid, cfg.dim)),
      encoder(cfg, rng) {
  if (image_size < 1) throw ParameterError("image size must be positive");
}

template <typename S>
Tensor<S> ImageEncoder<S>::embed(const Tensor<S>& images) const {
  if (images.rank() != 3 || images.dim(1) != image_size || images.dim(2) != image_size)
    throw DimensionError("image encoder expects [B," + std::to_string(image_size) + "," + std::to_string(image_size) +
                         "], got " + shape_str(images.shape()));
  Tensor<S> x = images;
  const Index padded = grid * kPatch, b = images.dim(0);
  if (padded != image_size) {
    x = concat<S>({x, Tensor<S>::zeros({b, image_size, padded - image_size})}, 2);
    x = concat<S>({x, Tensor<S>::zeros({b, padded - image_size, padded})}, 1);
  }
  return with_cls_and_pos(patch.forward(patchify(x, kPatch)), cls, pos);
}

template <typename S>
Tensor<S> ImageEncoder<S>::forward(const Tensor<S>& images, bool training, Rng* rng, AttentionTrace<S>* trace) const {
  return cls_token(encoder.forward(embed(images), training, rng, {}, trace));
}

template <typename S>
void ImageEncoder<S>::collect(const std::string& prefix, ParamList<S>& out) const {
  patch.collect(join(prefix, "patch"), out);
  add_param(out, join(prefix, "cls"), cls);
  add_param(out, join(prefix, "pos"), pos);
  encoder.collect(prefix, out);
}

template <typename S>
Index EcgEncoder<S>::token_count(Index length) {
  if (length < kKernel1) return 0;
  const Index l1 = (length - kKernel1) / kStride1 + 1;
  if (l1 < kKernel2) return 0;
  return (l1 - kKernel2) / kStride2 + 1;
}

template <typename S>
std::pair<Index, Index> EcgEncoder<S>::receptive_field(Index t) {
  const Index first = t * kStride2 * kStride1;
  const Index last = (t * kStride2 + kKernel2 - 1) * kStride1 + kKernel1 - 1;
  return {first, last};
}

template <typename S>
EcgEncoder<S>::EcgEncoder(Index length_, const VitConfig& cfg, Rng& rng) : length(length_), tokens(token_count(length_)) {
  if (tokens < 1) throw DimensionError("ECG length " + std::to_string(length) + " too short for the patch convolutions");
  if (cfg.dim % 2 != 0) throw ParameterError("ECG encoder needs an even model dim");
  const Index half = cfg.dim / 2, leads = 12;
  conv1_w = uniform_tensor<S>({half, leads, kKernel1}, 1.0 / std::sqrt(static_cast<double>(leads * kKernel1)), rng);
  conv1_b = Tensor<S>::zeros({half}, true);
  bn1 = BatchNorm<S>(half);
  conv2_w = uniform_tensor<S>({cfg.dim, half, kKernel2}, 1.0 / std::sqrt(static_cast<double>(half * kKernel2)), rng);
  conv2_b = Tensor<S>::zeros({cfg.dim}, true);
  bn2 = BatchNorm<S>(cfg.dim);
  cls = normal_tensor<S>({1, cfg.dim}, 0.02, rng);
  pos = normal_tensor<S>({tokens + 1, cfg.dim}, 0.02, rng);
  encoder = Transformer<S>(cfg, rng);
}

template <typename S>
Tensor<S> EcgEncoder<S>::conv_tokens(const Tensor<S>& ecg, bool training) const {
  if (ecg.rank() != 3 || ecg.dim(1) != 12 || ecg.dim(2) != length)
    throw DimensionError("ECG encoder expects [B,12," + std::to_string(length) + "], got " + shape_str(ecg.shape()));
  Tensor<S> h = relu(bn1.forward(conv1d(ecg, conv1_w, conv1_b, kStride1), training));
  h = relu(bn2.forward(conv1d(h, conv2_w, conv2_b, kStride2), training));
  return transpose(h);
}

template <typename S>
Tensor<S> EcgEncoder<S>::forward(const Tensor<S>& ecg, bool training, Rng* rng, AttentionTrace<S>* trace) const {
  return cls_token(encoder.forward(with_cls_and_pos(conv_tokens(ecg, training), cls, pos), training, rng, {}, trace));
}

template <typename S>
void EcgEncoder<S>::collect(const std::string& prefix, ParamList<S>& out) const {
  add_param(out, join(prefix, "conv1.weight"), conv1_w);
  add_param(out, join(prefix, "conv1.bias"), conv1_b);
  bn1.collect(join(prefix, "bn1"), out);
  add_param(out, join(prefix, "conv2.weight"), conv2_w);
  add_param(out, join(prefix, "conv2.bias"), conv2_b);
  bn2.collect(join(prefix, "bn2"), out);
  add_param(out, join(prefix, "cls"), cls);
  add_param(out, join(prefix, "pos"), pos);
  encoder.collect(prefix, out);
}

template <typename S>
TextEncoder<S>::TextEncoder(Index vocab_size_, const VitConfig& cfg, const LoraConfig* lora, Rng& rng, Index max_length_)
    : vocab_size(vocab_size_),
      max_length(max_length_),
      token_embedding(normal_tensor<S>({vocab_size_, cfg.dim}, 0.02, rng)),
      pos(normal_tensor<S>({max_length_, cfg.dim}, 0.02, rng)),
      encoder(cfg, rng) {
  if (vocab_size < 5) throw ParameterError("vocabulary too small");
  if (!lora) return;
  for (auto& block : encoder.blocks) {
    block.attn.q.enable_lora(*lora, rng);
    block.attn.k.enable_lora(*lora, rng);
    block.attn.v.enable_lora(*lora, rng);
  }
  if (lora->freeze_base) {
    ParamList<S> params;
    collect("", params);
    for (auto& p : params) {
      const bool adapter = p.path.ends_with("lora_a") || p.path.ends_with("lora_b");
      if (!p.buffer && !adapter) p.tensor.set_requires_grad(false);
    }
  }
}

template <typename S>
Tensor<S> TextEncoder<S>::forward(const std::vector<std::vector<TokenId>>& ids, bool training, Rng* rng,
                                  AttentionTrace<S>* trace) const {
  if (ids.empty()) throw ParameterError("empty text batch");
  const Index b = static_cast<Index>(ids.size()), t = static_cast<Index>(ids.front().size());
  if (t < 1 || t > max_length) throw ParameterError("text length must be in [1, " + std::to_string(max_length) + "]");
  std::vector<Index> flat;
  std::vector<std::vector<char>> valid;
  for (const auto& row : ids) {
    if (static_cast<Index>(row.size()) != t) throw DimensionError("text rows must share one length");
    std::vector<char> ok(row.size());
    bool any = false;
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (row[j] < 0 || row[j] >= vocab_size) throw ParameterError("token id " + std::to_string(row[j]) + " out of range");
      ok[j] = row[j] != kPadId;
      any = any || ok[j];
      flat.push_back(row[j]);
    }
    if (!any) throw ParameterError("text row contains only padding");
    valid.push_back(std::move(ok));
  }
  Tensor<S> x = reshape(embedding(token_embedding, flat), {b, t, token_embedding.dim(1)});
  x = add(x, slice(pos, 0, 0, t));
  return cls_token(encoder.forward(x, training, rng, valid, trace));
}

template <typename S>
void TextEncoder<S>::collect(const std::string& prefix, ParamList<S>& out) const {
  add_param(out, join(prefix, "token_embedding"), token_embedding);
  add_param(out, join(prefix, "pos"), pos);
  encoder.collect(prefix, out);
}

std::vector<std::vector<TokenId>> pad_batch(std::vector<std::vector<TokenId>> rows) {
  std::size_t longest = 0;
  for (const auto& r : rows) longest = std::max(longest, r.size());
  for (auto& r : rows) r.resize(longest, kPadId);
  return rows;
}

#define MORE_INSTANTIATE_ENCODERS(S)                                                                            \
  template Index parameter_count(const ParamList<S>&, bool);                                                   \
  template double trainable_fraction(const ParamList<S>&);                                                     \
  template AttentionResult<S> dropkey_attention(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, double,   \
                                                bool, Rng*, const std::vector<std::vector<char>>&);             \
  template Tensor<S> cls_token(const Tensor<S>&);                                                              \
  template class Linear<S>;                                                                                    \
  template class LoraLinear<S>;                                                                                \
  template class LayerNorm<S>;                                                                                 \
  template class BatchNorm<S>;                                                                                 \
  template class Attention<S>;                                                                                 \
  template class Block<S>;                                                                                     \
  template class Transformer<S>;                                                                               \
  template class ImageEncoder<S>;                                                                              \
  template class EcgEncoder<S>;                                                                                \
  template class TextEncoder<S>;

MORE_INSTANTIATE_ENCODERS(float)
MORE_INSTANTIATE_ENCODERS(double)

}  // namespace more
