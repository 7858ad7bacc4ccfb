#include "more/model.hpp"

#include <map>
#include <sstream>

#include "more/errors.hpp"

namespace more {

namespace {

void put_vit(std::ostringstream& os, const std::string& name, const VitConfig& v) {
  os << name << ".depth=" << v.depth << '\n'
     << name << ".heads=" << v.heads << '\n'
     << name << ".dim=" << v.dim << '\n'
     << name << ".mlp_ratio=" << v.mlp_ratio << '\n'
     << name << ".dropkey_first=" << v.dropkey_rate_first << '\n'
     << name << ".dropkey_last=" << v.dropkey_rate_last << '\n';
}

}  // namespace

void ModelConfig::validate() const {
  image.validate();
  ecg.validate();
  text.validate();
  if (image.dim != ecg.dim || image.dim != text.dim) throw ParameterError("encoders must share one model dim");
  if (image_size < 1 || ecg_length < 1) throw ParameterError("input sizes must be positive");
  if (vocab_size < 5) throw ParameterError("vocab_size must be at least 5");
  if (text_max_length < 3) throw ParameterError("text_max_length must be at least 3");
  if (proj_hidden < 1 || proj_dim < 1) throw ParameterError("projection sizes must be positive");
  if (!(tau_init > 0)) throw ParameterError("tau_init must be positive");
}

std::string ModelConfig::serialize() const {
  std::ostringstream os;
  os.precision(17);
  os << "image_size=" << image_size << '\n' << "ecg_length=" << ecg_length << '\n';
  put_vit(os, "image", image);
  put_vit(os, "ecg", ecg);
  put_vit(os, "text", text);
  os << "text_lora=" << (text_lora ? 1 : 0) << '\n'
     << "lora.rank=" << lora.rank << '\n'
     << "lora.alpha=" << lora.alpha << '\n'
     << "lora.freeze_base=" << (lora.freeze_base ? 1 : 0) << '\n'
     << "vocab_size=" << vocab_size << '\n'
     << "text_max_length=" << text_max_length << '\n'
     << "proj_hidden=" << proj_hidden << '\n'
     << "proj_dim=" << proj_dim << '\n'
     << "tau_init=" << tau_init << '\n';
  return os.str();
}

ModelConfig ModelConfig::parse(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw SchemaError("model config line without '=': " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  ModelConfig c;
  auto take = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw SchemaError("model config missing key " + key);
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  auto num = [&](const std::string& key) {
    const std::string v = take(key);
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != v.size()) throw SchemaError("bad number for " + key);
      return d;
    } catch (const std::logic_error&) {
      throw SchemaError("bad number for " + key + ": " + v);
    }
  };
  auto vit = [&](const std::string& name, VitConfig& v) {
    v.depth = static_cast<Index>(num(name + ".depth"));
    v.heads = static_cast<Index>(num(name + ".heads"));
    v.dim = static_cast<Index>(num(name + ".dim"));
    v.mlp_ratio = static_cast<Index>(num(name + ".mlp_ratio"));
    v.dropkey_rate_first = num(name + ".dropkey_first");
    v.dropkey_rate_last = num(name + ".dropkey_last");
  };
  c.image_size = static_cast<Index>(num("image_size"));
  c.ecg_length = static_cast<Index>(num("ecg_length"));
  vit("image", c.image);
  vit("ecg", c.ecg);
  vit("text", c.text);
  c.text_lora = num("text_lora") != 0;
  c.lora.rank = static_cast<Index>(num("lora.rank"));
  c.lora.alpha = num("lora.alpha");
  c.lora.freeze_base = num("lora.freeze_base") != 0;
  c.vocab_size = static_cast<Index>(num("vocab_size"));
  c.text_max_length = static_cast<Index>(num("text_max_length"));
  c.proj_hidden = static_cast<Index>(num("proj_hidden"));
  c.proj_dim = static_cast<Index>(num("proj_dim"));
  c.tau_init = num("tau_init");
  if (!kv.empty()) throw SchemaError("unknown model config key " + kv.begin()->first);
  return c;
}

template <typename S>
MoreModel<S>::MoreModel(const ModelConfig& cfg_, std::uint64_t seed) : cfg(cfg_), tau(cfg_.tau_init) {
  cfg.validate();
  Rng root(seed);
  Rng r_image = root.split(1), r_ecg = root.split(2), r_text = root.split(3), r_heads = root.split(4);
  image = ImageEncoder<S>(cfg.image_size, cfg.image, r_image);
  ecg = EcgEncoder<S>(cfg.ecg_length, cfg.ecg, r_ecg);
  text = TextEncoder<S>(cfg.vocab_size, cfg.text, cfg.text_lora ? &cfg.lora : nullptr, r_text, cfg.text_max_length);
  image_head = ProjectionHead<S>(cfg.image.dim, cfg.proj_hidden, cfg.proj_dim, r_heads);
  ecg_head = ProjectionHead<S>(cfg.ecg.dim, cfg.proj_hidden, cfg.proj_dim, r_heads);
  text_head = ProjectionHead<S>(cfg.text.dim, cfg.proj_hidden, cfg.proj_dim, r_heads);
}

template <typename S>
Tensor<S> MoreModel<S>::embed_image(const Tensor<S>& images, bool training, Rng* rng, AttentionTrace<S>* trace) const {
  return image_head.project(image.forward(images, training, rng, trace), training);
}

template <typename S>
Tensor<S> MoreModel<S>::embed_ecg(const Tensor<S>& x, bool training, Rng* rng, AttentionTrace<S>* trace) const {
  return ecg_head.project(ecg.forward(x, training, rng, trace), training);
}

template <typename S>
Tensor<S> MoreModel<S>::embed_text(const std::vector<std::vector<TokenId>>& ids, bool training, Rng* rng,
                                   AttentionTrace<S>* trace) const {
  return text_head.project(text.forward(ids, training, rng, trace), training);
}

template <typename S>
Tensor<S> MoreModel<S>::loss(const Tensor<S>& images, const Tensor<S>& x, const std::vector<std::vector<TokenId>>& ids,
                             bool training, Rng* rng) const {
  const Tensor<S> zx = embed_image(images, training, rng);
  const Tensor<S> ze = embed_ecg(x, training, rng);
  const Tensor<S> zt = embed_text(ids, training, rng);
  return total_loss(zt, zx, ze, tau.inverse());
}

template <typename S>
ParamList<S> MoreModel<S>::parameters() const {
  ParamList<S> out;
  image.collect("image", out);
  ecg.collect("ecg", out);
  text.collect("text", out);
  image_head.collect("image_head", out);
  ecg_head.collect("ecg_head", out);
  text_head.collect("text_head", out);
  tau.collect("log_tau", out);
  return out;
}

template <typename S>
Tensor<S> image_batch(const std::vector<Eigen::MatrixXd>& images) {
  if (images.empty()) throw DimensionError("empty image batch");
  const Index h = images[0].rows(), w = images[0].cols();
  typename Tensor<S>::Array v(static_cast<Index>(images.size()) * h * w);
  Index o = 0;
  for (const auto& img : images) {
    if (img.rows() != h || img.cols() != w) throw DimensionError("images in a batch must share one size");
    for (Index r = 0; r < h; ++r)
      for (Index c = 0; c < w; ++c) v[o++] = static_cast<S>(img(r, c));
  }
  return Tensor<S>({static_cast<Index>(images.size()), h, w}, std::move(v));
}

template <typename S>
Tensor<S> ecg_batch(const std::vector<EcgRecord>& records) {
  if (records.empty()) throw DimensionError("empty ECG batch");
  const Index leads = records[0].leads.rows(), len = records[0].leads.cols();
  typename Tensor<S>::Array v(static_cast<Index>(records.size()) * leads * len);
  Index o = 0;
  for (const auto& rec : records) {
    if (rec.leads.rows() != leads || rec.leads.cols() != len) throw DimensionError("ECGs in a batch must share one shape");
    for (Index l = 0; l < leads; ++l)
      for (Index t = 0; t < len; ++t) v[o++] = static_cast<S>(rec.leads(l, t));
  }
  return Tensor<S>({static_cast<Index>(records.size()), leads, len}, std::move(v));
}

template class MoreModel<float>;
template class MoreModel<double>;
template Tensor<float> image_batch<float>(const std::vector<Eigen::MatrixXd>&);
template Tensor<double> image_batch<double>(const std::vector<Eigen::MatrixXd>&);
template Tensor<float> ecg_batch<float>(const std::vector<EcgRecord>&);
template Tensor<double> ecg_batch<double>(const std::vector<EcgRecord>&);

}  // namespace more
