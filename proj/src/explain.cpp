#include "more/explain.hpp"

#include <fstream>
#include <algorithm>

#include "more/errors.hpp"
#include "more/io.hpp"

namespace more {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

VectorXd minmax_or_ones(const VectorXd& v) {
  const double lo = v.minCoeff(), hi = v.maxCoeff();
  if (!(hi > lo)) return VectorXd::Ones(v.size());
  return (v.array() - lo) / (hi - lo);
}

template <typename F>
RelevanceMap explain_with(const Eigen::VectorXd& target, RelevanceModality modality, Index proj_dim, F&& forward) {
  if (target.size() != proj_dim) throw DimensionError("target embedding has the wrong dimension");
  AttentionTrace<float> trace;
  const Tensor<float> z = forward(&trace);
  Tensor<float>::Array t = target.cast<float>().array();
  const Tensor<float> score = sum(mul(z, Tensor<float>({1, proj_dim}, t)));
  score.backward();
  RelevanceMap map;
  map.modality = modality;
  map.scores = relevance_rollout(rollout_layers(trace, 0));
  return map;
}

}  // namespace

VectorXd relevance_rollout(const std::vector<RolloutLayer>& layers) {
  if (layers.empty()) throw ParameterError("empty attention trace");
  const Index t = layers[0].attention.empty() ? 0 : layers[0].attention[0].rows();
  if (t == 0) throw ParameterError("layer without attention heads");
  MatrixXd r = MatrixXd::Identity(t, t);
  for (const auto& layer : layers) {
    if (layer.attention.empty() || layer.attention.size() != layer.gradient.size())
      throw DimensionError("attention and gradient head counts differ");
    MatrixXd c = MatrixXd::Zero(t, t);
    for (std::size_t h = 0; h < layer.attention.size(); ++h) {
      const auto& a = layer.attention[h];
      const auto& g = layer.gradient[h];
      if (a.rows() != t || a.cols() != t || g.rows() != t || g.cols() != t)
        throw DimensionError("attention maps must all be T x T");
      c += (g.array() * a.array()).max(0.0).matrix();
    }
    c /= static_cast<double>(layer.attention.size());
    r = (MatrixXd::Identity(t, t) + c) * r;
    for (Index i = 0; i < t; ++i) r.row(i) /= r.row(i).sum();
  }
  VectorXd scores = r.row(0).transpose();
  scores[0] -= 1.0;
  return scores.cwiseMax(0.0);
}

template <typename S>
std::vector<RolloutLayer> rollout_layers(const AttentionTrace<S>& trace, Index b) {
  if (trace.attention.empty()) throw ParameterError("empty attention trace");
  std::vector<RolloutLayer> out;
  for (const auto& a : trace.attention) {
    if (!a.defined() || !a.has_grad()) throw ParameterError("attention trace has no gradients");
    const Index groups = a.dim(0), t = a.dim(1), heads = trace.heads;
    if (groups % heads != 0 || (b + 1) * heads > groups) throw DimensionError("sample index outside the trace");
    RolloutLayer layer;
    for (Index h = 0; h < heads; ++h) {
      const Index off = (b * heads + h) * t * t;
      MatrixXd av(t, t), gv(t, t);
      for (Index i = 0; i < t; ++i)
        for (Index j = 0; j < t; ++j) {
          av(i, j) = static_cast<double>(a.value()[off + i * t + j]);
          gv(i, j) = static_cast<double>(a.grad()[off + i * t + j]);
        }
      layer.attention.push_back(std::move(av));
      layer.gradient.push_back(std::move(gv));
    }
    out.push_back(std::move(layer));
  }
  return out;
}

template std::vector<RolloutLayer> rollout_layers<float>(const AttentionTrace<float>&, Index);
template std::vector<RolloutLayer> rollout_layers<double>(const AttentionTrace<double>&, Index);

MatrixXd render_image_heatmap(const RelevanceMap& map, Index rows, Index cols) {
  const Index g = map.grid;
  if (g < 1 || map.scores.size() != 1 + g * g) throw DimensionError("relevance map does not match its patch grid");
  const Index p = ImageEncoder<float>::kPatch;
  if (rows > g * p || cols > g * p) throw DimensionError("image larger than the patch grid");
  const VectorXd norm = minmax_or_ones(map.scores.tail(g * g));
  MatrixXd grid(g, g);
  for (Index i = 0; i < g; ++i)
    for (Index j = 0; j < g; ++j) grid(i, j) = norm[i * g + j];
  return resize_bilinear(grid, g * p, g * p).topLeftCorner(rows, cols);
}

VectorXd render_ecg_relevance(const RelevanceMap& map, Index length) {
  const Index tokens = map.scores.size() - 1;
  if (tokens < 1) throw DimensionError("ECG relevance map has no tokens");
  VectorXd acc = VectorXd::Zero(length);
  for (Index t = 0; t < tokens; ++t) {
    const auto [lo, hi] = EcgEncoder<float>::receptive_field(t);
    const double share = map.scores[t + 1] / static_cast<double>(hi - lo + 1);
    for (Index i = lo; i <= std::min(hi, length - 1); ++i) acc[i] += share;
  }
  return minmax_or_ones(acc);
}

std::pair<Index, Index> hottest_patch(const RelevanceMap& map) {
  const Index g = map.grid;
  if (g < 1 || map.scores.size() != 1 + g * g) throw DimensionError("relevance map does not match its patch grid");
  Index best = 0;
  for (Index k = 1; k < g * g; ++k)
    if (map.scores[1 + k] > map.scores[1 + best]) best = k;
  return {best / g, best % g};
}

RelevanceMap explain_image(const TrainedModel& m, const EncodedSample& sample, const VectorXd& target) {
  RelevanceMap map = explain_with(target, RelevanceModality::image, m.model.cfg.proj_dim, [&](AttentionTrace<float>* tr) {
    Tensor<float> x = image_batch<float>({xray_normalize(sample.image, m.image_stats.mean, m.image_stats.stddev)});
    x.set_requires_grad(true);
    return m.model.embed_image(x, false, nullptr, tr);
  });
  map.grid = m.model.image.grid;
  return map;
}

RelevanceMap explain_ecg(const TrainedModel& m, const EncodedSample& sample, const VectorXd& target) {
  return explain_with(target, RelevanceModality::ecg, m.model.cfg.proj_dim, [&](AttentionTrace<float>* tr) {
    Tensor<float> x = ecg_batch<float>({sample.ecg});
    x.set_requires_grad(true);
    return m.model.embed_ecg(x, false, nullptr, tr);
  });
}

RelevanceMap explain_text(const TrainedModel& m, const std::vector<TokenId>& ids, const VectorXd& target) {
  return explain_with(target, RelevanceModality::text, m.model.cfg.proj_dim, [&](AttentionTrace<float>* tr) {
    // Token ids are discrete; the embedding table carries the tape here.
    Tensor<float> table = m.model.text.token_embedding;
    const bool was = table.requires_grad();
    table.set_requires_grad(true);
    Tensor<float> z = m.model.embed_text({ids}, false, nullptr, tr);
    table.set_requires_grad(was);
    return z;
  });
}

VectorXd class_target(const PromptBank& bank, const std::string& class_name) {
  for (std::size_t c = 0; c < bank.class_names.size(); ++c)
    if (bank.class_names[c] == class_name) return bank.embeddings[c].row(0).transpose();
  throw ParameterError("class not in prompt bank: " + class_name);
}

void write_heatmap_pgm(const std::filesystem::path& path, const MatrixXd& overlay) { write_pgm(path, overlay); }

void write_ecg_relevance_tsv(const std::filesystem::path& path, const VectorXd& relevance, double rate_hz) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw MissingFileError("cannot write " + path.string());
  f.precision(17);
  f << "time_s\trelevance\n";
  for (Index i = 0; i < relevance.size(); ++i) f << static_cast<double>(i) / rate_hz << '\t' << relevance[i] << '\n';
}

void write_text_relevance_tsv(const std::filesystem::path& path, const std::vector<TokenId>& ids,
                              const RelevanceMap& map, const Tokenizer& tok) {
  if (static_cast<Index>(ids.size()) != map.scores.size()) throw DimensionError("token count differs from relevance map");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw MissingFileError("cannot write " + path.string());
  f.precision(17);
  f << "token\tscore\n";
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] != kPadId) f << tok.word(ids[i]) << '\t' << map.scores[static_cast<Index>(i)] << '\n';
}

}  // namespace more
