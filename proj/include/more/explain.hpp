#pragma once

// Gradient-weighted attention rollout and its renderings.

#include <Eigen/Dense>

#include <filesystem>
#include <string>
#include <vector>

#include "more/eval.hpp"

namespace more {

/// One transformer layer of one sample: per-head attention and its gradient.
struct RolloutLayer {
  std::vector<Eigen::MatrixXd> attention;
  std::vector<Eigen::MatrixXd> gradient;
};

enum class RelevanceModality { image, ecg, text };

struct RelevanceMap {
  RelevanceModality modality = RelevanceModality::image;
  /// One score per token, CLS first; all >= 0.
  Eigen::VectorXd scores;
  /// Image patch grid side (image maps only).
  Eigen::Index grid = 0;
};

/// R = I; per layer C = mean over heads of max(grad * attn, 0),
/// R = (I + C) R with rows renormalized to sum 1. Scores are the CLS row of
/// R minus the identity's CLS entry, clipped at 0. Throws DimensionError on
/// inconsistent shapes and ParameterError on an empty trace.
Eigen::VectorXd relevance_rollout(const std::vector<RolloutLayer>& layers);

/// Layers of sample `b` from a trace whose attention tensors hold gradients.
/// Throws ParameterError when a layer has no gradient.
template <typename S>
std::vector<RolloutLayer> rollout_layers(const AttentionTrace<S>& trace, Eigen::Index b);

/// Patch relevances min-max normalized (all 1.0 when max == min), bilinearly
/// upsampled to the padded grid and cropped to rows x cols.
Eigen::MatrixXd render_image_heatmap(const RelevanceMap& map, Eigen::Index rows, Eigen::Index cols);

/// Each token's relevance spread evenly over its receptive field, overlaps
/// summed, then min-max normalized (all 1.0 when flat). Samples past the last
/// receptive field stay at the minimum.
Eigen::VectorXd render_ecg_relevance(const RelevanceMap& map, Eigen::Index length);

/// Grid row/column of the patch with the largest relevance (first on ties).
std::pair<Eigen::Index, Eigen::Index> hottest_patch(const RelevanceMap& map);

// --- Explaining a trained model ---------------------------------------------------

/// Relevance of the input tokens for score = <z, target>, with z the
/// projected embedding and `target` a unit prompt embedding.
RelevanceMap explain_image(const TrainedModel& m, const EncodedSample& sample, const Eigen::VectorXd& target);
RelevanceMap explain_ecg(const TrainedModel& m, const EncodedSample& sample, const Eigen::VectorXd& target);
RelevanceMap explain_text(const TrainedModel& m, const std::vector<TokenId>& ids, const Eigen::VectorXd& target);

/// Best-matching prompt embedding of a class in the bank.
Eigen::VectorXd class_target(const PromptBank& bank, const std::string& class_name);

// --- Export ---------------------------------------------------------------------------

/// 8-bit PGM of a [0,1] overlay.
void write_heatmap_pgm(const std::filesystem::path& path, const Eigen::MatrixXd& overlay);
/// "time_s\trelevance" rows at the given sampling rate.
void write_ecg_relevance_tsv(const std::filesystem::path& path, const Eigen::VectorXd& relevance, double rate_hz);
/// "token\tscore" rows, padding skipped.
void write_text_relevance_tsv(const std::filesystem::path& path, const std::vector<TokenId>& ids,
                              const RelevanceMap& map, const Tokenizer& tok);

}  // namespace more
