#pragma once

// Ranking metrics, zero-shot classification, retrieval and fused inference.

#include <Eigen/Dense>

#include <filesystem>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "more/trainer.hpp"

namespace more {

/// Mann-Whitney AUROC with ties counted 1/2. Labels must be 0 or 1.
/// Throws UndefinedMetricError unless both classes occur, ParameterError on
/// non-finite scores or length mismatch.
double auroc(std::span<const double> scores, std::span<const int> labels);

/// Average precision: sum over distinct descending thresholds of
/// (recall gain) * precision, tied scores sharing one threshold.
/// Throws UndefinedMetricError without positives.
double auprc(std::span<const double> scores, std::span<const int> labels);

/// Mean over queries of the fraction of the k most cosine-similar corpus
/// rows whose label equals the query label. Ties keep corpus order.
double precision_at_k(const Eigen::MatrixXd& queries, std::span<const int> query_labels, const Eigen::MatrixXd& corpus,
                      std::span<const int> corpus_labels, int k);
/// Same from a precomputed [queries, corpus] similarity matrix.
double precision_at_k_similarity(const Eigen::MatrixXd& sims, std::span<const int> query_labels,
                                 std::span<const int> corpus_labels, int k);

struct RetrievalHit {
  Eigen::Index index = 0;
  double similarity = 0.0;
};

/// Corpus rows by descending cosine similarity to `query`; stable on ties.
std::vector<RetrievalHit> retrieve(const Eigen::VectorXd& query, const Eigen::MatrixXd& corpus, int top_k);

/// Per class, one or more prompts and their unit-norm embeddings (one row each).
struct PromptBank {
  std::vector<std::string> class_names;
  std::vector<std::vector<std::string>> prompts;
  std::vector<Eigen::MatrixXd> embeddings;

  /// Throws ParameterError when a class has no prompt or an embedding row is not unit norm.
  void validate() const;
};

/// "Finding of {name}".
std::vector<std::string> default_prompts(const std::string& class_name);

/// score[n][c] = max over class-c prompts of cosine(item n, prompt).
Eigen::MatrixXd zero_shot_scores(const Eigen::MatrixXd& items, const PromptBank& bank);

/// w * xray + (1 - w) * ecg. Throws DimensionError on a shape mismatch and
/// ParameterError for w outside [0,1].
Eigen::MatrixXd fused_inference(const Eigen::MatrixXd& xray_scores, const Eigen::MatrixXd& ecg_scores,
                                double weight = 0.5);

/// Indices of samples whose x-ray and ECG are at most `max_gap_days` apart.
std::vector<std::size_t> fusable_pairs(const Dataset& data, const std::vector<std::size_t>& indices,
                                       int max_gap_days = kFusedMaxGapDays);

// --- Embedding with a trained model ------------------------------------------------

/// Projected embeddings in eval mode, one row per sample (or text).
Eigen::MatrixXd embed_images(const TrainedModel& m, const std::vector<EncodedSample>& samples, int batch_size = 32);
Eigen::MatrixXd embed_ecgs(const TrainedModel& m, const std::vector<EncodedSample>& samples, int batch_size = 32);
Eigen::MatrixXd embed_reports(const TrainedModel& m, const std::vector<EncodedSample>& samples, int batch_size = 32);
/// Free text is tokenized as an x-ray note with an empty ECG note.
Eigen::MatrixXd embed_texts(const TrainedModel& m, const std::vector<std::string>& texts, int batch_size = 32);

/// Bank of the given class names with default_prompts, embedded with `m`.
PromptBank build_prompt_bank(const TrainedModel& m, const std::vector<std::string>& class_names);
/// Bank from explicit prompts per class.
PromptBank build_prompt_bank(const TrainedModel& m, const std::vector<std::string>& class_names,
                             const std::vector<std::vector<std::string>>& prompts);

// --- TSV output --------------------------------------------------------------------

struct MetricRow {
  std::string metric;
  std::string class_name;
  double value = 0.0;
};

/// Header "metric\tclass\tvalue", values with 17 significant digits.
void write_metrics_tsv(const std::filesystem::path& path, const std::vector<MetricRow>& rows);
void write_metrics_tsv(std::ostream& out, const std::vector<MetricRow>& rows);

struct RetrievalRow {
  std::string query_id;
  int rank = 0;
  std::string corpus_id;
  double similarity = 0.0;
  bool label_match = false;
};

/// Header "query_id\trank\tcorpus_id\tsimilarity\tlabel_match".
void write_retrieval_tsv(const std::filesystem::path& path, const std::vector<RetrievalRow>& rows);
void write_retrieval_tsv(std::ostream& out, const std::vector<RetrievalRow>& rows);

}  // namespace more
