#include "more/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "more/errors.hpp"

namespace more {

namespace {

void check_scored(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ParameterError("scores and labels differ in length");
  for (double s : scores)
    if (!std::isfinite(s)) throw ParameterError("scores must be finite");
  for (int l : labels)
    if (l != 0 && l != 1) throw ParameterError("labels must be 0 or 1");
}

Eigen::MatrixXd normalize_rows(const Eigen::MatrixXd& m) {
  Eigen::MatrixXd out = m;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (!(n > 0)) throw NumericError("zero-norm embedding");
    out.row(i) /= n;
  }
  return out;
}

std::vector<Eigen::Index> ranked(const Eigen::VectorXd& sims) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(sims.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return sims[a] > sims[b]; });
  return order;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::vector<std::vector<std::size_t>> chunks(std::size_t n, int batch) {
  std::vector<std::vector<std::size_t>> out;
  const auto b = static_cast<std::size_t>(std::max(batch, 2));
  for (std::size_t i = 0; i < n; i += b) {
    std::vector<std::size_t> c;
    for (std::size_t j = i; j < std::min(n, i + b); ++j) c.push_back(j);
    out.push_back(std::move(c));
  }
  return out;
}

template <typename F>
Eigen::MatrixXd embed_rows(std::size_t n, int batch, Eigen::Index dim, F&& f) {
  NoGradGuard guard;
  Eigen::MatrixXd out(static_cast<Eigen::Index>(n), dim);
  Eigen::Index row = 0;
  for (const auto& ids : chunks(n, batch)) {
    const Tensor<float> z = f(ids);
    out.middleRows(row, z.dim(0)) = z.matrix().cast<double>();
    row += z.dim(0);
  }
  return out;
}

std::vector<const EncodedSample*> pick_samples(const std::vector<EncodedSample>& s, const std::vector<std::size_t>& ids) {
  std::vector<const EncodedSample*> out;
  for (std::size_t i : ids) out.push_back(&s[i]);
  return out;
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
  check_scored(scores, labels);
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Mid-ranks are half-integers, so the rank sum is exact in double.
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t t = i; t < j; ++t)
      if (labels[order[t]] == 1) {
        rank_sum += mid;
        ++pos;
      }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw UndefinedMetricError("AUROC needs both positive and negative labels");
  const double p = static_cast<double>(pos);
  return (rank_sum - p * (p + 1) / 2.0) / (p * static_cast<double>(neg));
}

double auprc(std::span<const double> scores, std::span<const int> labels) {
  check_scored(scores, labels);
  const std::size_t n = scores.size();
  const auto total_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (total_pos == 0) throw UndefinedMetricError("AUPRC needs at least one positive label");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  std::size_t tp = 0, seen = 0, prev_tp = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      if (labels[order[j]] == 1) ++tp;
      ++j;
    }
    seen = j;
    const double precision = static_cast<double>(tp) / static_cast<double>(seen);
    ap += static_cast<double>(tp - prev_tp) / static_cast<double>(total_pos) * precision;
    prev_tp = tp;
    i = j;
  }
  return ap;
}

double precision_at_k(const Eigen::MatrixXd& queries, std::span<const int> query_labels, const Eigen::MatrixXd& corpus,
                      std::span<const int> corpus_labels, int k) {
  if (queries.cols() != corpus.cols()) throw DimensionError("query and corpus dimensions differ");
  return precision_at_k_similarity(normalize_rows(queries) * normalize_rows(corpus).transpose(), query_labels,
                                   corpus_labels, k);
}

double precision_at_k_similarity(const Eigen::MatrixXd& sims, std::span<const int> query_labels,
                                 std::span<const int> corpus_labels, int k) {
  if (k <= 0) throw ParameterError("k must be positive");
  if (k > sims.cols()) throw ParameterError("k exceeds corpus size");
  if (sims.rows() == 0) throw ParameterError("no queries");
  if (static_cast<Eigen::Index>(query_labels.size()) != sims.rows() ||
      static_cast<Eigen::Index>(corpus_labels.size()) != sims.cols())
    throw ParameterError("label count differs from row count");
  if (!sims.allFinite()) throw ParameterError("similarities must be finite");
  double total = 0.0;
  for (Eigen::Index q = 0; q < sims.rows(); ++q) {
    const auto order = ranked(sims.row(q).transpose());
    int hits = 0;
    for (int r = 0; r < k; ++r)
      if (corpus_labels[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] ==
          query_labels[static_cast<std::size_t>(q)])
        ++hits;
    total += static_cast<double>(hits) / k;
  }
  return total / static_cast<double>(sims.rows());
}

std::vector<RetrievalHit> retrieve(const Eigen::VectorXd& query, const Eigen::MatrixXd& corpus, int top_k) {
  if (corpus.rows() == 0) throw ParameterError("empty corpus");
  if (top_k <= 0) throw ParameterError("top_k must be positive");
  if (query.size() != corpus.cols()) throw DimensionError("query and corpus dimensions differ");
  const Eigen::VectorXd sims = normalize_rows(corpus) * normalize_rows(query.transpose()).transpose();
  const auto order = ranked(sims);
  std::vector<RetrievalHit> out;
  for (std::size_t r = 0; r < std::min(order.size(), static_cast<std::size_t>(top_k)); ++r)
    out.push_back({order[r], sims[order[r]]});
  return out;
}

void PromptBank::validate() const {
  if (class_names.empty()) throw ParameterError("empty prompt bank");
  if (prompts.size() != class_names.size() || embeddings.size() != class_names.size())
    throw ParameterError("prompt bank sizes differ");
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    if (embeddings[c].rows() == 0) throw ParameterError("class " + class_names[c] + " has no prompt");
    for (Eigen::Index r = 0; r < embeddings[c].rows(); ++r)
      if (std::abs(embeddings[c].row(r).norm() - 1.0) > 1e-6) throw ParameterError("prompt embedding is not unit norm");
  }
}

std::vector<std::string> default_prompts(const std::string& class_name) { return {"Finding of " + class_name}; }

Eigen::MatrixXd zero_shot_scores(const Eigen::MatrixXd& items, const PromptBank& bank) {
  bank.validate();
  const Eigen::MatrixXd z = normalize_rows(items);
  Eigen::MatrixXd out(items.rows(), static_cast<Eigen::Index>(bank.class_names.size()));
  for (std::size_t c = 0; c < bank.class_names.size(); ++c) {
    if (bank.embeddings[c].cols() != items.cols()) throw DimensionError("prompt and item dimensions differ");
    out.col(static_cast<Eigen::Index>(c)) = (z * bank.embeddings[c].transpose()).rowwise().maxCoeff();
  }
  return out;
}

Eigen::MatrixXd fused_inference(const Eigen::MatrixXd& xray_scores, const Eigen::MatrixXd& ecg_scores, double weight) {
  if (!(weight >= 0 && weight <= 1)) throw ParameterError("fusion weight must be in [0,1]");
  if (xray_scores.rows() != ecg_scores.rows() || xray_scores.cols() != ecg_scores.cols())
    throw DimensionError("x-ray and ECG scores are not paired");
  return weight * xray_scores + (1 - weight) * ecg_scores;
}

std::vector<std::size_t> fusable_pairs(const Dataset& data, const std::vector<std::size_t>& indices, int max_gap_days) {
  std::vector<std::size_t> out;
  for (std::size_t i : indices)
    if (data.samples.at(i).gap_days <= max_gap_days) out.push_back(i);
  return out;
}

Eigen::MatrixXd embed_images(const TrainedModel& m, const std::vector<EncodedSample>& samples, int batch_size) {
  return embed_rows(samples.size(), batch_size, m.model.cfg.proj_dim, [&](const std::vector<std::size_t>& ids) {
    const auto x = image_batch<float>(normalized_images(pick_samples(samples, ids), m.image_stats, nullptr, nullptr));
    return m.model.embed_image(x, false, nullptr);
  });
}

Eigen::MatrixXd embed_ecgs(const TrainedModel& m, const std::vector<EncodedSample>& samples, int batch_size) {
  return embed_rows(samples.size(), batch_size, m.model.cfg.proj_dim, [&](const std::vector<std::size_t>& ids) {
    return m.model.embed_ecg(ecg_batch<float>(batch_ecgs(pick_samples(samples, ids), nullptr, nullptr)), false, nullptr);
  });
}

Eigen::MatrixXd embed_reports(const TrainedModel& m, const std::vector<EncodedSample>& samples, int batch_size) {
  return embed_rows(samples.size(), batch_size, m.model.cfg.proj_dim, [&](const std::vector<std::size_t>& ids) {
    return m.model.embed_text(batch_text(pick_samples(samples, ids)), false, nullptr);
  });
}

Eigen::MatrixXd embed_texts(const TrainedModel& m, const std::vector<std::string>& texts, int batch_size) {
  if (texts.empty()) throw ParameterError("no texts to embed");
  std::vector<std::vector<TokenId>> ids;
  for (const auto& t : texts)
    ids.push_back(join_reports(t, "", m.tokenizer, static_cast<int>(m.model.cfg.text_max_length)));
  return embed_rows(texts.size(), batch_size, m.model.cfg.proj_dim, [&](const std::vector<std::size_t>& rows) {
    std::vector<std::vector<TokenId>> batch;
    for (std::size_t r : rows) batch.push_back(ids[r]);
    return m.model.embed_text(pad_batch(std::move(batch)), false, nullptr);
  });
}

PromptBank build_prompt_bank(const TrainedModel& m, const std::vector<std::string>& class_names) {
  std::vector<std::vector<std::string>> prompts;
  for (const auto& c : class_names) prompts.push_back(default_prompts(c));
  return build_prompt_bank(m, class_names, prompts);
}

PromptBank build_prompt_bank(const TrainedModel& m, const std::vector<std::string>& class_names,
                             const std::vector<std::vector<std::string>>& prompts) {
  if (class_names.empty() || prompts.size() != class_names.size())
    throw ParameterError("one prompt list per class is required");
  PromptBank bank;
  bank.class_names = class_names;
  bank.prompts = prompts;
  for (const auto& p : prompts) {
    if (p.empty()) throw ParameterError("every class needs at least one prompt");
    bank.embeddings.push_back(normalize_rows(embed_texts(m, p)));
  }
  bank.validate();
  return bank;
}

void write_metrics_tsv(std::ostream& out, const std::vector<MetricRow>& rows) {
  out << "metric\tclass\tvalue\n";
  for (const auto& r : rows) out << r.metric << '\t' << r.class_name << '\t' << fmt(r.value) << '\n';
}

void write_metrics_tsv(const std::filesystem::path& path, const std::vector<MetricRow>& rows) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw MissingFileError("cannot write " + path.string());
  write_metrics_tsv(f, rows);
}

void write_retrieval_tsv(std::ostream& out, const std::vector<RetrievalRow>& rows) {
  out << "query_id\trank\tcorpus_id\tsimilarity\tlabel_match\n";
  for (const auto& r : rows)
    out << r.query_id << '\t' << r.rank << '\t' << r.corpus_id << '\t' << fmt(r.similarity) << '\t'
        << (r.label_match ? 1 : 0) << '\n';
}

void write_retrieval_tsv(const std::filesystem::path& path, const std::vector<RetrievalRow>& rows) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw MissingFileError("cannot write " + path.string());
  write_retrieval_tsv(f, rows);
}

}  // namespace more
