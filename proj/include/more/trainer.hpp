#pragma once

// Optimizer, accumulation, early stopping, and the pretraining and
// fine-tuning loops.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "more/checkpoint.hpp"
#include "more/dataset.hpp"
#include "more/model.hpp"
#include "more/text.hpp"

namespace more {

// --- AdamW ------------------------------------------------------------------

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <typename S>
struct AdamSlot {
  std::string path;
  Tensor<S> param;
  bool decay = true;
  Eigen::ArrayXd m, v;
};

/// Adam with decoupled weight decay: w -= lr * wd * w, then the adaptive
/// step with bias-corrected moments. Moments are kept in double.
template <typename S>
class AdamW {
 public:
  AdamW() = default;
  /// Registers every trainable, non-buffer tensor. Only tensors of rank >= 2
  /// are decayed.
  AdamW(const ParamList<S>& params, AdamOptions opt);

  void add(const std::string& path, const Tensor<S>& param, bool decay);
  /// One update from the current gradients (a missing gradient counts as
  /// zero). Throws NumericError naming the tensor on a non-finite gradient.
  void step();
  void zero_grad();

  void save(Checkpoint& ckpt) const;
  void load(const Checkpoint& ckpt);

  AdamOptions opt;
  long steps = 0;
  std::vector<AdamSlot<S>> slots;
};

/// Runs every micro-batch loss, backpropagates each scaled by 1/n so the
/// gradients are averaged, then takes one optimizer step and zeroes the
/// gradients. Returns the mean micro-batch loss.
template <typename S>
double accumulate_and_step(AdamW<S>& opt, const std::vector<std::function<Tensor<S>()>>& micro_batches);

// --- Early stopping ----------------------------------------------------------

/// Stops once `patience` consecutive values fail to improve strictly on the best.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience);
  /// Records one value; returns true when training should stop.
  bool update(double value);
  bool improved() const { return since_best_ == 0; }
  double best() const { return best_; }
  int best_index() const { return best_index_; }

 private:
  int patience_;
  int seen_ = 0;
  int since_best_ = 0;
  int best_index_ = -1;
  double best_ = 0.0;
};

/// 1-based epoch at which a run with this validation history stops, or -1
/// when it never triggers.
int early_stop_epoch(const std::vector<double>& history, int patience);

// --- Configuration ------------------------------------------------------------

enum class FinetuneMode { linear_probe, last_k_qkv };
enum class Branch { image, ecg };
enum class LabelMode { multilabel, multiclass };

FinetuneMode parse_finetune_mode(const std::string& s);
std::string to_string(FinetuneMode m);
Branch parse_branch(const std::string& s);
std::string to_string(Branch b);
LabelMode parse_label_mode(const std::string& s);
std::string to_string(LabelMode m);

struct TrainConfig {
  double lr = 3e-3;
  double weight_decay = 0.1;
  int accumulation_steps = 4;
  int batch_size = 32;
  int max_epochs = 50;
  int patience = 10;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;
  bool augment = true;
  AugmentConfig augment_cfg;
  /// Chance that a training sample's text is one sentence of its x-ray note
  /// instead of the joined reports.
  double sentence_prob = 0.3;

  /// Throws ParameterError on non-positive sizes or rates out of range.
  void validate() const;
  std::string serialize() const;
};

struct FinetuneConfig {
  FinetuneMode mode = FinetuneMode::linear_probe;
  int k_last_layers = 1;
  Branch branch = Branch::image;
  LabelMode labels = LabelMode::multilabel;
  double lr = 3e-3;
  double weight_decay = 0.02;
  int batch_size = 32;
  int epochs = 20;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochLog {
  int epoch = 0;
  std::string split;
  double loss = 0.0;
  double tau = 0.0;
  double lr = 0.0;
};

/// {"epoch":1,"split":"train","loss":...,"tau":...,"lr":...}
std::string to_json_line(const EpochLog& e);

// --- Data preparation ----------------------------------------------------------

/// Everything the model consumes for one triple. `image` is the equalized
/// image before normalization so augmentation can act on it.
struct EncodedSample {
  ImageRecord image;
  EcgRecord ecg;
  std::vector<TokenId> text;
  /// Each sentence of the cleaned x-ray note, encoded like free text.
  std::vector<std::vector<TokenId>> sentences;
  std::vector<int> labels;
  int class_id = -1;
};

/// clean_report on both notes, then join_reports.
std::vector<TokenId> encode_reports(const TripleSample& s, const Tokenizer& tok, Index max_length);
/// Sentences of a cleaned note split at '.', trimmed, without the period.
std::vector<std::string> split_sentences(const std::string& text);
/// Tokenizer over the cleaned notes of the given samples.
Tokenizer build_tokenizer(const Dataset& data, const std::vector<std::size_t>& indices);
/// `data` must already hold prepared payloads (prepare_sample).
std::vector<EncodedSample> encode_samples(const Dataset& data, const std::vector<std::size_t>& indices,
                                          const Tokenizer& tok, Index max_length);

/// Normalized images of the given samples, optionally augmented.
std::vector<Eigen::MatrixXd> normalized_images(const std::vector<const EncodedSample*>& batch, const ImageStats& stats,
                                               const AugmentConfig* augment, Rng* rng);
std::vector<EcgRecord> batch_ecgs(const std::vector<const EncodedSample*>& batch, const AugmentConfig* augment,
                                  Rng* rng);
std::vector<std::vector<TokenId>> batch_text(const std::vector<const EncodedSample*>& batch);
/// Like batch_text, but each row is replaced by one uniformly drawn sentence
/// with probability `sentence_prob`.
std::vector<std::vector<TokenId>> sampled_text(const std::vector<const EncodedSample*>& batch, double sentence_prob,
                                               Rng& rng);

// --- Pretraining -------------------------------------------------------------------

/// A trained model with everything needed to reuse it.
struct TrainedModel {
  MoreModel<float> model;
  Tokenizer tokenizer;
  ImageStats image_stats;
  std::vector<std::string> class_names;
};

struct PretrainResult {
  TrainedModel best;
  std::vector<EpochLog> log;
  int best_epoch = 0;
  int epochs_run = 0;
  std::vector<std::size_t> train_indices, val_indices;
};

/// Seeded subject-level validation split, tokenizer and image statistics from
/// the training side, then per epoch: shuffle, augment, accumulate and step,
/// validation loss, best-model retention and early stopping. `data` must hold
/// prepared payloads. Log lines go to `log` when given. A non-finite loss
/// throws NumericError after saving the last good model to `failure_path`
/// (when given).
PretrainResult pretrain(const Dataset& data, ModelConfig model_cfg, const TrainConfig& cfg, std::ostream* log = nullptr,
                        const std::optional<std::filesystem::path>& failure_path = std::nullopt);

/// Mean contrastive loss in eval mode over consecutive batches.
double evaluate_loss(const MoreModel<float>& model, const std::vector<EncodedSample>& samples, const ImageStats& stats,
                     int batch_size);

// --- Fine-tuning ----------------------------------------------------------------------

/// Projection head of the branch followed by a linear classifier.
struct Classifier {
  Branch branch = Branch::image;
  LabelMode labels = LabelMode::multilabel;
  Linear<float> fc;
};

struct FinetuneResult {
  TrainedModel trained;
  Classifier classifier;
  std::vector<EpochLog> log;
};

/// Encoders run in eval mode. linear_probe trains the branch projection
/// head and the classifier; last_k_qkv also trains the q/k/v weights of the
/// last k blocks of the branch encoder. Everything else keeps its values.
FinetuneResult finetune(const TrainedModel& base, const Dataset& data, const std::vector<std::size_t>& indices,
                        const FinetuneConfig& cfg, std::ostream* log = nullptr);

/// Classifier logits [N, C] in eval mode for the given samples.
Eigen::MatrixXd classify(const TrainedModel& trained, const Classifier& clf, const std::vector<EncodedSample>& samples,
                         int batch_size = 32);

// --- Checkpoints -----------------------------------------------------------------------

/// Parameters, tokenizer, image statistics and class names; the config digest
/// covers the model config and `train_config`.
Checkpoint make_checkpoint(const TrainedModel& trained, const std::string& train_config, int epoch,
                           const AdamW<float>* opt = nullptr, const Classifier* clf = nullptr);
TrainedModel model_from_checkpoint(const Checkpoint& ckpt);
/// Classifier stored in the checkpoint, if any.
std::optional<Classifier> classifier_from_checkpoint(const Checkpoint& ckpt);

}  // namespace more
