#include "more/trainer.hpp"

#include <cmath>
#include <sstream>

#include <json.hpp>

#include "more/errors.hpp"

namespace more {

namespace {

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::logic_error&) {
  }
  throw SchemaError("bad number for " + what + ": " + s);
}

std::string join_lines(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "\n" : "") + v[i];
  return out;
}

std::vector<std::string> split_lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string line;
  while (std::getline(is, line)) out.push_back(line);
  return out;
}

/// Consecutive chunks of `batch`; a final chunk of one element joins the
/// previous chunk (a single row makes batch statistics degenerate).
std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, std::size_t batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch)));
  if (out.size() > 1 && out.back().size() < 2) {
    out[out.size() - 2].insert(out[out.size() - 2].end(), out.back().begin(), out.back().end());
    out.pop_back();
  }
  return out;
}

std::vector<const EncodedSample*> gather(const std::vector<EncodedSample>& samples, const std::vector<std::size_t>& ids) {
  std::vector<const EncodedSample*> out;
  out.reserve(ids.size());
  for (std::size_t i : ids) out.push_back(&samples[i]);
  return out;
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

Checkpoint params_snapshot(const MoreModel<float>& model) {
  Checkpoint c;
  put_params(c, model.parameters());
  return c;
}

TrainedModel clone(const TrainedModel& src) {
  TrainedModel out{MoreModel<float>(src.model.cfg, 0), src.tokenizer, src.image_stats, src.class_names};
  auto params = out.model.parameters();
  read_params(params_snapshot(src.model), params);
  return out;
}

Tensor<float> branch_features(const MoreModel<float>& model, Branch branch, const std::vector<const EncodedSample*>& batch,
                              const ImageStats& stats, bool head_training) {
  if (branch == Branch::image) {
    const auto x = image_batch<float>(normalized_images(batch, stats, nullptr, nullptr));
    return model.image_head.project(model.image.forward(x, false, nullptr), head_training);
  }
  const auto x = ecg_batch<float>(batch_ecgs(batch, nullptr, nullptr));
  return model.ecg_head.project(model.ecg.forward(x, false, nullptr), head_training);
}

}  // namespace

// --- AdamW ------------------------------------------------------------------

template <typename S>
AdamW<S>::AdamW(const ParamList<S>& params, AdamOptions opt_) : opt(opt_) {
  for (const auto& p : params)
    if (!p.buffer && p.tensor.requires_grad()) add(p.path, p.tensor, p.tensor.rank() >= 2);
}

template <typename S>
void AdamW<S>::add(const std::string& path, const Tensor<S>& param, bool decay) {
  AdamSlot<S> s;
  s.path = path;
  s.param = param;
  s.decay = decay;
  s.m = Eigen::ArrayXd::Zero(param.size());
  s.v = Eigen::ArrayXd::Zero(param.size());
  slots.push_back(std::move(s));
}

template <typename S>
void AdamW<S>::step() {
  for (const auto& s : slots)
    if (s.param.has_grad() && !s.param.grad().allFinite()) throw NumericError("non-finite gradient in " + s.path);
  ++steps;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(steps));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(steps));
  for (auto& s : slots) {
    const Eigen::ArrayXd g =
        s.param.has_grad() ? Eigen::ArrayXd(s.param.grad().template cast<double>()) : Eigen::ArrayXd::Zero(s.m.size());
    s.m = opt.beta1 * s.m + (1 - opt.beta1) * g;
    s.v = opt.beta2 * s.v + (1 - opt.beta2) * g.square();
    Eigen::ArrayXd w = s.param.value().template cast<double>();
    if (s.decay) w -= opt.lr * opt.weight_decay * w;
    w -= opt.lr * (s.m / bc1) / ((s.v / bc2).sqrt() + opt.eps);
    s.param.mutable_value() = w.cast<S>();
  }
}

template <typename S>
void AdamW<S>::zero_grad() {
  for (auto& s : slots) s.param.zero_grad();
}

template <typename S>
void AdamW<S>::save(Checkpoint& ckpt) const {
  ckpt.meta["adam.steps"] = std::to_string(steps);
  for (const auto& s : slots) {
    ckpt.put("adam.m." + s.path, Tensor<double>(s.param.shape(), s.m));
    ckpt.put("adam.v." + s.path, Tensor<double>(s.param.shape(), s.v));
  }
}

template <typename S>
void AdamW<S>::load(const Checkpoint& ckpt) {
  steps = std::stol(ckpt.get("adam.steps"));
  for (auto& s : slots) {
    Tensor<double> m = Tensor<double>::zeros(s.param.shape()), v = Tensor<double>::zeros(s.param.shape());
    ckpt.read_into("adam.m." + s.path, m);
    ckpt.read_into("adam.v." + s.path, v);
    s.m = m.value();
    s.v = v.value();
  }
}

template <typename S>
double accumulate_and_step(AdamW<S>& opt, const std::vector<std::function<Tensor<S>()>>& micro_batches) {
  if (micro_batches.empty()) throw ParameterError("no micro-batches to accumulate");
  const auto n = static_cast<double>(micro_batches.size());
  double total = 0.0;
  for (const auto& f : micro_batches) {
    const Tensor<S> loss = f();
    const double v = static_cast<double>(loss.item());
    if (!std::isfinite(v)) {
      opt.zero_grad();
      throw NumericError("non-finite loss during accumulation");
    }
    loss.backward(Tensor<S>::Array::Constant(1, static_cast<S>(1.0 / n)));
    total += v;
  }
  try {
    opt.step();
  } catch (...) {
    opt.zero_grad();
    throw;
  }
  opt.zero_grad();
  return total / n;
}

template class AdamW<float>;
template class AdamW<double>;
template double accumulate_and_step<float>(AdamW<float>&, const std::vector<std::function<Tensor<float>()>>&);
template double accumulate_and_step<double>(AdamW<double>&, const std::vector<std::function<Tensor<double>()>>&);

// --- Early stopping ----------------------------------------------------------

EarlyStopping::EarlyStopping(int patience) : patience_(patience) {
  if (patience < 1) throw ParameterError("patience must be at least 1");
}

bool EarlyStopping::update(double value) {
  if (best_index_ < 0 || value < best_) {
    best_ = value;
    best_index_ = seen_;
    since_best_ = 0;
  } else {
    ++since_best_;
  }
  ++seen_;
  return since_best_ >= patience_;
}

int early_stop_epoch(const std::vector<double>& history, int patience) {
  EarlyStopping stop(patience);
  for (std::size_t i = 0; i < history.size(); ++i)
    if (stop.update(history[i])) return static_cast<int>(i) + 1;
  return -1;
}

// --- Configuration ------------------------------------------------------------

FinetuneMode parse_finetune_mode(const std::string& s) {
  if (s == "linear_probe") return FinetuneMode::linear_probe;
  if (s == "last_k_qkv") return FinetuneMode::last_k_qkv;
  throw ParameterError("unknown fine-tune mode " + s);
}

std::string to_string(FinetuneMode m) { return m == FinetuneMode::linear_probe ? "linear_probe" : "last_k_qkv"; }

Branch parse_branch(const std::string& s) {
  if (s == "image") return Branch::image;
  if (s == "ecg") return Branch::ecg;
  throw ParameterError("unknown branch " + s);
}

std::string to_string(Branch b) { return b == Branch::image ? "image" : "ecg"; }

LabelMode parse_label_mode(const std::string& s) {
  if (s == "multilabel") return LabelMode::multilabel;
  if (s == "multiclass") return LabelMode::multiclass;
  throw ParameterError("unknown label mode " + s);
}

std::string to_string(LabelMode m) { return m == LabelMode::multilabel ? "multilabel" : "multiclass"; }

void TrainConfig::validate() const {
  if (!(lr >= 0)) throw ParameterError("lr must be non-negative");
  if (!(weight_decay >= 0)) throw ParameterError("weight_decay must be non-negative");
  if (accumulation_steps < 1) throw ParameterError("accumulation_steps must be at least 1");
  if (batch_size < 2) throw ParameterError("batch_size must be at least 2");
  if (max_epochs < 1) throw ParameterError("max_epochs must be at least 1");
  if (patience < 1) throw ParameterError("patience must be at least 1");
  if (!(val_fraction >= 0 && val_fraction < 1)) throw ParameterError("val_fraction must be in [0,1)");
  if (!(sentence_prob >= 0 && sentence_prob <= 1)) throw ParameterError("sentence_prob must be in [0,1]");
  augment_cfg.validate();
}

std::string TrainConfig::serialize() const {
  std::ostringstream os;
  os.precision(17);
  os << "lr=" << lr << "\nweight_decay=" << weight_decay << "\naccumulation_steps=" << accumulation_steps
     << "\nbatch_size=" << batch_size << "\nmax_epochs=" << max_epochs << "\npatience=" << patience
     << "\nseed=" << seed << "\nval_fraction=" << val_fraction << "\naugment=" << (augment ? 1 : 0)
     << "\nsentence_prob=" << sentence_prob << '\n';
  return os.str();
}

void FinetuneConfig::validate() const {
  if (k_last_layers < 1) throw ParameterError("k_last_layers must be at least 1");
  if (!(lr >= 0) || !(weight_decay >= 0)) throw ParameterError("lr and weight_decay must be non-negative");
  if (batch_size < 2) throw ParameterError("batch_size must be at least 2");
  if (epochs < 1) throw ParameterError("epochs must be at least 1");
}

std::string to_json_line(const EpochLog& e) {
  nlohmann::ordered_json j;
  j["epoch"] = e.epoch;
  j["split"] = e.split;
  j["loss"] = e.loss;
  j["tau"] = e.tau;
  j["lr"] = e.lr;
  return j.dump();
}

// --- Data preparation ----------------------------------------------------------

std::vector<TokenId> encode_reports(const TripleSample& s, const Tokenizer& tok, Index max_length) {
  return join_reports(clean_report(s.xray_note, Modality::xray), clean_report(s.ecg_note, Modality::ecg), tok,
                      static_cast<int>(max_length));
}

std::vector<std::string> split_sentences(const std::string& text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('.', start);
    if (end == std::string::npos) end = text.size();
    std::string part = text.substr(start, end - start);
    const auto b = part.find_first_not_of(" \t\n");
    if (b != std::string::npos) out.push_back(part.substr(b, part.find_last_not_of(" \t\n") - b + 1));
    start = end + 1;
  }
  return out;
}

Tokenizer build_tokenizer(const Dataset& data, const std::vector<std::size_t>& indices) {
  std::vector<std::string> corpus;
  for (std::size_t i : indices) {
    corpus.push_back(clean_report(data.samples[i].xray_note, Modality::xray));
    corpus.push_back(clean_report(data.samples[i].ecg_note, Modality::ecg));
  }
  return Tokenizer::build(corpus);
}

std::vector<EncodedSample> encode_samples(const Dataset& data, const std::vector<std::size_t>& indices,
                                          const Tokenizer& tok, Index max_length) {
  std::vector<EncodedSample> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    const auto& s = data.samples.at(i);
    if (s.ecg.leads.rows() != kEcgLeads || s.image.pixels.size() == 0) throw SchemaError("sample payloads not loaded");
    std::vector<std::vector<TokenId>> sentences;
    for (const auto& sentence : split_sentences(clean_report(s.xray_note, Modality::xray)))
      sentences.push_back(join_reports(sentence, "", tok, static_cast<int>(max_length)));
    out.push_back({s.image, s.ecg, encode_reports(s, tok, max_length), std::move(sentences), s.labels, s.class_id()});
  }
  return out;
}

std::vector<Eigen::MatrixXd> normalized_images(const std::vector<const EncodedSample*>& batch, const ImageStats& stats,
                                               const AugmentConfig* augment, Rng* rng) {
  std::vector<Eigen::MatrixXd> out;
  out.reserve(batch.size());
  for (const auto* s : batch)
    out.push_back(xray_normalize(augment ? augment_xray(s->image, *augment, *rng) : s->image, stats.mean, stats.stddev));
  return out;
}

std::vector<EcgRecord> batch_ecgs(const std::vector<const EncodedSample*>& batch, const AugmentConfig* augment,
                                  Rng* rng) {
  std::vector<EcgRecord> out;
  out.reserve(batch.size());
  for (const auto* s : batch) out.push_back(augment ? augment_ecg(s->ecg, *augment, *rng) : s->ecg);
  return out;
}

std::vector<std::vector<TokenId>> batch_text(const std::vector<const EncodedSample*>& batch) {
  std::vector<std::vector<TokenId>> rows;
  rows.reserve(batch.size());
  for (const auto* s : batch) rows.push_back(s->text);
  return pad_batch(std::move(rows));
}

std::vector<std::vector<TokenId>> sampled_text(const std::vector<const EncodedSample*>& batch, double sentence_prob,
                                               Rng& rng) {
  std::vector<std::vector<TokenId>> rows;
  rows.reserve(batch.size());
  for (const auto* s : batch) {
    if (rng.bernoulli(sentence_prob) && !s->sentences.empty())
      rows.push_back(s->sentences[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(s->sentences.size()) - 1))]);
    else
      rows.push_back(s->text);
  }
  return pad_batch(std::move(rows));
}

// --- Pretraining -------------------------------------------------------------------

double evaluate_loss(const MoreModel<float>& model, const std::vector<EncodedSample>& samples, const ImageStats& stats,
                     int batch_size) {
  if (samples.empty()) throw ParameterError("no samples to evaluate");
  NoGradGuard guard;
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& ids : make_batches(iota(samples.size()), static_cast<std::size_t>(batch_size))) {
    const auto batch = gather(samples, ids);
    const auto loss = model.loss(image_batch<float>(normalized_images(batch, stats, nullptr, nullptr)),
                                 ecg_batch<float>(batch_ecgs(batch, nullptr, nullptr)), batch_text(batch), false, nullptr);
    total += static_cast<double>(loss.item()) * static_cast<double>(ids.size());
    count += ids.size();
  }
  return total / static_cast<double>(count);
}

PretrainResult pretrain(const Dataset& data, ModelConfig model_cfg, const TrainConfig& cfg, std::ostream* log,
                        const std::optional<std::filesystem::path>& failure_path) {
  cfg.validate();
  if (data.samples.empty()) throw ParameterError("empty dataset");
  PretrainResult result;
  std::tie(result.train_indices, result.val_indices) = subject_split(data, cfg.val_fraction, cfg.seed);
  if (result.train_indices.size() < 2) throw ParameterError("training split needs at least two samples");

  const Tokenizer tok = build_tokenizer(data, result.train_indices);
  model_cfg.vocab_size = static_cast<Index>(tok.size());
  std::vector<ImageRecord> train_images;
  for (std::size_t i : result.train_indices) train_images.push_back(data.samples[i].image);
  const ImageStats stats = compute_image_stats(train_images);
  const auto train = encode_samples(data, result.train_indices, tok, model_cfg.text_max_length);
  const auto val = encode_samples(data, result.val_indices, tok, model_cfg.text_max_length);

  TrainedModel current{MoreModel<float>(model_cfg, cfg.seed), tok, stats, data.class_names};
  MoreModel<float>& model = current.model;
  AdamW<float> opt(model.parameters(), {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  EarlyStopping stop(cfg.patience);
  Checkpoint best = params_snapshot(model), last_good = best;
  const Rng root(cfg.seed);
  const AugmentConfig* augment = cfg.augment ? &cfg.augment_cfg : nullptr;

  auto emit = [&](const EpochLog& e) {
    result.log.push_back(e);
    if (log) *log << to_json_line(e) << '\n';
  };

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng rng = root.split(static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order;
    for (int i : rng.permutation(static_cast<int>(train.size()))) order.push_back(static_cast<std::size_t>(i));
    const auto batches = make_batches(order, static_cast<std::size_t>(cfg.batch_size));
    double train_loss = 0.0;
    try {
      for (std::size_t g = 0; g < batches.size(); g += static_cast<std::size_t>(cfg.accumulation_steps)) {
        std::vector<std::function<Tensor<float>()>> micro;
        for (std::size_t b = g; b < std::min(batches.size(), g + static_cast<std::size_t>(cfg.accumulation_steps)); ++b)
          micro.push_back([&, b] {
            const auto batch = gather(train, batches[b]);
            const auto images = image_batch<float>(normalized_images(batch, stats, augment, &rng));
            const auto ecgs = ecg_batch<float>(batch_ecgs(batch, augment, &rng));
            const auto text = sampled_text(batch, cfg.sentence_prob, rng);
            return model.loss(images, ecgs, text, true, &rng);
          });
        train_loss += accumulate_and_step(opt, micro) * static_cast<double>(micro.size());
        model.tau.clamp();
      }
    } catch (const NumericError&) {
      if (failure_path) {
        TrainedModel good = clone(current);
        auto params = good.model.parameters();
        read_params(last_good, params);
        save_checkpoint(*failure_path, make_checkpoint(good, cfg.serialize(), epoch - 1));
      }
      throw;
    }
    train_loss /= static_cast<double>(batches.size());
    emit({epoch, "train", train_loss, model.tau.value(), cfg.lr});

    const double val_loss = val.empty() ? evaluate_loss(model, train, stats, cfg.batch_size)
                                        : evaluate_loss(model, val, stats, cfg.batch_size);
    emit({epoch, "val", val_loss, model.tau.value(), cfg.lr});
    result.epochs_run = epoch;
    last_good = params_snapshot(model);
    const bool halt = stop.update(val_loss);
    if (stop.improved()) {
      best = last_good;
      result.best_epoch = epoch;
    }
    if (halt) break;
  }

  result.best = TrainedModel{MoreModel<float>(model_cfg, cfg.seed), tok, stats, data.class_names};
  auto params = result.best.model.parameters();
  read_params(best, params);
  return result;
}

// --- Fine-tuning ----------------------------------------------------------------------

FinetuneResult finetune(const TrainedModel& base, const Dataset& data, const std::vector<std::size_t>& indices,
                        const FinetuneConfig& cfg, std::ostream* log) {
  cfg.validate();
  if (indices.size() < 2) throw ParameterError("fine-tuning needs at least two samples");
  const std::size_t n_classes = base.class_names.size();
  for (std::size_t i : indices) {
    const auto& s = data.samples.at(i);
    if (s.labels.size() != n_classes) throw ParameterError("label arity differs from the model's class list");
    if (cfg.labels == LabelMode::multiclass && s.class_id() < 0)
      throw ParameterError("multiclass fine-tuning needs exactly one positive label per sample");
  }

  FinetuneResult result;
  result.trained = clone(base);
  MoreModel<float>& model = result.trained.model;
  const Index depth = (cfg.branch == Branch::image ? model.cfg.image : model.cfg.ecg).depth;
  if (cfg.mode == FinetuneMode::last_k_qkv && cfg.k_last_layers > depth)
    throw ParameterError("k_last_layers exceeds encoder depth");

  const std::string enc = cfg.branch == Branch::image ? "image." : "ecg.";
  const std::string head = cfg.branch == Branch::image ? "image_head." : "ecg_head.";
  ParamList<float> params = model.parameters();
  ParamList<float> trainable;
  for (auto& p : params) {
    bool train = !p.buffer && p.path.starts_with(head);
    if (cfg.mode == FinetuneMode::last_k_qkv && p.path.starts_with(enc + "blocks.")) {
      const auto rest = p.path.substr(enc.size() + 7);
      const Index layer = std::stol(rest.substr(0, rest.find('.')));
      const auto tail = rest.substr(rest.find('.') + 1);
      if (layer >= depth - cfg.k_last_layers && (tail == "attn.q.weight" || tail == "attn.k.weight" || tail == "attn.v.weight"))
        train = true;
    }
    p.tensor.set_requires_grad(train);
    if (train) trainable.push_back(p);
  }

  Rng root(cfg.seed);
  Rng init = root.split(0);
  result.classifier.branch = cfg.branch;
  result.classifier.labels = cfg.labels;
  result.classifier.fc = Linear<float>(model.cfg.proj_dim, static_cast<Index>(n_classes), true, init);
  result.classifier.fc.collect("classifier.fc", trainable);
  AdamW<float> opt(trainable, {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});

  const auto samples = encode_samples(data, indices, base.tokenizer, model.cfg.text_max_length);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng = root.split(static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order;
    for (int i : rng.permutation(static_cast<int>(samples.size()))) order.push_back(static_cast<std::size_t>(i));
    const auto batches = make_batches(order, static_cast<std::size_t>(cfg.batch_size));
    double total = 0.0;
    for (const auto& ids : batches) {
      const auto batch = gather(samples, ids);
      std::function<Tensor<float>()> f = [&] {
        const auto logits = result.classifier.fc.forward(branch_features(model, cfg.branch, batch, base.image_stats, true));
        if (cfg.labels == LabelMode::multiclass) {
          std::vector<Index> classes;
          for (const auto* s : batch) classes.push_back(s->class_id);
          return cross_entropy(logits, classes);
        }
        Tensor<float>::Array t(static_cast<Index>(batch.size() * n_classes));
        for (std::size_t r = 0; r < batch.size(); ++r)
          for (std::size_t c = 0; c < n_classes; ++c)
            t[static_cast<Index>(r * n_classes + c)] = static_cast<float>(batch[r]->labels[c]);
        return bce_with_logits(logits, Tensor<float>({static_cast<Index>(batch.size()), static_cast<Index>(n_classes)}, t));
      };
      total += accumulate_and_step(opt, {f});
    }
    const EpochLog e{epoch, "finetune", total / static_cast<double>(batches.size()), model.tau.value(), cfg.lr};
    result.log.push_back(e);
    if (log) *log << to_json_line(e) << '\n';
  }
  return result;
}

Eigen::MatrixXd classify(const TrainedModel& trained, const Classifier& clf, const std::vector<EncodedSample>& samples,
                         int batch_size) {
  NoGradGuard guard;
  Eigen::MatrixXd out(static_cast<Index>(samples.size()), clf.fc.weight.dim(1));
  Index row = 0;
  for (const auto& ids : make_batches(iota(samples.size()), static_cast<std::size_t>(std::max(batch_size, 2)))) {
    const auto logits =
        clf.fc.forward(branch_features(trained.model, clf.branch, gather(samples, ids), trained.image_stats, false));
    out.middleRows(row, logits.dim(0)) = logits.matrix().cast<double>();
    row += logits.dim(0);
  }
  return out;
}

// --- Checkpoints -----------------------------------------------------------------------

Checkpoint make_checkpoint(const TrainedModel& trained, const std::string& train_config, int epoch,
                           const AdamW<float>* opt, const Classifier* clf) {
  Checkpoint c;
  const std::string model_cfg = trained.model.cfg.serialize();
  c.meta["model_config"] = model_cfg;
  c.meta["config_digest"] = digest_hex(model_cfg + train_config);
  c.meta["vocab"] = join_lines(trained.tokenizer.vocab());
  c.meta["class_names"] = join_lines(trained.class_names);
  c.meta["image_mean"] = fmt_double(trained.image_stats.mean);
  c.meta["image_std"] = fmt_double(trained.image_stats.stddev);
  c.meta["epoch"] = std::to_string(epoch);
  put_params(c, trained.model.parameters());
  if (opt) opt->save(c);
  if (clf) {
    c.meta["classifier.branch"] = to_string(clf->branch);
    c.meta["classifier.labels"] = clf->labels == LabelMode::multilabel ? "multilabel" : "multiclass";
    ParamList<float> p;
    clf->fc.collect("classifier.fc", p);
    put_params(c, p);
  }
  return c;
}

TrainedModel model_from_checkpoint(const Checkpoint& ckpt) {
  const ModelConfig cfg = ModelConfig::parse(ckpt.get("model_config"));
  TrainedModel t{MoreModel<float>(cfg, 0), Tokenizer::from_vocab(split_lines(ckpt.get("vocab"))),
                 {parse_double(ckpt.get("image_mean"), "image_mean"), parse_double(ckpt.get("image_std"), "image_std")},
                 split_lines(ckpt.get("class_names"))};
  auto params = t.model.parameters();
  read_params(ckpt, params);
  return t;
}

std::optional<Classifier> classifier_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.meta.count("classifier.branch")) return std::nullopt;
  Classifier clf;
  clf.branch = parse_branch(ckpt.get("classifier.branch"));
  try {
    clf.labels = parse_label_mode(ckpt.get("classifier.labels"));
  } catch (const ParameterError& e) {
    throw SchemaError(e.what());
  }
  const auto* w = ckpt.find("classifier.fc.weight");
  if (!w || w->shape.size() != 2) throw SchemaError("classifier weight missing");
  clf.fc.weight = Tensor<float>::zeros(w->shape);
  clf.fc.bias = Tensor<float>::zeros({w->shape[1]});
  ckpt.read_into("classifier.fc.weight", clf.fc.weight);
  ckpt.read_into("classifier.fc.bias", clf.fc.bias);
  return clf;
}

}  // namespace more
