#include "cli.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "more/checkpoint.hpp"
#include "more/config.hpp"
#include "more/errors.hpp"
#include "more/explain.hpp"
#include "more/io.hpp"
#include "more/synthetic.hpp"

namespace more::cli {

namespace fs = std::filesystem;

namespace {

// --- small file helpers -----------------------------------------------------------

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  if (!out.empty() && !out.back().empty() && out.back().back() == '\r') out.back().pop_back();
  return out;
}

std::vector<std::vector<std::string>> read_tsv(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingFileError("cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) rows.push_back(split_tabs(line));
  if (rows.empty()) throw SchemaError(path.string() + " is empty");
  return rows;
}

double parse_double(const std::string& v, const std::string& what) {
  double out = 0.0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size()) throw SchemaError("bad number in " + what + ": '" + v + "'");
  return out;
}

int parse_int(const std::string& v, const std::string& what) {
  int out = 0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size()) throw SchemaError("bad integer in " + what + ": '" + v + "'");
  return out;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw MissingFileError("cannot write " + path.string());
  f.precision(17);
  return f;
}

/// Writes to `path`, or to `fallback` when the path is empty.
template <typename F>
void emit_to(const std::string& path, std::ostream& fallback, F&& write) {
  if (path.empty()) {
    write(fallback);
    return;
  }
  auto f = open_out(path);
  write(f);
}

Dataset load_manifest(const std::string& manifest, bool prepared) {
  if (!fs::exists(manifest)) throw MissingFileError("manifest not found: " + manifest);
  Dataset data = load_dataset(manifest);
  if (!prepared)
    for (auto& s : data.samples) s = prepare_sample(s);
  return data;
}

TrainedModel load_model(const std::string& path) { return model_from_checkpoint(load_checkpoint(path)); }

std::vector<std::size_t> all_indices(const Dataset& d) {
  std::vector<std::size_t> out(d.samples.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
  return out;
}

void require_classes(const TrainedModel& m, const Dataset& d) {
  if (d.class_names != m.class_names) throw SchemaError("manifest classes differ from the checkpoint's classes");
}

Eigen::MatrixXd class_scores(const TrainedModel& m, const std::vector<EncodedSample>& enc, const PromptBank& bank,
                             const std::string& modality, int batch) {
  if (modality == "image") return zero_shot_scores(embed_images(m, enc, batch), bank);
  return zero_shot_scores(embed_ecgs(m, enc, batch), bank);
}

PromptBank load_prompts(const TrainedModel& m, const std::string& path) {
  if (path.empty()) return build_prompt_bank(m, m.class_names);
  std::map<std::string, std::vector<std::string>> by_class;
  for (const auto& row : read_tsv(path)) {
    if (row.size() != 2) throw SchemaError("prompt lines must be class<TAB>prompt");
    if (std::find(m.class_names.begin(), m.class_names.end(), row[0]) == m.class_names.end())
      throw SchemaError("prompt for unknown class " + row[0]);
    by_class[row[0]].push_back(row[1]);
  }
  std::vector<std::vector<std::string>> prompts;
  for (const auto& c : m.class_names) {
    auto it = by_class.find(c);
    prompts.push_back(it == by_class.end() ? default_prompts(c) : it->second);
  }
  return build_prompt_bank(m, m.class_names, prompts);
}

void write_matrix_tsv(std::ostream& out, const std::vector<std::string>& ids, const std::vector<std::string>& header,
                      const Eigen::MatrixXd& values) {
  out.precision(17);
  out << "id";
  for (const auto& h : header) out << '\t' << h;
  out << '\n';
  for (Eigen::Index i = 0; i < values.rows(); ++i) {
    out << ids[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < values.cols(); ++j) out << '\t' << values(i, j);
    out << '\n';
  }
}

struct Table {
  std::vector<std::string> header, ids;
  std::vector<std::vector<std::string>> cells;
};

Table read_table(const std::string& path) {
  auto rows = read_tsv(path);
  Table t;
  t.header.assign(rows[0].begin() + 1, rows[0].end());
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() != rows[0].size()) throw SchemaError(path + ": row " + std::to_string(r) + " has the wrong width");
    t.ids.push_back(rows[r][0]);
    t.cells.emplace_back(rows[r].begin() + 1, rows[r].end());
  }
  return t;
}

// --- commands ---------------------------------------------------------------------------

int cmd_synth(const Options& o, std::ostream& out) {
  SyntheticConfig sc;
  sc.n_classes = o.classes;
  sc.n_per_class = o.per_class;
  sc.seed = resolve_seed(o.seed, 0);
  const Dataset data = gen_synthetic_triples(sc);
  fs::create_directories(o.out);
  save_dataset(o.out, data);
  out << (fs::path(o.out) / "manifest.tsv").string() << '\n';
  return kExitOk;
}

int cmd_preprocess(const Options& o, std::ostream& out) {
  const Dataset data = load_manifest(o.manifest, false);
  fs::create_directories(o.out);
  save_dataset(o.out, data);
  out << (fs::path(o.out) / "manifest.tsv").string() << '\n';
  return kExitOk;
}

int cmd_pretrain(const Options& o, std::ostream& out, std::ostream& err) {
  RunConfig cfg = RunConfig::load(o.config);
  cfg.train.seed = resolve_seed(o.seed, cfg.train.seed);
  if (o.epochs) cfg.train.max_epochs = *o.epochs;
  if (o.prepared) cfg.data.prepared = true;
  cfg.validate();
  fs::path manifest = o.manifest.empty() ? fs::path(cfg.data.manifest) : fs::path(o.manifest);
  if (o.manifest.empty() && manifest.is_relative()) manifest = fs::path(o.config).parent_path() / manifest;
  const Dataset data = load_manifest(manifest.string(), cfg.data.prepared);

  Dataset train{data.class_names, {}}, held{data.class_names, {}};
  if (cfg.data.test_fraction > 0) {
    const auto [tr, te] = stratified_split(data, cfg.data.test_fraction, cfg.data.split_seed);
    for (auto i : tr) train.samples.push_back(data.samples[i]);
    for (auto i : te) held.samples.push_back(data.samples[i]);
  } else {
    train.samples = data.samples;
  }

  std::ofstream log_file;
  std::ostream* log = &err;
  if (!o.log.empty()) {
    log_file = open_out(o.log);
    log = &log_file;
  }
  const PretrainResult r = pretrain(train, cfg.model, cfg.train, log, fs::path(o.out + ".last_good"));
  if (fs::path(o.out).has_parent_path()) fs::create_directories(fs::path(o.out).parent_path());
  save_checkpoint(o.out, make_checkpoint(r.best, cfg.serialize(), r.best_epoch));
  if (!o.heldout.empty()) {
    // Payloads are written as loaded, so the held-out set has the same `prepared` state.
    fs::create_directories(o.heldout);
    save_dataset(o.heldout, held);
  }
  out << o.out << '\n';
  return kExitOk;
}

int cmd_finetune(const Options& o, std::ostream& out, std::ostream& err) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
  FinetuneConfig& fc = cfg.finetune;
  fc.mode = parse_finetune_mode(o.mode);
  fc.k_last_layers = o.k;
  fc.branch = parse_branch(o.branch);
  fc.labels = parse_label_mode(o.labels_mode);
  if (o.epochs) fc.epochs = *o.epochs;
  if (o.lr) fc.lr = *o.lr;
  fc.seed = resolve_seed(o.seed, fc.seed);
  cfg.validate();

  const TrainedModel base = load_model(o.ckpt);
  const Dataset data = load_manifest(o.manifest, o.prepared);
  require_classes(base, data);
  std::ofstream log_file;
  std::ostream* log = &err;
  if (!o.log.empty()) {
    log_file = open_out(o.log);
    log = &log_file;
  }
  const FinetuneResult r = finetune(base, data, all_indices(data), fc, log);
  save_checkpoint(o.out, make_checkpoint(r.trained, cfg.serialize(), fc.epochs, nullptr, &r.classifier));
  out << o.out << '\n';
  return kExitOk;
}

int cmd_zeroshot(const Options& o, std::ostream& out) {
  const TrainedModel m = load_model(o.ckpt);
  const Dataset data = load_manifest(o.manifest, o.prepared);
  require_classes(m, data);
  const PromptBank bank = load_prompts(m, o.prompts);

  std::vector<std::size_t> idx = all_indices(data);
  if (o.modality == "fused") idx = fusable_pairs(data, idx, o.max_gap_days);
  if (idx.empty()) throw ParameterError("no samples to score");
  const auto enc = encode_samples(data, idx, m.tokenizer, m.model.cfg.text_max_length);
  Eigen::MatrixXd scores;
  if (o.modality == "fused")
    scores = fused_inference(class_scores(m, enc, bank, "image", 32), class_scores(m, enc, bank, "ecg", 32),
                             o.fusion_weight);
  else
    scores = class_scores(m, enc, bank, o.modality, 32);

  std::vector<std::string> ids;
  Eigen::MatrixXd labels(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(data.class_names.size()));
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto& s = data.samples[idx[r]];
    ids.push_back(o.modality == "ecg" ? s.study_id_e : s.study_id_x);
    for (std::size_t c = 0; c < s.labels.size(); ++c)
      labels(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = s.labels[c];
  }
  emit_to(o.out, out, [&](std::ostream& os) { write_matrix_tsv(os, ids, data.class_names, scores); });
  if (!o.labels_out.empty()) {
    auto f = open_out(o.labels_out);
    write_matrix_tsv(f, ids, data.class_names, labels);
  }
  return kExitOk;
}

int cmd_retrieve(const Options& o, std::ostream& out) {
  const TrainedModel m = load_model(o.ckpt);
  const Dataset data = load_manifest((fs::path(o.corpus) / "manifest.tsv").string(), o.prepared);
  require_classes(m, data);
  int query_class = -1;
  if (!o.query_class.empty()) {
    const auto it = std::find(data.class_names.begin(), data.class_names.end(), o.query_class);
    if (it == data.class_names.end()) throw SchemaError("unknown class " + o.query_class);
    query_class = static_cast<int>(it - data.class_names.begin());
  }
  const auto idx = all_indices(data);
  const auto enc = encode_samples(data, idx, m.tokenizer, m.model.cfg.text_max_length);
  const Eigen::MatrixXd corpus = o.modality == "image" ? embed_images(m, enc) : embed_ecgs(m, enc);
  const Eigen::VectorXd q = embed_texts(m, {o.query}).row(0).transpose();
  std::vector<RetrievalRow> rows;
  int rank = 0;
  for (const auto& hit : retrieve(q, corpus, o.top_k)) {
    const auto& s = data.samples[static_cast<std::size_t>(hit.index)];
    const bool match = query_class >= 0 && s.labels[static_cast<std::size_t>(query_class)] == 1;
    rows.push_back({"query", ++rank, o.modality == "image" ? s.study_id_x : s.study_id_e, hit.similarity, match});
  }
  emit_to(o.out, out, [&](std::ostream& os) { write_retrieval_tsv(os, rows); });
  return kExitOk;
}

int cmd_explain(const Options& o) {
  const TrainedModel m = load_model(o.ckpt);
  const PromptBank bank = build_prompt_bank(m, m.class_names);
  const Eigen::VectorXd target = class_target(bank, o.class_name);
  const fs::path input(o.input);
  if (!fs::exists(input)) throw MissingFileError("input not found: " + o.input);
  const std::string ext = input.extension().string();
  EncodedSample sample;
  if (ext == ".pgm") {
    sample.image = read_pgm(input);
    if (!o.prepared) sample.image = xray_adaptive_hist_eq(sample.image);
    if (sample.image.pixels.rows() != m.model.cfg.image_size || sample.image.pixels.cols() != m.model.cfg.image_size)
      throw SchemaError("image must be " + std::to_string(m.model.cfg.image_size) + " pixels square");
    const RelevanceMap map = explain_image(m, sample, target);
    write_heatmap_pgm(o.out, render_image_heatmap(map, sample.image.pixels.rows(), sample.image.pixels.cols()));
  } else if (ext == ".ecg") {
    sample.ecg = read_ecg(input);
    if (!o.prepared) sample.ecg = ecg_pipeline(sample.ecg);
    const RelevanceMap map = explain_ecg(m, sample, target);
    write_ecg_relevance_tsv(o.out, render_ecg_relevance(map, sample.ecg.length()), sample.ecg.rate_hz);
  } else {
    std::ifstream f(input, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    const auto ids = join_reports(ss.str(), "", m.tokenizer, static_cast<int>(m.model.cfg.text_max_length));
    const RelevanceMap map = explain_text(m, ids, target);
    write_text_relevance_tsv(o.out, ids, map, m.tokenizer);
  }
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out, std::ostream& err) {
  std::vector<MetricRow> rows;
  if (o.metric == "prec@k") {
    const Table sims = read_table(o.scores);
    std::map<std::string, int> label_of;
    for (const auto& row : read_tsv(o.labels)) {
      if (row.size() != 2) throw SchemaError("label lines must be id<TAB>label");
      if (row[0] == "id") continue;
      label_of[row[0]] = parse_int(row[1], o.labels);
    }
    auto lookup = [&](const std::string& id) {
      const auto it = label_of.find(id);
      if (it == label_of.end()) throw SchemaError("no label for " + id);
      return it->second;
    };
    Eigen::MatrixXd s(static_cast<Eigen::Index>(sims.ids.size()), static_cast<Eigen::Index>(sims.header.size()));
    std::vector<int> ql, cl;
    for (std::size_t i = 0; i < sims.ids.size(); ++i) {
      ql.push_back(lookup(sims.ids[i]));
      for (std::size_t j = 0; j < sims.header.size(); ++j)
        s(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = parse_double(sims.cells[i][j], o.scores);
    }
    for (const auto& c : sims.header) cl.push_back(lookup(c));
    rows.push_back({"prec@" + std::to_string(o.eval_k), "all", precision_at_k_similarity(s, ql, cl, o.eval_k)});
  } else {
    const Table scores = read_table(o.scores), labels = read_table(o.labels);
    if (scores.header != labels.header || scores.ids != labels.ids)
      throw SchemaError("scores and labels must share header and row ids");
    double sum = 0.0;
    int defined = 0;
    for (std::size_t c = 0; c < scores.header.size(); ++c) {
      std::vector<double> s;
      std::vector<int> l;
      for (std::size_t r = 0; r < scores.ids.size(); ++r) {
        const int y = static_cast<int>(parse_double(labels.cells[r][c], o.labels));
        if (y != 0 && y != 1) continue;  // uncertain labels are left out
        s.push_back(parse_double(scores.cells[r][c], o.scores));
        l.push_back(y);
      }
      try {
        const double v = o.metric == "auroc" ? auroc(s, l) : auprc(s, l);
        rows.push_back({o.metric, scores.header[c], v});
        sum += v;
        ++defined;
      } catch (const UndefinedMetricError& e) {
        err << nlohmann::json{{"warning", "undefined_metric"}, {"class", scores.header[c]}, {"message", e.what()}}.dump()
            << '\n';
      }
    }
    if (defined > 0) rows.push_back({o.metric, "macro", sum / defined});
  }
  emit_to(o.out, out, [&](std::ostream& os) { write_metrics_tsv(os, rows); });
  return kExitOk;
}

int report(std::ostream& err, const char* kind, const std::exception& e, int code) {
  err << nlohmann::json{{"error", kind}, {"message", e.what()}, {"exit_code", code}}.dump() << '\n';
  return code;
}

}  // namespace

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t fallback) {
  if (flag) return *flag;
  if (const char* env = std::getenv("MORE_SEED"); env && *env) {
    std::uint64_t v = 0;
    const std::string s(env);
    const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || end != s.data() + s.size()) throw SchemaError("MORE_SEED is not an unsigned integer: " + s);
    return v;
  }
  return fallback;
}

std::unique_ptr<CLI::App> make_app(Options& o) {
  auto app = std::make_unique<CLI::App>("Tri-modal contrastive pretraining on x-ray, ECG and report triples", "more");
  app->require_subcommand(1);
  const std::string seed_doc = "random seed (falls back to MORE_SEED)";

  auto* synth = app->add_subcommand("synth", "generate a synthetic triple corpus");
  synth->add_option("--classes", o.classes, "number of classes")->capture_default_str();
  synth->add_option("--per-class", o.per_class, "samples per class")->capture_default_str();
  synth->add_option("--out", o.out, "output directory")->required();
  synth->add_option("--seed", o.seed, seed_doc);

  auto* pre = app->add_subcommand("preprocess", "run the ECG pipeline and histogram equalization over a manifest");
  pre->add_option("--manifest", o.manifest, "input manifest")->required();
  pre->add_option("--out", o.out, "output directory")->required();

  auto* pt = app->add_subcommand("pretrain", "contrastive pretraining from a run config");
  pt->add_option("--config", o.config, "run config file")->required();
  pt->add_option("--out", o.out, "checkpoint to write")->required();
  pt->add_option("--seed", o.seed, seed_doc);
  pt->add_option("--manifest", o.manifest, "manifest overriding data.manifest");
  pt->add_flag("--prepared", o.prepared, "payloads are already preprocessed");
  pt->add_option("--epochs", o.epochs, "epoch limit overriding train.max_epochs");
  pt->add_option("--log", o.log, "training log (JSON lines); stderr when omitted");
  pt->add_option("--heldout", o.heldout, "directory receiving the held-out split");

  auto* ft = app->add_subcommand("finetune", "train a classifier on top of a pretrained checkpoint");
  ft->add_option("--ckpt", o.ckpt, "pretrained checkpoint")->required();
  ft->add_option("--mode", o.mode, "linear_probe or last_k_qkv")
      ->check(CLI::IsMember({"linear_probe", "last_k_qkv"}))
      ->capture_default_str();
  ft->add_option("--k", o.k, "trainable q/k/v blocks under last_k_qkv")->capture_default_str();
  ft->add_option("--manifest", o.manifest, "labelled manifest")->required();
  ft->add_option("--out", o.out, "checkpoint to write")->required();
  ft->add_option("--branch", o.branch, "image or ecg")->check(CLI::IsMember({"image", "ecg"}))->capture_default_str();
  ft->add_option("--labels", o.labels_mode, "multilabel or multiclass")
      ->check(CLI::IsMember({"multilabel", "multiclass"}))
      ->capture_default_str();
  ft->add_option("--epochs", o.epochs, "epochs overriding train.finetune.epochs");
  ft->add_option("--lr", o.lr, "learning rate overriding train.finetune.lr");
  ft->add_option("--config", o.config, "run config supplying the train.finetune keys");
  ft->add_option("--seed", o.seed, seed_doc);
  ft->add_flag("--prepared", o.prepared, "payloads are already preprocessed");
  ft->add_option("--log", o.log, "training log (JSON lines); stderr when omitted");

  auto* zs = app->add_subcommand("zeroshot", "score every class by prompt similarity");
  zs->add_option("--ckpt", o.ckpt, "pretrained checkpoint")->required();
  zs->add_option("--manifest", o.manifest, "manifest to score")->required();
  zs->add_option("--prompts", o.prompts, "class<TAB>prompt lines; default prompts when omitted");
  zs->add_option("--modality", o.modality, "image, ecg or fused")
      ->check(CLI::IsMember({"image", "ecg", "fused"}))
      ->capture_default_str();
  zs->add_option("--out", o.out, "score table; stdout when omitted");
  zs->add_option("--labels-out", o.labels_out, "label table matching the score table");
  zs->add_option("--fusion-weight", o.fusion_weight, "x-ray weight of fused scores")->capture_default_str();
  zs->add_option("--max-gap-days", o.max_gap_days, "largest x-ray/ECG gap for fused scores")->capture_default_str();
  zs->add_flag("--prepared", o.prepared, "payloads are already preprocessed");

  auto* rt = app->add_subcommand("retrieve", "rank corpus items by similarity to a text query");
  rt->add_option("--ckpt", o.ckpt, "pretrained checkpoint")->required();
  rt->add_option("--query", o.query, "query text")->required();
  rt->add_option("--corpus", o.corpus, "directory holding manifest.tsv")->required();
  rt->add_option("--top-k", o.top_k, "hits to return")->capture_default_str();
  rt->add_option("--modality", o.modality, "image or ecg")
      ->check(CLI::IsMember({"image", "ecg"}))
      ->capture_default_str();
  rt->add_option("--query-class", o.query_class, "class used for the label_match column");
  rt->add_option("--out", o.out, "retrieval table; stdout when omitted");
  rt->add_flag("--prepared", o.prepared, "payloads are already preprocessed");

  auto* ex = app->add_subcommand("explain", "relevance map for one input and class prompt");
  ex->add_option("--ckpt", o.ckpt, "pretrained checkpoint")->required();
  ex->add_option("--input", o.input, ".pgm image, .ecg record or a text file")->required();
  ex->add_option("--class", o.class_name, "class whose prompt is explained")->required();
  ex->add_option("--out", o.out, "PGM heatmap or TSV relevance")->required();
  ex->add_flag("--prepared", o.prepared, "input is already preprocessed");

  auto* ev = app->add_subcommand("eval", "ranking metrics from score and label tables");
  ev->add_option("--scores", o.scores, "score table, or a similarity matrix for prec@k")->required();
  ev->add_option("--labels", o.labels, "label table, or id<TAB>label lines for prec@k")->required();
  ev->add_option("--metric", o.metric, "auroc, auprc or prec@k")
      ->check(CLI::IsMember({"auroc", "auprc", "prec@k"}))
      ->capture_default_str();
  ev->add_option("--k", o.eval_k, "k of prec@k")->capture_default_str();
  ev->add_option("--out", o.out, "metrics table; stdout when omitted");

  app->add_subcommand("config", "print the run config schema with defaults");
  return app;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Options o;
  auto app = make_app(o);
  try {
    app->parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app->help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app->help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    return report(err, "usage", e, kExitOther);
  }
  const std::string cmd = app->get_subcommands().front()->get_name();
  try {
    if (cmd == "synth") return cmd_synth(o, out);
    if (cmd == "preprocess") return cmd_preprocess(o, out);
    if (cmd == "pretrain") return cmd_pretrain(o, out, err);
    if (cmd == "finetune") return cmd_finetune(o, out, err);
    if (cmd == "zeroshot") return cmd_zeroshot(o, out);
    if (cmd == "retrieve") return cmd_retrieve(o, out);
    if (cmd == "explain") return cmd_explain(o);
    if (cmd == "eval") return cmd_eval(o, out, err);
    out << describe_config_schema();
    return kExitOk;
  } catch (const MissingFileError& e) {
    return report(err, "missing_file", e, kExitMissingFile);
  } catch (const SchemaError& e) {
    return report(err, "schema", e, kExitSchema);
  } catch (const NumericError& e) {
    return report(err, "numeric", e, kExitNumeric);
  } catch (const std::exception& e) {
    return report(err, "failure", e, kExitOther);
  }
}

}  // namespace more::cli
