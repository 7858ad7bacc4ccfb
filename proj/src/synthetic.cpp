#include "more/synthetic.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>

#include "more/errors.hpp"
#include "more/io.hpp"

namespace more {

namespace {

struct ClassText {
  const char* finding;
  const char* rhythm;
  const char* ecg_detail;
};

const std::vector<ClassText>& class_text() {
  static const std::vector<ClassText> text = {
      {"enlargement of the cardiac silhouette", "Left ventricular hypertrophy", "voltage criteria met"},
      {"interstitial vascular congestion", "Low QRS voltage", "diffuse low amplitude complexes"},
      {"blunting of the costophrenic angle", "Sinus tachycardia", "rapid ventricular response"},
      {"linear basilar opacity", "Right axis deviation", "rightward frontal axis"},
      {"focal airspace infiltrate", "Atrial premature complexes", "irregular atrial ectopy"},
      {"apical pleural line", "Poor R wave progression", "anterior lead changes"},
      {"dense lobar opacity", "Nonspecific ST abnormality", "lateral repolarization changes"},
      {"patchy parenchymal density", "Borderline T wave changes", "inferior T wave flattening"},
  };
  return text;
}

constexpr std::array<const char*, 3> kSeverity = {"mild", "moderate", "severe"};
constexpr std::array<const char*, 3> kEcgSeverity = {"borderline", "probable", "marked"};
constexpr std::array<const char*, 4> kSide = {"left", "right", "bilateral", "central"};
constexpr std::array<const char*, 4> kIndication = {"Shortness of breath", "Chest pain", "Cough", "Fever"};
constexpr std::array<const char*, 4> kFiller = {"Trachea is midline.", "Osseous structures are intact.",
                                                "No bony abnormality.", "Lines and tubes unchanged."};
constexpr std::array<const char*, 5> kEcgGeneric = {"Normal P axis", "PR interval within limits",
                                                    "No prior tracing for comparison", "QT interval normal",
                                                    "Technically adequate study"};

template <std::size_t N>
const char* pick(const std::array<const char*, N>& options, Rng& rng) {
  return options[static_cast<std::size_t>(rng.uniform_int(0, N - 1))];
}

Eigen::MatrixXd synth_image(int k, int n_classes, int severity, int size, Rng& rng, ImageMotif& motif) {
  const double s = size;
  const double c = (s - 1) / 2;
  const double angle = 2 * std::numbers::pi * k / n_classes + std::numbers::pi / 6 + rng.normal(0, 0.12);
  const double ring = 0.27 * s * (1 + rng.normal(0, 0.06));
  const double by = c + ring * std::sin(angle), bx = c + ring * std::cos(angle);
  const double sigma = 0.07 * s * (0.8 + 0.22 * severity);
  const double amp = 0.4 + 0.1 * severity;
  motif = {by, bx, sigma};
  const double gain = rng.uniform(0.9, 1.1);
  Eigen::MatrixXd img(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double dy = y - c;
      double v = 0.45;
      // Two darker lung fields either side of the midline.
      for (double side : {-1.0, 1.0}) {
        const double lx = (x - (c + side * 0.2 * s)) / (0.14 * s), ly = dy / (0.3 * s);
        if (lx * lx + ly * ly < 1) v -= 0.22;
      }
      const double r2 = (y - by) * (y - by) + (x - bx) * (x - bx);
      v += amp * std::exp(-r2 / (2 * sigma * sigma));
      img(y, x) = v * gain + rng.normal(0, 0.04);
    }
  return quantize_8bit(img);
}

EcgRecord synth_ecg(int k, int n_classes, int severity, const SyntheticConfig& cfg, Rng& rng) {
  const double rate = cfg.raw_rate_hz;
  const auto n = static_cast<Eigen::Index>(std::lround(cfg.ecg_len * rate / kEcgTargetRate));
  const double span = n_classes > 1 ? static_cast<double>(k) / (n_classes - 1) : 0.0;
  const double hr = (55 + 90 * span) * (1 + rng.normal(0, 0.03));
  const double beat = 60.0 / hr;
  const double freq = 1.5 + 3.0 * span;
  const double wave_amp = 0.25 + 0.1 * severity;
  const double t0 = rng.uniform(0, beat);
  const double wander_freq = rng.uniform(0.1, 0.4), wander_amp = rng.uniform(0.2, 0.6);
  const double wander_phase = rng.uniform(0, 2 * std::numbers::pi);
  EcgRecord ecg{Eigen::MatrixXd(kEcgLeads, n), rate};
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / rate;
    // Distance to the nearest beat onset.
    const double phase = std::fmod(t - t0 + 10 * beat, beat);
    const double qrs = std::exp(-0.5 * std::pow(phase / 0.012, 2)) + std::exp(-0.5 * std::pow((phase - beat) / 0.012, 2));
    const double twave = 0.25 * std::exp(-0.5 * std::pow((phase - 0.25) / 0.04, 2));
    const double wave = wave_amp * std::sin(2 * std::numbers::pi * freq * t);
    const double wander = wander_amp * std::sin(2 * std::numbers::pi * wander_freq * t + wander_phase);
    for (int l = 0; l < kEcgLeads; ++l) {
      const double g = 0.6 + 0.07 * l;
      const double h = std::cos(0.5 * l);
      ecg.leads(l, i) = g * (qrs + twave) + h * wave + wander + rng.normal(0, 0.03);
    }
  }
  ecg.leads = ecg.leads.unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
  if (rng.bernoulli(cfg.nan_prob))
    for (int j = 0; j < 5; ++j)
      ecg.leads(rng.uniform_int(0, kEcgLeads - 1), rng.uniform_int(0, n - 1)) = std::numeric_limits<double>::quiet_NaN();
  return ecg;
}

}  // namespace

const std::vector<std::string>& synthetic_class_pool() {
  static const std::vector<std::string> pool = {"Cardiomegaly", "Edema",        "Pleural Effusion", "Atelectasis",
                                                "Pneumonia",    "Pneumothorax", "Consolidation",    "Lung Opacity"};
  return pool;
}

Dataset gen_synthetic_triples(const SyntheticConfig& cfg, std::vector<ImageMotif>* motifs) {
  const int k_max = static_cast<int>(synthetic_class_pool().size());
  if (cfg.n_classes < 2 || cfg.n_classes > k_max)
    throw ParameterError("n_classes must be between 2 and " + std::to_string(k_max));
  if (cfg.n_per_class < 1) throw ParameterError("n_per_class must be positive");
  if (cfg.image_size < 32) throw ParameterError("image_size must be at least 32");
  if (cfg.ecg_len < 100 || !(cfg.raw_rate_hz >= kEcgTargetRate)) throw ParameterError("ECG length or rate too small");

  Dataset data;
  if (motifs) motifs->clear();
  data.class_names.assign(synthetic_class_pool().begin(), synthetic_class_pool().begin() + cfg.n_classes);
  const Rng master(cfg.seed);
  const int total = cfg.n_classes * cfg.n_per_class;
  for (int i = 0; i < total; ++i) {
    Rng rng = master.split(static_cast<std::uint64_t>(i));
    const int k = i % cfg.n_classes;
    const int severity = static_cast<int>(rng.uniform_int(0, 2));
    const auto& text = class_text()[static_cast<std::size_t>(k)];

    TripleSample s;
    char id[32];
    std::snprintf(id, sizeof id, "%05d", i);
    s.subject_id = std::string("S") + id;
    s.study_id_x = std::string("X") + id;
    s.study_id_e = std::string("E") + id;
    s.image_path = "images/" + s.study_id_x + ".pgm";
    s.ecg_path = "ecg/" + s.study_id_e + ".ecg";
    s.labels.assign(static_cast<std::size_t>(cfg.n_classes), 0);
    s.labels[static_cast<std::size_t>(k)] = 1;

    std::vector<std::pair<std::string, int>> named;
    for (int c = 0; c < cfg.n_classes; ++c) named.emplace_back(data.class_names[static_cast<std::size_t>(c)], s.labels[static_cast<std::size_t>(c)]);
    s.xray_note = std::string("INDICATION: ") + pick(kIndication, rng) + ".\nFINDINGS: " +
                  kSeverity[static_cast<std::size_t>(severity)] + " " + pick(kSide, rng) + " " + text.finding + ". " +
                  pick(kFiller, rng) + "\nIMPRESSION: " + synthesize_note(named) + ".";
    std::string ecg_note = std::string(text.rhythm) + "|" + kEcgSeverity[static_cast<std::size_t>(severity)] + " " +
                           text.ecg_detail;
    for (int f = 0; f < 5; ++f) ecg_note += std::string("|") + pick(kEcgGeneric, rng);
    ecg_note += "|@@@ Confirmed by reader ###|Unconfirmed report %%%";
    s.ecg_note = ecg_note;
    s.gap_days = rng.bernoulli(0.7) ? static_cast<int>(rng.uniform_int(0, 3)) : static_cast<int>(rng.uniform_int(4, 60));

    ImageMotif motif;
    s.image.pixels = synth_image(k, cfg.n_classes, severity, cfg.image_size, rng, motif);
    if (motifs) motifs->push_back(motif);
    s.ecg = synth_ecg(k, cfg.n_classes, severity, cfg, rng);
    data.samples.push_back(std::move(s));
  }
  return data;
}

}  // namespace more
