#pragma once

// Study records, cross-modal pairing, label notes and the manifest format.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "more/preprocess.hpp"

namespace more {

enum class Modality { xray, ecg };

struct StudyRecord {
  std::string subject_id;
  std::string study_id;
  Modality modality = Modality::xray;
  /// Days since epoch.
  double study_date = 0.0;
  std::string path;
  std::optional<std::string> note;
  /// Values in {1, 0, -1}, aligned with the dataset's class names.
  std::optional<std::vector<int>> labels;
};

struct TripleSample {
  std::string subject_id;
  std::string study_id_x;
  std::string study_id_e;
  std::string image_path;
  std::string ecg_path;
  ImageRecord image;
  EcgRecord ecg;
  std::string xray_note;
  std::string ecg_note;
  /// Values in {1, 0, -1}, aligned with Dataset::class_names.
  std::vector<int> labels;
  int gap_days = 0;

  /// Index of the single positive label, or -1 when there is not exactly one.
  int class_id() const;
};

struct Dataset {
  std::vector<std::string> class_names;
  std::vector<TripleSample> samples;
};

inline constexpr int kPretrainMaxGapDays = 60;
inline constexpr int kFusedMaxGapDays = 3;

/// For every subject, all (x-ray, ECG) study pairs whose dates differ by at
/// most `max_gap_days`, ordered by subject, x-ray study id, ECG study id.
/// Notes, paths and labels are copied from the x-ray record (the ECG record
/// supplies ecg_note and ecg_path).
std::vector<TripleSample> match_pairs(const std::vector<StudyRecord>& xrays, const std::vector<StudyRecord>& ecgs,
                                      int max_gap_days = kPretrainMaxGapDays);

/// Fourteen observation names in the order used for note synthesis.
const std::vector<std::string>& canonical_label_order();

/// "Finding of X" for 1, "Uncertain Finding of X" for -1, joined by ", ".
/// Known names follow canonical_label_order(); unknown names follow in the
/// given order. Throws ParameterError if every value is 0.
std::string synthesize_note(const std::vector<std::pair<std::string, int>>& labels);

/// Keeps the Findings and Impression sections of an x-ray report (the whole
/// text when it has no recognised heading) or the first seven '|'-separated
/// fields of an ECG report, then drops characters other than letters,
/// digits, whitespace and .,;:!?'"()-/% and collapses whitespace runs.
std::string clean_report(const std::string& raw, Modality modality);

/// ECG pipeline plus adaptive histogram equalization on the image.
TripleSample prepare_sample(const TripleSample& raw);

/// Per-class split: round(fraction * class count) samples of every class go
/// to the held-out side. Returns (train indices, held-out indices), sorted.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(const Dataset& data, double fraction,
                                                                               std::uint64_t seed);
/// Split by subject so no subject appears on both sides.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> subject_split(const Dataset& data, double fraction,
                                                                            std::uint64_t seed);

// --- Manifest --------------------------------------------------------------
//
// UTF-8 TSV with a header row:
//   subject_id study_id_x study_id_e image_path ecg_path xray_note ecg_note labels gap_days
// labels is "Name:value;Name:value" in class order. Tabs, newlines and
// backslashes inside fields are written as \t, \n and \\. Paths are relative
// to the manifest's directory.

void write_manifest(const std::filesystem::path& path, const Dataset& data);
/// Reads rows only; payloads stay empty until load_payloads().
Dataset read_manifest(const std::filesystem::path& path);
void load_payloads(Dataset& data, const std::filesystem::path& base_dir);
/// Writes every image, ECG and the manifest under `dir`.
void save_dataset(const std::filesystem::path& dir, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& manifest);

}  // namespace more
