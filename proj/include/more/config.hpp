#pragma once

// Run configuration file: sections data, model, train and eval holding
// `key = value` lines. Blank lines and lines starting with '#' are ignored.
// Every key has a default; unknown sections or keys, duplicates and values
// that do not parse are SchemaError.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "more/trainer.hpp"

namespace more {

struct DataSettings {
  /// Manifest path, relative to the config file's directory when not absolute.
  std::string manifest = "manifest.tsv";
  /// Payloads were already written by `preprocess`.
  bool prepared = false;
  /// Per-class fraction held out from pretraining for evaluation.
  double test_fraction = 0.2;
  std::uint64_t split_seed = 0;
};

struct EvalSettings {
  int batch_size = 32;
  int top_k = 5;
  double fusion_weight = 0.5;
  int max_gap_days = kFusedMaxGapDays;
};

struct RunConfig {
  DataSettings data;
  /// vocab_size is taken from the tokenizer and is not a key.
  ModelConfig model;
  TrainConfig train;
  FinetuneConfig finetune;
  EvalSettings eval;

  /// Throws SchemaError when a value is out of range.
  void validate() const;
  /// Every key, in schema order, values printed to round-trip exactly.
  std::string serialize() const;
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
};

/// One key of the schema, bound to a RunConfig instance.
struct ConfigField {
  std::string section;
  std::string key;
  std::string doc;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

std::vector<ConfigField> config_fields(RunConfig& cfg);

/// Defaults as a config file with each key's description as a comment.
std::string describe_config_schema();

}  // namespace more
