#pragma once

// The `more` command line: subcommands over the library, exit codes
// 0 ok, 1 other failure or bad usage, 2 missing file, 3 schema violation,
// 4 numeric failure.

#include <cstdint>
#include <memory>
#include <optional>
#include <ostream>
#include <string>

#include <CLI11.hpp>

namespace more::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitOther = 1;
inline constexpr int kExitMissingFile = 2;
inline constexpr int kExitSchema = 3;
inline constexpr int kExitNumeric = 4;

/// Values bound to the flags of every subcommand.
struct Options {
  std::optional<std::uint64_t> seed;
  bool prepared = false;

  // synth
  int classes = 3;
  int per_class = 100;
  std::string out;

  // preprocess, zeroshot, finetune
  std::string manifest;

  // pretrain
  std::string config;
  std::optional<int> epochs;
  std::string log;
  std::string heldout;

  // finetune
  std::string ckpt;
  std::string mode = "linear_probe";
  int k = 1;
  std::string branch = "image";
  std::string labels_mode = "multilabel";
  std::optional<double> lr;

  // zeroshot
  std::string prompts;
  std::string modality = "image";
  std::string labels_out;
  double fusion_weight = 0.5;
  int max_gap_days = 3;

  // retrieve
  std::string query;
  std::string corpus;
  int top_k = 5;
  std::string query_class;

  // explain
  std::string input;
  std::string class_name;

  // eval
  std::string scores;
  std::string labels;
  std::string metric = "auroc";
  int eval_k = 5;
};

/// The full flag table; subcommand callbacks are not attached.
std::unique_ptr<CLI::App> make_app(Options& opt);

/// Seed from --seed, else MORE_SEED, else `fallback`. A malformed MORE_SEED is a schema error.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t fallback);

/// Parses and runs one command. Errors go to `err` as one JSON object per line.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace more::cli
