#pragma once

// On-disk formats for signals and images.
//
// ECG file: 16-byte header then samples, all little-endian.
//   bytes 0-3   magic "ECG1"
//   bytes 4-7   u32 lead count
//   bytes 8-11  u32 samples per lead
//   bytes 12-15 u32 sampling rate in Hz
//   then leads * length IEEE-754 float32 values, lead-major.
//
// Images are binary 8-bit PGM (P5, maxval 255). Comment lines are accepted
// on read and never written.

#include <Eigen/Dense>

#include <filesystem>

#include "more/preprocess.hpp"

namespace more {

void write_ecg(const std::filesystem::path& path, const EcgRecord& ecg);
/// Throws MissingFileError if the file cannot be opened, SchemaError on a bad
/// header or truncated payload.
EcgRecord read_ecg(const std::filesystem::path& path);

/// Pixels are clamped to [0,1] and stored as round(255 x).
void write_pgm(const std::filesystem::path& path, const Eigen::MatrixXd& pixels);
ImageRecord read_pgm(const std::filesystem::path& path);

/// round(255 x) / 255 with clamping; what write/read of a PGM does to pixels.
Eigen::MatrixXd quantize_8bit(const Eigen::MatrixXd& pixels);

}  // namespace more
