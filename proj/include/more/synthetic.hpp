#pragma once

// Synthetic tri-modal corpus with known latent classes.
//
// Each class owns an image motif (a bright blob at a class-specific angle on
// a ring around the image centre), an ECG motif (class-specific heart rate
// and dominant sinusoid) and report phrases. Within-class variation comes
// from a severity level that scales the motifs and changes the wording,
// plus positional jitter and additive noise.

#include <cstdint>
#include <string>
#include <vector>

#include "more/dataset.hpp"

namespace more {

struct SyntheticConfig {
  int n_classes = 3;
  int n_per_class = 100;
  int image_size = 64;
  /// Samples per lead after resampling to 100 Hz; raw records are stored at raw_rate_hz.
  int ecg_len = 1000;
  double raw_rate_hz = 500.0;
  /// Chance that a raw ECG carries a few NaN samples.
  double nan_prob = 0.02;
  std::uint64_t seed = 0;
};

/// Class names available to the generator, in the order they are assigned.
const std::vector<std::string>& synthetic_class_pool();

/// Where the image blob of one sample was drawn, in pixel coordinates.
struct ImageMotif {
  double y = 0.0, x = 0.0, sigma = 0.0;
};

/// Samples are interleaved by class (sample i has class i % n_classes), with
/// 8-bit quantized images and float32-representable raw ECGs so a save/load
/// round trip is lossless. `motifs`, when given, receives one entry per sample.
Dataset gen_synthetic_triples(const SyntheticConfig& cfg, std::vector<ImageMotif>* motifs = nullptr);

}  // namespace more
