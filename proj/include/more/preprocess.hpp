#pragma once

// Deterministic preprocessing and seeded augmentation for both signal
// modalities. Every function is pure in (input, config, rng state).

#include <Eigen/Dense>

#include <optional>
#include <span>
#include <vector>

#include "more/rng.hpp"

namespace more {

inline constexpr int kEcgLeads = 12;
inline constexpr int kEcgTargetLength = 1000;
inline constexpr double kEcgTargetRate = 100.0;

/// 12 x L lead matrix and its sampling rate.
struct EcgRecord {
  Eigen::MatrixXd leads;
  double rate_hz = kEcgTargetRate;

  Eigen::Index length() const { return leads.cols(); }
};

/// Grayscale image with intensities in [0, 1].
struct ImageRecord {
  Eigen::MatrixXd pixels;
  std::optional<double> mean;
  std::optional<double> stddev;
};

struct AugmentConfig {
  double scale_min = 0.6;
  double scale_max = 0.9;
  double scale_prob = 0.8;
  double jitter_max = 0.4;
  double jitter_prob = 0.8;
  int blur_kernel_min = 7;
  int blur_kernel_max = 23;
  double blur_prob = 0.5;
  int warp_segments = 4;
  double warp_factor = 0.25;
  double warp_prob = 0.5;
  int permute_segments = 4;
  double permute_prob = 0.5;

  /// Throws ParameterError on probabilities outside [0,1] or unordered ranges.
  void validate() const;
};

/// Which augmentations fired on the last call.
struct AugmentTrace {
  bool scaled = false;
  bool jittered = false;
  bool blurred = false;
  bool warped = false;
  bool permuted = false;
  int blur_kernel = 0;
};

// --- ECG -------------------------------------------------------------------

/// Linear-interpolation resampling; output length floor(L * target / source).
EcgRecord ecg_resample(const EcgRecord& x, double target_hz = kEcgTargetRate);
/// Replaces every non-finite sample with 0.
EcgRecord ecg_clean_nan(const EcgRecord& x);
/// Subtracts a per-lead moving median. The window is round(seconds * rate)
/// samples, bumped to the next odd count, and shrinks at the record edges.
EcgRecord ecg_remove_baseline_wander(const EcgRecord& x, double window_seconds = 0.6);
/// Per-lead affine map of [min, max] onto [-1, 1]; a flat lead becomes 0.
EcgRecord ecg_minmax_per_lead(const EcgRecord& x);
/// Crops the tail or zero-pads to exactly `length` samples.
EcgRecord ecg_fit_length(const EcgRecord& x, Eigen::Index length = kEcgTargetLength);
/// resample -> clean NaN -> fit length -> baseline wander -> min-max.
EcgRecord ecg_pipeline(const EcgRecord& raw);

/// Splits each lead into `segments` pieces (the last absorbs the remainder),
/// stretches or compresses each piece by (1 +/- factor) with a direction
/// drawn per piece (one bernoulli(0.5) per segment, in order, true = stretch),
/// then resamples the concatenation back to the original length.
EcgRecord ecg_time_warp(const EcgRecord& x, int segments, double factor, Rng& rng);
/// Output segment i is input segment order[i]; same order for every lead.
EcgRecord ecg_permute_segments(const EcgRecord& x, const std::vector<int>& order);
EcgRecord ecg_random_permute(const EcgRecord& x, int segments, Rng& rng);
EcgRecord augment_ecg(const EcgRecord& x, const AugmentConfig& cfg, Rng& rng, AugmentTrace* trace = nullptr);

// --- X-ray -----------------------------------------------------------------

/// Contrast-limited adaptive histogram equalization on 256 intensity bins.
ImageRecord xray_adaptive_hist_eq(const ImageRecord& img, int tiles_y = 8, int tiles_x = 8, double clip = 2.0);

struct ImageStats {
  double mean = 0.0;
  double stddev = 1.0;
};
/// Pixel mean and population standard deviation over a whole corpus.
ImageStats compute_image_stats(std::span<const ImageRecord> images);
/// (x - mean) / std elementwise.
Eigen::MatrixXd xray_normalize(const ImageRecord& img, double mean, double stddev);

/// Bilinear resize, pixel-centre aligned.
Eigen::MatrixXd resize_bilinear(const Eigen::MatrixXd& src, Eigen::Index rows, Eigen::Index cols);
/// Normalized 1-D Gaussian of odd size k with sigma = 0.3 ((k - 1) / 2 - 1) + 0.8.
Eigen::VectorXd gaussian_kernel(int k);
/// Separable Gaussian blur with reflect-101 borders.
Eigen::MatrixXd gaussian_blur(const Eigen::MatrixXd& img, int k);

ImageRecord xray_random_resized_scale(const ImageRecord& img, const AugmentConfig& cfg, Rng& rng,
                                      AugmentTrace* trace = nullptr);
ImageRecord xray_color_jitter(const ImageRecord& img, const AugmentConfig& cfg, Rng& rng,
                              AugmentTrace* trace = nullptr);
ImageRecord xray_gaussian_blur(const ImageRecord& img, const AugmentConfig& cfg, Rng& rng,
                               AugmentTrace* trace = nullptr);
/// scale -> jitter -> blur, each gated by its own probability.
ImageRecord augment_xray(const ImageRecord& img, const AugmentConfig& cfg, Rng& rng, AugmentTrace* trace = nullptr);

}  // namespace more
