#include "more/preprocess.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "more/errors.hpp"

namespace more {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

void require_12_leads(const EcgRecord& x) {
  if (x.leads.rows() != kEcgLeads)
    throw DimensionError("ECG record has " + std::to_string(x.leads.rows()) + " leads, expected 12");
}

// Linear interpolation of a row at fractional position `pos`.
double lerp_at(const Eigen::Ref<const Eigen::RowVectorXd>& row, double pos) {
  const Index n = row.size();
  if (pos <= 0) return row[0];
  const Index i0 = std::min(static_cast<Index>(std::floor(pos)), n - 1);
  const Index i1 = std::min(i0 + 1, n - 1);
  const double f = pos - static_cast<double>(i0);
  return row[i0] + (row[i1] - row[i0]) * f;
}

// Resamples a row to `n` samples with both endpoints pinned.
Eigen::RowVectorXd stretch_row(const Eigen::Ref<const Eigen::RowVectorXd>& row, Index n) {
  Eigen::RowVectorXd out(n);
  const Index len = row.size();
  for (Index j = 0; j < n; ++j) {
    const double pos = n == 1 ? 0.0 : static_cast<double>(j * (len - 1)) / static_cast<double>(n - 1);
    out[j] = lerp_at(row, pos);
  }
  return out;
}

std::vector<std::pair<Index, Index>> segment_bounds(Index length, int segments) {
  std::vector<std::pair<Index, Index>> bounds;
  const Index base = length / segments;
  for (int s = 0; s < segments; ++s) {
    const Index begin = s * base;
    const Index end = s == segments - 1 ? length : begin + base;
    bounds.emplace_back(begin, end);
  }
  return bounds;
}

Index reflect101(Index i, Index n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

int to_level(double v) { return static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

void check_prob(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw ParameterError(std::string(name) + " must be in [0,1]");
}

}  // namespace

void AugmentConfig::validate() const {
  check_prob(scale_prob, "scale_prob");
  check_prob(jitter_prob, "jitter_prob");
  check_prob(blur_prob, "blur_prob");
  check_prob(warp_prob, "warp_prob");
  check_prob(permute_prob, "permute_prob");
  if (!(scale_min > 0 && scale_min <= scale_max && scale_max <= 1)) throw ParameterError("scale range invalid");
  if (!(jitter_max >= 0 && jitter_max < 1)) throw ParameterError("jitter_max must be in [0,1)");
  if (blur_kernel_min < 1 || blur_kernel_min > blur_kernel_max) throw ParameterError("blur kernel range invalid");
  bool has_odd = false;
  for (int k = blur_kernel_min; k <= blur_kernel_max; ++k) has_odd = has_odd || (k % 2 == 1);
  if (!has_odd) throw ParameterError("blur kernel range contains no odd size");
  if (warp_segments < 1 || permute_segments < 1) throw ParameterError("segment counts must be >= 1");
  if (warp_factor < 0 || warp_factor >= 1) throw ParameterError("warp_factor must be in [0,1)");
}

// --- ECG -------------------------------------------------------------------

EcgRecord ecg_resample(const EcgRecord& x, double target_hz) {
  if (!(target_hz > 0)) throw ParameterError("target rate must be positive");
  if (!(x.rate_hz > 0)) throw ParameterError("source rate must be positive");
  const double ratio = x.rate_hz / target_hz;
  const Index n = std::max<Index>(1, static_cast<Index>(std::floor(static_cast<double>(x.length()) * target_hz / x.rate_hz)));
  EcgRecord out{MatrixXd(x.leads.rows(), n), target_hz};
  for (Index r = 0; r < x.leads.rows(); ++r) {
    const Eigen::RowVectorXd row = x.leads.row(r);
    for (Index i = 0; i < n; ++i) out.leads(r, i) = lerp_at(row, static_cast<double>(i) * ratio);
  }
  return out;
}

EcgRecord ecg_clean_nan(const EcgRecord& x) {
  EcgRecord out = x;
  out.leads = x.leads.unaryExpr([](double v) { return std::isfinite(v) ? v : 0.0; });
  return out;
}

EcgRecord ecg_remove_baseline_wander(const EcgRecord& x, double window_seconds) {
  Index window = static_cast<Index>(std::lround(window_seconds * x.rate_hz));
  if (window < 3) throw ParameterError("baseline window must cover at least 3 samples");
  if (window % 2 == 0) ++window;
  const Index half = window / 2, len = x.length();
  EcgRecord out = x;
  std::vector<double> buf;
  buf.reserve(static_cast<std::size_t>(window));
  for (Index r = 0; r < x.leads.rows(); ++r)
    for (Index i = 0; i < len; ++i) {
      const Index lo = std::max<Index>(0, i - half), hi = std::min(len - 1, i + half);
      buf.clear();
      for (Index j = lo; j <= hi; ++j) buf.push_back(x.leads(r, j));
      const auto mid = buf.begin() + static_cast<std::ptrdiff_t>(buf.size() / 2);
      std::nth_element(buf.begin(), mid, buf.end());
      double median = *mid;
      if (buf.size() % 2 == 0) median = 0.5 * (median + *std::max_element(buf.begin(), mid));
      out.leads(r, i) = x.leads(r, i) - median;
    }
  return out;
}

EcgRecord ecg_minmax_per_lead(const EcgRecord& x) {
  EcgRecord out = x;
  for (Index r = 0; r < x.leads.rows(); ++r) {
    const double lo = x.leads.row(r).minCoeff(), hi = x.leads.row(r).maxCoeff();
    const double range = hi - lo;
    if (!(range > 0)) {
      out.leads.row(r).setZero();
      continue;
    }
    for (Index i = 0; i < x.length(); ++i) out.leads(r, i) = 2.0 * ((x.leads(r, i) - lo) / range) - 1.0;
  }
  return out;
}

EcgRecord ecg_fit_length(const EcgRecord& x, Index length) {
  EcgRecord out{MatrixXd::Zero(x.leads.rows(), length), x.rate_hz};
  const Index keep = std::min(length, x.length());
  out.leads.leftCols(keep) = x.leads.leftCols(keep);
  return out;
}

EcgRecord ecg_pipeline(const EcgRecord& raw) {
  require_12_leads(raw);
  EcgRecord x = ecg_resample(raw, kEcgTargetRate);
  x = ecg_clean_nan(x);
  x = ecg_fit_length(x, kEcgTargetLength);
  x = ecg_remove_baseline_wander(x, 0.6);
  return ecg_minmax_per_lead(x);
}

EcgRecord ecg_time_warp(const EcgRecord& x, int segments, double factor, Rng& rng) {
  if (segments < 1) throw ParameterError("time warp needs at least one segment");
  const Index len = x.length();
  if (len < segments) throw DimensionError("record shorter than segment count");
  const auto bounds = segment_bounds(len, segments);
  std::vector<Index> new_len;
  Index total = 0;
  for (const auto& [b, e] : bounds) {
    const double dir = rng.bernoulli(0.5) ? 1.0 : -1.0;
    const Index seg = e - b;
    const Index n = seg == 1 ? 1 : std::max<Index>(2, std::lround(static_cast<double>(seg) * (1.0 + dir * factor)));
    new_len.push_back(n);
    total += n;
  }
  EcgRecord out{MatrixXd(x.leads.rows(), len), x.rate_hz};
  for (Index r = 0; r < x.leads.rows(); ++r) {
    Eigen::RowVectorXd warped(total);
    Index offset = 0;
    for (std::size_t s = 0; s < bounds.size(); ++s) {
      const auto [b, e] = bounds[s];
      warped.segment(offset, new_len[s]) = stretch_row(x.leads.row(r).segment(b, e - b), new_len[s]);
      offset += new_len[s];
    }
    out.leads.row(r) = stretch_row(warped, len);
  }
  return out;
}

EcgRecord ecg_permute_segments(const EcgRecord& x, const std::vector<int>& order) {
  const int segments = static_cast<int>(order.size());
  if (segments < 1 || x.length() < segments) throw DimensionError("record shorter than segment count");
  const auto bounds = segment_bounds(x.length(), segments);
  EcgRecord out{MatrixXd(x.leads.rows(), x.length()), x.rate_hz};
  Index offset = 0;
  for (int s = 0; s < segments; ++s) {
    const int src = order[static_cast<std::size_t>(s)];
    if (src < 0 || src >= segments) throw ParameterError("permutation index out of range");
    const auto [b, e] = bounds[static_cast<std::size_t>(src)];
    out.leads.middleCols(offset, e - b) = x.leads.middleCols(b, e - b);
    offset += e - b;
  }
  return out;
}

EcgRecord ecg_random_permute(const EcgRecord& x, int segments, Rng& rng) {
  return ecg_permute_segments(x, rng.permutation(segments));
}

EcgRecord augment_ecg(const EcgRecord& x, const AugmentConfig& cfg, Rng& rng, AugmentTrace* trace) {
  EcgRecord out = x;
  const bool warp = rng.bernoulli(cfg.warp_prob);
  if (warp) out = ecg_time_warp(out, cfg.warp_segments, cfg.warp_factor, rng);
  const bool permute = rng.bernoulli(cfg.permute_prob);
  if (permute) out = ecg_random_permute(out, cfg.permute_segments, rng);
  if (trace) {
    trace->warped = warp;
    trace->permuted = permute;
  }
  return out;
}

// --- X-ray -----------------------------------------------------------------

ImageRecord xray_adaptive_hist_eq(const ImageRecord& img, int tiles_y, int tiles_x, double clip) {
  const Index h = img.pixels.rows(), w = img.pixels.cols();
  if (tiles_y < 1 || tiles_x < 1) throw ParameterError("tile grid must be positive");
  if (h < tiles_y || w < tiles_x) throw DimensionError("image smaller than tile grid");
  constexpr int kBins = 256;

  // Pad (reflect-101) so that the tile grid divides the image.
  const Index ph = (h + tiles_y - 1) / tiles_y * tiles_y, pw = (w + tiles_x - 1) / tiles_x * tiles_x;
  Eigen::MatrixXi levels(ph, pw);
  for (Index y = 0; y < ph; ++y)
    for (Index x = 0; x < pw; ++x) levels(y, x) = to_level(img.pixels(reflect101(y, h), reflect101(x, w)));

  const Index tile_h = ph / tiles_y, tile_w = pw / tiles_x, area = tile_h * tile_w;
  const int clip_limit = clip > 0 ? std::max(1, static_cast<int>(clip * static_cast<double>(area) / kBins)) : 0;
  const double lut_scale = 255.0 / static_cast<double>(area);

  std::vector<std::array<double, kBins>> luts(static_cast<std::size_t>(tiles_y * tiles_x));
  for (int ty = 0; ty < tiles_y; ++ty)
    for (int tx = 0; tx < tiles_x; ++tx) {
      std::array<int, kBins> hist{};
      for (Index y = 0; y < tile_h; ++y)
        for (Index x = 0; x < tile_w; ++x) ++hist[static_cast<std::size_t>(levels(ty * tile_h + y, tx * tile_w + x))];
      if (clip_limit > 0) {
        int clipped = 0;
        for (int& c : hist)
          if (c > clip_limit) {
            clipped += c - clip_limit;
            c = clip_limit;
          }
        const int batch = clipped / kBins;
        int residual = clipped - batch * kBins;
        for (int& c : hist) c += batch;
        if (residual > 0) {
          const int step = std::max(kBins / residual, 1);
          for (int i = 0; i < kBins && residual > 0; i += step, --residual) ++hist[static_cast<std::size_t>(i)];
        }
      }
      auto& lut = luts[static_cast<std::size_t>(ty * tiles_x + tx)];
      int running = 0;
      for (int i = 0; i < kBins; ++i) {
        running += hist[static_cast<std::size_t>(i)];
        lut[static_cast<std::size_t>(i)] = std::clamp(std::nearbyint(running * lut_scale), 0.0, 255.0);
      }
    }

  ImageRecord out = img;
  const double inv_th = 1.0 / static_cast<double>(tile_h), inv_tw = 1.0 / static_cast<double>(tile_w);
  for (Index y = 0; y < h; ++y) {
    const double tyf = static_cast<double>(y) * inv_th - 0.5;
    int ty1 = static_cast<int>(std::floor(tyf));
    int ty2 = ty1 + 1;
    const double ya = tyf - ty1;
    ty1 = std::max(ty1, 0);
    ty2 = std::min(ty2, tiles_y - 1);
    for (Index x = 0; x < w; ++x) {
      const double txf = static_cast<double>(x) * inv_tw - 0.5;
      int tx1 = static_cast<int>(std::floor(txf));
      int tx2 = tx1 + 1;
      const double xa = txf - tx1;
      tx1 = std::max(tx1, 0);
      tx2 = std::min(tx2, tiles_x - 1);
      const auto v = static_cast<std::size_t>(levels(y, x));
      auto lut = [&](int ty, int tx) { return luts[static_cast<std::size_t>(ty * tiles_x + tx)][v]; };
      const double res = (lut(ty1, tx1) * (1 - xa) + lut(ty1, tx2) * xa) * (1 - ya) +
                         (lut(ty2, tx1) * (1 - xa) + lut(ty2, tx2) * xa) * ya;
      out.pixels(y, x) = std::clamp(std::nearbyint(res), 0.0, 255.0) / 255.0;
    }
  }
  return out;
}

ImageStats compute_image_stats(std::span<const ImageRecord> images) {
  if (images.empty()) throw ParameterError("no images to compute statistics over");
  double total = 0, count = 0;
  for (const auto& im : images) {
    total += im.pixels.sum();
    count += static_cast<double>(im.pixels.size());
  }
  const double mean = total / count;
  double sq = 0;
  for (const auto& im : images) sq += (im.pixels.array() - mean).square().sum();
  return {mean, std::sqrt(sq / count)};
}

MatrixXd xray_normalize(const ImageRecord& img, double mean, double stddev) {
  if (!(stddev > 0)) throw ParameterError("normalization std must be positive");
  return ((img.pixels.array() - mean) / stddev).matrix();
}

MatrixXd resize_bilinear(const MatrixXd& src, Index rows, Index cols) {
  MatrixXd out(rows, cols);
  const double sy = static_cast<double>(src.rows()) / static_cast<double>(rows);
  const double sx = static_cast<double>(src.cols()) / static_cast<double>(cols);
  for (Index y = 0; y < rows; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.rows() - 1));
    const Index y0 = static_cast<Index>(std::floor(fy)), y1 = std::min(y0 + 1, src.rows() - 1);
    const double ay = fy - static_cast<double>(y0);
    for (Index x = 0; x < cols; ++x) {
      const double fx =
          std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.cols() - 1));
      const Index x0 = static_cast<Index>(std::floor(fx)), x1 = std::min(x0 + 1, src.cols() - 1);
      const double ax = fx - static_cast<double>(x0);
      const double top = src(y0, x0) + (src(y0, x1) - src(y0, x0)) * ax;
      const double bottom = src(y1, x0) + (src(y1, x1) - src(y1, x0)) * ax;
      out(y, x) = top + (bottom - top) * ay;
    }
  }
  return out;
}

VectorXd gaussian_kernel(int k) {
  if (k < 1 || k % 2 == 0) throw ParameterError("Gaussian kernel size must be odd and positive");
  const double sigma = 0.3 * ((k - 1) * 0.5 - 1) + 0.8;
  VectorXd g(k);
  const int r = k / 2;
  for (int i = 0; i < k; ++i) g[i] = std::exp(-0.5 * (i - r) * (i - r) / (sigma * sigma));
  return g / g.sum();
}

MatrixXd gaussian_blur(const MatrixXd& img, int k) {
  const VectorXd g = gaussian_kernel(k);
  const int r = k / 2;
  const Index h = img.rows(), w = img.cols();
  MatrixXd tmp(h, w), out(h, w);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -r; i <= r; ++i) acc += g[i + r] * img(y, reflect101(x + i, w));
      tmp(y, x) = acc;
    }
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -r; i <= r; ++i) acc += g[i + r] * tmp(reflect101(y + i, h), x);
      out(y, x) = acc;
    }
  return out;
}

ImageRecord xray_random_resized_scale(const ImageRecord& img, const AugmentConfig& cfg, Rng& rng,
                                      AugmentTrace* trace) {
  const bool fire = rng.bernoulli(cfg.scale_prob);
  if (trace) trace->scaled = fire;
  if (!fire) return img;
  const Index h = img.pixels.rows(), w = img.pixels.cols();
  const double side = std::sqrt(rng.uniform(cfg.scale_min, cfg.scale_max));
  const Index ch = std::clamp<Index>(std::lround(static_cast<double>(h) * side), 1, h);
  const Index cw = std::clamp<Index>(std::lround(static_cast<double>(w) * side), 1, w);
  const Index top = rng.uniform_int(0, static_cast<long>(h - ch));
  const Index left = rng.uniform_int(0, static_cast<long>(w - cw));
  ImageRecord out = img;
  out.pixels = resize_bilinear(img.pixels.block(top, left, ch, cw), h, w).cwiseMax(0.0).cwiseMin(1.0);
  return out;
}

ImageRecord xray_color_jitter(const ImageRecord& img, const AugmentConfig& cfg, Rng& rng, AugmentTrace* trace) {
  const bool fire = rng.bernoulli(cfg.jitter_prob);
  if (trace) trace->jittered = fire;
  if (!fire) return img;
  const double brightness = rng.uniform(1.0 - cfg.jitter_max, 1.0 + cfg.jitter_max);
  const double contrast = rng.uniform(1.0 - cfg.jitter_max, 1.0 + cfg.jitter_max);
  ImageRecord out = img;
  out.pixels = (img.pixels * brightness).cwiseMax(0.0).cwiseMin(1.0);
  const double m = out.pixels.mean();
  out.pixels = ((out.pixels.array() - m) * contrast + m).matrix().cwiseMax(0.0).cwiseMin(1.0);
  return out;
}

ImageRecord xray_gaussian_blur(const ImageRecord& img, const AugmentConfig& cfg, Rng& rng, AugmentTrace* trace) {
  const bool fire = rng.bernoulli(cfg.blur_prob);
  if (trace) trace->blurred = fire;
  if (!fire) return img;
  int k = 0;
  do {
    k = static_cast<int>(rng.uniform_int(cfg.blur_kernel_min, cfg.blur_kernel_max));
  } while (k % 2 == 0);
  if (trace) trace->blur_kernel = k;
  ImageRecord out = img;
  out.pixels = gaussian_blur(img.pixels, k).cwiseMax(0.0).cwiseMin(1.0);
  return out;
}

ImageRecord augment_xray(const ImageRecord& img, const AugmentConfig& cfg, Rng& rng, AugmentTrace* trace) {
  ImageRecord out = xray_random_resized_scale(img, cfg, rng, trace);
  out = xray_color_jitter(out, cfg, rng, trace);
  return xray_gaussian_blur(out, cfg, rng, trace);
}

}  // namespace more
