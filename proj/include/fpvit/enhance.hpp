#pragma once

#include "fpvit/image.hpp"

namespace fpvit {

/// Parameters of the Gabor enhancement pipeline.
struct EnhanceConfig {
  int block_size = 16;
  double sigma_x = 4.0;
  double sigma_y = 4.0;
  double target_mean = 0.5;
  double target_var = 0.01;
  double var_threshold = 0.001;
  /// Invert raw captures before enhancement (dark ridges become bright).
  bool invert_input = true;
};

template <typename T>
using BlockGrid = Raster<T>;

/// Per-block ridge orientation. Angles are axial, in [0, pi), and give the
/// direction the ridges run along in (x right, y down) pixel coordinates.
struct OrientationField {
  int block_size = 16;
  BlockGrid<double> angles;
  /// Gradient coherence in [0, 1] before smoothing.
  BlockGrid<double> coherence;
  /// Blocks with no gradient energy at all.
  BlockGrid<bool> low_coherence;
};

/// Per-block ridge frequency in cycles per pixel.
struct FrequencyField {
  int block_size = 16;
  BlockGrid<double> freqs;
  /// True where the block's own estimate was in range; other blocks hold
  /// values filled from their neighbourhood.
  BlockGrid<bool> valid;
};

struct SegmentationMask {
  int block_size = 16;
  BlockGrid<bool> foreground;
};

inline constexpr double kMinRidgeFrequency = 1.0 / 25.0;
inline constexpr double kMaxRidgeFrequency = 1.0 / 3.0;

struct NormalizedImage {
  FloatImage image;
  bool degenerate = false;
};

/// Linear remap to the target mean and variance (population moments).
NormalizedImage normalize_image(const FloatImage& img, double target_mean, double target_var);

/// Gradient-based least-squares block orientation, smoothed by averaging
/// doubled-angle unit vectors over each 3x3 block neighbourhood.
OrientationField estimate_orientation(const FloatImage& img, int block_size);

/// Ridge frequency from the projected x-signature of an oriented 32x16
/// window centred on each block. Throws NoRidgeStructure when no block
/// yields an in-range estimate.
FrequencyField estimate_frequency(const FloatImage& img, const OrientationField& orient, int block_size);

/// Foreground iff block variance >= var_threshold.
SegmentationMask segment(const FloatImage& img, int block_size, double var_threshold);

/// Zero-mean even-symmetric Gabor kernel. theta is the ridge direction; the
/// cosine carrier runs across the ridges.
FloatImage gabor_kernel(double theta, double freq, double sigma_x, double sigma_y);

/// Correlates img with kernel at every pixel, zero-padded at the borders.
FloatImage convolve(const FloatImage& img, const FloatImage& kernel);

/// Mean gradient coherence over foreground blocks; 0 without foreground.
double mean_foreground_coherence(const OrientationField& orient, const SegmentationMask& mask);

struct EnhanceResult {
  GrayImage image;
  OrientationField orientation;
  FrequencyField frequency;
  SegmentationMask mask;
  /// Set when no foreground was found; the image is then uniform mid-gray.
  bool degenerate = false;
};

/// Full pipeline: to_unit_float, normalize, orientation, frequency, mask,
/// per-block Gabor filtering, background to 128, foreground stretched to
/// [0, 255]. Input inversion is not applied here (see invert_input).
EnhanceResult enhance_fingerprint_detailed(const GrayImage& img, const EnhanceConfig& cfg = {});

inline GrayImage enhance_fingerprint(const GrayImage& img, const EnhanceConfig& cfg = {}) {
  return enhance_fingerprint_detailed(img, cfg).image;
}

/// Smallest absolute difference between two axial angles, in [0, pi/2].
double axial_distance(double a, double b);

}  // namespace fpvit
