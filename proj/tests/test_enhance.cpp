#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "fpvit/enhance.hpp"
#include "fpvit/imgio.hpp"
#include "fpvit/rng.hpp"

using namespace fpvit;
using std::numbers::pi;

namespace {

double deg(double d) { return d * pi / 180.0; }

// Ridges running along direction theta (x right, y down) with frequency f.
FloatImage sinusoid(int size, double theta, double f, double noise = 0.0, std::uint64_t seed = 1) {
  Rng rng(seed);
  FloatImage img(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double across = -x * std::sin(theta) + y * std::cos(theta);
      img(y, x) = 0.5 + 0.5 * std::cos(2 * pi * f * across) + noise * rng.normal();
    }
  return img;
}

GrayImage to_gray(const FloatImage& img) { return from_unit_float(img); }

// Interior blocks: at least one block away from every border.
template <typename F>
void for_interior(const OrientationField& o, F&& f) {
  for (Eigen::Index i = 1; i + 1 < o.angles.rows(); ++i)
    for (Eigen::Index j = 1; j + 1 < o.angles.cols(); ++j) f(i, j);
}

}  // namespace

TEST(Normalize, HitsTargetMoments) {
  Rng rng(1);
  FloatImage img(40, 30);
  for (Eigen::Index i = 0; i < img.size(); ++i) img.data()[i] = rng.uniform(0, 9);
  const NormalizedImage n = normalize_image(img, 0.5, 0.01);
  EXPECT_FALSE(n.degenerate);
  EXPECT_NEAR(n.image.mean(), 0.5, 1e-6);
  EXPECT_NEAR((n.image - n.image.mean()).square().mean(), 0.01, 1e-6);
  const NormalizedImage again = normalize_image(n.image, 0.5, 0.01);
  EXPECT_LT((again.image - n.image).abs().maxCoeff(), 1e-9);
}

TEST(Normalize, ConstantIsDegenerate) {
  const NormalizedImage n = normalize_image(FloatImage::Constant(8, 8, 3.0), 0.5, 0.01);
  EXPECT_TRUE(n.degenerate);
  EXPECT_TRUE((n.image == 0.5).all());
}

TEST(Orientation, RecoversSinusoidAngle) {
  for (double t : {0.0, 30.0, 75.0, 120.0}) {
    const FloatImage img = sinusoid(128, deg(t), 0.1);
    const OrientationField o = estimate_orientation(img, 16);
    EXPECT_EQ(o.angles.rows(), 8);
    EXPECT_EQ(o.angles.cols(), 8);
    for_interior(o, [&](auto i, auto j) { EXPECT_LE(axial_distance(o.angles(i, j), deg(t)), deg(5)) << t; });
    EXPECT_GE(o.angles.minCoeff(), 0.0);
    EXPECT_LT(o.angles.maxCoeff(), pi);
  }
}

TEST(Orientation, GridRoundsUp) {
  const OrientationField o = estimate_orientation(sinusoid(50, 0.3, 0.1).block(0, 0, 50, 37), 16);
  EXPECT_EQ(o.angles.rows(), 4);
  EXPECT_EQ(o.angles.cols(), 3);
}

TEST(Orientation, ConstantImageIsLowCoherence) {
  const OrientationField o = estimate_orientation(FloatImage::Constant(64, 64, 0.5), 16);
  EXPECT_TRUE(o.low_coherence.all());
}

TEST(Orientation, RotationBy90Degrees) {
  const FloatImage img = sinusoid(128, deg(20), 0.1);
  // Rotating the raster by 90 degrees: out(y, x) = img(x, W-1-y).
  FloatImage rot(128, 128);
  for (int y = 0; y < 128; ++y)
    for (int x = 0; x < 128; ++x) rot(y, x) = img(x, 127 - y);
  const OrientationField a = estimate_orientation(img, 16);
  const OrientationField b = estimate_orientation(rot, 16);
  for_interior(a, [&](auto i, auto j) {
    // Block (i, j) of the rotated image comes from block (j, 7 - i).
    EXPECT_LE(axial_distance(b.angles(i, j), a.angles(j, 7 - i) + pi / 2), deg(5));
  });
}

TEST(Frequency, RecoversSinusoidFrequency) {
  for (double f : {0.06, 0.1, 0.2}) {
    const FloatImage img = sinusoid(128, deg(30), f);
    const FrequencyField fr = estimate_frequency(img, estimate_orientation(img, 16), 16);
    // Interior blocks only: the 32-sample signature of a border block runs off the image.
    for (Eigen::Index i = 1; i + 1 < fr.freqs.rows(); ++i) {
      for (Eigen::Index j = 1; j + 1 < fr.freqs.cols(); ++j) {
        if (fr.valid(i, j)) {
          EXPECT_NEAR(fr.freqs(i, j), f, 0.1 * f) << i << "," << j;
        }
      }
    }
    EXPECT_GT(fr.valid.count(), fr.valid.size() / 2);
  }
}

TEST(Frequency, UpperBoundaryIsValid) {
  const FloatImage img = sinusoid(96, 0.0, 1.0 / 3.0);
  const FrequencyField fr = estimate_frequency(img, estimate_orientation(img, 16), 16);
  EXPECT_GT(fr.valid.count(), 0);
  for (Eigen::Index i = 0; i < fr.freqs.size(); ++i) {
    if (fr.valid.data()[i]) {
      EXPECT_NEAR(fr.freqs.data()[i], 1.0 / 3.0, 0.1 / 3.0);
    }
  }
}

TEST(Frequency, WhiteNoiseIsMostlyInvalid) {
  Rng rng(9);
  FloatImage img(128, 128);
  for (Eigen::Index i = 0; i < img.size(); ++i) img.data()[i] = rng.uniform();
  try {
    const FrequencyField fr = estimate_frequency(img, estimate_orientation(img, 16), 16);
    EXPECT_LT(static_cast<double>(fr.valid.count()) / static_cast<double>(fr.valid.size()), 0.5);
    EXPECT_GE(fr.freqs.minCoeff(), kMinRidgeFrequency - 1e-9);
    EXPECT_LE(fr.freqs.maxCoeff(), kMaxRidgeFrequency + 1e-9);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NoRidgeStructure);
  }
}

TEST(Frequency, FlatImageHasNoRidgeStructure) {
  const FloatImage img = FloatImage::Constant(64, 64, 0.5);
  try {
    estimate_frequency(img, estimate_orientation(img, 16), 16);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NoRidgeStructure);
    EXPECT_NE(std::string(e.what()).find("no ridge structure"), std::string::npos);
  }
}

TEST(Segment, Examples) {
  const NormalizedImage flat = normalize_image(FloatImage::Constant(64, 64, 0.2), 0.5, 0.01);
  EXPECT_FALSE(segment(flat.image, 16, 0.001).foreground.any());

  const NormalizedImage full = normalize_image(sinusoid(64, 0.4, 0.1), 0.5, 0.01);
  EXPECT_TRUE(segment(full.image, 16, 0.001).foreground.all());

  FloatImage half = sinusoid(64, 0.4, 0.1);
  half.rightCols(32) = 0.5;
  const SegmentationMask m = segment(normalize_image(half, 0.5, 0.01).image, 16, 0.001);
  EXPECT_TRUE(m.foreground.leftCols(2).all());
  EXPECT_FALSE(m.foreground.rightCols(2).any());
}

TEST(Gabor, ZeroMeanAndSize) {
  for (double t : {0.0, 0.3, 1.0, 2.5})
    for (double f : {0.05, 0.1, 0.3, 0.5}) {
      const FloatImage k = gabor_kernel(t, f, 4.0, 3.0);
      EXPECT_EQ(k.rows(), 2 * 12 + 1);
      EXPECT_NEAR(k.sum(), 0.0, 1e-9);
    }
}

TEST(Gabor, AxialSymmetryIsExact) {
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const double t = rng.uniform(0, pi);
    const double f = rng.uniform(0.04, 0.33);
    EXPECT_TRUE((gabor_kernel(t, f, 4, 4) == gabor_kernel(t + pi, f, 4, 4)).all()) << t;
  }
}

TEST(Gabor, RejectsBadParameters) {
  EXPECT_THROW(gabor_kernel(0, 0.0, 4, 4), Error);
  EXPECT_THROW(gabor_kernel(0, 0.6, 4, 4), Error);
  EXPECT_THROW(gabor_kernel(0, 0.1, 0, 4), Error);
  EXPECT_THROW(gabor_kernel(0, 0.1, 4, -1), Error);
}

TEST(Gabor, MatchedResponseDominatesOrthogonal) {
  const double t = deg(30), f = 0.1;
  const FloatImage k = gabor_kernel(t, f, 4, 4);
  auto peak = [&](const FloatImage& img) { return convolve(img - 0.5, k).block(24, 24, 48, 48).abs().maxCoeff(); };
  EXPECT_GE(peak(sinusoid(96, t, f)), 10.0 * peak(sinusoid(96, t + pi / 2, f)));
}

TEST(Gabor, ConstantImageGivesZeroResponseInside) {
  const FloatImage k = gabor_kernel(0.7, 0.12, 4, 4);
  const FloatImage out = convolve(FloatImage::Constant(64, 64, 0.8), k);
  const Eigen::Index r = k.rows() / 2;
  EXPECT_LT(out.block(r, r, 64 - 2 * r, 64 - 2 * r).abs().maxCoeff(), 1e-6);
}

TEST(Enhance, CleanSinusoidKeepsOrientation) {
  const FloatImage img = sinusoid(128, deg(30), 0.1);
  const EnhanceResult r = enhance_fingerprint_detailed(to_gray(img));
  EXPECT_FALSE(r.degenerate);
  const OrientationField after = estimate_orientation(to_unit_float(r.image), 16);
  for_interior(after, [&](auto i, auto j) { EXPECT_LE(axial_distance(after.angles(i, j), deg(30)), deg(5)); });
  EXPECT_EQ(r.image.minCoeff(), 0);
  EXPECT_EQ(r.image.maxCoeff(), 255);
}

TEST(Enhance, NoisySinusoidGainsCoherence) {
  const GrayImage noisy = to_gray(sinusoid(128, deg(30), 0.1, 0.2, 3));
  const EnhanceResult r = enhance_fingerprint_detailed(noisy);
  const FloatImage before = normalize_image(to_unit_float(noisy), 0.5, 0.01).image;
  const FloatImage after = normalize_image(to_unit_float(r.image), 0.5, 0.01).image;
  const SegmentationMask mask = r.mask;
  EXPECT_GT(mean_foreground_coherence(estimate_orientation(after, 16), mask),
            mean_foreground_coherence(estimate_orientation(before, 16), mask));
}

TEST(Enhance, ConstantImageIsDegenerateMidGray) {
  const EnhanceResult r = enhance_fingerprint_detailed(GrayImage::Constant(64, 64, 90));
  EXPECT_TRUE(r.degenerate);
  EXPECT_TRUE((r.image == 128).all());
}

TEST(Enhance, Deterministic) {
  const GrayImage img = to_gray(sinusoid(96, 1.1, 0.09, 0.1, 4));
  EXPECT_TRUE((enhance_fingerprint(img) == enhance_fingerprint(img)).all());
}

TEST(Enhance, BackgroundIsMidGray) {
  FloatImage img = sinusoid(96, 0.4, 0.1);
  img.rightCols(48) = 0.5;
  const EnhanceResult r = enhance_fingerprint_detailed(to_gray(img));
  EXPECT_TRUE((r.image.rightCols(32) == 128).all());
}

TEST(AxialDistance, WrapsAtPi) {
  EXPECT_NEAR(axial_distance(0.01, pi - 0.01), 0.02, 1e-12);
  EXPECT_NEAR(axial_distance(0.0, pi / 2), pi / 2, 1e-12);
  EXPECT_NEAR(axial_distance(3 * pi + 0.1, 0.1), 0.0, 1e-12);
}
