#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "fpvit/error.hpp"
#include "fpvit/image.hpp"

namespace fpvit {

/// Decodes an 8-bit grayscale or RGB(A) PNG. RGB is reduced to BT.601
/// luminance rounded to nearest; alpha is ignored.
GrayImage load_png(const std::filesystem::path& path);

/// Writes a single-channel 8-bit PNG.
void write_png(const std::filesystem::path& path, const GrayImage& img);
void write_png(const std::filesystem::path& path, const RgbImage& img);

/// Round-half-up quantization of a real in [0, 255] (clamped).
inline std::uint8_t quantize_u8(double v) {
  v = std::clamp(v, 0.0, 255.0);
  return static_cast<std::uint8_t>(std::floor(v + 0.5));
}

inline GrayImage invert(const GrayImage& img) {
  return (255 - img.cast<int>()).cast<std::uint8_t>();
}

inline FloatImage to_unit_float(const GrayImage& img) {
  return img.cast<double>() / 255.0;
}

inline GrayImage from_unit_float(const FloatImage& img) {
  return img.unaryExpr([](double v) { return quantize_u8(std::clamp(v, 0.0, 1.0) * 255.0); });
}

/// Bilinear resampling with half-pixel-centre alignment and edge clamping.
template <typename Scalar>
Raster<Scalar> resize_bilinear(const Raster<Scalar>& img, Eigen::Index out_w, Eigen::Index out_h) {
  if (out_w < 1 || out_h < 1)
    throw Error(ErrorKind::InvalidArgument, "resize_bilinear: output dimensions must be >= 1");
  if (img.size() == 0)
    throw Error(ErrorKind::InvalidArgument, "resize_bilinear: empty input image");
  const Eigen::Index in_w = img.cols(), in_h = img.rows();
  if (in_w == out_w && in_h == out_h) return img;

  const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);
  const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
  auto sample_axis = [](Eigen::Index o, double scale, Eigen::Index n, Eigen::Index& i0,
                        Eigen::Index& i1, double& w) {
    double s = (static_cast<double>(o) + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<Eigen::Index>(std::floor(s));
    i1 = std::min(i0 + 1, n - 1);
    w = s - static_cast<double>(i0);
  };

  Raster<Scalar> out(out_h, out_w);
  for (Eigen::Index y = 0; y < out_h; ++y) {
    Eigen::Index y0, y1;
    double wy;
    sample_axis(y, sy, in_h, y0, y1, wy);
    for (Eigen::Index x = 0; x < out_w; ++x) {
      Eigen::Index x0, x1;
      double wx;
      sample_axis(x, sx, in_w, x0, x1, wx);
      const double top = (1.0 - wx) * static_cast<double>(img(y0, x0)) + wx * static_cast<double>(img(y0, x1));
      const double bot = (1.0 - wx) * static_cast<double>(img(y1, x0)) + wx * static_cast<double>(img(y1, x1));
      double v = (1.0 - wy) * top + wy * bot;
      // Guard the convex-combination bound against rounding.
      const double lo = std::min({static_cast<double>(img(y0, x0)), static_cast<double>(img(y0, x1)),
                                  static_cast<double>(img(y1, x0)), static_cast<double>(img(y1, x1))});
      const double hi = std::max({static_cast<double>(img(y0, x0)), static_cast<double>(img(y0, x1)),
                                  static_cast<double>(img(y1, x0)), static_cast<double>(img(y1, x1))});
      v = std::clamp(v, lo, hi);
      out(y, x) = static_cast<Scalar>(v);
    }
  }
  return out;
}

/// Zero-mean, unit-variance copy (population variance). Constant images
/// map to all zeros.
FloatImage standardize(const FloatImage& img);

}  // namespace fpvit
