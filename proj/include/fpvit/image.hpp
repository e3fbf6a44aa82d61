#pragma once

#include <Eigen/Core>
#include <cstdint>

namespace fpvit {

/// Row-major raster; rows() is the image height and cols() the width.
template <typename Scalar>
using Raster = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using GrayImage = Raster<std::uint8_t>;
using FloatImage = Raster<double>;

template <typename Scalar>
inline Eigen::Index width(const Raster<Scalar>& img) { return img.cols(); }
template <typename Scalar>
inline Eigen::Index height(const Raster<Scalar>& img) { return img.rows(); }

/// RGB raster stored as three planes.
struct RgbImage {
  GrayImage r, g, b;
};

}  // namespace fpvit
