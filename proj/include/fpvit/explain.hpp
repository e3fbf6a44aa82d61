#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "fpvit/image.hpp"
#include "fpvit/train.hpp"
#include "fpvit/vit.hpp"

namespace fpvit {

using Rgb = std::array<std::uint8_t, 3>;

/// Warm gradient from dark red to pale yellow, sampled at 0, .25, .5, .75, 1.
inline constexpr std::array<Rgb, 5> kWarmColormap{{
    {64, 0, 0}, {180, 0, 0}, {255, 80, 0}, {255, 180, 0}, {255, 255, 160}}};

/// Overlay opacity at heatmap value 1.
inline constexpr double kOverlayAlpha = 0.4;

/// Piecewise-linear colormap lookup; v is clamped to [0, 1].
std::array<double, 3> colormap(double v, const std::array<Rgb, 5>& stops = kWarmColormap);

struct Heatmap {
  FloatImage grid;       // patch grid, min-max normalized
  FloatImage upsampled;  // grid resized to the image size
  bool degenerate = false;
  std::vector<std::string> sources;  // checkpoint identifiers
  std::string image;
};

/// Row 0, columns 1.. of every attention map, averaged over layers and heads.
Eigen::VectorXd class_token_attention(const AttentionRecord& record);

/// Reshapes a square number of scores to a grid, min-max normalizes it
/// and upsamples bilinearly to width x height. All-equal scores give a
/// zero grid flagged degenerate.
Heatmap make_heatmap(const Eigen::VectorXd& scores, Eigen::Index width, Eigen::Index height);

/// Alpha-blends the colormapped heatmap over a grayscale image of the same
/// size with opacity kOverlayAlpha * value. Zero-valued pixels are unchanged.
RgbImage overlay(const GrayImage& image, const Heatmap& heatmap, const std::array<Rgb, 5>& stops = kWarmColormap);

/// Class-token scores of one model on one prepared image.
template <typename T>
Eigen::VectorXd attention_scores(const ModelParams<T>& params, const ViTConfig& cfg, const FloatImage& prepared) {
  NoGradGuard no_grad;
  const std::vector<FloatImage> one{prepared};
  const auto out = forward(params, cfg, patch_batch<T>(one, cfg), true);
  return class_token_attention(out.attention.at(0));
}

/// Per-member score vectors averaged in member (fold) order.
Eigen::VectorXd ensemble_attention_scores(const Ensemble& ensemble, const FloatImage& prepared);

/// Heatmap for a grayscale image at its own resolution, averaged over the
/// ensemble members.
Heatmap ensemble_heatmap(const Ensemble& ensemble, const GrayImage& image);

nlohmann::json to_json(const Heatmap& heatmap);

/// Writes the overlay PNG and a sidecar JSON (same stem, .json) holding the
/// grid. Returns the sidecar path.
std::filesystem::path save_heatmap(const std::filesystem::path& png_path, const GrayImage& image,
                                   const Heatmap& heatmap);

}  // namespace fpvit
