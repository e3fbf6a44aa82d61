#pragma once

#include <string>
#include <vector>

#include "fpvit/dataset.hpp"
#include "fpvit/image.hpp"

namespace fpvit {

inline constexpr int kDefaultQualityThreshold = 2;

/// Proxy quality score on a 0-100 scale. Not NFIQ2: the mean of three
/// components in [0, 1], scaled by 100 and rounded.
///   coverage  = fraction of foreground blocks
///   contrast  = min(foreground pixel variance / 0.01, 1) on the [0,1] image
///   coherence = mean gradient coherence of foreground blocks
struct QualityReport {
  int score = 0;
  double coverage = 0.0;
  double contrast = 0.0;
  double coherence = 0.0;
  bool passed = false;
};

QualityReport score_quality(const GrayImage& img, int threshold = kDefaultQualityThreshold);

struct Rejection {
  std::filesystem::path path;
  int score = 0;
  /// "quality" for low scores, "io" for unreadable files.
  std::string reason;
};

struct GateResult {
  Manifest retained;
  std::vector<Rejection> rejected;
  std::size_t quality_rejections = 0;
  std::size_t io_rejections = 0;
};

/// Keeps records scoring >= threshold. Records with a `quality` column
/// use that score instead of the proxy.
GateResult gate_manifest(const Manifest& m, int threshold = kDefaultQualityThreshold, int threads = 1);

/// CSV `path,score,reason`.
void save_rejection_log(const std::vector<Rejection>& log, const std::filesystem::path& path);

}  // namespace fpvit
