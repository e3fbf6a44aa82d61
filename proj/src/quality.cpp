#include "fpvit/quality.hpp"

#include <cmath>
#include <fstream>

#include "fpvit/enhance.hpp"
#include "fpvit/error.hpp"
#include "fpvit/imgio.hpp"
#include "fpvit/parallel.hpp"

namespace fpvit {

namespace {
constexpr int kQualityBlock = 16;
constexpr double kContrastReference = 0.01;
}  // namespace

QualityReport score_quality(const GrayImage& img, int threshold) {
  QualityReport report;
  if (img.rows() < kQualityBlock || img.cols() < kQualityBlock) {
    report.passed = report.score >= threshold;
    return report;
  }
  const FloatImage unit = to_unit_float(img);
  const NormalizedImage norm = normalize_image(unit, 0.5, 0.01);
  if (!norm.degenerate) {
    const OrientationField orient = estimate_orientation(norm.image, kQualityBlock);
    SegmentationMask mask = segment(norm.image, kQualityBlock, 0.001);
    mask.foreground = mask.foreground && !orient.low_coherence;

    const double blocks = static_cast<double>(mask.foreground.size());
    report.coverage = static_cast<double>(mask.foreground.count()) / blocks;

    double sum = 0.0, sum_sq = 0.0, n = 0.0;
    for (Eigen::Index y = 0; y < unit.rows(); ++y)
      for (Eigen::Index x = 0; x < unit.cols(); ++x)
        if (mask.foreground(y / kQualityBlock, x / kQualityBlock)) {
          sum += unit(y, x);
          sum_sq += unit(y, x) * unit(y, x);
          n += 1.0;
        }
    if (n > 0.0) {
      const double mean = sum / n;
      const double var = std::max(0.0, sum_sq / n - mean * mean);
      report.contrast = std::min(var / kContrastReference, 1.0);
    }
    report.coherence = mean_foreground_coherence(orient, mask);
  }
  const double mean = (report.coverage + report.contrast + report.coherence) / 3.0;
  report.score = static_cast<int>(std::lround(100.0 * mean));
  report.passed = report.score >= threshold;
  return report;
}

GateResult gate_manifest(const Manifest& m, int threshold, int threads) {
  if (threshold < 0 || threshold > 100) throw Error(ErrorKind::InvalidArgument, "quality threshold must be in [0, 100]");

  struct Outcome {
    int score = 0;
    bool io_error = false;
  };
  std::vector<Outcome> outcomes(m.records.size());
  parallel_for(m.records.size(), threads, [&](std::size_t i) {
    const Record& r = m.records[i];
    if (r.quality) {
      outcomes[i].score = *r.quality;
      return;
    }
    try {
      outcomes[i].score = score_quality(load_png(m.resolve(r)), threshold).score;
    } catch (const Error&) {
      outcomes[i].io_error = true;
    }
  });

  GateResult result;
  result.retained.base_dir = m.base_dir;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const Record& r = m.records[i];
    if (outcomes[i].io_error) {
      result.rejected.push_back({r.path, 0, "io"});
      ++result.io_rejections;
    } else if (outcomes[i].score < threshold) {
      result.rejected.push_back({r.path, outcomes[i].score, "quality"});
      ++result.quality_rejections;
    } else {
      Record kept = r;
      kept.quality = outcomes[i].score;
      result.retained.records.push_back(std::move(kept));
    }
  }
  return result;
}

void save_rejection_log(const std::vector<Rejection>& log, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot write rejection log '" + path.string() + "'");
  out << "path,score,reason\n";
  for (const Rejection& r : log) out << r.path.generic_string() << ',' << r.score << ',' << r.reason << "\n";
}

}  // namespace fpvit
