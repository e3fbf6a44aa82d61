#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace fpvit {

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

/// Image-level binary metrics. precision (recall) is 0 with the matching
/// *_undefined flag set when its denominator is 0; f1 is 0 when both are 0.
struct EvalReport {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double auc = 0.0;
  Confusion confusion;
  std::size_t n_images = 0;
  bool precision_undefined = false;
  bool recall_undefined = false;
  /// False when only one class is present (AUC undefined, reported as 0).
  bool auc_defined = false;
};

/// scores are positive-class probabilities, labels 0/1. An image is called
/// positive iff score > threshold, so an exact 0.5 (tied logits) goes to
/// class 0.
EvalReport compute_metrics(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);

struct RocCurve {
  /// Descending; the first entry is +infinity (the (0, 0) anchor).
  std::vector<double> thresholds;
  std::vector<double> fpr;
  std::vector<double> tpr;
  double auc = 0.0;
};

/// One ROC step per distinct score (ties grouped), trapezoidal AUC.
/// Throws InvalidArgument unless both classes are present.
RocCurve roc_auc(std::span<const double> scores, std::span<const int> labels);

nlohmann::json to_json(const EvalReport& report);
void write_roc_csv(const RocCurve& curve, const std::filesystem::path& path);
/// Standalone SVG line plot of the curve with the chance diagonal.
std::string roc_svg(const RocCurve& curve, const std::string& title);

}  // namespace fpvit
