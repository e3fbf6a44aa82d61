#include "fpvit/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "fpvit/error.hpp"

namespace fpvit {

namespace {

void check_inputs(std::span<const double> scores, std::span<const int> labels) {
  if (scores.empty()) throw Error(ErrorKind::InvalidArgument, "metrics: empty input");
  if (scores.size() != labels.size())
    throw Error(ErrorKind::ShapeMismatch, "metrics: " + std::to_string(scores.size()) + " scores for " +
                                              std::to_string(labels.size()) + " labels");
  for (int y : labels)
    if (y != 0 && y != 1) throw Error(ErrorKind::InvalidArgument, "metrics: labels must be 0 or 1");
}

}  // namespace

EvalReport compute_metrics(std::span<const double> scores, std::span<const int> labels, double threshold) {
  check_inputs(scores, labels);
  EvalReport r;
  r.n_images = scores.size();
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] > threshold;
    if (labels[i] == 1) {
      predicted ? ++r.confusion.tp : ++r.confusion.fn;
    } else {
      predicted ? ++r.confusion.fp : ++r.confusion.tn;
    }
  }
  const auto& c = r.confusion;
  r.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(r.n_images);
  r.precision_undefined = c.tp + c.fp == 0;
  r.recall_undefined = c.tp + c.fn == 0;
  r.precision = r.precision_undefined ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  r.recall = r.recall_undefined ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  r.f1 = (r.precision + r.recall) > 0.0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;

  const bool both = c.tp + c.fn > 0 && c.tn + c.fp > 0;
  if (both) {
    r.auc = roc_auc(scores, labels).auc;
    r.auc_defined = true;
  }
  return r;
}

RocCurve roc_auc(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels);
  const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t negatives = labels.size() - positives;
  if (positives == 0 || negatives == 0)
    throw Error(ErrorKind::InvalidArgument, "roc_auc: both classes must be present (AUC undefined)");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocCurve curve;
  curve.thresholds.push_back(std::numeric_limits<double>::infinity());
  curve.fpr.push_back(0.0);
  curve.tpr.push_back(0.0);
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    // All samples sharing this score move the curve in one step.
    for (; i < order.size() && scores[order[i]] == s; ++i) labels[order[i]] == 1 ? ++tp : ++fp;
    curve.thresholds.push_back(s);
    curve.fpr.push_back(static_cast<double>(fp) / static_cast<double>(negatives));
    curve.tpr.push_back(static_cast<double>(tp) / static_cast<double>(positives));
  }
  double area = 0.0;
  for (std::size_t k = 1; k < curve.fpr.size(); ++k)
    area += (curve.fpr[k] - curve.fpr[k - 1]) * 0.5 * (curve.tpr[k] + curve.tpr[k - 1]);
  curve.auc = area;
  return curve;
}

nlohmann::json to_json(const EvalReport& r) {
  return {{"accuracy", r.accuracy},
          {"precision", r.precision},
          {"recall", r.recall},
          {"f1", r.f1},
          {"auc", r.auc},
          {"auc_defined", r.auc_defined},
          {"precision_undefined", r.precision_undefined},
          {"recall_undefined", r.recall_undefined},
          {"confusion", {{"tp", r.confusion.tp}, {"fp", r.confusion.fp}, {"tn", r.confusion.tn}, {"fn", r.confusion.fn}}},
          {"n_images", r.n_images}};
}

void write_roc_csv(const RocCurve& curve, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot write ROC '" + path.string() + "'");
  out << "threshold,fpr,tpr\n";
  char line[128];
  for (std::size_t i = 0; i < curve.fpr.size(); ++i) {
    std::snprintf(line, sizeof line, "%.17g,%.17g,%.17g\n", curve.thresholds[i], curve.fpr[i], curve.tpr[i]);
    out << line;
  }
}

std::string roc_svg(const RocCurve& curve, const std::string& title) {
  constexpr double size = 400.0, margin = 50.0;
  auto px = [&](double v) { return margin + v * size; };
  auto py = [&](double v) { return margin + (1.0 - v) * size; };
  std::ostringstream svg;
  char buf[160];
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size + 2 * margin << "\" height=\""
      << size + 2 * margin << "\">\n";
  svg << "<rect x=\"" << margin << "\" y=\"" << margin << "\" width=\"" << size << "\" height=\"" << size
      << "\" fill=\"white\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(1) << "\" y2=\"" << py(1)
      << "\" stroke=\"gray\" stroke-dasharray=\"4 4\"/>\n";
  svg << "<polyline fill=\"none\" stroke=\"#d7301f\" stroke-width=\"2\" points=\"";
  for (std::size_t i = 0; i < curve.fpr.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%s%.3f,%.3f", i ? " " : "", px(curve.fpr[i]), py(curve.tpr[i]));
    svg << buf;
  }
  svg << "\"/>\n";
  std::snprintf(buf, sizeof buf, "%s (AUC = %.3f)", title.c_str(), curve.auc);
  svg << "<text x=\"" << margin << "\" y=\"" << margin - 15 << "\" font-family=\"sans-serif\" font-size=\"16\">"
      << buf << "</text>\n";
  svg << "<text x=\"" << px(0.5) << "\" y=\"" << py(0) + 35
      << "\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">False positive rate</text>\n";
  svg << "<text x=\"" << margin - 30 << "\" y=\"" << py(0.5)
      << "\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 "
      << margin - 30 << ' ' << py(0.5) << ")\">True positive rate</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace fpvit
