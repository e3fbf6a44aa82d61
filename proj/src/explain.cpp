#include "fpvit/explain.hpp"

#include <cmath>
#include <fstream>

#include "fpvit/error.hpp"
#include "fpvit/imgio.hpp"

namespace fpvit {

std::array<double, 3> colormap(double v, const std::array<Rgb, 5>& stops) {
  v = std::clamp(v, 0.0, 1.0);
  const double pos = v * static_cast<double>(stops.size() - 1);
  const auto i = std::min<std::size_t>(static_cast<std::size_t>(pos), stops.size() - 2);
  const double t = pos - static_cast<double>(i);
  std::array<double, 3> c{};
  for (std::size_t k = 0; k < 3; ++k)
    c[k] = (1.0 - t) * static_cast<double>(stops[i][k]) + t * static_cast<double>(stops[i + 1][k]);
  return c;
}

Eigen::VectorXd class_token_attention(const AttentionRecord& record) {
  const Index s = record.seq_len;
  if (record.n_layers < 1 || record.n_heads < 1 || s < 2)
    throw Error(ErrorKind::ShapeMismatch, "attention record is empty");
  if (record.maps.size() != static_cast<std::size_t>(record.n_layers * record.n_heads))
    throw Error(ErrorKind::ShapeMismatch, "attention record holds " + std::to_string(record.maps.size()) +
                                              " maps, expected " +
                                              std::to_string(record.n_layers * record.n_heads));
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(s - 1);
  for (const auto& map : record.maps) {
    if (map.rows() != s || map.cols() != s)
      throw Error(ErrorKind::ShapeMismatch, "attention map is " + std::to_string(map.rows()) + "x" +
                                                std::to_string(map.cols()) + ", expected " + std::to_string(s) +
                                                "x" + std::to_string(s));
    acc += map.row(0).tail(s - 1).transpose();
  }
  return acc / static_cast<double>(record.maps.size());
}

Heatmap make_heatmap(const Eigen::VectorXd& scores, Eigen::Index width, Eigen::Index height) {
  const auto side = static_cast<Index>(std::llround(std::sqrt(static_cast<double>(scores.size()))));
  if (scores.size() == 0 || side * side != scores.size())
    throw Error(ErrorKind::ShapeMismatch,
                "make_heatmap: " + std::to_string(scores.size()) + " scores do not form a square grid");
  if (!scores.allFinite()) throw Error(ErrorKind::NonFinite, "make_heatmap: non-finite attention score");

  Heatmap h;
  h.grid = FloatImage::Zero(side, side);
  const double lo = scores.minCoeff(), hi = scores.maxCoeff();
  if (hi > lo) {
    for (Index i = 0; i < scores.size(); ++i) h.grid(i / side, i % side) = (scores(i) - lo) / (hi - lo);
  } else {
    h.degenerate = true;
  }
  h.upsampled = resize_bilinear(h.grid, width, height);
  return h;
}

RgbImage overlay(const GrayImage& image, const Heatmap& heatmap, const std::array<Rgb, 5>& stops) {
  if (image.rows() != heatmap.upsampled.rows() || image.cols() != heatmap.upsampled.cols())
    throw Error(ErrorKind::ShapeMismatch, "overlay: heatmap and image sizes differ");
  RgbImage out{image, image, image};
  GrayImage* planes[3] = {&out.r, &out.g, &out.b};
  for (Index y = 0; y < image.rows(); ++y) {
    for (Index x = 0; x < image.cols(); ++x) {
      const double v = heatmap.upsampled(y, x);
      if (v <= 0.0) continue;
      const double alpha = kOverlayAlpha * std::min(v, 1.0);
      const auto c = colormap(v, stops);
      const double g = static_cast<double>(image(y, x));
      for (std::size_t k = 0; k < 3; ++k) (*planes[k])(y, x) = quantize_u8((1.0 - alpha) * g + alpha * c[k]);
    }
  }
  return out;
}

Eigen::VectorXd ensemble_attention_scores(const Ensemble& ensemble, const FloatImage& prepared) {
  if (ensemble.members.empty()) throw Error(ErrorKind::InvalidArgument, "ensemble has no members");
  // Extended-precision sum: k equal doubles add exactly, so identical members
  // reproduce the single-model vector bit for bit.
  Eigen::Matrix<long double, Eigen::Dynamic, 1> acc;
  for (const auto& member : ensemble.members) {
    if (!(member.meta.config == ensemble.config))
      throw Error(ErrorKind::ConfigMismatch, "ensemble member config differs from the ensemble config");
    const Eigen::VectorXd s = attention_scores(member.params, ensemble.config, prepared);
    if (acc.size() == 0) acc = Eigen::Matrix<long double, Eigen::Dynamic, 1>::Zero(s.size());
    acc += s.cast<long double>();
  }
  acc /= static_cast<long double>(ensemble.members.size());
  return acc.cast<double>();
}

Heatmap ensemble_heatmap(const Ensemble& ensemble, const GrayImage& image) {
  const FloatImage prepared = prepare_image(image, ensemble.config.image_size);
  Heatmap h = make_heatmap(ensemble_attention_scores(ensemble, prepared), image.cols(), image.rows());
  for (const auto& m : ensemble.members)
    h.sources.push_back("fold" + std::to_string(m.meta.fold) + ":seed" + std::to_string(m.meta.seed));
  return h;
}

nlohmann::json to_json(const Heatmap& heatmap) {
  nlohmann::json grid = nlohmann::json::array();
  for (Index y = 0; y < heatmap.grid.rows(); ++y) {
    std::vector<double> row(static_cast<std::size_t>(heatmap.grid.cols()));
    for (Index x = 0; x < heatmap.grid.cols(); ++x) row[static_cast<std::size_t>(x)] = heatmap.grid(y, x);
    grid.push_back(row);
  }
  return {{"grid_size", heatmap.grid.rows()},
          {"grid", grid},
          {"degenerate", heatmap.degenerate},
          {"width", heatmap.upsampled.cols()},
          {"height", heatmap.upsampled.rows()},
          {"image", heatmap.image},
          {"sources", heatmap.sources}};
}

std::filesystem::path save_heatmap(const std::filesystem::path& png_path, const GrayImage& image,
                                   const Heatmap& heatmap) {
  write_png(png_path, overlay(image, heatmap));
  auto sidecar = png_path;
  sidecar.replace_extension(".json");
  std::ofstream out(sidecar);
  if (!out) throw Error(ErrorKind::Io, "cannot write '" + sidecar.string() + "'");
  out << to_json(heatmap).dump(2) << "\n";
  return sidecar;
}

}  // namespace fpvit
