#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <unistd.h>
#include <vector>

#include "fpvit/rng.hpp"
#include "fpvit/tensor.hpp"

namespace fpvit::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& name) {
    path_ = std::filesystem::temp_directory_path() / ("fpvit_test_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

struct GradCheck {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::string worst;  // "<param>[index]"
  std::size_t checked = 0;
};

/// Compares analytic gradients of `loss_fn` w.r.t. every entry of `params`
/// with central differences of step h. The relative error of one entry is
/// |a - n| / max(|a|, |n|, floor).
inline GradCheck check_gradients(const std::function<Tensor<double>()>& loss_fn,
                                 const std::vector<std::pair<std::string, Tensor<double>>>& params, double h,
                                 double floor) {
  for (const auto& [name, p] : params) p.clear_grad();
  backward(loss_fn());
  std::vector<Matrix<double>> analytic;
  for (const auto& [name, p] : params)
    analytic.push_back(p.has_grad() ? p.grad() : Matrix<double>::Zero(p.value().rows(), p.value().cols()));

  GradCheck out;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix<double>& v = params[k].second.mutable_value();
    for (Index i = 0; i < v.size(); ++i) {
      const double saved = v.data()[i];
      v.data()[i] = saved + h;
      const double up = loss_fn().item();
      v.data()[i] = saved - h;
      const double down = loss_fn().item();
      v.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k].data()[i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), floor});
      out.max_abs_error = std::max(out.max_abs_error, abs_err);
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst = params[k].first + "[" + std::to_string(i) + "]";
      }
      ++out.checked;
    }
  }
  return out;
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = true) {
  Tensor<double> t = Tensor<double>::zeros(shape, requires_grad);
  Matrix<double>& v = t.mutable_value();
  for (Index i = 0; i < v.size(); ++i) v.data()[i] = scale * rng.normal();
  return t;
}

/// Mann-Whitney statistic by explicit pair enumeration: P(s+ > s-) + P(s+ = s-) / 2.
inline double pairwise_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0;
  double pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      pairs += 1.0;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

}  // namespace fpvit::testing
