#include "fpvit/enhance.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "fpvit/error.hpp"
#include "fpvit/imgio.hpp"

namespace fpvit {

namespace {

constexpr double kPi = std::numbers::pi;

Eigen::Index grid_dim(Eigen::Index pixels, int block) { return (pixels + block - 1) / block; }

void check_block(const FloatImage& img, int block_size) {
  if (block_size < 1) throw Error(ErrorKind::InvalidArgument, "block_size must be >= 1");
  if (img.rows() < block_size || img.cols() < block_size)
    throw Error(ErrorKind::InvalidArgument, "image smaller than one block");
}

double wrap_axial(double a) {
  a = std::fmod(a, kPi);
  if (a < 0.0) a += kPi;
  if (a >= kPi) a -= kPi;
  return a;
}

// Sobel gradients with replicated borders.
void sobel(const FloatImage& img, FloatImage& gx, FloatImage& gy) {
  const Eigen::Index h = img.rows(), w = img.cols();
  gx.resize(h, w);
  gy.resize(h, w);
  auto at = [&](Eigen::Index y, Eigen::Index x) {
    return img(std::clamp<Eigen::Index>(y, 0, h - 1), std::clamp<Eigen::Index>(x, 0, w - 1));
  };
  for (Eigen::Index y = 0; y < h; ++y) {
    for (Eigen::Index x = 0; x < w; ++x) {
      gx(y, x) = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)) -
                 (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
      gy(y, x) = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)) -
                 (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
    }
  }
}

double sample_clamped(const FloatImage& img, double y, double x) {
  const Eigen::Index h = img.rows(), w = img.cols();
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<Eigen::Index>(std::floor(y));
  const auto x0 = static_cast<Eigen::Index>(std::floor(x));
  const Eigen::Index y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double wy = y - static_cast<double>(y0), wx = x - static_cast<double>(x0);
  return (1.0 - wy) * ((1.0 - wx) * img(y0, x0) + wx * img(y0, x1)) +
         wy * ((1.0 - wx) * img(y1, x0) + wx * img(y1, x1));
}

// Period of a projected ridge signature, or 0 when no regular peak train
// is present.
double signature_period(const std::vector<double>& sig) {
  std::vector<double> peaks;
  for (std::size_t k = 1; k + 1 < sig.size(); ++k) {
    if (sig[k] > sig[k - 1] && sig[k] >= sig[k + 1]) {
      // Parabolic refinement of the peak position.
      const double denom = sig[k - 1] - 2.0 * sig[k] + sig[k + 1];
      double offset = 0.0;
      if (denom < 0.0) offset = 0.5 * (sig[k - 1] - sig[k + 1]) / denom;
      peaks.push_back(static_cast<double>(k) + std::clamp(offset, -0.5, 0.5));
    }
  }
  if (peaks.size() < 2) return 0.0;
  std::vector<double> gaps;
  for (std::size_t i = 1; i < peaks.size(); ++i) gaps.push_back(peaks[i] - peaks[i - 1]);
  double mean = 0.0;
  for (double g : gaps) mean += g;
  mean /= static_cast<double>(gaps.size());
  double var = 0.0;
  for (double g : gaps) var += (g - mean) * (g - mean);
  var /= static_cast<double>(gaps.size());
  // Irregular peak trains come from noise, not ridges.
  if (std::sqrt(var) > 0.35 * mean) return 0.0;
  return mean;
}

bool in_ridge_range(double f) {
  constexpr double tol = 1e-9;
  return f >= kMinRidgeFrequency - tol && f <= kMaxRidgeFrequency + tol;
}

}  // namespace

double axial_distance(double a, double b) {
  const double d = wrap_axial(a - b);
  return std::min(d, kPi - d);
}

NormalizedImage normalize_image(const FloatImage& img, double target_mean, double target_var) {
  if (!(target_var > 0.0)) throw Error(ErrorKind::InvalidArgument, "normalize_image: target_var must be > 0");
  if (img.size() == 0) throw Error(ErrorKind::InvalidArgument, "normalize_image: empty image");
  const double n = static_cast<double>(img.size());
  const double mean = img.sum() / n;
  const double var = (img - mean).square().sum() / n;
  NormalizedImage out;
  if (!(var > 0.0)) {
    out.image = FloatImage::Constant(img.rows(), img.cols(), target_mean);
    out.degenerate = true;
    return out;
  }
  out.image = target_mean + (img - mean) * std::sqrt(target_var / var);
  return out;
}

OrientationField estimate_orientation(const FloatImage& img, int block_size) {
  check_block(img, block_size);
  FloatImage gx, gy;
  sobel(img, gx, gy);

  const Eigen::Index by = grid_dim(img.rows(), block_size), bx = grid_dim(img.cols(), block_size);
  BlockGrid<double> vx(by, bx), vy(by, bx), energy(by, bx);
  for (Eigen::Index i = 0; i < by; ++i) {
    for (Eigen::Index j = 0; j < bx; ++j) {
      const Eigen::Index y0 = i * block_size, x0 = j * block_size;
      const Eigen::Index hh = std::min<Eigen::Index>(block_size, img.rows() - y0);
      const Eigen::Index ww = std::min<Eigen::Index>(block_size, img.cols() - x0);
      const auto bgx = gx.block(y0, x0, hh, ww);
      const auto bgy = gy.block(y0, x0, hh, ww);
      vx(i, j) = (bgx.square() - bgy.square()).sum();
      vy(i, j) = 2.0 * (bgx * bgy).sum();
      energy(i, j) = (bgx.square() + bgy.square()).sum();
    }
  }

  OrientationField field;
  field.block_size = block_size;
  field.angles.resize(by, bx);
  field.coherence.resize(by, bx);
  field.low_coherence.resize(by, bx);

  // Doubled-angle unit vectors of the gradient direction.
  BlockGrid<double> c2(by, bx), s2(by, bx);
  constexpr double tiny = 1e-12;
  for (Eigen::Index i = 0; i < by; ++i) {
    for (Eigen::Index j = 0; j < bx; ++j) {
      const double mag = std::hypot(vx(i, j), vy(i, j));
      const bool empty = energy(i, j) <= tiny;
      field.low_coherence(i, j) = empty;
      field.coherence(i, j) = empty ? 0.0 : std::min(1.0, mag / energy(i, j));
      if (empty || mag <= tiny) {
        c2(i, j) = 0.0;
        s2(i, j) = 0.0;
      } else {
        c2(i, j) = vx(i, j) / mag;
        s2(i, j) = vy(i, j) / mag;
      }
    }
  }

  for (Eigen::Index i = 0; i < by; ++i) {
    for (Eigen::Index j = 0; j < bx; ++j) {
      double sc = 0.0, ss = 0.0;
      for (Eigen::Index di = -1; di <= 1; ++di) {
        for (Eigen::Index dj = -1; dj <= 1; ++dj) {
          const Eigen::Index ii = i + di, jj = j + dj;
          if (ii < 0 || jj < 0 || ii >= by || jj >= bx) continue;
          sc += c2(ii, jj);
          ss += s2(ii, jj);
        }
      }
      if (std::hypot(sc, ss) <= tiny) {
        field.angles(i, j) = 0.0;
        continue;
      }
      // Ridges run perpendicular to the dominant gradient.
      field.angles(i, j) = wrap_axial(0.5 * std::atan2(ss, sc) + 0.5 * kPi);
    }
  }
  return field;
}

FrequencyField estimate_frequency(const FloatImage& img, const OrientationField& orient, int block_size) {
  check_block(img, block_size);
  const Eigen::Index by = grid_dim(img.rows(), block_size), bx = grid_dim(img.cols(), block_size);
  if (orient.angles.rows() != by || orient.angles.cols() != bx)
    throw Error(ErrorKind::ShapeMismatch, "estimate_frequency: orientation grid does not match image blocks");

  constexpr int kLength = 32;  // samples across the ridges
  constexpr int kWidth = 16;   // samples averaged along the ridges

  FrequencyField field;
  field.block_size = block_size;
  field.freqs = BlockGrid<double>::Zero(by, bx);
  field.valid = BlockGrid<bool>::Constant(by, bx, false);

  std::vector<double> sig(kLength);
  for (Eigen::Index i = 0; i < by; ++i) {
    for (Eigen::Index j = 0; j < bx; ++j) {
      const double theta = orient.angles(i, j);
      const double ux = std::cos(theta), uy = std::sin(theta);  // along ridges
      const double nx = -uy, ny = ux;                           // across ridges
      const double cy = static_cast<double>(i * block_size) + 0.5 * (block_size - 1);
      const double cx = static_cast<double>(j * block_size) + 0.5 * (block_size - 1);
      for (int k = 0; k < kLength; ++k) {
        const double a = k - 0.5 * (kLength - 1);
        double acc = 0.0;
        for (int d = 0; d < kWidth; ++d) {
          const double b = d - 0.5 * (kWidth - 1);
          acc += sample_clamped(img, cy + a * ny + b * uy, cx + a * nx + b * ux);
        }
        sig[static_cast<std::size_t>(k)] = acc / kWidth;
      }
      const double period = signature_period(sig);
      if (period > 0.0) {
        const double f = 1.0 / period;
        if (in_ridge_range(f)) {
          field.freqs(i, j) = std::clamp(f, kMinRidgeFrequency, kMaxRidgeFrequency);
          field.valid(i, j) = true;
        }
      }
    }
  }

  std::vector<double> valid_values;
  for (Eigen::Index k = 0; k < field.freqs.size(); ++k)
    if (field.valid.data()[k]) valid_values.push_back(field.freqs.data()[k]);
  if (valid_values.empty()) throw Error(ErrorKind::NoRidgeStructure, "no ridge structure");

  // Fill invalid blocks from valid 3x3 neighbours, up to three passes.
  BlockGrid<bool> known = field.valid;
  for (int pass = 0; pass < 3; ++pass) {
    BlockGrid<double> next = field.freqs;
    BlockGrid<bool> next_known = known;
    bool changed = false;
    for (Eigen::Index i = 0; i < by; ++i) {
      for (Eigen::Index j = 0; j < bx; ++j) {
        if (known(i, j)) continue;
        double sum = 0.0;
        int count = 0;
        for (Eigen::Index di = -1; di <= 1; ++di) {
          for (Eigen::Index dj = -1; dj <= 1; ++dj) {
            const Eigen::Index ii = i + di, jj = j + dj;
            if (ii < 0 || jj < 0 || ii >= by || jj >= bx || !known(ii, jj)) continue;
            sum += field.freqs(ii, jj);
            ++count;
          }
        }
        if (count > 0) {
          next(i, j) = sum / count;
          next_known(i, j) = true;
          changed = true;
        }
      }
    }
    field.freqs = next;
    known = next_known;
    if (!changed) break;
  }
  if (!known.all()) {
    std::sort(valid_values.begin(), valid_values.end());
    const std::size_t n = valid_values.size();
    const double median = n % 2 ? valid_values[n / 2] : 0.5 * (valid_values[n / 2 - 1] + valid_values[n / 2]);
    for (Eigen::Index k = 0; k < field.freqs.size(); ++k)
      if (!known.data()[k]) field.freqs.data()[k] = median;
  }
  return field;
}

SegmentationMask segment(const FloatImage& img, int block_size, double var_threshold) {
  if (var_threshold < 0.0) throw Error(ErrorKind::InvalidArgument, "segment: var_threshold must be >= 0");
  check_block(img, block_size);
  const Eigen::Index by = grid_dim(img.rows(), block_size), bx = grid_dim(img.cols(), block_size);
  SegmentationMask mask;
  mask.block_size = block_size;
  mask.foreground.resize(by, bx);
  for (Eigen::Index i = 0; i < by; ++i) {
    for (Eigen::Index j = 0; j < bx; ++j) {
      const Eigen::Index y0 = i * block_size, x0 = j * block_size;
      const Eigen::Index hh = std::min<Eigen::Index>(block_size, img.rows() - y0);
      const Eigen::Index ww = std::min<Eigen::Index>(block_size, img.cols() - x0);
      const auto blk = img.block(y0, x0, hh, ww);
      const double mean = blk.mean();
      const double var = (blk - mean).square().mean();
      // A block with zero variance is never foreground, even at threshold 0.
      mask.foreground(i, j) = var > 0.0 && var >= var_threshold;
    }
  }
  return mask;
}

FloatImage gabor_kernel(double theta, double freq, double sigma_x, double sigma_y) {
  if (!(freq > 0.0 && freq <= 0.5)) throw Error(ErrorKind::InvalidArgument, "gabor_kernel: freq must be in (0, 0.5]");
  if (!(sigma_x > 0.0 && sigma_y > 0.0)) throw Error(ErrorKind::InvalidArgument, "gabor_kernel: sigmas must be > 0");

  // Axial angle, snapped to a 2^-30 rad grid so theta and theta + pi build
  // the same kernel bit for bit.
  double a = wrap_axial(theta);
  a = std::round(a * 0x1.0p30) * 0x1.0p-30;
  if (a >= kPi) a = 0.0;
  const double c = std::cos(a), s = std::sin(a);

  const int half = static_cast<int>(std::ceil(3.0 * std::max(sigma_x, sigma_y)));
  const int side = 2 * half + 1;
  FloatImage k(side, side);
  for (int y = -half; y <= half; ++y) {
    for (int x = -half; x <= half; ++x) {
      const double across = -x * s + y * c;
      const double along = x * c + y * s;
      k(y + half, x + half) =
          std::exp(-(across * across / (2.0 * sigma_x * sigma_x) + along * along / (2.0 * sigma_y * sigma_y))) *
          std::cos(2.0 * kPi * freq * across);
    }
  }
  return k - k.mean();
}

FloatImage convolve(const FloatImage& img, const FloatImage& kernel) {
  const Eigen::Index h = img.rows(), w = img.cols();
  const Eigen::Index kh = kernel.rows(), kw = kernel.cols();
  const Eigen::Index ry = kh / 2, rx = kw / 2;
  FloatImage out(h, w);
  for (Eigen::Index y = 0; y < h; ++y) {
    for (Eigen::Index x = 0; x < w; ++x) {
      double acc = 0.0;
      for (Eigen::Index v = 0; v < kh; ++v) {
        const Eigen::Index yy = y + v - ry;
        if (yy < 0 || yy >= h) continue;
        for (Eigen::Index u = 0; u < kw; ++u) {
          const Eigen::Index xx = x + u - rx;
          if (xx < 0 || xx >= w) continue;
          acc += kernel(v, u) * img(yy, xx);
        }
      }
      out(y, x) = acc;
    }
  }
  return out;
}

double mean_foreground_coherence(const OrientationField& orient, const SegmentationMask& mask) {
  double sum = 0.0;
  int count = 0;
  for (Eigen::Index k = 0; k < orient.coherence.size(); ++k) {
    if (!mask.foreground.data()[k]) continue;
    sum += orient.coherence.data()[k];
    ++count;
  }
  return count ? sum / count : 0.0;
}

EnhanceResult enhance_fingerprint_detailed(const GrayImage& img, const EnhanceConfig& cfg) {
  const int bs = cfg.block_size;
  const NormalizedImage norm = normalize_image(to_unit_float(img), cfg.target_mean, cfg.target_var);

  EnhanceResult result;
  result.orientation = estimate_orientation(norm.image, bs);
  result.mask = segment(norm.image, bs, cfg.var_threshold);
  result.mask.foreground = result.mask.foreground && !result.orientation.low_coherence;

  if (norm.degenerate || !result.mask.foreground.any()) {
    result.image = GrayImage::Constant(img.rows(), img.cols(), 128);
    result.degenerate = true;
    return result;
  }
  result.frequency = estimate_frequency(norm.image, result.orientation, bs);

  // Centre the signal so zero padding does not leak a DC offset into the
  // border responses.
  const FloatImage centred = norm.image - cfg.target_mean;
  const Eigen::Index h = img.rows(), w = img.cols();
  FloatImage filtered = FloatImage::Zero(h, w);
  for (Eigen::Index i = 0; i < result.mask.foreground.rows(); ++i) {
    for (Eigen::Index j = 0; j < result.mask.foreground.cols(); ++j) {
      if (!result.mask.foreground(i, j)) continue;
      const FloatImage k = gabor_kernel(result.orientation.angles(i, j), result.frequency.freqs(i, j),
                                        cfg.sigma_x, cfg.sigma_y);
      const Eigen::Index r = k.rows() / 2;
      const Eigen::Index y0 = i * bs, x0 = j * bs;
      const Eigen::Index y1 = std::min<Eigen::Index>(y0 + bs, h), x1 = std::min<Eigen::Index>(x0 + bs, w);
      for (Eigen::Index y = y0; y < y1; ++y) {
        for (Eigen::Index x = x0; x < x1; ++x) {
          double acc = 0.0;
          for (Eigen::Index v = -r; v <= r; ++v) {
            const Eigen::Index yy = y + v;
            if (yy < 0 || yy >= h) continue;
            for (Eigen::Index u = -r; u <= r; ++u) {
              const Eigen::Index xx = x + u;
              if (xx < 0 || xx >= w) continue;
              acc += k(v + r, u + r) * centred(yy, xx);
            }
          }
          filtered(y, x) = acc;
        }
      }
    }
  }

  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  auto is_fg = [&](Eigen::Index y, Eigen::Index x) { return result.mask.foreground(y / bs, x / bs); };
  for (Eigen::Index y = 0; y < h; ++y)
    for (Eigen::Index x = 0; x < w; ++x)
      if (is_fg(y, x)) {
        lo = std::min(lo, filtered(y, x));
        hi = std::max(hi, filtered(y, x));
      }

  result.image.resize(h, w);
  const double span = hi - lo;
  for (Eigen::Index y = 0; y < h; ++y) {
    for (Eigen::Index x = 0; x < w; ++x) {
      if (!is_fg(y, x)) {
        result.image(y, x) = 128;
      } else {
        result.image(y, x) = span > 0.0 ? quantize_u8(255.0 * (filtered(y, x) - lo) / span) : 128;
      }
    }
  }
  return result;
}

}  // namespace fpvit
