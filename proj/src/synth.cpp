#include "fpvit/synth.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <vector>

#include "fpvit/enhance.hpp"
#include "fpvit/error.hpp"
#include "fpvit/imgio.hpp"
#include "fpvit/parallel.hpp"
#include "fpvit/rng.hpp"

namespace fpvit {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kDeg = kPi / 180.0;

struct Whorl {
  double cx, cy, radius;
  double turn;  // +1 or -1 spiral handedness
};

double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

}  // namespace

void validate(const SynthSpec& spec) {
  if (spec.image_size < 16) throw Error(ErrorKind::InvalidArgument, "synth: image_size must be >= 16");
  const double tol = 1e-12;
  for (double f : {spec.base_freq, spec.base_freq + spec.freq_delta, spec.base_freq - spec.freq_delta})
    if (f < kMinRidgeFrequency - tol || f > kMaxRidgeFrequency + tol)
      throw Error(ErrorKind::InvalidArgument, "synth: class frequency " + std::to_string(f) +
                                                  " outside the ridge range [1/25, 1/3]");
  for (int d : spec.whorl_density)
    if (d < 0) throw Error(ErrorKind::InvalidArgument, "synth: whorl density must be >= 0");
  if (spec.noise_sigma < 0.0) throw Error(ErrorKind::InvalidArgument, "synth: noise_sigma must be >= 0");
}

double class_frequency(const SynthSpec& spec, Label label) {
  switch (label) {
    case Label::Control: return spec.base_freq;
    case Label::KS: return spec.base_freq + spec.freq_delta;
    case Label::WSS: return spec.base_freq - spec.freq_delta;
  }
  return spec.base_freq;
}

GrayImage render_print(const SynthSpec& spec, Label label, std::uint64_t participant_seed, int finger) {
  validate(spec);
  const int size = spec.image_size;
  const double freq = class_frequency(spec, label);

  Rng participant(derive_seed(participant_seed, "participant"));
  const double global_rotation = participant.uniform(-15.0, 15.0) * kDeg;
  const double contrast = participant.uniform(0.6, 1.0);

  Rng rng(derive_seed(participant_seed, static_cast<std::uint64_t>(finger)));
  const double theta = global_rotation + rng.uniform(-10.0, 10.0) * kDeg;
  const double phase = rng.uniform();
  // Gentle bending of the ridge flow: the across-ridge coordinate is
  // displaced sinusoidally along the ridge direction.
  const double warp_amp = rng.uniform(0.0, 4.0);
  const double warp_len = rng.uniform(0.8, 1.6) * size;
  const double warp_phase = rng.uniform(0.0, 2.0 * kPi);

  std::vector<Whorl> whorls;
  const int n_whorls = spec.whorl_density[static_cast<std::size_t>(label)];
  for (int i = 0; i < n_whorls; ++i) {
    Whorl w;
    w.cx = rng.uniform(0.2, 0.8) * size;
    w.cy = rng.uniform(0.2, 0.8) * size;
    w.radius = rng.uniform(0.12, 0.18) * size;
    w.turn = rng.uniform() < 0.5 ? -1.0 : 1.0;
    whorls.push_back(w);
  }

  const double c = std::cos(theta), s = std::sin(theta);
  const double mid = 0.5 * (size - 1);
  GrayImage img(size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double dx = x - mid, dy = y - mid;
      const double along = dx * c + dy * s;
      const double across = -dx * s + dy * c + warp_amp * std::sin(2.0 * kPi * along / warp_len + warp_phase);
      double value = std::cos(2.0 * kPi * (freq * across + phase));

      // Spiral whorls replace the parallel pattern inside their disc.
      for (const Whorl& w : whorls) {
        const double rx = x - w.cx, ry = y - w.cy;
        const double r = std::hypot(rx, ry);
        const double weight = 1.0 - smoothstep(0.8 * w.radius, 1.2 * w.radius, r);
        if (weight <= 0.0) continue;
        const double spiral = std::cos(2.0 * kPi * freq * r + w.turn * std::atan2(ry, rx));
        value = (1.0 - weight) * value + weight * spiral;
      }

      double v = 0.5 + 0.5 * contrast * value;
      if (spec.noise_sigma > 0.0) v += spec.noise_sigma * rng.normal();
      img(y, x) = quantize_u8(255.0 * std::clamp(v, 0.0, 1.0));
    }
  }
  return img;
}

Manifest generate_cohort(const SynthSpec& spec, const std::map<Label, int>& n_per_class,
                         const std::filesystem::path& out_dir, int threads) {
  validate(spec);
  std::filesystem::create_directories(out_dir);

  struct Job {
    std::string participant;
    Label label;
    std::uint64_t seed;
    int finger;
  };
  std::vector<Job> jobs;
  for (const auto& [label, count] : n_per_class) {
    if (count < 0) throw Error(ErrorKind::InvalidArgument, "synth: negative participant count");
    const char prefix = label == Label::Control ? 'C' : label == Label::KS ? 'K' : 'W';
    for (int p = 0; p < count; ++p) {
      char id[16];
      std::snprintf(id, sizeof id, "%c%03d", prefix, p + 1);
      const std::uint64_t seed = derive_seed(spec.seed, id);
      for (int f = 1; f <= 10; ++f) jobs.push_back({id, label, seed, f});
    }
  }

  Manifest m;
  m.base_dir = out_dir;
  m.records.resize(jobs.size());
  parallel_for(jobs.size(), threads, [&](std::size_t i) {
    const Job& job = jobs[i];
    const std::string name = job.participant + "_f" + (job.finger < 10 ? "0" : "") + std::to_string(job.finger) + ".png";
    write_png(out_dir / name, render_print(spec, job.label, job.seed, job.finger));
    m.records[i] = Record{job.participant, job.finger, job.label, name, std::nullopt};
  });
  validate_manifest(m);
  save_manifest(m, out_dir / "manifest.csv");
  return m;
}

}  // namespace fpvit
