#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>

#include "fpvit/dataset.hpp"
#include "fpvit/image.hpp"

namespace fpvit {

/// Class-conditional synthetic print generator settings. Control prints use
/// base_freq, KS prints base_freq + freq_delta, WSS prints base_freq - freq_delta.
struct SynthSpec {
  int image_size = 224;
  double base_freq = 0.1;
  double freq_delta = 0.01;
  /// Spiral singularities per print, indexed by Label.
  std::array<int, 3> whorl_density{0, 2, 1};
  double noise_sigma = 0.05;
  std::uint64_t seed = 1;
};

/// Throws ErrorKind::InvalidArgument when a class frequency leaves the
/// ridge range or a density is negative.
void validate(const SynthSpec& spec);

double class_frequency(const SynthSpec& spec, Label label);

/// One print. Participant-level nuisance (global rotation within +-15 deg,
/// contrast) is drawn from participant_seed and shared by every finger;
/// finger-level variation from (participant_seed, finger).
GrayImage render_print(const SynthSpec& spec, Label label, std::uint64_t participant_seed, int finger);

/// Deterministic in (spec, label, seed).
inline GrayImage generate_print(const SynthSpec& spec, Label label, std::uint64_t seed) {
  return render_print(spec, label, seed, 1);
}

/// Writes <out_dir>/<participant>_f<finger>.png for ten fingers per
/// participant plus <out_dir>/manifest.csv, and returns the manifest.
Manifest generate_cohort(const SynthSpec& spec, const std::map<Label, int>& n_per_class,
                         const std::filesystem::path& out_dir, int threads = 1);

}  // namespace fpvit
