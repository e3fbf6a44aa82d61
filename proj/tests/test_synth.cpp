#include <gtest/gtest.h>

#include <numeric>

#include "fpvit/enhance.hpp"
#include "fpvit/imgio.hpp"
#include "fpvit/quality.hpp"
#include "fpvit/synth.hpp"
#include "test_util.hpp"

using namespace fpvit;
using fpvit::testing::TempDir;

namespace {

double mean_valid_frequency(const GrayImage& img) {
  const FloatImage f = normalize_image(to_unit_float(img), 0.5, 0.01).image;
  const FrequencyField fr = estimate_frequency(f, estimate_orientation(f, 16), 16);
  double sum = 0.0;
  int n = 0;
  for (Eigen::Index i = 0; i < fr.freqs.size(); ++i)
    if (fr.valid.data()[i]) {
      sum += fr.freqs.data()[i];
      ++n;
    }
  return n ? sum / n : 0.0;
}

}  // namespace

TEST(Synth, ValidatesSpec) {
  SynthSpec s;
  s.base_freq = 0.04;
  s.freq_delta = 0.01;
  EXPECT_THROW(validate(s), Error);
  s = SynthSpec{};
  s.whorl_density[1] = -1;
  EXPECT_THROW(validate(s), Error);
  EXPECT_NO_THROW(validate(SynthSpec{}));
}

TEST(Synth, ClassFrequencies) {
  SynthSpec s;
  EXPECT_DOUBLE_EQ(class_frequency(s, Label::Control), 0.1);
  EXPECT_DOUBLE_EQ(class_frequency(s, Label::KS), 0.11);
  EXPECT_DOUBLE_EQ(class_frequency(s, Label::WSS), 0.09);
}

TEST(Synth, CleanParallelPrintHasRecoverableFrequency) {
  SynthSpec s;
  s.noise_sigma = 0.0;
  s.whorl_density = {0, 0, 0};
  for (Label l : {Label::Control, Label::KS, Label::WSS}) {
    const double f = mean_valid_frequency(generate_print(s, l, 17));
    EXPECT_NEAR(f, class_frequency(s, l), 0.1 * class_frequency(s, l));
  }
}

TEST(Synth, Deterministic) {
  const SynthSpec s;
  EXPECT_TRUE((generate_print(s, Label::KS, 5) == generate_print(s, Label::KS, 5)).all());
  EXPECT_FALSE((generate_print(s, Label::KS, 5) == generate_print(s, Label::KS, 6)).all());
}

TEST(Synth, ClassMeanFrequenciesSeparate) {
  SynthSpec s;
  s.image_size = 128;
  auto class_mean = [&](Label l) {
    double sum = 0.0;
    for (std::uint64_t seed = 1; seed <= 8; ++seed) sum += mean_valid_frequency(render_print(s, l, seed, 1));
    return sum / 8.0;
  };
  const double c = class_mean(Label::Control), k = class_mean(Label::KS), w = class_mean(Label::WSS);
  EXPECT_GE(k - c, 0.8 * s.freq_delta);
  EXPECT_GE(c - w, 0.8 * s.freq_delta);
}

TEST(Synth, CohortLayoutAndDeterminism) {
  TempDir a("cohort_a"), b("cohort_b");
  SynthSpec s;
  s.image_size = 64;
  const Manifest m = generate_cohort(s, {{Label::Control, 12}, {Label::KS, 8}}, a.path(), 2);
  EXPECT_EQ(m.records.size(), 200u);
  const Manifest loaded = load_manifest(a / "manifest.csv");
  EXPECT_EQ(loaded.records.size(), 200u);
  EXPECT_EQ(loaded.records.front().path, "C001_f01.png");

  generate_cohort(s, {{Label::Control, 12}, {Label::KS, 8}}, b.path(), 1);
  for (const Record& r : loaded.records)
    EXPECT_TRUE((load_png(a.path() / r.path) == load_png(b.path() / r.path)).all()) << r.path;
}

TEST(Synth, CleanCohortPassesQualityGate) {
  TempDir dir("cohort_gate");
  SynthSpec s;
  s.image_size = 96;
  const Manifest m = generate_cohort(s, {{Label::Control, 2}, {Label::WSS, 2}}, dir.path());
  EXPECT_TRUE(gate_manifest(m, 2).rejected.empty());
}

TEST(Synth, ParticipantNuisanceIsShared) {
  // Fingers of one participant share the participant's contrast, so their
  // intensity ranges agree far more than across participants.
  SynthSpec s;
  s.noise_sigma = 0.0;
  s.whorl_density = {0, 0, 0};
  auto range = [&](std::uint64_t p, int f) {
    const GrayImage img = render_print(s, Label::Control, p, f);
    return static_cast<int>(img.maxCoeff()) - static_cast<int>(img.minCoeff());
  };
  for (std::uint64_t p = 1; p <= 4; ++p) EXPECT_LE(std::abs(range(p, 1) - range(p, 7)), 2);
}
