#include <gtest/gtest.h>

#include <fstream>

#include "fpvit/explain.hpp"
#include "fpvit/imgio.hpp"
#include "fpvit/synth.hpp"
#include "test_util.hpp"

using namespace fpvit;
using fpvit::testing::TempDir;

namespace {

// Every map row is the same distribution over the seq_len tokens.
AttentionRecord record_with_row(int layers, int heads, const Eigen::RowVectorXd& row) {
  AttentionRecord r;
  r.n_layers = layers;
  r.n_heads = heads;
  r.seq_len = static_cast<int>(row.size());
  for (int i = 0; i < layers * heads; ++i) r.maps.push_back(row.replicate(row.size(), 1));
  return r;
}

Eigen::RowVectorXd indicator(int seq_len, int token) {
  Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(seq_len);
  row(token) = 1.0;
  return row;
}

ViTConfig small() {
  ViTConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.embed_dim = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.ffn_hidden = 16;
  return c;
}

Checkpoint<float> member(const ViTConfig& c, std::uint64_t seed, int fold) {
  return {init_params<float>(c, seed), {c, Task::ControlVsKS, seed, fold}};
}

GrayImage print(int size) {
  SynthSpec s;
  s.image_size = size;
  return generate_print(s, Label::Control, 3);
}

}  // namespace

TEST(Colormap, EndpointsAndClamp) {
  const auto lo = colormap(0.0), hi = colormap(1.0), mid = colormap(0.5);
  EXPECT_EQ(lo[0], 64.0);
  EXPECT_EQ(hi[2], 160.0);
  EXPECT_EQ(mid[1], 80.0);
  EXPECT_EQ(colormap(-3.0), lo);
  EXPECT_EQ(colormap(7.0), hi);
}

TEST(Heatmap, UniformAttentionIsDegenerate) {
  const Eigen::RowVectorXd row = Eigen::RowVectorXd::Constant(197, 1.0 / 197.0);
  const Eigen::VectorXd s = class_token_attention(record_with_row(3, 4, row));
  EXPECT_EQ(s.size(), 196);
  const Heatmap h = make_heatmap(s, 224, 224);
  EXPECT_TRUE(h.degenerate);
  EXPECT_EQ(h.grid.rows(), 14);
  EXPECT_TRUE((h.grid == 0).all());
  const GrayImage img = print(224);
  const RgbImage o = overlay(img, h);
  EXPECT_TRUE((o.r == img).all() && (o.g == img).all() && (o.b == img).all());
}

TEST(Heatmap, IndicatorPatchPeaks) {
  const Heatmap h = make_heatmap(class_token_attention(record_with_row(3, 4, indicator(197, 8))), 224, 224);
  EXPECT_FALSE(h.degenerate);
  EXPECT_EQ(h.grid(0, 7), 1.0);
  EXPECT_EQ(h.grid.sum(), 1.0);
  EXPECT_EQ(h.grid.minCoeff(), 0.0);
  EXPECT_EQ(h.upsampled.rows(), 224);
}

TEST(Heatmap, FirstPatchMaximumLiesInItsCorner) {
  const Heatmap h = make_heatmap(class_token_attention(record_with_row(3, 4, indicator(197, 1))), 224, 224);
  Eigen::Index r = 0, c = 0;
  h.upsampled.maxCoeff(&r, &c);
  EXPECT_LT(r, 16);
  EXPECT_LT(c, 16);
}

TEST(Heatmap, GeneralGridSize) {
  Rng rng(3);
  Eigen::RowVectorXd row(50);
  for (int i = 0; i < 50; ++i) row(i) = rng.uniform(0.0, 1.0);
  row /= row.sum();
  const Heatmap h = make_heatmap(class_token_attention(record_with_row(2, 2, row)), 100, 60);
  EXPECT_EQ(h.grid.rows(), 7);
  EXPECT_EQ(h.grid.minCoeff(), 0.0);
  EXPECT_EQ(h.grid.maxCoeff(), 1.0);
  EXPECT_EQ(h.upsampled.cols(), 100);
  EXPECT_EQ(h.upsampled.rows(), 60);
  EXPECT_GE(h.upsampled.minCoeff(), 0.0);
  EXPECT_LE(h.upsampled.maxCoeff(), 1.0);
}

TEST(Heatmap, ShapeErrors) {
  EXPECT_THROW(make_heatmap(Eigen::VectorXd::Ones(10), 32, 32), Error);
  Eigen::VectorXd bad = Eigen::VectorXd::Ones(4);
  bad(1) = std::nan("");
  EXPECT_THROW(make_heatmap(bad, 32, 32), Error);
  AttentionRecord r = record_with_row(2, 2, indicator(5, 1));
  r.maps.pop_back();
  EXPECT_THROW(class_token_attention(r), Error);
  const Heatmap h = make_heatmap(Eigen::VectorXd::LinSpaced(4, 0, 1), 16, 16);
  EXPECT_THROW(overlay(GrayImage::Zero(8, 8), h), Error);
}

TEST(Overlay, ZeroPixelsUntouchedOthersBlended) {
  Eigen::VectorXd s = Eigen::VectorXd::Zero(4);
  s(3) = 1.0;
  const Heatmap h = make_heatmap(s, 2, 2);
  const GrayImage img = GrayImage::Constant(2, 2, 100);
  const RgbImage o = overlay(img, h);
  EXPECT_EQ(o.r(0, 0), 100);
  EXPECT_EQ(o.g(0, 1), 100);
  // Full-strength pixel: 0.6 * 100 + 0.4 * (255, 255, 160).
  EXPECT_EQ(o.r(1, 1), 162);
  EXPECT_EQ(o.g(1, 1), 162);
  EXPECT_EQ(o.b(1, 1), 124);
}

TEST(EnsembleHeatmap, AttentionRowsOfModelSumToOne) {
  const ViTConfig c = small();
  const auto p = init_params<float>(c, 5);
  const std::vector<FloatImage> one{prepare_image(print(64), 32)};
  const auto out = forward(p, c, patch_batch<float>(one, c), true);
  for (const auto& m : out.attention[0].maps)
    EXPECT_LT((m.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-5);
}

TEST(EnsembleHeatmap, IdenticalMembersReproduceSingleModel) {
  const ViTConfig c = small();
  const GrayImage img = print(80);
  const auto m = member(c, 9, 0);
  const Heatmap single = make_heatmap(attention_scores(m.params, c, prepare_image(img, 32)), 80, 80);
  const Heatmap five = ensemble_heatmap(make_ensemble({m, m, m, m, m}), img);
  EXPECT_TRUE((single.grid == five.grid).all());
  EXPECT_TRUE((single.upsampled == five.upsampled).all());
  EXPECT_EQ(five.sources.size(), 5u);
  EXPECT_EQ(five.sources[0], "fold0:seed9");
}

TEST(EnsembleHeatmap, MemberOrderDoesNotMatter) {
  const ViTConfig c = small();
  const GrayImage img = print(64);
  std::vector<Checkpoint<float>> ms;
  for (int k = 0; k < 5; ++k) ms.push_back(member(c, 20 + k, k));
  const Heatmap a = ensemble_heatmap(make_ensemble(ms), img);
  std::reverse(ms.begin(), ms.end());
  std::swap(ms[1], ms[3]);
  const Heatmap b = ensemble_heatmap(make_ensemble(ms), img);
  EXPECT_TRUE((a.grid == b.grid).all());
  EXPECT_EQ(a.sources, b.sources);
}

TEST(EnsembleHeatmap, ScoresAreMemberMean) {
  const ViTConfig c = small();
  const FloatImage prepared = prepare_image(print(64), 32);
  std::vector<Checkpoint<float>> ms;
  Eigen::VectorXd manual = Eigen::VectorXd::Zero(16);
  for (int k = 0; k < 3; ++k) {
    ms.push_back(member(c, 40 + k, k));
    manual += attention_scores(ms.back().params, c, prepared) / 3.0;
  }
  const Eigen::VectorXd s = ensemble_attention_scores(make_ensemble(ms), prepared);
  EXPECT_LT((s - manual).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_NEAR(s.sum(), manual.sum(), 1e-12);
}

TEST(EnsembleHeatmap, SavesOverlayAndSidecar) {
  TempDir dir("heat");
  const ViTConfig c = small();
  const GrayImage img = print(48);
  Heatmap h = ensemble_heatmap(make_ensemble({member(c, 2, 0)}), img);
  h.image = "x.png";
  const auto sidecar = save_heatmap(dir / "x_heat.png", img, h);
  EXPECT_EQ(sidecar.filename(), "x_heat.json");
  const GrayImage back = load_png(dir / "x_heat.png");
  EXPECT_EQ(back.rows(), 48);
  std::ifstream in(sidecar);
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j["grid_size"], 4);
  EXPECT_EQ(j["grid"].size(), 4u);
  EXPECT_EQ(j["image"], "x.png");
  EXPECT_EQ(j["width"], 48);
}
