#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "fpvit/metrics.hpp"
#include "fpvit/synth.hpp"
#include "fpvit/train.hpp"
#include "published_metrics.hpp"
#include "test_util.hpp"

using namespace fpvit;
using fpvit::testing::pairwise_auc;
using fpvit::testing::TempDir;

namespace {

ViTConfig small() {
  ViTConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.embed_dim = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.ffn_hidden = 32;
  return c;
}

// Alternating control / KS prints at model resolution.
ImageSet synthetic_set(int per_class, std::uint64_t seed0, int size) {
  SynthSpec s;
  s.image_size = 64;
  s.freq_delta = 0.03;
  ImageSet set;
  for (int i = 0; i < 2 * per_class; ++i) {
    const int y = i % 2;
    set.images.push_back(prepare_image(generate_print(s, y ? Label::KS : Label::Control, seed0 + i), size));
    set.targets.push_back(y);
    set.record_index.push_back(static_cast<std::size_t>(i));
  }
  return set;
}

Checkpoint<float> constant_model(const ViTConfig& c, float l0, float l1, int fold) {
  Checkpoint<float> ck{init_params<float>(c, 1), {c, Task::ControlVsKS, 1, fold}};
  ck.params.head_weight.mutable_value().setZero();
  ck.params.head_bias.mutable_value() << l0, l1;
  return ck;
}

std::vector<FloatImage> random_inputs(int n, int size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<FloatImage> out;
  for (int i = 0; i < n; ++i) {
    FloatImage img(size, size);
    for (Eigen::Index k = 0; k < img.size(); ++k) img.data()[k] = rng.normal();
    out.push_back(img);
  }
  return out;
}

}  // namespace

TEST(Metrics, HandConfusion) {
  // 5 TP, 3 FN, 2 FP, 10 TN.
  std::vector<double> s;
  std::vector<int> y;
  for (int i = 0; i < 5; ++i) s.push_back(0.9), y.push_back(1);
  for (int i = 0; i < 3; ++i) s.push_back(0.2), y.push_back(1);
  for (int i = 0; i < 2; ++i) s.push_back(0.7), y.push_back(0);
  for (int i = 0; i < 10; ++i) s.push_back(0.1), y.push_back(0);
  const EvalReport r = compute_metrics(s, y);
  EXPECT_EQ(r.confusion.tp, 5u);
  EXPECT_EQ(r.confusion.fp, 2u);
  EXPECT_EQ(r.confusion.fn, 3u);
  EXPECT_EQ(r.confusion.tn, 10u);
  EXPECT_NEAR(r.precision, 0.7143, 5e-5);
  EXPECT_NEAR(r.recall, 0.625, 1e-12);
  EXPECT_NEAR(r.f1, 0.6667, 5e-5);
  EXPECT_NEAR(r.accuracy, 0.75, 1e-12);
  EXPECT_EQ(r.n_images, 20u);
}

TEST(Metrics, PerfectScores) {
  const std::vector<double> s{1, 1, 0, 0, 1};
  const std::vector<int> y{1, 1, 0, 0, 1};
  const EvalReport r = compute_metrics(s, y);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.precision, 1.0);
  EXPECT_EQ(r.recall, 1.0);
  EXPECT_EQ(r.f1, 1.0);
  EXPECT_EQ(r.auc, 1.0);
}

TEST(Metrics, UndefinedRatiosAreFlagged) {
  const std::vector<double> s{0.1, 0.2, 0.3};
  const std::vector<int> y{0, 0, 1};
  const EvalReport r = compute_metrics(s, y);
  EXPECT_TRUE(r.precision_undefined);
  EXPECT_EQ(r.precision, 0.0);
  EXPECT_EQ(r.f1, 0.0);
  const std::vector<int> neg{0, 0, 0};
  const EvalReport one = compute_metrics(s, neg);
  EXPECT_TRUE(one.recall_undefined);
  EXPECT_FALSE(one.auc_defined);
  EXPECT_THROW(compute_metrics(std::vector<double>{}, std::vector<int>{}), Error);
}

TEST(Metrics, HalfScoreGoesToClassZero) {
  const std::vector<double> s{0.5};
  const std::vector<int> y{1};
  EXPECT_EQ(compute_metrics(s, y).confusion.fn, 1u);
}

TEST(Metrics, PublishedRowsFitReportFormat) {
  for (const auto& row : fpvit::testing::kPublishedMetrics) {
    const nlohmann::json j = to_json(fpvit::testing::as_report(row));
    for (const char* key : {"accuracy", "precision", "recall", "f1", "auc", "confusion", "n_images"})
      EXPECT_TRUE(j.contains(key)) << key;
    for (const char* key : {"accuracy", "precision", "recall", "f1", "auc"}) {
      EXPECT_GE(j[key].get<double>(), 0.0);
      EXPECT_LE(j[key].get<double>(), 1.0);
    }
    EXPECT_EQ(j["f1"].get<double>(), row.f1);
    EXPECT_EQ(j["auc"].get<double>(), row.auc);
  }
}

TEST(Roc, SimpleCases) {
  const std::vector<int> y{0, 1, 1, 0};
  const std::vector<double> s{0.1, 0.9, 0.8, 0.2};
  EXPECT_DOUBLE_EQ(roc_auc(s, y).auc, 1.0);
  const std::vector<double> rev{0.9, 0.1, 0.2, 0.8};
  EXPECT_DOUBLE_EQ(roc_auc(rev, y).auc, 0.0);
  const std::vector<double> flat(4, 0.5);
  EXPECT_DOUBLE_EQ(roc_auc(flat, y).auc, 0.5);
  EXPECT_THROW(roc_auc(s, std::vector<int>{1, 1, 1, 1}), Error);
}

TEST(Roc, MatchesPairwiseStatisticWithTies) {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(49));
    std::vector<double> s(static_cast<std::size_t>(n));
    std::vector<int> y(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      s[static_cast<std::size_t>(i)] = static_cast<double>(rng.below(8)) / 7.0;
      y[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(2));
    }
    y[0] = 0;
    y[1] = 1;
    const RocCurve c = roc_auc(s, y);
    EXPECT_NEAR(c.auc, pairwise_auc(s, y), 1e-9);
    EXPECT_EQ(c.fpr.front(), 0.0);
    EXPECT_EQ(c.tpr.front(), 0.0);
    EXPECT_EQ(c.fpr.back(), 1.0);
    EXPECT_EQ(c.tpr.back(), 1.0);
    for (std::size_t k = 1; k < c.fpr.size(); ++k) {
      EXPECT_GE(c.fpr[k], c.fpr[k - 1]);
      EXPECT_GE(c.tpr[k], c.tpr[k - 1]);
      EXPECT_LT(c.thresholds[k], c.thresholds[k - 1]);
    }
  }
}

TEST(Roc, InvariantUnderMonotoneTransform) {
  Rng rng(32);
  std::vector<double> s, t;
  std::vector<int> y;
  for (int i = 0; i < 40; ++i) {
    s.push_back(rng.uniform(-3, 3));
    t.push_back(std::exp(2.0 * s.back()) + 5.0);
    y.push_back(static_cast<int>(rng.below(2)));
  }
  EXPECT_DOUBLE_EQ(roc_auc(s, y).auc, roc_auc(t, y).auc);
}

TEST(Roc, CsvAndSvgOutputs) {
  TempDir dir("roc");
  const std::vector<int> y{0, 1, 1, 0};
  const std::vector<double> s{0.1, 0.9, 0.4, 0.6};
  const RocCurve c = roc_auc(s, y);
  write_roc_csv(c, dir / "roc.csv");
  std::ifstream in(dir / "roc.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "threshold,fpr,tpr");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, c.fpr.size());
  const std::string svg = roc_svg(c, "t");
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
}

TEST(Train, LossDecreasesOnSmallSubset) {
  const ViTConfig c = small();
  const ImageSet train = synthetic_set(10, 100, 32), val = synthetic_set(3, 500, 32);
  TrainConfig cfg;
  cfg.lr = 3e-3;
  cfg.batch_size = 4;
  const FoldResult r = train_fold(train, val, c, cfg, 9);
  ASSERT_EQ(r.log.size(), 10u);
  EXPECT_LT(r.log.back().train_loss, r.log.front().train_loss);
  for (const EpochLog& e : r.log) {
    EXPECT_TRUE(std::isfinite(e.val_loss));
    EXPECT_GE(e.val_accuracy, 0.0);
    EXPECT_LE(e.val_accuracy, 1.0);
  }
}

TEST(Train, ZeroLearningRateKeepsInitialParameters) {
  const ViTConfig c = small();
  const ImageSet train = synthetic_set(4, 1, 32), val = synthetic_set(2, 50, 32);
  TrainConfig cfg;
  cfg.lr = 0.0;
  cfg.epochs = 3;
  cfg.batch_size = 3;
  const FoldResult r = train_fold(train, val, c, cfg, 4);
  const auto init = init_params<float>(c, derive_seed(4, "init"));
  const auto a = r.params.named(), b = init.named();
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_TRUE((a[i].second.value().array() == b[i].second.value().array()).all()) << a[i].first;
  // Parameters never move, so validation loss is the same every epoch.
  for (const EpochLog& e : r.log) EXPECT_EQ(e.val_loss, r.log.front().val_loss);
}

TEST(Train, SameSeedGivesIdenticalCheckpoints) {
  TempDir dir("train_det");
  const ViTConfig c = small();
  const ImageSet train = synthetic_set(4, 1, 32), val = synthetic_set(2, 50, 32);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 3;
  const FoldResult a = train_fold(train, val, c, cfg, 21, 0);
  const FoldResult b = train_fold(train, val, c, cfg, 21, 0);
  save_checkpoint(dir / "a.ckpt", a.params, a.meta);
  save_checkpoint(dir / "b.ckpt", b.params, b.meta);
  std::ifstream fa(dir / "a.ckpt", std::ios::binary), fb(dir / "b.ckpt", std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
  EXPECT_EQ(sa, sb);
  const FoldResult d = train_fold(train, val, c, cfg, 22, 0);
  EXPECT_FALSE((d.params.head_weight.value().array() == a.params.head_weight.value().array()).all());
}

TEST(Train, RejectsBadInputs) {
  const ViTConfig c = small();
  const ImageSet train = synthetic_set(2, 1, 32), empty;
  TrainConfig cfg;
  EXPECT_THROW(train_fold(empty, train, c, cfg, 1), Error);
  EXPECT_THROW(train_fold(train, empty, c, cfg, 1), Error);
  cfg.epochs = 0;
  EXPECT_THROW(train_fold(train, train, c, cfg, 1), Error);
  cfg.epochs = 1;
  ImageSet one_class = train;
  for (int& y : one_class.targets) y = 0;
  EXPECT_THROW(train_fold(one_class, train, c, cfg, 1), Error);
}

TEST(Train, EnsembleFoldsPartitionTraining) {
  TempDir dir("ensemble_train");
  SynthSpec s;
  s.image_size = 48;
  const Manifest m = generate_cohort(s, {{Label::Control, 6}, {Label::KS, 6}}, dir / "raw");
  const SplitPlan plan = make_split(m, Task::ControlVsKS, 0.2, 5, 3);
  const SplitIndex idx = expand_split(plan, m);
  ViTConfig c = small();
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.seed = 40;
  const auto results = train_ensemble(m, plan, c, cfg, 2);
  ASSERT_EQ(results.size(), 5u);
  std::size_t total = 0;
  for (std::size_t k = 0; k < 5; ++k) {
    EXPECT_EQ(results[k].meta.fold, static_cast<int>(k));
    EXPECT_EQ(results[k].meta.seed, 40u + k);
    const std::set<std::size_t> tr(results[k].train_records.begin(), results[k].train_records.end());
    for (std::size_t v : results[k].val_records) EXPECT_FALSE(tr.contains(v));
    EXPECT_EQ(results[k].val_records, idx.folds[k]);
    total += results[k].train_records.size();
  }
  EXPECT_EQ(total, 4 * idx.train.size());

  const auto written = save_run(dir / "run", results, m);
  EXPECT_EQ(written.size(), 10u);
  const Ensemble e = load_ensemble(dir / "run");
  ASSERT_EQ(e.members.size(), 5u);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(e.members[k].meta.fold, static_cast<int>(k));
  std::ifstream log(dir / "run" / "fold2_log.json");
  const auto j = nlohmann::json::parse(log);
  EXPECT_EQ(j["fold"], 2);
  EXPECT_EQ(j["epochs"].size(), 1u);
  EXPECT_EQ(j["val_images"].size(), idx.folds[2].size());
}

TEST(Ensemble, TieGoesToClassZero) {
  const ViTConfig c = small();
  const Ensemble e = make_ensemble({constant_model(c, 1, 0, 0), constant_model(c, 0, 1, 1)});
  const auto p = ensemble_predict(e, random_inputs(3, 32, 1));
  for (const Prediction& q : p) {
    EXPECT_EQ(q.mean_logits[0], 0.5);
    EXPECT_EQ(q.mean_logits[1], 0.5);
    EXPECT_EQ(q.probabilities[1], 0.5);
    EXPECT_EQ(q.label, 0);
  }
}

TEST(Ensemble, IdenticalMembersMatchSingleModel) {
  const ViTConfig c = small();
  const Checkpoint<float> one{init_params<float>(c, 77), {c, Task::ControlVsKS, 77, 0}};
  const auto inputs = random_inputs(20, 32, 2);
  const auto single = ensemble_predict(make_ensemble({one}), inputs);
  const auto five = ensemble_predict(make_ensemble({one, one, one, one, one}), inputs);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    EXPECT_EQ(single[i].label, five[i].label);
    EXPECT_EQ(single[i].mean_logits, five[i].mean_logits);
    EXPECT_EQ(single[i].probabilities, five[i].probabilities);
  }
}

TEST(Ensemble, MeanMatchesManualAverage) {
  const ViTConfig c = small();
  std::vector<Checkpoint<float>> members;
  for (int k = 0; k < 5; ++k) members.push_back({init_params<float>(c, 10 + k), {c, Task::ControlVsKS, 10u + k, k}});
  const auto inputs = random_inputs(10, 32, 3);
  const auto pred = ensemble_predict(make_ensemble(members), inputs);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    double l0 = 0.0, l1 = 0.0;
    for (const auto& m : members) {
      const std::vector<FloatImage> one{inputs[i]};
      const auto logits = forward(m.params, c, patch_batch<float>(one, c)).logits.value();
      l0 += logits(0, 0) / 5.0;
      l1 += logits(0, 1) / 5.0;
    }
    EXPECT_NEAR(pred[i].mean_logits[0], l0, 1e-6);
    EXPECT_NEAR(pred[i].mean_logits[1], l1, 1e-6);
    EXPECT_NEAR(pred[i].probabilities[1], 1.0 / (1.0 + std::exp(l0 - l1)), 1e-6);
  }
}

TEST(Ensemble, MismatchedMembersRejected) {
  ViTConfig c = small(), d = small();
  d.n_heads = 4;
  try {
    make_ensemble({constant_model(c, 0, 0, 0), constant_model(d, 0, 0, 1)});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ConfigMismatch);
  }
  auto other = constant_model(c, 0, 0, 1);
  other.meta.task = Task::KSvsWSS;
  EXPECT_THROW(make_ensemble({constant_model(c, 0, 0, 0), other}), Error);
}
