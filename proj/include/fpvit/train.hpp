#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fpvit/dataset.hpp"
#include "fpvit/vit.hpp"

namespace fpvit {

struct TrainConfig {
  int epochs = 10;
  double lr = 3e-4;
  int batch_size = 32;
  std::uint64_t seed = 0;
  Task task = Task::ControlVsKS;
  bool use_class_weights = true;
};

/// Model-ready images (resized, standardized) with task class indices.
struct ImageSet {
  std::vector<FloatImage> images;
  std::vector<int> targets;
  std::vector<std::size_t> record_index;  // positions in the source manifest

  std::size_t size() const { return images.size(); }
};

/// Loads a grayscale image file and turns it into model input: [0,1]
/// floats, bilinear resize to image_size, per-image standardization.
FloatImage prepare_image(const std::filesystem::path& path, int image_size);
FloatImage prepare_image(const GrayImage& img, int image_size);

ImageSet load_image_set(const Manifest& m, std::span<const std::size_t> indices, Task task, int image_size,
                        int threads = 1);

/// Subset of an already loaded set, by position.
ImageSet subset(const ImageSet& all, std::span<const std::size_t> positions);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct FoldResult {
  ModelParams<float> params;
  CheckpointMeta meta;
  std::vector<EpochLog> log;
  std::vector<std::size_t> train_records;
  std::vector<std::size_t> val_records;
};

using EpochCallback = std::function<void(int fold, const EpochLog&)>;

/// Trains one model for cfg.epochs epochs of shuffled mini-batch
/// class-weighted cross-entropy with Adam and returns the final-epoch
/// parameters. All randomness derives from fold_seed.
FoldResult train_fold(const ImageSet& train, const ImageSet& val, const ViTConfig& vit, const TrainConfig& cfg,
                      std::uint64_t fold_seed, int fold = -1, const EpochCallback& on_epoch = {});

/// Model k trains on every fold except k and validates on fold k, with seed
/// cfg.seed + k. Folds run concurrently on up to `threads` workers.
std::vector<FoldResult> train_ensemble(const Manifest& m, const SplitPlan& plan, const ViTConfig& vit,
                                       const TrainConfig& cfg, int threads = 1, const EpochCallback& on_epoch = {});

/// Writes model_fold<k>.ckpt and fold<k>_log.json per result into run_dir.
std::vector<std::filesystem::path> save_run(const std::filesystem::path& run_dir, const std::vector<FoldResult>& results,
                                            const Manifest& m);

nlohmann::json to_json(const EpochLog& log);

/// Checkpoints sharing one config and task, ordered by fold id.
struct Ensemble {
  ViTConfig config;
  Task task = Task::ControlVsKS;
  std::vector<Checkpoint<float>> members;
};

/// Throws ConfigMismatch when members disagree on config or task.
Ensemble make_ensemble(std::vector<Checkpoint<float>> members);
/// Loads every model_fold*.ckpt in run_dir.
Ensemble load_ensemble(const std::filesystem::path& run_dir);

struct Prediction {
  std::array<double, 2> mean_logits{};
  std::array<double, 2> probabilities{};
  /// argmax of the mean logits; ties go to class 0.
  int label = 0;
};

/// Mean of the members' logits, softmax of the mean, argmax.
std::vector<Prediction> ensemble_predict(const Ensemble& ensemble, std::span<const FloatImage> images);

/// Raw per-model logits [n_images x 2] for one member.
Matrix<double> model_logits(const ModelParams<float>& params, const ViTConfig& cfg, std::span<const FloatImage> images);

}  // namespace fpvit
