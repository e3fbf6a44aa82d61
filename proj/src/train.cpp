#include "fpvit/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <regex>

#include "fpvit/adam.hpp"
#include "fpvit/error.hpp"
#include "fpvit/imgio.hpp"
#include "fpvit/parallel.hpp"
#include "fpvit/rng.hpp"

namespace fpvit {

namespace {

constexpr int kInferenceBatch = 32;

struct LossSums {
  double weighted_loss = 0.0;
  double weight = 0.0;
  std::size_t correct = 0;
};

// Class-weighted loss and accuracy of a model over a set, evaluated in chunks.
LossSums evaluate(const ModelParams<float>& params, const ViTConfig& cfg, const ImageSet& set,
                  const std::array<float, 2>& weights) {
  LossSums sums;
  NoGradGuard no_grad;
  for (std::size_t start = 0; start < set.size(); start += kInferenceBatch) {
    const std::size_t n = std::min<std::size_t>(kInferenceBatch, set.size() - start);
    const auto images = std::span<const FloatImage>(set.images).subspan(start, n);
    const auto targets = std::span<const int>(set.targets).subspan(start, n);
    const Tensor<float> logits = forward(params, cfg, patch_batch<float>(images, cfg)).logits;
    const Tensor<float> loss = cross_entropy(logits, targets, std::span<const float>(weights));
    double wsum = 0.0;
    for (int y : targets) wsum += weights[static_cast<std::size_t>(y)];
    sums.weighted_loss += static_cast<double>(loss.item()) * wsum;
    sums.weight += wsum;
    for (std::size_t i = 0; i < n; ++i) {
      const int predicted = logits.value()(static_cast<Index>(i), 1) > logits.value()(static_cast<Index>(i), 0) ? 1 : 0;
      if (predicted == targets[i]) ++sums.correct;
    }
  }
  return sums;
}

}  // namespace

FloatImage prepare_image(const GrayImage& img, int image_size) {
  return standardize(resize_bilinear(to_unit_float(img), image_size, image_size));
}

FloatImage prepare_image(const std::filesystem::path& path, int image_size) {
  return prepare_image(load_png(path), image_size);
}

ImageSet load_image_set(const Manifest& m, std::span<const std::size_t> indices, Task task, int image_size,
                        int threads) {
  ImageSet set;
  set.images.resize(indices.size());
  set.targets.resize(indices.size());
  set.record_index.assign(indices.begin(), indices.end());
  parallel_for(indices.size(), threads, [&](std::size_t i) {
    const Record& r = m.records.at(indices[i]);
    const auto c = class_index(task, r.label);
    if (!c)
      throw Error(ErrorKind::InvalidArgument, "record " + r.path.string() + " is not part of task " +
                                                  std::string(to_string(task)));
    set.targets[i] = *c;
    set.images[i] = prepare_image(m.resolve(r), image_size);
  });
  return set;
}

ImageSet subset(const ImageSet& all, std::span<const std::size_t> positions) {
  ImageSet out;
  for (std::size_t p : positions) {
    out.images.push_back(all.images.at(p));
    out.targets.push_back(all.targets.at(p));
    out.record_index.push_back(all.record_index.at(p));
  }
  return out;
}

FoldResult train_fold(const ImageSet& train, const ImageSet& val, const ViTConfig& vit, const TrainConfig& cfg,
                      std::uint64_t fold_seed, int fold, const EpochCallback& on_epoch) {
  if (train.size() == 0) throw Error(ErrorKind::InvalidArgument, "train_fold: empty training partition");
  if (val.size() == 0) throw Error(ErrorKind::InvalidArgument, "train_fold: empty validation partition");
  if (cfg.epochs < 1 || cfg.batch_size < 1)
    throw Error(ErrorKind::InvalidArgument, "train_fold: epochs and batch_size must be >= 1");
  vit.validate();

  std::array<float, 2> weights{1.0f, 1.0f};
  if (cfg.use_class_weights) {
    std::array<double, 2> counts{0.0, 0.0};
    for (int y : train.targets) counts[static_cast<std::size_t>(y)] += 1.0;
    if (counts[0] == 0.0 || counts[1] == 0.0)
      throw Error(ErrorKind::InvalidArgument, "train_fold: training partition lacks one class");
    const double total = counts[0] + counts[1];
    weights = {static_cast<float>(total / (2.0 * counts[0])), static_cast<float>(total / (2.0 * counts[1]))};
  }

  FoldResult result;
  result.meta = {vit, cfg.task, fold_seed, fold};
  result.train_records = train.record_index;
  result.val_records = val.record_index;
  result.params = init_params<float>(vit, derive_seed(fold_seed, "init"));
  std::vector<Tensor<float>> params = result.params.parameters();
  AdamState<float> adam = make_adam_state<float>(params, cfg.lr);
  Rng shuffler(derive_seed(fold_seed, "shuffle"));

  std::vector<std::size_t> order(train.size());
  std::vector<FloatImage> batch_images;
  std::vector<int> batch_targets;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    shuffler.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size), ++batch_index) {
      const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), order.size() - start);
      batch_images.clear();
      batch_targets.clear();
      for (std::size_t i = start; i < start + n; ++i) {
        batch_images.push_back(train.images[order[i]]);
        batch_targets.push_back(train.targets[order[i]]);
      }
      result.params.zero_grad();
      const Tensor<float> logits = forward(result.params, vit, patch_batch<float>(batch_images, vit)).logits;
      const Tensor<float> loss = cross_entropy(logits, std::span<const int>(batch_targets), std::span<const float>(weights));
      if (!std::isfinite(loss.item()))
        throw Error(ErrorKind::NonFinite, "non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                              std::to_string(batch_index));
      backward(loss);
      adam_step<float>(std::span<Tensor<float>>(params), adam);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(n);
    }
    result.params.zero_grad();

    const LossSums v = evaluate(result.params, vit, val, weights);
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(train.size());
    log.val_loss = v.weighted_loss / v.weight;
    log.val_accuracy = static_cast<double>(v.correct) / static_cast<double>(val.size());
    result.log.push_back(log);
    if (on_epoch) on_epoch(fold, log);
  }
  return result;
}

std::vector<FoldResult> train_ensemble(const Manifest& m, const SplitPlan& plan, const ViTConfig& vit,
                                       const TrainConfig& cfg, int threads, const EpochCallback& on_epoch) {
  if (plan.folds.empty()) throw Error(ErrorKind::InvalidArgument, "train_ensemble: split plan has no folds");
  if (plan.task != cfg.task)
    throw Error(ErrorKind::ConfigMismatch, "train_ensemble: plan task " + std::string(to_string(plan.task)) +
                                               " differs from training task " + std::string(to_string(cfg.task)));
  const SplitIndex index = expand_split(plan, m);
  const ImageSet all = load_image_set(m, index.train, cfg.task, vit.image_size, threads);

  // Map record index -> position in `all`.
  std::vector<std::size_t> position(m.records.size(), 0);
  for (std::size_t i = 0; i < index.train.size(); ++i) position[index.train[i]] = i;
  auto positions_of = [&](const std::vector<std::size_t>& records) {
    std::vector<std::size_t> out;
    for (std::size_t r : records) out.push_back(position[r]);
    return out;
  };

  std::vector<FoldResult> results(plan.folds.size());
  parallel_for(plan.folds.size(), threads, [&](std::size_t k) {
    const ImageSet train = subset(all, positions_of(index.fold_train(k)));
    const ImageSet val = subset(all, positions_of(index.folds[k]));
    results[k] = train_fold(train, val, vit, cfg, cfg.seed + k, static_cast<int>(k), on_epoch);
  });
  return results;
}

nlohmann::json to_json(const EpochLog& log) {
  return {{"epoch", log.epoch}, {"train_loss", log.train_loss}, {"val_loss", log.val_loss},
          {"val_accuracy", log.val_accuracy}};
}

std::vector<std::filesystem::path> save_run(const std::filesystem::path& run_dir, const std::vector<FoldResult>& results,
                                            const Manifest& m) {
  std::filesystem::create_directories(run_dir);
  std::vector<std::filesystem::path> written;
  for (const FoldResult& r : results) {
    const std::string tag = "fold" + std::to_string(r.meta.fold);
    const auto ckpt = run_dir / ("model_" + tag + ".ckpt");
    save_checkpoint(ckpt, r.params, r.meta);
    written.push_back(ckpt);

    nlohmann::json log{{"fold", r.meta.fold}, {"seed", r.meta.seed}, {"task", to_string(r.meta.task)}};
    log["epochs"] = nlohmann::json::array();
    for (const EpochLog& e : r.log) log["epochs"].push_back(to_json(e));
    auto paths = [&](const std::vector<std::size_t>& records) {
      std::vector<std::string> out;
      for (std::size_t i : records) out.push_back(m.records.at(i).path.generic_string());
      return out;
    };
    log["train_images"] = paths(r.train_records);
    log["val_images"] = paths(r.val_records);
    const auto log_path = run_dir / (tag + "_log.json");
    std::ofstream out(log_path);
    if (!out) throw Error(ErrorKind::Io, "cannot write '" + log_path.string() + "'");
    out << log.dump(2) << "\n";
    written.push_back(log_path);
  }
  return written;
}

Ensemble make_ensemble(std::vector<Checkpoint<float>> members) {
  if (members.empty()) throw Error(ErrorKind::InvalidArgument, "ensemble needs at least one checkpoint");
  std::stable_sort(members.begin(), members.end(),
                   [](const auto& a, const auto& b) { return a.meta.fold < b.meta.fold; });
  Ensemble e;
  e.config = members.front().meta.config;
  e.task = members.front().meta.task;
  for (const auto& ck : members) {
    if (!(ck.meta.config == e.config))
      throw Error(ErrorKind::ConfigMismatch, "ensemble members have different model configs");
    if (ck.meta.task != e.task) throw Error(ErrorKind::ConfigMismatch, "ensemble members were trained on different tasks");
  }
  e.members = std::move(members);
  return e;
}

Ensemble load_ensemble(const std::filesystem::path& run_dir) {
  if (!std::filesystem::is_directory(run_dir))
    throw Error(ErrorKind::Io, "run directory '" + run_dir.string() + "' does not exist");
  static const std::regex pattern(R"(model_fold\d+\.ckpt)");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(run_dir))
    if (entry.is_regular_file() && std::regex_match(entry.path().filename().string(), pattern))
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error(ErrorKind::Io, "no model_fold*.ckpt files in '" + run_dir.string() + "'");
  std::vector<Checkpoint<float>> members;
  for (const auto& f : files) members.push_back(load_checkpoint<float>(f));
  return make_ensemble(std::move(members));
}

Matrix<double> model_logits(const ModelParams<float>& params, const ViTConfig& cfg, std::span<const FloatImage> images) {
  NoGradGuard no_grad;
  Matrix<double> out(static_cast<Index>(images.size()), cfg.n_classes);
  for (std::size_t start = 0; start < images.size(); start += kInferenceBatch) {
    const std::size_t n = std::min<std::size_t>(kInferenceBatch, images.size() - start);
    const Tensor<float> logits = forward(params, cfg, patch_batch<float>(images.subspan(start, n), cfg)).logits;
    out.middleRows(static_cast<Index>(start), static_cast<Index>(n)) = logits.value().cast<double>();
  }
  return out;
}

std::vector<Prediction> ensemble_predict(const Ensemble& ensemble, std::span<const FloatImage> images) {
  if (ensemble.config.n_classes != 2)
    throw Error(ErrorKind::InvalidArgument, "ensemble_predict supports binary models only");
  Matrix<double> sum = Matrix<double>::Zero(static_cast<Index>(images.size()), 2);
  for (const auto& member : ensemble.members) sum += model_logits(member.params, ensemble.config, images);
  const double k = static_cast<double>(ensemble.members.size());

  std::vector<Prediction> out(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    Prediction& p = out[i];
    p.mean_logits = {sum(static_cast<Index>(i), 0) / k, sum(static_cast<Index>(i), 1) / k};
    const double mx = std::max(p.mean_logits[0], p.mean_logits[1]);
    const double e0 = std::exp(p.mean_logits[0] - mx), e1 = std::exp(p.mean_logits[1] - mx);
    p.probabilities = {e0 / (e0 + e1), e1 / (e0 + e1)};
    p.label = p.mean_logits[1] > p.mean_logits[0] ? 1 : 0;
  }
  return out;
}

}  // namespace fpvit
