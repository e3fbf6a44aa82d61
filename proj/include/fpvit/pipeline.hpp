#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fpvit/dataset.hpp"
#include "fpvit/enhance.hpp"
#include "fpvit/error.hpp"
#include "fpvit/metrics.hpp"
#include "fpvit/synth.hpp"
#include "fpvit/train.hpp"
#include "fpvit/vit.hpp"

namespace fpvit {

inline constexpr const char* kToolVersion = "0.1.0";

/// Every knob of a pipeline run. Defaults are the published settings.
struct PipelineConfig {
  std::filesystem::path work_dir = "fpvit_run";
  /// Input manifest; when empty a synthetic cohort is generated.
  std::filesystem::path manifest;
  Task task = Task::ControlVsKS;
  std::uint64_t seed = 1;

  int synth_controls = 40;
  int synth_ks = 25;
  int synth_wss = 12;
  SynthSpec synth;

  bool enhance = true;
  EnhanceConfig enhance_config;

  int quality_threshold = 2;
  double test_fraction = 0.2;
  int folds = 5;

  int image_size = 224;
  int patch_size = 16;
  /// 0 selects the task default (512 / 1024, or 256 / 512 for KS vs WSS).
  int embed_dim = 0;
  int ffn_hidden = 0;
  int n_layers = 3;
  int n_heads = 4;

  int epochs = 10;
  double lr = 3e-4;
  int batch_size = 32;
  bool class_weights = true;

  int explain_images = 1;

  ViTConfig vit_config() const;
  TrainConfig train_config() const;
};

/// Overlays the keys of a flat JSON object on `base`. Unknown keys and
/// wrongly typed values throw ErrorKind::Parse naming the key.
PipelineConfig config_from_json(const nlohmann::json& j, PipelineConfig base = {});
PipelineConfig load_config(const std::filesystem::path& path, PipelineConfig base = {});
nlohmann::json to_json(const PipelineConfig& cfg);
/// Key names accepted by config_from_json, in documentation order.
std::vector<std::string> config_keys();

/// Seeds of the individual stages, all derived from the top-level seed.
struct StageSeeds {
  std::uint64_t synth, split, train;
};
StageSeeds derive_stage_seeds(std::uint64_t seed);

/// An Error raised inside a named pipeline stage.
class StageError : public Error {
 public:
  StageError(std::string stage, const Error& cause)
      : Error(cause.kind(), stage + ": " + cause.what()), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

using Logger = std::function<void(const std::string&)>;

/// Enhances one raw image: optional inversion, then Gabor enhancement.
/// Images without usable ridge structure come back uniform mid-gray so the
/// quality gate rejects them.
GrayImage enhance_for_pipeline(const GrayImage& raw, const EnhanceConfig& cfg, bool* degenerate = nullptr);

/// Enhances every record of `m` into out_dir (mirroring relative paths;
/// absolute paths keep only their file name), writes out_dir/manifest.csv
/// and returns it.
Manifest enhance_manifest(const Manifest& m, const std::filesystem::path& out_dir, const EnhanceConfig& cfg,
                          int threads = 1);

/// Enhances a single PNG or every *.png in a directory (a manifest.csv in
/// the directory is carried over). Returns the written image paths.
std::vector<std::filesystem::path> enhance_path(const std::filesystem::path& in, const std::filesystem::path& out_dir,
                                                const EnhanceConfig& cfg, int threads = 1);

/// Copy of `m` whose relative record paths resolve from `dir`.
Manifest rebase_manifest(const Manifest& m, const std::filesystem::path& dir);

struct EvalOutputs {
  EvalReport report;
  RocCurve roc;
  std::vector<std::size_t> test_records;
  std::vector<Prediction> predictions;
};

/// Ensemble predictions on the plan's test participants. Writes report.json,
/// roc.csv, roc.svg and predictions.csv into out_dir.
EvalOutputs evaluate_run(const Ensemble& ensemble, const Manifest& m, const SplitPlan& plan,
                         const std::filesystem::path& out_dir, int threads = 1);

/// SHA-256 of a file as lowercase hex.
std::string sha256_file(const std::filesystem::path& path);

/// Runs synth (when no manifest is given), enhance, quality, split, train,
/// eval and explain under cfg.work_dir, then writes run_manifest.json listing
/// every artifact with its hash. Returns the manifest document.
nlohmann::json run_pipeline(const PipelineConfig& cfg, int threads = 1, const Logger& log = {});

}  // namespace fpvit
