#include "fpvit/pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <set>

#include "fpvit/explain.hpp"
#include "fpvit/imgio.hpp"
#include "fpvit/parallel.hpp"
#include "fpvit/quality.hpp"
#include "fpvit/rng.hpp"

namespace fs = std::filesystem;

namespace fpvit {

// ---------------------------------------------------------------------------
// Config

ViTConfig PipelineConfig::vit_config() const {
  ViTConfig v = ViTConfig::for_task(task);
  v.image_size = image_size;
  v.patch_size = patch_size;
  if (embed_dim > 0) v.embed_dim = embed_dim;
  if (ffn_hidden > 0) v.ffn_hidden = ffn_hidden;
  v.n_layers = n_layers;
  v.n_heads = n_heads;
  return v;
}

TrainConfig PipelineConfig::train_config() const {
  TrainConfig t;
  t.epochs = epochs;
  t.lr = lr;
  t.batch_size = batch_size;
  t.seed = derive_stage_seeds(seed).train;
  t.task = task;
  t.use_class_weights = class_weights;
  return t;
}

nlohmann::json to_json(const PipelineConfig& c) {
  return {
      {"work_dir", c.work_dir.generic_string()},
      {"manifest", c.manifest.generic_string()},
      {"task", std::string(to_string(c.task))},
      {"seed", c.seed},
      {"synth_controls", c.synth_controls},
      {"synth_ks", c.synth_ks},
      {"synth_wss", c.synth_wss},
      {"synth_image_size", c.synth.image_size},
      {"synth_base_freq", c.synth.base_freq},
      {"synth_freq_delta", c.synth.freq_delta},
      {"synth_whorls_control", c.synth.whorl_density[0]},
      {"synth_whorls_ks", c.synth.whorl_density[1]},
      {"synth_whorls_wss", c.synth.whorl_density[2]},
      {"synth_noise_sigma", c.synth.noise_sigma},
      {"enhance", c.enhance},
      {"enhance_block_size", c.enhance_config.block_size},
      {"enhance_sigma_x", c.enhance_config.sigma_x},
      {"enhance_sigma_y", c.enhance_config.sigma_y},
      {"enhance_target_mean", c.enhance_config.target_mean},
      {"enhance_target_var", c.enhance_config.target_var},
      {"enhance_var_threshold", c.enhance_config.var_threshold},
      {"enhance_invert_input", c.enhance_config.invert_input},
      {"quality_threshold", c.quality_threshold},
      {"test_fraction", c.test_fraction},
      {"folds", c.folds},
      {"image_size", c.image_size},
      {"patch_size", c.patch_size},
      {"embed_dim", c.embed_dim},
      {"ffn_hidden", c.ffn_hidden},
      {"n_layers", c.n_layers},
      {"n_heads", c.n_heads},
      {"epochs", c.epochs},
      {"lr", c.lr},
      {"batch_size", c.batch_size},
      {"class_weights", c.class_weights},
      {"explain_images", c.explain_images},
  };
}

std::vector<std::string> config_keys() {
  return {"work_dir",          "manifest",          "task",
          "seed",              "synth_controls",    "synth_ks",
          "synth_wss",         "synth_image_size",  "synth_base_freq",
          "synth_freq_delta",  "synth_whorls_control", "synth_whorls_ks",
          "synth_whorls_wss",  "synth_noise_sigma", "enhance",
          "enhance_block_size", "enhance_sigma_x",  "enhance_sigma_y",
          "enhance_target_mean", "enhance_target_var", "enhance_var_threshold",
          "enhance_invert_input", "quality_threshold", "test_fraction",
          "folds",             "image_size",        "patch_size",
          "embed_dim",         "ffn_hidden",        "n_layers",
          "n_heads",           "epochs",            "lr",
          "batch_size",        "class_weights",     "explain_images"};
}

namespace {

bool same_kind(const nlohmann::json& expected, const nlohmann::json& given) {
  if (expected.is_boolean()) return given.is_boolean();
  if (expected.is_string()) return given.is_string();
  if (expected.is_number_float()) return given.is_number();
  if (expected.is_number_unsigned()) return given.is_number_unsigned();
  if (expected.is_number_integer()) return given.is_number_integer();
  return false;
}

void check(bool ok, const std::string& message) {
  if (!ok) throw Error(ErrorKind::InvalidArgument, "config: " + message);
}

}  // namespace

PipelineConfig config_from_json(const nlohmann::json& j, PipelineConfig base) {
  if (!j.is_object()) throw Error(ErrorKind::Parse, "config must be a JSON object");
  nlohmann::json merged = to_json(base);
  for (const auto& [key, value] : j.items()) {
    if (!merged.contains(key)) throw Error(ErrorKind::Parse, "unknown config key '" + key + "'");
    // Non-negative integers parse as unsigned; accept them for int fields.
    const bool int_ok = merged[key].is_number_integer() && value.is_number_integer();
    if (!int_ok && !same_kind(merged[key], value))
      throw Error(ErrorKind::Parse, "config key '" + key + "' has the wrong type (expected " +
                                        std::string(merged[key].type_name()) + ")");
    merged[key] = value;
  }

  PipelineConfig c;
  c.work_dir = merged["work_dir"].get<std::string>();
  c.manifest = merged["manifest"].get<std::string>();
  try {
    c.task = parse_task(merged["task"].get<std::string>());
  } catch (const Error& e) {
    throw Error(ErrorKind::Parse, std::string("config key 'task': ") + e.what());
  }
  c.seed = merged["seed"].get<std::uint64_t>();
  c.synth_controls = merged["synth_controls"].get<int>();
  c.synth_ks = merged["synth_ks"].get<int>();
  c.synth_wss = merged["synth_wss"].get<int>();
  c.synth.image_size = merged["synth_image_size"].get<int>();
  c.synth.base_freq = merged["synth_base_freq"].get<double>();
  c.synth.freq_delta = merged["synth_freq_delta"].get<double>();
  c.synth.whorl_density = {merged["synth_whorls_control"].get<int>(), merged["synth_whorls_ks"].get<int>(),
                           merged["synth_whorls_wss"].get<int>()};
  c.synth.noise_sigma = merged["synth_noise_sigma"].get<double>();
  c.enhance = merged["enhance"].get<bool>();
  c.enhance_config.block_size = merged["enhance_block_size"].get<int>();
  c.enhance_config.sigma_x = merged["enhance_sigma_x"].get<double>();
  c.enhance_config.sigma_y = merged["enhance_sigma_y"].get<double>();
  c.enhance_config.target_mean = merged["enhance_target_mean"].get<double>();
  c.enhance_config.target_var = merged["enhance_target_var"].get<double>();
  c.enhance_config.var_threshold = merged["enhance_var_threshold"].get<double>();
  c.enhance_config.invert_input = merged["enhance_invert_input"].get<bool>();
  c.quality_threshold = merged["quality_threshold"].get<int>();
  c.test_fraction = merged["test_fraction"].get<double>();
  c.folds = merged["folds"].get<int>();
  c.image_size = merged["image_size"].get<int>();
  c.patch_size = merged["patch_size"].get<int>();
  c.embed_dim = merged["embed_dim"].get<int>();
  c.ffn_hidden = merged["ffn_hidden"].get<int>();
  c.n_layers = merged["n_layers"].get<int>();
  c.n_heads = merged["n_heads"].get<int>();
  c.epochs = merged["epochs"].get<int>();
  c.lr = merged["lr"].get<double>();
  c.batch_size = merged["batch_size"].get<int>();
  c.class_weights = merged["class_weights"].get<bool>();
  c.explain_images = merged["explain_images"].get<int>();

  check(c.synth_controls >= 0 && c.synth_ks >= 0 && c.synth_wss >= 0, "synth counts must be >= 0");
  check(c.enhance_config.block_size >= 4, "enhance_block_size must be >= 4");
  check(c.enhance_config.sigma_x > 0 && c.enhance_config.sigma_y > 0, "enhance sigmas must be > 0");
  check(c.enhance_config.target_var > 0, "enhance_target_var must be > 0");
  check(c.quality_threshold >= 0 && c.quality_threshold <= 100, "quality_threshold must be in [0, 100]");
  check(c.test_fraction > 0 && c.test_fraction < 1, "test_fraction must be in (0, 1)");
  check(c.folds >= 2, "folds must be >= 2");
  check(c.epochs >= 1, "epochs must be >= 1");
  check(c.batch_size >= 1, "batch_size must be >= 1");
  check(c.lr >= 0, "lr must be >= 0");
  check(c.embed_dim >= 0 && c.ffn_hidden >= 0, "embed_dim and ffn_hidden must be >= 0 (0 = task default)");
  check(c.explain_images >= 0, "explain_images must be >= 0");
  c.vit_config().validate();
  validate(c.synth);
  return c;
}

PipelineConfig load_config(const fs::path& path, PipelineConfig base) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Parse, "config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j, std::move(base));
}

StageSeeds derive_stage_seeds(std::uint64_t seed) {
  return {derive_seed(seed, "synth"), derive_seed(seed, "split"), derive_seed(seed, "train")};
}

// ---------------------------------------------------------------------------
// Stages

GrayImage enhance_for_pipeline(const GrayImage& raw, const EnhanceConfig& cfg, bool* degenerate) {
  const GrayImage input = cfg.invert_input ? invert(raw) : raw;
  try {
    EnhanceResult r = enhance_fingerprint_detailed(input, cfg);
    if (degenerate) *degenerate = r.degenerate;
    return std::move(r.image);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::NoRidgeStructure) throw;
    if (degenerate) *degenerate = true;
    return GrayImage::Constant(raw.rows(), raw.cols(), 128);
  }
}

namespace {

fs::path mirrored(const fs::path& p) { return p.is_absolute() ? p.filename() : p.lexically_normal(); }

}  // namespace

Manifest enhance_manifest(const Manifest& m, const fs::path& out_dir, const EnhanceConfig& cfg, int threads) {
  Manifest out;
  out.base_dir = out_dir;
  out.records = m.records;
  std::set<fs::path> seen;
  for (Record& r : out.records) {
    r.path = mirrored(r.path);
    if (!seen.insert(r.path).second)
      throw Error(ErrorKind::InvalidArgument, "enhance: two records map to output '" + r.path.string() + "'");
    r.quality.reset();
  }
  parallel_for(m.records.size(), threads, [&](std::size_t i) {
    const GrayImage raw = load_png(m.resolve(m.records[i]));
    write_png(out_dir / out.records[i].path, enhance_for_pipeline(raw, cfg));
  });
  save_manifest(out, out_dir / "manifest.csv");
  return out;
}

std::vector<fs::path> enhance_path(const fs::path& in, const fs::path& out_dir, const EnhanceConfig& cfg,
                                   int threads) {
  if (fs::is_regular_file(in)) {
    const fs::path out = out_dir / in.filename();
    write_png(out, enhance_for_pipeline(load_png(in), cfg));
    return {out};
  }
  if (!fs::is_directory(in)) throw Error(ErrorKind::Io, "enhance: '" + in.string() + "' does not exist");
  if (fs::is_regular_file(in / "manifest.csv")) {
    const Manifest m = enhance_manifest(load_manifest(in / "manifest.csv"), out_dir, cfg, threads);
    std::vector<fs::path> written;
    for (const Record& r : m.records) written.push_back(m.resolve(r));
    return written;
  }
  std::vector<fs::path> inputs;
  for (const auto& e : fs::directory_iterator(in))
    if (e.is_regular_file() && e.path().extension() == ".png") inputs.push_back(e.path());
  std::sort(inputs.begin(), inputs.end());
  std::vector<fs::path> written(inputs.size());
  parallel_for(inputs.size(), threads, [&](std::size_t i) {
    written[i] = out_dir / inputs[i].filename();
    write_png(written[i], enhance_for_pipeline(load_png(inputs[i]), cfg));
  });
  return written;
}

EvalOutputs evaluate_run(const Ensemble& ensemble, const Manifest& m, const SplitPlan& plan, const fs::path& out_dir,
                         int threads) {
  if (plan.task != ensemble.task)
    throw Error(ErrorKind::ConfigMismatch, "eval: plan task " + std::string(to_string(plan.task)) +
                                               " differs from model task " + std::string(to_string(ensemble.task)));
  EvalOutputs out;
  out.test_records = expand_split(plan, m).test;
  if (out.test_records.empty()) throw Error(ErrorKind::InvalidArgument, "eval: the plan has no test images");
  const ImageSet test = load_image_set(m, out.test_records, plan.task, ensemble.config.image_size, threads);
  out.predictions = ensemble_predict(ensemble, test.images);

  std::vector<double> scores;
  for (const Prediction& p : out.predictions) scores.push_back(p.probabilities[1]);
  out.report = compute_metrics(scores, test.targets);
  if (out.report.auc_defined) out.roc = roc_auc(scores, test.targets);

  fs::create_directories(out_dir);
  nlohmann::json report = to_json(out.report);
  report["task"] = to_string(plan.task);
  report["n_models"] = ensemble.members.size();
  std::ofstream(out_dir / "report.json") << report.dump(2) << "\n";
  if (out.report.auc_defined) {
    write_roc_csv(out.roc, out_dir / "roc.csv");
    std::ofstream(out_dir / "roc.svg") << roc_svg(out.roc, std::string(to_string(plan.task)));
  }

  std::ofstream pred(out_dir / "predictions.csv");
  if (!pred) throw Error(ErrorKind::Io, "cannot write '" + (out_dir / "predictions.csv").string() + "'");
  pred << "path,participant_id,label,target,logit0,logit1,probability,predicted\n";
  char buf[160];
  for (std::size_t i = 0; i < out.predictions.size(); ++i) {
    const Record& r = m.records[out.test_records[i]];
    const Prediction& p = out.predictions[i];
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%d", test.targets[i], p.mean_logits[0], p.mean_logits[1],
                  p.probabilities[1], p.label);
    pred << r.path.generic_string() << ',' << r.participant_id << ',' << to_string(r.label) << ',' << buf << "\n";
  }
  return out;
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "' for hashing");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::array<char, 1 << 16> buf;
  while (in) {
    in.read(buf.data(), buf.size());
    EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 15]);
  }
  return out;
}

namespace {

template <typename F>
auto stage(const std::string& name, const Logger& log, F&& body) {
  if (log) log("[" + name + "] start");
  try {
    return body();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(name, e);
  } catch (const std::exception& e) {
    throw StageError(name, Error(ErrorKind::Invariant, e.what()));
  }
}

}  // namespace

Manifest rebase_manifest(const Manifest& m, const fs::path& dir) {
  Manifest out = m;
  out.base_dir = dir;
  const fs::path dir_abs = fs::absolute(dir).lexically_normal();
  for (Record& r : out.records) {
    const fs::path abs = fs::absolute(m.resolve(r)).lexically_normal();
    r.path = abs.lexically_relative(dir_abs);
    if (r.path.empty()) r.path = abs;
  }
  return out;
}

nlohmann::json run_pipeline(const PipelineConfig& cfg, int threads, const Logger& log) {
  const fs::path work = cfg.work_dir;
  fs::create_directories(work);
  const StageSeeds seeds = derive_stage_seeds(cfg.seed);
  const ViTConfig vit = cfg.vit_config();
  {
    std::ofstream out(work / "config.json");
    out << to_json(cfg).dump(2) << "\n";
  }

  nlohmann::json inputs = nlohmann::json::array();
  Manifest m = stage("synth", log, [&] {
    if (!cfg.manifest.empty()) {
      inputs.push_back({{"path", cfg.manifest.generic_string()}, {"sha256", sha256_file(cfg.manifest)}});
      return load_manifest(cfg.manifest);
    }
    SynthSpec spec = cfg.synth;
    spec.seed = seeds.synth;
    return generate_cohort(spec, {{Label::Control, cfg.synth_controls}, {Label::KS, cfg.synth_ks},
                                  {Label::WSS, cfg.synth_wss}},
                           work / "raw", threads);
  });

  if (cfg.enhance)
    m = stage("enhance", log, [&] { return enhance_manifest(m, work / "enhanced", cfg.enhance_config, threads); });

  m = stage("quality", log, [&] {
    GateResult g = gate_manifest(m, cfg.quality_threshold, threads);
    const fs::path dir = work / "quality";
    save_rejection_log(g.rejected, dir / "rejections.csv");
    Manifest kept = rebase_manifest(g.retained, dir);
    save_manifest(kept, dir / "manifest.csv");
    if (log)
      log("[quality] kept " + std::to_string(kept.records.size()) + ", rejected " +
          std::to_string(g.quality_rejections) + " low-quality and " + std::to_string(g.io_rejections) +
          " unreadable");
    return kept;
  });

  const SplitPlan plan = stage("split", log, [&] {
    SplitPlan p = make_split(m, cfg.task, cfg.test_fraction, cfg.folds, seeds.split);
    save_split_plan(p, work / "split" / "plan.json");
    return p;
  });

  stage("train", log, [&] {
    const auto results = train_ensemble(m, plan, vit, cfg.train_config(), threads, [&](int fold, const EpochLog& e) {
      if (log)
        log("[train] fold " + std::to_string(fold) + " epoch " + std::to_string(e.epoch) +
            " train_loss " + std::to_string(e.train_loss) + " val_loss " + std::to_string(e.val_loss) +
            " val_acc " + std::to_string(e.val_accuracy));
    });
    save_run(work / "models", results, m);
    return 0;
  });

  const Ensemble ensemble = stage("eval", {}, [&] { return load_ensemble(work / "models"); });
  const EvalOutputs eval = stage("eval", log, [&] {
    EvalOutputs e = evaluate_run(ensemble, m, plan, work / "eval", threads);
    if (log)
      log("[eval] " + std::to_string(e.report.n_images) + " test images, accuracy " +
          std::to_string(e.report.accuracy) + ", auc " + std::to_string(e.report.auc));
    return e;
  });

  stage("explain", log, [&] {
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(cfg.explain_images), eval.test_records.size());
    parallel_for(n, threads, [&](std::size_t i) {
      const Record& r = m.records[eval.test_records[i]];
      const GrayImage img = load_png(m.resolve(r));
      Heatmap h = ensemble_heatmap(ensemble, img);
      h.image = r.path.generic_string();
      save_heatmap(work / "explain" / (r.path.stem().string() + "_heat.png"), img, h);
    });
    return 0;
  });

  nlohmann::json manifest{{"tool_version", kToolVersion},
                          {"config", to_json(cfg)},
                          {"seeds", {{"root", cfg.seed}, {"synth", seeds.synth}, {"split", seeds.split},
                                     {"train", seeds.train}}},
                          {"inputs", inputs}};
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(work))
    if (e.is_regular_file() && e.path().filename() != "run_manifest.json") files.push_back(e.path());
  std::vector<std::pair<std::string, fs::path>> rel;
  for (const auto& f : files) rel.emplace_back(f.lexically_relative(work).generic_string(), f);
  std::sort(rel.begin(), rel.end());
  nlohmann::json artifacts = nlohmann::json::array();
  for (const auto& [name, path] : rel)
    artifacts.push_back({{"path", name}, {"sha256", sha256_file(path)}, {"bytes", fs::file_size(path)}});
  manifest["artifacts"] = artifacts;
  std::ofstream(work / "run_manifest.json") << manifest.dump(2) << "\n";
  return manifest;
}

}  // namespace fpvit
