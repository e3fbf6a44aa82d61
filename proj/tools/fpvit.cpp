// fpvit: command-line front end for the fingerprint ViT pipeline.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "fpvit/explain.hpp"
#include "fpvit/imgio.hpp"
#include "fpvit/parallel.hpp"
#include "fpvit/pipeline.hpp"
#include "fpvit/quality.hpp"

namespace fs = std::filesystem;
using namespace fpvit;

namespace {

struct Globals {
  std::string config;
  std::uint64_t seed = 1;
  int threads = default_threads();
  bool verbose = false;
  CLI::Option* seed_opt = nullptr;
};

// CLI value when given, else the config-file value (which itself defaults
// to the published settings).
template <typename T>
T pick(const CLI::Option* opt, const T& cli, const T& from_config) {
  return opt && opt->count() > 0 ? cli : from_config;
}

void say(const Globals& g, const std::string& msg) {
  if (g.verbose) std::cerr << msg << "\n";
}

std::string task_help() { return "control-ks, control-wss or ks-wss"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fingerprint-based syndrome classification with a small Vision Transformer"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  Globals g;
  app.add_option("--config", g.config, "JSON config file (flat keys; unknown keys are rejected)");
  g.seed_opt = app.add_option("--seed", g.seed, "Top-level random seed")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads (results do not depend on this)")->capture_default_str();
  app.add_flag("--verbose", g.verbose, "Progress messages on stderr");

  const PipelineConfig defaults;
  PipelineConfig cfg;  // filled after parsing

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort with a manifest");
  std::string synth_out;
  int controls = defaults.synth_controls, ks = defaults.synth_ks, wss = defaults.synth_wss;
  SynthSpec spec = defaults.synth;
  synth->add_option("--out", synth_out, "Output directory")->required();
  auto* o_controls = synth->add_option("--controls", controls, "Control participants")->capture_default_str();
  auto* o_ks = synth->add_option("--ks", ks, "KS participants")->capture_default_str();
  auto* o_wss = synth->add_option("--wss", wss, "WSS participants")->capture_default_str();
  auto* o_fd = synth->add_option("--freq-delta", spec.freq_delta, "Class ridge-frequency offset")->capture_default_str();
  auto* o_bf = synth->add_option("--base-freq", spec.base_freq, "Control ridge frequency (cycles/px)")->capture_default_str();
  auto* o_sz = synth->add_option("--image-size", spec.image_size, "Image side in pixels")->capture_default_str();
  auto* o_ns = synth->add_option("--noise-sigma", spec.noise_sigma, "Additive noise sigma")->capture_default_str();
  auto* o_wc = synth->add_option("--whorls-control", spec.whorl_density[0], "Whorls per control print")->capture_default_str();
  auto* o_wk = synth->add_option("--whorls-ks", spec.whorl_density[1], "Whorls per KS print")->capture_default_str();
  auto* o_ww = synth->add_option("--whorls-wss", spec.whorl_density[2], "Whorls per WSS print")->capture_default_str();

  // enhance
  auto* enh = app.add_subcommand("enhance", "Gabor-enhance a PNG, a directory of PNGs or a manifest directory");
  std::string enh_in, enh_out;
  EnhanceConfig ec = defaults.enhance_config;
  bool no_invert = false;
  enh->add_option("--in", enh_in, "Input file or directory")->required();
  enh->add_option("--out", enh_out, "Output directory")->required();
  auto* o_bs = enh->add_option("--block-size", ec.block_size, "Block size in pixels")->capture_default_str();
  auto* o_sx = enh->add_option("--sigma-x", ec.sigma_x, "Gabor sigma along ridges")->capture_default_str();
  auto* o_sy = enh->add_option("--sigma-y", ec.sigma_y, "Gabor sigma across ridges")->capture_default_str();
  auto* o_ni = enh->add_flag("--no-invert", no_invert, "Do not invert inputs before enhancement");

  // quality
  auto* qual = app.add_subcommand("quality", "Quality-gate a manifest");
  std::string q_manifest, q_out, q_retained;
  int threshold = defaults.quality_threshold;
  qual->add_option("--manifest", q_manifest, "Manifest CSV")->required();
  auto* o_thr = qual->add_option("--threshold", threshold, "Reject scores below this (0-100)")->capture_default_str();
  qual->add_option("--out", q_out, "Rejection log CSV")->required();
  qual->add_option("--retained", q_retained, "Write the retained records as a manifest here");

  // split
  auto* split = app.add_subcommand("split", "Participant-level train/test split with folds");
  std::string s_manifest, s_out, s_task = std::string(to_string(defaults.task));
  double test_fraction = defaults.test_fraction;
  int folds = defaults.folds;
  split->add_option("--manifest", s_manifest, "Manifest CSV")->required();
  auto* o_stask = split->add_option("--task", s_task, task_help())->capture_default_str();
  auto* o_tf = split->add_option("--test-fraction", test_fraction, "Test share per class")->capture_default_str();
  auto* o_folds = split->add_option("--folds", folds, "Cross-validation folds")->capture_default_str();
  split->add_option("--out", s_out, "Split plan JSON")->required();

  // train
  auto* train = app.add_subcommand("train", "Train the fold ensemble");
  std::string t_manifest, t_plan, t_out, t_task;
  int epochs = defaults.epochs, batch = defaults.batch_size, image_size = defaults.image_size,
      patch = defaults.patch_size, embed = 0, layers = defaults.n_layers, heads = defaults.n_heads, ffn = 0;
  double lr = defaults.lr;
  bool no_weights = false;
  train->add_option("--manifest", t_manifest, "Manifest CSV")->required();
  train->add_option("--plan", t_plan, "Split plan JSON")->required();
  train->add_option("--task", t_task, task_help() + " (default: the plan's task)");
  train->add_option("--out", t_out, "Run directory")->required();
  auto* o_ep = train->add_option("--epochs", epochs, "Training epochs")->capture_default_str();
  auto* o_lr = train->add_option("--lr", lr, "Adam learning rate")->capture_default_str();
  auto* o_bsz = train->add_option("--batch-size", batch, "Mini-batch size")->capture_default_str();
  auto* o_is = train->add_option("--image-size", image_size, "Model input side")->capture_default_str();
  auto* o_ps = train->add_option("--patch-size", patch, "Patch side")->capture_default_str();
  auto* o_ed = train->add_option("--embed-dim", embed, "Embedding width; 0 = task default (512, or 256 for ks-wss)")
                   ->capture_default_str();
  auto* o_nl = train->add_option("--layers", layers, "Encoder blocks")->capture_default_str();
  auto* o_nh = train->add_option("--heads", heads, "Attention heads")->capture_default_str();
  auto* o_ffn = train->add_option("--ffn-hidden", ffn, "FFN width; 0 = task default (1024, or 512 for ks-wss)")
                    ->capture_default_str();
  auto* o_nw = train->add_flag("--no-class-weights", no_weights, "Unweighted cross-entropy");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a run on the plan's test participants");
  std::string e_run, e_manifest, e_plan, e_out;
  eval->add_option("--run", e_run, "Run directory with model_fold*.ckpt")->required();
  eval->add_option("--manifest", e_manifest, "Manifest CSV")->required();
  eval->add_option("--plan", e_plan, "Split plan JSON")->required();
  eval->add_option("--out", e_out, "Output directory (default: <run>/eval)");

  // explain
  auto* expl = app.add_subcommand("explain", "Class-token attention heatmap for one image");
  std::string x_run, x_image, x_out;
  expl->add_option("--run", x_run, "Run directory with model_fold*.ckpt")->required();
  expl->add_option("--image", x_image, "Grayscale PNG as fed to the model")->required();
  expl->add_option("--out", x_out, "Overlay PNG (a .json grid is written next to it)")->required();

  // pipeline
  auto* pipe = app.add_subcommand("pipeline", "Run every stage from one config and write a run manifest");
  std::string p_work, p_manifest;
  pipe->add_option("--work-dir", p_work, "Output directory (overrides work_dir)");
  pipe->add_option("--manifest", p_manifest, "Input manifest (overrides manifest; default: synthesize)");
  bool print_keys = false;
  pipe->add_flag("--list-keys", print_keys, "Print the accepted config keys with their defaults and exit");

  CLI11_PARSE(app, argc, argv);

  std::string current_stage = app.get_subcommands().front()->get_name();
  try {
    if (!g.config.empty()) cfg = load_config(g.config);
    const std::uint64_t seed = pick(g.seed_opt, g.seed, cfg.seed);
    const Logger log = [&](const std::string& m) { say(g, m); };

    if (synth->parsed()) {
      SynthSpec s = cfg.synth;
      s.freq_delta = pick(o_fd, spec.freq_delta, s.freq_delta);
      s.base_freq = pick(o_bf, spec.base_freq, s.base_freq);
      s.image_size = pick(o_sz, spec.image_size, s.image_size);
      s.noise_sigma = pick(o_ns, spec.noise_sigma, s.noise_sigma);
      s.whorl_density = {pick(o_wc, spec.whorl_density[0], s.whorl_density[0]),
                         pick(o_wk, spec.whorl_density[1], s.whorl_density[1]),
                         pick(o_ww, spec.whorl_density[2], s.whorl_density[2])};
      s.seed = seed;
      const Manifest m = generate_cohort(s,
                                         {{Label::Control, pick(o_controls, controls, cfg.synth_controls)},
                                          {Label::KS, pick(o_ks, ks, cfg.synth_ks)},
                                          {Label::WSS, pick(o_wss, wss, cfg.synth_wss)}},
                                         synth_out, g.threads);
      std::cout << "wrote " << m.records.size() << " images and " << (fs::path(synth_out) / "manifest.csv").string()
                << "\n";
    } else if (enh->parsed()) {
      EnhanceConfig c = cfg.enhance_config;
      c.block_size = pick(o_bs, ec.block_size, c.block_size);
      c.sigma_x = pick(o_sx, ec.sigma_x, c.sigma_x);
      c.sigma_y = pick(o_sy, ec.sigma_y, c.sigma_y);
      if (o_ni->count() > 0) c.invert_input = !no_invert;
      const auto written = enhance_path(enh_in, enh_out, c, g.threads);
      std::cout << "enhanced " << written.size() << " images into " << enh_out << "\n";
    } else if (qual->parsed()) {
      const GateResult r = gate_manifest(load_manifest(q_manifest), pick(o_thr, threshold, cfg.quality_threshold),
                                         g.threads);
      save_rejection_log(r.rejected, q_out);
      if (!q_retained.empty()) {
        const fs::path dir = fs::path(q_retained).parent_path();
        save_manifest(rebase_manifest(r.retained, dir.empty() ? fs::path(".") : dir), q_retained);
      }
      std::cout << "retained " << r.retained.records.size() << ", rejected " << r.quality_rejections
                << " for quality and " << r.io_rejections << " unreadable\n";
    } else if (split->parsed()) {
      const Task task = o_stask->count() ? parse_task(s_task) : cfg.task;
      const SplitPlan plan = make_split(load_manifest(s_manifest), task, pick(o_tf, test_fraction, cfg.test_fraction),
                                        pick(o_folds, folds, cfg.folds), seed);
      save_split_plan(plan, s_out);
      std::cout << "train participants " << plan.train_participants.size() << ", test participants "
                << plan.test_participants.size() << ", folds " << plan.folds.size() << "\n";
    } else if (train->parsed()) {
      const Manifest m = load_manifest(t_manifest);
      const SplitPlan plan = load_split_plan(t_plan);
      PipelineConfig c = cfg;
      c.task = t_task.empty() ? plan.task : parse_task(t_task);
      if (c.task != plan.task)
        throw Error(ErrorKind::ConfigMismatch, "--task " + t_task + " differs from the plan's task " +
                                                   std::string(to_string(plan.task)));
      c.epochs = pick(o_ep, epochs, c.epochs);
      c.lr = pick(o_lr, lr, c.lr);
      c.batch_size = pick(o_bsz, batch, c.batch_size);
      c.image_size = pick(o_is, image_size, c.image_size);
      c.patch_size = pick(o_ps, patch, c.patch_size);
      c.embed_dim = pick(o_ed, embed, c.embed_dim);
      c.n_layers = pick(o_nl, layers, c.n_layers);
      c.n_heads = pick(o_nh, heads, c.n_heads);
      c.ffn_hidden = pick(o_ffn, ffn, c.ffn_hidden);
      if (o_nw->count() > 0) c.class_weights = !no_weights;
      TrainConfig tc = c.train_config();
      tc.seed = seed;
      const ViTConfig vit = c.vit_config();
      vit.validate();
      const auto results = train_ensemble(m, plan, vit, tc, g.threads, [&](int fold, const EpochLog& e) {
        say(g, "fold " + std::to_string(fold) + " epoch " + std::to_string(e.epoch) + " train_loss " +
                   std::to_string(e.train_loss) + " val_loss " + std::to_string(e.val_loss) + " val_acc " +
                   std::to_string(e.val_accuracy));
      });
      save_run(t_out, results, m);
      std::cout << "wrote " << results.size() << " checkpoints to " << t_out << "\n";
    } else if (eval->parsed()) {
      const fs::path out = e_out.empty() ? fs::path(e_run) / "eval" : fs::path(e_out);
      const EvalOutputs r = evaluate_run(load_ensemble(e_run), load_manifest(e_manifest), load_split_plan(e_plan),
                                         out, g.threads);
      std::cout << to_json(r.report).dump(2) << "\n";
    } else if (expl->parsed()) {
      const Ensemble ens = load_ensemble(x_run);
      const GrayImage img = load_png(x_image);
      Heatmap h = ensemble_heatmap(ens, img);
      h.image = x_image;
      const fs::path sidecar = save_heatmap(x_out, img, h);
      std::cout << "wrote " << x_out << " and " << sidecar.string() << (h.degenerate ? " (degenerate)" : "")
                << "\n";
    } else if (pipe->parsed()) {
      if (print_keys) {
        std::cout << to_json(PipelineConfig{}).dump(2) << "\n";
        return 0;
      }
      PipelineConfig c = cfg;
      c.seed = seed;
      if (!p_work.empty()) c.work_dir = p_work;
      if (!p_manifest.empty()) c.manifest = p_manifest;
      const auto manifest = run_pipeline(c, g.threads, log);
      std::cout << "pipeline finished; " << manifest["artifacts"].size() << " artifacts listed in "
                << (c.work_dir / "run_manifest.json").string() << "\n";
    }
  } catch (const StageError& e) {
    std::cerr << "fpvit: error [stage=" << e.stage() << " kind=" << to_string(e.kind()) << "] " << e.what() << "\n";
    return 1;
  } catch (const Error& e) {
    std::cerr << "fpvit: error [stage=" << current_stage << " kind=" << to_string(e.kind()) << "] " << e.what()
              << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "fpvit: error [stage=" << current_stage << "] " << e.what() << "\n";
    return 1;
  }
  return 0;
}
