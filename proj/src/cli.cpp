#include "mulvit/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mulvit/analysis.hpp"
#include "mulvit/checkpoint.hpp"
#include "mulvit/dataset.hpp"
#include "mulvit/metrics.hpp"
#include "mulvit/rssi.hpp"
#include "mulvit/scene.hpp"
#include "mulvit/trainer.hpp"

namespace mulvit::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

/// Relative dataset locations resolve against $MULVIT_DATA_ROOT when set.
std::string resolve_data_path(const std::string& p) {
  if (p.empty() || fs::path(p).is_absolute()) return p;
  if (const char* root = std::getenv("MULVIT_DATA_ROOT"); root != nullptr && *root != '\0')
    return (fs::path(root) / p).string();
  return p;
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string display_name(Variant v) {
  std::string n = variant_name(v);
  for (char& c : n)
    if (c == '_') c = '-';
  return n;
}

struct GenArgs {
  std::string scene_file;
  int64_t frames = 0;
  std::string out_dir;
  int64_t width = 64, height = 48;
  double fps = 20.0;
};

int cmd_gen(const GenArgs& a, uint64_t seed, bool seed_given, std::ostream& out) {
  SceneSpec scene = a.scene_file.empty() ? default_scene() : load_scene(a.scene_file);
  if (seed_given) scene.seed = seed;

  scene::DatasetOptions opts;
  opts.width = a.width;
  opts.height = a.height;
  opts.fps = a.fps;
  const std::string out_dir = resolve_data_path(a.out_dir);
  const auto summary = scene::generate_dataset(scene, a.frames, out_dir, opts);

  out << "generated dataset at " << out_dir << "\n";
  out << "  frames per camera: " << summary.frames << "\n";
  out << "  cameras:           " << summary.cameras << "\n";
  out << "  paired samples:    " << summary.samples << "\n";
  out << "  dropped pairs:     " << summary.dropped_pairs << "\n";
  out << "  flagged outliers:  " << summary.flagged << "\n";
  char buf[96];
  std::snprintf(buf, sizeof(buf), "  label trend r:     %.4f\n", summary.trend_r);
  out << buf;
  out << "  blind fraction:   ";
  for (double b : summary.blind_fraction) {
    std::snprintf(buf, sizeof(buf), " %.3f", b);
    out << buf;
  }
  out << "\n  manifest:          " << summary.manifest_path << "\n";
  return 0;
}

struct PreprocessArgs {
  std::string rssi_file;
  std::string out_file;
  double rate_in = 40.0, rate_out = 20.0;
  int64_t mad_window = 40;
  double mad_threshold = 5.0;
  int64_t smooth = 4;
};

int cmd_preprocess(const PreprocessArgs& a, std::ostream& out) {
  rssi::PreprocessConfig cfg;
  cfg.rate_in_hz = a.rate_in;
  cfg.rate_out_hz = a.rate_out;
  cfg.mad_window = a.mad_window;
  cfg.mad_threshold = a.mad_threshold;
  cfg.smooth_support = a.smooth;
  cfg.validate();

  const RssiTrace raw = rssi::read_csv(a.rssi_file, cfg.rate_in_hz);
  const auto res = rssi::preprocess(raw, cfg);

  const json echo{{"command", "preprocess"},     {"rate_in_hz", cfg.rate_in_hz},
                  {"rate_out_hz", cfg.rate_out_hz}, {"mad_window", cfg.mad_window},
                  {"mad_threshold", cfg.mad_threshold}, {"mad_floor_db", cfg.mad_floor_db},
                  {"smooth_support", cfg.smooth_support}, {"input", a.rssi_file}};
  rssi::write_csv(a.out_file, res.trace, echo.dump());

  out << "conditioned " << raw.size() << " samples -> " << res.trace.size() << " at "
      << cfg.rate_out_hz << " Hz (" << a.out_file << ")\n";
  out << "  flagged outliers: " << res.flagged << "\n";
  out << "  dropped tail:     " << res.dropped_tail << "\n";
  char buf[128];
  std::snprintf(buf, sizeof(buf), "  trend r: %.4f (expected band [%.2f, %.2f])\n", res.trend_r,
                cfg.trend_band_lo, cfg.trend_band_hi);
  out << buf;
  if (!res.trend_in_band)
    out << "warning: trend correlation outside the expected band; inspect the trace\n";
  return 0;
}

struct TrainArgs {
  std::string data_dir;
  std::string model;
  std::string config_file;
  std::string out_dir;
  std::string resume_file;
};

void print_run_header(const ModelSpec& spec, const LoadedDataset& ds, const std::string& data_dir,
                      const TrainConfig& cfg, std::ostream& out) {
  out << "== training run ==\n";
  out << "model: " << display_name(spec.variant) << ", D=" << spec.encoder.embed_dim
      << ", L=" << spec.encoder.depth;
  if (spec.variant == Variant::MulVitTf) out << ", L'=" << spec.fusion_depth;
  if (spec.variant == Variant::MulVitTwdnn)
    out << ", twdnn blocks=" << spec.twdnn_blocks << " hidden=" << spec.twdnn_hidden;
  out << ", heads=" << spec.encoder.heads << ", patch=" << spec.encoder.patch_size
      << ", cameras=" << spec.cameras << ", input " << spec.encoder.image_height << "x"
      << spec.encoder.image_width << "x" << spec.encoder.channels << "\n";
  out << "data: " << data_dir << " (" << ds.samples.size() << " samples, " << ds.cameras
      << " cameras, " << ds.height << "x" << ds.width << " frames)\n";
  out << "config: " << run_config_to_json_text(spec, cfg) << "\n";
}

int cmd_train(const TrainArgs& a, uint64_t seed, bool seed_given, std::ostream& out,
              std::ostream& err) {
  ModelSpec spec;
  TrainConfig cfg;
  TrainState resume_state;
  bool resuming = false;

  if (!a.resume_file.empty()) {
    if (!a.config_file.empty()) {
      err << "error: a resumed run continues the checkpoint's embedded config; "
             "--config cannot be combined with --resume\n";
      return 1;
    }
    const Checkpoint ck = load_checkpoint(a.resume_file);
    if (!a.model.empty() && variant_from_name(a.model) != ck.spec.variant) {
      err << "error: checkpoint was trained as '" << display_name(ck.spec.variant)
          << "', not '" << a.model << "'\n";
      return 1;
    }
    spec = ck.spec;
    cfg = ck.config;
    resume_state = to_train_state(ck);
    resuming = true;
    out << "resuming from " << a.resume_file << " (phase " << ck.phase << ", "
        << ck.epoch_in_phase << " epochs into it, " << ck.steps << " steps total)\n";
  } else {
    if (a.model.empty()) {
      err << "error: --model is required (unless resuming)\n";
      return 1;
    }
    spec = preset(a.model);
    if (!a.config_file.empty())
      run_config_from_json_text(read_text_file(a.config_file), spec, cfg);
  }
  if (seed_given) cfg.seed = seed;

  // Every config problem is reported before any work starts.
  std::vector<std::string> errors = cfg.validation_errors();
  try {
    spec.validate();
  } catch (const SpecError& e) {
    errors.push_back(e.what());
  }
  if (!errors.empty()) {
    for (const auto& e : errors) err << "config error: " << e << "\n";
    return 1;
  }

  const std::string data_dir = resolve_data_path(a.data_dir);
  LoadedDataset ds = load_dataset(data_dir);
  print_run_header(spec, ds, data_dir, cfg, out);

  const int64_t total_epochs = cfg.phase1_epochs + cfg.phase2_epochs;
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& r) {
    char line[160];
    std::snprintf(line, sizeof(line), "epoch %lld/%lld  phase %d  lr %.3e  train_mse %.6f",
                  static_cast<long long>(r.epoch), static_cast<long long>(total_epochs), r.phase,
                  r.lr, r.train_loss);
    out << line;
    if (std::isfinite(r.val_loss)) {
      std::snprintf(line, sizeof(line), "  val_mse %.6f", r.val_loss);
      out << line;
    }
    out << "\n";
  };

  const auto res = train(spec, ds, cfg, hooks, resuming ? &resume_state : nullptr);

  fs::create_directories(a.out_dir);
  const std::string echo = run_config_to_json_text(spec, cfg);
  const fs::path history_path = fs::path(a.out_dir) / "history.csv";
  if (resuming && fs::exists(history_path))
    append_history_csv(history_path.string(), res.history);
  else
    write_history_csv(history_path.string(), res.history, echo);
  out << "history: " << history_path.string() << "\n";

  if (!res.aborted) {
    const fs::path last_path = fs::path(a.out_dir) / "last.ckpt";
    save_checkpoint(last_path.string(),
                    make_checkpoint(spec, cfg, res.state, res.normalizer, true));
    out << "checkpoint (resumable): " << last_path.string() << "\n";
  }

  const fs::path best_path = fs::path(a.out_dir) / "best.ckpt";
  if (res.best_updated || (!res.aborted && !fs::exists(best_path))) {
    TrainState best;  // a deployable snapshot, not a resume point: no moments
    best.params = res.params;
    best.phase = res.state.phase;
    best.epoch_in_phase = res.state.epoch_in_phase;
    best.best_val_rmse_db = res.best_val_rmse_db;
    best.best_epoch = res.best_epoch;
    best.epochs_completed = res.state.epochs_completed;
    best.steps = res.steps;
    save_checkpoint(best_path.string(),
                    make_checkpoint(spec, cfg, best, res.normalizer, false));
    out << "checkpoint (best): " << best_path.string() << "\n";
  } else if (!res.aborted) {
    out << "checkpoint (best): kept existing " << best_path.string()
        << " (no better validation epoch this run)\n";
  }

  if (res.aborted) {
    err << "error: training aborted: " << res.abort_reason << "\n";
    err << "the aborted state is not resumable; the last validated best (if any) was kept\n";
    return 1;
  }

  if (std::isfinite(res.best_val_rmse_db)) {
    char line[96];
    std::snprintf(line, sizeof(line), "best val RMSE %.4f dB at epoch %lld\n",
                  res.best_val_rmse_db, static_cast<long long>(res.best_epoch));
    out << line;
  }
  if (res.early_stopped) out << "stopped early: train RMSE target reached\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt_file;
  std::string data_dir;
  std::string split = "test";
  std::string report_file;
  std::string cdf_file;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.ckpt_file);
  const std::string data_dir = resolve_data_path(a.data_dir);
  LoadedDataset ds = load_dataset(data_dir);

  const auto& enc = ck.spec.encoder;
  if (ds.channels != enc.channels || ds.height != enc.image_height ||
      ds.width != enc.image_width) {
    std::ostringstream msg;
    msg << "checkpoint/dataset mismatch: the model expects " << enc.image_height << "x"
        << enc.image_width << "x" << enc.channels << " frames, the dataset provides " << ds.height
        << "x" << ds.width << "x" << ds.channels;
    throw DataError(msg.str());
  }
  if (ck.spec.cameras > 1 && ds.cameras != ck.spec.cameras)
    throw DataError("checkpoint/dataset mismatch: the model fuses " +
                    std::to_string(ck.spec.cameras) + " cameras, the dataset has " +
                    std::to_string(ds.cameras));
  if (ck.spec.cameras == 1 && ck.config.camera_index >= ds.cameras)
    throw DataError("checkpoint/dataset mismatch: camera index " +
                    std::to_string(ck.config.camera_index) + " outside the dataset's " +
                    std::to_string(ds.cameras) + " cameras");

  // Reconstruct the training split deterministically from the embedded
  // config when the manifest carries no tags.
  const bool tagged = std::any_of(ds.samples.begin(), ds.samples.end(),
                                  [](const LoadedSample& s) { return !s.split.empty(); });
  if (!tagged && a.split != "all") {
    split_dataset(ds, ck.config);
    out << "note: split tags reconstructed from the embedded training config\n";
  }

  const auto res =
      evaluate(ck.spec, ck.params, ds, a.split, ck.normalizer, ck.config.camera_index);

  const json echo{{"command", "eval"},
                  {"checkpoint", a.ckpt_file},
                  {"data", data_dir},
                  {"split", a.split},
                  {"config", json::parse(run_config_to_json_text(ck.spec, ck.config))}};

  out << "eval on split '" << a.split << "' (" << res.report.n << " samples)\n";
  out << metrics::format(res.report);

  if (!a.report_file.empty()) {
    std::ofstream rf(a.report_file);
    if (!rf) throw IoError("cannot open '" + a.report_file + "' for writing");
    rf << "# config: " << echo.dump() << "\n" << metrics::format(res.report);
    out << "report: " << a.report_file << "\n";
  }
  if (!a.cdf_file.empty()) {
    metrics::write_cdf_csv(a.cdf_file, res.report.cdf, echo.dump());
    out << "cdf: " << a.cdf_file << "\n";
  }
  return 0;
}

int cmd_analyze(const std::string& model, std::ostream& out) {
  const CostReport rep = analyze(preset(model));
  out << format_report(rep);
  char line[96];
  std::snprintf(line, sizeof(line), "table cells: %.2f G / %.2f M\n", rep.flops_giga(),
                rep.params_millions());
  out << line;
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"multi-view RSSI estimation toolkit"};
  app.require_subcommand(1);

  uint64_t seed = 1;
  int64_t threads = 1;
  app.add_option("--seed", seed, "global RNG seed (overrides config/scene seeds when given)");
  app.add_option("--threads", threads,
                 "worker thread count (accepted for interface stability; execution is "
                 "single-threaded by design)")
      ->check(CLI::PositiveNumber);
  app.fallthrough();  // global flags may appear after the subcommand name

  GenArgs g;
  auto* gen = app.add_subcommand("gen", "generate a synthetic multi-camera dataset");
  gen->add_option("--scene", g.scene_file, "scene description JSON (default: built-in scene)")
      ->check(CLI::ExistingFile);
  gen->add_option("--frames", g.frames, "frames per camera")->required()->check(CLI::PositiveNumber);
  gen->add_option("--out", g.out_dir, "output dataset directory")->required();
  gen->add_option("--frame-width", g.width, "rendered frame width (default 64)");
  gen->add_option("--frame-height", g.height, "rendered frame height (default 48)");
  gen->add_option("--fps", g.fps, "camera frame rate (default 20)");

  PreprocessArgs p;
  auto* pre = app.add_subcommand("preprocess", "condition a raw RSSI CSV trace");
  pre->add_option("--rssi", p.rssi_file, "input CSV (timestamp_us,rssi_dbm)")->required();
  pre->add_option("--out", p.out_file, "output CSV for the conditioned trace")->required();
  pre->add_option("--rate-in", p.rate_in, "input sample rate in Hz (default 40)");
  pre->add_option("--rate-out", p.rate_out, "output sample rate in Hz (default 20)");
  pre->add_option("--mad-window", p.mad_window, "outlier rejection window (default 40)");
  pre->add_option("--mad-threshold", p.mad_threshold, "outlier rejection threshold (default 5)");
  pre->add_option("--smooth", p.smooth, "Gaussian smoothing support (default 4)");

  TrainArgs t;
  auto* tr = app.add_subcommand("train", "two-phase fine-tuning run");
  tr->add_option("--data", t.data_dir, "dataset directory (manifest.json inside)")->required();
  tr->add_option("--model", t.model,
                 "model preset: sinvit-d | sinvit-w | mulvit-tf | mulvit-twdnn");
  tr->add_option("--config", t.config_file, "JSON with model/train overrides")
      ->check(CLI::ExistingFile);
  tr->add_option("--out", t.out_dir, "run directory for checkpoints and history")->required();
  tr->add_option("--resume", t.resume_file, "continue a run from its resumable checkpoint")
      ->check(CLI::ExistingFile);

  EvalArgs e;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  ev->add_option("--ckpt", e.ckpt_file, "checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", e.data_dir, "dataset directory")->required();
  ev->add_option("--split", e.split, "train | val | test | all (default test)");
  ev->add_option("--report", e.report_file, "write the metrics report here");
  ev->add_option("--cdf", e.cdf_file, "write the error CDF CSV here");

  std::string analyze_model;
  auto* an = app.add_subcommand("analyze", "parameter and FLOP accounting for a preset");
  an->add_option("--model", analyze_model,
                 "model preset: sinvit-d | sinvit-w | mulvit-tf | mulvit-twdnn")
      ->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& ex) {
    // CLI11 renders --help and usage errors itself; its exit code is 0 for
    // help and nonzero for genuine parse failures.
    return app.exit(ex, out, err);
  }

  try {
    if (gen->parsed()) return cmd_gen(g, seed, app.count("--seed") > 0, out);
    if (pre->parsed()) return cmd_preprocess(p, out);
    if (tr->parsed()) return cmd_train(t, seed, app.count("--seed") > 0, out, err);
    if (ev->parsed()) return cmd_eval(e, out);
    if (an->parsed()) return cmd_analyze(analyze_model, out);
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return 1;
  }
  err << "error: no command\n";  // unreachable with require_subcommand(1)
  return 1;
}

}  // namespace mulvit::cli
