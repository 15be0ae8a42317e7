#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mulvit/checkpoint.hpp"
#include "mulvit/cli.hpp"
#include "mulvit/common.hpp"
#include "mulvit/dataset.hpp"
#include "mulvit/models.hpp"
#include "mulvit/rng.hpp"
#include "mulvit/rssi.hpp"

using namespace mulvit;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = 0;
  std::string out, err;
};

CliResult run_cli(const std::vector<std::string>& args) {
  std::ostringstream o, e;
  CliResult r;
  r.code = cli::run(args, o, e);
  r.out = o.str();
  r.err = e.str();
  return r;
}

/// Fresh scratch directory per test case, removed on destruction.
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("mulvit_cli_" + tag)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str(const std::string& sub = "") const {
    return sub.empty() ? path.string() : (path / sub).string();
  }
};

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  REQUIRE(f.good());
  f << text;
}

/// The value following `key` in free-form command output.
double parse_after(const std::string& text, const std::string& key) {
  const auto pos = text.find(key);
  REQUIRE(pos != std::string::npos);
  return std::atof(text.c_str() + pos + key.size());
}

uint64_t hash_all_params(ModelParamsT<float>& p) {
  uint64_t h = 0xcbf29ce484222325ull;
  for_each_param(p, [&](const std::string& name, TensorT<float>& t) {
    h = fnv1a64(name.data(), name.size(), h);
    h = fnv1a64(t.values().data(), t.values().size() * sizeof(float), h);
  });
  return h;
}

/// Data rows of a history CSV: comment and header lines stripped.
std::vector<std::string> history_rows(const std::string& path) {
  std::ifstream f(path);
  REQUIRE(f.good());
  std::vector<std::string> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("epoch,", 0) == 0) continue;
    rows.push_back(line);
  }
  return rows;
}

/// Tiny two-camera model matching the generator's default 64x48 frames.
const char* kTinyModelJson =
    R"({"image_height": 48, "image_width": 64, "patch_size": 16, "embed_dim": 16,
        "depth": 1, "heads": 2, "ffn_ratio": 2, "fusion_depth": 1, "fusion_heads": 2,
        "fusion_ffn_ratio": 2, "head_hidden": 8})";

std::string tiny_config(const std::string& extra_train) {
  std::string train = R"("phase1_epochs": 1, "phase2_epochs": 2, "base_lr": 0.001,
                         "batch_size": 16, "train_fraction": 0.8, "val_fraction": 0.1,
                         "test_fraction": 0.1, "seed": 3)";
  if (!extra_train.empty()) train += ", " + extra_train;
  return std::string("{\"model\": ") + kTinyModelJson + ", \"train\": {" + train + "}}";
}

}  // namespace

TEST_CASE("analyze prints table cells for every preset") {
  auto r = run_cli({"analyze", "--model", "sinvit-d"});
  CHECK(r.code == 0);
  CHECK(r.out.find("1.26 G / 1.46 M") != std::string::npos);
  CHECK(r.out.find("total") != std::string::npos);

  CHECK(run_cli({"analyze", "--model", "sinvit-w"}).out.find("2.10 G / 2.90 M") !=
        std::string::npos);
  CHECK(run_cli({"analyze", "--model", "mulvit-tf"}).out.find("1.76 G / 1.72 M") !=
        std::string::npos);
  CHECK(run_cli({"analyze", "--model", "mulvit-twdnn"}).out.find("1.66 G / 1.87 M") !=
        std::string::npos);

  auto bad = run_cli({"analyze", "--model", "resnet"});
  CHECK(bad.code == 1);
  CHECK(bad.err.find("unknown model variant") != std::string::npos);
}

TEST_CASE("gen is seed-deterministic and its dataset round-trips") {
  TempDir tmp("gen");
  auto r1 = run_cli({"gen", "--frames", "40", "--out", tmp.str("a"), "--seed", "7"});
  REQUIRE(r1.code == 0);
  CHECK(r1.out.find("paired samples:    40") != std::string::npos);
  CHECK(r1.out.find("cameras:           2") != std::string::npos);

  auto r2 = run_cli({"gen", "--frames", "40", "--out", tmp.str("b"), "--seed", "7"});
  REQUIRE(r2.code == 0);
  CHECK(read_file(tmp.str("a/manifest.json")) == read_file(tmp.str("b/manifest.json")));
  CHECK(read_file(tmp.str("a/rssi_40hz.csv")) == read_file(tmp.str("b/rssi_40hz.csv")));

  auto r3 = run_cli({"gen", "--frames", "40", "--out", tmp.str("c"), "--seed", "8"});
  REQUIRE(r3.code == 0);
  CHECK(read_file(tmp.str("a/manifest.json")) != read_file(tmp.str("c/manifest.json")));

  // The emitted dataset loads, and its raw signal round-trips through the
  // conditioning command with a healthy trend correlation.
  auto ds = load_dataset(tmp.str("a"));
  CHECK(ds.samples.size() == 40);
  CHECK(ds.cameras == 2);
  CHECK(ds.height == 48);
  CHECK(ds.width == 64);

  auto rp = run_cli({"preprocess", "--rssi", tmp.str("a/rssi_40hz.csv"), "--out",
                     tmp.str("cond.csv")});
  REQUIRE(rp.code == 0);
  CHECK(parse_after(rp.out, "trend r: ") >= 0.85);  // short 2 s walk, modest bound
  auto cond = rssi::read_csv(tmp.str("cond.csv"), 20.0);
  CHECK(cond.size() == 40);
}

TEST_CASE("preprocess reports errors with line numbers and a smoothing sweep") {
  TempDir tmp("pre");
  write_file(tmp.str("bad.csv"), "timestamp_us,rssi_dbm\n1000,-40\nbogus-row\n2000,-41\n");
  auto bad = run_cli({"preprocess", "--rssi", tmp.str("bad.csv"), "--out", tmp.str("x.csv")});
  CHECK(bad.code == 1);
  CHECK(bad.err.find(":3:") != std::string::npos);  // file:line error style

  // A synthetic 40 Hz ramp with mild noise; heavier smoothing cannot raise
  // the trend correlation.
  std::string csv = "timestamp_us,rssi_dbm\n";
  Rng rng(11);
  for (int i = 0; i < 400; ++i) {
    char row[64];
    std::snprintf(row, sizeof(row), "%d,%.6f\n", 1000000 + i * 25000,
                  -40.0 - 0.05 * i + 0.8 * rng.normal());
    csv += row;
  }
  write_file(tmp.str("ramp.csv"), csv);

  double last_r = 1.0;
  for (const char* support : {"1", "4", "16"}) {
    auto r = run_cli({"preprocess", "--rssi", tmp.str("ramp.csv"), "--out", tmp.str("out.csv"),
                      "--smooth", support});
    REQUIRE(r.code == 0);
    const double trend = parse_after(r.out, "trend r: ");
    CHECK(trend <= last_r + 1e-12);
    last_r = trend;
  }
}

TEST_CASE("train echoes preset dimensions in the run header") {
  TempDir tmp("hdr");
  auto g = run_cli({"gen", "--frames", "12", "--out", tmp.str("ds"), "--seed", "2",
                    "--frame-width", "320", "--frame-height", "240"});
  REQUIRE(g.code == 0);

  // Zero-epoch run: the header and checkpoints appear, no training happens.
  write_file(tmp.str("cfg.json"), R"({"train": {"phase1_epochs": 0, "phase2_epochs": 0}})");
  auto t = run_cli({"train", "--data", tmp.str("ds"), "--model", "mulvit-tf", "--config",
                    tmp.str("cfg.json"), "--out", tmp.str("run")});
  REQUIRE(t.code == 0);
  CHECK(t.out.find("D=96") != std::string::npos);
  CHECK(t.out.find("L=6") != std::string::npos);
  CHECK(t.out.find("L'=2") != std::string::npos);
  CHECK(fs::exists(tmp.str("run/last.ckpt")));
  CHECK(fs::exists(tmp.str("run/history.csv")));

  auto ck = load_checkpoint(tmp.str("run/last.ckpt"));
  CHECK(ck.spec.encoder.embed_dim == 96);
  CHECK(ck.spec.encoder.depth == 6);
  CHECK(ck.spec.fusion_depth == 2);
  CHECK_FALSE(ck.has_optimizer_state());  // nothing ran, no moments
}

TEST_CASE("train validates the whole config before starting") {
  TempDir tmp("val");
  write_file(tmp.str("bad.json"),
             R"({"train": {"base_lr": -1, "dropout": 2, "split_mode": "zigzag"}})");
  auto r = run_cli({"train", "--data", tmp.str("missing"), "--model", "mulvit-tf", "--config",
                    tmp.str("bad.json"), "--out", tmp.str("run")});
  CHECK(r.code == 1);
  CHECK(r.err.find("base_lr must be positive") != std::string::npos);
  CHECK(r.err.find("dropout must lie in [0, 1)") != std::string::npos);
  CHECK(r.err.find("unknown split mode 'zigzag'") != std::string::npos);
  // All three are listed even though the dataset directory does not exist:
  // validation precedes any I/O.
  CHECK(r.err.find("eta_min") != std::string::npos);
}

TEST_CASE("train, eval, and the checkpoint files fit together") {
  TempDir tmp("flow");
  REQUIRE(run_cli({"gen", "--frames", "60", "--out", tmp.str("ds"), "--seed", "7"}).code == 0);
  write_file(tmp.str("cfg.json"), tiny_config(""));

  auto t = run_cli({"train", "--data", tmp.str("ds"), "--model", "mulvit-tf", "--config",
                    tmp.str("cfg.json"), "--out", tmp.str("run")});
  REQUIRE(t.code == 0);
  CHECK(t.out.find("best val RMSE") != std::string::npos);

  auto last = load_checkpoint(tmp.str("run/last.ckpt"));
  CHECK(last.has_optimizer_state());
  CHECK(last.epochs_completed == 3);
  auto best = load_checkpoint(tmp.str("run/best.ckpt"));
  CHECK_FALSE(best.has_optimizer_state());

  // history: config line, header, one row per epoch.
  auto rows = history_rows(tmp.str("run/history.csv"));
  CHECK(rows.size() == 3);
  const std::string head = read_file(tmp.str("run/history.csv"));
  CHECK(head.rfind("# config: ", 0) == 0);

  auto e = run_cli({"eval", "--ckpt", tmp.str("run/best.ckpt"), "--data", tmp.str("ds"),
                    "--split", "test", "--report", tmp.str("report.txt"), "--cdf",
                    tmp.str("cdf.csv")});
  REQUIRE(e.code == 0);

  // All six fields present in the report file.
  const std::string report = read_file(tmp.str("report.txt"));
  for (const char* field :
       {"samples:", "rmse_db:", "mae_db:", "pearson_r:", "r_squared:", "coverage@"})
    CHECK(report.find(field) != std::string::npos);
  CHECK(report.rfind("# config: ", 0) == 0);

  // CDF CSV: header plus rows, final cumulative fraction exactly 1.
  std::ifstream cdf(tmp.str("cdf.csv"));
  std::string line, lastrow;
  while (std::getline(cdf, line))
    if (!line.empty() && line[0] != '#' && line.rfind("abs_error", 0) != 0) lastrow = line;
  const auto comma = lastrow.rfind(',');
  REQUIRE(comma != std::string::npos);
  CHECK(std::atof(lastrow.c_str() + comma + 1) == 1.0);

  // A dataset with different geometry is rejected with an explicit message.
  REQUIRE(run_cli({"gen", "--frames", "12", "--out", tmp.str("ds32"), "--seed", "7",
                   "--frame-width", "32", "--frame-height", "24"})
              .code == 0);
  auto mism = run_cli({"eval", "--ckpt", tmp.str("run/best.ckpt"), "--data", tmp.str("ds32")});
  CHECK(mism.code == 1);
  CHECK(mism.err.find("checkpoint/dataset mismatch") != std::string::npos);
}

TEST_CASE("a resumed run reproduces the uninterrupted one bitwise") {
  TempDir tmp("resume");
  REQUIRE(run_cli({"gen", "--frames", "60", "--out", tmp.str("ds"), "--seed", "9"}).code == 0);

  // Uninterrupted reference: 1 + 2 epochs in one process.
  write_file(tmp.str("cfg_u.json"), tiny_config(""));
  auto u = run_cli({"train", "--data", tmp.str("ds"), "--model", "mulvit-tf", "--config",
                    tmp.str("cfg_u.json"), "--out", tmp.str("run_u")});
  REQUIRE(u.code == 0);

  // Interrupted chain: the stop threshold is trivially satisfied, so every
  // invocation runs exactly one epoch and checkpoints. The threshold changes
  // when training stops, never what an epoch computes.
  write_file(tmp.str("cfg_c.json"), tiny_config(R"("stop_at_train_rmse_db": 1000.0)"));
  auto c1 = run_cli({"train", "--data", tmp.str("ds"), "--model", "mulvit-tf", "--config",
                     tmp.str("cfg_c.json"), "--out", tmp.str("run_c")});
  REQUIRE(c1.code == 0);
  CHECK(c1.out.find("stopped early") != std::string::npos);
  for (int hop = 0; hop < 2; ++hop) {
    auto cn = run_cli({"train", "--data", tmp.str("ds"), "--out", tmp.str("run_c"), "--resume",
                       tmp.str("run_c/last.ckpt")});
    REQUIRE(cn.code == 0);
    CHECK(cn.out.find("resuming from") != std::string::npos);
  }

  auto ck_u = load_checkpoint(tmp.str("run_u/last.ckpt"));
  auto ck_c = load_checkpoint(tmp.str("run_c/last.ckpt"));
  CHECK(ck_c.epochs_completed == 3);
  CHECK(ck_c.steps == ck_u.steps);
  CHECK(hash_all_params(ck_c.params) == hash_all_params(ck_u.params));
  CHECK(ck_c.opt_m == ck_u.opt_m);  // optimizer moments, bitwise
  CHECK(ck_c.opt_v == ck_u.opt_v);
  CHECK(ck_c.opt_step_count == ck_u.opt_step_count);

  // The appended history matches the one-shot history row for row (the
  // %.17g rendering makes equal doubles equal strings).
  CHECK(history_rows(tmp.str("run_c/history.csv")) == history_rows(tmp.str("run_u/history.csv")));

  // A fourth resume has nothing left to do and must not disturb the state.
  auto c4 = run_cli({"train", "--data", tmp.str("ds"), "--out", tmp.str("run_c"), "--resume",
                     tmp.str("run_c/last.ckpt")});
  REQUIRE(c4.code == 0);
  auto ck_c4 = load_checkpoint(tmp.str("run_c/last.ckpt"));
  CHECK(hash_all_params(ck_c4.params) == hash_all_params(ck_u.params));
  CHECK(history_rows(tmp.str("run_c/history.csv")).size() == 3);

  // Guard rails: a config cannot be combined with --resume, and the model
  // flag must agree with the checkpoint.
  auto rc = run_cli({"train", "--data", tmp.str("ds"), "--config", tmp.str("cfg_u.json"),
                     "--out", tmp.str("run_c"), "--resume", tmp.str("run_c/last.ckpt")});
  CHECK(rc.code == 1);
  CHECK(rc.err.find("--config cannot be combined with --resume") != std::string::npos);
  auto rm = run_cli({"train", "--data", tmp.str("ds"), "--model", "sinvit-d", "--out",
                     tmp.str("run_c"), "--resume", tmp.str("run_c/last.ckpt")});
  CHECK(rm.code == 1);
  CHECK(rm.err.find("checkpoint was trained as") != std::string::npos);
}

TEST_CASE("global seed flag and dataset root resolution") {
  TempDir tmp("root");
  // --seed after the subcommand name overrides the config seed.
  REQUIRE(run_cli({"gen", "--frames", "12", "--out", tmp.str("ds"), "--seed", "4"}).code == 0);
  write_file(tmp.str("cfg.json"),
             std::string("{\"model\": ") + kTinyModelJson +
                 R"(, "train": {"phase1_epochs": 0, "phase2_epochs": 0}})");
  auto t = run_cli({"train", "--data", tmp.str("ds"), "--model", "mulvit-tf", "--config",
                    tmp.str("cfg.json"), "--out", tmp.str("run"), "--seed", "42"});
  REQUIRE(t.code == 0);
  CHECK(t.out.find("\"seed\":42") != std::string::npos);
  CHECK(load_checkpoint(tmp.str("run/last.ckpt")).config.seed == 42);

  // Relative --data resolves against MULVIT_DATA_ROOT when set.
  setenv("MULVIT_DATA_ROOT", tmp.path.c_str(), 1);
  auto rooted = run_cli({"eval", "--ckpt", tmp.str("run/last.ckpt"), "--data", "ds", "--split",
                         "all"});
  unsetenv("MULVIT_DATA_ROOT");
  CHECK(rooted.code == 0);
  CHECK(rooted.out.find("12 samples") != std::string::npos);

  auto unrooted = run_cli({"eval", "--ckpt", tmp.str("run/last.ckpt"), "--data", "ds"});
  CHECK(unrooted.code == 1);  // no root set: the relative path does not exist
}

TEST_CASE("warnings do not change the exit status") {
  TempDir tmp("warn");
  // A nearly constant trace: conditioning barely changes it, so the trend
  // correlation lands outside the expected band (high side) or is flat.
  std::string csv = "timestamp_us,rssi_dbm\n";
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    char row[64];
    std::snprintf(row, sizeof(row), "%d,%.6f\n", 1000000 + i * 25000,
                  -50.0 + 3.0 * std::sin(0.02 * i) + 0.01 * rng.normal());
    csv += row;
  }
  write_file(tmp.str("smooth.csv"), csv);
  auto r = run_cli({"preprocess", "--rssi", tmp.str("smooth.csv"), "--out", tmp.str("o.csv")});
  CHECK(r.code == 0);  // whatever the band verdict, the command succeeds
  if (r.out.find("warning:") != std::string::npos) CHECK(r.err.empty());
}
