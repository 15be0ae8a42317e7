#pragma once

#include <string>

#include "mulvit/trainer.hpp"

namespace mulvit {

/// A trained (or in-progress) model snapshot: the architectural spec, the
/// producing train config, the label normalizer, the forward conventions,
/// progress counters, every parameter tensor, and (optionally) the optimizer
/// moments needed to resume mid-run.
struct Checkpoint {
  ModelSpec spec;
  TrainConfig config;
  Normalizer normalizer;
  GeluForm gelu_form = GeluForm::TanhApprox;
  double ln_eps = 1e-6;
  int64_t epochs_completed = 0;
  int64_t best_epoch = -1;
  double best_val_rmse_db = std::numeric_limits<double>::quiet_NaN();
  int64_t steps = 0;
  ModelParamsT<float> params;
  // Resume payload: the phase in progress, completed epochs within it, and
  // AdamW moments in make_param_slots(params, phase, ...) order. Empty
  // moment lists mean "parameters only" (e.g. a best-val snapshot).
  int phase = 1;
  int64_t epoch_in_phase = 0;
  int64_t opt_step_count = 0;
  std::vector<std::vector<float>> opt_m, opt_v;

  bool has_optimizer_state() const { return !opt_m.empty(); }
};

/// File layout: magic "MVCK", one version byte, a u64 little-endian JSON
/// header length, the header (spec echo, train config, normalizer, forward
/// conventions, progress), then a table of
///   (u16 name length, name, u8 rank, u32 dims..., f32 values...)
/// entries, all little-endian: every parameter in canonical order, then —
/// when optimizer state is present — "opt.m.<param>" and "opt.v.<param>"
/// entries per optimizer slot. Values are raw 32-bit bits, so save/load
/// round-trips bitwise.
void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

/// Conversions between a checkpoint and the trainer's resume snapshot.
/// `to_train_state` deep-copies the parameters so the checkpoint and the
/// running state never alias.
TrainState to_train_state(const Checkpoint& ck);
Checkpoint make_checkpoint(const ModelSpec& spec, const TrainConfig& cfg, const TrainState& state,
                           const Normalizer& norm, bool include_optimizer_state);

/// JSON text for { "model": ..., "train": ... } run configuration, as
/// embedded in checkpoints and emitted/consumed by the command-line tool.
std::string run_config_to_json_text(const ModelSpec& spec, const TrainConfig& cfg);

/// Applies the keys present in `text` onto `spec`/`cfg` (partial overrides
/// allowed; unknown keys are DataErrors so typos do not pass silently).
void run_config_from_json_text(const std::string& text, ModelSpec& spec, TrainConfig& cfg);

std::string gelu_form_name(GeluForm f);
GeluForm gelu_form_from_name(const std::string& name);

}  // namespace mulvit
