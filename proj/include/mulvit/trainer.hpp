#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "mulvit/dataset.hpp"
#include "mulvit/metrics.hpp"
#include "mulvit/models.hpp"

namespace mulvit {

/// Everything the two-phase fine-tuning loop needs. Defaults are the
/// reference training recipe: 80 frozen-backbone epochs then 120 full
/// fine-tuning epochs, AdamW at 1e-4 with weight decay 0.1, cosine
/// annealing per phase, batch size 32, 80/10/10 split.
struct TrainConfig {
  int64_t phase1_epochs = 80;  // backbone frozen
  int64_t phase2_epochs = 120; // backbone trained at base_lr * backbone_lr_scale
  double base_lr = 1e-4;
  double backbone_lr_scale = 0.1;
  double weight_decay = 0.1;
  double dropout = 0.1;  // overrides the spec's encoder dropout while training
  int64_t batch_size = 32;
  double eta_min = 1e-6;  // cosine floor
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double train_fraction = 0.8;
  double val_fraction = 0.1;
  double test_fraction = 0.1;
  std::string split_mode = "chronological_blocks";  // or "shuffled"
  uint64_t seed = 1;
  /// Which camera a single-view model reads when the dataset has several.
  int64_t camera_index = 0;
  /// Optional early finish once the epoch-mean train RMSE (dBm) drops below
  /// this value; 0 disables. Used by memorization probes.
  double stop_at_train_rmse_db = 0.0;

  /// Every problem with this config, one message per field; empty when valid.
  std::vector<std::string> validation_errors() const;
  void validate() const;  // throws ConfigError listing all problems at once
};

/// Label z-score standardization. Statistics come from the training split
/// only; `fitted_on` records that provenance.
struct Normalizer {
  double mean = 0.0;
  double std = 1.0;  // > 0
  std::string fitted_on = "train";

  double norm(double y_dbm) const { return (y_dbm - mean) / std; }
  double denorm(double z) const { return z * std + mean; }
};

/// Mean / population standard deviation of `labels`. Throws DataError on an
/// empty list or zero spread (a constant label cannot be standardized).
Normalizer fit_normalizer(const std::vector<double>& labels,
                          const std::string& split_id = "train");

/// Split assignment for n chronologically ordered samples. Val and test get
/// exactly floor(fraction*n) samples, the remainder goes to train.
/// `chronological_blocks` keeps each split temporally contiguous
/// (train, then val, then test); `shuffled` permutes first with `seed`.
/// Throws ConfigError when a nonzero fraction yields an empty split and
/// DataError when n < 10.
std::vector<std::string> split_assignments(size_t n, double train_fraction, double val_fraction,
                                           double test_fraction, const std::string& mode,
                                           uint64_t seed);

/// Tags every sample's `split` field in place using `split_assignments`.
void split_dataset(LoadedDataset& ds, const TrainConfig& cfg);

/// Cosine annealing: eta_min + 0.5*(base - eta_min)*(1+cos(pi*step/total)).
/// One cycle per phase, no warm restarts. step must lie in [0, total].
double cosine_lr(int64_t step, int64_t total_steps, double base_lr, double eta_min);

/// One optimizer group member: the tensor, its stable name, its learning
/// rate scale (backbone vs. the rest), and whether decoupled weight decay
/// applies to it.
struct ParamSlot {
  std::string name;
  TensorT<float>* tensor = nullptr;
  double lr_scale = 1.0;
  bool decay = true;
};

/// The optimizer slot list for one phase, in canonical parameter order.
/// Phase 1 excludes the backbone entirely (it is frozen); phase 2 includes
/// it with `backbone_lr_scale`. Checkpoints serialize optimizer moments in
/// exactly this order.
std::vector<ParamSlot> make_param_slots(ModelParamsT<float>& params, int phase,
                                        double backbone_lr_scale);

/// AdamW over an explicit slot list. Moment shapes mirror the parameters and
/// are stored in float — the same 32-bit values a checkpoint carries — so a
/// restored optimizer continues bitwise. Update arithmetic runs in double on
/// the stored values. Decay is decoupled: a pure shrink by
/// 1 - lr*lr_scale*wd, applied separately from the adaptive step. Frozen
/// parameters are simply never given a slot.
class AdamW {
 public:
  AdamW(std::vector<ParamSlot> slots, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8, double weight_decay = 0.1);

  /// One update using each slot's gradient buffer scaled by `grad_scale`
  /// (1/batch for mean-reduced batches). Throws TrainingError on the first
  /// non-finite gradient, naming the parameter.
  void step(double lr, double grad_scale = 1.0);
  void zero_grad();

  /// Replaces moments and step count (shapes must match the slots).
  void restore(const std::vector<std::vector<float>>& m,
               const std::vector<std::vector<float>>& v, int64_t step_count);

  int64_t step_count() const { return t_; }
  const std::vector<ParamSlot>& slots() const { return slots_; }
  const std::vector<std::vector<float>>& m() const { return m_; }
  const std::vector<std::vector<float>>& v() const { return v_; }

 private:
  std::vector<ParamSlot> slots_;
  double beta1_, beta2_, eps_, wd_;
  int64_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

struct EpochRecord {
  int64_t epoch = 0;  // 1-based, global across phases
  int phase = 1;
  double lr = 0.0;         // head-group lr at the first step of the epoch
  double train_loss = 0.0; // mean squared error in normalized units
  double val_loss = 0.0;   // NaN when the val split is empty
};

/// Per-step learning rates, recorded when a probe vector is supplied.
/// backbone_lr is what the backbone group would receive (phase 2 scales it
/// by backbone_lr_scale; in phase 1 the backbone has no slots at all).
struct StepProbe {
  int phase = 1;
  int64_t step = 0;  // 0-based within the phase
  double lr = 0.0;
  double backbone_lr = 0.0;
};

struct TrainHooks {
  std::vector<StepProbe>* step_probe = nullptr;
  std::function<void(int phase, ModelParamsT<float>& params)> on_phase_end;
  std::function<void(const EpochRecord&)> on_epoch;
  /// When >= 0, stop cleanly after this many epochs have run in this call
  /// (counting across phases). The result's `state` resumes the run exactly;
  /// `early_stopped` is not set by this knob.
  int64_t stop_after_epochs = -1;
};

/// Epoch-granular snapshot sufficient to continue a run exactly where it
/// stopped: parameters, the phase in progress, how many of its epochs are
/// done, and the optimizer moments (in `make_param_slots` order for that
/// phase). A resumed run reproduces the uninterrupted run bitwise.
struct TrainState {
  ModelParamsT<float> params;
  int phase = 1;
  int64_t epoch_in_phase = 0;  // completed epochs within `phase`
  int64_t opt_step_count = 0;
  std::vector<std::vector<float>> opt_m, opt_v;
  double best_val_rmse_db = std::numeric_limits<double>::quiet_NaN();
  int64_t best_epoch = -1;       // global epoch of the best validation RMSE
  int64_t epochs_completed = 0;  // global, across phases
  int64_t steps = 0;             // global optimizer steps
};

struct TrainResult {
  ModelParamsT<float> params;       // retained checkpoint: best val RMSE (final when no val)
  ModelParamsT<float> final_params; // state at the last completed step
  Normalizer normalizer;
  std::vector<EpochRecord> history; // epochs run by *this* call (resume appends)
  TrainState state;                 // resumable end-of-run snapshot
  double best_val_rmse_db = std::numeric_limits<double>::quiet_NaN();
  int64_t best_epoch = -1;  // global epoch of the retained checkpoint
  int64_t steps = 0;        // optimizer steps taken, including resumed-over ones
  bool best_updated = false;  // a new best-val snapshot was taken in this run
  bool early_stopped = false;
  bool aborted = false;       // divergence: result holds the last good state
  std::string abort_reason;
};

/// Deep copy of every learnable tensor (gradient state is not copied).
ModelParamsT<float> clone_params(const ModelSpec& spec, const ModelParamsT<float>& src);

/// The views a model consumes from one sample: all of them for a multi-view
/// spec, the configured camera for a single-view spec.
std::vector<TensorT<float>> select_views(const LoadedSample& s, const ModelSpec& spec,
                                         int64_t camera_index);

/// Two-phase fine-tuning. Phase 1 freezes the backbone (per-camera patch
/// embeddings and transformer blocks): those tensors get no optimizer slots
/// and are bitwise unchanged at phase end. Phase 2 trains everything with
/// the backbone group at base_lr * backbone_lr_scale. Each phase runs its
/// own cosine cycle and its own fresh optimizer state. Respects existing
/// split tags; untagged datasets are split per the config. The normalizer is
/// fitted on the train split only. A NaN loss or gradient aborts the run,
/// returning the best state seen so far with `aborted` set.
///
/// `resume`, when given, continues that snapshot under the same spec,
/// dataset, and config: remaining epochs replay exactly as the uninterrupted
/// run would have (shuffles and dropout are keyed by absolute phase/epoch,
/// and optimizer moments round-trip bitwise). When the best validation epoch
/// predates the resume point, `params` falls back to the final state — the
/// earlier best checkpoint on disk stays authoritative (`best_updated`
/// tells the caller whether to overwrite it).
TrainResult train(const ModelSpec& spec, const LoadedDataset& ds, const TrainConfig& cfg,
                  const TrainHooks& hooks = {}, const TrainState* resume = nullptr);

struct EvalResult {
  std::vector<double> pred_dbm;
  std::vector<double> label_dbm;
  MetricsReport report;
};

/// Evaluation-mode forward over one split ("train"/"val"/"test"/"all"),
/// denormalized to dBm, metrics delegated to the metrics module (always in
/// dBm, never normalized units). Throws DataError when the split is empty.
EvalResult evaluate(const ModelSpec& spec, const ModelParamsT<float>& params,
                    const LoadedDataset& ds, const std::string& split, const Normalizer& norm,
                    int64_t camera_index = 0);

/// CSV: epoch,phase,lr,train_loss,val_loss (empty val field when NaN).
/// `config_echo`, when nonempty, is embedded as a leading "# config: " line.
void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history,
                       const std::string& config_echo = "");

/// Appends rows (no header) to an existing history CSV; resumed runs extend
/// the original file. Throws IoError when the file cannot be opened.
void append_history_csv(const std::string& path, const std::vector<EpochRecord>& history);

}  // namespace mulvit
