#include "mulvit/trainer.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <numeric>

#include "mulvit/rng.hpp"

namespace mulvit {

namespace {

// Stream tags so shuffling and dropout draw from unrelated sequences.
constexpr uint64_t kShuffleTag = 0x73687566ull;  // "shuf"
constexpr uint64_t kDropoutTag = 0x64726f70ull;  // "drop"

}  // namespace

std::vector<std::string> TrainConfig::validation_errors() const {
  std::vector<std::string> errs;
  if (phase1_epochs < 0 || phase2_epochs < 0)
    errs.push_back("epoch counts must be non-negative");
  if (!(base_lr > 0.0)) errs.push_back("base_lr must be positive");
  if (!(eta_min >= 0.0) || eta_min > base_lr) errs.push_back("eta_min must lie in [0, base_lr]");
  if (!(backbone_lr_scale > 0.0)) errs.push_back("backbone_lr_scale must be positive");
  if (!(weight_decay >= 0.0)) errs.push_back("weight_decay must be non-negative");
  if (!(dropout >= 0.0) || dropout >= 1.0) errs.push_back("dropout must lie in [0, 1)");
  if (batch_size < 1) errs.push_back("batch_size must be at least 1");
  if (!(beta1 >= 0.0) || beta1 >= 1.0 || !(beta2 >= 0.0) || beta2 >= 1.0)
    errs.push_back("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) errs.push_back("adam_eps must be positive");
  const double fsum = train_fraction + val_fraction + test_fraction;
  if (train_fraction < 0.0 || val_fraction < 0.0 || test_fraction < 0.0 ||
      std::fabs(fsum - 1.0) > 1e-9)
    errs.push_back("split fractions must be non-negative and sum to 1");
  if (split_mode != "chronological_blocks" && split_mode != "shuffled")
    errs.push_back("unknown split mode '" + split_mode + "'");
  if (camera_index < 0) errs.push_back("camera_index must be non-negative");
  if (stop_at_train_rmse_db < 0.0) errs.push_back("stop_at_train_rmse_db must be non-negative");
  return errs;
}

void TrainConfig::validate() const {
  const auto errs = validation_errors();
  if (errs.empty()) return;
  std::string joined;
  for (const auto& e : errs) {
    if (!joined.empty()) joined += "; ";
    joined += e;
  }
  throw ConfigError(joined);
}

Normalizer fit_normalizer(const std::vector<double>& labels, const std::string& split_id) {
  if (labels.empty()) throw DataError("fit_normalizer: no labels");
  double mean = 0.0;
  for (double y : labels) mean += y;
  mean /= static_cast<double>(labels.size());
  double var = 0.0;
  for (double y : labels) var += (y - mean) * (y - mean);
  var /= static_cast<double>(labels.size());
  const double sd = std::sqrt(var);
  if (!(sd > 0.0)) throw DataError("fit_normalizer: labels have zero spread");
  Normalizer n;
  n.mean = mean;
  n.std = sd;
  n.fitted_on = split_id;
  return n;
}

std::vector<std::string> split_assignments(size_t n, double train_fraction, double val_fraction,
                                           double test_fraction, const std::string& mode,
                                           uint64_t seed) {
  const double fsum = train_fraction + val_fraction + test_fraction;
  if (train_fraction < 0.0 || val_fraction < 0.0 || test_fraction < 0.0 ||
      std::fabs(fsum - 1.0) > 1e-9)
    throw ConfigError("split fractions must be non-negative and sum to 1");
  if (mode != "chronological_blocks" && mode != "shuffled")
    throw ConfigError("unknown split mode '" + mode + "'");
  if (n < 10) throw DataError("split requires at least 10 samples, got " + std::to_string(n));

  const size_t n_val = static_cast<size_t>(std::floor(val_fraction * static_cast<double>(n)));
  const size_t n_test = static_cast<size_t>(std::floor(test_fraction * static_cast<double>(n)));
  const size_t n_train = n - n_val - n_test;  // floor(f*n) plus the remainder
  if (train_fraction > 0.0 && n_train == 0) throw ConfigError("train split is empty");
  if (val_fraction > 0.0 && n_val == 0) throw ConfigError("val split is empty");
  if (test_fraction > 0.0 && n_test == 0) throw ConfigError("test split is empty");

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  if (mode == "shuffled") {
    Rng rng(Rng::mix(seed, kShuffleTag));
    for (size_t i = n; i > 1; --i)
      std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)))]);
  }
  std::vector<std::string> tags(n);
  for (size_t k = 0; k < n; ++k)
    tags[order[k]] = k < n_train ? "train" : (k < n_train + n_val ? "val" : "test");
  return tags;
}

void split_dataset(LoadedDataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  auto tags = split_assignments(ds.samples.size(), cfg.train_fraction, cfg.val_fraction,
                                cfg.test_fraction, cfg.split_mode, cfg.seed);
  for (size_t i = 0; i < ds.samples.size(); ++i) ds.samples[i].split = tags[i];
}

double cosine_lr(int64_t step, int64_t total_steps, double base_lr, double eta_min) {
  if (total_steps <= 0) throw ParameterError("cosine_lr: total_steps must be positive");
  if (step < 0 || step > total_steps)
    throw ParameterError("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                         std::to_string(total_steps) + "]");
  const double x = static_cast<double>(step) / static_cast<double>(total_steps);
  return eta_min + 0.5 * (base_lr - eta_min) * (1.0 + std::cos(3.14159265358979323846 * x));
}

AdamW::AdamW(std::vector<ParamSlot> slots, double beta1, double beta2, double eps,
             double weight_decay)
    : slots_(std::move(slots)), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
  m_.reserve(slots_.size());
  v_.reserve(slots_.size());
  for (const auto& s : slots_) {
    if (s.tensor == nullptr) throw ContractError("AdamW: null tensor in slot '" + s.name + "'");
    m_.emplace_back(s.tensor->values().size(), 0.0f);
    v_.emplace_back(s.tensor->values().size(), 0.0f);
  }
}

void AdamW::step(double lr, double grad_scale) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < slots_.size(); ++i) {
    auto& slot = slots_[i];
    auto& theta = slot.tensor->values();
    const std::vector<float>* gbuf =
        slot.tensor->has_grad() ? &slot.tensor->grad_buffer() : nullptr;
    auto& m = m_[i];
    auto& v = v_[i];
    const double slot_lr = lr * slot.lr_scale;
    const double shrink = slot.decay ? 1.0 - slot_lr * wd_ : 1.0;
    for (size_t j = 0; j < theta.size(); ++j) {
      const double g = gbuf ? static_cast<double>((*gbuf)[j]) * grad_scale : 0.0;
      if (!std::isfinite(g))
        throw TrainingError("non-finite gradient in '" + slot.name + "' at element " +
                            std::to_string(j));
      // Moments are stored in float (the checkpointed representation) and
      // read back before use, so a restored optimizer continues bitwise.
      m[j] = static_cast<float>(beta1_ * static_cast<double>(m[j]) + (1.0 - beta1_) * g);
      v[j] = static_cast<float>(beta2_ * static_cast<double>(v[j]) + (1.0 - beta2_) * g * g);
      const double mhat = static_cast<double>(m[j]) / bc1;
      const double vhat = static_cast<double>(v[j]) / bc2;
      // Decoupled decay: a pure shrink, independent of the adaptive step.
      double th = static_cast<double>(theta[j]) * shrink;
      th -= slot_lr * mhat / (std::sqrt(vhat) + eps_);
      theta[j] = static_cast<float>(th);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& s : slots_) s.tensor->zero_grad();
}

void AdamW::restore(const std::vector<std::vector<float>>& m,
                    const std::vector<std::vector<float>>& v, int64_t step_count) {
  if (m.size() != slots_.size() || v.size() != slots_.size())
    throw ContractError("AdamW::restore: moment count does not match slots");
  for (size_t i = 0; i < slots_.size(); ++i)
    if (m[i].size() != m_[i].size() || v[i].size() != v_[i].size())
      throw ContractError("AdamW::restore: moment shape mismatch for '" + slots_[i].name + "'");
  if (step_count < 0) throw ContractError("AdamW::restore: negative step count");
  m_ = m;
  v_ = v;
  t_ = step_count;
}

std::vector<ParamSlot> make_param_slots(ModelParamsT<float>& params, int phase,
                                        double backbone_lr_scale) {
  std::vector<ParamSlot> slots;
  for_each_param(params, [&](const std::string& name, TensorT<float>& t) {
    const bool backbone = is_backbone_param(name);
    if (phase == 1 && backbone) return;
    ParamSlot s;
    s.name = name;
    s.tensor = &t;
    s.lr_scale = (phase == 2 && backbone) ? backbone_lr_scale : 1.0;
    s.decay = !is_no_decay_param(name);
    slots.push_back(std::move(s));
  });
  return slots;
}

ModelParamsT<float> clone_params(const ModelSpec& spec, const ModelParamsT<float>& src) {
  auto dst = alloc_params<float>(spec);
  std::vector<const std::vector<float>*> from;
  for_each_param(const_cast<ModelParamsT<float>&>(src),
                 [&](const std::string&, TensorT<float>& t) { from.push_back(&t.values()); });
  size_t k = 0;
  for_each_param(dst, [&](const std::string&, TensorT<float>& t) {
    if (t.values().size() != from[k]->size())
      throw ShapeError("clone_params: spec does not match source parameters");
    t.values() = *from[k];
    ++k;
  });
  return dst;
}

std::vector<TensorT<float>> select_views(const LoadedSample& s, const ModelSpec& spec,
                                         int64_t camera_index) {
  const int64_t have = static_cast<int64_t>(s.views.size());
  if (spec.cameras == have) return s.views;
  if (spec.cameras == 1) {
    if (camera_index < 0 || camera_index >= have)
      throw SpecError("camera_index " + std::to_string(camera_index) + " out of range for " +
                      std::to_string(have) + " views");
    return {s.views[static_cast<size_t>(camera_index)]};
  }
  throw SpecError("model expects " + std::to_string(spec.cameras) + " cameras but samples have " +
                  std::to_string(have) + " views");
}

namespace {

std::vector<size_t> split_indices(const LoadedDataset& ds, const std::string& split) {
  std::vector<size_t> idx;
  for (size_t i = 0; i < ds.samples.size(); ++i)
    if (split == "all" || ds.samples[i].split == split) idx.push_back(i);
  return idx;
}

double eval_mse_normalized(const ModelSpec& spec, const ModelParamsT<float>& params,
                           const LoadedDataset& ds, const std::vector<size_t>& idx,
                           const Normalizer& norm, int64_t camera_index) {
  ForwardCtxT<float> ctx;  // evaluation mode: no dropout, no tape
  double se = 0.0;
  for (size_t i : idx) {
    const auto& s = ds.samples[i];
    auto pred = models::forward(select_views(s, spec, camera_index), spec, params, ctx);
    const double d = static_cast<double>(pred.item()) - norm.norm(s.label_dbm);
    se += d * d;
  }
  return se / static_cast<double>(idx.size());
}

}  // namespace

TrainResult train(const ModelSpec& spec_in, const LoadedDataset& ds_in, const TrainConfig& cfg,
                  const TrainHooks& hooks, const TrainState* resume) {
  cfg.validate();
  ModelSpec spec = spec_in;
  spec.validate();
  spec.encoder.dropout = cfg.dropout;  // training-time dropout comes from the run config

  // Respect caller-provided split tags; tag untouched datasets ourselves.
  LoadedDataset ds = ds_in;  // sample tensors are shared handles, this is cheap
  const bool tagged = std::any_of(ds.samples.begin(), ds.samples.end(),
                                  [](const LoadedSample& s) { return !s.split.empty(); });
  if (!tagged) split_dataset(ds, cfg);

  const auto train_idx = split_indices(ds, "train");
  const auto val_idx = split_indices(ds, "val");
  if (train_idx.empty()) throw DataError("train: training split is empty");

  std::vector<double> train_labels;
  train_labels.reserve(train_idx.size());
  for (size_t i : train_idx) train_labels.push_back(ds.samples[i].label_dbm);

  TrainResult res;
  res.normalizer = fit_normalizer(train_labels, "train");

  auto params = init_params<float>(spec, cfg.seed);

  double best_val = std::numeric_limits<double>::infinity();
  ModelParamsT<float> best_params;
  bool have_best = false;
  int64_t global_epoch = 0;
  int start_phase = 1;
  int64_t start_epoch = 0;

  if (resume) {
    if (resume->phase < 1 || resume->phase > 2 || resume->epoch_in_phase < 0)
      throw ConfigError("resume state is malformed");
    params = clone_params(spec, resume->params);  // also verifies shape agreement
    start_phase = resume->phase;
    start_epoch = resume->epoch_in_phase;
    global_epoch = resume->epochs_completed;
    res.steps = resume->steps;
    res.best_epoch = resume->best_epoch;
    res.best_val_rmse_db = resume->best_val_rmse_db;
    if (std::isfinite(resume->best_val_rmse_db)) best_val = resume->best_val_rmse_db;
    res.state = *resume;  // carried forward until new epochs overwrite it
    res.state.params = params;
  }

  const int64_t n_train = static_cast<int64_t>(train_idx.size());
  const int64_t spe = (n_train + cfg.batch_size - 1) / cfg.batch_size;  // steps per epoch
  const int64_t first_global_epoch = global_epoch;
  bool stop = hooks.stop_after_epochs == 0;

  for (int phase = start_phase; phase <= 2 && !stop; ++phase) {
    const int64_t epochs = phase == 1 ? cfg.phase1_epochs : cfg.phase2_epochs;
    const int64_t epoch0 = phase == start_phase ? std::min(start_epoch, epochs) : 0;
    if (epochs == 0 || epoch0 >= epochs) {
      if (epoch0 == 0) {
        res.state.phase = phase;
        res.state.epoch_in_phase = 0;
        res.state.opt_step_count = 0;
        res.state.opt_m.clear();
        res.state.opt_v.clear();
        res.state.params = params;
      }
      if (hooks.on_phase_end) hooks.on_phase_end(phase, params);
      continue;
    }

    // Freezing also drops the backbone weight-gradient work in phase 1; the
    // bitwise guarantee comes from the backbone having no optimizer slots.
    if (phase == 1)
      for_each_param(params, [](const std::string& name, TensorT<float>& t) {
        if (is_backbone_param(name)) t.set_requires_grad(false);
      });
    else
      for_each_param(params,
                     [](const std::string&, TensorT<float>& t) { t.set_requires_grad(true); });

    AdamW opt(make_param_slots(params, phase, cfg.backbone_lr_scale), cfg.beta1, cfg.beta2,
              cfg.adam_eps, cfg.weight_decay);
    if (resume && phase == start_phase && epoch0 > 0) {
      try {
        opt.restore(resume->opt_m, resume->opt_v, resume->opt_step_count);
      } catch (const ContractError& e) {
        throw ConfigError(std::string("resume state does not fit this run: ") + e.what());
      }
    }
    const int64_t total_steps = epochs * spe;
    int64_t epochs_done_in_phase = epoch0;

    for (int64_t epoch = epoch0; epoch < epochs && !stop; ++epoch) {
      ++global_epoch;

      std::vector<size_t> order = train_idx;
      Rng shuffle_rng(Rng::mix(cfg.seed, kShuffleTag, static_cast<uint64_t>(phase),
                               static_cast<uint64_t>(epoch)));
      for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1],
                  order[static_cast<size_t>(shuffle_rng.uniform_int(static_cast<int64_t>(i)))]);

      double epoch_sq_sum = 0.0;
      double epoch_lr0 = 0.0;

      for (int64_t s0 = 0, bidx = 0; s0 < n_train; s0 += cfg.batch_size, ++bidx) {
        const int64_t bn = std::min<int64_t>(cfg.batch_size, n_train - s0);
        const int64_t phase_step = epoch * spe + bidx;
        const double lr = cosine_lr(phase_step, total_steps, cfg.base_lr, cfg.eta_min);
        if (bidx == 0) epoch_lr0 = lr;
        if (hooks.step_probe)
          hooks.step_probe->push_back(
              {phase, phase_step, lr, phase == 2 ? lr * cfg.backbone_lr_scale : 0.0});

        opt.zero_grad();
        bool bad_loss = false;
        for (int64_t b = 0; b < bn && !bad_loss; ++b) {
          const auto& sample = ds.samples[order[static_cast<size_t>(s0 + b)]];
          Rng drop_rng(Rng::mix(cfg.seed, kDropoutTag, static_cast<uint64_t>(phase),
                                (static_cast<uint64_t>(epoch) << 32) |
                                    static_cast<uint64_t>(s0 + b)));
          ForwardCtxT<float> ctx;
          ctx.training = true;
          ctx.rng = &drop_rng;

          TapeT<float> tape;
          TapeT<float>::Scope scope(tape);
          auto pred = models::forward(select_views(sample, spec, cfg.camera_index), spec, params,
                                      ctx);
          auto target = TensorT<float>::from_data(
              {1, 1}, {static_cast<float>(res.normalizer.norm(sample.label_dbm))});
          auto loss = mse_loss(pred, target);
          const double lv = static_cast<double>(loss.item());
          if (!std::isfinite(lv)) {
            res.aborted = true;
            res.abort_reason = "non-finite loss at phase " + std::to_string(phase) + " epoch " +
                               std::to_string(epoch) + " step " + std::to_string(bidx);
            bad_loss = true;
            break;
          }
          epoch_sq_sum += lv;
          tape.backward(loss);
        }
        if (bad_loss) {
          stop = true;
          break;
        }
        try {
          opt.step(lr, 1.0 / static_cast<double>(bn));
        } catch (const TrainingError& e) {
          res.aborted = true;
          res.abort_reason = e.what();
          stop = true;
          break;
        }
        ++res.steps;
      }
      if (res.aborted) break;

      EpochRecord rec;
      rec.epoch = global_epoch;
      rec.phase = phase;
      rec.lr = epoch_lr0;
      rec.train_loss = epoch_sq_sum / static_cast<double>(n_train);
      rec.val_loss = std::numeric_limits<double>::quiet_NaN();
      if (!val_idx.empty()) {
        rec.val_loss =
            eval_mse_normalized(spec, params, ds, val_idx, res.normalizer, cfg.camera_index);
        const double val_rmse_db = res.normalizer.std * std::sqrt(rec.val_loss);
        if (val_rmse_db < best_val) {
          best_val = val_rmse_db;
          best_params = clone_params(spec, params);
          have_best = true;
          res.best_epoch = global_epoch;
          res.best_val_rmse_db = val_rmse_db;
        }
      }
      res.history.push_back(rec);
      if (hooks.on_epoch) hooks.on_epoch(rec);
      epochs_done_in_phase = epoch + 1;

      if (cfg.stop_at_train_rmse_db > 0.0 &&
          res.normalizer.std * std::sqrt(rec.train_loss) < cfg.stop_at_train_rmse_db) {
        res.early_stopped = true;
        stop = true;
      }
      if (hooks.stop_after_epochs >= 0 &&
          global_epoch - first_global_epoch >= hooks.stop_after_epochs)
        stop = true;  // clean interruption; state below resumes it exactly
    }
    if (!res.aborted) {
      res.state.phase = phase;
      res.state.epoch_in_phase = epochs_done_in_phase;
      res.state.opt_step_count = opt.step_count();
      res.state.opt_m = opt.m();
      res.state.opt_v = opt.v();
      if (hooks.on_phase_end && epochs_done_in_phase == epochs) hooks.on_phase_end(phase, params);
    }
  }

  // Leave the parameters in a clean, fully-trainable state for callers.
  for_each_param(params, [](const std::string&, TensorT<float>& t) {
    t.set_requires_grad(true);
    t.zero_grad();
  });

  res.final_params = params;
  res.state.params = params;
  res.state.epochs_completed = global_epoch;
  res.state.steps = res.steps;
  res.state.best_val_rmse_db = res.best_val_rmse_db;
  res.state.best_epoch = res.best_epoch;
  res.best_updated = have_best;
  if (have_best) {
    res.params = std::move(best_params);
  } else {
    // No validation split (or the best epoch predates a resume point, in
    // which case the earlier best checkpoint on disk stays authoritative).
    res.params = clone_params(spec, params);
    if (res.best_epoch < 0) res.best_epoch = global_epoch;
  }
  return res;
}

EvalResult evaluate(const ModelSpec& spec, const ModelParamsT<float>& params,
                    const LoadedDataset& ds, const std::string& split, const Normalizer& norm,
                    int64_t camera_index) {
  if (split != "train" && split != "val" && split != "test" && split != "all")
    throw ParameterError("evaluate: unknown split '" + split + "'");
  const auto idx = split_indices(ds, split);
  if (idx.empty()) throw DataError("evaluate: split '" + split + "' is empty");

  EvalResult out;
  out.pred_dbm.reserve(idx.size());
  out.label_dbm.reserve(idx.size());
  ForwardCtxT<float> ctx;  // evaluation mode
  for (size_t i : idx) {
    const auto& s = ds.samples[i];
    auto pred = models::forward(select_views(s, spec, camera_index), spec, params, ctx);
    out.pred_dbm.push_back(norm.denorm(static_cast<double>(pred.item())));
    out.label_dbm.push_back(s.label_dbm);
  }
  out.report = metrics::compute(out.pred_dbm, out.label_dbm);
  return out;
}

namespace {

void write_history_rows(std::FILE* f, const std::vector<EpochRecord>& history) {
  for (const auto& r : history) {
    std::fprintf(f, "%" PRId64 ",%d,%.17g,%.17g,", r.epoch, r.phase, r.lr, r.train_loss);
    if (std::isfinite(r.val_loss)) std::fprintf(f, "%.17g", r.val_loss);
    std::fprintf(f, "\n");
  }
}

}  // namespace

void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history,
                       const std::string& config_echo) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  if (!config_echo.empty()) std::fprintf(f, "# config: %s\n", config_echo.c_str());
  std::fprintf(f, "epoch,phase,lr,train_loss,val_loss\n");
  write_history_rows(f, history);
  std::fclose(f);
}

void append_history_csv(const std::string& path, const std::vector<EpochRecord>& history) {
  std::FILE* f = std::fopen(path.c_str(), "a");
  if (!f) throw IoError("cannot open '" + path + "' for appending");
  write_history_rows(f, history);
  std::fclose(f);
}

}  // namespace mulvit
