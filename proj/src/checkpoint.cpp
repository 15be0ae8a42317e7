#include "mulvit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO assumes a little-endian host");
static_assert(sizeof(float) == 4);

namespace mulvit {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'M', 'V', 'C', 'K'};
constexpr uint8_t kVersion = 1;

json spec_to_json(const ModelSpec& s) {
  return json{{"variant", variant_name(s.variant)},
              {"cameras", s.cameras},
              {"image_height", s.encoder.image_height},
              {"image_width", s.encoder.image_width},
              {"patch_size", s.encoder.patch_size},
              {"channels", s.encoder.channels},
              {"embed_dim", s.encoder.embed_dim},
              {"depth", s.encoder.depth},
              {"heads", s.encoder.heads},
              {"ffn_ratio", s.encoder.ffn_ratio},
              {"dropout", s.encoder.dropout},
              {"fusion_depth", s.fusion_depth},
              {"fusion_ffn_ratio", s.fusion_ffn_ratio},
              {"fusion_heads", s.fusion_heads},
              {"twdnn_blocks", s.twdnn_blocks},
              {"twdnn_hidden", s.twdnn_hidden},
              {"head_hidden", s.head_hidden}};
}

void spec_apply_json(const json& j, ModelSpec& s) {
  for (const auto& [key, val] : j.items()) {
    if (key == "variant")
      s.variant = variant_from_name(val.get<std::string>());
    else if (key == "cameras")
      s.cameras = val.get<int64_t>();
    else if (key == "image_height")
      s.encoder.image_height = val.get<int64_t>();
    else if (key == "image_width")
      s.encoder.image_width = val.get<int64_t>();
    else if (key == "patch_size")
      s.encoder.patch_size = val.get<int64_t>();
    else if (key == "channels")
      s.encoder.channels = val.get<int64_t>();
    else if (key == "embed_dim")
      s.encoder.embed_dim = val.get<int64_t>();
    else if (key == "depth")
      s.encoder.depth = val.get<int64_t>();
    else if (key == "heads")
      s.encoder.heads = val.get<int64_t>();
    else if (key == "ffn_ratio")
      s.encoder.ffn_ratio = val.get<int64_t>();
    else if (key == "dropout")
      s.encoder.dropout = val.get<double>();
    else if (key == "fusion_depth")
      s.fusion_depth = val.get<int64_t>();
    else if (key == "fusion_ffn_ratio")
      s.fusion_ffn_ratio = val.get<int64_t>();
    else if (key == "fusion_heads")
      s.fusion_heads = val.get<int64_t>();
    else if (key == "twdnn_blocks")
      s.twdnn_blocks = val.get<int64_t>();
    else if (key == "twdnn_hidden")
      s.twdnn_hidden = val.get<int64_t>();
    else if (key == "head_hidden")
      s.head_hidden = val.get<int64_t>();
    else
      throw DataError("unknown model key '" + key + "'");
  }
}

json train_config_to_json(const TrainConfig& c) {
  return json{{"phase1_epochs", c.phase1_epochs},
              {"phase2_epochs", c.phase2_epochs},
              {"base_lr", c.base_lr},
              {"backbone_lr_scale", c.backbone_lr_scale},
              {"weight_decay", c.weight_decay},
              {"dropout", c.dropout},
              {"batch_size", c.batch_size},
              {"eta_min", c.eta_min},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"train_fraction", c.train_fraction},
              {"val_fraction", c.val_fraction},
              {"test_fraction", c.test_fraction},
              {"split_mode", c.split_mode},
              {"seed", c.seed},
              {"camera_index", c.camera_index},
              {"stop_at_train_rmse_db", c.stop_at_train_rmse_db}};
}

void train_config_apply_json(const json& j, TrainConfig& c) {
  for (const auto& [key, val] : j.items()) {
    if (key == "phase1_epochs")
      c.phase1_epochs = val.get<int64_t>();
    else if (key == "phase2_epochs")
      c.phase2_epochs = val.get<int64_t>();
    else if (key == "base_lr")
      c.base_lr = val.get<double>();
    else if (key == "backbone_lr_scale")
      c.backbone_lr_scale = val.get<double>();
    else if (key == "weight_decay")
      c.weight_decay = val.get<double>();
    else if (key == "dropout")
      c.dropout = val.get<double>();
    else if (key == "batch_size")
      c.batch_size = val.get<int64_t>();
    else if (key == "eta_min")
      c.eta_min = val.get<double>();
    else if (key == "beta1")
      c.beta1 = val.get<double>();
    else if (key == "beta2")
      c.beta2 = val.get<double>();
    else if (key == "adam_eps")
      c.adam_eps = val.get<double>();
    else if (key == "train_fraction")
      c.train_fraction = val.get<double>();
    else if (key == "val_fraction")
      c.val_fraction = val.get<double>();
    else if (key == "test_fraction")
      c.test_fraction = val.get<double>();
    else if (key == "split_mode")
      c.split_mode = val.get<std::string>();
    else if (key == "seed")
      c.seed = val.get<uint64_t>();
    else if (key == "camera_index")
      c.camera_index = val.get<int64_t>();
    else if (key == "stop_at_train_rmse_db")
      c.stop_at_train_rmse_db = val.get<double>();
    else
      throw DataError("unknown train key '" + key + "'");
  }
}

template <typename T>
void write_raw(std::ofstream& f, const T& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T read_raw(std::ifstream& f, const std::string& path) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!f) throw DataError("truncated checkpoint: " + path);
  return v;
}

}  // namespace

std::string gelu_form_name(GeluForm f) {
  return f == GeluForm::TanhApprox ? "tanh_approx" : "exact_cdf";
}

GeluForm gelu_form_from_name(const std::string& name) {
  if (name == "tanh_approx") return GeluForm::TanhApprox;
  if (name == "exact_cdf") return GeluForm::ExactCdf;
  throw DataError("unknown gelu form '" + name + "'");
}

std::string run_config_to_json_text(const ModelSpec& spec, const TrainConfig& cfg) {
  json j{{"model", spec_to_json(spec)}, {"train", train_config_to_json(cfg)}};
  return j.dump();
}

void run_config_from_json_text(const std::string& text, ModelSpec& spec, TrainConfig& cfg) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("run config is not valid JSON: ") + e.what());
  }
  try {
    if (!j.is_object()) throw DataError("run config must be a JSON object");
    for (const auto& [key, val] : j.items()) {
      if (key == "model")
        spec_apply_json(val, spec);
      else if (key == "train")
        train_config_apply_json(val, cfg);
      else
        throw DataError("unknown run config section '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("run config has a wrong-typed value: ") + e.what());
  }
}

namespace {

void write_entry(std::ofstream& f, const std::string& name, const Shape& shape,
                 const std::vector<float>& values) {
  write_raw(f, static_cast<uint16_t>(name.size()));
  f.write(name.data(), static_cast<std::streamsize>(name.size()));
  f.put(static_cast<char>(shape.size()));
  for (int64_t d : shape) write_raw(f, static_cast<uint32_t>(d));
  f.write(reinterpret_cast<const char*>(values.data()),
          static_cast<std::streamsize>(values.size() * sizeof(float)));
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  ck.spec.validate();
  if (ck.phase < 1 || ck.phase > 2 || ck.epoch_in_phase < 0)
    throw ContractError("checkpoint progress fields are malformed");
  if (ck.opt_m.size() != ck.opt_v.size())
    throw ContractError("checkpoint optimizer moment lists differ in length");

  auto& params = const_cast<ModelParamsT<float>&>(ck.params);
  auto slots = make_param_slots(params, ck.phase, 1.0);
  if (ck.has_optimizer_state() && ck.opt_m.size() != slots.size())
    throw ContractError("checkpoint optimizer state does not match the phase's slot count");

  json header{{"format_version", 1},
              {"model", spec_to_json(ck.spec)},
              {"train", train_config_to_json(ck.config)},
              {"normalizer",
               {{"mean", ck.normalizer.mean},
                {"std", ck.normalizer.std},
                {"fitted_on", ck.normalizer.fitted_on}}},
              {"forward", {{"gelu_form", gelu_form_name(ck.gelu_form)}, {"ln_eps", ck.ln_eps}}},
              {"progress",
               {{"epochs_completed", ck.epochs_completed},
                {"best_epoch", ck.best_epoch},
                {"steps", ck.steps},
                {"phase", ck.phase},
                {"epoch_in_phase", ck.epoch_in_phase},
                {"opt_step_count", ck.opt_step_count},
                {"has_optimizer_state", ck.has_optimizer_state()}}}};
  header["progress"]["best_val_rmse_db"] =
      std::isfinite(ck.best_val_rmse_db) ? json(ck.best_val_rmse_db) : json(nullptr);
  const std::string htext = header.dump();

  size_t count = 0;
  for_each_param(params, [&](const std::string&, TensorT<float>&) { ++count; });
  if (ck.has_optimizer_state()) count += 2 * slots.size();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(kMagic, 4);
  f.put(static_cast<char>(kVersion));
  write_raw(f, static_cast<uint64_t>(htext.size()));
  f.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  write_raw(f, static_cast<uint32_t>(count));
  for_each_param(params, [&](const std::string& name, TensorT<float>& t) {
    write_entry(f, name, t.shape(), t.values());
  });
  if (ck.has_optimizer_state()) {
    for (size_t i = 0; i < slots.size(); ++i) {
      if (ck.opt_m[i].size() != slots[i].tensor->values().size() ||
          ck.opt_v[i].size() != slots[i].tensor->values().size())
        throw ContractError("optimizer moment shape does not mirror '" + slots[i].name + "'");
      write_entry(f, "opt.m." + slots[i].name, slots[i].tensor->shape(), ck.opt_m[i]);
      write_entry(f, "opt.v." + slots[i].name, slots[i].tensor->shape(), ck.opt_v[i]);
    }
  }
  if (!f) throw IoError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw DataError("not a checkpoint file (bad magic): " + path);
  const auto version = static_cast<uint8_t>(f.get());
  if (!f || version != kVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version) + ": " + path);

  const auto hlen = read_raw<uint64_t>(f, path);
  if (hlen > (1ull << 24)) throw DataError("implausible checkpoint header size: " + path);
  std::string htext(hlen, '\0');
  f.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw DataError("truncated checkpoint: " + path);

  Checkpoint ck;
  bool has_opt = false;
  try {
    const json header = json::parse(htext);
    if (header.at("format_version").get<int>() != 1)
      throw DataError("unsupported checkpoint format_version");
    spec_apply_json(header.at("model"), ck.spec);
    train_config_apply_json(header.at("train"), ck.config);
    const json& n = header.at("normalizer");
    ck.normalizer.mean = n.at("mean").get<double>();
    ck.normalizer.std = n.at("std").get<double>();
    ck.normalizer.fitted_on = n.at("fitted_on").get<std::string>();
    const json& fw = header.at("forward");
    ck.gelu_form = gelu_form_from_name(fw.at("gelu_form").get<std::string>());
    ck.ln_eps = fw.at("ln_eps").get<double>();
    const json& pr = header.at("progress");
    ck.epochs_completed = pr.at("epochs_completed").get<int64_t>();
    ck.best_epoch = pr.at("best_epoch").get<int64_t>();
    ck.steps = pr.at("steps").get<int64_t>();
    ck.phase = pr.at("phase").get<int>();
    ck.epoch_in_phase = pr.at("epoch_in_phase").get<int64_t>();
    ck.opt_step_count = pr.at("opt_step_count").get<int64_t>();
    has_opt = pr.at("has_optimizer_state").get<bool>();
    ck.best_val_rmse_db = pr.at("best_val_rmse_db").is_null()
                              ? std::numeric_limits<double>::quiet_NaN()
                              : pr.at("best_val_rmse_db").get<double>();
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint header in " + path + ": " + e.what());
  }
  ck.spec.validate();
  if (ck.phase < 1 || ck.phase > 2 || ck.epoch_in_phase < 0)
    throw DataError("checkpoint progress fields are malformed: " + path);

  ck.params = alloc_params<float>(ck.spec);
  auto slots = make_param_slots(ck.params, ck.phase, 1.0);

  const auto count = read_raw<uint32_t>(f, path);
  size_t expected = 0;
  for_each_param(ck.params, [&](const std::string&, TensorT<float>&) { ++expected; });
  if (has_opt) expected += 2 * slots.size();
  if (count != expected)
    throw DataError("checkpoint tensor count " + std::to_string(count) + " does not match spec (" +
                    std::to_string(expected) + "): " + path);

  auto read_entry = [&](const std::string& name, const TensorT<float>& like, float* dst) {
    const auto nlen = read_raw<uint16_t>(f, path);
    std::string got(nlen, '\0');
    f.read(got.data(), nlen);
    if (!f) throw DataError("truncated checkpoint: " + path);
    if (got != name)
      throw DataError("checkpoint tensor '" + got + "' where '" + name + "' expected: " + path);
    const int rank = f.get();
    if (!f || rank != like.rank())
      throw DataError("checkpoint tensor '" + name + "' has rank " + std::to_string(rank) +
                      ", expected " + std::to_string(like.rank()) + ": " + path);
    for (int d = 0; d < rank; ++d) {
      const auto dim = read_raw<uint32_t>(f, path);
      if (static_cast<int64_t>(dim) != like.dim(d))
        throw DataError("checkpoint tensor '" + name + "' dim " + std::to_string(d) +
                        " mismatch: " + path);
    }
    f.read(reinterpret_cast<char*>(dst),
           static_cast<std::streamsize>(like.values().size() * sizeof(float)));
    if (!f) throw DataError("truncated checkpoint: " + path);
  };

  for_each_param(ck.params, [&](const std::string& name, TensorT<float>& t) {
    read_entry(name, t, t.values().data());
  });
  if (has_opt) {
    ck.opt_m.resize(slots.size());
    ck.opt_v.resize(slots.size());
    for (size_t i = 0; i < slots.size(); ++i) {
      ck.opt_m[i].assign(slots[i].tensor->values().size(), 0.0f);
      ck.opt_v[i].assign(slots[i].tensor->values().size(), 0.0f);
      read_entry("opt.m." + slots[i].name, *slots[i].tensor, ck.opt_m[i].data());
      read_entry("opt.v." + slots[i].name, *slots[i].tensor, ck.opt_v[i].data());
    }
  }
  // Anything after the table means the file was not produced by this writer.
  if (f.get() != std::ifstream::traits_type::eof())
    throw DataError("trailing bytes after checkpoint table: " + path);
  return ck;
}

TrainState to_train_state(const Checkpoint& ck) {
  TrainState st;
  st.params = clone_params(ck.spec, ck.params);
  st.phase = ck.phase;
  st.epoch_in_phase = ck.epoch_in_phase;
  st.opt_step_count = ck.opt_step_count;
  st.opt_m = ck.opt_m;
  st.opt_v = ck.opt_v;
  st.best_val_rmse_db = ck.best_val_rmse_db;
  st.best_epoch = ck.best_epoch;
  st.epochs_completed = ck.epochs_completed;
  st.steps = ck.steps;
  return st;
}

Checkpoint make_checkpoint(const ModelSpec& spec, const TrainConfig& cfg, const TrainState& state,
                           const Normalizer& norm, bool include_optimizer_state) {
  Checkpoint ck;
  ck.spec = spec;
  ck.config = cfg;
  ck.normalizer = norm;
  ck.params = clone_params(spec, state.params);
  ck.phase = state.phase;
  ck.epoch_in_phase = state.epoch_in_phase;
  ck.epochs_completed = state.epochs_completed;
  ck.best_epoch = state.best_epoch;
  ck.best_val_rmse_db = state.best_val_rmse_db;
  ck.steps = state.steps;
  if (include_optimizer_state) {
    ck.opt_step_count = state.opt_step_count;
    ck.opt_m = state.opt_m;
    ck.opt_v = state.opt_v;
  }
  return ck;
}

}  // namespace mulvit
