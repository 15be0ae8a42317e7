// Python bindings for the main operations: model cost analysis, signal
// conditioning, metrics, synthetic dataset generation, checkpoint inference,
// and the full command-line front end as a callable.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "mulvit/analysis.hpp"
#include "mulvit/checkpoint.hpp"
#include "mulvit/cli.hpp"
#include "mulvit/dataset.hpp"
#include "mulvit/metrics.hpp"
#include "mulvit/models.hpp"
#include "mulvit/rssi.hpp"
#include "mulvit/scene.hpp"
#include "mulvit/trainer.hpp"

namespace py = pybind11;
using namespace mulvit;

namespace {

using DArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using IArray = py::array_t<int64_t, py::array::c_style | py::array::forcecast>;

std::vector<double> to_vec(const DArray& a) {
  return {a.data(), a.data() + a.size()};
}

py::array_t<double> from_vec(const std::vector<double>& v) {
  py::array_t<double> out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

py::array_t<int64_t> from_vec_i64(const std::vector<int64_t>& v) {
  py::array_t<int64_t> out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

py::dict report_to_dict(const MetricsReport& r) {
  py::dict d;
  d["rmse_db"] = r.rmse_db;
  d["mae_db"] = r.mae_db;
  d["pearson_r"] = r.pearson_r ? py::cast(*r.pearson_r) : py::none();
  d["r_squared"] = r.r_squared ? py::cast(*r.r_squared) : py::none();
  d["coverage"] = r.coverage;
  d["threshold_db"] = r.threshold_db;
  d["n"] = r.n;
  std::vector<double> edges, fractions;
  edges.reserve(r.cdf.size());
  fractions.reserve(r.cdf.size());
  for (const auto& [e, f] : r.cdf) {
    edges.push_back(e);
    fractions.push_back(f);
  }
  d["cdf_abs_error_db"] = from_vec(edges);
  d["cdf_fraction"] = from_vec(fractions);
  return d;
}

py::dict analyze_variant(const std::string& variant) {
  const CostReport rep = analyze(preset(variant));
  py::dict d;
  d["variant"] = rep.variant;
  d["params_total"] = rep.params_total;
  d["flops_total"] = rep.flops_total;
  d["params_millions"] = rep.params_millions();
  d["flops_giga"] = rep.flops_giga();
  py::list comps;
  for (const auto& c : rep.components) {
    py::dict cd;
    cd["name"] = c.name;
    cd["params"] = c.params;
    cd["flops"] = c.flops;
    comps.append(cd);
  }
  d["components"] = comps;
  return d;
}

py::dict compute_metrics(const DArray& pred, const DArray& target, double threshold_db) {
  return report_to_dict(metrics::compute(to_vec(pred), to_vec(target), threshold_db));
}

py::dict preprocess_trace(const IArray& timestamps_us, const DArray& values_dbm,
                          const py::object& valid, double rate_in_hz, double rate_out_hz,
                          int64_t mad_window, double mad_threshold, double mad_floor_db,
                          int64_t smooth_support) {
  if (timestamps_us.size() != values_dbm.size())
    throw DataError("timestamps and values must have equal length");
  RssiTrace raw;
  raw.timestamps_us.assign(timestamps_us.data(), timestamps_us.data() + timestamps_us.size());
  raw.values_dbm = to_vec(values_dbm);
  raw.nominal_rate_hz = rate_in_hz;
  if (valid.is_none()) {
    raw.valid.assign(raw.values_dbm.size(), 1);
  } else {
    auto v = valid.cast<py::array_t<bool, py::array::c_style | py::array::forcecast>>();
    if (v.size() != values_dbm.size()) throw DataError("valid mask length mismatch");
    raw.valid.assign(v.data(), v.data() + v.size());
  }

  rssi::PreprocessConfig cfg;
  cfg.rate_in_hz = rate_in_hz;
  cfg.rate_out_hz = rate_out_hz;
  cfg.mad_window = mad_window;
  cfg.mad_threshold = mad_threshold;
  cfg.mad_floor_db = mad_floor_db;
  cfg.smooth_support = smooth_support;
  const auto res = rssi::preprocess(raw, cfg);

  py::dict d;
  d["timestamps_us"] = from_vec_i64(res.trace.timestamps_us);
  d["values_dbm"] = from_vec(res.trace.values_dbm);
  d["rate_hz"] = res.trace.nominal_rate_hz;
  d["stages"] = res.trace.stages;
  d["flagged"] = res.flagged;
  d["dropped_tail"] = res.dropped_tail;
  d["trend_r"] = res.trend_r;
  d["trend_in_band"] = res.trend_in_band;
  return d;
}

py::dict generate(const std::string& out_dir, int64_t frames, uint64_t seed, int64_t width,
                  int64_t height, double fps) {
  SceneSpec spec = default_scene();
  spec.seed = seed;
  scene::DatasetOptions opts;
  opts.width = width;
  opts.height = height;
  opts.fps = fps;
  opts.preprocess.rate_in_hz = 2.0 * fps;  // signal is sampled at twice the frame rate
  opts.preprocess.rate_out_hz = fps;
  DatasetSummary s;
  {
    py::gil_scoped_release release;
    s = scene::generate_dataset(spec, frames, out_dir, opts);
  }
  py::dict d;
  d["frames"] = s.frames;
  d["cameras"] = s.cameras;
  d["samples"] = s.samples;
  d["dropped_pairs"] = s.dropped_pairs;
  d["flagged"] = s.flagged;
  d["trend_r"] = s.trend_r;
  d["blind_fraction"] = s.blind_fraction;
  d["manifest_path"] = s.manifest_path;
  return d;
}

py::dict dataset_info(const std::string& data_dir) {
  LoadedDataset ds;
  {
    py::gil_scoped_release release;
    ds = load_dataset(data_dir);
  }
  py::dict d;
  d["samples"] = static_cast<int64_t>(ds.samples.size());
  d["cameras"] = ds.cameras;
  d["channels"] = ds.channels;
  d["height"] = ds.height;
  d["width"] = ds.width;
  std::vector<double> labels;
  std::vector<int64_t> stamps;
  labels.reserve(ds.samples.size());
  for (const auto& s : ds.samples) {
    labels.push_back(s.label_dbm);
    stamps.push_back(s.timestamp_us);
  }
  d["labels_dbm"] = from_vec(labels);
  d["timestamps_us"] = from_vec_i64(stamps);
  return d;
}

py::dict predict(const std::string& checkpoint_path, const std::string& data_dir,
                 const std::string& split) {
  Checkpoint ck;
  LoadedDataset ds;
  EvalResult ev;
  {
    py::gil_scoped_release release;
    ck = load_checkpoint(checkpoint_path);
    ds = load_dataset(data_dir);
    split_dataset(ds, ck.config);
    ev = evaluate(ck.spec, ck.params, ds, split, ck.normalizer, ck.config.camera_index);
  }
  py::dict d;
  d["pred_dbm"] = from_vec(ev.pred_dbm);
  d["label_dbm"] = from_vec(ev.label_dbm);
  d["report"] = report_to_dict(ev.report);
  return d;
}

py::dict run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  int code = 0;
  {
    py::gil_scoped_release release;
    code = cli::run(args, out, err);
  }
  py::dict d;
  d["code"] = code;
  d["stdout"] = out.str();
  d["stderr"] = err.str();
  return d;
}

}  // namespace

PYBIND11_MODULE(_mulvit, m) {
  m.doc() = "Multi-view signal-strength estimation: cost analysis, signal "
            "conditioning, synthetic scenes, training, and evaluation.";

  m.def("preset_names", &preset_names, "Names of the built-in model presets.");
  m.def("analyze", &analyze_variant, py::arg("variant"),
        "Exact parameter and forward-FLOP counts for a named model preset.");
  m.def("compute_metrics", &compute_metrics, py::arg("pred_dbm"), py::arg("target_dbm"),
        py::arg("threshold_db") = 3.0,
        "RMSE/MAE/Pearson r/R^2/coverage and the absolute-error CDF, all in dB.");
  m.def("preprocess", &preprocess_trace, py::arg("timestamps_us"), py::arg("values_dbm"),
        py::arg("valid") = py::none(), py::arg("rate_in_hz") = 40.0,
        py::arg("rate_out_hz") = 20.0, py::arg("mad_window") = 40,
        py::arg("mad_threshold") = 5.0, py::arg("mad_floor_db") = 0.25,
        py::arg("smooth_support") = 4,
        "Condition a raw signal trace: interpolate, reject outliers (rolling "
        "median/MAD), Gaussian smooth, and pair-average downsample to half rate.");
  m.def("generate_dataset", &generate, py::arg("out_dir"), py::arg("frames"),
        py::arg("seed") = 1, py::arg("width") = 64, py::arg("height") = 48,
        py::arg("fps") = 20.0,
        "Render the default two-camera scene to frame blobs plus a conditioned, "
        "aligned label manifest. Byte-identical for identical arguments.");
  m.def("dataset_info", &dataset_info, py::arg("data_dir"),
        "Geometry, labels, and timestamps of an on-disk dataset.");
  m.def("predict", &predict, py::arg("checkpoint"), py::arg("data_dir"),
        py::arg("split") = "test",
        "Run a trained checkpoint over one split of a dataset; returns "
        "predictions, labels, and a metrics report (dBm).");
  m.def("run_cli", &run_cli, py::arg("args"),
        "Invoke the command-line front end (gen / preprocess / train / eval / "
        "analyze) in-process; returns {code, stdout, stderr}.");
}
