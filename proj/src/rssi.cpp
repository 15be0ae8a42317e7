#include "mulvit/rssi.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "mulvit/metrics.hpp"

namespace mulvit {

void RssiTrace::validate() const {
  if (values_dbm.size() != timestamps_us.size() || valid.size() != timestamps_us.size()) {
    throw ShapeError("rssi trace: parallel arrays disagree in length");
  }
  if (nominal_rate_hz <= 0.0) throw ParameterError("rssi trace: nominal rate must be positive");
  for (size_t i = 1; i < timestamps_us.size(); ++i) {
    if (timestamps_us[i] <= timestamps_us[i - 1]) {
      throw DataError("rssi trace: timestamps not strictly increasing at index " +
                      std::to_string(i));
    }
  }
}

namespace rssi {

namespace {

int64_t count_valid(const RssiTrace& t) {
  int64_t n = 0;
  for (uint8_t v : t.valid) n += (v != 0);
  return n;
}

}  // namespace

RssiTrace interpolate_missing(const RssiTrace& in) {
  in.validate();
  if (in.size() == 0) throw DataError("interpolate_missing: empty trace");
  if (count_valid(in) == 0) throw DataError("interpolate_missing: no valid samples");

  RssiTrace out = in;
  const int64_t n = static_cast<int64_t>(in.size());

  // Positions of valid samples, in order.
  std::vector<int64_t> anchors;
  anchors.reserve(in.size());
  for (int64_t i = 0; i < n; ++i) {
    if (in.valid[i]) anchors.push_back(i);
  }

  for (int64_t i = 0; i < n; ++i) {
    if (in.valid[i]) continue;
    // First anchor at or after i.
    auto it = std::lower_bound(anchors.begin(), anchors.end(), i);
    if (it == anchors.begin()) {
      out.values_dbm[i] = in.values_dbm[anchors.front()];  // leading gap: hold
    } else if (it == anchors.end()) {
      out.values_dbm[i] = in.values_dbm[anchors.back()];   // trailing gap: hold
    } else {
      const int64_t hi = *it;
      const int64_t lo = *(it - 1);
      const double t = static_cast<double>(in.timestamps_us[i] - in.timestamps_us[lo]) /
                       static_cast<double>(in.timestamps_us[hi] - in.timestamps_us[lo]);
      out.values_dbm[i] = in.values_dbm[lo] + t * (in.values_dbm[hi] - in.values_dbm[lo]);
    }
    out.valid[i] = 1;
  }
  out.stages.push_back("interpolate_missing");
  return out;
}

OutlierResult remove_outliers_mad(const RssiTrace& in, int64_t window, double threshold,
                                  double mad_floor_db) {
  in.validate();
  if (window < 3) throw ParameterError("remove_outliers_mad: window must be >= 3");
  if (threshold <= 0.0) throw ParameterError("remove_outliers_mad: threshold must be positive");
  if (mad_floor_db <= 0.0) throw ParameterError("remove_outliers_mad: mad floor must be positive");

  const int64_t n = static_cast<int64_t>(in.size());
  OutlierResult res;
  RssiTrace work = in;

  std::vector<double> buf;
  buf.reserve(static_cast<size_t>(window));
  auto median_of = [](std::vector<double>& v) {
    std::sort(v.begin(), v.end());
    const size_t m = v.size() / 2;
    return (v.size() % 2) ? v[m] : 0.5 * (v[m - 1] + v[m]);
  };

  for (int64_t i = 0; i < n; ++i) {
    if (!in.valid[i]) continue;  // already missing; interpolation will fill it
    const int64_t lo = std::max<int64_t>(0, i - window / 2);
    const int64_t hi = std::min<int64_t>(n, i + (window - window / 2));
    buf.clear();
    for (int64_t j = lo; j < hi; ++j) {
      if (in.valid[j]) buf.push_back(in.values_dbm[j]);
    }
    if (buf.size() < 3) continue;  // not enough context to judge
    const double med = median_of(buf);
    for (double& x : buf) x = std::fabs(x - med);
    const double mad = median_of(buf);
    const double scale = std::max(mad, mad_floor_db);
    if (std::fabs(in.values_dbm[i] - med) > threshold * scale) {
      work.valid[i] = 0;
      res.flagged.push_back(i);
    }
  }

  // Rejected readings are re-filled from their neighbors; the stage tag for
  // the internal interpolation pass is folded into this stage's own tag.
  RssiTrace filled = interpolate_missing(work);
  filled.stages = in.stages;
  filled.stages.push_back("remove_outliers_mad");
  res.trace = std::move(filled);
  return res;
}

RssiTrace gaussian_smooth(const RssiTrace& in, int64_t support) {
  in.validate();
  if (support < 1) throw ParameterError("gaussian_smooth: support must be >= 1");
  if (in.size() == 0) throw DataError("gaussian_smooth: empty trace");

  const double sigma = static_cast<double>(support) / 4.0;
  const int64_t radius = (support + 1) / 2;  // ceil(support/2)
  std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
  for (int64_t j = -radius; j <= radius; ++j) {
    kernel[static_cast<size_t>(j + radius)] =
        std::exp(-static_cast<double>(j * j) / (2.0 * sigma * sigma));
  }

  const int64_t n = static_cast<int64_t>(in.size());
  RssiTrace out = in;
  for (int64_t i = 0; i < n; ++i) {
    double acc = 0.0, wsum = 0.0;
    for (int64_t j = -radius; j <= radius; ++j) {
      const int64_t k = i + j;
      if (k < 0 || k >= n || !in.valid[k]) continue;
      const double w = kernel[static_cast<size_t>(j + radius)];
      acc += w * in.values_dbm[k];
      wsum += w;
    }
    if (wsum == 0.0) {
      out.valid[i] = 0;  // isolated invalid neighborhood; keep marked missing
      continue;
    }
    out.values_dbm[i] = acc / wsum;
  }
  out.stages.push_back("gaussian_smooth");
  return out;
}

DownsampleResult downsample_pair_average(const RssiTrace& in) {
  in.validate();
  if (in.size() < 2) throw DataError("downsample_pair_average: need at least one pair");

  DownsampleResult res;
  const int64_t pairs = static_cast<int64_t>(in.size()) / 2;
  res.dropped_tail = static_cast<int64_t>(in.size()) - 2 * pairs;

  RssiTrace out;
  out.nominal_rate_hz = in.nominal_rate_hz / 2.0;
  out.stages = in.stages;
  out.stages.push_back("downsample_pair_average");
  out.timestamps_us.reserve(pairs);
  out.values_dbm.reserve(pairs);
  out.valid.reserve(pairs);
  for (int64_t p = 0; p < pairs; ++p) {
    const int64_t a = 2 * p, b = 2 * p + 1;
    out.timestamps_us.push_back((in.timestamps_us[a] + in.timestamps_us[b]) / 2);
    out.values_dbm.push_back(0.5 * (in.values_dbm[a] + in.values_dbm[b]));
    out.valid.push_back(in.valid[a] && in.valid[b] ? 1 : 0);
  }
  res.trace = std::move(out);
  return res;
}

double trend_check(const RssiTrace& a, const RssiTrace& b) {
  if (a.size() != b.size()) {
    throw ShapeError("trend_check: traces differ in length (" + std::to_string(a.size()) +
                     " vs " + std::to_string(b.size()) + ")");
  }
  return metrics::pearson_r(a.values_dbm, b.values_dbm);
}

void PreprocessConfig::validate() const {
  if (rate_in_hz <= 0.0 || rate_out_hz <= 0.0) {
    throw ParameterError("preprocess: rates must be positive");
  }
  if (std::fabs(rate_in_hz - 2.0 * rate_out_hz) > 1e-9) {
    throw ParameterError("preprocess: output rate must be half the input rate");
  }
  if (mad_window < 3) throw ParameterError("preprocess: mad window must be >= 3");
  if (mad_threshold <= 0.0) throw ParameterError("preprocess: mad threshold must be positive");
  if (smooth_support < 1) throw ParameterError("preprocess: smoothing support must be >= 1");
  if (!(trend_band_lo < trend_band_hi)) {
    throw ParameterError("preprocess: trend band must satisfy lo < hi");
  }
}

PreprocessResult preprocess(const RssiTrace& raw, const PreprocessConfig& cfg) {
  cfg.validate();
  raw.validate();
  if (std::fabs(raw.nominal_rate_hz - cfg.rate_in_hz) > 1e-9) {
    throw DataError("preprocess: trace rate " + std::to_string(raw.nominal_rate_hz) +
                    " does not match configured input rate");
  }

  PreprocessResult res;
  RssiTrace interp = interpolate_missing(raw);
  OutlierResult rejected =
      remove_outliers_mad(interp, cfg.mad_window, cfg.mad_threshold, cfg.mad_floor_db);
  res.flagged = static_cast<int64_t>(rejected.flagged.size());
  RssiTrace smoothed = gaussian_smooth(rejected.trace, cfg.smooth_support);
  DownsampleResult down = downsample_pair_average(smoothed);
  res.dropped_tail = down.dropped_tail;
  res.trace = std::move(down.trace);

  // Reference for the sanity correlation: interpolation only, downsampled
  // the same way, so the comparison isolates what rejection+smoothing did.
  DownsampleResult ref = downsample_pair_average(interp);
  res.trend_r = trend_check(ref.trace, res.trace);
  res.trend_in_band = res.trend_r >= cfg.trend_band_lo && res.trend_r <= cfg.trend_band_hi;
  return res;
}

PairedDataset align_frames_rssi(const std::vector<FrameIndex>& cameras, const RssiTrace& rssi,
                                int64_t tolerance_us) {
  if (cameras.size() < 1) throw ParameterError("align: need at least one camera");
  if (tolerance_us <= 0) throw ParameterError("align: tolerance must be positive");
  rssi.validate();
  if (rssi.size() == 0) throw DataError("align: empty rssi trace");
  for (size_t k = 0; k < cameras.size(); ++k) {
    const auto& cam = cameras[k];
    if (cam.timestamps_us.size() != cam.refs.size()) {
      throw ShapeError("align: camera " + std::to_string(k) + " timestamps/refs length mismatch");
    }
    for (size_t i = 1; i < cam.timestamps_us.size(); ++i) {
      if (cam.timestamps_us[i] <= cam.timestamps_us[i - 1]) {
        throw DataError("align: camera " + std::to_string(k) + " timestamps not increasing");
      }
    }
  }

  // Nearest element of a sorted series; returns index or -1 when the series
  // is empty.
  auto nearest = [](const std::vector<int64_t>& ts, int64_t t) -> int64_t {
    if (ts.empty()) return -1;
    auto it = std::lower_bound(ts.begin(), ts.end(), t);
    if (it == ts.begin()) return 0;
    if (it == ts.end()) return static_cast<int64_t>(ts.size()) - 1;
    const int64_t hi = static_cast<int64_t>(it - ts.begin());
    const int64_t lo = hi - 1;
    return (t - ts[lo] <= ts[hi] - t) ? lo : hi;
  };

  PairedDataset ds;
  ds.cameras = static_cast<int64_t>(cameras.size());
  const auto& ref_cam = cameras[0];
  for (size_t i = 0; i < ref_cam.timestamps_us.size(); ++i) {
    const int64_t t = ref_cam.timestamps_us[i];
    PairedSample sample;
    sample.timestamp_us = t;
    sample.frame_refs.push_back(ref_cam.refs[i]);
    bool ok = true;
    for (size_t k = 1; k < cameras.size() && ok; ++k) {
      const int64_t j = nearest(cameras[k].timestamps_us, t);
      if (j < 0 || std::llabs(cameras[k].timestamps_us[j] - t) > tolerance_us) {
        ok = false;
      } else {
        sample.frame_refs.push_back(cameras[k].refs[j]);
      }
    }
    if (ok) {
      const int64_t j = nearest(rssi.timestamps_us, t);
      if (j < 0 || std::llabs(rssi.timestamps_us[j] - t) > tolerance_us || !rssi.valid[j]) {
        ok = false;
      } else {
        sample.label_dbm = rssi.values_dbm[j];
      }
    }
    if (ok) {
      ds.samples.push_back(std::move(sample));
    } else {
      ++ds.dropped;
    }
  }
  if (ds.samples.empty()) {
    throw DataError("align: no frame/rssi pairs within tolerance (" + std::to_string(ds.dropped) +
                    " frames dropped)");
  }
  return ds;
}

RssiTrace read_csv(const std::string& path, double nominal_rate_hz) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path);

  RssiTrace t;
  t.nominal_rate_hz = nominal_rate_hz;
  std::string line;
  int64_t lineno = 0;
  bool saw_header = false;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') continue;
    if (!saw_header) {
      if (line != "timestamp_us,rssi_dbm") {
        throw DataError(path + ":" + std::to_string(lineno) +
                        ": expected header 'timestamp_us,rssi_dbm', got '" + line + "'");
      }
      saw_header = true;
      continue;
    }
    const size_t comma = line.find(',');
    if (comma == std::string::npos) {
      throw DataError(path + ":" + std::to_string(lineno) + ": missing comma");
    }
    const std::string ts_field = line.substr(0, comma);
    const std::string val_field = line.substr(comma + 1);
    int64_t ts = 0;
    try {
      size_t used = 0;
      ts = std::stoll(ts_field, &used);
      if (used != ts_field.size()) throw std::invalid_argument("trailing junk");
    } catch (const std::exception&) {
      throw DataError(path + ":" + std::to_string(lineno) + ": bad timestamp '" + ts_field + "'");
    }
    double val = 0.0;
    uint8_t ok = 0;
    if (!val_field.empty()) {
      try {
        size_t used = 0;
        val = std::stod(val_field, &used);
        if (used != val_field.size()) throw std::invalid_argument("trailing junk");
      } catch (const std::exception&) {
        throw DataError(path + ":" + std::to_string(lineno) + ": bad value '" + val_field + "'");
      }
      ok = 1;
    }
    t.timestamps_us.push_back(ts);
    t.values_dbm.push_back(val);
    t.valid.push_back(ok);
  }
  if (!saw_header) throw DataError(path + ": empty file (no header)");
  t.validate();
  return t;
}

void write_csv(const std::string& path, const RssiTrace& trace, const std::string& config_echo) {
  trace.validate();
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for writing: " + path);
  if (!config_echo.empty()) f << "# config: " << config_echo << "\n";
  f << "timestamp_us,rssi_dbm\n";
  char buf[96];
  for (size_t i = 0; i < trace.size(); ++i) {
    if (trace.valid[i]) {
      std::snprintf(buf, sizeof(buf), "%lld,%.17g\n",
                    static_cast<long long>(trace.timestamps_us[i]), trace.values_dbm[i]);
    } else {
      std::snprintf(buf, sizeof(buf), "%lld,\n", static_cast<long long>(trace.timestamps_us[i]));
    }
    f << buf;
  }
  if (!f) throw IoError("write failed: " + path);
}

}  // namespace rssi
}  // namespace mulvit
