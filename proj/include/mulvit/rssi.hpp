#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mulvit/common.hpp"

namespace mulvit {

/// A timestamped RSSI series. Timestamps are microseconds, strictly
/// increasing; `valid[i] == 0` marks a dropped/unusable reading whose value
/// is meaningless until interpolated. `stages` records, in application
/// order, every conditioning stage the trace has passed through.
struct RssiTrace {
  std::vector<int64_t> timestamps_us;
  std::vector<double> values_dbm;
  std::vector<uint8_t> valid;
  double nominal_rate_hz = 40.0;
  std::vector<std::string> stages;

  size_t size() const { return timestamps_us.size(); }
  void validate() const;  // consistent lengths, strictly increasing timestamps
};

struct OutlierResult {
  RssiTrace trace;                    // flagged samples replaced by interpolation
  std::vector<int64_t> flagged;       // indices that were rejected
};

struct DownsampleResult {
  RssiTrace trace;
  int64_t dropped_tail = 0;           // samples discarded from an odd-length input
};

/// One camera's frame timeline: parallel arrays of timestamps and frame
/// payload references (paths relative to the dataset root).
struct FrameIndex {
  std::vector<int64_t> timestamps_us;
  std::vector<std::string> refs;
};

struct PairedSample {
  std::vector<std::string> frame_refs;  // one per camera, camera order fixed
  int64_t timestamp_us = 0;             // camera-0 frame timestamp
  double label_dbm = 0.0;
  std::string split;                    // "", "train", "val" or "test"
};

struct PairedDataset {
  std::vector<PairedSample> samples;
  int64_t cameras = 0;
  int64_t dropped = 0;                  // camera-0 frames with no complete match
};

namespace rssi {

/// Linear interpolation of invalid samples in time; boundary gaps hold the
/// nearest valid value. A trace with zero valid samples is a DataError.
/// Idempotent on fully-valid traces.
RssiTrace interpolate_missing(const RssiTrace& in);

/// Hampel-style rejection: over a centered window (truncated at the edges)
/// compute the median m and the median absolute deviation; samples with
/// |x - m| > threshold * max(mad, mad_floor_db) are invalidated and then
/// re-interpolated. The floor keeps near-constant stretches from rejecting
/// everything. Requires window >= 3.
OutlierResult remove_outliers_mad(const RssiTrace& in, int64_t window = 40,
                                  double threshold = 5.0, double mad_floor_db = 0.25);

/// Truncated Gaussian kernel with sigma = support/4 and radius
/// ceil(support/2) (5 taps for support 4), renormalized over the taps that
/// fall inside the trace so edges are unbiased. Requires support >= 1.
RssiTrace gaussian_smooth(const RssiTrace& in, int64_t support = 4);

/// Halves the rate by averaging non-overlapping pairs; both values and
/// timestamps are averaged. An odd trailing sample is dropped and counted.
DownsampleResult downsample_pair_average(const RssiTrace& in);

/// Pearson correlation between two equally-long traces (typically the
/// interpolated-then-downsampled raw series against the fully conditioned
/// one). Throws UndefinedMetricError on zero variance.
double trend_check(const RssiTrace& a, const RssiTrace& b);

/// Pairs frames across all cameras with the conditioned RSSI stream.
/// Camera 0 supplies the reference timeline: for each of its frames, every
/// other camera must have a frame within `tolerance_us`, and the nearest
/// RSSI sample must also lie within `tolerance_us`; otherwise the frame is
/// dropped (and counted). An empty result is a DataError.
PairedDataset align_frames_rssi(const std::vector<FrameIndex>& cameras, const RssiTrace& rssi,
                                int64_t tolerance_us = 25000);

struct PreprocessConfig {
  double rate_in_hz = 40.0;
  double rate_out_hz = 20.0;   // must equal rate_in/2
  int64_t mad_window = 40;
  double mad_threshold = 5.0;
  double mad_floor_db = 0.25;
  int64_t smooth_support = 4;
  double trend_band_lo = 0.90;
  double trend_band_hi = 0.95;
  void validate() const;
};

struct PreprocessResult {
  RssiTrace trace;             // conditioned, at rate_out
  int64_t flagged = 0;         // outliers rejected
  int64_t dropped_tail = 0;    // odd-tail samples lost to downsampling
  double trend_r = 0.0;        // conditioned vs. lightly-touched reference
  bool trend_in_band = false;
};

/// Full conditioning chain: interpolate -> outlier rejection -> smooth ->
/// pair-average downsample, plus the trend correlation against the
/// interpolated-only reference downsampled the same way.
PreprocessResult preprocess(const RssiTrace& raw, const PreprocessConfig& cfg = {});

/// CSV with header `timestamp_us,rssi_dbm`; an empty value field marks an
/// invalid sample. Leading `#` lines are ignored. Malformed rows raise
/// DataError naming the 1-based line number.
RssiTrace read_csv(const std::string& path, double nominal_rate_hz = 40.0);

/// Writes the same layout; invalid samples get an empty value field. A
/// non-empty `config_echo` is emitted first as a `# config:` comment line.
void write_csv(const std::string& path, const RssiTrace& trace,
               const std::string& config_echo = "");

}  // namespace rssi

}  // namespace mulvit
