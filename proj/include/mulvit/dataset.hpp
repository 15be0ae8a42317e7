#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mulvit/tensor.hpp"

namespace mulvit {

/// Frame payload: magic "MVTF", one version byte, three u32 little-endian
/// extents (C,H,W), then C*H*W f32 little-endian values in [0,1].
void write_frame_blob(const std::string& path, const TensorT<float>& image);
TensorT<float> read_frame_blob(const std::string& path);

/// Binary PGM (P5) or PPM (P6) with maxval <= 255, scaled to [0,1];
/// returns [1,H,W] or [3,H,W]. Provided for ingesting real photos.
TensorT<float> read_pnm(const std::string& path);

struct LoadedSample {
  std::vector<TensorT<float>> views;  // one [C,H,W] tensor per camera
  double label_dbm = 0.0;
  int64_t timestamp_us = 0;
  std::string split;                  // filled by the splitter
};

struct LoadedDataset {
  std::vector<LoadedSample> samples;  // manifest (chronological) order
  int64_t cameras = 0;
  int64_t channels = 0, height = 0, width = 0;
};

/// Reads `<dir>/manifest.json` and every referenced frame into memory.
/// `normalize` applies the fixed (x - 0.5)/0.5 input normalization, taking
/// pixel values from [0,1] to [-1,1]. Missing files and version mismatches
/// are DataErrors naming the offender.
LoadedDataset load_dataset(const std::string& dir, bool normalize = true);

}  // namespace mulvit
