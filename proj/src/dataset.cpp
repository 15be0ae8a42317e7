#include "mulvit/dataset.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "frame blob and checkpoint IO assume a little-endian host");
static_assert(sizeof(float) == 4);

namespace mulvit {

namespace {

constexpr char kMagic[4] = {'M', 'V', 'T', 'F'};
constexpr uint8_t kVersion = 1;

void write_u32(std::ofstream& f, uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint32_t read_u32(std::ifstream& f, const std::string& path) {
  uint32_t v = 0;
  f.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!f) throw IoError("truncated frame blob: " + path);
  return v;
}

}  // namespace

void write_frame_blob(const std::string& path, const TensorT<float>& image) {
  const Shape& s = image.shape();
  if (s.size() != 3) throw ShapeError("frame blob expects [C,H,W], got " + shape_str(s));
  for (float v : image.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) {
      throw ContractError("frame blob values must lie in [0,1]");
    }
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(kMagic, 4);
  f.put(static_cast<char>(kVersion));
  write_u32(f, static_cast<uint32_t>(s[0]));
  write_u32(f, static_cast<uint32_t>(s[1]));
  write_u32(f, static_cast<uint32_t>(s[2]));
  f.write(reinterpret_cast<const char*>(image.values().data()),
          static_cast<std::streamsize>(image.values().size() * sizeof(float)));
  if (!f) throw IoError("write failed: " + path);
}

TensorT<float> read_frame_blob(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0) {
    throw DataError("not a frame blob (bad magic): " + path);
  }
  const int version = f.get();
  if (version != kVersion) {
    throw DataError("unsupported frame blob version " + std::to_string(version) + ": " + path);
  }
  const uint32_t c = read_u32(f, path);
  const uint32_t h = read_u32(f, path);
  const uint32_t w = read_u32(f, path);
  if (c == 0 || h == 0 || w == 0 || static_cast<uint64_t>(c) * h * w > (1u << 28)) {
    throw DataError("implausible frame blob extents: " + path);
  }
  std::vector<float> data(static_cast<size_t>(c) * h * w);
  f.read(reinterpret_cast<char*>(data.data()),
         static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!f) throw IoError("truncated frame blob: " + path);
  return TensorT<float>::from_data({static_cast<int64_t>(c), static_cast<int64_t>(h),
                                    static_cast<int64_t>(w)},
                                   std::move(data));
}

TensorT<float> read_pnm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);

  auto next_token = [&]() -> std::string {
    std::string tok;
    int ch;
    while ((ch = f.get()) != EOF) {
      if (ch == '#') {  // comment runs to end of line
        while ((ch = f.get()) != EOF && ch != '\n') {
        }
        continue;
      }
      if (std::isspace(ch)) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(static_cast<char>(ch));
    }
    if (tok.empty()) throw DataError("truncated pnm header: " + path);
    return tok;
  };

  const std::string magic = next_token();
  int64_t channels = 0;
  if (magic == "P5") {
    channels = 1;
  } else if (magic == "P6") {
    channels = 3;
  } else {
    throw DataError("unsupported pnm magic '" + magic + "' (want binary P5/P6): " + path);
  }
  const int64_t w = std::stoll(next_token());
  const int64_t h = std::stoll(next_token());
  const int64_t maxval = std::stoll(next_token());
  if (w <= 0 || h <= 0) throw DataError("bad pnm dimensions: " + path);
  if (maxval <= 0 || maxval > 255) {
    throw DataError("pnm maxval " + std::to_string(maxval) + " unsupported (need <= 255): " + path);
  }

  std::vector<unsigned char> raw(static_cast<size_t>(w) * h * channels);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!f) throw IoError("truncated pnm pixel data: " + path);

  // PNM interleaves channels per pixel; the tensor is planar [C,H,W].
  std::vector<float> data(raw.size());
  const float scale = 1.0f / static_cast<float>(maxval);
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t c = 0; c < channels; ++c) {
        data[static_cast<size_t>((c * h + y) * w + x)] =
            scale * static_cast<float>(raw[static_cast<size_t>((y * w + x) * channels + c)]);
      }
    }
  }
  return TensorT<float>::from_data({channels, h, w}, std::move(data));
}

LoadedDataset load_dataset(const std::string& dir, bool normalize) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  const fs::path manifest_path = root / "manifest.json";
  std::ifstream mf(manifest_path);
  if (!mf) throw IoError("cannot open manifest: " + manifest_path.string());

  nlohmann::json m;
  try {
    mf >> m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }

  if (!m.contains("format_version") || m["format_version"].get<int>() != 1) {
    throw DataError("manifest format_version mismatch (want 1): " + manifest_path.string());
  }

  LoadedDataset ds;
  ds.cameras = m.at("cameras").get<int64_t>();
  if (ds.cameras < 1) throw DataError("manifest declares no cameras");

  for (const auto& js : m.at("samples")) {
    LoadedSample sample;
    sample.timestamp_us = js.at("t").get<int64_t>();
    sample.label_dbm = js.at("label").get<double>();
    sample.split = js.value("split", "");
    const auto& refs = js.at("frames");
    if (static_cast<int64_t>(refs.size()) != ds.cameras) {
      throw DataError("sample at t=" + std::to_string(sample.timestamp_us) +
                      " has wrong view count");
    }
    for (const auto& ref : refs) {
      const fs::path p = root / ref.get<std::string>();
      if (!fs::exists(p)) throw DataError("manifest references missing file: " + p.string());
      TensorT<float> img = read_frame_blob(p.string());
      if (ds.channels == 0) {
        ds.channels = img.shape()[0];
        ds.height = img.shape()[1];
        ds.width = img.shape()[2];
      } else if (img.shape()[0] != ds.channels || img.shape()[1] != ds.height ||
                 img.shape()[2] != ds.width) {
        throw DataError("inconsistent frame geometry at " + p.string());
      }
      if (normalize) {
        float* p = img.data();
        for (size_t i = 0; i < img.values().size(); ++i) p[i] = (p[i] - 0.5f) / 0.5f;
      }
      sample.views.push_back(std::move(img));
    }
    ds.samples.push_back(std::move(sample));
  }
  if (ds.samples.empty()) throw DataError("manifest has no samples: " + manifest_path.string());
  return ds;
}

}  // namespace mulvit
