#include "mulvit/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "mulvit/dataset.hpp"

namespace mulvit {

namespace {

constexpr double kWalkMargin = 0.3;  // station keeps this far from walls/obstacles
constexpr double kMarkerRadius = 0.15;

bool point_in_rect(double x, double y, const Obstacle& o) {
  return x >= o.x0 && x <= o.x1 && y >= o.y0 && y <= o.y1;
}

bool point_in_open_rect(double x, double y, const Obstacle& o) {
  return x > o.x0 && x < o.x1 && y > o.y0 && y < o.y1;
}

// Unclamped slab interval of p + t(q-p) inside the rectangle. `hit` is
// false when the infinite parameter interval misses [0,1] entirely.
struct SlabInterval {
  double t0 = 0.0, t1 = 0.0;
  bool hit = false;
};

SlabInterval slab_interval(double px, double py, double qx, double qy, const Obstacle& o) {
  double tmin = -std::numeric_limits<double>::infinity();
  double tmax = std::numeric_limits<double>::infinity();
  const double d[2] = {qx - px, qy - py};
  const double p[2] = {px, py};
  const double lo[2] = {o.x0, o.y0};
  const double hi[2] = {o.x1, o.y1};
  for (int axis = 0; axis < 2; ++axis) {
    if (std::fabs(d[axis]) < 1e-15) {
      if (p[axis] < lo[axis] || p[axis] > hi[axis]) return {};
      continue;
    }
    double ta = (lo[axis] - p[axis]) / d[axis];
    double tb = (hi[axis] - p[axis]) / d[axis];
    if (ta > tb) std::swap(ta, tb);
    tmin = std::max(tmin, ta);
    tmax = std::min(tmax, tb);
  }
  if (tmin > tmax || tmax < 0.0 || tmin > 1.0) return {};
  return {tmin, tmax, true};
}

bool in_fov(const CameraPose& cam, double x, double y) {
  const double dx = x - cam.x;
  const double dy = y - cam.y;
  const double len = std::hypot(dx, dy);
  if (len < 1e-12) return true;  // at the camera itself
  const double yaw = cam.yaw_deg * M_PI / 180.0;
  const double cosang = (std::cos(yaw) * dx + std::sin(yaw) * dy) / len;
  return cosang >= std::cos(0.5 * cam.fov_deg * M_PI / 180.0) - 1e-12;
}

}  // namespace

void SceneSpec::validate() const {
  if (room_w <= 0.0 || room_h <= 0.0) throw ParameterError("scene: room must have positive size");
  for (size_t i = 0; i < obstacles.size(); ++i) {
    const Obstacle& o = obstacles[i];
    if (!(o.x0 < o.x1 && o.y0 < o.y1)) {
      throw ParameterError("scene: obstacle " + std::to_string(i) + " has inverted corners");
    }
    if (o.x0 < 0.0 || o.y0 < 0.0 || o.x1 > room_w || o.y1 > room_h) {
      throw ParameterError("scene: obstacle " + std::to_string(i) + " leaves the room");
    }
  }
  auto inside_room = [&](double x, double y) {
    return x >= 0.0 && x <= room_w && y >= 0.0 && y <= room_h;
  };
  if (!inside_room(ap_x, ap_y)) throw ParameterError("scene: access point outside the room");
  for (const Obstacle& o : obstacles) {
    if (point_in_open_rect(ap_x, ap_y, o)) {
      throw ParameterError("scene: access point inside an obstacle");
    }
  }
  if (cameras.empty()) throw ParameterError("scene: need at least one camera");
  for (size_t k = 0; k < cameras.size(); ++k) {
    const CameraPose& c = cameras[k];
    if (!inside_room(c.x, c.y)) {
      throw ParameterError("scene: camera " + std::to_string(k) + " outside the room");
    }
    for (const Obstacle& o : obstacles) {
      if (point_in_open_rect(c.x, c.y, o)) {
        throw ParameterError("scene: camera " + std::to_string(k) + " inside an obstacle");
      }
    }
    if (!(c.fov_deg > 0.0 && c.fov_deg <= 180.0)) {
      throw ParameterError("scene: camera " + std::to_string(k) + " fov must be in (0, 180]");
    }
  }
  if (ref_dist_m <= 0.0) throw ParameterError("scene: reference distance must be positive");
  if (path_exp <= 0.0) throw ParameterError("scene: path exponent must be positive");
  if (wall_loss_db < 0.0) throw ParameterError("scene: wall loss must be non-negative");
  if (shadow_sigma_db < 0.0) throw ParameterError("scene: shadow sigma must be non-negative");
  if (speed_mps < 0.0) throw ParameterError("scene: speed must be non-negative");
}

SceneSpec default_scene() {
  SceneSpec s;
  s.room_w = 8.0;
  s.room_h = 6.0;
  // Two offset obstacles whose shadows (from the opposite-corner cameras)
  // are large but disjoint: each camera goes blind behind "its" obstacle
  // while the other still sees that region.
  s.obstacles = {{2.6, 0.7, 3.8, 1.7}, {4.2, 4.0, 5.4, 5.2}};
  s.ap_x = 6.9;
  s.ap_y = 0.9;
  // Corner cameras looking inward; from inside the walk margin every
  // reachable point falls inside their 90-degree wedges, so blindness
  // comes from occlusion alone.
  s.cameras = {{0.25, 0.25, 45.0, 90.0}, {7.75, 5.75, 225.0, 90.0}};
  return s;
}

namespace scene {

int segment_edge_crossings(double px, double py, double qx, double qy, const Obstacle& o) {
  const SlabInterval s = slab_interval(px, py, qx, qy, o);
  if (!s.hit) return 0;
  int n = 0;
  if (s.t0 > 0.0 && s.t0 < 1.0) ++n;
  if (s.t1 > 0.0 && s.t1 < 1.0) ++n;
  return n;
}

bool segment_blocked(double px, double py, double qx, double qy, const Obstacle& o) {
  const SlabInterval s = slab_interval(px, py, qx, qy, o);
  if (!s.hit) return false;
  const double a = std::max(s.t0, 0.0);
  const double b = std::min(s.t1, 1.0);
  if (b - a <= 1e-12) return false;
  // Midpoint strictly interior rules out edge-grazing segments.
  const double tm = 0.5 * (a + b);
  return point_in_open_rect(px + tm * (qx - px), py + tm * (qy - py), o);
}

bool sta_visible_from(const SceneSpec& spec, size_t camera, double sx, double sy) {
  if (camera >= spec.cameras.size()) throw ParameterError("camera index out of range");
  const CameraPose& cam = spec.cameras[camera];
  if (!in_fov(cam, sx, sy)) return false;
  for (const Obstacle& o : spec.obstacles) {
    if (segment_blocked(cam.x, cam.y, sx, sy, o)) return false;
  }
  return true;
}

std::vector<std::pair<double, double>> simulate_trajectory(const SceneSpec& spec, int64_t steps,
                                                           double dt_s) {
  spec.validate();
  if (steps < 1) throw ParameterError("trajectory needs at least one step");
  if (dt_s <= 0.0) throw ParameterError("trajectory step must be positive");

  auto free_at = [&](double x, double y) {
    if (x < kWalkMargin || x > spec.room_w - kWalkMargin || y < kWalkMargin ||
        y > spec.room_h - kWalkMargin) {
      return false;
    }
    for (const Obstacle& o : spec.obstacles) {
      if (x > o.x0 - kWalkMargin && x < o.x1 + kWalkMargin && y > o.y0 - kWalkMargin &&
          y < o.y1 + kWalkMargin) {
        return false;
      }
    }
    return true;
  };

  // Deterministic start: room center, else the first free cell of a coarse
  // scan.
  double x = 0.5 * spec.room_w;
  double y = 0.5 * spec.room_h;
  if (!free_at(x, y)) {
    bool found = false;
    for (double cy = kWalkMargin; cy <= spec.room_h - kWalkMargin && !found; cy += 0.25) {
      for (double cx = kWalkMargin; cx <= spec.room_w - kWalkMargin && !found; cx += 0.25) {
        if (free_at(cx, cy)) {
          x = cx;
          y = cy;
          found = true;
        }
      }
    }
    if (!found) throw SpecError("scene has no free space for the station walk");
  }

  Rng rng(Rng::mix(spec.seed, 0x74726a6bULL));
  double heading = rng.uniform(0.0, 2.0 * M_PI);
  std::vector<std::pair<double, double>> out;
  out.reserve(static_cast<size_t>(steps));
  out.emplace_back(x, y);
  const double step_len = spec.speed_mps * dt_s;
  for (int64_t i = 1; i < steps; ++i) {
    // Gentle turning keeps the path nearly ballistic between reflections,
    // which mixes over the room within a few hundred steps.
    heading += rng.normal(0.0, 0.12);
    bool moved = false;
    // Axis reflections first (x-flip, y-flip, both), then random retries.
    const double candidates[4] = {heading, M_PI - heading, -heading, heading + M_PI};
    for (double h : candidates) {
      const double nx = x + step_len * std::cos(h);
      const double ny = y + step_len * std::sin(h);
      if (free_at(nx, ny)) {
        x = nx;
        y = ny;
        heading = h;
        moved = true;
        break;
      }
    }
    for (int tries = 0; !moved && tries < 16; ++tries) {
      const double h = rng.uniform(0.0, 2.0 * M_PI);
      const double nx = x + step_len * std::cos(h);
      const double ny = y + step_len * std::sin(h);
      if (free_at(nx, ny)) {
        x = nx;
        y = ny;
        heading = h;
        moved = true;
      }
    }
    out.emplace_back(x, y);  // staying put is the last resort
  }
  return out;
}

RenderedFrame render_view(const SceneSpec& spec, size_t camera, double sx, double sy,
                          int64_t height, int64_t width) {
  spec.validate();
  if (camera >= spec.cameras.size()) throw ParameterError("camera index out of range");
  if (height <= 0 || width <= 0) throw ParameterError("render target must be positive");
  const double aspect_img = static_cast<double>(width) / static_cast<double>(height);
  const double aspect_room = spec.room_w / spec.room_h;
  if (std::fabs(aspect_img - aspect_room) > 1e-9) {
    throw ParameterError("render aspect must match the room (e.g. 64x48 for 8x6 m)");
  }

  static constexpr float kBackground[3] = {0.06f, 0.06f, 0.08f};
  static constexpr float kFree[3] = {0.52f, 0.52f, 0.55f};
  static constexpr float kObstacleFill[3] = {0.85f, 0.45f, 0.12f};
  static constexpr float kApMarker[3] = {0.15f, 0.35f, 0.95f};
  static constexpr float kStaMarker[3] = {0.95f, 0.10f, 0.10f};

  const CameraPose& cam = spec.cameras[camera];
  RenderedFrame frame;
  frame.sta_visible = sta_visible_from(spec, camera, sx, sy);
  frame.image = TensorT<float>::zeros({3, height, width});
  float* img = frame.image.data();
  const int64_t plane = height * width;

  const double px_w = spec.room_w / static_cast<double>(width);
  const double px_h = spec.room_h / static_cast<double>(height);
  for (int64_t row = 0; row < height; ++row) {
    const double wy = (static_cast<double>(row) + 0.5) * px_h;
    for (int64_t col = 0; col < width; ++col) {
      const double wx = (static_cast<double>(col) + 0.5) * px_w;

      // Ray-cast visibility: within the wedge and no *other* obstacle in
      // front. A pixel inside an obstacle stays visible through its own
      // body so the whole unoccluded footprint renders as fill.
      const Obstacle* host = nullptr;
      for (const Obstacle& o : spec.obstacles) {
        if (point_in_rect(wx, wy, o)) {
          host = &o;
          break;
        }
      }
      bool visible = in_fov(cam, wx, wy);
      for (const Obstacle& o : spec.obstacles) {
        if (!visible) break;
        if (&o == host) continue;
        if (segment_blocked(cam.x, cam.y, wx, wy, o)) visible = false;
      }

      const float* color = !visible ? kBackground : (host ? kObstacleFill : kFree);
      const double ap_d = std::hypot(wx - spec.ap_x, wy - spec.ap_y);
      if (ap_d <= kMarkerRadius) color = kApMarker;  // fixed landmark overlay
      if (frame.sta_visible && std::hypot(wx - sx, wy - sy) <= kMarkerRadius) {
        color = kStaMarker;
      }

      const int64_t idx = row * width + col;
      img[idx] = color[0];
      img[plane + idx] = color[1];
      img[2 * plane + idx] = color[2];
    }
  }
  return frame;
}

double rssi_mean(const SceneSpec& spec, double sx, double sy) {
  if (sx < 0.0 || sx > spec.room_w || sy < 0.0 || sy > spec.room_h) {
    throw ParameterError("station outside the room");
  }
  const double d = std::hypot(sx - spec.ap_x, sy - spec.ap_y);
  int walls = 0;
  for (const Obstacle& o : spec.obstacles) {
    walls += segment_edge_crossings(spec.ap_x, spec.ap_y, sx, sy, o);
  }
  return spec.p0_dbm -
         10.0 * spec.path_exp * std::log10(std::max(d, spec.ref_dist_m) / spec.ref_dist_m) -
         static_cast<double>(walls) * spec.wall_loss_db;
}

double rssi_ground_truth(const SceneSpec& spec, double sx, double sy, Rng& rng) {
  return rssi_mean(spec, sx, sy) + rng.normal(0.0, spec.shadow_sigma_db);
}

DatasetSummary generate_dataset(const SceneSpec& spec, int64_t frames, const std::string& out_dir,
                                const DatasetOptions& opts) {
  namespace fs = std::filesystem;
  spec.validate();
  opts.preprocess.validate();
  if (frames < 2) throw ParameterError("dataset needs at least two frames");
  if (opts.fps <= 0.0) throw ParameterError("fps must be positive");
  if (std::fabs(2.0 * opts.fps - opts.preprocess.rate_in_hz) > 1e-9) {
    throw ParameterError("signal rate must be twice the frame rate");
  }

  const fs::path root(out_dir);
  std::error_code ec;
  const size_t cams = spec.cameras.size();
  for (size_t k = 0; k < cams; ++k) {
    fs::create_directories(root / "frames" / ("cam" + std::to_string(k)), ec);
    if (ec) throw IoError("cannot create " + (root / "frames").string() + ": " + ec.message());
  }

  const double dt = 1.0 / opts.fps;
  const auto traj = simulate_trajectory(spec, frames, dt);
  const int64_t t0 = 1'000'000;
  const int64_t period = static_cast<int64_t>(std::llround(1e6 * dt));
  const int64_t offset = period / 4;  // signal draws at +-offset around each frame

  DatasetSummary summary;
  summary.frames = frames;
  summary.cameras = static_cast<int64_t>(cams);
  summary.blind_fraction.assign(cams, 0.0);

  // Render and persist every view; remember per-frame visibility.
  std::vector<FrameIndex> frame_index(cams);
  std::vector<std::vector<bool>> visible(cams, std::vector<bool>(static_cast<size_t>(frames)));
  char name[64];
  for (int64_t j = 0; j < frames; ++j) {
    const auto [sx, sy] = traj[static_cast<size_t>(j)];
    for (size_t k = 0; k < cams; ++k) {
      RenderedFrame rf = render_view(spec, k, sx, sy, opts.height, opts.width);
      rf.timestamp_us = t0 + j * period;
      std::snprintf(name, sizeof(name), "frames/cam%zu/f%06lld.mvtf", k,
                    static_cast<long long>(j));
      write_frame_blob((root / name).string(), rf.image);
      frame_index[k].timestamps_us.push_back(rf.timestamp_us);
      frame_index[k].refs.push_back(name);
      visible[k][static_cast<size_t>(j)] = rf.sta_visible;
      if (!rf.sta_visible) summary.blind_fraction[k] += 1.0;
    }
  }
  for (double& b : summary.blind_fraction) b /= static_cast<double>(frames);

  // Raw signal at twice the frame rate: two draws per frame step, offset so
  // pair-averaging lands exactly on frame timestamps. The station position
  // is interpolated along the walk for the off-frame instants.
  auto pos_at = [&](int64_t t) -> std::pair<double, double> {
    const double f = static_cast<double>(t - t0) / static_cast<double>(period);
    if (f <= 0.0) return traj.front();
    if (f >= static_cast<double>(frames - 1)) return traj.back();
    const int64_t j = static_cast<int64_t>(f);
    const double a = f - static_cast<double>(j);
    const auto& p = traj[static_cast<size_t>(j)];
    const auto& q = traj[static_cast<size_t>(j + 1)];
    return {p.first + a * (q.first - p.first), p.second + a * (q.second - p.second)};
  };

  Rng noise(Rng::mix(spec.seed, 0x72737369ULL));
  RssiTrace raw;
  raw.nominal_rate_hz = 2.0 * opts.fps;
  for (int64_t j = 0; j < frames; ++j) {
    for (int64_t s : {-offset, offset}) {
      const int64_t t = t0 + j * period + s;
      const auto [sx, sy] = pos_at(t);
      raw.timestamps_us.push_back(t);
      raw.values_dbm.push_back(rssi_ground_truth(spec, sx, sy, noise));
      raw.valid.push_back(1);
    }
  }
  char echo[128];
  std::snprintf(echo, sizeof(echo), "rate_hz=%g seed=%llu", raw.nominal_rate_hz,
                static_cast<unsigned long long>(spec.seed));
  rssi::write_csv((root / "rssi_40hz.csv").string(), raw, echo);

  // Labels come from the real conditioning pipeline plus alignment.
  const rssi::PreprocessResult pre = rssi::preprocess(raw, opts.preprocess);
  summary.flagged = pre.flagged;
  summary.trend_r = pre.trend_r;
  const PairedDataset paired = rssi::align_frames_rssi(frame_index, pre.trace, 25'000);
  summary.samples = static_cast<int64_t>(paired.samples.size());
  summary.dropped_pairs = paired.dropped;

  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["cameras"] = cams;
  manifest["frames"] = frames;
  manifest["width"] = opts.width;
  manifest["height"] = opts.height;
  manifest["fps"] = opts.fps;
  manifest["seed"] = spec.seed;
  manifest["scene"] = nlohmann::json::parse(scene_to_json(spec));
  manifest["preprocess"] = {{"rate_in_hz", opts.preprocess.rate_in_hz},
                            {"rate_out_hz", opts.preprocess.rate_out_hz},
                            {"mad_window", opts.preprocess.mad_window},
                            {"mad_threshold", opts.preprocess.mad_threshold},
                            {"mad_floor_db", opts.preprocess.mad_floor_db},
                            {"smooth_support", opts.preprocess.smooth_support}};
  manifest["rssi_csv"] = "rssi_40hz.csv";
  manifest["trend_r"] = pre.trend_r;
  manifest["flagged"] = pre.flagged;
  manifest["dropped_pairs"] = paired.dropped;
  nlohmann::json samples = nlohmann::json::array();
  for (const PairedSample& s : paired.samples) {
    const int64_t j = (s.timestamp_us - t0) / period;
    nlohmann::json js;
    js["t"] = s.timestamp_us;
    js["label"] = s.label_dbm;
    js["frames"] = s.frame_refs;
    js["split"] = s.split;  // empty here; training configs assign splits
    js["sta"] = {traj[static_cast<size_t>(j)].first, traj[static_cast<size_t>(j)].second};
    nlohmann::json vis = nlohmann::json::array();
    for (size_t k = 0; k < cams; ++k) vis.push_back(visible[k][static_cast<size_t>(j)] ? 1 : 0);
    js["visible"] = vis;
    samples.push_back(std::move(js));
  }
  manifest["samples"] = std::move(samples);

  const fs::path mpath = root / "manifest.json";
  std::ofstream mf(mpath);
  if (!mf) throw IoError("cannot open for writing: " + mpath.string());
  mf << manifest.dump(2) << "\n";
  if (!mf) throw IoError("write failed: " + mpath.string());
  summary.manifest_path = mpath.string();
  return summary;
}

}  // namespace scene

std::string scene_to_json(const SceneSpec& spec) {
  nlohmann::json j;
  j["room"] = {{"w", spec.room_w}, {"h", spec.room_h}};
  nlohmann::json obs = nlohmann::json::array();
  for (const Obstacle& o : spec.obstacles) {
    obs.push_back({{"x0", o.x0}, {"y0", o.y0}, {"x1", o.x1}, {"y1", o.y1}});
  }
  j["obstacles"] = std::move(obs);
  j["ap"] = {{"x", spec.ap_x}, {"y", spec.ap_y}};
  nlohmann::json cams = nlohmann::json::array();
  for (const CameraPose& c : spec.cameras) {
    cams.push_back({{"x", c.x}, {"y", c.y}, {"yaw_deg", c.yaw_deg}, {"fov_deg", c.fov_deg}});
  }
  j["cameras"] = std::move(cams);
  j["signal"] = {{"p0_dbm", spec.p0_dbm},
                 {"path_exp", spec.path_exp},
                 {"wall_loss_db", spec.wall_loss_db},
                 {"shadow_sigma_db", spec.shadow_sigma_db},
                 {"ref_dist_m", spec.ref_dist_m}};
  j["walk"] = {{"speed_mps", spec.speed_mps}, {"seed", spec.seed}};
  return j.dump(2);
}

SceneSpec scene_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed scene json: ") + e.what());
  }
  SceneSpec s;
  try {
    s.room_w = j.at("room").at("w").get<double>();
    s.room_h = j.at("room").at("h").get<double>();
    s.obstacles.clear();
    for (const auto& o : j.at("obstacles")) {
      s.obstacles.push_back({o.at("x0").get<double>(), o.at("y0").get<double>(),
                             o.at("x1").get<double>(), o.at("y1").get<double>()});
    }
    s.ap_x = j.at("ap").at("x").get<double>();
    s.ap_y = j.at("ap").at("y").get<double>();
    s.cameras.clear();
    for (const auto& c : j.at("cameras")) {
      s.cameras.push_back({c.at("x").get<double>(), c.at("y").get<double>(),
                           c.at("yaw_deg").get<double>(), c.at("fov_deg").get<double>()});
    }
    const auto& sig = j.at("signal");
    s.p0_dbm = sig.at("p0_dbm").get<double>();
    s.path_exp = sig.at("path_exp").get<double>();
    s.wall_loss_db = sig.at("wall_loss_db").get<double>();
    s.shadow_sigma_db = sig.at("shadow_sigma_db").get<double>();
    s.ref_dist_m = sig.at("ref_dist_m").get<double>();
    const auto& walk = j.at("walk");
    s.speed_mps = walk.at("speed_mps").get<double>();
    s.seed = walk.at("seed").get<uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("scene json missing field: ") + e.what());
  }
  s.validate();
  return s;
}

SceneSpec load_scene(const std::string& json_path) {
  std::ifstream f(json_path);
  if (!f) throw IoError("cannot open scene file: " + json_path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return scene_from_json(text);
}

void save_scene(const std::string& json_path, const SceneSpec& spec) {
  spec.validate();
  std::ofstream f(json_path);
  if (!f) throw IoError("cannot open for writing: " + json_path);
  f << scene_to_json(spec) << "\n";
  if (!f) throw IoError("write failed: " + json_path);
}

}  // namespace mulvit
