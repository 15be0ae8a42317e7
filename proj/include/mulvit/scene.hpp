#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mulvit/rng.hpp"
#include "mulvit/rssi.hpp"
#include "mulvit/tensor.hpp"

namespace mulvit {

/// Axis-aligned rectangular obstacle, corners (x0,y0)-(x1,y1) in meters.
struct Obstacle {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

struct CameraPose {
  double x = 0, y = 0;
  double yaw_deg = 0;   // viewing direction, counterclockwise from +x
  double fov_deg = 90;  // full opening angle, (0, 180]
};

/// A 2D room with obstacles, one access point, and M cameras; all the
/// knobs for signal synthesis and the station's random walk live here.
struct SceneSpec {
  double room_w = 8.0, room_h = 6.0;  // meters
  std::vector<Obstacle> obstacles;
  double ap_x = 6.9, ap_y = 0.9;
  std::vector<CameraPose> cameras;

  double p0_dbm = -30.0;        // received power at the reference distance
  double path_exp = 2.2;        // log-distance exponent
  double wall_loss_db = 6.0;    // attenuation per crossed obstacle edge
  double shadow_sigma_db = 2.0; // lognormal shadowing spread
  double ref_dist_m = 1.0;

  double speed_mps = 0.6;       // station walk speed
  uint64_t seed = 1;

  void validate() const;
};

/// Two opposite-corner 90-degree cameras and two offset obstacles, tuned so
/// each camera is blind in a sizable region, the blind regions are disjoint,
/// and together the cameras cover the whole walkable area.
SceneSpec default_scene();

SceneSpec load_scene(const std::string& json_path);
void save_scene(const std::string& json_path, const SceneSpec& spec);
std::string scene_to_json(const SceneSpec& spec);
SceneSpec scene_from_json(const std::string& text);

struct RenderedFrame {
  TensorT<float> image;   // [3,H,W], values in [0,1]
  int64_t timestamp_us = 0;
  bool sta_visible = false;
};

namespace scene {

/// Number of times the open segment p->q crosses the obstacle's boundary
/// edges (0, 1 when one endpoint is inside, 2 for a full pass-through).
int segment_edge_crossings(double px, double py, double qx, double qy, const Obstacle& o);

/// True when the open segment passes through the obstacle's interior.
bool segment_blocked(double px, double py, double qx, double qy, const Obstacle& o);

/// Station visibility from camera k: inside the view wedge and no obstacle
/// on the camera-station segment.
bool sta_visible_from(const SceneSpec& spec, size_t camera, double sx, double sy);

/// Reflecting random walk over the free space (0.3 m wall/obstacle margin);
/// deterministic per spec.seed. Returns `steps` positions including the
/// start. Throws SpecError when the room has no free space.
std::vector<std::pair<double, double>> simulate_trajectory(const SceneSpec& spec, int64_t steps,
                                                           double dt_s);

/// Top-down rasterization of camera k's view: pixels outside the wedge or
/// hidden by an obstacle are background; visible free space, visible
/// obstacle fill, an access-point landmark disc, and — only when the
/// station is wedge-visible — a station marker disc, all in a fixed
/// palette. Aspect must match the room (64x48 and 320x240 both do).
RenderedFrame render_view(const SceneSpec& spec, size_t camera, double sx, double sy,
                          int64_t height = 48, int64_t width = 64);

/// Deterministic part of the signal model: p0 - 10 n log10(max(d,d0)/d0)
/// minus wall_loss per crossed obstacle edge on the AP-station segment.
double rssi_mean(const SceneSpec& spec, double sx, double sy);

/// rssi_mean plus seeded Normal(0, shadow_sigma^2) shadowing.
double rssi_ground_truth(const SceneSpec& spec, double sx, double sy, Rng& rng);

struct DatasetOptions {
  int64_t width = 64, height = 48;
  double fps = 20.0;              // camera rate; the signal is sampled at 2x
  rssi::PreprocessConfig preprocess;
};

struct DatasetSummary {
  int64_t frames = 0;
  int64_t cameras = 0;
  int64_t samples = 0;            // paired samples after alignment
  int64_t dropped_pairs = 0;
  int64_t flagged = 0;            // outliers rejected while conditioning labels
  double trend_r = 0.0;
  std::vector<double> blind_fraction;  // per camera, over trajectory points
  std::string manifest_path;
};

/// Writes per-camera frame blobs, a 40 Hz signal CSV (two draws per frame
/// step at +-12.5 ms), and a manifest whose labels come from running the
/// real conditioning pipeline and aligner on that CSV. Byte-identical
/// across runs with the same spec and options.
DatasetSummary generate_dataset(const SceneSpec& spec, int64_t frames, const std::string& out_dir,
                                const DatasetOptions& opts = {});

}  // namespace scene

}  // namespace mulvit
