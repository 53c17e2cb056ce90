// SPDX-License-Identifier: Apache-2.0
//
// Synthetic dynamic scenes: a textured ground plane, a background wall and
// axis-aligned boxes (some moving), ray cast analytically so depth is exact.
// Sparse "lidar" supervision keeps every k-th row and thins moving objects.
//
// A dataset is a set of short sequences, each its own seeded scene; training
// windows are the sliding (2n+1)-frame windows inside a sequence.
//
// World frame: x right, y down, z forward; the ground is the plane
// y = camera_height. Camera poses map world points into the camera.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sfmc/geometry.hpp"
#include "sfmc/grad/tensor.hpp"
#include "sfmc/image.hpp"

namespace sfmc::synth {

using geometry::CameraIntrinsics;
using geometry::Se3Pose;
using geometry::Vector3;

struct TextureSpec {
  std::size_t octaves = 5;
  double cell = 0.15;       // finest value-noise cell in metres
  double contrast = 0.85;   // 0 = flat colour, 1 = full noise swing
};

struct TrajectorySpec {
  std::size_t frames = 12;                 // sequence length
  Vector3 velocity{0.5, 0.0, 0.25};        // camera centre motion per frame (world)
  double velocity_jitter = 0.1;            // per-window relative speed variation
  double translation_jitter = 0.02;        // per-frame centre noise (m)
  double rotation_jitter = 0.01;           // per-frame rotation noise (rad)
};

struct SupervisionSpec {
  std::size_t row_period = 4;   // keep rows with y % period == phase
  std::size_t row_phase = 1;
  double dynamic_dropout = 0.7;  // dynamic density <= (1 - dropout) * static density
  double top_cutoff = 0.4;       // unsupervised upper fraction of each moving object
};

struct BoxSpec {
  Vector3 center{0.0, 0.0, 8.0};     // at frame 0
  Vector3 half_size{0.5, 0.5, 0.5};
  Vector3 velocity{0.0, 0.0, 0.0};   // m/frame
  Vector3 color{0.8, 0.5, 0.3};
  std::uint64_t texture_seed = 1;
  bool dynamic = false;
};

struct SceneConfig {
  std::uint64_t seed = 1;
  CameraIntrinsics intrinsics{64.0, 64.0, 47.5, 31.5, 96, 64};
  double camera_height = 1.5;
  bool ground = true;
  double wall_distance = 16.0;   // wall plane z (world); closes the scene
  double scale = 1.0;            // multiplies rendered depth and camera translation; images are unchanged
  std::size_t window = 5;        // frames per training window (odd)
  std::size_t supersample = 2;   // rays per pixel per axis for the image
  TrajectorySpec trajectory;
  TextureSpec texture;
  SupervisionSpec supervision;
  // Random layout (used when `boxes` is empty).
  std::size_t static_boxes = 3;
  std::size_t dynamic_boxes = 2;
  double dynamic_speed = 0.6;
  double colinear_probability = 0.2;  // moving box copies the camera velocity
  std::vector<BoxSpec> boxes;         // explicit layout
};

/// Missing keys keep defaults; malformed values throw ConfigError.
SceneConfig parse_scene_config(const nlohmann::json& j);
nlohmann::json to_json(const SceneConfig& c);
/// FNV-1a 64 of the canonical JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& j);

/// One concrete window: camera poses and the box layout.
struct Scene {
  SceneConfig config;
  std::vector<Se3Pose> poses;  // world -> camera, one per frame
  std::vector<BoxSpec> boxes;
  std::uint64_t seed = 0;
};

/// Draws camera motion and (unless the config lists boxes) the layout from
/// `seed`. Throws InvalidConfig for a bad config or when a camera centre lies
/// inside geometry.
Scene instantiate(const SceneConfig& config, std::uint64_t seed);

struct RayHit {
  double depth = 0.0;   // camera z of the hit
  int object = -1;      // -1 none, 0 ground, 1 wall, 2 + box index
  bool dynamic = false;
  Vector3 point = Vector3::Zero();  // world
};

/// Casts the ray of (sub)pixel `pixel` in frame t.
RayHit cast(const Scene& scene, std::size_t t, const geometry::Vector2& pixel);

struct SceneSample {
  std::size_t frame = 0;
  Image image;                        // 3 x H x W in [0,1]
  std::vector<double> depth;          // H x W, metres
  std::vector<double> dynamic_mask;   // 1 = moving object
  std::vector<double> supervision;    // 1 = ground truth present
  Se3Pose pose;
};

SceneSample render(const Scene& scene, std::size_t t);
SceneSample render(const SceneConfig& config, std::size_t t);

// ---------------------------------------------------------------------------
// On-disk datasets

struct SampleRecord {
  std::string name;  // directory NNNNNN
  std::string split;
  std::size_t sequence = 0;
  std::size_t frame = 0;  // index inside the sequence
};

struct WindowRecord {
  std::string split;
  std::vector<std::string> frames;  // sample directory names
  std::size_t key = 0;              // index into frames
};

struct Manifest {
  CameraIntrinsics intrinsics;
  std::string config_hash;
  nlohmann::json config;
  std::vector<SampleRecord> samples;
  std::vector<WindowRecord> windows;
};

/// Renders n_train + n_test frames below `out`, one sample directory NNNNNN
/// each, plus manifest.json. Frames are grouped into sequences of
/// trajectory.frames (a short tail joins the previous sequence); train and
/// test sequences use disjoint seeds. Refuses to write into a non-empty
/// directory unless `force`. Returns the manifest path.
std::filesystem::path generate_split(const SceneConfig& config, std::size_t n_train, std::size_t n_test,
                                     const std::filesystem::path& out, bool force = false);

Manifest read_manifest(const std::filesystem::path& dataset);

struct Window {
  std::string name;                 // key sample directory
  std::string split;
  grad::Tensor images;              // [F,3,H,W]
  std::vector<Se3Pose> poses;       // ground truth, key -> frame (key is identity)
  std::size_t key = 0;
  grad::Tensor depth;               // key ground truth [H,W]
  grad::Tensor supervision;         // key [H,W]
  grad::Tensor dynamic_mask;        // key [H,W]
};

Window load_window(const std::filesystem::path& dataset, const WindowRecord& record);
/// All windows of a split; throws EmptyDataset when there are none.
std::vector<Window> load_split(const std::filesystem::path& dataset, const std::string& split);

}  // namespace sfmc::synth
