// SPDX-License-Identifier: Apache-2.0
#include "sfmc/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <set>

#include "sfmc/error.hpp"
#include "sfmc/motion.hpp"
#include "sfmc/parallel.hpp"

namespace sfmc::synth {

using geometry::Matrix3;
using geometry::Vector2;
namespace fs = std::filesystem;

namespace {

constexpr double kHitEpsilon = 1e-9;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t hash3(std::uint64_t seed, std::int64_t a, std::int64_t b) {
  return splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(a) ^ splitmix64(static_cast<std::uint64_t>(b))));
}

double unit(std::uint64_t bits) { return static_cast<double>(bits >> 11) * 0x1.0p-53; }

// Portable uniform draws (std distributions differ between standard libraries).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform(double lo, double hi) { return lo + (hi - lo) * unit(engine_()); }

 private:
  std::mt19937_64 engine_;
};

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

double value_noise(double u, double v, std::uint64_t seed) {
  const double fu = std::floor(u);
  const double fv = std::floor(v);
  const auto iu = static_cast<std::int64_t>(fu);
  const auto iv = static_cast<std::int64_t>(fv);
  const double su = smooth(u - fu);
  const double sv = smooth(v - fv);
  const double a = unit(hash3(seed, iu, iv));
  const double b = unit(hash3(seed, iu + 1, iv));
  const double c = unit(hash3(seed, iu, iv + 1));
  const double d = unit(hash3(seed, iu + 1, iv + 1));
  return (a * (1 - su) + b * su) * (1 - sv) + (c * (1 - su) + d * su) * sv;
}

// Octave sum in [0,1]; the coarsest cell is cell * 2^(octaves-1). Averaging
// octaves shrinks the spread, so it is stretched back before clamping.
double fractal(double u, double v, std::uint64_t seed, const TextureSpec& spec) {
  double sum = 0.0;
  double norm = 0.0;
  double amplitude = 1.0;
  double cell = spec.cell * std::ldexp(1.0, static_cast<int>(spec.octaves) - 1);
  for (std::size_t o = 0; o < spec.octaves; ++o) {
    sum += amplitude * value_noise(u / cell, v / cell, seed + 7919 * o);
    norm += amplitude;
    amplitude *= 0.75;
    cell *= 0.5;
  }
  return std::clamp(0.5 + 2.0 * (sum / norm - 0.5), 0.0, 1.0);
}

Vector3 box_center(const BoxSpec& b, std::size_t t) { return b.center + static_cast<double>(t) * b.velocity; }

bool inside_box(const BoxSpec& b, std::size_t t, const Vector3& p) {
  const Vector3 d = (p - box_center(b, t)).cwiseAbs();
  return d.x() < b.half_size.x() && d.y() < b.half_size.y() && d.z() < b.half_size.z();
}

// Slab test; returns the entry distance and the axis of the entry face.
bool intersect_box(const BoxSpec& b, std::size_t t, const Vector3& o, const Vector3& d, double& s, int& axis) {
  const Vector3 c = box_center(b, t);
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
  int entry_axis = -1;
  for (int a = 0; a < 3; ++a) {
    const double mn = c[a] - b.half_size[a];
    const double mx = c[a] + b.half_size[a];
    if (std::abs(d[a]) < 1e-15) {
      if (o[a] < mn || o[a] > mx) return false;
      continue;
    }
    double t0 = (mn - o[a]) / d[a];
    double t1 = (mx - o[a]) / d[a];
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > lo) {
      lo = t0;
      entry_axis = a;
    }
    hi = std::min(hi, t1);
    if (lo > hi) return false;
  }
  if (lo <= kHitEpsilon || entry_axis < 0) return false;
  s = lo;
  axis = entry_axis;
  return true;
}

Vector3 camera_center(const Se3Pose& g) { return -(g.rotation().transpose() * g.translation()); }

struct Shaded {
  RayHit hit;
  Vector3 color = Vector3::Zero();
};

Shaded shade(const Scene& scene, std::size_t t, const Vector2& pixel) {
  const auto& cfg = scene.config;
  const auto& k = cfg.intrinsics;
  const Se3Pose& g = scene.poses[t];
  const Vector3 dc((pixel.x() - k.cx) / k.fx, (pixel.y() - k.cy) / k.fy, 1.0);
  const Vector3 d = g.rotation().transpose() * dc;
  const Vector3 o = camera_center(g);

  Shaded out;
  double best = std::numeric_limits<double>::infinity();
  int axis = -1;
  if (cfg.ground && d.y() > 0) {
    const double s = (cfg.camera_height - o.y()) / d.y();
    if (s > kHitEpsilon && s < best) {
      best = s;
      out.hit.object = 0;
    }
  }
  if (d.z() > 0) {
    const double s = (cfg.wall_distance - o.z()) / d.z();
    if (s > kHitEpsilon && s < best) {
      best = s;
      out.hit.object = 1;
    }
  }
  for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
    double s = 0.0;
    int a = -1;
    if (intersect_box(scene.boxes[i], t, o, d, s, a) && s < best) {
      best = s;
      axis = a;
      out.hit.object = static_cast<int>(2 + i);
    }
  }
  if (out.hit.object < 0) return out;

  out.hit.depth = best;
  out.hit.point = o + best * d;
  const Vector3& p = out.hit.point;
  double value = 0.0;
  Vector3 base;
  double light = 1.0;
  if (out.hit.object == 0) {
    value = fractal(p.x(), p.z(), scene.seed ^ 0xA5A5ULL, cfg.texture);
    base = Vector3(0.55, 0.5, 0.42);
  } else if (out.hit.object == 1) {
    value = fractal(p.x(), p.y(), scene.seed ^ 0x5A5AULL, cfg.texture);
    base = Vector3(0.5, 0.58, 0.72);
  } else {
    const BoxSpec& b = scene.boxes[static_cast<std::size_t>(out.hit.object - 2)];
    out.hit.dynamic = b.dynamic;
    const Vector3 local = p - box_center(b, t);
    const int u = (axis + 1) % 3;
    const int v = (axis + 2) % 3;
    const std::uint64_t face = static_cast<std::uint64_t>(axis) * 2 + (local[axis] > 0 ? 1 : 0);
    value = fractal(local[u], local[v], b.texture_seed * 31 + face, cfg.texture);
    base = b.color;
    light = std::array<double, 3>{0.8, 1.0, 0.65}[static_cast<std::size_t>(axis)];
  }
  const double c = cfg.texture.contrast;
  out.color = (light * ((1.0 - c) + c * value)) * base;
  return out;
}

Se3Pose pose_from_center(const Matrix3& rotation, const Vector3& center) { return {rotation, -(rotation * center)}; }

// --- JSON helpers -----------------------------------------------------------

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; }))
      throw Error(ErrorCode::kConfigError, where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void read_vec(const nlohmann::json& j, const char* key, Vector3& out) {
  if (!j.contains(key)) return;
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != 3) throw Error(ErrorCode::kConfigError, std::string(key) + " needs 3 numbers");
  for (int i = 0; i < 3; ++i) out[i] = a.at(static_cast<std::size_t>(i)).get<double>();
}

nlohmann::json vec(const Vector3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

const nlohmann::json& object_at(const nlohmann::json& j, const char* key) {
  const auto& o = j.at(key);
  if (!o.is_object()) throw Error(ErrorCode::kConfigError, std::string(key) + " must be an object");
  return o;
}

void validate(const SceneConfig& c) {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::kInvalidConfig, m); };
  c.intrinsics.validate();
  if (c.trajectory.frames == 0) fail("trajectory.frames must be positive");
  if (c.window == 0 || c.window % 2 == 0) fail("window must be odd");
  if (c.supersample == 0) fail("supersample must be positive");
  if (c.texture.octaves == 0 || !(c.texture.cell > 0)) fail("texture needs octaves >= 1 and cell > 0");
  if (c.texture.contrast < 0 || c.texture.contrast > 1) fail("texture.contrast must lie in [0,1]");
  const auto& s = c.supervision;
  if (s.row_period == 0 || s.row_phase >= s.row_period) fail("supervision needs row_phase < row_period");
  if (s.dynamic_dropout < 0 || s.dynamic_dropout > 1) fail("dynamic_dropout must lie in [0,1]");
  if (s.top_cutoff < 0 || s.top_cutoff > 1) fail("top_cutoff must lie in [0,1]");
  if (!(c.wall_distance > 0)) fail("wall_distance must be positive (the scene must be closed)");
  if (c.ground && !(c.camera_height > 0)) fail("camera_height must be positive");
  if (!(c.scale > 0) || !std::isfinite(c.scale)) fail("scale must be positive");
  if (c.colinear_probability < 0 || c.colinear_probability > 1) fail("colinear_probability must lie in [0,1]");
  for (const auto& b : c.boxes)
    if ((b.half_size.array() <= 0).any()) fail("box half sizes must be positive");
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

SceneConfig parse_scene_config(const nlohmann::json& j) {
  SceneConfig c;
  if (j.is_null()) return c;
  if (!j.is_object()) throw Error(ErrorCode::kConfigError, "scene config must be an object");
  try {
    reject_unknown(j,
                   {"seed", "image", "intrinsics", "camera_height", "ground", "wall_distance", "scale", "window",
                    "supersample", "trajectory", "texture", "supervision", "layout", "boxes"},
                   "scene");
    read(j, "seed", c.seed);
    if (j.contains("image")) {
      const auto& im = object_at(j, "image");
      reject_unknown(im, {"width", "height"}, "image");
      read(im, "width", c.intrinsics.width);
      read(im, "height", c.intrinsics.height);
      // Keep the principal point centred unless intrinsics say otherwise.
      c.intrinsics.cx = (static_cast<double>(c.intrinsics.width) - 1.0) / 2.0;
      c.intrinsics.cy = (static_cast<double>(c.intrinsics.height) - 1.0) / 2.0;
    }
    if (j.contains("intrinsics")) {
      const auto& in = object_at(j, "intrinsics");
      reject_unknown(in, {"fx", "fy", "cx", "cy"}, "intrinsics");
      read(in, "fx", c.intrinsics.fx);
      read(in, "fy", c.intrinsics.fy);
      read(in, "cx", c.intrinsics.cx);
      read(in, "cy", c.intrinsics.cy);
    }
    read(j, "camera_height", c.camera_height);
    read(j, "ground", c.ground);
    read(j, "wall_distance", c.wall_distance);
    read(j, "scale", c.scale);
    read(j, "window", c.window);
    read(j, "supersample", c.supersample);
    if (j.contains("trajectory")) {
      const auto& t = object_at(j, "trajectory");
      reject_unknown(t, {"frames", "velocity", "velocity_jitter", "translation_jitter", "rotation_jitter"},
                     "trajectory");
      read(t, "frames", c.trajectory.frames);
      read_vec(t, "velocity", c.trajectory.velocity);
      read(t, "velocity_jitter", c.trajectory.velocity_jitter);
      read(t, "translation_jitter", c.trajectory.translation_jitter);
      read(t, "rotation_jitter", c.trajectory.rotation_jitter);
    }
    if (j.contains("texture")) {
      const auto& t = object_at(j, "texture");
      reject_unknown(t, {"octaves", "cell", "contrast"}, "texture");
      read(t, "octaves", c.texture.octaves);
      read(t, "cell", c.texture.cell);
      read(t, "contrast", c.texture.contrast);
    }
    if (j.contains("supervision")) {
      const auto& s = object_at(j, "supervision");
      reject_unknown(s, {"row_period", "row_phase", "dynamic_dropout", "top_cutoff"}, "supervision");
      read(s, "row_period", c.supervision.row_period);
      read(s, "row_phase", c.supervision.row_phase);
      read(s, "dynamic_dropout", c.supervision.dynamic_dropout);
      read(s, "top_cutoff", c.supervision.top_cutoff);
    }
    if (j.contains("layout")) {
      const auto& l = object_at(j, "layout");
      reject_unknown(l, {"static_boxes", "dynamic_boxes", "dynamic_speed", "colinear_probability"}, "layout");
      read(l, "static_boxes", c.static_boxes);
      read(l, "dynamic_boxes", c.dynamic_boxes);
      read(l, "dynamic_speed", c.dynamic_speed);
      read(l, "colinear_probability", c.colinear_probability);
    }
    if (j.contains("boxes")) {
      if (!j.at("boxes").is_array()) throw Error(ErrorCode::kConfigError, "boxes must be an array");
      for (const auto& jb : j.at("boxes")) {
        if (!jb.is_object()) throw Error(ErrorCode::kConfigError, "box entries must be objects");
        reject_unknown(jb, {"center", "half_size", "velocity", "color", "texture_seed", "dynamic"}, "box");
        BoxSpec b;
        read_vec(jb, "center", b.center);
        read_vec(jb, "half_size", b.half_size);
        read_vec(jb, "velocity", b.velocity);
        read_vec(jb, "color", b.color);
        read(jb, "texture_seed", b.texture_seed);
        read(jb, "dynamic", b.dynamic);
        c.boxes.push_back(b);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfigError, std::string("scene config: ") + e.what());
  }
  return c;
}

nlohmann::json to_json(const SceneConfig& c) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& b : c.boxes) {
    boxes.push_back({{"center", vec(b.center)},
                     {"half_size", vec(b.half_size)},
                     {"velocity", vec(b.velocity)},
                     {"color", vec(b.color)},
                     {"texture_seed", b.texture_seed},
                     {"dynamic", b.dynamic}});
  }
  const auto& k = c.intrinsics;
  return {{"seed", c.seed},
          {"image", {{"width", k.width}, {"height", k.height}}},
          {"intrinsics", {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}}},
          {"camera_height", c.camera_height},
          {"ground", c.ground},
          {"wall_distance", c.wall_distance},
          {"scale", c.scale},
          {"window", c.window},
          {"supersample", c.supersample},
          {"trajectory",
           {{"frames", c.trajectory.frames},
            {"velocity", vec(c.trajectory.velocity)},
            {"velocity_jitter", c.trajectory.velocity_jitter},
            {"translation_jitter", c.trajectory.translation_jitter},
            {"rotation_jitter", c.trajectory.rotation_jitter}}},
          {"texture", {{"octaves", c.texture.octaves}, {"cell", c.texture.cell}, {"contrast", c.texture.contrast}}},
          {"supervision",
           {{"row_period", c.supervision.row_period},
            {"row_phase", c.supervision.row_phase},
            {"dynamic_dropout", c.supervision.dynamic_dropout},
            {"top_cutoff", c.supervision.top_cutoff}}},
          {"layout",
           {{"static_boxes", c.static_boxes},
            {"dynamic_boxes", c.dynamic_boxes},
            {"dynamic_speed", c.dynamic_speed},
            {"colinear_probability", c.colinear_probability}}},
          {"boxes", boxes}};
}

std::string config_hash(const nlohmann::json& j) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Scenes

Scene instantiate(const SceneConfig& config, std::uint64_t seed) {
  validate(config);
  Scene scene;
  scene.config = config;
  scene.seed = seed;
  Rng rng(seed);
  const auto& tr = config.trajectory;
  const Vector3 velocity = tr.velocity * (1.0 + rng.uniform(-tr.velocity_jitter, tr.velocity_jitter));
  for (std::size_t t = 0; t < tr.frames; ++t) {
    Vector3 jitter;
    Vector3 omega;
    for (int a = 0; a < 3; ++a) jitter[a] = rng.uniform(-tr.translation_jitter, tr.translation_jitter);
    for (int a = 0; a < 3; ++a) omega[a] = rng.uniform(-tr.rotation_jitter, tr.rotation_jitter);
    scene.poses.push_back(
        pose_from_center(geometry::so3_exp(omega), static_cast<double>(t) * velocity + jitter));
  }

  if (!config.boxes.empty()) {
    scene.boxes = config.boxes;
  } else {
    const double span = static_cast<double>(tr.frames) * velocity.x();
    const double x_lo = std::min(-4.0, -4.0 + span);
    const double x_hi = std::max(4.0, 4.0 + span);
    const double z_far = std::max(5.0, config.wall_distance - 3.0);
    auto draw = [&](bool dynamic) {
      BoxSpec b;
      b.half_size = {rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.1), rng.uniform(0.3, 1.0)};
      const double z = dynamic ? rng.uniform(3.5, std::min(10.0, z_far)) : rng.uniform(4.0, z_far);
      const double ground_y = config.ground ? config.camera_height : rng.uniform(0.0, 1.5);
      b.center = {rng.uniform(x_lo, x_hi), ground_y - b.half_size.y(), z};
      b.color = {rng.uniform(0.35, 1.0), rng.uniform(0.35, 1.0), rng.uniform(0.35, 1.0)};
      b.texture_seed = splitmix64(seed + scene.boxes.size() + 1);
      b.dynamic = dynamic;
      if (dynamic) {
        if (rng.uniform(0.0, 1.0) < config.colinear_probability) {
          b.velocity = velocity;
        } else {
          const double heading = rng.uniform(0.0, 2.0 * M_PI);
          const double speed = config.dynamic_speed * rng.uniform(0.5, 1.0);
          b.velocity = {speed * std::cos(heading), 0.0, speed * std::sin(heading)};
        }
      }
      scene.boxes.push_back(b);
    };
    for (std::size_t i = 0; i < config.static_boxes; ++i) draw(false);
    for (std::size_t i = 0; i < config.dynamic_boxes; ++i) draw(true);
    // Drop boxes that would swallow a camera rather than failing a random draw.
    std::vector<BoxSpec> kept;
    for (const auto& b : scene.boxes) {
      bool clear = true;
      for (std::size_t t = 0; t < tr.frames && clear; ++t) {
        BoxSpec grown = b;
        grown.half_size.array() += 0.3;
        clear = !inside_box(grown, t, camera_center(scene.poses[t]));
      }
      if (clear) kept.push_back(b);
    }
    scene.boxes = std::move(kept);
  }

  for (std::size_t t = 0; t < tr.frames; ++t) {
    const Vector3 c = camera_center(scene.poses[t]);
    if (c.z() >= config.wall_distance) throw Error(ErrorCode::kInvalidConfig, "camera behind the wall at frame " + std::to_string(t));
    if (config.ground && c.y() >= config.camera_height)
      throw Error(ErrorCode::kInvalidConfig, "camera below the ground at frame " + std::to_string(t));
    for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
      if (inside_box(scene.boxes[i], t, c))
        throw Error(ErrorCode::kInvalidConfig,
                    "camera inside box " + std::to_string(i) + " at frame " + std::to_string(t));
    }
  }
  return scene;
}

RayHit cast(const Scene& scene, std::size_t t, const Vector2& pixel) {
  if (t >= scene.poses.size())
    throw Error(ErrorCode::kInvalidConfig, "frame " + std::to_string(t) + " outside the trajectory");
  return shade(scene, t, pixel).hit;
}

SceneSample render(const Scene& scene, std::size_t t) {
  if (t >= scene.poses.size())
    throw Error(ErrorCode::kInvalidConfig, "frame " + std::to_string(t) + " outside the trajectory");
  const auto& cfg = scene.config;
  const std::size_t h = cfg.intrinsics.height;
  const std::size_t w = cfg.intrinsics.width;
  const std::size_t ss = cfg.supersample;
  SceneSample out;
  out.frame = t;
  out.pose = Se3Pose(scene.poses[t].rotation(), scene.poses[t].translation() * cfg.scale);
  out.image = Image(3, h, w);
  out.depth.assign(h * w, 0.0);
  out.dynamic_mask.assign(h * w, 0.0);
  out.supervision.assign(h * w, 0.0);
  std::vector<int> object(h * w, -1);

  parallel_for(h, [&](std::size_t y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t p = y * w + x;
      const Vector2 centre(static_cast<double>(x), static_cast<double>(y));
      const RayHit hit = shade(scene, t, centre).hit;
      if (hit.object < 0)
        throw Error(ErrorCode::kInvalidConfig, "ray escapes the scene at pixel (" + std::to_string(x) + "," +
                                                   std::to_string(y) + ")");
      out.depth[p] = hit.depth * cfg.scale;
      out.dynamic_mask[p] = hit.dynamic ? 1.0 : 0.0;
      object[p] = hit.object;
      Vector3 color = Vector3::Zero();
      for (std::size_t sy = 0; sy < ss; ++sy) {
        for (std::size_t sx = 0; sx < ss; ++sx) {
          const Vector2 offset((static_cast<double>(sx) + 0.5) / static_cast<double>(ss) - 0.5,
                               (static_cast<double>(sy) + 0.5) / static_cast<double>(ss) - 0.5);
          const Shaded s = shade(scene, t, centre + offset);
          // A sub-ray can only miss if the scene is open; use the centre colour.
          color += s.hit.object < 0 ? shade(scene, t, centre).color : s.color;
        }
      }
      color /= static_cast<double>(ss * ss);
      for (int c = 0; c < 3; ++c) out.image.at(static_cast<std::size_t>(c), y, x) = std::clamp(color[c], 0.0, 1.0);
    }
  });

  // Lidar rows.
  const auto& sup = cfg.supervision;
  std::size_t static_pixels = 0;
  std::size_t static_supervised = 0;
  for (std::size_t y = 0; y < h; ++y) {
    const bool row = y % sup.row_period == sup.row_phase;
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t p = y * w + x;
      if (out.dynamic_mask[p] > 0) continue;
      ++static_pixels;
      if (row) {
        out.supervision[p] = 1.0;
        ++static_supervised;
      }
    }
  }
  const double static_density =
      static_pixels == 0 ? 1.0 / static_cast<double>(sup.row_period)
                         : static_cast<double>(static_supervised) / static_cast<double>(static_pixels);

  // Moving objects: no returns from their upper part, then thinning to the
  // configured fraction of the static density (hash-ranked, deterministic).
  std::set<int> dynamic_objects;
  for (std::size_t p = 0; p < h * w; ++p)
    if (out.dynamic_mask[p] > 0) dynamic_objects.insert(object[p]);
  for (const int obj : dynamic_objects) {
    std::size_t top = h;
    std::size_t bottom = 0;
    std::size_t count = 0;
    for (std::size_t p = 0; p < h * w; ++p) {
      if (object[p] != obj) continue;
      top = std::min(top, p / w);
      bottom = std::max(bottom, p / w);
      ++count;
    }
    const auto rows = static_cast<double>(bottom - top + 1);
    const auto first_row = top + static_cast<std::size_t>(std::ceil(sup.top_cutoff * rows - 1e-12));
    std::vector<std::pair<std::uint64_t, std::size_t>> candidates;
    for (std::size_t p = 0; p < h * w; ++p) {
      const std::size_t y = p / w;
      if (object[p] != obj || y < first_row || y % sup.row_period != sup.row_phase) continue;
      candidates.emplace_back(hash3(scene.seed ^ 0x51DEULL, static_cast<std::int64_t>(t), static_cast<std::int64_t>(p)), p);
    }
    const auto cap = static_cast<std::size_t>(
        std::floor((1.0 - sup.dynamic_dropout) * static_density * static_cast<double>(count) + 1e-9));
    std::sort(candidates.begin(), candidates.end());
    for (std::size_t i = 0; i < std::min(cap, candidates.size()); ++i) out.supervision[candidates[i].second] = 1.0;
  }
  return out;
}

SceneSample render(const SceneConfig& config, std::size_t t) { return render(instantiate(config, config.seed), t); }

// ---------------------------------------------------------------------------
// Datasets

namespace {

std::string sample_name(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06zu", i);
  return buf;
}

bool is_sample_name(const std::string& s) {
  return s.size() == 6 && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

// Sequence lengths for n frames: chunks of `length`; a tail shorter than the
// window joins the previous chunk.
std::vector<std::size_t> sequence_lengths(std::size_t n, std::size_t length, std::size_t window) {
  std::vector<std::size_t> out;
  while (n > 0) {
    const std::size_t take = std::min(n, length);
    out.push_back(take);
    n -= take;
  }
  if (out.size() > 1 && out.back() < window) {
    out[out.size() - 2] += out.back();
    out.pop_back();
  }
  return out;
}

void write_sample(const fs::path& dir, const SceneSample& s, const CameraIntrinsics& k) {
  fs::create_directories(dir);
  write_ppm(dir / "image.ppm", s.image);
  Image depth(1, k.height, k.width);
  depth.data = s.depth;
  write_pfm(dir / "depth.pfm", depth);
  Image dyn(1, k.height, k.width);
  dyn.data = s.dynamic_mask;
  write_pgm(dir / "dynamic_mask.pgm", dyn, true);
  Image sup(1, k.height, k.width);
  sup.data = s.supervision;
  write_pgm(dir / "supervision_mask.pgm", sup, true);
  motion::write_trajectory(dir / "pose.csv", {s.pose}, s.frame);
}

}  // namespace

fs::path generate_split(const SceneConfig& config, std::size_t n_train, std::size_t n_test, const fs::path& out,
                        bool force) {
  validate(config);
  std::error_code ec;
  if (fs::exists(out, ec) && !fs::is_directory(out, ec))
    throw Error(ErrorCode::kIoError, out.string() + " exists and is not a directory");
  if (fs::exists(out, ec) && !fs::is_empty(out, ec)) {
    if (!force) throw Error(ErrorCode::kRefusingOverwrite, out.string() + " is not empty (use --force)");
    // Only remove what a previous run wrote.
    for (const auto& e : fs::directory_iterator(out)) {
      const std::string name = e.path().filename().string();
      if ((e.is_directory() && is_sample_name(name)) || name == "manifest.json") fs::remove_all(e.path());
    }
  }
  fs::create_directories(out, ec);
  if (ec) throw Error(ErrorCode::kIoError, "cannot create " + out.string() + ": " + ec.message());

  const nlohmann::json cfg_json = to_json(config);
  nlohmann::json samples = nlohmann::json::array();
  nlohmann::json windows = nlohmann::json::array();
  std::size_t next = 0;
  std::size_t sequence = 0;
  const std::array<std::pair<std::string, std::size_t>, 2> splits{{{"train", n_train}, {"test", n_test}}};
  for (std::size_t si = 0; si < splits.size(); ++si) {
    const auto& [split, count] = splits[si];
    std::size_t index = 0;
    for (const std::size_t len : sequence_lengths(count, config.trajectory.frames, config.window)) {
      // Split id in the high bits keeps train and test seeds disjoint.
      const std::uint64_t seed = hash3(config.seed, static_cast<std::int64_t>(si), static_cast<std::int64_t>(index++));
      SceneConfig seq_cfg = config;
      seq_cfg.trajectory.frames = len;
      const Scene scene = instantiate(seq_cfg, seed);
      std::vector<std::string> names(len);
      for (std::size_t t = 0; t < len; ++t) names[t] = sample_name(next + t);
      std::vector<SceneSample> rendered(len);
      for (std::size_t t = 0; t < len; ++t) rendered[t] = render(scene, t);
      for (std::size_t t = 0; t < len; ++t) {
        write_sample(out / names[t], rendered[t], config.intrinsics);
        samples.push_back({{"name", names[t]}, {"split", split}, {"sequence", sequence}, {"frame", t}, {"seed", seed}});
      }
      for (std::size_t start = 0; start + config.window <= len; ++start) {
        windows.push_back({{"split", split},
                           {"frames", std::vector<std::string>(names.begin() + static_cast<std::ptrdiff_t>(start),
                                                               names.begin() + static_cast<std::ptrdiff_t>(start + config.window))},
                           {"key", config.window / 2}});
      }
      next += len;
      ++sequence;
    }
  }
  const auto& k = config.intrinsics;
  const nlohmann::json manifest = {
      {"format", "sfmc-synth-1"},
      {"config_hash", config_hash(cfg_json)},
      {"config", cfg_json},
      {"intrinsics",
       {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width}, {"height", k.height}}},
      {"samples", samples},
      {"windows", windows}};
  const fs::path path = out / "manifest.json";
  std::ofstream f(path);
  if (!f) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  f << manifest.dump(1) << '\n';
  if (!f) throw Error(ErrorCode::kIoError, "write failed: " + path.string());
  return path;
}

Manifest read_manifest(const fs::path& dataset) {
  const fs::path path = dataset / "manifest.json";
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::kIoError, "cannot read " + path.string());
  Manifest m;
  try {
    const nlohmann::json j = nlohmann::json::parse(f);
    const auto& k = j.at("intrinsics");
    m.intrinsics = {k.at("fx").get<double>(),         k.at("fy").get<double>(),
                    k.at("cx").get<double>(),         k.at("cy").get<double>(),
                    k.at("width").get<std::size_t>(), k.at("height").get<std::size_t>()};
    m.config_hash = j.value("config_hash", "");
    m.config = j.value("config", nlohmann::json::object());
    for (const auto& s : j.at("samples"))
      m.samples.push_back({s.at("name").get<std::string>(), s.at("split").get<std::string>(),
                           s.at("sequence").get<std::size_t>(), s.at("frame").get<std::size_t>()});
    for (const auto& w : j.at("windows"))
      m.windows.push_back({w.at("split").get<std::string>(), w.at("frames").get<std::vector<std::string>>(),
                           w.at("key").get<std::size_t>()});
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kIoError, path.string() + ": " + e.what());
  }
  return m;
}

Window load_window(const fs::path& dataset, const WindowRecord& record) {
  if (record.frames.empty() || record.key >= record.frames.size())
    throw Error(ErrorCode::kIoError, "window without a valid keyframe in " + dataset.string());
  Window w;
  w.name = record.frames[record.key];
  w.split = record.split;
  w.key = record.key;
  const std::size_t f = record.frames.size();
  std::vector<Se3Pose> absolute;
  std::vector<double> images;
  std::size_t h = 0;
  std::size_t wd = 0;
  for (std::size_t i = 0; i < f; ++i) {
    const fs::path dir = dataset / record.frames[i];
    const Image im = read_ppm(dir / "image.ppm");
    if (i == 0) {
      h = im.height;
      wd = im.width;
    } else if (im.height != h || im.width != wd) {
      throw Error(ErrorCode::kIoError, dir.string() + ": image size differs inside the window");
    }
    images.insert(images.end(), im.data.begin(), im.data.end());
    const auto pose = motion::read_trajectory(dir / "pose.csv");
    if (pose.size() != 1) throw Error(ErrorCode::kIoError, (dir / "pose.csv").string() + ": expected one row");
    absolute.push_back(pose.front());
  }
  w.images = grad::Tensor::from({f, 3, h, wd}, std::move(images));
  const Se3Pose key_inv = absolute[record.key].inverse();
  for (const auto& g : absolute) w.poses.push_back(g * key_inv);
  const fs::path key_dir = dataset / w.name;
  const Image depth = read_pfm(key_dir / "depth.pfm");
  const Image sup = read_pgm(key_dir / "supervision_mask.pgm", true);
  const Image dyn = read_pgm(key_dir / "dynamic_mask.pgm", true);
  for (const Image* m : {&depth, &sup, &dyn})
    if (m->height != h || m->width != wd) throw Error(ErrorCode::kIoError, key_dir.string() + ": map size mismatch");
  w.depth = grad::Tensor::from({h, wd}, depth.data);
  w.supervision = grad::Tensor::from({h, wd}, sup.data);
  w.dynamic_mask = grad::Tensor::from({h, wd}, dyn.data);
  return w;
}

std::vector<Window> load_split(const fs::path& dataset, const std::string& split) {
  const Manifest m = read_manifest(dataset);
  std::vector<Window> out;
  for (const auto& r : m.windows)
    if (r.split == split) out.push_back(load_window(dataset, r));
  if (out.empty()) throw Error(ErrorCode::kEmptyDataset, "no " + split + " windows in " + dataset.string());
  return out;
}

}  // namespace sfmc::synth
