// SPDX-License-Identifier: Apache-2.0
#include "sfmc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

#include "sfmc/error.hpp"
#include "sfmc/grad/ops.hpp"

namespace sfmc::trainer {

namespace fs = std::filesystem;
using depthnet::DepthNet;
using motion::MotionNet;
using motion::PoseGraph;

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t draw(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix(seed ^ mix(a ^ mix(b ^ mix(c))));
}

double unit(std::uint64_t bits) { return static_cast<double>(bits >> 11) * 0x1.0p-53; }

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw Error(ErrorCode::kConfigError, where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; }))
      throw Error(ErrorCode::kConfigError, where + ": unknown key '" + key + "'");
  }
}

StageConfig parse_stage(const nlohmann::json& j, const std::string& where, StageConfig s) {
  reject_unknown(j, {"epochs", "batch", "max_steps"}, where);
  read(j, "epochs", s.epochs);
  read(j, "batch", s.batch);
  read(j, "max_steps", s.max_steps);
  return s;
}

nlohmann::json stage_json(const StageConfig& s) {
  return {{"epochs", s.epochs}, {"batch", s.batch}, {"max_steps", s.max_steps}};
}

void validate(const TrainConfig& c) {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::kInvalidConfig, m); };
  auto prob = [&](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) fail(std::string(name) + " must lie in [0,1]");
  };
  prob(c.cache_probability_start, "cache_probability.start");
  prob(c.cache_probability_max, "cache_probability.max");
  if (c.iterations == 0) fail("iterations must be at least 1");
  if (c.window < 3 || c.window % 2 == 0) fail("window must be odd and at least 3");
  if (c.stage1.batch == 0 || c.stage2.batch == 0) fail("batch sizes must be positive");
  if (c.motion_steps == 0) fail("motion_steps must be at least 1");
  if (!(c.learning_rate > 0)) fail("learning_rate must be positive");
  if (!(c.depth.z_min > 0 && c.depth.z_max > c.depth.z_min) || c.depth.depth_bins < 2)
    fail("depth bins need 0 < z_min < z_max and at least 2 bins");
  if (c.initial_depth && !(*c.initial_depth > 0)) fail("initial_depth must be positive");
}

Tensor key_image(const Tensor& images, std::size_t key) {
  const auto& s = images.shape();
  return grad::reshape(grad::slice(images, 0, key, key + 1), {s[1], s[2], s[3]});
}

// Pixel (y,x) of the feature grid sits on full-res pixel (4y,4x).
Tensor subsample4(const Tensor& full) {
  const std::size_t H = full.dim(0), W = full.dim(1);
  const std::size_t h = H / 4, w = W / 4;
  std::vector<double> out(h * w);
  const auto v = full.values();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out[y * w + x] = v[(4 * y) * W + 4 * x];
  return Tensor::from({h, w}, std::move(out));
}

Tensor clamp_range(const Tensor& z, double lo, double hi) {
  std::vector<double> v(z.values().begin(), z.values().end());
  for (double& x : v) x = std::clamp(x, lo, hi);
  return Tensor::from(z.shape(), std::move(v));
}

struct Prepared {
  Tensor image;           // key [3,H,W]
  Tensor filled_quarter;  // GT depth holes filled, feature grid
  losses::QuarterSupervision quarter;
  PoseGraph truth;
};

std::vector<Prepared> prepare(const std::vector<synth::Window>& data, const TrainConfig& c,
                              const CameraIntrinsics& k) {
  if (data.empty()) throw Error(ErrorCode::kEmptyDataset, "no training windows");
  std::vector<Prepared> out;
  out.reserve(data.size());
  for (const auto& w : data) {
    if (w.images.rank() != 4 || w.images.dim(0) != c.window)
      throw Error(ErrorCode::kShapeMismatch, "window " + w.name + " has " + grad::shape_str(w.images.shape()) +
                                                 ", config expects " + std::to_string(c.window) + " frames");
    if (w.images.dim(2) != k.height || w.images.dim(3) != k.width)
      throw Error(ErrorCode::kShapeMismatch, "window " + w.name + " does not match the intrinsics' image size");
    Prepared p;
    p.image = key_image(w.images, w.key);
    p.filled_quarter = subsample4(fill_nearest(w.depth, w.supervision));
    p.quarter = losses::quarter_supervision(w.depth, w.supervision);
    p.truth = PoseGraph{w.poses, w.key};
    out.push_back(std::move(p));
  }
  return out;
}

struct MotionPass {
  PoseGraph graph;
  PoseGraph last_base;
  Tensor last_xi;
  std::vector<Tensor> flow_terms;
  bool degenerate = false;
};

// Unrolled motion updates with the poses held constant between steps.
MotionPass run_motion(const MotionNet& net, const Tensor& images, const PoseGraph& init, const Tensor& depth_q,
                      const CameraIntrinsics& k_q, std::size_t steps, const PoseGraph* truth,
                      const motion::GaussNewtonOptions& gn) {
  MotionPass out;
  out.graph = init;
  const Tensor features = net.encode(images);
  const auto& s = features.shape();
  const Tensor key = grad::reshape(grad::slice(features, 0, init.key, init.key + 1), {s[1], s[2], s[3]});
  for (std::size_t it = 0; it < steps; ++it) {
    const Tensor warped = motion::warp_features(features, out.graph, depth_q, k_q);
    const motion::FlowConfidence fc = net.predict(key, warped, depth_q);
    Tensor xi;
    try {
      xi = motion::gn_solve(out.graph, depth_q, fc.flow, fc.confidence, k_q, gn);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kDegenerateGeometry) throw;
      out.degenerate = true;
      break;
    }
    if (truth) out.flow_terms.push_back(losses::flow_loss(out.graph, xi, *truth, depth_q, k_q));
    out.last_base = out.graph;
    out.last_xi = xi;
    out.graph = motion::retract(out.graph, xi.detach());
  }
  return out;
}

PoseGraph initial_graph(const TrainConfig& c, std::size_t key) {
  return motion::initialize_poses(c.window, key, c.prior);
}

// Epoch order: indices sorted by a per-(stage, epoch) hash.
std::vector<std::size_t> epoch_order(const TrainConfig& c, std::size_t stage, std::size_t epoch, std::size_t n) {
  std::vector<std::pair<std::uint64_t, std::size_t>> keyed(n);
  for (std::size_t i = 0; i < n; ++i) keyed[i] = {draw(c.seed, stage, epoch, i), i};
  std::sort(keyed.begin(), keyed.end());
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = keyed[i].second;
  return out;
}

void checkpoint_if(const TrainOptions& o, const std::string& name, const TrainState& state) {
  if (o.out_dir.empty()) return;
  fs::create_directories(o.out_dir);
  save_checkpoint(o.out_dir / name, state);
}

[[noreturn]] void abort_non_finite(const TrainOptions& o, const TrainState& state, const LogRow& row) {
  std::string where = "no checkpoint written";
  if (!o.out_dir.empty()) {
    checkpoint_if(o, "aborted.ckpt", state);
    where = "last checkpoint " + (o.out_dir / "aborted.ckpt").string();
  }
  throw Error(ErrorCode::kNonFiniteLoss, "loss is not finite at step " + std::to_string(row.step) + " (stage " +
                                             std::to_string(row.stage) + "); " + where);
}

bool finite(double v) { return std::isfinite(v); }

}  // namespace

// ---------------------------------------------------------------------------
// Config

TrainConfig parse_train_config(const nlohmann::json& j) {
  TrainConfig c;
  if (j.is_null()) return c;
  try {
    reject_unknown(j,
                   {"seed", "window", "stage1", "stage2", "learning_rate", "cache_probability", "motion_steps",
                    "iterations", "initial_depth", "semi_supervised", "pose_prior", "depthnet", "motionnet", "losses",
                    "gauss_newton"},
                   "train config");
    read(j, "seed", c.seed);
    read(j, "window", c.window);
    if (j.contains("stage1")) c.stage1 = parse_stage(j.at("stage1"), "stage1", c.stage1);
    if (j.contains("stage2")) c.stage2 = parse_stage(j.at("stage2"), "stage2", c.stage2);
    read(j, "learning_rate", c.learning_rate);
    if (j.contains("cache_probability")) {
      const auto& p = j.at("cache_probability");
      reject_unknown(p, {"start", "max"}, "cache_probability");
      read(p, "start", c.cache_probability_start);
      read(p, "max", c.cache_probability_max);
    }
    read(j, "motion_steps", c.motion_steps);
    read(j, "iterations", c.iterations);
    if (j.contains("initial_depth") && !j.at("initial_depth").is_null())
      c.initial_depth = j.at("initial_depth").get<double>();
    read(j, "semi_supervised", c.semi_supervised);
    if (j.contains("pose_prior")) c.prior = motion::parse_pose_prior(j.at("pose_prior"));
    if (j.contains("depthnet")) {
      const auto& d = j.at("depthnet");
      reject_unknown(d,
                     {"feature_channels", "encoder_channels", "matching_channels", "regularizer_blocks",
                      "regularizer_hidden", "uncertainty_hidden", "depth_bins", "z_min", "z_max"},
                     "depthnet");
      read(d, "feature_channels", c.depth.feature_channels);
      read(d, "encoder_channels", c.depth.encoder_channels);
      read(d, "matching_channels", c.depth.matching_channels);
      read(d, "regularizer_blocks", c.depth.regularizer_blocks);
      read(d, "regularizer_hidden", c.depth.regularizer_hidden);
      read(d, "uncertainty_hidden", c.depth.uncertainty_hidden);
      read(d, "depth_bins", c.depth.depth_bins);
      read(d, "z_min", c.depth.z_min);
      read(d, "z_max", c.depth.z_max);
    }
    if (j.contains("motionnet")) {
      const auto& m = j.at("motionnet");
      reject_unknown(m, {"feature_channels", "encoder_channels", "hidden"}, "motionnet");
      read(m, "feature_channels", c.motion.feature_channels);
      read(m, "encoder_channels", c.motion.encoder_channels);
      read(m, "hidden", c.motion.hidden);
    }
    if (j.contains("losses")) c.weights = losses::parse_loss_weights(j.at("losses"));
    if (j.contains("gauss_newton")) {
      const auto& g = j.at("gauss_newton");
      reject_unknown(g, {"damping", "confidence_threshold", "min_pixels"}, "gauss_newton");
      read(g, "damping", c.gauss_newton.damping);
      read(g, "confidence_threshold", c.gauss_newton.confidence_threshold);
      read(g, "min_pixels", c.gauss_newton.min_pixels);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfigError, std::string("train config: ") + e.what());
  }
  // The sigma mapping lives with the loss weights; the network reads the same values.
  c.depth.sigma_scale = c.weights.sigma_scale;
  c.depth.sigma_offset = c.weights.sigma_offset;
  validate(c);
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  const auto& d = c.depth;
  return {{"seed", c.seed},
          {"window", c.window},
          {"stage1", stage_json(c.stage1)},
          {"stage2", stage_json(c.stage2)},
          {"learning_rate", c.learning_rate},
          {"cache_probability", {{"start", c.cache_probability_start}, {"max", c.cache_probability_max}}},
          {"motion_steps", c.motion_steps},
          {"iterations", c.iterations},
          {"initial_depth", c.initial_depth ? nlohmann::json(*c.initial_depth) : nlohmann::json(nullptr)},
          {"semi_supervised", c.semi_supervised},
          {"pose_prior", motion::to_json(c.prior)},
          {"depthnet",
           {{"feature_channels", d.feature_channels},
            {"encoder_channels", d.encoder_channels},
            {"matching_channels", d.matching_channels},
            {"regularizer_blocks", d.regularizer_blocks},
            {"regularizer_hidden", d.regularizer_hidden},
            {"uncertainty_hidden", d.uncertainty_hidden},
            {"depth_bins", d.depth_bins},
            {"z_min", d.z_min},
            {"z_max", d.z_max}}},
          {"motionnet",
           {{"feature_channels", c.motion.feature_channels},
            {"encoder_channels", c.motion.encoder_channels},
            {"hidden", c.motion.hidden}}},
          {"losses", losses::to_json(c.weights)},
          {"gauss_newton",
           {{"damping", c.gauss_newton.damping},
            {"confidence_threshold", c.gauss_newton.confidence_threshold},
            {"min_pixels", c.gauss_newton.min_pixels}}}};
}

double cache_probability(const TrainConfig& c, std::size_t epoch) {
  if (c.stage2.epochs <= 1) return c.stage2.epochs == 1 ? c.cache_probability_start : c.cache_probability_max;
  const double t = std::min(1.0, static_cast<double>(epoch) / static_cast<double>(c.stage2.epochs - 1));
  return c.cache_probability_start + t * (c.cache_probability_max - c.cache_probability_start);
}

// ---------------------------------------------------------------------------
// Model and checkpoints

Model::Model(const TrainConfig& c) : depth(c.depth, mix(c.seed ^ 0xD1ULL)), motion(c.motion, mix(c.seed ^ 0xA7ULL)) {}

TrainState::TrainState(const TrainConfig& c)
    : model(c),
      depth_optimizer(grad::RmsPropOptions{c.learning_rate, 0.9, 1e-8}),
      motion_optimizer(grad::RmsPropOptions{c.learning_rate, 0.9, 1e-8}) {}

namespace {

void add_optimizer(std::vector<grad::CheckpointEntry>& out, const grad::RmsProp& opt, const std::string& prefix) {
  for (const auto& [name, v] : opt.state()) out.push_back({prefix + name, {v.size()}, v});
}

}  // namespace

void save_checkpoint(const fs::path& path, const TrainState& state) {
  std::vector<grad::CheckpointEntry> entries = grad::to_entries(state.model.depth.params(), "depth/");
  const auto motion = grad::to_entries(state.model.motion.params(), "motion/");
  entries.insert(entries.end(), motion.begin(), motion.end());
  add_optimizer(entries, state.depth_optimizer, "opt/depth/");
  add_optimizer(entries, state.motion_optimizer, "opt/motion/");
  entries.push_back({"meta/counters",
                     {3},
                     {static_cast<double>(state.stage), static_cast<double>(state.epoch),
                      static_cast<double>(state.step)}});
  for (std::size_t i = 0; i < state.cache.size(); ++i) {
    if (!state.cache[i].defined()) continue;
    const auto v = state.cache[i].values();
    entries.push_back({"cache/" + std::to_string(i), state.cache[i].shape(), {v.begin(), v.end()}});
  }
  write_checkpoint(path, entries);
}

TrainState load_checkpoint(const fs::path& path, const TrainConfig& config) {
  const auto entries = grad::read_checkpoint(path);
  TrainState state(config);
  grad::load_entries(state.model.depth.params(), entries, "depth/");
  grad::load_entries(state.model.motion.params(), entries, "motion/");
  bool counters = false;
  auto starts = [](const std::string& s, const char* p) { return s.rfind(p, 0) == 0; };
  for (const auto& e : entries) {
    if (starts(e.name, "opt/depth/")) {
      state.depth_optimizer.state()[e.name.substr(10)] = e.values;
    } else if (starts(e.name, "opt/motion/")) {
      state.motion_optimizer.state()[e.name.substr(11)] = e.values;
    } else if (e.name == "meta/counters") {
      if (e.values.size() != 3) throw Error(ErrorCode::kCheckpointMismatch, path.string() + ": bad counters");
      state.stage = static_cast<std::size_t>(e.values[0]);
      state.epoch = static_cast<std::size_t>(e.values[1]);
      state.step = static_cast<std::size_t>(e.values[2]);
      counters = true;
    } else if (starts(e.name, "cache/")) {
      const std::size_t i = std::stoul(e.name.substr(6));
      if (state.cache.size() <= i) state.cache.resize(i + 1);
      state.cache[i] = Tensor::from(e.shape, e.values);
    }
  }
  if (!counters) throw Error(ErrorCode::kCheckpointMismatch, path.string() + ": no training counters");
  for (const auto* opt : {&state.depth_optimizer, &state.motion_optimizer}) {
    const auto& params = opt == &state.depth_optimizer ? state.model.depth.params() : state.model.motion.params();
    for (const auto& [name, v] : opt->state()) {
      if (!params.contains(name) || params.get(name).numel() != v.size())
        throw Error(ErrorCode::kCheckpointMismatch, path.string() + ": optimizer state for unknown '" + name + "'");
    }
  }
  return state;
}

std::string log_line(const LogRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%zu,%zu,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%zu", r.step, r.stage,
                r.epoch, r.total, r.l1, r.smooth, r.focal, r.flow, r.depth_photo, r.motion_photo, r.se3,
                r.degenerate);
  return buf;
}

// ---------------------------------------------------------------------------
// Training

Tensor fill_nearest(const Tensor& depth, const Tensor& mask) {
  const std::size_t H = depth.dim(0), W = depth.dim(1);
  const auto z = depth.values();
  const auto m = mask.values();
  std::vector<std::size_t> sources;
  for (std::size_t p = 0; p < H * W; ++p)
    if (m[p] > 0) sources.push_back(p);
  if (sources.empty()) throw Error(ErrorCode::kEmptySupervision, "no supervised pixel to fill from");
  std::vector<double> out(H * W);
  for (std::size_t p = 0; p < H * W; ++p) {
    if (m[p] > 0) {
      out[p] = z[p];
      continue;
    }
    const auto py = static_cast<std::ptrdiff_t>(p / W), px = static_cast<std::ptrdiff_t>(p % W);
    std::ptrdiff_t best = std::numeric_limits<std::ptrdiff_t>::max();
    std::size_t arg = sources.front();
    for (const std::size_t s : sources) {
      const auto dy = static_cast<std::ptrdiff_t>(s / W) - py, dx = static_cast<std::ptrdiff_t>(s % W) - px;
      const std::ptrdiff_t d = dy * dy + dx * dx;
      if (d < best) {
        best = d;
        arg = s;
      }
    }
    out[p] = z[arg];
  }
  return Tensor::from({H, W}, std::move(out));
}

void train_stage1(const std::vector<synth::Window>& data, const CameraIntrinsics& k, const TrainConfig& config,
                  TrainState& state, const TrainOptions& options) {
  const std::vector<Prepared> prep = prepare(data, config, k);
  if (state.stage != 1) return;
  const CameraIntrinsics kq = k.downscaled(4);
  const std::size_t batch = config.stage1.batch;
  std::size_t stage_steps = 0;
  for (std::size_t e = 0; e < state.epoch; ++e) stage_steps += (prep.size() + batch - 1) / batch;
  bool budget_hit = config.stage1.max_steps > 0 && stage_steps >= config.stage1.max_steps;
  while (state.epoch < config.stage1.epochs && !budget_hit) {
    const auto order = epoch_order(config, 1, state.epoch, prep.size());
    for (std::size_t b = 0; b < order.size(); b += batch) {
      const std::size_t end = std::min(order.size(), b + batch);
      state.model.motion.params().zero_grad();
      LogRow row;
      row.stage = 1;
      row.epoch = state.epoch;
      row.step = state.step;
      std::size_t contributing = 0;
      for (std::size_t bi = b; bi < end; ++bi) {
        const std::size_t i = order[bi];
        const auto& w = data[i];
        const auto& p = prep[i];
        const MotionPass mp = run_motion(state.model.motion, w.images, initial_graph(config, w.key), p.filled_quarter,
                                         kq, config.motion_steps, &p.truth, config.gauss_newton);
        if (mp.degenerate) ++row.degenerate;
        if (mp.flow_terms.empty()) continue;
        Tensor loss = grad::scale(losses::sequence_loss(mp.flow_terms, config.weights.gamma),
                                  config.weights.supervised[3]);
        row.flow += mp.flow_terms.back().item();
        if (config.semi_supervised) {
          const Tensor se3 = losses::se3_geodesic(mp.last_base, mp.last_xi, p.truth, config.weights.beta);
          loss = grad::add(loss, grad::scale(se3, config.weights.semi[3]));
          row.se3 += se3.item();
        }
        row.total += loss.item();
        ++contributing;
        if (!finite(loss.item())) abort_non_finite(options, state, row);
        grad::backward(grad::scale(loss, 1.0 / static_cast<double>(end - b)));
      }
      if (contributing > 0) {
        const double n = static_cast<double>(contributing);
        row.total /= n;
        row.flow /= n;
        row.se3 /= n;
        state.motion_optimizer.step(state.model.motion.params());
      }
      ++state.step;
      ++stage_steps;
      if (options.on_step) options.on_step(row);
      if (config.stage1.max_steps > 0 && stage_steps >= config.stage1.max_steps) {
        budget_hit = true;
        break;
      }
    }
    ++state.epoch;
    checkpoint_if(options, "latest.ckpt", state);
  }
  state.stage = 2;
  state.epoch = 0;
  checkpoint_if(options, "stage1.ckpt", state);
  checkpoint_if(options, "latest.ckpt", state);
}

void train_stage2(const std::vector<synth::Window>& data, const CameraIntrinsics& k, const TrainConfig& config,
                  TrainState& state, const TrainOptions& options) {
  const std::vector<Prepared> prep = prepare(data, config, k);
  if (state.stage == 1) throw Error(ErrorCode::kConfigError, "stage 2 needs a finished stage-1 checkpoint");
  if (state.stage != 2) return;
  const CameraIntrinsics kq = k.downscaled(4);
  const auto& hyp = state.model.depth.hypothesis();
  const std::size_t batch = config.stage2.batch;
  state.cache.resize(prep.size());
  std::size_t stage_steps = 0;
  for (std::size_t e = 0; e < state.epoch; ++e) stage_steps += (prep.size() + batch - 1) / batch;
  bool budget_hit = config.stage2.max_steps > 0 && stage_steps >= config.stage2.max_steps;
  while (state.epoch < config.stage2.epochs && !budget_hit) {
    const double p_cache = cache_probability(config, state.epoch);
    std::vector<Tensor> next_cache = state.cache;
    const auto order = epoch_order(config, 2, state.epoch, prep.size());
    for (std::size_t b = 0; b < order.size(); b += batch) {
      const std::size_t end = std::min(order.size(), b + batch);
      state.model.motion.params().zero_grad();
      state.model.depth.params().zero_grad();
      LogRow row;
      row.stage = 2;
      row.epoch = state.epoch;
      row.step = state.step;
      for (std::size_t bi = b; bi < end; ++bi) {
        const std::size_t i = order[bi];
        const auto& w = data[i];
        const auto& p = prep[i];
        const bool use_cache =
            state.cache[i].defined() && unit(draw(config.seed ^ 0xCAC4EULL, state.epoch, i, 0)) < p_cache;
        const Tensor depth_in = use_cache ? state.cache[i] : p.filled_quarter;
        const MotionPass mp = run_motion(state.model.motion, w.images, initial_graph(config, w.key), depth_in, kq,
                                         config.motion_steps, &p.truth, config.gauss_newton);
        if (mp.degenerate) ++row.degenerate;
        const depthnet::DepthOutput out = state.model.depth.forward(w.images, mp.graph.poses, k, w.key);
        std::vector<Tensor> depths, probs;
        for (const auto& pr : out.predictions) {
          depths.push_back(depthnet::upsample(pr.depth));
          probs.push_back(pr.probabilities);
        }
        Tensor loss;
        if (config.semi_supervised) {
          losses::SemiSupervisedInputs in{depths, w.images, mp.last_base, mp.last_xi, p.truth, k};
          if (!mp.last_xi.defined()) {
            in.base = mp.graph;
            in.xi = Tensor::zeros({config.window - 1, 6});
          }
          const losses::SemiTerms t = losses::total_semi_supervised(in, config.weights);
          loss = t.total;
          row.depth_photo += t.depth_photo;
          row.smooth += t.smooth;
          row.motion_photo += t.motion_photo;
          row.se3 += t.se3;
        } else {
          losses::SupervisedInputs in{depths,  probs,      out.uncertainty.sigma, mp.flow_terms, p.image,
                                     w.depth, w.supervision, p.quarter};
          const losses::LossTerms t = losses::total_supervised(in, hyp, config.weights);
          loss = t.total;
          row.l1 += t.l1;
          row.smooth += t.smooth;
          row.focal += t.focal;
          row.flow += t.flow;
        }
        row.total += loss.item();
        if (!finite(loss.item())) abort_non_finite(options, state, row);
        grad::backward(grad::scale(loss, 1.0 / static_cast<double>(end - b)));
        next_cache[i] = out.predictions.back().depth.detach();
      }
      const double n = static_cast<double>(end - b);
      for (double* v : {&row.total, &row.l1, &row.smooth, &row.focal, &row.flow, &row.depth_photo,
                        &row.motion_photo, &row.se3})
        *v /= n;
      state.motion_optimizer.step(state.model.motion.params());
      state.depth_optimizer.step(state.model.depth.params());
      ++state.step;
      ++stage_steps;
      if (options.on_step) options.on_step(row);
      if (config.stage2.max_steps > 0 && stage_steps >= config.stage2.max_steps) {
        budget_hit = true;
        break;
      }
    }
    state.cache = std::move(next_cache);
    ++state.epoch;
    checkpoint_if(options, "latest.ckpt", state);
  }
  state.stage = 3;
  state.epoch = 0;
  checkpoint_if(options, "stage2.ckpt", state);
  checkpoint_if(options, "latest.ckpt", state);
}

// ---------------------------------------------------------------------------
// Inference

InferenceResult infer(const Model& model, const Tensor& images, const CameraIntrinsics& k, const TrainConfig& config,
                      std::size_t iterations) {
  if (images.rank() != 4 || images.dim(0) != config.window)
    throw Error(ErrorCode::kShapeMismatch, "inference window " + grad::shape_str(images.shape()) + " but the model uses " +
                                               std::to_string(config.window) + " frames");
  if (iterations == 0) throw Error(ErrorCode::kInvalidConfig, "iterations must be at least 1");
  grad::NoGradGuard no_grad;
  const auto& hyp = model.depth.hypothesis();
  const CameraIntrinsics kq = k.downscaled(4);
  const std::size_t key = config.window / 2;
  const double z0 = config.initial_depth.value_or(0.5 * (hyp.z_min() + hyp.z_max()));

  InferenceResult r;
  r.poses = initial_graph(config, key);
  r.depth_quarter = Tensor::full({k.height / 4, k.width / 4}, z0);
  Tensor previous = Tensor::full({k.height, k.width}, z0);
  const Tensor features = model.motion.encode(images);
  const auto& s = features.shape();
  const Tensor key_features = grad::reshape(grad::slice(features, 0, key, key + 1), {s[1], s[2], s[3]});
  depthnet::DepthOutput out;
  for (std::size_t it = 0; it < iterations; ++it) {
    const Tensor warped = motion::warp_features(features, r.poses, r.depth_quarter, kq);
    const motion::FlowConfidence fc = model.motion.predict(key_features, warped, r.depth_quarter);
    const motion::GaussNewtonResult gn =
        motion::gauss_newton_update(r.poses, r.depth_quarter, fc.flow, fc.confidence, kq, config.gauss_newton);
    r.poses = gn.graph;
    r.degenerate = r.degenerate || gn.degenerate;
    ++r.motion_calls;

    out = model.depth.forward(images, r.poses.poses, k, key);
    ++r.depth_calls;
    r.depth_quarter = out.predictions.back().depth;
    const Tensor full = clamp_range(depthnet::upsample(r.depth_quarter), hyp.z_min(), hyp.z_max());
    const auto a = full.values();
    const auto b = previous.values();
    double change = 0.0;
    for (std::size_t p = 0; p < a.size(); ++p) change += std::abs(a[p] - b[p]);
    r.history.push_back(change / static_cast<double>(a.size()));
    previous = full;
  }
  r.depth = previous;
  r.sigma = depthnet::upsample(out.uncertainty.sigma);
  r.confidence = depthnet::upsample(out.uncertainty.confidence);
  r.uncertainty = grad::scale(depthnet::upsample(out.uncertainty.logit), -1.0);
  r.entropy = depthnet::upsample(depthnet::shannon_entropy(out.predictions.back().probabilities));
  return r;
}

}  // namespace sfmc::trainer
