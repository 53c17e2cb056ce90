// SPDX-License-Identifier: Apache-2.0
//
// Two-stage training and the alternating depth <-> motion inference loop.
//
// Stage 1 trains the motion network alone, fed with ground-truth depth whose
// holes are filled from the nearest supervised pixel. Stage 2 trains both
// networks jointly; the motion network sees the previous epoch's cached depth
// prediction with a probability that ramps linearly over the epochs.
//
// Motion runs at feature (quarter) resolution. Randomness comes from the
// config seed only: epoch orders and cache draws are hashed from
// (seed, stage, epoch, window), so a run resumed at an epoch boundary repeats
// the uninterrupted one exactly.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sfmc/depthnet.hpp"
#include "sfmc/grad/optim.hpp"
#include "sfmc/losses.hpp"
#include "sfmc/motion.hpp"
#include "sfmc/synthdata.hpp"

namespace sfmc::trainer {

using geometry::CameraIntrinsics;
using grad::Tensor;

struct StageConfig {
  std::size_t epochs = 0;
  std::size_t batch = 1;      // windows per optimizer step
  std::size_t max_steps = 0;  // 0 = no limit
};

struct TrainConfig {
  std::uint64_t seed = 1;
  std::size_t window = 5;               // frames 2n+1
  StageConfig stage1{5, 12, 0};
  StageConfig stage2{15, 3, 0};
  double learning_rate = 1e-4;
  double cache_probability_start = 0.0;
  double cache_probability_max = 0.9;
  std::size_t motion_steps = 3;         // unrolled Gauss-Newton updates per training window
  std::size_t iterations = 5;           // inference alternations
  std::optional<double> initial_depth;  // inference start; mid-range when unset
  bool semi_supervised = false;
  motion::PosePrior prior;
  depthnet::DepthNetConfig depth;
  motion::MotionNetConfig motion;
  losses::LossWeights weights;
  motion::GaussNewtonOptions gauss_newton;
};

/// Missing keys keep defaults; malformed values throw ConfigError, values
/// out of range InvalidConfig.
TrainConfig parse_train_config(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& c);

/// p(epoch) for stage 2: linear from start (epoch 0) to max (last epoch).
double cache_probability(const TrainConfig& c, std::size_t epoch);

// ---------------------------------------------------------------------------
// Model and checkpoints

struct Model {
  depthnet::DepthNet depth;
  motion::MotionNet motion;

  explicit Model(const TrainConfig& c);
};

/// Everything a resumed run needs: parameters, optimizer state, counters and
/// the cached depth predictions.
struct TrainState {
  Model model;
  grad::RmsProp depth_optimizer;
  grad::RmsProp motion_optimizer;
  std::size_t stage = 1;         // stage currently in progress (3 = done)
  std::size_t epoch = 0;         // completed epochs of that stage
  std::size_t step = 0;          // optimizer steps over the whole run
  std::vector<Tensor> cache;     // quarter-res depth per training window (undefined = empty)

  explicit TrainState(const TrainConfig& c);
};

void save_checkpoint(const std::filesystem::path& path, const TrainState& state);
/// Throws CheckpointMismatch when names or shapes disagree with `config`.
TrainState load_checkpoint(const std::filesystem::path& path, const TrainConfig& config);

// ---------------------------------------------------------------------------
// Training

struct LogRow {
  std::size_t step = 0;
  std::size_t stage = 0;
  std::size_t epoch = 0;
  double total = 0.0;
  double l1 = 0.0;
  double smooth = 0.0;
  double focal = 0.0;
  double flow = 0.0;
  double depth_photo = 0.0;
  double motion_photo = 0.0;
  double se3 = 0.0;
  std::size_t degenerate = 0;  // windows of this step whose GN system failed
};

inline constexpr const char* kLogHeader =
    "step,stage,epoch,total,l1,smooth,focal,flow,depth_photo,motion_photo,se3,degenerate";
std::string log_line(const LogRow& row);

struct TrainOptions {
  std::filesystem::path out_dir;  // checkpoints after every epoch; empty = none
  std::function<void(const LogRow&)> on_step;
};

/// Filled ground truth: every pixel takes the depth of the nearest supervised
/// pixel (Euclidean, first in scan order on ties). Throws EmptySupervision
/// when nothing is supervised.
Tensor fill_nearest(const Tensor& depth, const Tensor& mask);

/// Runs the remaining stage-1 epochs of `state`. Throws EmptyDataset for no
/// windows and NonFiniteLoss (after saving `aborted.ckpt` when out_dir is set).
void train_stage1(const std::vector<synth::Window>& data, const CameraIntrinsics& k, const TrainConfig& config,
                  TrainState& state, const TrainOptions& options = {});
/// Runs the remaining stage-2 epochs; the state must have finished stage 1.
void train_stage2(const std::vector<synth::Window>& data, const CameraIntrinsics& k, const TrainConfig& config,
                  TrainState& state, const TrainOptions& options = {});

// ---------------------------------------------------------------------------
// Inference

struct InferenceResult {
  motion::PoseGraph poses;
  Tensor depth;          // [H,W], clamped to the bin range
  Tensor sigma;          // [H,W]
  Tensor confidence;     // f [H,W]
  Tensor uncertainty;    // -logit [H,W]: increasing in sigma, free of saturation ties
  Tensor entropy;        // [H,W]
  Tensor depth_quarter;  // [H/4,W/4]
  std::vector<double> history;  // mean |dZ| (full res) per iteration
  std::size_t motion_calls = 0;
  std::size_t depth_calls = 0;
  bool degenerate = false;      // some Gauss-Newton step was skipped
};

/// `iterations` rounds of (motion update, depth update) from a constant depth
/// and the configured pose prior. Throws ShapeMismatch when the window length
/// differs from the config.
InferenceResult infer(const Model& model, const Tensor& images, const CameraIntrinsics& k, const TrainConfig& config,
                      std::size_t iterations);

}  // namespace sfmc::trainer
