// SPDX-License-Identifier: Apache-2.0
//
// Pose branch: residual-flow / confidence network and the Gauss-Newton pose
// update over keyframe -> frame edges.
//
// For every non-key frame i and keyframe pixel x_k with depth Z_k the target
// is x^_k = Psi(g_i g_key^-1, x_k, Z_k) + R_k. One Gauss-Newton step solves
//   min_xi  sum_k W_k || Psi(exp(xi_i) g_i g_key^-1, x_k, Z_k) - x^_k ||^2
// jointly for all frames (keyframe gauge fixed) and retracts g_i <- exp(xi_i) g_i.
#pragma once

#include <cstddef>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sfmc/geometry.hpp"
#include "sfmc/grad/optim.hpp"
#include "sfmc/grad/tensor.hpp"

namespace sfmc::motion {

using geometry::CameraIntrinsics;
using geometry::Se3Pose;
using grad::ParameterStore;
using grad::Tensor;

inline constexpr double kDefaultDamping = 1e-4;
inline constexpr double kConfidenceThreshold = 0.01;
inline constexpr std::size_t kMinConstrainedPixels = 6;

struct PoseGraph {
  std::vector<Se3Pose> poses;
  std::size_t key = 0;

  [[nodiscard]] std::size_t size() const { return poses.size(); }
  /// g_ij = g_j g_i^-1.
  [[nodiscard]] Se3Pose relative(std::size_t i, std::size_t j) const { return poses[j] * poses[i].inverse(); }
  /// Indices of all frames except the keyframe, ascending.
  [[nodiscard]] std::vector<std::size_t> others() const;
};

// ---------------------------------------------------------------------------
// Initialization and trajectory I/O

/// Per-frame translation increment applied to the pose translation:
/// t_t = velocity * (t - key). Zero velocity gives all-identity poses.
struct PosePrior {
  geometry::Vector3 velocity = geometry::Vector3::Zero();
};

/// {"type": "identity"} or {"type": "constant_velocity", "velocity": [x,y,z]};
/// anything else throws ConfigError.
PosePrior parse_pose_prior(const nlohmann::json& j);
nlohmann::json to_json(const PosePrior& prior);

PoseGraph initialize_poses(std::size_t frames, std::size_t key, const PosePrior& prior = {});

/// CSV with header frame,tx,ty,tz,qw,qx,qy,qz.
void write_trajectory(const std::filesystem::path& path, const std::vector<Se3Pose>& poses,
                      std::size_t first_frame = 0);
std::vector<Se3Pose> read_trajectory(const std::filesystem::path& path);
std::string trajectory_row(std::size_t frame, const Se3Pose& pose);

// ---------------------------------------------------------------------------
// Reprojection helpers

/// Coordinates [2,h,w] of keyframe pixels with depth Z [h,w] reprojected by
/// `key_to_frame`; invalid pixels get an off-grid coordinate. `valid`
/// receives 1/0 per pixel when non-null.
Tensor reprojected_coordinates(const Se3Pose& key_to_frame, const Tensor& depth, const CameraIntrinsics& k,
                               std::vector<double>* valid = nullptr);

/// Features of every non-key frame sampled at the current reprojection of
/// the keyframe pixels: [P,L,h,w] with P = F - 1, in PoseGraph::others()
/// order. Differentiable w.r.t. the features.
Tensor warp_features(const Tensor& features, const PoseGraph& graph, const Tensor& depth, const CameraIntrinsics& k);

// ---------------------------------------------------------------------------
// Network

struct MotionNetConfig {
  std::size_t feature_channels = 8;
  std::size_t encoder_channels = 8;
  std::size_t hidden = 16;
};

struct FlowConfidence {
  Tensor flow;        // R [P,2,h,w], pixels at feature resolution
  Tensor confidence;  // W [P,1,h,w], sigmoid output
};

class MotionNet {
 public:
  MotionNet(const MotionNetConfig& config, std::uint64_t seed);

  [[nodiscard]] const MotionNetConfig& config() const { return config_; }
  [[nodiscard]] ParameterStore& params() { return params_; }
  [[nodiscard]] const ParameterStore& params() const { return params_; }

  [[nodiscard]] Tensor encode(const Tensor& images) const;
  /// Three conv2d layers on [key features, warped features, 1/Z]. `key` is
  /// [L,h,w], `warped` [P,L,h,w], `depth` [h,w].
  [[nodiscard]] FlowConfidence predict(const Tensor& key_features, const Tensor& warped, const Tensor& depth) const;

 private:
  MotionNetConfig config_;
  ParameterStore params_;
};

// ---------------------------------------------------------------------------
// Gauss-Newton

struct GaussNewtonOptions {
  double damping = kDefaultDamping;
  double confidence_threshold = kConfidenceThreshold;
  std::size_t min_pixels = kMinConstrainedPixels;
};

/// Analytic d Psi(exp(xi) g, x, Z) / d xi at xi = 0 for the transformed
/// point Y = g X: J_pi(Y) [I | -[Y]x] (2x6).
Eigen::Matrix<double, 2, 6> reprojection_jacobian(const geometry::Vector3& transformed, const CameraIntrinsics& k);

/// Weighted reprojection objective of the residual sum for given updates.
double gn_objective(const PoseGraph& graph, const std::vector<geometry::Vector6>& xi, const Tensor& depth,
                    const Tensor& flow, const Tensor& confidence, const CameraIntrinsics& k);

/// One Gauss-Newton step as a graph op: returns xi [P,6] (one twist per
/// non-key frame). Differentiable w.r.t. `flow` and `confidence`; the poses
/// and depth are constants. Throws DegenerateGeometry when a frame has fewer
/// than `min_pixels` usable pixels or the damped system is not positive
/// definite.
Tensor gn_solve(const PoseGraph& graph, const Tensor& depth, const Tensor& flow, const Tensor& confidence,
                const CameraIntrinsics& k, const GaussNewtonOptions& options = {});

/// g_i <- exp(xi_i) g_i for every non-key frame.
PoseGraph retract(const PoseGraph& graph, const Tensor& xi);

struct GaussNewtonResult {
  PoseGraph graph;
  bool degenerate = false;  // pose unchanged when set
};

/// Non-throwing wrapper: degenerate systems leave the pose graph unchanged.
GaussNewtonResult gauss_newton_update(const PoseGraph& graph, const Tensor& depth, const Tensor& flow,
                                      const Tensor& confidence, const CameraIntrinsics& k,
                                      const GaussNewtonOptions& options = {});

/// Exact residual flow that moves the current reprojection onto the one
/// induced by `target`: [P,2,h,w].
Tensor induced_residual_flow(const PoseGraph& current, const PoseGraph& target, const Tensor& depth,
                             const CameraIntrinsics& k);

/// Coordinates [P,2,h,w] of Psi(exp(xi_i) g_i g_key^-1, x_k, Z_k) as a graph op,
/// differentiable w.r.t. xi [P,6] (through the SE3 left Jacobian). `valid`
/// receives 1/0 per (pair, pixel) when non-null.
Tensor induced_coordinates(const PoseGraph& base, const Tensor& xi, const Tensor& depth, const CameraIntrinsics& k,
                           std::vector<double>* valid = nullptr);

}  // namespace sfmc::motion
