// SPDX-License-Identifier: Apache-2.0
//
// Training objectives: supervised depth / flow / focal terms, smoothness,
// photometric reconstruction with minimum fusion, pose geodesic, and the
// sequence weighting over intermediate predictions.
//
// Masked terms are means over the masked set, not over all H*W pixels.
#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include <nlohmann/json.hpp>

#include "sfmc/depthnet.hpp"
#include "sfmc/geometry.hpp"
#include "sfmc/grad/tensor.hpp"
#include "sfmc/motion.hpp"

namespace sfmc::losses {

using geometry::CameraIntrinsics;
using geometry::Se3Pose;
using grad::Tensor;

inline constexpr double kLogFloor = 1e-12;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

enum class FocalVariant {
  kPrinted,   // sum_d (1 - P*)^-delta * (-P log P*)
  kPositive,  // sum_d (1 - P)^delta * (-P* log P)
};

struct LossWeights {
  std::array<double, 4> supervised{1.0, 0.02, 0.002, 1.0};  // depth l1, smooth, focal, flow
  std::array<double, 4> semi{10.0, 0.02, 10.0, 1.0};        // depth photo, smooth, motion photo, se3
  double gamma = 0.5;
  double delta = 2.0;
  double beta = 1.0;
  double alpha = 0.85;
  double sigma_scale = 2.0;
  double sigma_offset = 0.25;
  FocalVariant focal_variant = FocalVariant::kPrinted;
  bool focal_through_depth = true;  // false: the focal term trains only the uncertainty head
};

/// Missing keys keep their defaults; wrong types throw ConfigError.
LossWeights parse_loss_weights(const nlohmann::json& j);
nlohmann::json to_json(const LossWeights& w);

// ---------------------------------------------------------------------------
// Depth terms

/// Mean of |Z - Z*| over pixels where `valid` is nonzero. Z* and `valid` are
/// constants of Z's shape. Throws EmptySupervision when nothing is valid.
Tensor l1_depth(const Tensor& depth, const Tensor& target, const Tensor& valid);

/// mean_{M, x<W-1} |dZ/dx| + mean_{M, y<H-1} |dZ/dy| with forward differences;
/// each difference is masked by M at its left / upper pixel. Empty sets
/// contribute zero.
Tensor smoothness(const Tensor& depth, const Tensor& mask);
/// As smoothness() with per-axis weights exp(-|dI/dx|), exp(-|dI/dy|) of the
/// grayscale image [3,H,W].
Tensor smoothness_edge_aware(const Tensor& depth, const Tensor& image, const Tensor& mask);

/// Grayscale (Rec. 601 weights) of a [3,H,W] image as a constant [H,W].
Tensor grayscale(const Tensor& image);

/// P*(z_d) = softmax_d(-|z_d - Z*| / sigma): [D,h,w]. Differentiable w.r.t. sigma.
Tensor unimodal_target(const Tensor& target_depth, const Tensor& sigma, const depthnet::DepthHypothesis& hyp);

/// Masked mean over pixels of the per-pixel focal sum; see FocalVariant.
/// Logs are floored at 1e-12, and so is the base of the negative power.
Tensor focal_loss(const Tensor& probabilities, const Tensor& target, double delta, const Tensor& valid,
                  FocalVariant variant = FocalVariant::kPrinted);

/// Quarter-resolution supervision from full-resolution ground truth: pixel
/// (y,x) takes the supervised full-res pixel nearest to (4y,4x) within
/// [4y-1,4y+2] x [4x-1,4x+2] (scan order breaks ties).
struct QuarterSupervision {
  Tensor depth;  // [H/4,W/4], 0 where unsupervised
  Tensor mask;   // [H/4,W/4]
};
QuarterSupervision quarter_supervision(const Tensor& depth, const Tensor& mask);

// ---------------------------------------------------------------------------
// Pose terms

/// Mean over valid (pair, pixel) of |u - u*| + |v - v*|. `coords` [P,2,h,w]
/// may be differentiable; `target` (same shape) and `valid` [P,h,w] are
/// constants.
Tensor flow_loss(const Tensor& coords, const Tensor& target, const Tensor& valid);

/// Psi(exp(xi) g, x, Z) against Psi(g*, x, Z) over all key -> i edges; pixels
/// whose ground-truth reprojection is out of view are excluded.
Tensor flow_loss(const motion::PoseGraph& base, const Tensor& xi, const motion::PoseGraph& truth, const Tensor& depth,
                 const CameraIntrinsics& k);

/// ||t - t*|| + beta * angle(R*^T R) for one relative pose.
double se3_distance(const Se3Pose& pose, const Se3Pose& truth, double beta);

/// Mean of se3_distance over key -> i edges of exp(xi_i) g_i against the
/// ground truth. Differentiable w.r.t. xi [P,6]; both distances use a zero
/// subgradient where they vanish.
Tensor se3_geodesic(const motion::PoseGraph& base, const Tensor& xi, const motion::PoseGraph& truth, double beta);

// ---------------------------------------------------------------------------
// Photometric terms

/// Per-pixel SSIM [H,W] averaged over channels, 3x3 box windows with edge
/// replication.
Tensor ssim(const Tensor& a, const Tensor& b);

/// Per-pixel alpha (1 - SSIM)/2 + (1 - alpha) |I - I'|, both averaged over
/// channels: [H,W].
Tensor photometric(const Tensor& image, const Tensor& reconstructed, double alpha);

/// Per-pixel minimum over reference frames followed by the mean over pixels
/// valid in at least one pair. `maps` are [H,W]; `valid` are constant [H,W]
/// masks parallel to `maps`.
Tensor min_fusion(const std::vector<Tensor>& maps, const std::vector<Tensor>& valid);

/// Coordinates [2,H,W] of key pixels with depth Z reprojected by
/// `key_to_frame` as a graph op, differentiable w.r.t. the depth. `valid`
/// receives in-view flags.
Tensor depth_coordinates(const Se3Pose& key_to_frame, const Tensor& depth, const CameraIntrinsics& k,
                         std::vector<double>* valid = nullptr);

/// Shrinks a 0/1 mask [H,W] so every kept pixel has its 3x3 neighbourhood
/// inside the mask (photometric windows never touch invalid samples).
Tensor erode_mask(const std::vector<double>& mask, std::size_t height, std::size_t width);

// ---------------------------------------------------------------------------
// Aggregation

/// Sum_s gamma^(m-s) L_s.
Tensor sequence_loss(const std::vector<Tensor>& losses, double gamma);

struct SupervisedInputs {
  std::vector<Tensor> depths;         // full-res predictions Z_s [H,W]
  std::vector<Tensor> probabilities;  // P_s [D,h,w], parallel to depths
  Tensor sigma;                       // [h,w]
  std::vector<Tensor> flow_terms;     // L_flow per motion iteration; may be empty
  Tensor image;                       // key image [3,H,W]
  Tensor gt_depth;                    // [H,W]
  Tensor supervised;                  // [H,W], 1 where ground truth exists
  QuarterSupervision quarter;         // for the focal term
};

struct LossTerms {
  Tensor total;
  double l1 = 0.0;       // last prediction
  double smooth = 0.0;   // last prediction
  double focal = 0.0;    // last prediction
  double flow = 0.0;     // last iteration
};

/// Per prediction s: lambda1 L1 + lambda2 L_smooth(edge-aware, M = 1 - supervised)
/// + lambda3 L_focal, combined with sequence_loss; plus lambda4 times the
/// sequence-weighted flow terms. With `focal_through_depth` off the focal term
/// sees P_s detached and trains only the uncertainty head.
LossTerms total_supervised(const SupervisedInputs& in, const depthnet::DepthHypothesis& hyp, const LossWeights& w);

struct SemiSupervisedInputs {
  std::vector<Tensor> depths;        // full-res predictions Z_s [H,W]
  Tensor images;                     // [F,3,H,W]
  motion::PoseGraph base;            // poses before the last update
  Tensor xi;                         // last update [P,6]
  motion::PoseGraph truth;           // ground-truth poses for L_se3
  CameraIntrinsics k;                // full resolution
};

struct SemiTerms {
  Tensor total;
  double depth_photo = 0.0;
  double smooth = 0.0;
  double motion_photo = 0.0;
  double se3 = 0.0;
};

/// Per prediction: lambda^1 L_d,photo (poses constant) + lambda^2 L_smooth over
/// all in-view pixels, sequence-weighted; plus lambda^3 L_m,photo (depth
/// constant, poses through xi) and lambda^4 L_se3.
SemiTerms total_semi_supervised(const SemiSupervisedInputs& in, const LossWeights& w);

}  // namespace sfmc::losses
