// SPDX-License-Identifier: Apache-2.0
//
// Depth branch: feature encoder, plane-sweep cost volume, 3D regularization,
// soft-argmax depth head, entropy, and the learned confidence head.
//
// Layouts (channels first):
//   images        [F,3,H,W]
//   features      [F,L,H/4,W/4]
//   pair volumes  [F-1,2L,D,H/4,W/4] (key half first, warped half second)
//   cost volume   [1,2L,D,H/4,W/4]   (pair volumes mean-pooled)
//   probabilities [D,H/4,W/4]        (softmax over axis 0)
//   depth, sigma  [H/4,W/4] or [H,W] after upsampling
#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "sfmc/geometry.hpp"
#include "sfmc/grad/ops.hpp"
#include "sfmc/grad/optim.hpp"
#include "sfmc/grad/tensor.hpp"

namespace sfmc::depthnet {

using grad::ParameterStore;
using grad::Tensor;

/// Linearly spaced depth bins z_1 < ... < z_D.
class DepthHypothesis {
 public:
  DepthHypothesis(double z_min, double z_max, std::size_t count);

  [[nodiscard]] std::size_t size() const { return bins_.size(); }
  [[nodiscard]] double operator[](std::size_t d) const { return bins_[d]; }
  [[nodiscard]] const std::vector<double>& bins() const { return bins_; }
  [[nodiscard]] double z_min() const { return bins_.front(); }
  [[nodiscard]] double z_max() const { return bins_.back(); }
  [[nodiscard]] double spacing() const;
  /// Bins as a [D,1,1] constant for broadcasting against [D,h,w].
  [[nodiscard]] Tensor as_tensor() const;

 private:
  std::vector<double> bins_;
};

struct DepthNetConfig {
  std::size_t feature_channels = 8;  // L
  std::size_t encoder_channels = 8;
  std::size_t matching_channels = 8;  // per-pair 1x1x1 matching layer width
  std::size_t regularizer_blocks = 2;  // m intermediate predictions
  std::size_t regularizer_hidden = 4;
  std::size_t uncertainty_hidden = 4;
  std::size_t depth_bins = 32;
  double z_min = 1.0;
  double z_max = 80.0;
  double sigma_scale = 2.0;   // s
  double sigma_offset = 0.25; // epsilon
};

// ---------------------------------------------------------------------------
// Encoder (shared layout with the motion network's own encoder)

/// Registers a 3-layer conv2d stack: stride 2, stride 2, stride 1, all 3x3.
void add_encoder_params(ParameterStore& params, const std::string& prefix, std::size_t in_channels,
                        std::size_t hidden, std::size_t out_channels, std::mt19937_64& rng);

/// images [F,C,H,W] -> features [F,L,H/4,W/4]. Relu after the first two
/// layers; the last layer is linear. Throws ResolutionError unless H and W
/// are divisible by 4.
Tensor encode_features(const ParameterStore& params, const std::string& prefix, const Tensor& images);

// ---------------------------------------------------------------------------
// Cost volume

/// Sampling coordinates [2,D,h,w] of keyframe pixels at every bin, seen from
/// a frame with relative pose `key_to_frame`. Invalid reprojections (behind
/// the camera or outside the view) get an off-grid coordinate, so sampling
/// there reads exactly zero.
Tensor sweep_coordinates(const geometry::Se3Pose& key_to_frame, const geometry::CameraIntrinsics& k_quarter,
                         const DepthHypothesis& hyp);

/// For every non-key frame i (in frame order): key features broadcast over D,
/// concatenated with F^i sampled at Psi(g_key->i, x_k, z_d). Throws
/// NeedMultipleViews for fewer than 2 frames.
Tensor build_pair_volumes(const Tensor& features, const std::vector<geometry::Se3Pose>& poses,
                          const geometry::CameraIntrinsics& k_quarter, const DepthHypothesis& hyp,
                          std::size_t key);

/// Pair volumes mean-pooled over frames: [1,2L,D,h,w].
Tensor build_cost_volume(const Tensor& features, const std::vector<geometry::Se3Pose>& poses,
                         const geometry::CameraIntrinsics& k_quarter, const DepthHypothesis& hyp,
                         std::size_t key);

/// Negative squared L2 distance between the key half and the warped half of
/// a cost volume: [D,h,w].
Tensor matching_score(const Tensor& volume);

// ---------------------------------------------------------------------------
// Heads

struct DepthPrediction {
  Tensor probabilities;  // [D,h,w]
  Tensor depth;          // [h,w]
};

struct UncertaintyPrediction {
  Tensor logit;       // pre-sigmoid a, f = sigmoid(a); ranks like sigma without saturating
  Tensor confidence;  // f in [0,1], [h,w]
  Tensor sigma;       // s (1 - f) + eps, [h,w]
};

/// Sum_d P(z_d) z_d over axis 0 of P [D,h,w].
Tensor soft_argmax(const Tensor& probabilities, const DepthHypothesis& hyp);

/// -Sum_d P log P per pixel with 0 log 0 = 0. Not differentiable; returns a
/// constant [h,w].
Tensor shannon_entropy(const Tensor& probabilities);

/// sigma = s (1 - f) + eps.
Tensor sigma_from_confidence(const Tensor& confidence, double s, double eps);

/// Bilinear 4x upsampling of [h,w] to [4h,4w] on the encoder's grid: full-res
/// pixel X reads quarter-res coordinate X/4, matching intrinsics downscaled by 4.
Tensor upsample(const Tensor& map);

struct DepthOutput {
  Tensor volume;                       // pooled matching volume [1,Cm,D,h,w]
  std::vector<Tensor> regularized;     // m volumes
  std::vector<DepthPrediction> predictions;  // one per regularized volume
  UncertaintyPrediction uncertainty;   // from the last regularized volume
};

class DepthNet {
 public:
  DepthNet(const DepthNetConfig& config, std::uint64_t seed);

  [[nodiscard]] const DepthNetConfig& config() const { return config_; }
  [[nodiscard]] const DepthHypothesis& hypothesis() const { return hyp_; }
  [[nodiscard]] ParameterStore& params() { return params_; }
  [[nodiscard]] const ParameterStore& params() const { return params_; }

  [[nodiscard]] Tensor encode(const Tensor& images) const;
  /// Per-pair 1x1x1 conv + relu on the pair volumes, then mean pooling. The
  /// nonlinearity before pooling keeps misregistration in opposite-side views
  /// from cancelling out in the mean.
  [[nodiscard]] Tensor match_and_pool(const Tensor& pair_volumes) const;
  /// Residual blocks x <- x + conv(relu(conv(x))); each block's output is one
  /// intermediate volume.
  [[nodiscard]] std::vector<Tensor> regularize(const Tensor& volume) const;
  /// 1x1x1 conv to one score per bin, softmax over depth, soft-argmax.
  [[nodiscard]] DepthPrediction depth_head(std::size_t block, const Tensor& volume) const;
  /// Four 3x3x3 convs (relu between), sum over depth, sigmoid.
  [[nodiscard]] UncertaintyPrediction uncertainty_head(const Tensor& volume) const;

  /// Full pass over one window. `k_full` are full-resolution intrinsics.
  [[nodiscard]] DepthOutput forward(const Tensor& images, const std::vector<geometry::Se3Pose>& poses,
                                    const geometry::CameraIntrinsics& k_full, std::size_t key) const;

 private:
  DepthNetConfig config_;
  DepthHypothesis hyp_;
  ParameterStore params_;
};

}  // namespace sfmc::depthnet
