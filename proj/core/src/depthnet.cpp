// SPDX-License-Identifier: Apache-2.0
#include "sfmc/depthnet.hpp"

#include <cmath>

#include "sfmc/error.hpp"

namespace sfmc::depthnet {

using geometry::CameraIntrinsics;
using geometry::Se3Pose;
using grad::Shape;

namespace {

// Far enough outside any image that all four bilinear taps are dropped.
constexpr double kOffGrid = -1e9;

std::size_t volume_channels(const DepthNetConfig& c) { return c.matching_channels; }

}  // namespace

DepthHypothesis::DepthHypothesis(double z_min, double z_max, std::size_t count) {
  if (count < 2 || !(z_min > 0.0) || !(z_max > z_min))
    throw Error(ErrorCode::kInvalidConfig, "depth range needs 0 < z_min < z_max and at least 2 bins");
  bins_.resize(count);
  const double step = (z_max - z_min) / static_cast<double>(count - 1);
  for (std::size_t d = 0; d < count; ++d) bins_[d] = z_min + step * static_cast<double>(d);
  bins_.back() = z_max;
}

double DepthHypothesis::spacing() const { return (z_max() - z_min()) / static_cast<double>(size() - 1); }

Tensor DepthHypothesis::as_tensor() const { return Tensor::from({size(), 1, 1}, bins_); }

// ---------------------------------------------------------------------------

void add_encoder_params(ParameterStore& params, const std::string& prefix, std::size_t in_channels,
                        std::size_t hidden, std::size_t out_channels, std::mt19937_64& rng) {
  params.add_he(prefix + "w0", {hidden, in_channels, 3, 3}, in_channels * 9, rng);
  params.add(prefix + "b0", {hidden});
  params.add_he(prefix + "w1", {hidden, hidden, 3, 3}, hidden * 9, rng);
  params.add(prefix + "b1", {hidden});
  params.add_he(prefix + "w2", {out_channels, hidden, 3, 3}, hidden * 9, rng, 0.5);
  params.add(prefix + "b2", {out_channels});
}

Tensor encode_features(const ParameterStore& params, const std::string& prefix, const Tensor& images) {
  if (images.rank() != 4)
    throw Error(ErrorCode::kShapeMismatch, "encoder input must be [F,C,H,W], got " + grad::shape_str(images.shape()));
  if (images.dim(2) % 4 != 0 || images.dim(3) % 4 != 0)
    throw Error(ErrorCode::kResolutionError, "image size " + std::to_string(images.dim(3)) + "x" +
                                                 std::to_string(images.dim(2)) + " is not divisible by 4");
  Tensor x = grad::relu(grad::conv2d(images, params.get(prefix + "w0"), params.get(prefix + "b0"), 2, 1));
  x = grad::relu(grad::conv2d(x, params.get(prefix + "w1"), params.get(prefix + "b1"), 2, 1));
  return grad::conv2d(x, params.get(prefix + "w2"), params.get(prefix + "b2"), 1, 1);
}

// ---------------------------------------------------------------------------

Tensor sweep_coordinates(const Se3Pose& key_to_frame, const CameraIntrinsics& kq, const DepthHypothesis& hyp) {
  const std::size_t D = hyp.size(), h = kq.height, w = kq.width;
  const std::size_t plane = D * h * w;
  std::vector<double> coords(2 * plane);
  for (std::size_t d = 0; d < D; ++d) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const auto r = geometry::reproject(key_to_frame, {static_cast<double>(x), static_cast<double>(y)},
                                           hyp[d], kq);
        const std::size_t i = (d * h + y) * w + x;
        coords[i] = r.valid ? r.pixel.x() : kOffGrid;
        coords[plane + i] = r.valid ? r.pixel.y() : kOffGrid;
      }
    }
  }
  return Tensor::from({2, D, h, w}, std::move(coords));
}

Tensor build_pair_volumes(const Tensor& features, const std::vector<Se3Pose>& poses, const CameraIntrinsics& kq,
                          const DepthHypothesis& hyp, std::size_t key) {
  if (features.rank() != 4)
    throw Error(ErrorCode::kShapeMismatch, "features must be [F,L,h,w], got " + grad::shape_str(features.shape()));
  const std::size_t F = features.dim(0), L = features.dim(1), h = features.dim(2), w = features.dim(3);
  if (F < 2 || poses.size() < 2)
    throw Error(ErrorCode::kNeedMultipleViews, "cost volume needs at least 2 frames, got " + std::to_string(F));
  if (poses.size() != F || key >= F)
    throw Error(ErrorCode::kShapeMismatch, "pose count / key index inconsistent with features");
  if (kq.height != h || kq.width != w)
    throw Error(ErrorCode::kShapeMismatch, "intrinsics are " + std::to_string(kq.width) + "x" +
                                               std::to_string(kq.height) + " but features are " +
                                               std::to_string(w) + "x" + std::to_string(h));
  const std::size_t D = hyp.size();
  const Se3Pose key_inv = poses[key].inverse();

  const Tensor fk = grad::expand(grad::reshape(grad::slice(features, 0, key, key + 1), {L, 1, h, w}), {L, D, h, w});
  std::vector<Tensor> pairs;
  for (std::size_t i = 0; i < F; ++i) {
    if (i == key) continue;
    const Tensor fi = grad::reshape(grad::slice(features, 0, i, i + 1), {L, h, w});
    const Tensor warped = grad::bilinear_sample(fi, sweep_coordinates(poses[i] * key_inv, kq, hyp));
    pairs.push_back(grad::concat({fk, warped}, 0));
  }
  return grad::reshape(grad::concat(pairs, 0), {F - 1, 2 * L, D, h, w});
}

Tensor build_cost_volume(const Tensor& features, const std::vector<Se3Pose>& poses, const CameraIntrinsics& kq,
                         const DepthHypothesis& hyp, std::size_t key) {
  return grad::mean(build_pair_volumes(features, poses, kq, hyp, key), 0, true);
}

Tensor matching_score(const Tensor& volume) {
  const std::size_t C = volume.dim(1), L = C / 2;
  const Tensor diff = grad::sub(grad::slice(volume, 1, 0, L), grad::slice(volume, 1, L, C));
  const Tensor s = grad::neg(grad::sum(grad::mul(diff, diff), 1));
  return grad::reshape(s, {volume.dim(2), volume.dim(3), volume.dim(4)});
}

// ---------------------------------------------------------------------------

Tensor soft_argmax(const Tensor& probabilities, const DepthHypothesis& hyp) {
  if (probabilities.rank() != 3 || probabilities.dim(0) != hyp.size())
    throw Error(ErrorCode::kShapeMismatch, "probabilities " + grad::shape_str(probabilities.shape()) +
                                               " vs " + std::to_string(hyp.size()) + " bins");
  return grad::sum(grad::mul(probabilities, hyp.as_tensor()), 0);
}

Tensor shannon_entropy(const Tensor& probabilities) {
  const std::size_t D = probabilities.dim(0), n = probabilities.numel() / D;
  auto p = probabilities.values();
  std::vector<double> out(n, 0.0);
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t k = 0; k < n; ++k) {
      const double v = p[d * n + k];
      if (v > 0.0) out[k] -= v * std::log(v);
    }
  return Tensor::from({probabilities.dim(1), probabilities.dim(2)}, std::move(out));
}

Tensor sigma_from_confidence(const Tensor& confidence, double s, double eps) {
  return grad::add_scalar(grad::scale(confidence, -s), s + eps);
}

Tensor upsample(const Tensor& map) {
  const std::size_t h = map.dim(0), w = map.dim(1);
  const Tensor up =
      grad::upsample_bilinear(grad::reshape(map, {1, h, w}), 4 * h, 4 * w, grad::UpsampleAlign::kStrided);
  return grad::reshape(up, {4 * h, 4 * w});
}

// ---------------------------------------------------------------------------

DepthNet::DepthNet(const DepthNetConfig& config, std::uint64_t seed)
    : config_(config), hyp_(config.z_min, config.z_max, config.depth_bins) {
  std::mt19937_64 rng(seed);
  const std::size_t C = volume_channels(config), h = config.regularizer_hidden, hu = config.uncertainty_hidden;
  add_encoder_params(params_, "enc.", 3, config.encoder_channels, config.feature_channels, rng);
  params_.add_he("match.w", {C, 2 * config.feature_channels, 1, 1, 1}, 2 * config.feature_channels, rng);
  params_.add("match.b", {C});
  for (std::size_t b = 0; b < config.regularizer_blocks; ++b) {
    const std::string p = "reg" + std::to_string(b) + ".";
    params_.add_he(p + "w0", {h, C, 3, 3, 3}, C * 27, rng);
    params_.add(p + "b0", {h});
    params_.add_he(p + "w1", {C, h, 3, 3, 3}, h * 27, rng, 0.1);
    params_.add(p + "b1", {C});
    params_.add_he("head" + std::to_string(b) + ".w", {1, C, 1, 1, 1}, C, rng);
    params_.add("head" + std::to_string(b) + ".b", {1});
  }
  params_.add_he("unc.w0", {hu, C, 3, 3, 3}, C * 27, rng);
  params_.add("unc.b0", {hu});
  params_.add_he("unc.w1", {hu, hu, 3, 3, 3}, hu * 27, rng);
  params_.add("unc.b1", {hu});
  params_.add_he("unc.w2", {hu, hu, 3, 3, 3}, hu * 27, rng);
  params_.add("unc.b2", {hu});
  // Small last layer: the depth sum starts near zero, so f starts near 0.5.
  params_.add_he("unc.w3", {1, hu, 3, 3, 3}, hu * 27, rng, 0.02);
  params_.add("unc.b3", {1});
}

Tensor DepthNet::encode(const Tensor& images) const { return encode_features(params_, "enc.", images); }

Tensor DepthNet::match_and_pool(const Tensor& pair_volumes) const {
  const Tensor m = grad::relu(grad::conv3d(pair_volumes, params_.get("match.w"), params_.get("match.b"), {0, 0, 0}));
  return grad::mean(m, 0, true);
}

std::vector<Tensor> DepthNet::regularize(const Tensor& volume) const {
  std::vector<Tensor> out;
  Tensor x = volume;
  for (std::size_t b = 0; b < config_.regularizer_blocks; ++b) {
    const std::string p = "reg" + std::to_string(b) + ".";
    Tensor r = grad::relu(grad::conv3d(x, params_.get(p + "w0"), params_.get(p + "b0"), {1, 1, 1}));
    r = grad::conv3d(r, params_.get(p + "w1"), params_.get(p + "b1"), {1, 1, 1});
    x = grad::add(x, r);
    out.push_back(x);
  }
  return out;
}

DepthPrediction DepthNet::depth_head(std::size_t block, const Tensor& volume) const {
  const std::string p = "head" + std::to_string(block) + ".";
  const Tensor scores = grad::conv3d(volume, params_.get(p + "w"), params_.get(p + "b"), {0, 0, 0});
  const std::size_t D = volume.dim(2), h = volume.dim(3), w = volume.dim(4);
  DepthPrediction pred;
  pred.probabilities = grad::softmax(grad::reshape(scores, {D, h, w}), 0);
  pred.depth = soft_argmax(pred.probabilities, hyp_);
  return pred;
}

UncertaintyPrediction DepthNet::uncertainty_head(const Tensor& volume) const {
  Tensor x = volume;
  for (int l = 0; l < 4; ++l) {
    const std::string i = std::to_string(l);
    x = grad::conv3d(x, params_.get("unc.w" + i), params_.get("unc.b" + i), {1, 1, 1});
    if (l < 3) x = grad::relu(x);
  }
  const std::size_t D = volume.dim(2), h = volume.dim(3), w = volume.dim(4);
  UncertaintyPrediction u;
  u.logit = grad::sum(grad::reshape(x, {D, h, w}), 0);
  u.confidence = grad::sigmoid(u.logit);
  u.sigma = sigma_from_confidence(u.confidence, config_.sigma_scale, config_.sigma_offset);
  return u;
}

DepthOutput DepthNet::forward(const Tensor& images, const std::vector<Se3Pose>& poses, const CameraIntrinsics& k_full,
                              std::size_t key) const {
  DepthOutput out;
  const Tensor features = encode(images);
  out.volume = match_and_pool(build_pair_volumes(features, poses, k_full.downscaled(4), hyp_, key));
  out.regularized = regularize(out.volume);
  for (std::size_t b = 0; b < out.regularized.size(); ++b) out.predictions.push_back(depth_head(b, out.regularized[b]));
  out.uncertainty = uncertainty_head(out.regularized.back());
  return out;
}

}  // namespace sfmc::depthnet
