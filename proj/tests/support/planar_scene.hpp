// SPDX-License-Identifier: Apache-2.0
//
// Analytic fronto-parallel plane seen by laterally translated cameras. The
// feature maps are a smooth multi-channel texture evaluated at the exact ray
// intersection, so they do not depend on any warping code under test.
#pragma once

#include <cmath>
#include <vector>

#include "sfmc/geometry.hpp"
#include "sfmc/grad/tensor.hpp"

namespace sfmc::testkit {

struct PlanarScene {
  geometry::CameraIntrinsics k;       // feature-map resolution
  std::vector<geometry::Se3Pose> poses;
  std::size_t key = 0;
  double depth = 0.0;                 // plane Z in the key frame
  grad::Tensor features;              // [F,L,h,w]
};

// Smooth texture in key-image pixel units (u, v), well below the sampling
// limit so bilinear interpolation error stays small.
inline double plane_texture(std::size_t channel, double x, double y) {
  const double a = 0.25 + 0.07 * static_cast<double>(channel);
  const double b = 0.21 + 0.05 * static_cast<double>(channel);
  return std::sin(a * x + 0.5 * channel) * std::cos(b * y - 0.3 * channel) + 0.4 * std::sin(0.7 * a * x - 1.1 * b * y);
}

/// Cameras at x-offsets `baselines` (meters, key frame at index `key` with
/// offset 0). Pose convention: X_cam = X_key - offset.
inline PlanarScene make_planar_scene(const geometry::CameraIntrinsics& k, double depth,
                                     const std::vector<double>& baselines, std::size_t key,
                                     std::size_t channels) {
  PlanarScene s;
  s.k = k;
  s.key = key;
  s.depth = depth;
  const std::size_t F = baselines.size(), h = k.height, w = k.width;
  std::vector<double> f(F * channels * h * w);
  for (std::size_t i = 0; i < F; ++i) {
    s.poses.emplace_back(geometry::Matrix3::Identity(), geometry::Vector3(-baselines[i], 0, 0));
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          // The plane point seen at (x, y) in camera i, in key-pixel units.
          const double u = static_cast<double>(x) + k.fx * baselines[i] / depth;
          const double v = static_cast<double>(y);
          f[((i * channels + c) * h + y) * w + x] = plane_texture(c, u, v);
        }
  }
  s.features = grad::Tensor::from({F, channels, h, w}, std::move(f));
  return s;
}

}  // namespace sfmc::testkit
