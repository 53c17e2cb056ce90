// SPDX-License-Identifier: Apache-2.0
//
// Randomized gradient cases for every loss, shared by the unit tests and the
// acceptance run. Inputs keep |.| arguments away from their kinks.
#pragma once

#include <array>
#include <memory>

#include "op_cases.hpp"
#include "rigid_scene.hpp"
#include "sfmc/depthnet.hpp"
#include "sfmc/losses.hpp"

namespace sfmc::testkit {

inline Tensor random_mask(const Shape& s, std::mt19937_64& rng, double p = 0.6) {
  std::bernoulli_distribution b(p);
  std::vector<double> v(numel_of(s));
  for (auto& x : v) x = b(rng) ? 1.0 : 0.0;
  v[0] = 1.0;
  return Tensor::from(s, std::move(v));
}

// The depth terms hold the poses fixed and the motion terms hold the depth
// fixed, so each leaf is probed with the other path's terms off.
inline Case semi_case(std::mt19937_64& rng, bool depth_leaf) {
  namespace l = ::sfmc::losses;
  const std::size_t H = 8, W = 8;
  auto in = std::make_shared<l::SemiSupervisedInputs>();
  in->images = random_const({2, 3, H, W}, rng, 0, 1);
  in->k = geometry::CameraIntrinsics{8.0, 8.0, 3.5, 3.5, W, H};
  in->base = motion::initialize_poses(2, 0);
  in->base.poses[1] = geometry::Se3Pose(geometry::Matrix3::Identity(), {0.13, -0.07, 0.0});
  in->truth = in->base;
  in->truth.poses[1] = geometry::se3_exp(random_twist(rng, 0.1)) * in->base.poses[1];
  in->xi = random_param({1, 6}, rng, -0.02, 0.02);
  const Tensor z = random_param({H, W}, rng, 4.0, 6.0);
  in->depths = {z};
  l::LossWeights w;
  w.semi = depth_leaf ? std::array<double, 4>{10.0, 0.02, 0.0, 0.0} : std::array<double, 4>{0.0, 0.0, 10.0, 1.0};
  return {[=] { return l::total_semi_supervised(*in, w).total; }, {depth_leaf ? z : in->xi}};
}

inline Case supervised_case(std::mt19937_64& rng, bool through_depth) {
  namespace l = ::sfmc::losses;
  const depthnet::DepthHypothesis hyp(1.0, 8.0, 8);
  auto in = std::make_shared<l::SupervisedInputs>();
  in->gt_depth = random_const({8, 8}, rng, 1.5, 7.5);
  in->supervised = random_mask({8, 8}, rng, 0.5);
  in->image = random_const({3, 8, 8}, rng, 0, 1);
  in->quarter = l::quarter_supervision(in->gt_depth, in->supervised);
  const Tensor logits = random_param({8, 2, 2}, rng), sigma_raw = random_param({2, 2}, rng);
  l::LossWeights w;
  w.supervised = {1.0, 0.5, 0.3, 1.0};
  w.focal_through_depth = through_depth;
  const auto build = [=] {
    in->probabilities = {softmax(logits, 0)};
    in->depths = {depthnet::upsample(depthnet::soft_argmax(in->probabilities[0], hyp))};
    in->sigma = depthnet::sigma_from_confidence(sigmoid(sigma_raw), w.sigma_scale, w.sigma_offset);
    return l::total_supervised(*in, hyp, w).total;
  };
  // Detached, the focal term's dependence on P is invisible to backward().
  if (through_depth) return {build, {logits, sigma_raw}};
  return {build, {sigma_raw}};
}

inline const std::vector<std::pair<std::string, CaseFactory>>& loss_cases() {
  namespace l = ::sfmc::losses;
  using depthnet::DepthHypothesis;
  static const std::vector<std::pair<std::string, CaseFactory>> all = {
      {"l1_depth",
       [](auto& rng) {
         const Tensor target = random_const({4, 5}, rng, 2, 8);
         std::vector<double> off = away_from(20, rng, 0.0, 0.05);
         for (std::size_t i = 0; i < 20; ++i) off[i] += target.values()[i];
         Tensor z = Tensor::parameter({4, 5}, off);
         const Tensor m = random_mask({4, 5}, rng);
         return Case{[=] { return l::l1_depth(z, target, m); }, {z}};
       }},
      {"smoothness",
       [](auto& rng) {
         Tensor z = random_param({5, 6}, rng, 1, 5);
         const Tensor m = random_mask({5, 6}, rng);
         return Case{[=] { return l::smoothness(z, m); }, {z}};
       }},
      {"smoothness_edge_aware",
       [](auto& rng) {
         Tensor z = random_param({5, 6}, rng, 1, 5);
         const Tensor img = random_const({3, 5, 6}, rng, 0, 1);
         const Tensor m = random_mask({5, 6}, rng);
         return Case{[=] { return l::smoothness_edge_aware(z, img, m); }, {z}};
       }},
      {"focal_printed",
       [](auto& rng) {
         const DepthHypothesis hyp(1.0, 8.0, 8);
         Tensor sigma = random_param({2, 3}, rng, 0.5, 2.5), logits = random_param({8, 2, 3}, rng);
         const Tensor zstar = random_const({2, 3}, rng, 1.5, 7.5);
         const Tensor m = random_mask({2, 3}, rng);
         return Case{[=] {
                       return l::focal_loss(softmax(logits, 0), l::unimodal_target(zstar, sigma, hyp), 2.0, m,
                                            l::FocalVariant::kPrinted);
                     },
                     {sigma, logits}};
       }},
      {"focal_positive",
       [](auto& rng) {
         const DepthHypothesis hyp(1.0, 8.0, 8);
         Tensor sigma = random_param({2, 3}, rng, 0.5, 2.5), logits = random_param({8, 2, 3}, rng);
         const Tensor zstar = random_const({2, 3}, rng, 1.5, 7.5);
         const Tensor m = random_mask({2, 3}, rng);
         return Case{[=] {
                       return l::focal_loss(softmax(logits, 0), l::unimodal_target(zstar, sigma, hyp), 2.0, m,
                                            l::FocalVariant::kPositive);
                     },
                     {sigma, logits}};
       }},
      {"flow_coords",
       [](auto& rng) {
         const Tensor target = random_const({2, 2, 3, 4}, rng, 0, 10);
         std::vector<double> c = away_from(48, rng, 0.0, 0.05);
         for (std::size_t i = 0; i < 48; ++i) c[i] += target.values()[i];
         Tensor coords = Tensor::parameter({2, 2, 3, 4}, c);
         const Tensor valid = random_mask({2, 3, 4}, rng);
         return Case{[=] { return l::flow_loss(coords, target, valid); }, {coords}};
       }},
      {"flow_poses",
       [](auto& rng) {
         const auto scene = make_rigid_scene(rng());
         // A translation offset keeps the signs of u - u* and v - v* fixed.
         motion::PoseGraph base = scene.truth;
         for (std::size_t i : base.others())
           base.poses[i] = geometry::Se3Pose(base.poses[i].rotation(),
                                             base.poses[i].translation() + geometry::Vector3(0.4, 0.3, 0.0));
         Tensor xi = random_param({2, 6}, rng, -0.02, 0.02);
         return Case{[=] { return l::flow_loss(base, xi, scene.truth, scene.depth, scene.k); }, {xi}};
       }},
      {"se3_geodesic",
       [](auto& rng) {
         const auto scene = make_rigid_scene(rng());
         const auto base = perturb(scene.truth, 0.2, rng);
         Tensor xi = random_param({2, 6}, rng, -0.05, 0.05);
         return Case{[=] { return l::se3_geodesic(base, xi, scene.truth, 1.0); }, {xi}};
       }},
      {"photometric",
       [](auto& rng) {
         const Tensor a = random_const({3, 5, 6}, rng, 0, 1);
         std::vector<double> off = away_from(90, rng, 0.0, 0.02, -0.3, 0.3);
         for (std::size_t i = 0; i < 90; ++i) off[i] += a.values()[i];
         Tensor b = Tensor::parameter({3, 5, 6}, off);
         const Tensor w = random_const({5, 6}, rng);
         return Case{[=] { return probe(l::photometric(a, b, 0.85), w); }, {b}};
       }},
      {"min_fusion",
       [](auto& rng) {
         Tensor a = random_param({3, 4}, rng, 0, 1), b = random_param({3, 4}, rng, 2, 3);
         const Tensor va = random_mask({3, 4}, rng), vb = random_mask({3, 4}, rng);
         return Case{[=] { return l::min_fusion({a, b}, {va, vb}); }, {a, b}};
       }},
      {"sequence",
       [](auto& rng) {
         Tensor a = random_param({3}, rng), b = random_param({3}, rng);
         const Tensor w = random_const({3}, rng);
         return Case{[=] { return l::sequence_loss({probe(a, w), probe(mul(a, b), w), probe(b, w)}, 0.8); },
                     {a, b}};
       }},
      {"total_supervised", [](auto& rng) { return supervised_case(rng, true); }},
      {"total_supervised_detached", [](auto& rng) { return supervised_case(rng, false); }},
      {"total_semi_depth", [](auto& rng) { return semi_case(rng, true); }},
      {"total_semi_pose", [](auto& rng) { return semi_case(rng, false); }},
  };
  return all;
}

}  // namespace sfmc::testkit
