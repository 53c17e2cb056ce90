// SPDX-License-Identifier: Apache-2.0
//
// Hot kernels at desk-experiment sizes: 64x96 input, 16x24 feature grid,
// 32 depth bins, 5-frame windows.
#include <benchmark/benchmark.h>

#include <random>

#include "sfmc/depthnet.hpp"
#include "sfmc/grad/ops.hpp"
#include "sfmc/motion.hpp"

using namespace sfmc;
using grad::Tensor;

namespace {

Tensor noise(const grad::Shape& s, std::uint64_t seed, bool parameter = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.5);
  std::vector<double> v(grad::numel_of(s));
  for (double& x : v) x = n(rng);
  return parameter ? Tensor::parameter(s, std::move(v)) : Tensor::from(s, std::move(v));
}

const geometry::CameraIntrinsics kFull{64.0, 64.0, 47.5, 31.5, 96, 64};

std::vector<geometry::Se3Pose> window_poses(std::size_t frames) {
  std::vector<geometry::Se3Pose> poses;
  for (std::size_t i = 0; i < frames; ++i) {
    const double t = static_cast<double>(i) - static_cast<double>(frames / 2);
    poses.emplace_back(geometry::so3_exp({0.0, 0.01 * t, 0.0}), geometry::Vector3{-0.5 * t, 0.0, -0.25 * t});
  }
  return poses;
}

void BM_Conv3dForward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const Tensor x = noise({1, c, 32, 16, 24}, 1);
  const Tensor w = noise({c, c, 3, 3, 3}, 2);
  const Tensor b = Tensor::zeros({c});
  for (auto _ : state) benchmark::DoNotOptimize(grad::conv3d(x, w, b, {1, 1, 1}));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(c * c * 27 * 32 * 16 * 24));
}
BENCHMARK(BM_Conv3dForward)->Arg(4)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_Conv3dBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const Tensor x = noise({1, c, 32, 16, 24}, 1, true);
  const Tensor w = noise({c, c, 3, 3, 3}, 2, true);
  const Tensor b = Tensor::parameter({c}, std::vector<double>(c, 0.0));
  for (auto _ : state) {
    grad::backward(grad::sum(grad::conv3d(x, w, b, {1, 1, 1})));
    benchmark::ClobberMemory();
  }
}
BENCHMARK(BM_Conv3dBackward)->Arg(4)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_CostVolume(benchmark::State& state) {
  const std::size_t frames = 5;
  const Tensor features = noise({frames, 8, 16, 24}, 3);
  const depthnet::DepthHypothesis hyp(1.0, 20.0, 32);
  const auto poses = window_poses(frames);
  const auto kq = kFull.downscaled(4);
  grad::NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(depthnet::build_pair_volumes(features, poses, kq, hyp, frames / 2));
}
BENCHMARK(BM_CostVolume)->Unit(benchmark::kMillisecond);

void BM_DepthNetForward(benchmark::State& state) {
  depthnet::DepthNetConfig cfg;
  cfg.z_max = 20.0;
  const depthnet::DepthNet net(cfg, 7);
  const Tensor images = noise({5, 3, 64, 96}, 4);
  const auto poses = window_poses(5);
  grad::NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(images, poses, kFull, 2));
}
BENCHMARK(BM_DepthNetForward)->Unit(benchmark::kMillisecond);

void BM_GaussNewtonStep(benchmark::State& state) {
  const std::size_t frames = 5;
  const auto kq = kFull.downscaled(4);
  const motion::PoseGraph graph{window_poses(frames), frames / 2};
  const Tensor depth = Tensor::full({16, 24}, 6.0);
  const Tensor flow = noise({frames - 1, 2, 16, 24}, 5);
  const Tensor confidence = Tensor::full({frames - 1, 1, 16, 24}, 0.5);
  grad::NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(motion::gauss_newton_update(graph, depth, flow, confidence, kq));
}
BENCHMARK(BM_GaussNewtonStep)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
