// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "fd_check.hpp"
#include "loss_cases.hpp"
#include "rigid_scene.hpp"
#include "sfmc/error.hpp"
#include "sfmc/grad/ops.hpp"
#include "sfmc/losses.hpp"

using namespace sfmc;
using namespace sfmc::losses;
namespace g = sfmc::geometry;
using depthnet::DepthHypothesis;
using grad::Shape;

namespace {

template <class F>
void expect_error(F&& f, ErrorCode code) {
  try {
    f();
    ADD_FAILURE() << "expected " << to_string(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}


Tensor random_mask(const Shape& s, std::mt19937_64& rng, double p = 0.6) {
  std::bernoulli_distribution b(p);
  std::vector<double> v(grad::numel_of(s));
  for (auto& x : v) x = b(rng) ? 1.0 : 0.0;
  return Tensor::from(s, std::move(v));
}

Tensor random_distribution(std::size_t D, std::size_t h, std::size_t w, std::mt19937_64& rng) {
  return grad::softmax(testkit::random_const({D, h, w}, rng, -2.0, 2.0), 0);
}

/// Direct SSIM of two equally sized patches (population statistics).
double ssim_direct(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i] / n, mb += b[i] / n;
  double va = 0, vb = 0, cab = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    va += (a[i] - ma) * (a[i] - ma) / n;
    vb += (b[i] - mb) * (b[i] - mb) / n;
    cab += (a[i] - ma) * (b[i] - mb) / n;
  }
  return ((2 * ma * mb + kSsimC1) * (2 * cab + kSsimC2)) / ((ma * ma + mb * mb + kSsimC1) * (va + vb + kSsimC2));
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(LossWeights, Defaults) {
  const LossWeights w;
  EXPECT_EQ(w.supervised, (std::array<double, 4>{1.0, 0.02, 0.002, 1.0}));
  EXPECT_EQ(w.semi, (std::array<double, 4>{10.0, 0.02, 10.0, 1.0}));
  EXPECT_EQ(w.gamma, 0.5);
  EXPECT_EQ(w.delta, 2.0);
  EXPECT_EQ(w.beta, 1.0);
  EXPECT_EQ(w.alpha, 0.85);
  EXPECT_EQ(w.sigma_scale, 2.0);
  EXPECT_EQ(w.sigma_offset, 0.25);
  const LossWeights back = parse_loss_weights(to_json(w));
  EXPECT_EQ(back.supervised, w.supervised);
  EXPECT_EQ(back.delta, w.delta);
  const LossWeights pos = parse_loss_weights(nlohmann::json::parse(R"({"focal_variant":"positive","delta":0})"));
  EXPECT_EQ(pos.focal_variant, FocalVariant::kPositive);
  EXPECT_EQ(pos.delta, 0.0);
  expect_error([] { (void)parse_loss_weights(nlohmann::json::parse(R"({"gamma":"x"})")); }, ErrorCode::kConfigError);
  expect_error([] { (void)parse_loss_weights(nlohmann::json::parse(R"({"semi":[1,2]})")); }, ErrorCode::kConfigError);
  expect_error([] { (void)parse_loss_weights(nlohmann::json::parse(R"({"focal_variant":"neg"})")); },
               ErrorCode::kConfigError);
}

TEST(L1Depth, Examples) {
  std::mt19937_64 rng(1);
  const Tensor z = testkit::random_const({4, 4}, rng, 1, 10);
  const Tensor m = random_mask({4, 4}, rng);
  EXPECT_EQ(l1_depth(z, z, m).item(), 0.0);
  EXPECT_NEAR(l1_depth(grad::add_scalar(z, 0.75), z, m).item(), 0.75, 1e-12);
  for (int seed = 0; seed < 10; ++seed) {
    const Tensor a = testkit::random_const({4, 4}, rng, 1, 10), b = testkit::random_const({4, 4}, rng, 1, 10);
    const Tensor mk = random_mask({4, 4}, rng);
    double s = 0, n = 0;
    for (std::size_t i = 0; i < 16; ++i)
      if (mk.values()[i] != 0.0) s += std::fabs(a.values()[i] - b.values()[i]), n += 1;
    if (n == 0) continue;
    EXPECT_NEAR(l1_depth(a, b, mk).item(), s / n, 1e-12);
  }
  expect_error([&] { (void)l1_depth(z, z, Tensor::zeros({4, 4})); }, ErrorCode::kEmptySupervision);
}

TEST(Smoothness, ConstantAndRamp) {
  std::mt19937_64 rng(2);
  const Tensor image = testkit::random_const({3, 5, 6}, rng, 0, 1);
  const Tensor ones = Tensor::full({5, 6}, 1.0);
  EXPECT_EQ(smoothness(Tensor::full({5, 6}, 4.0), ones).item(), 0.0);
  EXPECT_EQ(smoothness_edge_aware(Tensor::full({5, 6}, 4.0), image, ones).item(), 0.0);
  std::vector<double> ramp(30), both(30);
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t x = 0; x < 6; ++x) ramp[y * 6 + x] = -0.3 * x, both[y * 6 + x] = 0.5 * x + 0.25 * y;
  EXPECT_NEAR(smoothness(Tensor::from({5, 6}, ramp), ones).item(), 0.3, 1e-12);
  EXPECT_NEAR(smoothness(Tensor::from({5, 6}, both), ones).item(), 0.75, 1e-12);
  const Tensor uniform = Tensor::full({3, 5, 6}, 0.4);
  EXPECT_NEAR(smoothness_edge_aware(Tensor::from({5, 6}, ramp), uniform, ones).item(), 0.3, 1e-12);
  EXPECT_EQ(smoothness(Tensor::from({5, 6}, ramp), Tensor::zeros({5, 6})).item(), 0.0);
}

TEST(Smoothness, EdgeAwareSuppressesAlignedEdges) {
  std::vector<double> z(8 * 8), img(3 * 64);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) {
      z[y * 8 + x] = x < 4 ? 2.0 : 9.0;
      for (std::size_t c = 0; c < 3; ++c) img[c * 64 + y * 8 + x] = x < 4 ? 0.0 : 5.0;  // |dI| = 5
    }
  const Tensor depth = Tensor::from({8, 8}, z), image = Tensor::from({3, 8, 8}, img);
  const Tensor ones = Tensor::full({8, 8}, 1.0);
  const double plain = smoothness(depth, ones).item();
  const double aware = smoothness_edge_aware(depth, image, ones).item();
  EXPECT_GT(plain, 0.0);
  EXPECT_LT(aware / plain, 0.1);
}

TEST(Smoothness, GradientMatchesFiniteDifferences) {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor z = testkit::random_param({5, 6}, rng, 1, 5);
    const Tensor img = testkit::random_const({3, 5, 6}, rng, 0, 1);
    const Tensor m = random_mask({5, 6}, rng);
    EXPECT_LT(testkit::fd_check([&] { return smoothness_edge_aware(z, img, m); }, {z}).max_rel_error, 1e-5);
  }
}

// ---------------------------------------------------------------------------

TEST(UnimodalTarget, Examples) {
  const DepthHypothesis hyp(1.0, 11.0, 11);  // spacing 1
  const Tensor sigma = Tensor::full({1, 1}, 0.1);
  const Tensor p = unimodal_target(Tensor::full({1, 1}, 5.0), sigma, hyp);  // bin 4
  EXPECT_GT(p.at({4, 0, 0}), 0.9);
  double s = 0;
  for (double v : p.values()) s += v;
  EXPECT_NEAR(s, 1.0, 1e-12);

  const Tensor mid = unimodal_target(Tensor::full({1, 1}, 5.5), Tensor::full({1, 1}, 0.7), hyp);
  EXPECT_NEAR(mid.at({4, 0, 0}), mid.at({5, 0, 0}), 1e-15);
  for (std::size_t d = 0; d < 11; ++d) EXPECT_LE(mid.at({d, 0, 0}), mid.at({4, 0, 0}) + 1e-15);

  const Tensor flat = unimodal_target(Tensor::full({1, 1}, 3.0), Tensor::full({1, 1}, 1e9), hyp);
  for (double v : flat.values()) EXPECT_NEAR(v, 1.0 / 11.0, 1e-8);
}

TEST(FocalLoss, MatchesLoopOracle) {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t D = 6, h = 3, w = 4, n = h * w;
    const Tensor P = random_distribution(D, h, w, rng), Q = random_distribution(D, h, w, rng);
    const Tensor m = random_mask({h, w}, rng, 0.7);
    for (double delta : {0.0, 2.0, 1.5}) {
      double printed = 0, positive = 0, cnt = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (m.values()[i] == 0.0) continue;
        cnt += 1;
        for (std::size_t d = 0; d < D; ++d) {
          const double p = P.values()[d * n + i], q = Q.values()[d * n + i];
          printed += std::pow(1 - q, -delta) * (-p * std::log(q));
          positive += std::pow(1 - p, delta) * (-q * std::log(p));
        }
      }
      if (cnt == 0) continue;
      EXPECT_NEAR(focal_loss(P, Q, delta, m).item(), printed / cnt, 1e-10 * std::max(1.0, printed / cnt));
      EXPECT_NEAR(focal_loss(P, Q, delta, m, FocalVariant::kPositive).item(), positive / cnt, 1e-10);
    }
  }
}

TEST(FocalLoss, DeltaZeroIsCrossEntropy) {
  std::mt19937_64 rng(4);
  const Tensor P = random_distribution(5, 2, 2, rng), Q = random_distribution(5, 2, 2, rng);
  const Tensor ones = Tensor::full({2, 2}, 1.0);
  const Tensor ce = grad::mean(grad::sum(grad::neg(grad::mul(P, grad::log(Q))), 0));
  EXPECT_NEAR(focal_loss(P, Q, 0.0, ones).item(), ce.item(), 1e-12);
}

TEST(FocalLoss, UniformClosedForm) {
  const std::size_t D = 32;
  const Tensor u = Tensor::full({D, 2, 3}, 1.0 / 32.0);
  const double expected = 32.0 * std::pow(1.0 - 1.0 / 32.0, -2.0) * (1.0 / 32.0) * std::log(32.0);
  EXPECT_NEAR(focal_loss(u, u, 2.0, Tensor::full({2, 3}, 1.0)).item(), expected, 1e-12);
}

TEST(FocalLoss, OneHotIsFinite) {
  std::vector<double> v(4, 0.0);
  v[1] = 1.0;
  const Tensor p = Tensor::from({4, 1, 1}, v);
  const double l = focal_loss(p, p, 2.0, Tensor::full({1, 1}, 1.0)).item();
  EXPECT_TRUE(std::isfinite(l));
  // Bin 1: (1e-12)^-2 * (-1 * log 1) = 0; zero-probability bins contribute 0 * log(1e-12).
  EXPECT_EQ(l, 0.0);
  const double lp = focal_loss(p, p, 2.0, Tensor::full({1, 1}, 1.0), FocalVariant::kPositive).item();
  EXPECT_TRUE(std::isfinite(lp));
}

TEST(FocalLoss, PermutationEquivariant) {
  std::mt19937_64 rng(5);
  const std::size_t D = 7, n = 6;
  const Tensor P = random_distribution(D, 2, 3, rng), Q = random_distribution(D, 2, 3, rng);
  std::vector<std::size_t> perm(D);
  for (std::size_t d = 0; d < D; ++d) perm[d] = d;
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> pp(D * n), qq(D * n);
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t i = 0; i < n; ++i) {
      pp[d * n + i] = P.values()[perm[d] * n + i];
      qq[d * n + i] = Q.values()[perm[d] * n + i];
    }
  const Tensor ones = Tensor::full({2, 3}, 1.0);
  for (auto variant : {FocalVariant::kPrinted, FocalVariant::kPositive}) {
    EXPECT_NEAR(focal_loss(P, Q, 2.0, ones, variant).item(),
                focal_loss(Tensor::from({D, 2, 3}, pp), Tensor::from({D, 2, 3}, qq), 2.0, ones, variant).item(),
                1e-12);
  }
}

TEST(FocalLoss, GradientThroughSigmaMatchesFiniteDifferences) {
  const DepthHypothesis hyp(1.0, 8.0, 8);
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor sigma = testkit::random_param({2, 3}, rng, 0.5, 2.5);
    const Tensor logits = testkit::random_param({8, 2, 3}, rng, -1, 1);
    const Tensor zstar = testkit::random_const({2, 3}, rng, 1.5, 7.5);
    const Tensor m = Tensor::full({2, 3}, 1.0);
    for (auto variant : {FocalVariant::kPrinted, FocalVariant::kPositive}) {
      const auto build = [&] {
        return focal_loss(grad::softmax(logits, 0), unimodal_target(zstar, sigma, hyp), 2.0, m, variant);
      };
      EXPECT_LT(testkit::fd_check(build, {sigma, logits}).max_rel_error, 1e-5);
    }
  }
}

TEST(QuarterSupervision, PicksNearestSupervisedPixel) {
  std::vector<double> z(8 * 8), m(8 * 8, 0.0);
  for (std::size_t i = 0; i < 64; ++i) z[i] = 1.0 + static_cast<double>(i);
  m[0] = 1;           // (0,0): exact sample of quarter (0,0)
  m[5 * 8 + 3] = 1;   // (5,3): offset (1,-1) from (4,4)
  m[6 * 8 + 6] = 1;   // (6,6): offset (2,2), farther than (5,3)
  const auto q = quarter_supervision(Tensor::from({8, 8}, z), Tensor::from({8, 8}, m));
  EXPECT_EQ(q.mask.values()[0], 1.0);
  EXPECT_EQ(q.depth.values()[0], 1.0);
  EXPECT_EQ(q.mask.values()[3], 1.0);
  EXPECT_EQ(q.depth.values()[3], z[5 * 8 + 3]);
  EXPECT_EQ(q.mask.values()[1], 0.0);
  EXPECT_EQ(q.mask.values()[2], 0.0);
  expect_error([] { (void)quarter_supervision(Tensor::zeros({6, 8}), Tensor::zeros({6, 8})); },
               ErrorCode::kResolutionError);
}

// ---------------------------------------------------------------------------

TEST(FlowLoss, ZeroAtTruthAndPlanarOracle) {
  const CameraIntrinsics k{20.0, 20.0, 11.5, 7.5, 24, 16};
  const double Z = 5.0, tx = 0.1;
  const Tensor depth = Tensor::full({16, 24}, Z);
  motion::PoseGraph truth = motion::initialize_poses(2, 0);
  truth.poses[1] = Se3Pose(g::Matrix3::Identity(), {-0.3, 0.0, 0.0});
  const Tensor zero = Tensor::zeros({1, 6});
  EXPECT_EQ(flow_loss(truth, zero, truth, depth, k).item(), 0.0);
  const Tensor xi = Tensor::from({1, 6}, {tx, 0, 0, 0, 0, 0});
  // Unit-depth flow error fx |t| / Z in u only.
  EXPECT_NEAR(flow_loss(truth, xi, truth, depth, k).item(), k.fx * tx / Z, 1e-12);
}

TEST(FlowLoss, ExcludesInvalidReprojections) {
  const CameraIntrinsics k{20.0, 20.0, 11.5, 7.5, 24, 16};
  motion::PoseGraph truth = motion::initialize_poses(2, 0);
  truth.poses[1] = Se3Pose(g::Matrix3::Identity(), {-1.0, 0.0, 0.0});  // shifts 4 px at Z=5
  // Pixels that leave the view in the ground truth with a huge predicted error.
  const Tensor depth = Tensor::full({16, 24}, 5.0);
  const std::size_t n = 16 * 24;
  std::vector<double> coords(2 * n, 0.0), target(2 * n, 0.0), valid(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (i % 24 < 4) {
      valid[i] = 0.0;
      coords[i] = 1e6;
    }
  }
  EXPECT_EQ(flow_loss(Tensor::from({1, 2, 16, 24}, coords), Tensor::from({1, 2, 16, 24}, target),
                      Tensor::from({1, 16, 24}, valid))
                .item(),
            0.0);
  // Through the pose API: out-of-view columns do not count towards the mean.
  const Tensor xi = Tensor::from({1, 6}, {0.5, 0, 0, 0, 0, 0});
  EXPECT_NEAR(flow_loss(truth, xi, truth, depth, k).item(), 20.0 * 0.5 / 5.0, 1e-12);
}

TEST(FlowLoss, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto scene = testkit::make_rigid_scene(700 + seed);
    std::mt19937_64 rng(seed);
    // A translation offset keeps the sign of u - u* and v - v* fixed over the
    // image, away from the |.| kink.
    motion::PoseGraph base = scene.truth;
    for (std::size_t i : base.others())
      base.poses[i] = Se3Pose(base.poses[i].rotation(), base.poses[i].translation() + g::Vector3(0.4, 0.3, 0.0));
    const Tensor xi = testkit::random_param({2, 6}, rng, -0.02, 0.02);
    const auto build = [&] { return flow_loss(base, xi, scene.truth, scene.depth, scene.k); };
    EXPECT_LT(testkit::fd_check(build, {xi}).max_rel_error, 1e-5) << seed;
  }
}

TEST(Se3Geodesic, Examples) {
  motion::PoseGraph truth = motion::initialize_poses(3, 1);
  truth.poses[0] = g::se3_exp((g::Vector6() << 0.2, 0.1, -0.3, 0.05, 0.02, 0.1).finished());
  truth.poses[2] = g::se3_exp((g::Vector6() << -0.4, 0.0, 0.1, -0.03, 0.1, 0.0).finished());
  const Tensor zero = Tensor::zeros({2, 6});
  EXPECT_NEAR(se3_geodesic(truth, zero, truth, 1.0).item(), 0.0, 1e-12);

  motion::PoseGraph shifted = truth;
  for (std::size_t i : truth.others())
    shifted.poses[i] = Se3Pose(truth.poses[i].rotation(), truth.poses[i].translation() + g::Vector3(0.0, 0.3, 0.0));
  EXPECT_NEAR(se3_geodesic(shifted, zero, truth, 1.0).item(), 0.3, 1e-12);

  const g::Vector3 axis = g::Vector3(1.0, -2.0, 0.5).normalized();
  const Se3Pose a = Se3Pose::identity();
  const Se3Pose b(g::so3_exp(axis * std::numbers::pi / 6.0), g::Vector3::Zero());
  EXPECT_NEAR(se3_distance(b, a, 1.0), std::numbers::pi / 6.0, 1e-12);
  EXPECT_NEAR(se3_distance(b, a, 0.5), std::numbers::pi / 12.0, 1e-12);
}

TEST(Se3Geodesic, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto scene = testkit::make_rigid_scene(800 + seed);
    std::mt19937_64 rng(seed);
    const auto base = testkit::perturb(scene.truth, 0.2, rng);
    const Tensor xi = testkit::random_param({2, 6}, rng, -0.05, 0.05);
    const auto build = [&] { return se3_geodesic(base, xi, scene.truth, 1.0); };
    EXPECT_LT(testkit::fd_check(build, {xi}).max_rel_error, 1e-5) << seed;
  }
}

// ---------------------------------------------------------------------------

TEST(Photometric, IdenticalImagesAreZero) {
  std::mt19937_64 rng(9);
  const Tensor a = testkit::random_const({3, 6, 7}, rng, 0, 1);
  const Tensor map = photometric(a, a, 0.85);
  for (double v : map.values()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(Photometric, MinFusion) {
  const Tensor a = Tensor::full({3, 4}, 0.2), b = Tensor::full({3, 4}, 0.1), ones = Tensor::full({3, 4}, 1.0);
  EXPECT_NEAR(min_fusion({a, b}, {ones, ones}).item(), 0.1, 1e-15);
  // Invalid entries never win; pixels valid nowhere are not counted.
  std::vector<double> mb(12, 1.0);
  mb[0] = 0.0;
  EXPECT_NEAR(min_fusion({a, b}, {ones, Tensor::from({3, 4}, mb)}).item(), (0.2 + 11 * 0.1) / 12.0, 1e-15);
  EXPECT_NEAR(min_fusion({a}, {Tensor::from({3, 4}, mb)}).item(), 0.2, 1e-15);
}

TEST(Photometric, SsimMatchesDirectFormula) {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> noise(0.0, 0.05);
  const std::size_t H = 5, W = 5;
  std::vector<double> a(3 * H * W, 0.5), b(3 * H * W);
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = 0.5 + noise(rng);
  const Tensor s = ssim(Tensor::from({3, H, W}, a), Tensor::from({3, H, W}, b));
  // Interior pixel (2,2): 3x3 window with no replication.
  double expected = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> pa, pb;
    for (std::size_t y = 1; y <= 3; ++y)
      for (std::size_t x = 1; x <= 3; ++x) {
        pa.push_back(a[(c * H + y) * W + x]);
        pb.push_back(b[(c * H + y) * W + x]);
      }
    expected += ssim_direct(pa, pb) / 3.0;
  }
  EXPECT_NEAR(s.at({2, 2}), expected, 1e-12);
  // Corner (0,0): replicated window rows/cols {0,0,1}.
  double corner = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> pa, pb;
    for (std::size_t y : {0u, 0u, 1u})
      for (std::size_t x : {0u, 0u, 1u}) {
        pa.push_back(a[(c * H + y) * W + x]);
        pb.push_back(b[(c * H + y) * W + x]);
      }
    corner += ssim_direct(pa, pb) / 3.0;
  }
  EXPECT_NEAR(s.at({0, 0}), corner, 1e-12);
}

TEST(Photometric, GradientMatchesFiniteDifferences) {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor a = testkit::random_const({3, 5, 6}, rng, 0, 1);
    const Tensor b = testkit::random_param({3, 5, 6}, rng, 0, 1);
    const Tensor w = testkit::random_const({5, 6}, rng);
    EXPECT_LT(testkit::fd_check([&] { return testkit::probe(photometric(a, b, 0.85), w); }, {b}).max_rel_error,
              1e-5);
  }
}

TEST(DepthCoordinates, MatchReprojectionAndGradient) {
  const auto scene = testkit::make_rigid_scene(900);
  const Se3Pose rel = scene.truth.relative(scene.truth.key, 0);
  std::vector<double> valid;
  const Tensor c = depth_coordinates(rel, scene.depth, scene.k, &valid);
  const auto r = g::reproject(rel, {3.0, 4.0}, scene.depth.at({4, 3}), scene.k);
  EXPECT_NEAR(c.at({0, 4, 3}), r.pixel.x(), 1e-12);
  EXPECT_NEAR(c.at({1, 4, 3}), r.pixel.y(), 1e-12);
  EXPECT_EQ(valid[4 * 24 + 3], r.valid ? 1.0 : 0.0);
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor z = testkit::random_param({16, 24}, rng, 3.0, 9.0);
    const Tensor w = testkit::random_const({2, 16, 24}, rng);
    const auto build = [&] { return testkit::probe(depth_coordinates(rel, z, scene.k), w); };
    EXPECT_LT(testkit::fd_check(build, {z}, 1e-6, 64).max_rel_error, 1e-5);
  }
}

TEST(Sequence, Examples) {
  EXPECT_EQ(sequence_loss({Tensor::scalar(3.0)}, 0.5).item(), 3.0);
  EXPECT_EQ(sequence_loss({Tensor::scalar(4.0), Tensor::scalar(2.0)}, 0.5).item(), 4.0);
  EXPECT_EQ(sequence_loss({Tensor::scalar(1.0), Tensor::scalar(1.0), Tensor::scalar(1.0)}, 0.5).item(), 1.75);
}

TEST(Sequence, MonotoneInEachTerm) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Tensor> l{Tensor::scalar(u(rng)), Tensor::scalar(u(rng)), Tensor::scalar(u(rng))};
    const double base = sequence_loss(l, 0.5).item();
    const std::size_t s = static_cast<std::size_t>(trial % 3);
    l[s] = Tensor::scalar(l[s].item() + u(rng));
    EXPECT_GE(sequence_loss(l, 0.5).item(), base);
  }
}

// ---------------------------------------------------------------------------

namespace {

struct SupervisedFixture {
  DepthHypothesis hyp{1.0, 8.0, 8};
  SupervisedInputs in;
  Tensor logits;  // stands in for the depth head
  Tensor sigma_raw;  // stands in for the uncertainty head output
};

SupervisedFixture supervised_fixture(std::uint64_t seed) {
  SupervisedFixture f;
  std::mt19937_64 rng(seed);
  const std::size_t H = 8, W = 8;
  f.in.gt_depth = testkit::random_const({H, W}, rng, 1.5, 7.5);
  f.in.supervised = random_mask({H, W}, rng, 0.5);
  f.in.image = testkit::random_const({3, H, W}, rng, 0, 1);
  f.in.quarter = quarter_supervision(f.in.gt_depth, f.in.supervised);
  f.logits = testkit::random_param({8, 2, 2}, rng, -1, 1);
  f.sigma_raw = testkit::random_param({2, 2}, rng, -1, 1);
  return f;
}

LossTerms run_supervised(SupervisedFixture& f, const LossWeights& w) {
  f.in.probabilities = {grad::softmax(f.logits, 0)};
  f.in.depths = {depthnet::upsample(depthnet::soft_argmax(f.in.probabilities[0], f.hyp))};
  f.in.sigma = depthnet::sigma_from_confidence(grad::sigmoid(f.sigma_raw), w.sigma_scale, w.sigma_offset);
  return total_supervised(f.in, f.hyp, w);
}

}  // namespace

TEST(TotalSupervised, AssemblesFromParts) {
  auto f = supervised_fixture(1);
  const LossWeights w;
  const auto terms = run_supervised(f, w);
  const Tensor l1 = l1_depth(f.in.depths[0], f.in.gt_depth, f.in.supervised);
  const Tensor missing = grad::add_scalar(grad::neg(f.in.supervised), 1.0);
  const Tensor sm = smoothness_edge_aware(f.in.depths[0], f.in.image, missing);
  const Tensor fo =
      focal_loss(f.in.probabilities[0], unimodal_target(f.in.quarter.depth, f.in.sigma, f.hyp), 2.0, f.in.quarter.mask);
  EXPECT_NEAR(terms.total.item(), l1.item() + 0.02 * sm.item() + 0.002 * fo.item(), 1e-12);
  EXPECT_NEAR(terms.l1, l1.item(), 1e-15);
}

TEST(TotalSupervised, PerfectPredictionIsZeroUpToFocalFloor) {
  const DepthHypothesis hyp(1.0, 8.0, 8);
  const std::size_t H = 8, W = 8;
  SupervisedInputs in;
  in.gt_depth = Tensor::full({H, W}, 4.0);
  std::vector<double> m(H * W, 1.0);
  for (std::size_t x = 0; x < W; ++x) m[3 * W + x] = 0.0;  // a missing row on the plateau
  in.supervised = Tensor::from({H, W}, m);
  in.image = Tensor::full({3, H, W}, 0.5);
  in.quarter = quarter_supervision(in.gt_depth, in.supervised);
  in.depths = {Tensor::full({H, W}, 4.0)};
  std::vector<double> onehot(8 * 4, 0.0);
  for (std::size_t i = 0; i < 4; ++i) onehot[3 * 4 + i] = 1.0;  // bin 3 is z = 4
  in.probabilities = {Tensor::from({8, 2, 2}, onehot)};
  in.sigma = Tensor::full({2, 2}, 0.25);
  LossWeights w;
  const auto terms = total_supervised(in, hyp, w);
  EXPECT_EQ(terms.l1, 0.0);
  EXPECT_EQ(terms.smooth, 0.0);
  // Focal floor: -log P*(true bin) at sigma = eps, with P one-hot.
  const Tensor pstar = unimodal_target(in.quarter.depth, in.sigma, hyp);
  const double floor = std::pow(1.0 - pstar.at({3, 0, 0}), -2.0) * -std::log(pstar.at({3, 0, 0}));
  EXPECT_NEAR(terms.total.item(), 0.002 * floor, 1e-12);
}

TEST(TotalSupervised, NoFocalWeightNoUncertaintyGradient) {
  auto f = supervised_fixture(2);
  LossWeights w;
  w.supervised[2] = 0.0;
  grad::backward(run_supervised(f, w).total);
  for (double v : f.sigma_raw.grad()) EXPECT_EQ(v, 0.0);
  double norm = 0;
  for (double v : f.logits.grad()) norm += v * v;
  EXPECT_GT(norm, 0.0);

  auto f2 = supervised_fixture(2);
  grad::backward(run_supervised(f2, LossWeights{}).total);
  double unc = 0;
  for (double v : f2.sigma_raw.grad()) unc += v * v;
  EXPECT_GT(unc, 0.0);
}

TEST(TotalSemiSupervised, ExactWarpGivesZeroPhotometric) {
  // Fronto-parallel textured plane; frames translate by one integer pixel
  // shift, so the exact warp samples on the pixel lattice.
  const std::size_t H = 16, W = 24;
  const CameraIntrinsics k{20.0, 20.0, 11.5, 7.5, W, H};
  const double Z = 5.0;
  const double b = 2.0 * Z / k.fx;  // 2 px
  auto texture = [](double x, double y, std::size_t c) {
    return 0.5 + 0.4 * std::sin(0.7 * x + 0.3 * c) * std::cos(0.45 * y - 0.2 * c);
  };
  std::vector<double> img(3 * 3 * H * W);
  const double shift[3] = {2.0, 0.0, -2.0};  // F_i(x) = T(x + s_i), s_i = fx b_i / Z
  for (std::size_t f = 0; f < 3; ++f)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
          img[((f * 3 + c) * H + y) * W + x] = texture(static_cast<double>(x) + shift[f], static_cast<double>(y), c);
  SemiSupervisedInputs in;
  in.images = Tensor::from({3, 3, H, W}, img);
  in.k = k;
  in.base = motion::initialize_poses(3, 1);
  in.base.poses[0] = Se3Pose(g::Matrix3::Identity(), {-b, 0.0, 0.0});
  in.base.poses[2] = Se3Pose(g::Matrix3::Identity(), {b, 0.0, 0.0});
  in.truth = in.base;
  in.xi = Tensor::parameter({2, 6}, std::vector<double>(12, 0.0));
  const Tensor z = Tensor::parameter({H, W}, std::vector<double>(H * W, Z));
  in.depths = {z};
  const auto terms = total_semi_supervised(in, LossWeights{});
  EXPECT_LT(terms.depth_photo, 1e-6);
  EXPECT_LT(terms.motion_photo, 1e-6);
  EXPECT_EQ(terms.smooth, 0.0);
  EXPECT_LT(terms.se3, 1e-12);
  grad::backward(terms.total);
  EXPECT_TRUE(z.has_grad());
}

// ---------------------------------------------------------------------------

class LossGradient : public ::testing::TestWithParam<std::pair<std::size_t, int>> {};

TEST_P(LossGradient, MatchesFiniteDifferences) {
  const auto [index, seed] = GetParam();
  const auto& [name, factory] = testkit::loss_cases()[index];
  std::mt19937_64 rng(5000 + static_cast<std::uint64_t>(seed) * 7919 + index);
  testkit::Case c = factory(rng);
  const auto report = testkit::fd_check(c.build, c.leaves, 1e-6);
  EXPECT_GT(report.checked, 0u);
  EXPECT_LT(report.max_rel_error, 1e-5) << name << " seed " << seed;
}

std::vector<std::pair<std::size_t, int>> loss_params() {
  std::vector<std::pair<std::size_t, int>> p;
  for (std::size_t i = 0; i < testkit::loss_cases().size(); ++i)
    for (int s = 0; s < 10; ++s) p.emplace_back(i, s);
  return p;
}

INSTANTIATE_TEST_SUITE_P(AllLosses, LossGradient, ::testing::ValuesIn(loss_params()), [](const auto& info) {
  return testkit::loss_cases()[info.param.first].first + "_seed" + std::to_string(info.param.second);
});
