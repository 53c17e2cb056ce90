// SPDX-License-Identifier: Apache-2.0
#include "sfmc/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "sfmc/error.hpp"
#include "sfmc/grad/ops.hpp"

namespace sfmc::losses {

using geometry::Vector2;
using geometry::Vector3;
using geometry::Vector6;
using grad::Shape;

namespace {

void require_shape(const Tensor& t, const Shape& shape, const char* what) {
  if (t.shape() != shape)
    throw Error(ErrorCode::kShapeMismatch,
                std::string(what) + " is " + grad::shape_str(t.shape()) + ", expected " + grad::shape_str(shape));
}

double count_nonzero(std::span<const double> m) {
  double n = 0.0;
  for (double v : m) n += v != 0.0 ? 1.0 : 0.0;
  return n;
}

/// sum(x * mask) / count(mask), or a zero constant when the mask is empty.
Tensor masked_mean(const Tensor& x, const Tensor& mask) {
  const double n = count_nonzero(mask.values());
  if (n == 0.0) return Tensor::scalar(0.0);
  return grad::scale(grad::sum(grad::mul(x, mask)), 1.0 / n);
}

Tensor binary(const Tensor& mask) {
  std::vector<double> v(mask.values().begin(), mask.values().end());
  for (auto& x : v) x = x != 0.0 ? 1.0 : 0.0;
  return Tensor::from(mask.shape(), std::move(v));
}

Tensor dx(const Tensor& z) {
  const std::size_t w = z.dim(1);
  return grad::sub(grad::slice(z, 1, 1, w), grad::slice(z, 1, 0, w - 1));
}

Tensor dy(const Tensor& z) {
  const std::size_t h = z.dim(0);
  return grad::sub(grad::slice(z, 0, 1, h), grad::slice(z, 0, 0, h - 1));
}

Tensor smoothness_weighted(const Tensor& depth, const Tensor& mask, const Tensor* wx, const Tensor* wy) {
  if (depth.rank() != 2) throw Error(ErrorCode::kShapeMismatch, "depth must be [H,W]");
  require_shape(mask, depth.shape(), "smoothness mask");
  const std::size_t h = depth.dim(0), w = depth.dim(1);
  const Tensor m = binary(mask);
  Tensor total = Tensor::scalar(0.0);
  if (w > 1) {
    Tensor gx = grad::abs(dx(depth));
    if (wx) gx = grad::mul(gx, *wx);
    total = grad::add(total, masked_mean(gx, grad::slice(m, 1, 0, w - 1)));
  }
  if (h > 1) {
    Tensor gy = grad::abs(dy(depth));
    if (wy) gy = grad::mul(gy, *wy);
    total = grad::add(total, masked_mean(gy, grad::slice(m, 0, 0, h - 1)));
  }
  return total;
}

/// Edge-replicating 1-pixel pad of [C,H,W].
Tensor pad_replicate(const Tensor& x) {
  const std::size_t H = x.dim(1), W = x.dim(2);
  Tensor t = grad::concat({grad::slice(x, 2, 0, 1), x, grad::slice(x, 2, W - 1, W)}, 2);
  return grad::concat({grad::slice(t, 1, 0, 1), t, grad::slice(t, 1, H - 1, H)}, 1);
}

/// 3x3 box mean per channel with edge replication: [C,H,W] -> [C,H,W].
Tensor box3(const Tensor& x) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  static const Tensor kernel = Tensor::full({1, 1, 3, 3}, 1.0 / 9.0);
  static const Tensor bias = Tensor::zeros({1});
  const Tensor p = grad::reshape(pad_replicate(x), {C, 1, H + 2, W + 2});
  return grad::reshape(grad::conv2d(p, kernel, bias, 1, 0), {C, H, W});
}

Vector6 row6(std::span<const double> v, std::size_t p) {
  Vector6 t;
  for (std::size_t a = 0; a < 6; ++a) t[static_cast<Eigen::Index>(a)] = v[p * 6 + a];
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------

LossWeights parse_loss_weights(const nlohmann::json& j) {
  LossWeights w;
  if (j.is_null()) return w;
  if (!j.is_object()) throw Error(ErrorCode::kConfigError, "loss weights must be an object");
  static const std::set<std::string> known{"supervised", "semi",         "gamma",        "delta",
                                           "beta",       "alpha",        "sigma_scale",  "sigma_offset",
                                           "focal_variant", "focal_through_depth"};
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw Error(ErrorCode::kConfigError, "loss weights: unknown key '" + key + "'");
  try {
    auto arr = [&](const char* key, std::array<double, 4>& out) {
      if (!j.contains(key)) return;
      const auto& a = j.at(key);
      if (!a.is_array() || a.size() != 4) throw Error(ErrorCode::kConfigError, std::string(key) + " needs 4 numbers");
      for (std::size_t i = 0; i < 4; ++i) out[i] = a.at(i).get<double>();
    };
    arr("supervised", w.supervised);
    arr("semi", w.semi);
    auto num = [&](const char* key, double& out) {
      if (j.contains(key)) out = j.at(key).get<double>();
    };
    num("gamma", w.gamma);
    num("delta", w.delta);
    num("beta", w.beta);
    num("alpha", w.alpha);
    num("sigma_scale", w.sigma_scale);
    num("sigma_offset", w.sigma_offset);
    if (j.contains("focal_through_depth")) w.focal_through_depth = j.at("focal_through_depth").get<bool>();
    if (j.contains("focal_variant")) {
      const auto v = j.at("focal_variant").get<std::string>();
      if (v == "printed") w.focal_variant = FocalVariant::kPrinted;
      else if (v == "positive") w.focal_variant = FocalVariant::kPositive;
      else throw Error(ErrorCode::kConfigError, "focal_variant must be \"printed\" or \"positive\"");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfigError, std::string("loss weights: ") + e.what());
  }
  return w;
}

nlohmann::json to_json(const LossWeights& w) {
  return {{"supervised", w.supervised},
          {"semi", w.semi},
          {"gamma", w.gamma},
          {"delta", w.delta},
          {"beta", w.beta},
          {"alpha", w.alpha},
          {"sigma_scale", w.sigma_scale},
          {"sigma_offset", w.sigma_offset},
          {"focal_variant", w.focal_variant == FocalVariant::kPrinted ? "printed" : "positive"},
          {"focal_through_depth", w.focal_through_depth}};
}

// ---------------------------------------------------------------------------

Tensor l1_depth(const Tensor& depth, const Tensor& target, const Tensor& valid) {
  require_shape(target, depth.shape(), "l1 target");
  require_shape(valid, depth.shape(), "l1 mask");
  if (count_nonzero(valid.values()) == 0.0) throw Error(ErrorCode::kEmptySupervision, "no supervised pixels");
  return masked_mean(grad::abs(grad::sub(depth, target)), binary(valid));
}

Tensor smoothness(const Tensor& depth, const Tensor& mask) { return smoothness_weighted(depth, mask, nullptr, nullptr); }

Tensor grayscale(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw Error(ErrorCode::kShapeMismatch, "image must be [3,H,W], got " + grad::shape_str(image.shape()));
  const std::size_t n = image.dim(1) * image.dim(2);
  auto v = image.values();
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = 0.299 * v[i] + 0.587 * v[n + i] + 0.114 * v[2 * n + i];
  return Tensor::from({image.dim(1), image.dim(2)}, std::move(g));
}

Tensor smoothness_edge_aware(const Tensor& depth, const Tensor& image, const Tensor& mask) {
  const Tensor g = grayscale(image);
  require_shape(g, depth.shape(), "smoothness image");
  Tensor wx, wy;
  {
    grad::NoGradGuard guard;
    wx = grad::exp(grad::neg(grad::abs(dx(g))));
    wy = grad::exp(grad::neg(grad::abs(dy(g))));
  }
  return smoothness_weighted(depth, mask, depth.dim(1) > 1 ? &wx : nullptr, depth.dim(0) > 1 ? &wy : nullptr);
}

Tensor unimodal_target(const Tensor& target_depth, const Tensor& sigma, const depthnet::DepthHypothesis& hyp) {
  require_shape(sigma, target_depth.shape(), "sigma");
  const std::size_t D = hyp.size(), h = target_depth.dim(0), w = target_depth.dim(1);
  std::vector<double> dist(D * h * w);
  auto z = target_depth.values();
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t i = 0; i < h * w; ++i) dist[d * h * w + i] = -std::fabs(hyp[d] - z[i]);
  const Tensor logits = grad::div(Tensor::from({D, h, w}, std::move(dist)), grad::reshape(sigma, {1, h, w}));
  return grad::softmax(logits, 0);
}

Tensor focal_loss(const Tensor& probabilities, const Tensor& target, double delta, const Tensor& valid,
                  FocalVariant variant) {
  require_shape(target, probabilities.shape(), "focal target");
  if (probabilities.rank() != 3) throw Error(ErrorCode::kShapeMismatch, "focal inputs must be [D,h,w]");
  require_shape(valid, {probabilities.dim(1), probabilities.dim(2)}, "focal mask");
  Tensor per_bin;
  if (variant == FocalVariant::kPrinted) {
    const Tensor factor = grad::pow_scalar(grad::clamp_min(grad::add_scalar(grad::neg(target), 1.0), kLogFloor), -delta);
    per_bin = grad::mul(factor, grad::neg(grad::mul(probabilities, grad::log(grad::clamp_min(target, kLogFloor)))));
  } else {
    const Tensor factor = grad::pow_scalar(grad::clamp_min(grad::add_scalar(grad::neg(probabilities), 1.0), 0.0), delta);
    per_bin = grad::mul(factor, grad::neg(grad::mul(target, grad::log(grad::clamp_min(probabilities, kLogFloor)))));
  }
  return masked_mean(grad::sum(per_bin, 0), binary(valid));
}

QuarterSupervision quarter_supervision(const Tensor& depth, const Tensor& mask) {
  require_shape(mask, depth.shape(), "supervision mask");
  const std::size_t H = depth.dim(0), W = depth.dim(1);
  if (H % 4 != 0 || W % 4 != 0) throw Error(ErrorCode::kResolutionError, "ground truth size not divisible by 4");
  const std::size_t h = H / 4, w = W / 4;
  auto z = depth.values();
  auto m = mask.values();
  std::vector<double> qd(h * w, 0.0), qm(h * w, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double best = std::numeric_limits<double>::infinity();
      for (long yy = static_cast<long>(4 * y) - 1; yy <= static_cast<long>(4 * y) + 2; ++yy) {
        for (long xx = static_cast<long>(4 * x) - 1; xx <= static_cast<long>(4 * x) + 2; ++xx) {
          if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
          const std::size_t i = static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx);
          if (m[i] == 0.0 || !(z[i] > 0.0)) continue;
          const double dy2 = static_cast<double>(yy) - 4.0 * y, dx2 = static_cast<double>(xx) - 4.0 * x;
          const double d = dy2 * dy2 + dx2 * dx2;
          if (d < best) {
            best = d;
            qd[y * w + x] = z[i];
            qm[y * w + x] = 1.0;
          }
        }
      }
    }
  }
  return {Tensor::from({h, w}, std::move(qd)), Tensor::from({h, w}, std::move(qm))};
}

// ---------------------------------------------------------------------------

Tensor flow_loss(const Tensor& coords, const Tensor& target, const Tensor& valid) {
  require_shape(target, coords.shape(), "flow target");
  if (coords.rank() != 4 || coords.dim(1) != 2) throw Error(ErrorCode::kShapeMismatch, "coords must be [P,2,h,w]");
  const std::size_t P = coords.dim(0), h = coords.dim(2), w = coords.dim(3);
  require_shape(valid, {P, h, w}, "flow mask");
  const Tensor per_pixel = grad::sum(grad::abs(grad::sub(coords, target)), 1);  // [P,h,w]
  return masked_mean(per_pixel, binary(valid));
}

Tensor flow_loss(const motion::PoseGraph& base, const Tensor& xi, const motion::PoseGraph& truth, const Tensor& depth,
                 const CameraIntrinsics& k) {
  const auto others = base.others();
  std::vector<double> valid_pred;
  const Tensor coords = motion::induced_coordinates(base, xi, depth, k, &valid_pred);
  const std::size_t n = k.height * k.width;
  std::vector<double> target(others.size() * 2 * n), valid(others.size() * n);
  const Se3Pose key_inv = truth.poses[truth.key].inverse();
  for (std::size_t p = 0; p < others.size(); ++p) {
    std::vector<double> vt;
    const Tensor t = motion::reprojected_coordinates(truth.poses[others[p]] * key_inv, depth, k, &vt);
    std::copy(t.values().begin(), t.values().end(), target.begin() + static_cast<long>(p * 2 * n));
    for (std::size_t i = 0; i < n; ++i) {
      valid[p * n + i] = vt[i] * valid_pred[p * n + i];
      // Invalid targets hold the off-grid sentinel; keep the L1 finite.
      if (valid[p * n + i] == 0.0) {
        target[p * 2 * n + i] = coords.values()[p * 2 * n + i];
        target[(p * 2 + 1) * n + i] = coords.values()[(p * 2 + 1) * n + i];
      }
    }
  }
  return flow_loss(coords, Tensor::from(coords.shape(), std::move(target)),
                   Tensor::from({others.size(), k.height, k.width}, std::move(valid)));
}

double se3_distance(const Se3Pose& pose, const Se3Pose& truth, double beta) {
  return (pose.translation() - truth.translation()).norm() +
         beta * geometry::rotation_angle(truth.rotation().transpose() * pose.rotation());
}

Tensor se3_geodesic(const motion::PoseGraph& base, const Tensor& xi, const motion::PoseGraph& truth, double beta) {
  const auto others = base.others();
  const std::size_t P = others.size();
  require_shape(xi, {P, 6}, "pose update");
  if (truth.size() != base.size() || truth.key != base.key)
    throw Error(ErrorCode::kShapeMismatch, "ground-truth pose graph differs in size or keyframe");
  auto xv = xi.values();
  double total = 0.0;
  std::vector<Vector6> grads(P);
  for (std::size_t p = 0; p < P; ++p) {
    const Vector6 t = row6(xv, p);
    const Se3Pose rel = geometry::se3_exp(t) * base.relative(base.key, others[p]);
    const Se3Pose ref = truth.relative(truth.key, others[p]);
    total += se3_distance(rel, ref, beta);
    // Gradient w.r.t. a left increment eps of rel, then chained through J_l(xi).
    Vector6 ge = Vector6::Zero();
    const Vector3 dtv = rel.translation() - ref.translation();
    const double dn = dtv.norm();
    if (dn > 0.0) {
      const Vector3 u = dtv / dn;
      ge.head<3>() = u;
      ge.tail<3>() = rel.translation().cross(u);
    }
    const geometry::Matrix3 e = ref.rotation().transpose() * rel.rotation();
    const double angle = geometry::rotation_angle(e);
    if (angle > 1e-12) {
      const Vector3 phi = geometry::so3_log(e);
      ge.tail<3>() += beta * (ref.rotation() * (phi / phi.norm()));
    }
    grads[p] = geometry::se3_left_jacobian(t).transpose() * ge;
  }
  const double inv = 1.0 / static_cast<double>(P);
  return grad::make_result("se3_geodesic", {}, {total * inv}, {xi},
                           [grads, inv, P](std::span<const double> g, std::span<double* const> in) {
                             if (!in[0]) return;
                             for (std::size_t p = 0; p < P; ++p)
                               for (std::size_t a = 0; a < 6; ++a)
                                 in[0][p * 6 + a] += g[0] * inv * grads[p][static_cast<Eigen::Index>(a)];
                           });
}

// ---------------------------------------------------------------------------

Tensor ssim(const Tensor& a, const Tensor& b) {
  require_shape(b, a.shape(), "ssim input");
  if (a.rank() != 3) throw Error(ErrorCode::kShapeMismatch, "ssim inputs must be [C,H,W]");
  const Tensor mu_a = box3(a), mu_b = box3(b);
  const Tensor saa = grad::sub(box3(grad::mul(a, a)), grad::mul(mu_a, mu_a));
  const Tensor sbb = grad::sub(box3(grad::mul(b, b)), grad::mul(mu_b, mu_b));
  const Tensor sab = grad::sub(box3(grad::mul(a, b)), grad::mul(mu_a, mu_b));
  const Tensor num = grad::mul(grad::add_scalar(grad::scale(grad::mul(mu_a, mu_b), 2.0), kSsimC1),
                               grad::add_scalar(grad::scale(sab, 2.0), kSsimC2));
  const Tensor den = grad::mul(grad::add_scalar(grad::add(grad::mul(mu_a, mu_a), grad::mul(mu_b, mu_b)), kSsimC1),
                               grad::add_scalar(grad::add(saa, sbb), kSsimC2));
  return grad::mean(grad::div(num, den), 0);
}

Tensor photometric(const Tensor& image, const Tensor& reconstructed, double alpha) {
  const Tensor s = grad::scale(grad::add_scalar(grad::neg(ssim(image, reconstructed)), 1.0), 0.5 * alpha);
  const Tensor l1 = grad::scale(grad::mean(grad::abs(grad::sub(image, reconstructed)), 0), 1.0 - alpha);
  return grad::add(s, l1);
}

Tensor min_fusion(const std::vector<Tensor>& maps, const std::vector<Tensor>& valid) {
  if (maps.empty() || maps.size() != valid.size())
    throw Error(ErrorCode::kShapeMismatch, "min_fusion needs one mask per map");
  const Shape shape = maps.front().shape();
  const std::size_t n = maps.front().numel();
  std::vector<double> any(n, 0.0);
  Tensor fused;
  for (std::size_t p = 0; p < maps.size(); ++p) {
    require_shape(maps[p], shape, "min_fusion map");
    require_shape(valid[p], shape, "min_fusion mask");
    // Invalid entries are lifted out of contention by a large constant.
    std::vector<double> lift(n);
    for (std::size_t i = 0; i < n; ++i) {
      const bool ok = valid[p].values()[i] != 0.0;
      lift[i] = ok ? 0.0 : 1e6;
      if (ok) any[i] = 1.0;
    }
    const Tensor m = grad::add(maps[p], Tensor::from(shape, std::move(lift)));
    fused = p == 0 ? m : grad::minimum(fused, m);
  }
  return masked_mean(fused, Tensor::from(shape, std::move(any)));
}

Tensor depth_coordinates(const Se3Pose& key_to_frame, const Tensor& depth, const CameraIntrinsics& k,
                         std::vector<double>* valid) {
  if (depth.shape() != Shape{k.height, k.width})
    throw Error(ErrorCode::kShapeMismatch, "depth " + grad::shape_str(depth.shape()) + " vs intrinsics");
  const std::size_t h = k.height, w = k.width, n = h * w;
  auto z = depth.values();
  std::vector<double> out(2 * n, -1e9);
  auto jac = std::make_shared<std::vector<Vector2>>(n, Vector2::Zero());
  if (valid) valid->assign(n, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = y * w + x;
      const auto r = geometry::reproject(key_to_frame, {static_cast<double>(x), static_cast<double>(y)}, z[i], k);
      if (!(z[i] > 0.0) || r.depth <= geometry::kDepthEpsilon) continue;
      out[i] = k.fx * r.point.x() / r.point.z() + k.cx;
      out[n + i] = k.fy * r.point.y() / r.point.z() + k.cy;
      const Vector3 ray((static_cast<double>(x) - k.cx) / k.fx, (static_cast<double>(y) - k.cy) / k.fy, 1.0);
      (*jac)[i] = geometry::projection_jacobian(r.point, k) * (key_to_frame.rotation() * ray);
      if (valid && r.valid) (*valid)[i] = 1.0;
    }
  }
  return grad::make_result("depth_coordinates", {2, h, w}, std::move(out), {depth},
                           [jac, n](std::span<const double> g, std::span<double* const> in) {
                             if (!in[0]) return;
                             for (std::size_t i = 0; i < n; ++i)
                               in[0][i] += g[i] * (*jac)[i].x() + g[n + i] * (*jac)[i].y();
                           });
}

Tensor erode_mask(const std::vector<double>& mask, std::size_t height, std::size_t width) {
  std::vector<double> out(height * width, 0.0);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      bool ok = true;
      for (long dy2 = -1; dy2 <= 1 && ok; ++dy2) {
        for (long dx2 = -1; dx2 <= 1 && ok; ++dx2) {
          // Replicated edges read the border pixel itself.
          const long yy = std::clamp<long>(static_cast<long>(y) + dy2, 0, static_cast<long>(height) - 1);
          const long xx = std::clamp<long>(static_cast<long>(x) + dx2, 0, static_cast<long>(width) - 1);
          ok = mask[static_cast<std::size_t>(yy) * width + static_cast<std::size_t>(xx)] != 0.0;
        }
      }
      out[y * width + x] = ok ? 1.0 : 0.0;
    }
  }
  return Tensor::from({height, width}, std::move(out));
}

// ---------------------------------------------------------------------------

Tensor sequence_loss(const std::vector<Tensor>& losses, double gamma) {
  if (losses.empty()) throw Error(ErrorCode::kShapeMismatch, "sequence_loss needs at least one term");
  const std::size_t m = losses.size();
  Tensor total;
  for (std::size_t s = 0; s < m; ++s) {
    const Tensor t = grad::scale(losses[s], std::pow(gamma, static_cast<double>(m - 1 - s)));
    total = s == 0 ? t : grad::add(total, t);
  }
  return total;
}

LossTerms total_supervised(const SupervisedInputs& in, const depthnet::DepthHypothesis& hyp, const LossWeights& w) {
  if (in.depths.empty() || in.depths.size() != in.probabilities.size())
    throw Error(ErrorCode::kShapeMismatch, "need one probability volume per depth prediction");
  LossTerms terms;
  const Tensor missing = grad::add_scalar(grad::neg(binary(in.supervised)), 1.0);
  const bool use_focal = w.supervised[2] != 0.0;
  Tensor target;
  if (use_focal) target = unimodal_target(in.quarter.depth, in.sigma, hyp);
  std::vector<Tensor> per_prediction;
  for (std::size_t s = 0; s < in.depths.size(); ++s) {
    const Tensor l1 = l1_depth(in.depths[s], in.gt_depth, in.supervised);
    const Tensor sm = smoothness_edge_aware(in.depths[s], in.image, missing);
    Tensor l = grad::add(grad::scale(l1, w.supervised[0]), grad::scale(sm, w.supervised[1]));
    if (use_focal) {
      const Tensor p = w.focal_through_depth ? in.probabilities[s] : in.probabilities[s].detach();
      const Tensor f = focal_loss(p, target, w.delta, in.quarter.mask, w.focal_variant);
      l = grad::add(l, grad::scale(f, w.supervised[2]));
      terms.focal = f.item();
    }
    terms.l1 = l1.item();
    terms.smooth = sm.item();
    per_prediction.push_back(l);
  }
  terms.total = sequence_loss(per_prediction, w.gamma);
  if (!in.flow_terms.empty() && w.supervised[3] != 0.0) {
    terms.total = grad::add(terms.total, grad::scale(sequence_loss(in.flow_terms, w.gamma), w.supervised[3]));
    terms.flow = in.flow_terms.back().item();
  }
  return terms;
}

SemiTerms total_semi_supervised(const SemiSupervisedInputs& in, const LossWeights& w) {
  if (in.depths.empty()) throw Error(ErrorCode::kShapeMismatch, "need at least one depth prediction");
  const auto others = in.base.others();
  const std::size_t H = in.k.height, W = in.k.width;
  const Tensor key = grad::reshape(grad::slice(in.images, 0, in.base.key, in.base.key + 1), {3, H, W});
  auto frame = [&](std::size_t i) { return grad::reshape(grad::slice(in.images, 0, i, i + 1), {3, H, W}); };
  const motion::PoseGraph updated = motion::retract(in.base, in.xi.detach());
  const Tensor all = Tensor::full({H, W}, 1.0);

  SemiTerms terms;
  std::vector<Tensor> per_prediction;
  for (const Tensor& z : in.depths) {
    std::vector<Tensor> maps, masks;
    for (std::size_t i : others) {
      std::vector<double> v;
      const Tensor c = depth_coordinates(updated.relative(updated.key, i), z, in.k, &v);
      maps.push_back(photometric(key, grad::bilinear_sample(frame(i), c), w.alpha));
      masks.push_back(erode_mask(v, H, W));
    }
    const Tensor dp = min_fusion(maps, masks);
    const Tensor sm = smoothness_edge_aware(z, key, all);
    per_prediction.push_back(grad::add(grad::scale(dp, w.semi[0]), grad::scale(sm, w.semi[1])));
    terms.depth_photo = dp.item();
    terms.smooth = sm.item();
  }
  terms.total = sequence_loss(per_prediction, w.gamma);

  // Pose-driven reconstruction with the final depth held fixed.
  const Tensor z_fixed = in.depths.back().detach();
  const Tensor coords = motion::induced_coordinates(in.base, in.xi, z_fixed, in.k);
  std::vector<Tensor> maps, masks;
  for (std::size_t p = 0; p < others.size(); ++p) {
    const Tensor c = grad::reshape(grad::slice(coords, 0, p, p + 1), {2, H, W});
    std::vector<double> v(H * W, 0.0);
    auto cv = c.values();
    for (std::size_t i = 0; i < H * W; ++i) {
      const double u = cv[i], vv = cv[H * W + i];
      v[i] = (z_fixed.values()[i] > 0.0 && u >= 0.0 && vv >= 0.0 && u < static_cast<double>(W) &&
              vv < static_cast<double>(H))
                 ? 1.0
                 : 0.0;
    }
    maps.push_back(photometric(key, grad::bilinear_sample(frame(others[p]), c), w.alpha));
    masks.push_back(erode_mask(v, H, W));
  }
  const Tensor mp = min_fusion(maps, masks);
  const Tensor se3 = se3_geodesic(in.base, in.xi, in.truth, w.beta);
  terms.total = grad::add(terms.total, grad::add(grad::scale(mp, w.semi[2]), grad::scale(se3, w.semi[3])));
  terms.motion_photo = mp.item();
  terms.se3 = se3.item();
  return terms;
}

}  // namespace sfmc::losses
