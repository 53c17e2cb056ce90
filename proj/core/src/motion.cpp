// SPDX-License-Identifier: Apache-2.0
#include "sfmc/motion.hpp"

#include <Eigen/Cholesky>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "sfmc/depthnet.hpp"
#include "sfmc/error.hpp"
#include "sfmc/grad/ops.hpp"

namespace sfmc::motion {

using geometry::Vector2;
using geometry::Vector3;
using geometry::Vector6;
using grad::Shape;
using Jacobian26 = Eigen::Matrix<double, 2, 6>;

namespace {

constexpr double kOffGrid = -1e9;

void check_depth(const Tensor& depth, const CameraIntrinsics& k) {
  if (depth.rank() != 2 || depth.dim(0) != k.height || depth.dim(1) != k.width)
    throw Error(ErrorCode::kShapeMismatch, "depth " + grad::shape_str(depth.shape()) + " vs intrinsics " +
                                               std::to_string(k.width) + "x" + std::to_string(k.height));
}

void check_pair_field(const Tensor& t, std::size_t pairs, std::size_t channels, const CameraIntrinsics& k,
                      const char* what) {
  const Shape want{pairs, channels, k.height, k.width};
  if (t.shape() != want)
    throw Error(ErrorCode::kShapeMismatch,
                std::string(what) + " is " + grad::shape_str(t.shape()) + ", expected " + grad::shape_str(want));
}

Vector3 key_point(std::size_t x, std::size_t y, double z, const CameraIntrinsics& k) {
  return {z * (static_cast<double>(x) - k.cx) / k.fx, z * (static_cast<double>(y) - k.cy) / k.fy, z};
}

}  // namespace

std::vector<std::size_t> PoseGraph::others() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < poses.size(); ++i)
    if (i != key) out.push_back(i);
  return out;
}

// ---------------------------------------------------------------------------

PosePrior parse_pose_prior(const nlohmann::json& j) {
  PosePrior prior;
  if (j.is_null()) return prior;
  if (!j.is_object() || !j.contains("type") || !j["type"].is_string())
    throw Error(ErrorCode::kConfigError, "pose prior must be an object with a string \"type\"");
  const std::string type = j["type"].get<std::string>();
  if (type == "identity") return prior;
  if (type != "constant_velocity") throw Error(ErrorCode::kConfigError, "unknown pose prior type '" + type + "'");
  const auto it = j.find("velocity");
  if (it == j.end() || !it->is_array() || it->size() != 3)
    throw Error(ErrorCode::kConfigError, "constant_velocity prior needs \"velocity\": [x, y, z]");
  for (std::size_t a = 0; a < 3; ++a) {
    if (!(*it)[a].is_number()) throw Error(ErrorCode::kConfigError, "velocity components must be numbers");
    prior.velocity[static_cast<Eigen::Index>(a)] = (*it)[a].get<double>();
  }
  return prior;
}

nlohmann::json to_json(const PosePrior& prior) {
  if (prior.velocity.isZero(0.0)) return {{"type", "identity"}};
  return {{"type", "constant_velocity"}, {"velocity", {prior.velocity.x(), prior.velocity.y(), prior.velocity.z()}}};
}

PoseGraph initialize_poses(std::size_t frames, std::size_t key, const PosePrior& prior) {
  if (key >= frames) throw Error(ErrorCode::kShapeMismatch, "key index outside the window");
  PoseGraph g;
  g.key = key;
  for (std::size_t t = 0; t < frames; ++t) {
    const double steps = static_cast<double>(t) - static_cast<double>(key);
    g.poses.emplace_back(geometry::Matrix3::Identity(), prior.velocity * steps);
  }
  return g;
}

std::string trajectory_row(std::size_t frame, const Se3Pose& pose) {
  const auto q = pose.quaternion();
  const auto& t = pose.translation();
  std::ostringstream os;
  os << std::setprecision(17) << frame << ',' << t.x() << ',' << t.y() << ',' << t.z() << ',' << q.w() << ','
     << q.x() << ',' << q.y() << ',' << q.z();
  return os.str();
}

void write_trajectory(const std::filesystem::path& path, const std::vector<Se3Pose>& poses, std::size_t first_frame) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  out << "frame,tx,ty,tz,qw,qx,qy,qz\n";
  for (std::size_t i = 0; i < poses.size(); ++i) out << trajectory_row(first_frame + i, poses[i]) << '\n';
  if (!out) throw Error(ErrorCode::kIoError, "write failed: " + path.string());
}

std::vector<Se3Pose> read_trajectory(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("frame,tx,ty,tz,qw,qx,qy,qz", 0) != 0)
    throw Error(ErrorCode::kIoError, path.string() + ": missing trajectory header");
  std::vector<Se3Pose> poses;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    std::vector<double> v;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        v.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw Error(ErrorCode::kIoError, path.string() + ": bad number '" + cell + "'");
      }
    }
    if (v.size() != 8) throw Error(ErrorCode::kIoError, path.string() + ": expected 8 columns");
    Eigen::Quaterniond q(v[4], v[5], v[6], v[7]);
    if (!(q.norm() > 0.0)) throw Error(ErrorCode::kIoError, path.string() + ": zero quaternion");
    poses.push_back(Se3Pose::from_quaternion(q.normalized(), {v[1], v[2], v[3]}));
  }
  return poses;
}

// ---------------------------------------------------------------------------

Tensor reprojected_coordinates(const Se3Pose& key_to_frame, const Tensor& depth, const CameraIntrinsics& k,
                               std::vector<double>* valid) {
  check_depth(depth, k);
  const std::size_t h = k.height, w = k.width, n = h * w;
  auto z = depth.values();
  std::vector<double> coords(2 * n);
  if (valid) valid->assign(n, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = y * w + x;
      bool ok = z[i] > 0.0;
      geometry::Reprojection r;
      if (ok) {
        r = geometry::reproject(key_to_frame, {static_cast<double>(x), static_cast<double>(y)}, z[i], k);
        ok = r.valid;
      }
      coords[i] = ok ? r.pixel.x() : kOffGrid;
      coords[n + i] = ok ? r.pixel.y() : kOffGrid;
      if (valid) (*valid)[i] = ok ? 1.0 : 0.0;
    }
  }
  return Tensor::from({2, h, w}, std::move(coords));
}

Tensor warp_features(const Tensor& features, const PoseGraph& graph, const Tensor& depth, const CameraIntrinsics& k) {
  if (features.rank() != 4 || features.dim(0) != graph.size())
    throw Error(ErrorCode::kShapeMismatch, "features " + grad::shape_str(features.shape()) + " vs " +
                                               std::to_string(graph.size()) + " poses");
  const std::size_t L = features.dim(1), h = features.dim(2), w = features.dim(3);
  const Se3Pose key_inv = graph.poses[graph.key].inverse();
  std::vector<Tensor> parts;
  for (std::size_t i : graph.others()) {
    const Tensor fi = grad::reshape(grad::slice(features, 0, i, i + 1), {L, h, w});
    const Tensor c = reprojected_coordinates(graph.poses[i] * key_inv, depth, k);
    parts.push_back(grad::reshape(grad::bilinear_sample(fi, c), {1, L, h, w}));
  }
  return grad::concat(parts, 0);
}

// ---------------------------------------------------------------------------

MotionNet::MotionNet(const MotionNetConfig& config, std::uint64_t seed) : config_(config) {
  std::mt19937_64 rng(seed);
  const std::size_t L = config.feature_channels, hid = config.hidden, in = 2 * L + 1;
  depthnet::add_encoder_params(params_, "menc.", 3, config.encoder_channels, L, rng);
  params_.add_he("flow.w0", {hid, in, 3, 3}, in * 9, rng);
  params_.add("flow.b0", {hid});
  params_.add_he("flow.w1", {hid, hid, 3, 3}, hid * 9, rng);
  params_.add("flow.b1", {hid});
  // Small output layer: the first iterations start close to R = 0, W = 0.5.
  params_.add_he("flow.w2", {3, hid, 3, 3}, hid * 9, rng, 0.1);
  params_.add("flow.b2", {3});
}

Tensor MotionNet::encode(const Tensor& images) const { return depthnet::encode_features(params_, "menc.", images); }

FlowConfidence MotionNet::predict(const Tensor& key_features, const Tensor& warped, const Tensor& depth) const {
  if (key_features.rank() != 3 || warped.rank() != 4 || warped.dim(1) != key_features.dim(0) ||
      warped.dim(2) != key_features.dim(1) || warped.dim(3) != key_features.dim(2))
    throw Error(ErrorCode::kShapeMismatch, "key features " + grad::shape_str(key_features.shape()) +
                                               " vs warped " + grad::shape_str(warped.shape()));
  const std::size_t P = warped.dim(0), L = warped.dim(1), h = warped.dim(2), w = warped.dim(3);
  if (depth.shape() != Shape{h, w})
    throw Error(ErrorCode::kShapeMismatch, "depth " + grad::shape_str(depth.shape()) + " vs features");

  std::vector<double> inv(h * w);
  auto z = depth.values();
  for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = z[i] > 0.0 ? 1.0 / z[i] : 0.0;
  const Tensor inv_depth = grad::expand(Tensor::from({1, 1, h, w}, std::move(inv)), {P, 1, h, w});
  const Tensor key = grad::expand(grad::reshape(key_features, {1, L, h, w}), {P, L, h, w});

  Tensor x = grad::concat({key, warped, inv_depth}, 1);
  x = grad::relu(grad::conv2d(x, params_.get("flow.w0"), params_.get("flow.b0"), 1, 1));
  x = grad::relu(grad::conv2d(x, params_.get("flow.w1"), params_.get("flow.b1"), 1, 1));
  x = grad::conv2d(x, params_.get("flow.w2"), params_.get("flow.b2"), 1, 1);
  return {grad::slice(x, 1, 0, 2), grad::sigmoid(grad::slice(x, 1, 2, 3))};
}

// ---------------------------------------------------------------------------

Jacobian26 reprojection_jacobian(const Vector3& p, const CameraIntrinsics& k) {
  Eigen::Matrix<double, 3, 6> dp;
  dp.leftCols<3>().setIdentity();
  dp.rightCols<3>() = -geometry::skew(p);
  return geometry::projection_jacobian(p, k) * dp;
}

double gn_objective(const PoseGraph& graph, const std::vector<Vector6>& xi, const Tensor& depth, const Tensor& flow,
                    const Tensor& confidence, const CameraIntrinsics& k) {
  const auto others = graph.others();
  check_depth(depth, k);
  check_pair_field(flow, others.size(), 2, k, "flow");
  check_pair_field(confidence, others.size(), 1, k, "confidence");
  const std::size_t h = k.height, w = k.width, n = h * w;
  const Se3Pose key_inv = graph.poses[graph.key].inverse();
  auto z = depth.values();
  auto r = flow.values();
  auto c = confidence.values();
  double total = 0.0;
  for (std::size_t p = 0; p < others.size(); ++p) {
    const Se3Pose rel = graph.poses[others[p]] * key_inv;
    const Se3Pose moved = geometry::se3_exp(xi[p]) * rel;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t i = y * w + x;
        if (!(z[i] > 0.0)) continue;
        const Vector2 px(static_cast<double>(x), static_cast<double>(y));
        const auto base = geometry::reproject(rel, px, z[i], k);
        if (!base.valid) continue;
        const Vector3 q = moved * key_point(x, y, z[i], k);
        if (q.z() <= geometry::kDepthEpsilon) continue;
        const Vector2 target = base.pixel + Vector2(r[2 * p * n + i], r[(2 * p + 1) * n + i]);
        const Vector2 now(k.fx * q.x() / q.z() + k.cx, k.fy * q.y() / q.z() + k.cy);
        total += c[p * n + i] * (now - target).squaredNorm();
      }
    }
  }
  return total;
}

Tensor gn_solve(const PoseGraph& graph, const Tensor& depth, const Tensor& flow, const Tensor& confidence,
                const CameraIntrinsics& k, const GaussNewtonOptions& options) {
  const auto others = graph.others();
  const std::size_t P = others.size();
  if (P == 0) throw Error(ErrorCode::kNeedMultipleViews, "pose update needs at least 2 frames");
  check_depth(depth, k);
  check_pair_field(flow, P, 2, k, "flow");
  check_pair_field(confidence, P, 1, k, "confidence");
  const std::size_t h = k.height, w = k.width, n = h * w;
  const Se3Pose key_inv = graph.poses[graph.key].inverse();
  auto z = depth.values();
  auto r = flow.values();
  auto c = confidence.values();

  // Per (pair, pixel) Jacobians at xi = 0; invalid pixels keep a zero row.
  auto jac = std::make_shared<std::vector<Jacobian26>>(P * n, Jacobian26::Zero());
  auto valid = std::make_shared<std::vector<char>>(P * n, 0);
  auto solvers = std::make_shared<std::vector<Eigen::LDLT<geometry::Matrix6>>>(P);
  auto xi = std::make_shared<std::vector<Vector6>>(P, Vector6::Zero());

  // The key -> i edges only couple frame i with the fixed keyframe, so the
  // joint 6(F-1) system is block diagonal.
  for (std::size_t p = 0; p < P; ++p) {
    const Se3Pose rel = graph.poses[others[p]] * key_inv;
    geometry::Matrix6 H = geometry::Matrix6::Zero();
    Vector6 b = Vector6::Zero();
    std::size_t constrained = 0;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t i = y * w + x;
        if (!(z[i] > 0.0)) continue;
        const auto rp = geometry::reproject(rel, {static_cast<double>(x), static_cast<double>(y)}, z[i], k);
        if (!rp.valid) continue;
        const std::size_t e = p * n + i;
        (*valid)[e] = 1;
        const Jacobian26 J = reprojection_jacobian(rp.point, k);
        (*jac)[e] = J;
        const double wk = c[e];
        if (wk > options.confidence_threshold) ++constrained;
        const Vector2 R(r[2 * p * n + i], r[(2 * p + 1) * n + i]);
        H.noalias() += wk * J.transpose() * J;
        b.noalias() += wk * J.transpose() * R;
      }
    }
    if (constrained < options.min_pixels)
      throw Error(ErrorCode::kDegenerateGeometry, "frame " + std::to_string(others[p]) + " has " +
                                                      std::to_string(constrained) + " constrained pixels");
    H.diagonal().array() += options.damping;
    auto& ldlt = (*solvers)[p];
    ldlt.compute(H);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || ldlt.vectorD().minCoeff() <= 0.0)
      throw Error(ErrorCode::kDegenerateGeometry, "normal matrix of frame " + std::to_string(others[p]) +
                                                      " is not positive definite");
    (*xi)[p] = ldlt.solve(b);
    if (!(*xi)[p].allFinite())
      throw Error(ErrorCode::kDegenerateGeometry, "non-finite update for frame " + std::to_string(others[p]));
  }

  std::vector<double> out(P * 6);
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t a = 0; a < 6; ++a) out[p * 6 + a] = (*xi)[p][static_cast<Eigen::Index>(a)];

  const std::vector<double> rv(r.begin(), r.end()), cv(c.begin(), c.end());
  auto backward = [jac, valid, solvers, xi, rv, cv, P, n](std::span<const double> g, std::span<double* const> in) {
    double* gr = in[0];
    double* gc = in[1];
    for (std::size_t p = 0; p < P; ++p) {
      Vector6 gx;
      for (std::size_t a = 0; a < 6; ++a) gx[static_cast<Eigen::Index>(a)] = g[p * 6 + a];
      const Vector6 lambda = (*solvers)[p].solve(gx);
      const Vector6& x = (*xi)[p];
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t e = p * n + i;
        if (!(*valid)[e]) continue;
        const Jacobian26& J = (*jac)[e];
        const Vector2 jl = J * lambda;
        if (gr) {
          gr[2 * p * n + i] += cv[e] * jl.x();
          gr[(2 * p + 1) * n + i] += cv[e] * jl.y();
        }
        if (gc) {
          const Vector2 R(rv[2 * p * n + i], rv[(2 * p + 1) * n + i]);
          gc[e] += jl.dot(R - J * x);
        }
      }
    }
  };
  return grad::make_result("gn_solve", {P, 6}, std::move(out), {flow, confidence}, std::move(backward));
}

PoseGraph retract(const PoseGraph& graph, const Tensor& xi) {
  const auto others = graph.others();
  if (xi.shape() != Shape{others.size(), 6})
    throw Error(ErrorCode::kShapeMismatch, "update " + grad::shape_str(xi.shape()) + " vs " +
                                               std::to_string(others.size()) + " frames");
  PoseGraph out = graph;
  auto v = xi.values();
  for (std::size_t p = 0; p < others.size(); ++p) {
    Vector6 t;
    for (std::size_t a = 0; a < 6; ++a) t[static_cast<Eigen::Index>(a)] = v[p * 6 + a];
    out.poses[others[p]] = geometry::se3_exp(t) * graph.poses[others[p]];
  }
  return out;
}

GaussNewtonResult gauss_newton_update(const PoseGraph& graph, const Tensor& depth, const Tensor& flow,
                                      const Tensor& confidence, const CameraIntrinsics& k,
                                      const GaussNewtonOptions& options) {
  grad::NoGradGuard guard;
  try {
    return {retract(graph, gn_solve(graph, depth, flow, confidence, k, options)), false};
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kDegenerateGeometry) throw;
    return {graph, true};
  }
}

Tensor induced_residual_flow(const PoseGraph& current, const PoseGraph& target, const Tensor& depth,
                             const CameraIntrinsics& k) {
  const auto others = current.others();
  if (target.size() != current.size() || target.key != current.key)
    throw Error(ErrorCode::kShapeMismatch, "pose graphs differ in size or keyframe");
  const std::size_t n = k.height * k.width;
  const Se3Pose ci = current.poses[current.key].inverse(), ti = target.poses[target.key].inverse();
  std::vector<double> out(others.size() * 2 * n, 0.0);
  for (std::size_t p = 0; p < others.size(); ++p) {
    std::vector<double> va, vb;
    const Tensor a = reprojected_coordinates(current.poses[others[p]] * ci, depth, k, &va);
    const Tensor b = reprojected_coordinates(target.poses[others[p]] * ti, depth, k, &vb);
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < n; ++i) {
      if (va[i] == 0.0) continue;
      // The target may fall outside the view; its coordinate is still defined.
      const double z = depth.values()[i];
      const Vector3 q = target.poses[others[p]] * ti * key_point(i % k.width, i / k.width, z, k);
      if (q.z() <= geometry::kDepthEpsilon) continue;
      const double u = vb[i] != 0.0 ? bv[i] : k.fx * q.x() / q.z() + k.cx;
      const double v = vb[i] != 0.0 ? bv[n + i] : k.fy * q.y() / q.z() + k.cy;
      out[2 * p * n + i] = u - av[i];
      out[(2 * p + 1) * n + i] = v - av[n + i];
    }
  }
  return Tensor::from({others.size(), 2, k.height, k.width}, std::move(out));
}

Tensor induced_coordinates(const PoseGraph& base, const Tensor& xi, const Tensor& depth, const CameraIntrinsics& k,
                           std::vector<double>* valid) {
  const auto others = base.others();
  const std::size_t P = others.size();
  if (xi.shape() != Shape{P, 6})
    throw Error(ErrorCode::kShapeMismatch, "update " + grad::shape_str(xi.shape()) + " vs " + std::to_string(P) +
                                               " frames");
  check_depth(depth, k);
  const std::size_t h = k.height, w = k.width, n = h * w;
  const Se3Pose key_inv = base.poses[base.key].inverse();
  auto z = depth.values();
  auto xv = xi.values();

  // d coords / d xi per (pair, pixel): J_pi(Y) [I | -[Y]x] J_l(xi).
  auto jac = std::make_shared<std::vector<Jacobian26>>(P * n, Jacobian26::Zero());
  std::vector<double> out(P * 2 * n, 0.0);
  if (valid) valid->assign(P * n, 0.0);
  for (std::size_t p = 0; p < P; ++p) {
    Vector6 t;
    for (std::size_t a = 0; a < 6; ++a) t[static_cast<Eigen::Index>(a)] = xv[p * 6 + a];
    const Se3Pose moved = geometry::se3_exp(t) * (base.poses[others[p]] * key_inv);
    const geometry::Matrix6 jl = geometry::se3_left_jacobian(t);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t i = y * w + x;
        if (!(z[i] > 0.0)) continue;
        const Vector3 q = moved * key_point(x, y, z[i], k);
        if (q.z() <= geometry::kDepthEpsilon) continue;
        out[2 * p * n + i] = k.fx * q.x() / q.z() + k.cx;
        out[(2 * p + 1) * n + i] = k.fy * q.y() / q.z() + k.cy;
        (*jac)[p * n + i] = reprojection_jacobian(q, k) * jl;
        if (valid) (*valid)[p * n + i] = 1.0;
      }
    }
  }
  auto backward = [jac, P, n](std::span<const double> g, std::span<double* const> in) {
    double* gx = in[0];
    if (!gx) return;
    for (std::size_t p = 0; p < P; ++p) {
      Vector6 acc = Vector6::Zero();
      for (std::size_t i = 0; i < n; ++i) {
        const Vector2 gi(g[2 * p * n + i], g[(2 * p + 1) * n + i]);
        acc.noalias() += (*jac)[p * n + i].transpose() * gi;
      }
      for (std::size_t a = 0; a < 6; ++a) gx[p * 6 + a] += acc[static_cast<Eigen::Index>(a)];
    }
  };
  return grad::make_result("induced_coordinates", {P, 2, h, w}, std::move(out), {xi}, std::move(backward));
}

}  // namespace sfmc::motion
