// SPDX-License-Identifier: Apache-2.0
#include "sfmc/geometry.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "sfmc/error.hpp"

namespace sfmc::geometry {

void CameraIntrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0))
    throw Error(ErrorCode::kInvalidConfig, "focal lengths must be positive");
  if (width < 4 || height < 4)
    throw Error(ErrorCode::kInvalidConfig, "image must be at least 4x4, got " +
                                               std::to_string(width) + "x" + std::to_string(height));
}

CameraIntrinsics CameraIntrinsics::downscaled(std::size_t k) const {
  const double s = 1.0 / static_cast<double>(k);
  return {fx * s, fy * s, cx * s, cy * s, width / k, height / k};
}

Se3Pose Se3Pose::from_quaternion(const Eigen::Quaterniond& q, const Vector3& translation) {
  return {q.normalized().toRotationMatrix(), translation};
}

Eigen::Quaterniond Se3Pose::quaternion() const {
  Eigen::Quaterniond q(rotation_);
  q.normalize();
  if (q.w() < 0) q.coeffs() *= -1.0;
  return q;
}

Se3Pose Se3Pose::inverse() const {
  Matrix3 rt = rotation_.transpose();
  return {rt, -(rt * translation_)};
}

Se3Pose Se3Pose::operator*(const Se3Pose& other) const {
  return {rotation_ * other.rotation_, rotation_ * other.translation_ + translation_};
}

Eigen::Matrix4d Se3Pose::matrix() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = rotation_;
  m.topRightCorner<3, 1>() = translation_;
  return m;
}

double Se3Pose::orthonormality_error() const {
  double e = (rotation_.transpose() * rotation_ - Matrix3::Identity()).cwiseAbs().maxCoeff();
  return std::max(e, std::fabs(rotation_.determinant() - 1.0));
}

Matrix3 skew(const Vector3& v) {
  Matrix3 s;
  // clang-format off
  s <<     0, -v.z(),  v.y(),
       v.z(),      0, -v.x(),
      -v.y(),  v.x(),      0;
  // clang-format on
  return s;
}

namespace {

// sin(t)/t, (1-cos t)/t^2, (t - sin t)/t^3 with series near zero.
struct RodriguesCoeffs {
  double a, b, c;
};

RodriguesCoeffs rodrigues(double theta) {
  const double t2 = theta * theta;
  if (theta < 1e-4) {
    return {1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0};
  }
  return {std::sin(theta) / theta, (1.0 - std::cos(theta)) / t2,
          (theta - std::sin(theta)) / (t2 * theta)};
}

Vector3 vee(const Matrix3& m) { return {m(2, 1), m(0, 2), m(1, 0)}; }

}  // namespace

Matrix3 so3_exp(const Vector3& omega) {
  const double theta = omega.norm();
  const auto [a, b, c] = rodrigues(theta);
  (void)c;
  const Matrix3 w = skew(omega);
  return Matrix3::Identity() + a * w + b * w * w;
}

double rotation_angle(const Matrix3& rotation) {
  const double s = 0.5 * vee(rotation - rotation.transpose()).norm();
  const double c = 0.5 * (rotation.trace() - 1.0);
  return std::atan2(s, c);
}

Vector3 so3_log(const Matrix3& rotation) {
  const double theta = rotation_angle(rotation);
  if (std::numbers::pi - theta < 1e-6)
    throw Error(ErrorCode::kNearSingularRotation,
                "rotation angle " + std::to_string(theta) + " too close to pi");
  const Vector3 w = vee(rotation - rotation.transpose());
  if (theta < 1e-4) return 0.5 * (1.0 + theta * theta / 6.0) * w;
  return theta / (2.0 * std::sin(theta)) * w;
}

Matrix3 so3_left_jacobian(const Vector3& omega) {
  const double theta = omega.norm();
  const auto [a, b, c] = rodrigues(theta);
  (void)a;
  const Matrix3 w = skew(omega);
  return Matrix3::Identity() + b * w + c * w * w;
}

Se3Pose se3_exp(const Vector6& xi) {
  const Vector3 v = xi.head<3>();
  const Vector3 omega = xi.tail<3>();
  return {so3_exp(omega), so3_left_jacobian(omega) * v};
}

Vector6 se3_log(const Se3Pose& pose) {
  const Vector3 omega = so3_log(pose.rotation());
  const double theta = omega.norm();
  const Matrix3 w = skew(omega);
  double coeff;
  if (theta < 1e-4) {
    coeff = 1.0 / 12.0 + theta * theta / 720.0;
  } else {
    coeff = 1.0 / (theta * theta) - 1.0 / (2.0 * theta * std::tan(0.5 * theta));
  }
  const Matrix3 jinv = Matrix3::Identity() - 0.5 * w + coeff * w * w;
  Vector6 xi;
  xi.head<3>() = jinv * pose.translation();
  xi.tail<3>() = omega;
  return xi;
}

Matrix6 se3_left_jacobian(const Vector6& xi) {
  const Vector3 rho = xi.head<3>();
  const Vector3 phi = xi.tail<3>();
  const double theta = phi.norm();
  const double t2 = theta * theta;
  double c1, c2, c3;
  if (theta < 1e-2) {
    c1 = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0;
    c2 = 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0;
    c3 = 1.0 / 120.0 - t2 / 2520.0;
  } else {
    const double s = std::sin(theta), c = std::cos(theta);
    c1 = (theta - s) / (t2 * theta);
    c2 = (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2);
    c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta);
  }
  const Matrix3 P = skew(phi);
  const Matrix3 R = skew(rho);
  const Matrix3 q = 0.5 * R + c1 * (P * R + R * P + P * R * P) +
                    c2 * (P * P * R + R * P * P - 3.0 * P * R * P) +
                    c3 * (P * R * P * P + P * P * R * P);
  const Matrix3 j = so3_left_jacobian(phi);
  Matrix6 out = Matrix6::Zero();
  out.topLeftCorner<3, 3>() = j;
  out.topRightCorner<3, 3>() = q;
  out.bottomRightCorner<3, 3>() = j;
  return out;
}

Vector2 project(const Vector4& point, const CameraIntrinsics& k) {
  const double z = point.z() / point.w();
  if (!(z > kDepthEpsilon))
    throw Error(ErrorCode::kNonPositiveDepth, "cannot project point with Z=" + std::to_string(z));
  const double x = point.x() / point.w();
  const double y = point.y() / point.w();
  return {k.fx * x / z + k.cx, k.fy * y / z + k.cy};
}

Vector4 backproject(const Vector2& pixel, double depth, const CameraIntrinsics& k) {
  if (!(depth > 0.0))
    throw Error(ErrorCode::kNonPositiveDepth, "cannot backproject with Z=" + std::to_string(depth));
  return {depth * (pixel.x() - k.cx) / k.fx, depth * (pixel.y() - k.cy) / k.fy, depth, 1.0};
}

Reprojection reproject(const Se3Pose& relative, const Vector2& pixel, double depth,
                       const CameraIntrinsics& k) {
  Reprojection r;
  if (!(depth > 0.0)) return r;
  const Vector3 source{depth * (pixel.x() - k.cx) / k.fx, depth * (pixel.y() - k.cy) / k.fy, depth};
  r.point = relative * source;
  r.depth = r.point.z();
  if (!(r.depth > kDepthEpsilon)) return r;
  if (relative.rotation() == Matrix3::Identity() && relative.translation() == Vector3::Zero()) {
    r.pixel = pixel;  // exact, no round trip through 3D
  } else {
    r.pixel = {k.fx * r.point.x() / r.depth + k.cx, k.fy * r.point.y() / r.depth + k.cy};
  }
  r.valid = r.pixel.x() >= 0.0 && r.pixel.y() >= 0.0 &&
            r.pixel.x() < static_cast<double>(k.width) && r.pixel.y() < static_cast<double>(k.height);
  return r;
}

Eigen::Matrix<double, 2, 3> projection_jacobian(const Vector3& point, const CameraIntrinsics& k) {
  const double iz = 1.0 / point.z();
  Eigen::Matrix<double, 2, 3> j;
  j << k.fx * iz, 0.0, -k.fx * point.x() * iz * iz, 0.0, k.fy * iz, -k.fy * point.y() * iz * iz;
  return j;
}

std::vector<double> bilinear_sample(const FieldView& field, const Vector2& x) {
  // Same tap layout as grad::kernels::bilinear_tap, restated here so geometry
  // stays independent of the tensor engine.
  std::vector<double> out(field.channels, 0.0);
  if (!std::isfinite(x.x()) || !std::isfinite(x.y())) return out;
  const double fu = std::floor(x.x()), fv = std::floor(x.y());
  const double au = x.x() - fu, av = x.y() - fv;
  const long x0 = static_cast<long>(fu), y0 = static_cast<long>(fv);
  const long xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const long ys[4] = {y0, y0, y0 + 1, y0 + 1};
  const double w[4] = {(1 - au) * (1 - av), au * (1 - av), (1 - au) * av, au * av};
  const long W = static_cast<long>(field.width), H = static_cast<long>(field.height);
  for (int j = 0; j < 4; ++j) {
    if (xs[j] < 0 || ys[j] < 0 || xs[j] >= W || ys[j] >= H) continue;
    for (std::size_t c = 0; c < field.channels; ++c)
      out[c] += w[j] * field.data[(c * field.height + static_cast<std::size_t>(ys[j])) * field.width +
                                  static_cast<std::size_t>(xs[j])];
  }
  return out;
}

std::vector<Vector2> bilinear_sample_gradient(const FieldView& field, const Vector2& x) {
  std::vector<Vector2> out(field.channels, Vector2::Zero());
  if (!std::isfinite(x.x()) || !std::isfinite(x.y())) return out;
  const double fu = std::floor(x.x()), fv = std::floor(x.y());
  const double au = x.x() - fu, av = x.y() - fv;
  const long x0 = static_cast<long>(fu), y0 = static_cast<long>(fv);
  const long xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const long ys[4] = {y0, y0, y0 + 1, y0 + 1};
  const double du[4] = {-(1 - av), (1 - av), -av, av};
  const double dv[4] = {-(1 - au), -au, (1 - au), au};
  const long W = static_cast<long>(field.width), H = static_cast<long>(field.height);
  for (int j = 0; j < 4; ++j) {
    if (xs[j] < 0 || ys[j] < 0 || xs[j] >= W || ys[j] >= H) continue;
    for (std::size_t c = 0; c < field.channels; ++c) {
      const double f = field.data[(c * field.height + static_cast<std::size_t>(ys[j])) * field.width +
                                  static_cast<std::size_t>(xs[j])];
      out[c] += Vector2{du[j] * f, dv[j] * f};
    }
  }
  return out;
}

}  // namespace sfmc::geometry
