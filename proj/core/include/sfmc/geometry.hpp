// SPDX-License-Identifier: Apache-2.0
//
// Pinhole camera, SE(3) with exp/log maps, and the view-to-view reprojection
// used by warps and pose optimization.
//
// Conventions:
//   - Pixel (0,0) is the center of the top-left pixel.
//   - A pose g maps points from a reference frame into the camera frame:
//     X_cam = R * X + t. Relative motion i -> j is g_j * g_i^-1.
//   - Twists are ordered (v, w): translation part first, rotation second.
//   - Perturbations act on the left: g <- exp(xi) * g.
#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <span>
#include <vector>

namespace sfmc::geometry {

using Vector2 = Eigen::Vector2d;
using Vector3 = Eigen::Vector3d;
using Vector4 = Eigen::Vector4d;
using Vector6 = Eigen::Matrix<double, 6, 1>;
using Matrix3 = Eigen::Matrix3d;
using Matrix6 = Eigen::Matrix<double, 6, 6>;

inline constexpr double kDepthEpsilon = 1e-6;

struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  std::size_t width = 4;
  std::size_t height = 4;

  /// Throws InvalidConfig unless fx, fy > 0 and width, height >= 4.
  void validate() const;
  /// All six fields divided by k.
  [[nodiscard]] CameraIntrinsics downscaled(std::size_t k) const;
};

class Se3Pose {
 public:
  Se3Pose() : rotation_(Matrix3::Identity()), translation_(Vector3::Zero()) {}
  Se3Pose(const Matrix3& rotation, const Vector3& translation)
      : rotation_(rotation), translation_(translation) {}

  static Se3Pose identity() { return {}; }
  /// From unit quaternion (w, x, y, z) and translation.
  static Se3Pose from_quaternion(const Eigen::Quaterniond& q, const Vector3& translation);

  [[nodiscard]] const Matrix3& rotation() const { return rotation_; }
  [[nodiscard]] const Vector3& translation() const { return translation_; }
  [[nodiscard]] Eigen::Quaterniond quaternion() const;

  [[nodiscard]] Se3Pose inverse() const;
  [[nodiscard]] Se3Pose operator*(const Se3Pose& other) const;
  [[nodiscard]] Vector3 operator*(const Vector3& point) const {
    return rotation_ * point + translation_;
  }
  [[nodiscard]] Eigen::Matrix4d matrix() const;

  /// Max deviation of R^T R from I and of det(R) from 1.
  [[nodiscard]] double orthonormality_error() const;

 private:
  Matrix3 rotation_;
  Vector3 translation_;
};

Matrix3 skew(const Vector3& v);

Matrix3 so3_exp(const Vector3& omega);
/// Rotation vector of R; throws NearSingularRotation when within 1e-6 of pi.
Vector3 so3_log(const Matrix3& rotation);
/// Rotation angle in [0, pi], well conditioned near 0.
double rotation_angle(const Matrix3& rotation);
/// Left Jacobian of SO(3): exp(w + d) ~ exp(J_l(w) d) exp(w).
Matrix3 so3_left_jacobian(const Vector3& omega);

Se3Pose se3_exp(const Vector6& xi);
Vector6 se3_log(const Se3Pose& pose);
/// Left Jacobian of SE(3) for (v, w) ordering: exp(xi + d) ~ exp(J d) exp(xi).
Matrix6 se3_left_jacobian(const Vector6& xi);

/// pi(X) for homogeneous X; throws NonPositiveDepth when Z <= 1e-6.
Vector2 project(const Vector4& point, const CameraIntrinsics& k);
/// pi^-1(x, Z); throws NonPositiveDepth when Z <= 0.
Vector4 backproject(const Vector2& pixel, double depth, const CameraIntrinsics& k);

struct Reprojection {
  Vector2 pixel = Vector2::Zero();
  double depth = 0.0;   // depth of the transformed point in the target camera
  bool valid = false;   // positive depth and inside [0,W) x [0,H)
  Vector3 point = Vector3::Zero();  // transformed point (target camera frame)
};

/// Psi(g_ij, x, Z): pixel x with depth Z in camera i, seen from camera j.
/// Never throws for behind-camera points; those come back invalid.
Reprojection reproject(const Se3Pose& relative, const Vector2& pixel, double depth,
                       const CameraIntrinsics& k);

/// d pi(Y) / d Y at a camera-frame point Y (2x3).
Eigen::Matrix<double, 2, 3> projection_jacobian(const Vector3& point, const CameraIntrinsics& k);

/// Field view over a planar [C,H,W] array.
struct FieldView {
  std::span<const double> data;
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
};

/// Bilinear sampling with zero padding.
std::vector<double> bilinear_sample(const FieldView& field, const Vector2& x);
/// Per-channel derivative of the sampled value w.r.t. (u, v); [C][2].
std::vector<Vector2> bilinear_sample_gradient(const FieldView& field, const Vector2& x);

}  // namespace sfmc::geometry
