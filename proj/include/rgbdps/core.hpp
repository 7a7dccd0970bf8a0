#pragma once

// Geometry and image primitives shared by every stage.
//
// Conventions (fixed for the whole library):
//   * pixel (u, v) = (column, row), origin at the top-left pixel center;
//   * camera frame: +x right, +y down, +z into the scene;
//   * depth is z-depth, not ray length;
//   * normals point toward the camera that observes them, so a visible
//     surface has n_z < 0 in that camera's frame.

#include <optional>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "rgbdps/image.hpp"

namespace rgbdps {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct CameraIntrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;

  void validate() const;

  // Point in camera coordinates at z-depth `depth` seen through pixel `p`.
  Vec3 backproject(const Vec2& p, double depth) const {
    return {(p.x() - cx) / fx * depth, (p.y() - cy) / fy * depth, depth};
  }
  // Viewing ray through `p`, scaled so that its z component is 1.
  Vec3 ray(const Vec2& p) const {
    return {(p.x() - cx) / fx, (p.y() - cy) / fy, 1.0};
  }
  Vec2 project(const Vec3& x) const {
    return {fx * x.x() / x.z() + cx, fy * x.y() / x.z() + cy};
  }
  bool in_bounds(const Vec2& q) const {
    return q.x() >= 0.0 && q.y() >= 0.0 && q.x() <= width - 1 &&
           q.y() <= height - 1;
  }
};

// Maps reference-camera coordinates to frame coordinates: x_k = R x_ref + T.
struct RigidPose {
  Mat3 R = Mat3::Identity();
  Vec3 T = Vec3::Zero();

  static RigidPose identity() { return {}; }

  Vec3 apply(const Vec3& x) const { return R * x + T; }
  RigidPose inverse() const { return {R.transpose(), -(R.transpose() * T)}; }
  // (a * b).apply(x) == a.apply(b.apply(x))
  RigidPose operator*(const RigidPose& other) const {
    return {R * other.R, R * other.T + T};
  }

  bool is_identity(double tol = 0.0) const {
    return (R - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
           T.cwiseAbs().maxCoeff() <= tol;
  }
  void validate(double tol = 1e-9) const;
};

// Geodesic angle of a rotation matrix, radians.
double rotation_angle(const Mat3& R);

struct RadianceImage {
  Image<Vec3> pixels;
  Mask mask;

  int width() const { return pixels.width(); }
  int height() const { return pixels.height(); }
  void validate() const;
};

struct DepthMap {
  Image<double> depth;
  Mask mask;

  int width() const { return depth.width(); }
  int height() const { return depth.height(); }
  void validate() const;
};

struct NormalMap {
  Image<Vec3> normals;
  Mask mask;

  int width() const { return normals.width(); }
  int height() const { return normals.height(); }
  void validate(double tol = 1e-6) const;
};

struct AlbedoMap {
  Image<Vec3> albedo;
  Mask mask;

  int width() const { return albedo.width(); }
  int height() const { return albedo.height(); }
  void validate() const;
};

enum class ProjectionStatus { Ok, OutOfFrame, NonPositiveDepth };

struct Projection {
  Vec2 q = Vec2::Zero();
  double depth = 0.0;  // z of the transformed point (lambda)
  ProjectionStatus status = ProjectionStatus::Ok;

  bool usable() const { return status == ProjectionStatus::Ok; }
};

// Backprojects `p` at `depth` through K, moves it by `pose`, reprojects.
Projection project_pixel(const Vec2& p, double depth, const CameraIntrinsics& K,
                         const RigidPose& pose);

// Mask-weighted bilinear lookup; unmasked neighbours get zero weight and the
// remaining weights are renormalised. nullopt when no neighbour is usable.
std::optional<Vec3> sample_bilinear(const Image<Vec3>& img, const Mask& mask,
                                    const Vec2& q);
std::optional<double> sample_bilinear(const Image<double>& img,
                                      const Mask& mask, const Vec2& q);
inline std::optional<Vec3> sample_bilinear(const RadianceImage& img,
                                           const Vec2& q) {
  return sample_bilinear(img.pixels, img.mask, q);
}

// Catmull-Rom bicubic lookup over the 4 x 4 neighbourhood. When any of those
// pixels is outside the mask or image it falls back to sample_bilinear, or
// gives nothing if `strict`.
std::optional<Vec3> sample_bicubic(const Image<Vec3>& img, const Mask& mask, const Vec2& q,
                                   bool strict = false);
inline std::optional<Vec3> sample_bicubic(const RadianceImage& img, const Vec2& q,
                                          bool strict = false) {
  return sample_bicubic(img.pixels, img.mask, q, strict);
}

// Per-pixel normals of the backprojected depth surface. Central differences
// where both neighbours are inside the mask, one-sided differences otherwise;
// pixels lacking a neighbour along either axis are dropped from the mask.
NormalMap normals_from_depth(const DepthMap& depth, const CameraIntrinsics& K);

// Angle between two directions in degrees (inputs need not be unit length).
double angle_deg(const Vec3& a, const Vec3& b);

}  // namespace rgbdps
