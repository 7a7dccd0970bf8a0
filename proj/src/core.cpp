#include "rgbdps/core.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace rgbdps {

void CameraIntrinsics::validate() const {
  RGBDPS_CHECK(width > 0 && height > 0, "intrinsics: image size must be positive");
  RGBDPS_CHECK(fx > 0.0 && fy > 0.0, "intrinsics: focal lengths must be positive");
  RGBDPS_CHECK(cx >= 0.0 && cx < width && cy >= 0.0 && cy < height,
               "intrinsics: principal point outside the image");
}

void RigidPose::validate(double tol) const {
  RGBDPS_CHECK(R.allFinite() && T.allFinite(), "pose: non-finite entries");
  const double ortho = (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff();
  RGBDPS_CHECK(ortho <= tol, "pose: R is not orthonormal");
  RGBDPS_CHECK(std::abs(R.determinant() - 1.0) <= tol,
               "pose: det(R) != 1");
}

double rotation_angle(const Mat3& R) {
  const double c = std::clamp((R.trace() - 1.0) * 0.5, -1.0, 1.0);
  return std::acos(c);
}

void RadianceImage::validate() const {
  RGBDPS_CHECK(mask.same_shape(pixels), "radiance image: mask shape mismatch");
  RGBDPS_CHECK(count_set(mask) > 0, "radiance image: empty mask");
  for (const auto& p : pixels.pixels()) {
    RGBDPS_CHECK(p.allFinite() && p.minCoeff() >= 0.0 && p.maxCoeff() <= 1.0,
                 "radiance image: values must be finite and in [0, 1]");
  }
}

void DepthMap::validate() const {
  RGBDPS_CHECK(mask.same_shape(depth), "depth map: mask shape mismatch");
  for (std::size_t i = 0; i < depth.size(); ++i) {
    if (!mask[i]) continue;
    RGBDPS_CHECK(std::isfinite(depth[i]) && depth[i] > 0.0,
                 "depth map: masked depth must be finite and positive");
  }
}

void NormalMap::validate(double tol) const {
  RGBDPS_CHECK(mask.same_shape(normals), "normal map: mask shape mismatch");
  for (std::size_t i = 0; i < normals.size(); ++i) {
    if (!mask[i]) continue;
    RGBDPS_CHECK(normals[i].allFinite() &&
                     std::abs(normals[i].norm() - 1.0) <= tol,
                 "normal map: masked normals must be unit length");
  }
}

void AlbedoMap::validate() const {
  RGBDPS_CHECK(mask.same_shape(albedo), "albedo map: mask shape mismatch");
  for (std::size_t i = 0; i < albedo.size(); ++i) {
    if (!mask[i]) continue;
    RGBDPS_CHECK(albedo[i].allFinite() && albedo[i].minCoeff() >= 0.0,
                 "albedo map: masked values must be finite and non-negative");
  }
}

Projection project_pixel(const Vec2& p, double depth, const CameraIntrinsics& K,
                         const RigidPose& pose) {
  Projection out;
  if (!(depth > 0.0)) {
    out.status = ProjectionStatus::NonPositiveDepth;
    return out;
  }
  const Vec3 x = pose.apply(K.backproject(p, depth));
  out.depth = x.z();
  if (!(x.z() > 0.0)) {
    out.status = ProjectionStatus::NonPositiveDepth;
    return out;
  }
  out.q = K.project(x);
  if (!K.in_bounds(out.q)) out.status = ProjectionStatus::OutOfFrame;
  return out;
}

namespace {

template <typename T>
std::optional<T> bilinear(const Image<T>& img, const Mask& mask, const Vec2& q,
                          const T& zero) {
  if (!(q.x() >= 0.0 && q.y() >= 0.0 && q.x() <= img.width() - 1 &&
        q.y() <= img.height() - 1)) {
    return std::nullopt;
  }
  const int u0 = std::min(static_cast<int>(q.x()), img.width() - 1);
  const int v0 = std::min(static_cast<int>(q.y()), img.height() - 1);
  const double fu = q.x() - u0;
  const double fv = q.y() - v0;
  T acc = zero;
  double wsum = 0.0;
  const int du[4] = {0, 1, 0, 1};
  const int dv[4] = {0, 0, 1, 1};
  const double w[4] = {(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv,
                       fu * fv};
  for (int i = 0; i < 4; ++i) {
    if (w[i] == 0.0) continue;
    const int u = u0 + du[i];
    const int v = v0 + dv[i];
    if (!img.contains(u, v) || !mask(u, v)) continue;
    acc += w[i] * img(u, v);
    wsum += w[i];
  }
  if (wsum <= 1e-12) return std::nullopt;
  return T(acc / wsum);
}

}  // namespace

std::optional<Vec3> sample_bilinear(const Image<Vec3>& img, const Mask& mask,
                                    const Vec2& q) {
  return bilinear<Vec3>(img, mask, q, Vec3::Zero());
}

std::optional<double> sample_bilinear(const Image<double>& img,
                                      const Mask& mask, const Vec2& q) {
  return bilinear<double>(img, mask, q, 0.0);
}

std::optional<Vec3> sample_bicubic(const Image<Vec3>& img, const Mask& mask, const Vec2& q,
                                   bool strict) {
  const double fx = std::floor(q.x()), fy = std::floor(q.y());
  const int u0 = static_cast<int>(fx), v0 = static_cast<int>(fy);
  if (!std::isfinite(q.x()) || !std::isfinite(q.y())) return std::nullopt;
  if (u0 - 1 < 0 || v0 - 1 < 0 || u0 + 2 >= img.width() || v0 + 2 >= img.height()) {
    if (strict) return std::nullopt;
    return sample_bilinear(img, mask, q);
  }
  auto weights = [](double t) {
    const double t2 = t * t, t3 = t2 * t;
    return std::array<double, 4>{0.5 * (-t3 + 2 * t2 - t), 0.5 * (3 * t3 - 5 * t2 + 2),
                                 0.5 * (-3 * t3 + 4 * t2 + t), 0.5 * (t3 - t2)};
  };
  const auto wx = weights(q.x() - fx), wy = weights(q.y() - fy);
  Vec3 acc = Vec3::Zero();
  for (int j = 0; j < 4; ++j) {
    Vec3 row = Vec3::Zero();
    for (int i = 0; i < 4; ++i) {
      if (!mask(u0 - 1 + i, v0 - 1 + j)) {
        if (strict) return std::nullopt;
        return sample_bilinear(img, mask, q);
      }
      row += wx[i] * img(u0 - 1 + i, v0 - 1 + j);
    }
    acc += wy[j] * row;
  }
  return acc;
}

NormalMap normals_from_depth(const DepthMap& d, const CameraIntrinsics& K) {
  const int w = d.width();
  const int h = d.height();
  NormalMap out{Image<Vec3>(w, h, Vec3::Zero()), Mask(w, h, 0)};
  auto valid = [&](int u, int v) { return d.depth.contains(u, v) && d.mask(u, v); };
  auto point = [&](int u, int v) {
    return K.backproject(Vec2(u, v), d.depth(u, v));
  };
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      if (!valid(u, v)) continue;
      const bool l = valid(u - 1, v), r = valid(u + 1, v);
      const bool t = valid(u, v - 1), b = valid(u, v + 1);
      if (!(l || r) || !(t || b)) continue;
      const Vec3 du = (r ? point(u + 1, v) : point(u, v)) -
                      (l ? point(u - 1, v) : point(u, v));
      const Vec3 dv = (b ? point(u, v + 1) : point(u, v)) -
                      (t ? point(u, v - 1) : point(u, v));
      // dv x du faces the camera (-z) for a right-handed image frame.
      Vec3 n = dv.cross(du);
      const double len = n.norm();
      if (!(len > 0.0) || !std::isfinite(len)) continue;
      out.normals(u, v) = n / len;
      out.mask(u, v) = 1;
    }
  }
  return out;
}

double angle_deg(const Vec3& a, const Vec3& b) {
  // atan2 form stays accurate for tiny angles.
  const double s = a.cross(b).norm();
  const double c = a.dot(b);
  return std::atan2(s, c) * 180.0 / std::numbers::pi;
}

}  // namespace rgbdps
