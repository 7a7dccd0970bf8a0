#pragma once

#include <array>
#include <functional>
#include <span>

#include <nlohmann/json_fwd.hpp>

#include "rgbdps/core.hpp"

namespace rgbdps {

// s(n) = n^T A n + b^T n + c for one colour channel.
struct ChannelLighting {
  Mat3 A = Mat3::Zero();
  Vec3 b = Vec3::Zero();
  double c = 0.0;

  double shade(const Vec3& n) const { return n.dot(A * n) + b.dot(n) + c; }
  // d s / d n (ambient-space gradient, not projected onto the sphere).
  Vec3 gradient(const Vec3& n) const { return 2.0 * (A * n) + b; }

  // Free parameters: 6 upper-triangle entries of A (xx, xy, xz, yy, yz, zz),
  // then b, then c.
  using Params = Eigen::Matrix<double, 10, 1>;
  Params params() const;
  static ChannelLighting from_params(const Params& p);

  ChannelLighting scaled(double t) const { return {t * A, t * b, t * c}; }
  ChannelLighting rotated(const Mat3& R) const {
    return {R.transpose() * A * R, R.transpose() * b, c};
  }
};

enum Channel : int { kRed = 0, kGreen = 1, kBlue = 2 };

// Order-2 shading model, one independent quadratic per RGB channel.
struct QuadraticLighting {
  std::array<ChannelLighting, 3> channels;
  // Per-channel factor applied by normalize_gauge (1 when never normalised).
  std::array<double, 3> gauge{1.0, 1.0, 1.0};

  static QuadraticLighting ambient(double c = 1.0);
  static QuadraticLighting gray(const ChannelLighting& ch);

  ChannelLighting& operator[](int ch) { return channels[ch]; }
  const ChannelLighting& operator[](int ch) const { return channels[ch]; }

  void validate() const;
};

double shade(const QuadraticLighting& L, const Vec3& n, int channel);
Vec3 shade_rgb(const QuadraticLighting& L, const Vec3& n);

// I_ch(p) = albedo_ch(p) * shade(L, n(p), ch) on the intersection of masks.
// No clamping; exporters clamp.
RadianceImage render(const QuadraticLighting& L, const NormalMap& normals,
                     const AlbedoMap& albedo);

// Lighting seen by a surface whose normals are expressed before the rotation:
// shade(rotate_lighting(L, R), n) == shade(L, R n).
QuadraticLighting rotate_lighting(const QuadraticLighting& L, const Mat3& R);

// Rescales every channel so that its mean shading over `normals` is 1 and
// moves the trace of A into c (shading is unchanged by that move on the unit
// sphere). The applied factors are multiplied into L.gauge.
QuadraticLighting normalize_gauge(const QuadraticLighting& L,
                                  std::span<const Vec3> normals);

// --- Spherical-harmonic projection -------------------------------------

// Real spherical harmonics up to degree 2, ordered (0,0), (1,-1), (1,0),
// (1,1), (2,-2), (2,-1), (2,0), (2,1), (2,2).
using SHCoeffs = Eigen::Matrix<double, 9, 1>;
SHCoeffs sh_basis(const Vec3& dir);

// Radiance arriving from direction w (unit), per channel.
using EnvironmentRadiance = std::function<Vec3(const Vec3& w)>;

// Order-2 SH coefficients of the radiance by product Gauss-Legendre x
// uniform-azimuth quadrature over the sphere.
std::array<SHCoeffs, 3> project_environment(const EnvironmentRadiance& radiance,
                                            int polar_nodes = 128);

// Irradiance quadratic from order-2 radiance coefficients (clamped-cosine
// convolution with A0 = pi, A1 = 2pi/3, A2 = pi/4).
QuadraticLighting lighting_from_sh(const std::array<SHCoeffs, 3>& radiance);

// Irradiance by direct quadrature of  int L(w) max(0, n.w) dw.
Vec3 irradiance_quadrature(const EnvironmentRadiance& radiance, const Vec3& n,
                           int polar_nodes = 256);

// Narrow "sun" lobe (normalised cosine power) plus a constant sky.
struct DirectionalEnvironment {
  Vec3 direction{-0.45, -0.55, -0.70};  // towards the light, camera frame
  Vec3 sun{0.80, 0.74, 0.64};           // irradiance at normal incidence
  Vec3 sky{0.26, 0.27, 0.31};           // irradiance from the constant sky
  double exponent = 64.0;

  Vec3 operator()(const Vec3& w) const;
};

QuadraticLighting lighting_from_environment(const DirectionalEnvironment& env);

// JSON: {"channels":[{"A":[xx,xy,xz,yy,yz,zz],"b":[..3],"c":..,"gauge":..}x3]}
nlohmann::json to_json(const QuadraticLighting& L);
QuadraticLighting lighting_from_json(const nlohmann::json& j);

}  // namespace rgbdps
