#pragma once

#include <vector>

#include "rgbdps/core.hpp"
#include "rgbdps/io.hpp"

namespace rgbdps::integrate {

struct IntegrationConfig {
  double lambda_depth = 0.1;  // weight of the pull towards the prior, per m^2
  double tolerance = 1e-8;    // relative residual of the normal equations
  int max_iterations = 2000;
  // Normals this close to perpendicular to the viewing ray give no gradient.
  double min_view_cosine = 0.05;

  void validate() const;
};

struct IntegrationResult {
  DepthMap depth;
  std::vector<double> energy;  // before the first and after every CG step
  int iterations = 0;
  bool converged = false;
  // The solve failed (no convergence or non-finite values); `depth` is then
  // the prior.
  bool diverged = false;
  double relative_residual = 0.0;
};

// Depth gradient, in metres per pixel along u and v, implied by normal n at
// pixel p and depth z. From n . dX = 0 with X = z K^-1 (u, v, 1):
//   dz/du = -z n_x / (fx n.r),  dz/dv = -z n_y / (fy n.r),  r = K^-1 (u, v, 1).
// nullopt when n is too close to perpendicular to the ray.
std::optional<Vec2> depth_gradient(const Vec3& n, const Vec2& p, double z,
                                   const CameraIntrinsics& K, double min_view_cosine);

// Screened least squares over the prior's mask:
//   sum_edges c_e (f / zbar_e)^2 (z_b - z_a - g_e)^2 + lambda_depth sum_p (z_p - prior_p)^2
// over 4-neighbour edges inside the mask, with g_e the mean of depth_gradient
// at both ends (evaluated at the prior depth), c_e the smaller of the two
// confidences and zbar_e their mean prior depth. The f / zbar factor turns
// the edge residual into a slope, so the gradient term is unitless and the
// prior term is in square metres. Solved by Jacobi-preconditioned conjugate
// gradients started at the prior.
IntegrationResult integrate_normals(const NormalMap& normals, const DepthMap& prior,
                                    const Image<double>& confidence,
                                    const CameraIntrinsics& K, const IntegrationConfig& cfg);

// The objective above at `z` (only masked pixels of z are read).
double integration_energy(const Image<double>& z, const NormalMap& normals,
                          const DepthMap& prior, const Image<double>& confidence,
                          const CameraIntrinsics& K, const IntegrationConfig& cfg);

// One vertex per masked pixel; each grid cell contributes triangles over its
// valid corners unless their depths differ by more than `discontinuity` times
// the smallest of them. Faces wind so that normals face the camera; vertex
// normals are area-weighted face normals.
io::TriangleMesh export_mesh(const DepthMap& depth, const CameraIntrinsics& K,
                             double discontinuity = 0.02);

}  // namespace rgbdps::integrate
