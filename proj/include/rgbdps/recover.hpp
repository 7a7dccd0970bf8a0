#pragma once

#include <span>
#include <vector>

#include "rgbdps/match.hpp"
#include "rgbdps/shading.hpp"

namespace rgbdps::recover {

class TooFewObservations : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class DegenerateWeights : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

struct EMConfig {
  double alpha0 = 0.75;
  double sigma0 = 0.05;
  double C = 1.0;  // outliers are uniform with density 1/C
  int max_iterations = 50;
  double normal_tol_deg = 0.05;
  double albedo_tol = 1e-4;  // relative
  double sigma_floor = 1e-4;
  int normal_iterations = 20;
  int min_frames = 3;
  // false: every observation is an inlier (plain least squares baseline)
  bool robust = true;
  // Robust runs start sigma at min(sigma0, robust scale of the residuals at
  // the initial normal) so a good start is not pulled towards outliers.
  bool robust_sigma_init = true;
  // Observation gathering: warped samples whose bicubic stencil leaves the
  // frame mask are skipped, as are samples seen at a grazing angle (cosine
  // between the initial normal and the viewing ray below this) in their frame.
  bool interior_samples = true;
  double min_view_cosine = 0.4;
  // recover_map also starts EM from `restarts` normals tilted by
  // restart_angle_deg around the initial one and keeps the start with the
  // highest observed log-likelihood.
  int restarts = 8;
  double restart_angle_deg = 25.0;

  void validate() const;
};

// Lighting seen by the reference-frame normal in each key frame.
struct FrameLighting {
  std::vector<QuadraticLighting> per_frame;

  FrameLighting() = default;
  FrameLighting(const QuadraticLighting& L, std::span<const Mat3> rotations);
  std::size_t size() const { return per_frame.size(); }
  const Mat3& rotation(int k) const { return rotations_[k]; }

 private:
  std::vector<Mat3> rotations_;
};

// s_k(n) = n^T R^T A R n + b^T R n + c, per channel.
Vec3 shading_per_frame(const Vec3& n, const QuadraticLighting& L, const Mat3& R);

struct PixelObservations {
  std::vector<Vec3> intensity;  // aligned I_k^W(p)
  std::vector<int> frame;       // index into FrameLighting
};

struct PixelEMState {
  Vec3 n = Vec3(0, 0, -1);
  Vec3 rho = Vec3::Zero();
  double sigma = 0.05;
  double alpha = 0.75;
  std::vector<double> omega;
};

// alpha g / (alpha g + (1 - alpha) / C) with g the isotropic Gaussian density
// of a `dims`-dimensional residual with squared norm `sq_residual`.
double inlier_posterior(double sq_residual, int dims, double sigma, double alpha, double C);
double gaussian_density(double sq_residual, int dims, double sigma);

std::vector<double> e_step(const PixelEMState& s, const PixelObservations& obs,
                           const FrameLighting& lights, const EMConfig& cfg);

// Closed-form rho, then sigma and alpha given omega. Throws DegenerateWeights.
void m_step_closed(PixelEMState& s, const PixelObservations& obs, const FrameLighting& lights,
                   const EMConfig& cfg);

// sum_k omega_k |rho * s_k(n) - I_k|^2
double normal_objective(const Vec3& n, const Vec3& rho, const PixelObservations& obs,
                        const FrameLighting& lights, std::span<const double> omega);

// Orthonormal tangent basis at n (deterministic).
std::pair<Vec3, Vec3> tangent_basis(const Vec3& n);

// Gradient of normal_objective at delta = 0 for n(delta) =
// normalise(n + delta_1 t1 + delta_2 t2).
Vec2 normal_gradient(const Vec3& n, const Vec3& rho, const PixelObservations& obs,
                     const FrameLighting& lights, std::span<const double> omega);

// Gauss-Newton on the sphere for normal_objective, with rho replaced by its
// closed-form optimum at every trial normal (both are updated). Returns false
// when it stopped on the iteration cap instead of converging.
bool m_step_normal(PixelEMState& s, const PixelObservations& obs, const FrameLighting& lights,
                   const EMConfig& cfg);

// Expected complete-data log-likelihood at `s` under fixed posteriors.
double expected_log_likelihood(const PixelEMState& s, std::span<const double> omega,
                               const PixelObservations& obs, const FrameLighting& lights,
                               const EMConfig& cfg);
double observed_log_likelihood(const PixelEMState& s, const PixelObservations& obs,
                               const FrameLighting& lights, const EMConfig& cfg);

struct PixelResult {
  PixelEMState state;
  int iterations = 0;
  bool converged = false;
  bool ill_posed = false;  // no lighting variation across the frames
  bool normal_nonconvergence = false;
  // Per iteration: Q at the old parameters right after the E-step, and at
  // the new parameters after the M-step.
  std::vector<double> q_before;
  std::vector<double> q_after;
};

PixelResult recover_pixel(const PixelObservations& obs, const FrameLighting& lights,
                          const Vec3& n_init, const EMConfig& cfg);

// recover_pixel from n_init and the tilted restarts; the best result by
// observed log-likelihood wins, ties going to the earlier start.
PixelResult recover_pixel_multistart(const PixelObservations& obs, const FrameLighting& lights,
                                     const Vec3& n_init, const EMConfig& cfg);

// Key frame k as seen from the reference.
struct FrameView {
  const RadianceImage* image = nullptr;
  const match::CorrespondenceField* field = nullptr;  // nullptr: identity
  Mat3 R = Mat3::Identity();
};

struct RecoverStats {
  std::size_t pixels = 0;
  std::size_t converged = 0;
  std::size_t fallback = 0;  // too few observations, degenerate or ill-posed
  double mean_iterations = 0.0;
  double mean_alpha = 0.0;
};

struct RecoveredMaps {
  NormalMap normals;
  AlbedoMap albedo;
  Image<double> confidence;  // final alpha x converged; 0 on fallback
  Image<int> iterations;
  RecoverStats stats;
};

// Gathers each masked reference pixel's observations over `frames` (the
// reference itself is the entry with a null field) and solves it on its own.
RecoveredMaps recover_map(const NormalMap& init_normals, std::span<const FrameView> frames,
                          const QuadraticLighting& L, const CameraIntrinsics& K,
                          const EMConfig& cfg);

// `n_ref` is the pixel's initial normal, used only for the view-angle test.
PixelObservations gather_observations(int u, int v, const Vec3& n_ref,
                                      std::span<const FrameView> frames,
                                      const CameraIntrinsics& K, const EMConfig& cfg);

}  // namespace rgbdps::recover
