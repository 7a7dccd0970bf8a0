#pragma once

#include <array>
#include <span>
#include <vector>

#include "rgbdps/match.hpp"
#include "rgbdps/shading.hpp"

namespace rgbdps::lightest {

class InsufficientObservations : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

struct LightConfig {
  double tau_dark = 0.02;  // weights ramp from 0 at tau to 1 at 2 tau
  std::size_t max_observations = 20000;
  std::size_t min_observations = 200;
  int min_frames = 5;
  int max_iterations = 200;
  double min_denominator = 1e-3;
  // Pixels seen more obliquely than this (cosine between normal and viewing
  // ray, in either frame) are left out: depth normals and texture samples
  // both degrade towards the silhouette.
  double min_view_cosine = 0.3;
  // Distance in pixels that p and q must keep from their mask boundaries;
  // smoothed depth bends the normals along the silhouette.
  int boundary_margin = 6;
  std::uint64_t seed = 1;

  void validate() const;
};

// I_k(q) / I_ref(p) for one corresponded pixel, all three channels.
struct RatioObservation {
  Vec2 p;
  int frame = 0;
  Vec3 ratio;
  Vec3 n_p;      // reference frame
  Vec3 n_q;      // frame k coordinates, sampled at q
  Mat3 R;        // reference -> frame k rotation
  Vec3 gamma;    // per-channel dark-pixel weight
};

struct RatioFrame {
  int index = 0;
  const RadianceImage* image = nullptr;
  const NormalMap* normals = nullptr;  // frame k's own depth normals
  const match::CorrespondenceField* field = nullptr;
  Mat3 R = Mat3::Identity();
};

// Smooth ramp used as the dark-pixel weight.
double dark_weight(double intensity, double tau);

// One observation per reliable pixel and frame with usable ratios.
std::vector<RatioObservation> build_ratio_set(const RadianceImage& ref,
                                              const NormalMap& ref_normals,
                                              const CameraIntrinsics& K,
                                              std::span<const RatioFrame> frames,
                                              const LightConfig& cfg);

// Regressors: shade(L, n) = phi(n) . params for ChannelLighting::params().
ChannelLighting::Params shading_features(const Vec3& n);

// sum gamma (shade(rot(L, R), R^T n_q) / shade(L, n_p) - r)^2 for one
// channel. Observations whose denominator falls below `min_denominator` in
// magnitude are skipped.
double ratio_objective(const ChannelLighting& L, std::span<const RatioObservation> obs,
                       int channel, double min_denominator = 1e-3);

struct ChannelFit {
  double objective = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> history;  // objective after every accepted step
};

struct LightingEstimate {
  QuadraticLighting lighting;
  std::array<ChannelFit, 3> fits;
  std::size_t observations_used = 0;
  bool degenerate_motion = false;  // every rotation within 1 deg of the others
};

// Per-channel Levenberg-Marquardt from `initial`, then gauge normalisation
// over `gauge_normals`.
LightingEstimate estimate_lighting(std::span<const RatioObservation> obs,
                                   std::span<const Vec3> gauge_normals,
                                   const LightConfig& cfg,
                                   const QuadraticLighting& initial = QuadraticLighting::ambient());

// Residuals of every used observation and channel at L, for reporting.
std::vector<double> ratio_residuals(const QuadraticLighting& L,
                                    std::span<const RatioObservation> obs);

}  // namespace rgbdps::lightest
