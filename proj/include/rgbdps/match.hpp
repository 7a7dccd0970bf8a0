#pragma once

#include <optional>
#include <span>
#include <vector>

#include "rgbdps/core.hpp"

namespace rgbdps::match {

class TooFewMatches : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class OutsideLattice : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

struct MatchConfig {
  int patch_radius = 5;        // 11 x 11 patches
  int search_radius = 10;
  double thres_score = 0.75;   // minimum NCC of an accepted match
  double thres_peak = 0.05;    // minimum gap to the second local peak
  int lattice_spacing = 16;
  double lambda = 10.0;        // pull of each vertex towards its initial value
  int max_iterations = 30;
  double convergence_px = 0.01;
  // Fraction of a patch that must be valid in both images.
  double min_patch_coverage = 0.6;
  // Match on chromaticity-normalised images (false: raw intensities).
  bool chromaticity = true;
  double dark_threshold = 1e-4;
  // Lattice refinement also fits a smooth per-channel gain on the reference,
  // absorbing shading changes that normalisation leaves (coloured light).
  bool gain_field = true;
  double gain_lambda = 10.0;   // pull of each vertex gain towards 1

  void validate() const;
};

// Per reference pixel: its sub-pixel location W(p) in one key frame.
struct CorrespondenceField {
  Image<Vec2> q;
  Mask defined;
  Mask reliable;
  Image<double> score;

  static CorrespondenceField empty(int width, int height);
  static CorrespondenceField identity(const Mask& mask);

  std::size_t defined_count() const { return count_set(defined); }
  std::size_t reliable_count() const { return count_set(reliable); }
  double mean_reliable_score() const;
};

// I_ch / (I_R + I_G + I_B); pixels darker than `dark` leave the mask.
RadianceImage chroma_normalize(const RadianceImage& img, double dark = 1e-4);

struct WarpedImage {
  RadianceImage image;
  Image<double> depth;   // frame-k depth of the visible reference surface
};

// Forward-warps the reference image into frame k by rasterising the
// reference pixel grid (two triangles per 2 x 2 block) with a z-buffer.
// Blocks straddling a depth jump or turned away from the camera are dropped.
WarpedImage warp_reference(const RadianceImage& ref, const DepthMap& ref_depth,
                           const CameraIntrinsics& K, const RigidPose& pose);

// Zero-mean NCC over pixels valid in both patches, all three channels
// stacked. nullopt when either side has no variance.
std::optional<double> ncc_score(std::span<const Vec3> a, std::span<const Vec3> b,
                                std::span<const std::uint8_t> valid_a = {},
                                std::span<const std::uint8_t> valid_b = {});

bool is_reliable(double best, std::optional<double> second_peak, const MatchConfig& cfg);

// Peak analysis of one (2r+1)^2 score window, row-major by (dy, dx);
// NaN marks candidates without a score.
struct PeakAnalysis {
  bool found = false;
  Vec2 offset = Vec2::Zero();  // sub-pixel displacement of the best peak
  double best = -1.0;
  std::optional<double> second;  // best other 8-neighbour local maximum
  bool on_border = false;
  bool reliable = false;
};
PeakAnalysis analyze_scores(std::span<const double> scores, int radius,
                            const MatchConfig& cfg);

struct SearchResult {
  Image<Vec2> displacement;  // best sub-pixel offset, target - reference
  Mask matched;              // a best candidate exists
  Mask reliable;
  Image<double> best;
  Image<double> second;      // NaN when there is no second peak
};

// Exhaustive NCC search around every masked pixel of `ref_warped`.
SearchResult search_matches(const RadianceImage& ref_warped,
                            const RadianceImage& target, const MatchConfig& cfg);

struct ScatteredMatch {
  Vec2 position;
  Vec2 displacement;
};

// Regular grid of control vertices covering [0, w-1] x [0, h-1]; pixels are
// displaced by the bilinear blend of the four surrounding vertices.
class DeformationLattice {
 public:
  DeformationLattice() = default;
  DeformationLattice(int width, int height, int spacing);

  int spacing() const { return spacing_; }
  int nx() const { return nx_; }
  int ny() const { return ny_; }
  std::size_t vertex_count() const { return delta_.size(); }
  Vec2 vertex_position(int i, int j) const { return Vec2(i * spacing_, j * spacing_); }
  int index(int i, int j) const { return j * nx_ + i; }

  std::vector<Vec2>& delta() { return delta_; }
  const std::vector<Vec2>& delta() const { return delta_; }
  std::vector<Vec2>& initial() { return initial_; }
  const std::vector<Vec2>& initial() const { return initial_; }
  std::vector<int>& support() { return support_; }
  const std::vector<int>& support() const { return support_; }

  bool contains(const Vec2& p) const;
  // Vertex indices and bilinear weights (summing to 1) for `p`.
  std::array<std::pair<int, double>, 4> weights(const Vec2& p) const;
  Vec2 displacement(const Vec2& p) const;
  // f(p) = p + sum_l theta_l(p) delta_l. Throws OutsideLattice.
  Vec2 apply(const Vec2& p) const;

 private:
  int spacing_ = 1;
  int nx_ = 0;
  int ny_ = 0;
  std::vector<Vec2> delta_;
  std::vector<Vec2> initial_;
  std::vector<int> support_;
};

// Initial vertex displacements: inverse-distance-weighted mean of matches
// within 1.5 spacings; vertices without support get the harmonic fill of
// their supported neighbours. delta() starts equal to initial().
DeformationLattice fit_lattice(std::span<const ScatteredMatch> matches, int width,
                               int height, const MatchConfig& cfg);

// 255^2 sum_p |g(p) ref(p) - target(f(p))|^2 + lambda sum_l |delta_l - initial_l|^2
// + gain_lambda sum_l |gamma_l - 1|^2, i.e. residuals in 8-bit units, with
// g(p) the bilinear blend of the per-vertex channel gains gamma_l (g = 1 when
// `gains` is empty). A sample outside the target mask is charged a fixed
// squared residual of 0.01.
double lattice_energy(const DeformationLattice& lattice, const RadianceImage& ref_cn,
                      const RadianceImage& target_cn, double lambda,
                      std::span<const Vec3> gains = {}, double gain_lambda = 0.0);

struct LatticeOptimization {
  DeformationLattice lattice;
  int iterations = 0;
  bool converged = false;
  std::vector<double> energy;  // per accepted iterate, starting value first
  std::vector<Vec3> gains;     // per vertex; empty without cfg.gain_field
};

// Gauss-Newton on lattice_energy with step halving; the gains start at 1.
LatticeOptimization optimize_lattice(DeformationLattice lattice,
                                     const RadianceImage& ref_cn,
                                     const RadianceImage& target_cn,
                                     const MatchConfig& cfg);

struct FrameMatchStats {
  std::size_t searched = 0;
  std::size_t reliable = 0;
  double mean_score = 0.0;
  int lattice_iterations = 0;
  bool lattice_converged = false;
  bool lattice_fallback = false;  // too few reliable matches; rigid warp kept
};

struct FrameMatch {
  CorrespondenceField field;
  FrameMatchStats stats;
  DeformationLattice lattice;
};

// Full per-frame matching: rigid warp, normalisation, NCC search, lattice
// fit and refinement, then W(p) = f(project(p)) for every reference pixel.
FrameMatch match_frame(const RadianceImage& ref, const DepthMap& ref_depth,
                       const CameraIntrinsics& K, const RigidPose& pose,
                       const RadianceImage& target, const MatchConfig& cfg);

// Correspondences from geometry alone. With `target_depth` a point counts as
// visible only when its projected depth agrees with the target depth to 1%.
// Every defined correspondence is marked reliable.
CorrespondenceField rigid_correspondences(const DepthMap& ref_depth,
                                          const CameraIntrinsics& K,
                                          const RigidPose& pose, const Mask& target_mask,
                                          const DepthMap* target_depth = nullptr);

}  // namespace rgbdps::match
