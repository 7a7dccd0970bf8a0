#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "rgbdps/core.hpp"
#include "rgbdps/shading.hpp"

namespace rgbdps::synth {

class SurfaceOutOfFrustum : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

enum class SurfaceKind { Sphere, BumpySphere, Plane };
enum class AlbedoKind { Constant, Checker, Patches, CheckerPatches };

// Analytic surface in reference-camera coordinates (the object frame).
struct SurfaceSpec {
  SurfaceKind kind = SurfaceKind::BumpySphere;
  Vec3 center{0.0, 0.0, 1.5};
  double radius = 0.5;
  // Radial displacement amplitude * sin(f u_x) sin(f u_y), u the unit
  // direction from the center.
  double amplitude = 0.01;
  double frequency = 8.0;
  // Plane through `center`, square of the given half extent; single sided.
  Vec3 plane_normal{0.0, 0.0, -1.0};
  double plane_half_extent = 0.4;
};

// Solid texture evaluated at object-frame points relative to the center.
struct AlbedoSpec {
  AlbedoKind kind = AlbedoKind::CheckerPatches;
  Vec3 base{0.6, 0.6, 0.6};
  Vec3 checker_a{0.80, 0.30, 0.25};
  Vec3 checker_b{0.25, 0.55, 0.80};
  double patch_size = 0.22;    // metres
  double checker_size = 0.11;  // metres
  double checker_contrast = 0.15;
  // Per-channel direction of the checker modulation over the patch colour.
  Vec3 checker_tint{1.0, 0.0, -1.0};
  // Width of the blend band between cells as a fraction of the cell; 0 gives
  // hard edges.
  double softness = 1.0;
  std::uint64_t seed = 7;

  Vec3 evaluate(const Vec3& local) const;
};

struct SyntheticScene {
  SurfaceSpec surface;
  AlbedoSpec albedo;
  QuadraticLighting lighting;
  std::vector<RigidPose> poses;  // poses[0] must be the identity
  CameraIntrinsics K;

  void validate() const;
};

struct RenderedFrame {
  RadianceImage image;
  DepthMap depth;
  NormalMap normals;  // in this frame's camera coordinates
  AlbedoMap albedo;
};

// Rotations by k * step about `axis` through `center`, k = 0..count-1.
std::vector<RigidPose> orbit_poses(const Vec3& center, const Vec3& axis,
                                   double step_deg, int count);

// Desk-scale default: bumpy sphere r = 0.5 m at 1.5 m, 128 x 128, 20 frames
// turning 3 deg each about a tilted axis, sun + sky lighting.
SyntheticScene default_scene();

// Ray casts every frame. Pixel intensity is albedo * shade(L, R_k n_ref).
std::vector<RenderedFrame> render_sequence(const SyntheticScene& scene);

struct SmoothingStrength {
  int iterations = 1;
  double sigma = 4.0;  // pixels
};

// Mask-respecting (normalised) Gaussian smoothing.
DepthMap smooth_depth(const DepthMap& d, const SmoothingStrength& strength);

// Each masked pixel becomes black or white (equal odds) with probability
// `density`. Bit-reproducible from the seed.
RadianceImage corrupt_salt_pepper(const RadianceImage& img, double density,
                                  std::uint64_t seed);

// Gaussian translation noise (metres) and small-angle rotation noise
// (radians) on every pose except the first.
std::vector<RigidPose> perturb_poses(const std::vector<RigidPose>& poses,
                                     double sigma_t, double sigma_r,
                                     std::uint64_t seed);

// Portable deterministic random source (splitmix64 + Box-Muller).
class Random {
 public:
  explicit Random(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next();
  double uniform();  // [0, 1)
  double normal();

 private:
  std::uint64_t state_;
};

nlohmann::json scene_to_json(const SyntheticScene& scene);
SyntheticScene scene_from_json(const nlohmann::json& j);

}  // namespace rgbdps::synth
