#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rgbdps/integrate.hpp"
#include "rgbdps/lightest.hpp"
#include "rgbdps/match.hpp"
#include "rgbdps/recover.hpp"
#include "rgbdps/synth.hpp"

namespace rgbdps::pipeline {

namespace fs = std::filesystem;

inline constexpr int kMetricsSchemaVersion = 1;

// ---- dataset ---------------------------------------------------------------

struct FrameEntry {
  fs::path color;  // PFM (linear) or PNG / PPM (8-bit, linear)
  fs::path depth;  // 1-channel PFM, metres
  fs::path mask;   // PGM
  RigidPose pose;  // reference -> this frame
};

// Optional ground truth of a synthetic set. Maps refer to the reference frame.
struct GroundTruthEntry {
  fs::path normals;   // 3-channel PFM
  fs::path albedo;    // 3-channel PFM
  fs::path depth;     // 1-channel PFM
  fs::path lighting;  // lighting JSON
  std::vector<RigidPose> poses;  // unperturbed, one per frame
  std::vector<int> corrupted_frames;

  bool empty() const { return normals.empty() && albedo.empty() && depth.empty() && lighting.empty(); }
};

struct DatasetManifest {
  CameraIntrinsics K;
  std::vector<FrameEntry> frames;
  GroundTruthEntry ground_truth;
  fs::path root;  // relative paths resolve here

  fs::path resolve(const fs::path& p) const { return p.is_absolute() ? p : root / p; }
  // Frame 0 is the identity, every file exists, rotations are valid.
  void validate() const;
};

// `path` is the manifest file or a directory holding manifest.json.
DatasetManifest read_manifest(const fs::path& path);
void write_manifest(const fs::path& file, const DatasetManifest& m);

struct KeyFrame {
  int index = 0;  // position in the manifest
  RadianceImage image;
  DepthMap depth;
  RigidPose pose;
};

struct Dataset {
  CameraIntrinsics K;
  std::vector<KeyFrame> frames;  // frames[0] is the reference
  std::optional<NormalMap> gt_normals;
  std::optional<AlbedoMap> gt_albedo;
  std::optional<DepthMap> gt_depth;
  std::optional<QuadraticLighting> gt_lighting;
  std::vector<RigidPose> gt_poses;  // aligned with frames
};

// "all", "3", "0-9", "0,2,5-7"; indices ascending and unique, 0 first.
std::vector<int> parse_frame_range(const std::string& spec, int count);

// Loads the selected frames (all when empty). Errors name the frame.
Dataset load_dataset(const DatasetManifest& m, const std::vector<int>& frames = {});

// ---- synthetic datasets ----------------------------------------------------

struct SynthOptions {
  int corrupt_frames = 0;          // frames replaced by salt-and-pepper noise
  double sp_density = 0.5;
  double perturb_pixels = 0.0;     // translation noise, pixels at the object centre
  synth::SmoothingStrength depth_smoothing{0, 4.0};  // of the depth written as input
  std::uint64_t seed = 1;
};

// Renders the scene and builds the dataset in memory. Corrupted frames are
// drawn from 1..N-1 (the reference stays clean).
Dataset synthesize(const synth::SyntheticScene& scene, const SynthOptions& opt,
                   std::vector<int>* corrupted = nullptr);

// Renders and writes a complete dataset (manifest.json, frames/, gt/).
DatasetManifest write_synthetic_dataset(const fs::path& dir, const synth::SyntheticScene& scene,
                                        const SynthOptions& opt);

// ---- configuration ---------------------------------------------------------

enum class CorrespondenceSource { Matched, Rigid };
enum class LightingSource { Estimated, GroundTruth };

struct PipelineConfig {
  match::MatchConfig match;
  lightest::LightConfig light;
  recover::EMConfig em;
  integrate::IntegrationConfig integrate;
  // Smoothing of the reference depth before its normals seed the EM.
  synth::SmoothingStrength init_smoothing{0, 4.0};
  // Rigid: correspondences from depth and poses alone, no matching.
  CorrespondenceSource correspondences = CorrespondenceSource::Matched;
  LightingSource lighting = LightingSource::Estimated;
  double mesh_discontinuity = 0.02;

  void validate() const;
};

nlohmann::json config_to_json(const PipelineConfig& c);
// Missing keys keep their defaults; unknown keys are rejected.
PipelineConfig config_from_json(const nlohmann::json& j);
PipelineConfig read_config(const fs::path& path);

// ---- stages ----------------------------------------------------------------

struct MatchStage {
  std::vector<match::CorrespondenceField> fields;  // fields[0] is the identity
  std::vector<match::FrameMatchStats> stats;
};

struct LightStage {
  QuadraticLighting lighting;
  std::optional<lightest::LightingEstimate> estimate;  // absent with GT lighting
};

NormalMap depth_normals(const DepthMap& depth, const CameraIntrinsics& K);
NormalMap initial_normals(const Dataset& d, const PipelineConfig& cfg);

MatchStage run_match(const Dataset& d, const PipelineConfig& cfg);
LightStage run_light(const Dataset& d, const MatchStage& m, const PipelineConfig& cfg);
recover::RecoveredMaps run_recover(const Dataset& d, const MatchStage& m,
                                   const QuadraticLighting& L, const PipelineConfig& cfg);
integrate::IntegrationResult run_integrate(const Dataset& d, const recover::RecoveredMaps& r,
                                           const PipelineConfig& cfg);

// Runs fn; ValidationError / NumericalError come out as StageError(stage).
template <typename Fn>
auto run_stage(const std::string& stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const NumericalError& e) {
    throw StageError(stage, e.what(), true);
  } catch (const ValidationError& e) {
    throw StageError(stage, e.what(), false);
  }
}

// ---- stage artifacts (fixed names inside a results directory) --------------

void save_match(const fs::path& dir, const Dataset& d, const MatchStage& m);
MatchStage load_match(const fs::path& dir, const Dataset& d);

void save_light(const fs::path& dir, const LightStage& l);
QuadraticLighting load_lighting(const fs::path& dir);

void save_recover(const fs::path& dir, const recover::RecoveredMaps& r);
recover::RecoveredMaps load_recover(const fs::path& dir);

void save_integrate(const fs::path& dir, const integrate::IntegrationResult& r,
                    const CameraIntrinsics& K, double mesh_discontinuity);
DepthMap load_refined_depth(const fs::path& dir);

// ---- evaluation --------------------------------------------------------------

struct EvalReport {
  std::size_t pixels = 0;
  double normal_mean_deg = 0.0;
  double normal_median_deg = 0.0;
  // Per channel: s minimises |s rho - rho_gt|; error is the RMS of the
  // aligned residual relative to the RMS of the ground truth.
  std::optional<Vec3> albedo_scale;
  std::optional<Vec3> albedo_rel_rms;
  std::optional<double> depth_rmse;        // metres
  std::optional<double> prior_depth_rmse;  // of the input depth
  Image<double> normal_error;              // degrees
  Image<double> albedo_error;              // aligned residual norm
  Image<double> depth_error;               // metres
  Mask mask;
};

// Errors over the intersection of the estimate's and the ground truth's masks.
EvalReport evaluate(const NormalMap& normals, const NormalMap& gt_normals,
                    const AlbedoMap* albedo = nullptr, const AlbedoMap* gt_albedo = nullptr,
                    const DepthMap* depth = nullptr, const DepthMap* gt_depth = nullptr,
                    const DepthMap* prior_depth = nullptr);

nlohmann::json report_to_json(const EvalReport& r);
// eval.csv plus false-colour error maps.
void save_report(const fs::path& dir, const EvalReport& r);

// Per-channel RMS of (s * estimated - true) shading over `normals` relative
// to the true RMS, s fitted per channel.
Vec3 shading_error(const QuadraticLighting& est, const QuadraticLighting& truth,
                   const NormalMap& normals);

// Median endpoint error of every defined correspondence against the rigid
// correspondences of the ground-truth poses.
std::optional<double> match_median_error(const Dataset& d, const MatchStage& m);

// ---- whole run -------------------------------------------------------------

struct PipelineRun {
  MatchStage match;
  LightStage light;
  recover::RecoveredMaps recovered;
  integrate::IntegrationResult integrated;
  std::optional<EvalReport> report;
  nlohmann::json metrics;  // as written to metrics.json
};

// Runs every stage, writing each stage's artifacts into `out` (when not
// empty) as soon as it finishes and metrics.json at the end. On a stage
// failure metrics.json records the failing stage before the error is
// rethrown.
PipelineRun run_pipeline(const Dataset& d, const PipelineConfig& cfg, const fs::path& out = {});

}  // namespace rgbdps::pipeline
