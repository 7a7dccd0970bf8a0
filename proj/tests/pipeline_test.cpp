#include <cmath>
#include <fstream>

#include <gtest/gtest.h>

#include "rgbdps/jsonio.hpp"
#include "rgbdps/pipeline.hpp"

namespace rgbdps::pipeline {
namespace {

synth::SyntheticScene SmallScene(int frames = 6) {
  synth::SyntheticScene s = synth::default_scene();
  s.K = {75.0, 75.0, 31.5, 31.5, 64, 64};
  s.poses.resize(static_cast<std::size_t>(frames));
  return s;
}

fs::path TempDir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rgbdps_pipeline_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(FrameRange, Forms) {
  EXPECT_EQ(parse_frame_range("all", 4), (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(parse_frame_range("", 3), (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(parse_frame_range("2", 5), (std::vector<int>{0, 1}));
  EXPECT_EQ(parse_frame_range("0-2", 5), (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(parse_frame_range("3,0,1-2,2", 5), (std::vector<int>{0, 1, 2, 3}));
  EXPECT_THROW(parse_frame_range("1-3", 5), ValidationError);  // no reference
  EXPECT_THROW(parse_frame_range("0-9", 5), ValidationError);
  EXPECT_THROW(parse_frame_range("0,x", 5), ValidationError);
  EXPECT_THROW(parse_frame_range("0", 5), ValidationError);
  EXPECT_THROW(parse_frame_range("3-1", 5), ValidationError);
}

TEST(Config, RoundTripAndUnknownKeys) {
  PipelineConfig c;
  c.em.restarts = 3;
  c.match.patch_radius = 4;
  c.correspondences = CorrespondenceSource::Rigid;
  c.lighting = LightingSource::GroundTruth;
  c.init_smoothing = {2, 3.0};
  const PipelineConfig back = config_from_json(config_to_json(c));
  EXPECT_EQ(config_to_json(back), config_to_json(c));

  EXPECT_EQ(config_to_json(config_from_json(nlohmann::json::object())), config_to_json(PipelineConfig{}));
  EXPECT_THROW(config_from_json({{"bogus", 1}}), ValidationError);
  EXPECT_THROW(config_from_json({{"em", {{"bogus", 1}}}}), ValidationError);
  EXPECT_THROW(config_from_json({{"em", {{"restarts", "many"}}}}), ValidationError);
  EXPECT_THROW(config_from_json({{"lighting", "sun"}}), ValidationError);
  EXPECT_THROW(config_from_json({{"mesh_discontinuity", -1.0}}), ValidationError);
}

TEST(Evaluate, WorkedExamples) {
  const int w = 8, h = 8;
  NormalMap gt{Image<Vec3>(w, h, Vec3(0, 0, -1)), Mask(w, h, 1)};
  EvalReport r = evaluate(gt, gt);
  EXPECT_EQ(r.pixels, 64u);
  EXPECT_DOUBLE_EQ(r.normal_mean_deg, 0.0);

  const double a = 5.0 * M_PI / 180.0;
  NormalMap tilted{Image<Vec3>(w, h, Vec3(std::sin(a), 0, -std::cos(a))), Mask(w, h, 1)};
  tilted.mask(0, 0) = 0;
  r = evaluate(tilted, gt);
  EXPECT_EQ(r.pixels, 63u);
  EXPECT_NEAR(r.normal_mean_deg, 5.0, 0.01);
  EXPECT_NEAR(r.normal_median_deg, 5.0, 0.01);

  // albedo is compared up to a per-channel scale
  AlbedoMap rho{Image<Vec3>(w, h, Vec3(0.2, 0.4, 0.6)), Mask(w, h, 1)};
  rho.albedo(3, 3) = Vec3(0.3, 0.1, 0.5);
  AlbedoMap twice = rho;
  for (std::size_t i = 0; i < twice.albedo.size(); ++i) twice.albedo[i] *= 2.0;
  r = evaluate(gt, gt, &twice, &rho);
  ASSERT_TRUE(r.albedo_rel_rms);
  EXPECT_LT(r.albedo_rel_rms->maxCoeff(), 1e-12);
  EXPECT_NEAR((*r.albedo_scale)[1], 0.5, 1e-12);

  DepthMap z{Image<double>(w, h, 1.0), Mask(w, h, 1)};
  DepthMap z2 = z;
  for (std::size_t i = 0; i < z2.depth.size(); ++i) z2.depth[i] += 0.01;
  r = evaluate(gt, gt, nullptr, nullptr, &z2, &z, &z);
  EXPECT_NEAR(*r.depth_rmse, 0.01, 1e-12);
  EXPECT_DOUBLE_EQ(*r.prior_depth_rmse, 0.0);

  NormalMap empty{Image<Vec3>(w, h, Vec3(0, 0, -1)), Mask(w, h, 0)};
  EXPECT_THROW(evaluate(empty, gt), ValidationError);
}

TEST(ShadingError, ZeroUpToScale) {
  const auto s = SmallScene(1);
  const auto fr = synth::render_sequence(s);
  QuadraticLighting scaled = s.lighting;
  for (int c = 0; c < 3; ++c) {
    scaled[c].A *= 1.7;
    scaled[c].b *= 1.7;
    scaled[c].c *= 1.7;
  }
  EXPECT_LT(shading_error(scaled, s.lighting, fr[0].normals).maxCoeff(), 1e-12);
}

TEST(Synthesize, CorruptionIsSeededAndSkipsTheReference) {
  SynthOptions opt;
  opt.corrupt_frames = 3;
  opt.seed = 9;
  std::vector<int> a, b, c;
  synthesize(SmallScene(), opt, &a);
  synthesize(SmallScene(), opt, &b);
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.size(), 3u);
  for (int k : a) {
    EXPECT_GE(k, 1);
    EXPECT_LE(k, 5);
  }
  opt.corrupt_frames = 6;
  EXPECT_THROW(synthesize(SmallScene(), opt, &c), ValidationError);
}

TEST(Manifest, WriteReadAndLoad) {
  const fs::path dir = TempDir("manifest");
  SynthOptions opt;
  opt.corrupt_frames = 1;
  const DatasetManifest m = write_synthetic_dataset(dir, SmallScene(4), opt);
  const DatasetManifest back = read_manifest(dir);
  ASSERT_EQ(back.frames.size(), 4u);
  EXPECT_EQ(back.ground_truth.corrupted_frames, m.ground_truth.corrupted_frames);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_TRUE(back.frames[k].pose.R.isApprox(m.frames[k].pose.R, 1e-12));
  }
  const Dataset d = load_dataset(back, parse_frame_range("0,2", 4));
  ASSERT_EQ(d.frames.size(), 2u);
  EXPECT_EQ(d.frames[1].index, 2);
  ASSERT_TRUE(d.gt_normals && d.gt_albedo && d.gt_depth && d.gt_lighting);
  EXPECT_EQ(d.gt_poses.size(), 2u);

  const Dataset mem = synthesize(SmallScene(4), opt);
  // PFM stores floats
  for (std::size_t i = 0; i < mem.frames[2].image.pixels.size(); ++i) {
    if (!mem.frames[2].image.mask[i]) continue;
    ASSERT_NEAR((d.frames[1].image.pixels[i] - mem.frames[2].image.pixels[i]).norm(), 0.0, 1e-6);
  }
}

TEST(Manifest, MissingDepthNamesTheFrame) {
  const fs::path dir = TempDir("missing");
  DatasetManifest m = write_synthetic_dataset(dir, SmallScene(3), SynthOptions{});
  fs::remove(dir / m.frames[2].depth);
  try {
    read_manifest(dir);
    FAIL() << "expected a ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("frame 2"), std::string::npos) << e.what();
  }
  try {
    load_dataset(m);
    FAIL() << "expected a ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("frame 2"), std::string::npos) << e.what();
  }
}

TEST(Manifest, RejectsANonIdentityReference) {
  const fs::path dir = TempDir("badref");
  DatasetManifest m = write_synthetic_dataset(dir, SmallScene(2), SynthOptions{});
  m.frames[0].pose = m.frames[1].pose;
  write_manifest(dir / "manifest.json", m);
  EXPECT_THROW(read_manifest(dir), ValidationError);
}

TEST(RunPipeline, RigidGroundTruthRunIsAccurateAndRepeatable) {
  const Dataset d = synthesize(SmallScene(6), SynthOptions{});
  PipelineConfig cfg;
  cfg.correspondences = CorrespondenceSource::Rigid;
  cfg.lighting = LightingSource::GroundTruth;
  cfg.init_smoothing = {1, 4.0};
  const fs::path out = TempDir("run");
  const PipelineRun a = run_pipeline(d, cfg, out);
  ASSERT_TRUE(a.report);
  // the mean is dominated by grazing silhouette pixels at this size
  EXPECT_LT(a.report->normal_median_deg, 2.0);
  EXPECT_EQ(a.metrics["status"], "ok");
  EXPECT_EQ(a.metrics["schema_version"], kMetricsSchemaVersion);
  for (const char* f : {"metrics.json", "lighting.json", "normals.pfm", "albedo.pfm", "confidence.pfm",
                        "depth_refined.pfm", "mesh.ply", "eval.csv", "error_normals.png", "match/stats.json"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  const PipelineRun b = run_pipeline(d, cfg);
  EXPECT_EQ(a.metrics.dump(), b.metrics.dump());

  // stored artifacts reload to the same maps
  const auto r = load_recover(out);
  const MatchStage m = load_match(out, d);
  ASSERT_EQ(m.fields.size(), d.frames.size());
  EXPECT_EQ(m.fields[3].defined, a.match.fields[3].defined);
  for (std::size_t i = 0; i < r.normals.normals.size(); ++i) {
    if (!r.normals.mask[i]) continue;
    ASSERT_LT((r.normals.normals[i] - a.recovered.normals.normals[i]).norm(), 1e-6);
  }
  EXPECT_EQ(load_refined_depth(out).mask, a.integrated.depth.mask);
}

TEST(RunPipeline, StageFailureIsRecorded) {
  Dataset d = synthesize(SmallScene(3), SynthOptions{});
  d.gt_lighting.reset();
  PipelineConfig cfg;
  cfg.correspondences = CorrespondenceSource::Rigid;
  cfg.lighting = LightingSource::GroundTruth;
  const fs::path out = TempDir("fail");
  try {
    run_pipeline(d, cfg, out);
    FAIL() << "expected a StageError";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "light");
    EXPECT_FALSE(e.numerical());
  }
  const auto j = jsonio::read_file(out / "metrics.json");
  EXPECT_EQ(j["status"], "failed");
  EXPECT_EQ(j["failed_stage"], "light");
}

}  // namespace
}  // namespace rgbdps::pipeline
