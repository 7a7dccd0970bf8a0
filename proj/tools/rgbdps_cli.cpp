#include <cstdint>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "rgbdps/jsonio.hpp"
#include "rgbdps/parallel.hpp"
#include "rgbdps/pipeline.hpp"

namespace {

using namespace rgbdps;
using namespace rgbdps::pipeline;

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  unsigned threads = 0;
  std::string frames = "all";
};

void add_common(CLI::App* app, Common& c, bool needs_out = true) {
  app->add_option("--config", c.config, "JSON configuration file")->check(CLI::ExistingFile);
  auto* out = app->add_option("--out", c.out, "output directory");
  if (needs_out) out->required();
  app->add_option("--seed", c.seed, "random seed");
  app->add_option("--threads", c.threads, "worker cap (0 = all cores)");
  app->add_option("--frames", c.frames, "frame selection: all, N, a-b or a,b,c-d");
}

PipelineConfig load_config(const Common& c) {
  PipelineConfig cfg = c.config.empty() ? PipelineConfig{} : read_config(c.config);
  if (c.seed) cfg.light.seed = *c.seed;
  return cfg;
}

Dataset load(const std::string& dataset, const Common& c) {
  const DatasetManifest m = read_manifest(dataset);
  return load_dataset(m, parse_frame_range(c.frames, static_cast<int>(m.frames.size())));
}

void write_config(const fs::path& out, const PipelineConfig& cfg) {
  fs::create_directories(out);
  jsonio::write_file(out / "config.json", config_to_json(cfg));
}

int cmd_synth(const Common& c, const std::string& scene_file, const SynthOptions& base, const std::string& frames) {
  synth::SyntheticScene scene =
      scene_file.empty() ? synth::default_scene() : synth::scene_from_json(jsonio::read_file(scene_file));
  if (frames != "all") {
    const auto pick = parse_frame_range(frames, static_cast<int>(scene.poses.size()));
    std::vector<RigidPose> poses;
    for (int k : pick) poses.push_back(scene.poses[static_cast<std::size_t>(k)]);
    scene.poses = poses;
  }
  SynthOptions opt = base;
  if (c.seed) opt.seed = *c.seed;
  const DatasetManifest m = write_synthetic_dataset(c.out, scene, opt);
  std::printf("wrote %zu frames to %s\n", m.frames.size(), c.out.c_str());
  if (!m.ground_truth.corrupted_frames.empty()) {
    std::printf("corrupted frames:");
    for (int k : m.ground_truth.corrupted_frames) std::printf(" %d", k);
    std::printf("\n");
  }
  return kExitOk;
}

int cmd_match(const Common& c, const std::string& dataset) {
  const PipelineConfig cfg = load_config(c);
  const Dataset d = load(dataset, c);
  const MatchStage m = run_stage("match", [&] { return run_match(d, cfg); });
  run_stage("match", [&] { save_match(c.out, d, m); });
  write_config(c.out, cfg);
  if (const auto e = match_median_error(d, m)) std::printf("median endpoint error %.3f px\n", *e);
  return kExitOk;
}

int cmd_light(const Common& c, const std::string& dataset) {
  const PipelineConfig cfg = load_config(c);
  const Dataset d = load(dataset, c);
  const MatchStage m = run_stage("light", [&] { return load_match(c.out, d); });
  const LightStage l = run_stage("light", [&] { return run_light(d, m, cfg); });
  run_stage("light", [&] { save_light(c.out, l); });
  if (d.gt_lighting && d.gt_normals) {
    const Vec3 e = shading_error(l.lighting, *d.gt_lighting, *d.gt_normals);
    std::printf("shading error (relative RMS) %.4f %.4f %.4f\n", e[0], e[1], e[2]);
  }
  return kExitOk;
}

int cmd_recover(const Common& c, const std::string& dataset) {
  const PipelineConfig cfg = load_config(c);
  const Dataset d = load(dataset, c);
  const MatchStage m = run_stage("recover", [&] { return load_match(c.out, d); });
  const QuadraticLighting L = run_stage("recover", [&] {
    return cfg.lighting == LightingSource::GroundTruth && d.gt_lighting ? *d.gt_lighting : load_lighting(c.out);
  });
  const auto r = run_stage("recover", [&] { return run_recover(d, m, L, cfg); });
  run_stage("recover", [&] { save_recover(c.out, r); });
  std::printf("recovered %zu pixels, %zu converged, %zu fallback\n", r.stats.pixels, r.stats.converged,
              r.stats.fallback);
  return kExitOk;
}

int cmd_integrate(const Common& c, const std::string& dataset) {
  const PipelineConfig cfg = load_config(c);
  Common ref = c;
  ref.frames = "1";  // only the reference frame is needed
  const Dataset d = load(dataset, ref);
  const auto r = run_stage("integrate", [&] { return load_recover(c.out); });
  const auto z = run_stage("integrate", [&] { return run_integrate(d, r, cfg); });
  run_stage("integrate", [&] { save_integrate(c.out, z, d.K, cfg.mesh_discontinuity); });
  std::printf("integration %s after %d iterations\n", z.converged ? "converged" : "stopped", z.iterations);
  return kExitOk;
}

int cmd_pipeline(const Common& c, const std::string& dataset) {
  const PipelineConfig cfg = load_config(c);
  const Dataset d = load(dataset, c);
  const PipelineRun run = run_pipeline(d, cfg, c.out);
  if (run.report) {
    std::printf("normal error mean %.3f deg, median %.3f deg over %zu pixels\n", run.report->normal_mean_deg,
                run.report->normal_median_deg, run.report->pixels);
  }
  std::printf("results in %s\n", c.out.c_str());
  return kExitOk;
}

int cmd_eval(const Common& c, const std::string& results, const std::string& dataset) {
  Common ref = c;
  ref.frames = "1";
  const Dataset d = load(dataset, ref);
  RGBDPS_CHECK(d.gt_normals.has_value(), "eval: the dataset carries no ground-truth normals");
  const fs::path in = results;
  const auto r = load_recover(in);
  std::optional<DepthMap> z;
  if (fs::exists(in / "depth_refined.pfm")) z = load_refined_depth(in);
  const EvalReport rep =
      evaluate(r.normals, *d.gt_normals, &r.albedo, d.gt_albedo ? &*d.gt_albedo : nullptr, z ? &*z : nullptr,
               d.gt_depth ? &*d.gt_depth : nullptr, &d.frames[0].depth);
  const fs::path out = c.out.empty() ? in : fs::path(c.out);
  save_report(out, rep);
  nlohmann::json j = report_to_json(rep);
  j["schema_version"] = kMetricsSchemaVersion;
  jsonio::write_file(out / "eval.json", j);
  std::printf("normal error mean %.3f deg, median %.3f deg\n", rep.normal_mean_deg, rep.normal_median_deg);
  if (rep.albedo_rel_rms) {
    std::printf("albedo relative RMS %.4f %.4f %.4f\n", (*rep.albedo_rel_rms)[0], (*rep.albedo_rel_rms)[1],
                (*rep.albedo_rel_rms)[2]);
  }
  if (rep.depth_rmse) std::printf("depth RMSE %.6f m (input %.6f m)\n", *rep.depth_rmse, *rep.prior_depth_rmse);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Depth refinement and albedo recovery from posed RGB-D key frames"};
  app.require_subcommand(1);

  Common c;
  std::string dataset, results, scene_file;
  SynthOptions synth_opt;
  int smooth_iterations = 0;

  auto* synth = app.add_subcommand("synth", "render a synthetic dataset with ground truth");
  add_common(synth, c);
  synth->add_option("--scene", scene_file, "scene JSON (default scene when omitted)")->check(CLI::ExistingFile);
  synth->add_option("--corrupt-frames", synth_opt.corrupt_frames, "frames to corrupt with salt-and-pepper noise");
  synth->add_option("--sp-density", synth_opt.sp_density, "salt-and-pepper density");
  synth->add_option("--perturb-poses", synth_opt.perturb_pixels, "pose translation noise, pixels at the object");
  synth->add_option("--smooth-depth", smooth_iterations, "Gaussian smoothing passes applied to the input depth");

  struct Stage {
    const char* name;
    const char* help;
  };
  std::map<std::string, CLI::App*> stages;
  for (const Stage s : {Stage{"match", "correspond every frame with the reference"},
                        Stage{"light", "estimate lighting from stored correspondences"},
                        Stage{"recover", "recover normals and albedo from stored correspondences and lighting"},
                        Stage{"integrate", "integrate recovered normals into refined depth"},
                        Stage{"pipeline", "run every stage and write metrics"}}) {
    auto* sub = app.add_subcommand(s.name, s.help);
    sub->add_option("dataset", dataset, "dataset directory or manifest")->required();
    add_common(sub, c);
    stages[s.name] = sub;
  }

  auto* eval = app.add_subcommand("eval", "compare stored results with ground truth");
  eval->add_option("results", results, "results directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--dataset", dataset, "dataset with ground truth")->required();
  add_common(eval, c, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    set_max_threads(c.threads);
    synth_opt.depth_smoothing.iterations = smooth_iterations;
    if (synth->parsed()) return cmd_synth(c, scene_file, synth_opt, c.frames);
    if (stages["match"]->parsed()) return cmd_match(c, dataset);
    if (stages["light"]->parsed()) return cmd_light(c, dataset);
    if (stages["recover"]->parsed()) return cmd_recover(c, dataset);
    if (stages["integrate"]->parsed()) return cmd_integrate(c, dataset);
    if (stages["pipeline"]->parsed()) return cmd_pipeline(c, dataset);
    if (eval->parsed()) return cmd_eval(c, results, dataset);
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.numerical() ? kExitNumerical : kExitValidation;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitValidation;
}
