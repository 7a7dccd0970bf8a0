#include "rgbdps/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "rgbdps/io.hpp"
#include "rgbdps/jsonio.hpp"

namespace rgbdps::pipeline {

using nlohmann::json;

// ---- dataset ---------------------------------------------------------------

void DatasetManifest::validate() const {
  K.validate();
  RGBDPS_CHECK(!frames.empty(), "manifest: no frames");
  RGBDPS_CHECK(frames[0].pose.is_identity(1e-9), "manifest: frame 0 pose must be the identity");
  for (std::size_t k = 0; k < frames.size(); ++k) {
    const std::string tag = "manifest: frame " + std::to_string(k);
    const FrameEntry& f = frames[k];
    const std::pair<const char*, const fs::path*> files[] = {
        {"color", &f.color}, {"depth", &f.depth}, {"mask", &f.mask}};
    for (const auto& [what, p] : files) {
      RGBDPS_CHECK(!p->empty(), tag + ": no " + what + " file");
      RGBDPS_CHECK(fs::exists(resolve(*p)), tag + ": missing " + what + " file " + resolve(*p).string());
    }
    try {
      f.pose.validate(1e-6);
    } catch (const ValidationError& e) {
      throw ValidationError(tag + ": " + e.what());
    }
  }
  const auto& gt = ground_truth;
  for (const fs::path* p : {&gt.normals, &gt.albedo, &gt.depth, &gt.lighting}) {
    if (!p->empty()) {
      RGBDPS_CHECK(fs::exists(resolve(*p)), "manifest: missing ground-truth file " + resolve(*p).string());
    }
  }
  RGBDPS_CHECK(gt.poses.empty() || gt.poses.size() == frames.size(),
               "manifest: ground-truth poses must cover every frame");
}

DatasetManifest read_manifest(const fs::path& path) {
  const fs::path file = fs::is_directory(path) ? path / "manifest.json" : path;
  const json j = jsonio::read_file(file);
  jsonio::require_keys(j, {"schema_version", "intrinsics", "frames", "ground_truth"}, "manifest");
  RGBDPS_CHECK(j.contains("intrinsics") && j.contains("frames"),
               "manifest: needs 'intrinsics' and 'frames'");
  DatasetManifest m;
  m.root = file.parent_path();
  m.K = jsonio::intrinsics_from_json(j.at("intrinsics"));
  const json& frames = j.at("frames");
  RGBDPS_CHECK(frames.is_array(), "manifest: 'frames' must be an array");
  for (std::size_t k = 0; k < frames.size(); ++k) {
    const std::string where = "manifest: frame " + std::to_string(k);
    const json& fj = frames[k];
    jsonio::require_keys(fj, {"color_path", "depth_path", "mask_path", "R", "T"}, where);
    FrameEntry f;
    std::string color, depth, mask;
    jsonio::read(fj, "color_path", color, where);
    jsonio::read(fj, "depth_path", depth, where);
    jsonio::read(fj, "mask_path", mask, where);
    f.color = color;
    f.depth = depth;
    f.mask = mask;
    f.pose = jsonio::pose_from_json(fj, where);
    m.frames.push_back(f);
  }
  if (j.contains("ground_truth")) {
    const json& g = j.at("ground_truth");
    jsonio::require_keys(g, {"normals_path", "albedo_path", "depth_path", "lighting_path", "poses",
                             "corrupted_frames"},
                         "manifest: ground_truth");
    std::string s;
    auto path_of = [&](const char* key, fs::path& out) {
      s.clear();
      jsonio::read(g, key, s, "manifest: ground_truth");
      out = s;
    };
    path_of("normals_path", m.ground_truth.normals);
    path_of("albedo_path", m.ground_truth.albedo);
    path_of("depth_path", m.ground_truth.depth);
    path_of("lighting_path", m.ground_truth.lighting);
    if (g.contains("poses")) {
      RGBDPS_CHECK(g["poses"].is_array(), "manifest: ground_truth.poses must be an array");
      for (std::size_t k = 0; k < g["poses"].size(); ++k) {
        m.ground_truth.poses.push_back(
            jsonio::pose_from_json(g["poses"][k], "manifest: ground-truth pose " + std::to_string(k)));
      }
    }
    jsonio::read(g, "corrupted_frames", m.ground_truth.corrupted_frames, "manifest: ground_truth");
  }
  m.validate();
  return m;
}

void write_manifest(const fs::path& file, const DatasetManifest& m) {
  json frames = json::array();
  for (const auto& f : m.frames) {
    json fj = jsonio::to_json(f.pose);
    fj["color_path"] = f.color.generic_string();
    fj["depth_path"] = f.depth.generic_string();
    fj["mask_path"] = f.mask.generic_string();
    frames.push_back(fj);
  }
  json j{{"schema_version", 1}, {"intrinsics", jsonio::to_json(m.K)}, {"frames", frames}};
  const auto& gt = m.ground_truth;
  if (!gt.empty() || !gt.poses.empty()) {
    json g = json::object();
    if (!gt.normals.empty()) g["normals_path"] = gt.normals.generic_string();
    if (!gt.albedo.empty()) g["albedo_path"] = gt.albedo.generic_string();
    if (!gt.depth.empty()) g["depth_path"] = gt.depth.generic_string();
    if (!gt.lighting.empty()) g["lighting_path"] = gt.lighting.generic_string();
    if (!gt.poses.empty()) {
      g["poses"] = json::array();
      for (const auto& p : gt.poses) g["poses"].push_back(jsonio::to_json(p));
    }
    g["corrupted_frames"] = gt.corrupted_frames;
    j["ground_truth"] = g;
  }
  jsonio::write_file(file, j);
}

std::vector<int> parse_frame_range(const std::string& spec, int count) {
  RGBDPS_CHECK(count > 0, "frames: dataset has no frames");
  std::vector<int> out;
  if (spec.empty() || spec == "all") {
    out.resize(static_cast<std::size_t>(count));
    std::iota(out.begin(), out.end(), 0);
    return out;
  }
  auto number = [&](const std::string& s) {
    RGBDPS_CHECK(!s.empty() && std::all_of(s.begin(), s.end(), ::isdigit),
                 "frames: bad range '" + spec + "'");
    const int v = std::stoi(s);
    RGBDPS_CHECK(v < count, "frames: index " + s + " beyond the " + std::to_string(count) + " frames");
    return v;
  };
  std::set<int> picked;
  std::stringstream ss(spec);
  std::string part;
  bool single = spec.find_first_of(",-") == std::string::npos;
  if (single) {
    // a bare number is a frame count
    const std::string& s = spec;
    RGBDPS_CHECK(!s.empty() && std::all_of(s.begin(), s.end(), ::isdigit),
                 "frames: bad range '" + spec + "'");
    const int n = std::stoi(s);
    RGBDPS_CHECK(n >= 1 && n <= count, "frames: count must lie in [1, " + std::to_string(count) + "]");
    out.resize(static_cast<std::size_t>(n));
    std::iota(out.begin(), out.end(), 0);
    return out;
  }
  while (std::getline(ss, part, ',')) {
    const auto dash = part.find('-');
    if (dash == std::string::npos) {
      picked.insert(number(part));
    } else {
      const int a = number(part.substr(0, dash)), b = number(part.substr(dash + 1));
      RGBDPS_CHECK(a <= b, "frames: empty range '" + part + "'");
      for (int i = a; i <= b; ++i) picked.insert(i);
    }
  }
  RGBDPS_CHECK(picked.count(0), "frames: the selection must include the reference frame 0");
  return {picked.begin(), picked.end()};
}

namespace {

Image<Vec3> read_color_any(const fs::path& p) {
  const auto ext = p.extension().string();
  if (ext == ".pfm" || ext == ".PFM") return io::read_pfm_rgb(p);
  return io::read_color(p);
}

}  // namespace

Dataset load_dataset(const DatasetManifest& m, const std::vector<int>& selection) {
  std::vector<int> idx = selection;
  if (idx.empty()) {
    idx.resize(m.frames.size());
    std::iota(idx.begin(), idx.end(), 0);
  }
  RGBDPS_CHECK(idx.front() == 0, "dataset: the reference frame 0 must be loaded first");
  Dataset d;
  d.K = m.K;
  const int w = m.K.width, h = m.K.height;
  for (int k : idx) {
    RGBDPS_CHECK(k >= 0 && k < static_cast<int>(m.frames.size()), "dataset: frame index out of range");
    const FrameEntry& f = m.frames[static_cast<std::size_t>(k)];
    const std::string tag = "frame " + std::to_string(k);
    KeyFrame kf;
    kf.index = k;
    kf.pose = f.pose;
    try {
      RGBDPS_CHECK(fs::exists(m.resolve(f.depth)), "missing depth file " + m.resolve(f.depth).string());
      const Mask mask = io::read_pgm_mask(m.resolve(f.mask));
      Image<Vec3> color = read_color_any(m.resolve(f.color));
      Image<double> depth = io::read_pfm_gray(m.resolve(f.depth));
      RGBDPS_CHECK(mask.same_shape(w, h) && color.same_shape(w, h) && depth.same_shape(w, h),
                   "image size does not match the intrinsics");
      kf.image = {std::move(color), mask};
      kf.image.validate();
      Mask dmask = mask;
      for (std::size_t i = 0; i < dmask.size(); ++i) {
        dmask[i] = mask[i] && std::isfinite(depth[i]) && depth[i] > 0.0;
      }
      kf.depth = {std::move(depth), std::move(dmask)};
    } catch (const ValidationError& e) {
      throw ValidationError(tag + ": " + e.what());
    }
    d.frames.push_back(std::move(kf));
  }
  const auto& gt = m.ground_truth;
  const Mask& ref_mask = d.frames[0].image.mask;
  if (!gt.normals.empty()) {
    Image<Vec3> n = io::read_pfm_rgb(m.resolve(gt.normals));
    RGBDPS_CHECK(n.same_shape(w, h), "ground truth: normal map size mismatch");
    Mask mk(w, h, 0);
    for (std::size_t i = 0; i < n.size(); ++i) {
      const double len = n[i].norm();
      if (ref_mask[i] && len > 0.5) {
        n[i] /= len;
        mk[i] = 1;
      }
    }
    d.gt_normals = NormalMap{std::move(n), std::move(mk)};
  }
  if (!gt.albedo.empty()) {
    Image<Vec3> a = io::read_pfm_rgb(m.resolve(gt.albedo));
    RGBDPS_CHECK(a.same_shape(w, h), "ground truth: albedo size mismatch");
    d.gt_albedo = AlbedoMap{std::move(a), ref_mask};
  }
  if (!gt.depth.empty()) {
    Image<double> z = io::read_pfm_gray(m.resolve(gt.depth));
    RGBDPS_CHECK(z.same_shape(w, h), "ground truth: depth size mismatch");
    Mask mk = ref_mask;
    for (std::size_t i = 0; i < mk.size(); ++i) mk[i] = mk[i] && z[i] > 0.0;
    d.gt_depth = DepthMap{std::move(z), std::move(mk)};
  }
  if (!gt.lighting.empty()) d.gt_lighting = lighting_from_json(jsonio::read_file(m.resolve(gt.lighting)));
  if (!gt.poses.empty()) {
    for (int k : idx) d.gt_poses.push_back(gt.poses[static_cast<std::size_t>(k)]);
  }
  return d;
}

// ---- synthetic datasets ----------------------------------------------------

Dataset synthesize(const synth::SyntheticScene& scene, const SynthOptions& opt,
                   std::vector<int>* corrupted) {
  RGBDPS_CHECK(opt.corrupt_frames >= 0, "synth: corrupt_frames must be >= 0");
  RGBDPS_CHECK(opt.sp_density >= 0.0 && opt.sp_density <= 1.0, "synth: sp_density must lie in [0, 1]");
  RGBDPS_CHECK(opt.perturb_pixels >= 0.0, "synth: perturb_pixels must be >= 0");
  const auto rendered = synth::render_sequence(scene);
  const int n = static_cast<int>(rendered.size());
  RGBDPS_CHECK(opt.corrupt_frames <= n - 1, "synth: cannot corrupt more frames than the non-reference ones");

  std::vector<RigidPose> poses = scene.poses;
  if (opt.perturb_pixels > 0.0) {
    const double sigma_t = opt.perturb_pixels * scene.surface.center.z() / scene.K.fx;
    poses = synth::perturb_poses(scene.poses, sigma_t, 0.0, opt.seed);
  }
  // seeded partial shuffle of 1..n-1
  std::vector<int> pool(static_cast<std::size_t>(n - 1));
  std::iota(pool.begin(), pool.end(), 1);
  synth::Random rng(opt.seed ^ 0x5eedc0de5eedc0deULL);
  for (int i = 0; i < opt.corrupt_frames; ++i) {
    const std::size_t j = static_cast<std::size_t>(i) +
                          static_cast<std::size_t>(rng.uniform() * static_cast<double>(pool.size() - i));
    std::swap(pool[static_cast<std::size_t>(i)], pool[std::min(j, pool.size() - 1)]);
  }
  std::vector<int> bad(pool.begin(), pool.begin() + opt.corrupt_frames);
  std::sort(bad.begin(), bad.end());
  if (corrupted) *corrupted = bad;

  Dataset d;
  d.K = scene.K;
  for (int k = 0; k < n; ++k) {
    const auto& r = rendered[static_cast<std::size_t>(k)];
    KeyFrame f;
    f.index = k;
    f.pose = poses[static_cast<std::size_t>(k)];
    f.image = r.image;
    if (std::binary_search(bad.begin(), bad.end(), k)) {
      f.image = synth::corrupt_salt_pepper(r.image, opt.sp_density, opt.seed * 1000003ULL + k);
    }
    f.depth = opt.depth_smoothing.iterations > 0 ? synth::smooth_depth(r.depth, opt.depth_smoothing) : r.depth;
    d.frames.push_back(std::move(f));
  }
  d.gt_normals = rendered[0].normals;
  d.gt_albedo = rendered[0].albedo;
  d.gt_depth = rendered[0].depth;
  d.gt_lighting = scene.lighting;
  d.gt_poses = scene.poses;
  return d;
}

DatasetManifest write_synthetic_dataset(const fs::path& dir, const synth::SyntheticScene& scene,
                                        const SynthOptions& opt) {
  std::vector<int> bad;
  const Dataset d = synthesize(scene, opt, &bad);
  fs::create_directories(dir / "frames");
  fs::create_directories(dir / "gt");
  DatasetManifest m;
  m.K = d.K;
  m.root = dir;
  char name[64];
  for (const auto& f : d.frames) {
    FrameEntry e;
    std::snprintf(name, sizeof name, "frames/color_%02d.pfm", f.index);
    e.color = name;
    io::write_pfm(dir / e.color, f.image.pixels);
    std::snprintf(name, sizeof name, "frames/color_%02d.png", f.index);
    io::write_png(dir / name, f.image.pixels, &f.image.mask);
    std::snprintf(name, sizeof name, "frames/depth_%02d.pfm", f.index);
    e.depth = name;
    Image<double> z = f.depth.depth;
    for (std::size_t i = 0; i < z.size(); ++i) if (!f.depth.mask[i]) z[i] = 0.0;
    io::write_pfm(dir / e.depth, z);
    std::snprintf(name, sizeof name, "frames/mask_%02d.pgm", f.index);
    e.mask = name;
    io::write_pgm_mask(dir / e.mask, f.image.mask);
    e.pose = f.pose;
    m.frames.push_back(e);
  }
  auto& gt = m.ground_truth;
  gt.normals = "gt/normals.pfm";
  gt.albedo = "gt/albedo.pfm";
  gt.depth = "gt/depth.pfm";
  gt.lighting = "gt/lighting.json";
  gt.poses = d.gt_poses;
  gt.corrupted_frames = bad;
  Image<Vec3> nrm = d.gt_normals->normals;
  for (std::size_t i = 0; i < nrm.size(); ++i) if (!d.gt_normals->mask[i]) nrm[i] = Vec3::Zero();
  io::write_pfm(dir / gt.normals, nrm);
  io::write_pfm(dir / gt.albedo, d.gt_albedo->albedo);
  Image<double> z = d.gt_depth->depth;
  for (std::size_t i = 0; i < z.size(); ++i) if (!d.gt_depth->mask[i]) z[i] = 0.0;
  io::write_pfm(dir / gt.depth, z);
  jsonio::write_file(dir / gt.lighting, to_json(scene.lighting));
  json sj = synth::scene_to_json(scene);
  jsonio::write_file(dir / "gt" / "scene.json", sj);
  write_manifest(dir / "manifest.json", m);
  return m;
}

// ---- configuration ---------------------------------------------------------

namespace {

// One visitor per config struct: f(name, member) for every field.
template <typename F>
void visit(match::MatchConfig& c, F&& f) {
  f("patch_radius", c.patch_radius);
  f("search_radius", c.search_radius);
  f("thres_score", c.thres_score);
  f("thres_peak", c.thres_peak);
  f("lattice_spacing", c.lattice_spacing);
  f("lambda", c.lambda);
  f("max_iterations", c.max_iterations);
  f("convergence_px", c.convergence_px);
  f("min_patch_coverage", c.min_patch_coverage);
  f("chromaticity", c.chromaticity);
  f("dark_threshold", c.dark_threshold);
  f("gain_field", c.gain_field);
  f("gain_lambda", c.gain_lambda);
}

template <typename F>
void visit(lightest::LightConfig& c, F&& f) {
  f("tau_dark", c.tau_dark);
  f("max_observations", c.max_observations);
  f("min_observations", c.min_observations);
  f("min_frames", c.min_frames);
  f("max_iterations", c.max_iterations);
  f("min_denominator", c.min_denominator);
  f("min_view_cosine", c.min_view_cosine);
  f("boundary_margin", c.boundary_margin);
  f("seed", c.seed);
}

template <typename F>
void visit(recover::EMConfig& c, F&& f) {
  f("alpha0", c.alpha0);
  f("sigma0", c.sigma0);
  f("C", c.C);
  f("max_iterations", c.max_iterations);
  f("normal_tol_deg", c.normal_tol_deg);
  f("albedo_tol", c.albedo_tol);
  f("sigma_floor", c.sigma_floor);
  f("normal_iterations", c.normal_iterations);
  f("min_frames", c.min_frames);
  f("robust", c.robust);
  f("robust_sigma_init", c.robust_sigma_init);
  f("interior_samples", c.interior_samples);
  f("min_view_cosine", c.min_view_cosine);
  f("restarts", c.restarts);
  f("restart_angle_deg", c.restart_angle_deg);
}

template <typename F>
void visit(integrate::IntegrationConfig& c, F&& f) {
  f("lambda_depth", c.lambda_depth);
  f("tolerance", c.tolerance);
  f("max_iterations", c.max_iterations);
  f("min_view_cosine", c.min_view_cosine);
}

template <typename F>
void visit(synth::SmoothingStrength& c, F&& f) {
  f("iterations", c.iterations);
  f("sigma", c.sigma);
}

template <typename C>
json section_to_json(C c) {
  json j = json::object();
  visit(c, [&](const char* k, const auto& v) { j[k] = v; });
  return j;
}

template <typename C>
void section_from_json(const json& j, C& c, const std::string& where) {
  RGBDPS_CHECK(j.is_object(), "config: " + where + " must be an object");
  std::set<std::string> known;
  visit(c, [&](const char* k, auto&) { known.insert(k); });
  for (const auto& [key, _] : j.items()) {
    RGBDPS_CHECK(known.count(key), "config: unknown key '" + where + "." + key + "'");
  }
  visit(c, [&](const char* k, auto& v) { jsonio::read(j, k, v, "config: " + where); });
}

}  // namespace

void PipelineConfig::validate() const {
  match.validate();
  light.validate();
  em.validate();
  integrate.validate();
  RGBDPS_CHECK(init_smoothing.iterations >= 0 && init_smoothing.sigma >= 0.0,
               "config: init_smoothing must be non-negative");
  RGBDPS_CHECK(mesh_discontinuity > 0.0, "config: mesh_discontinuity must be positive");
}

json config_to_json(const PipelineConfig& c) {
  return {{"match", section_to_json(c.match)},
          {"light", section_to_json(c.light)},
          {"em", section_to_json(c.em)},
          {"integrate", section_to_json(c.integrate)},
          {"init_smoothing", section_to_json(c.init_smoothing)},
          {"correspondences", c.correspondences == CorrespondenceSource::Matched ? "matched" : "rigid"},
          {"lighting", c.lighting == LightingSource::Estimated ? "estimated" : "ground_truth"},
          {"mesh_discontinuity", c.mesh_discontinuity}};
}

PipelineConfig config_from_json(const json& j) {
  jsonio::require_keys(j, {"match", "light", "em", "integrate", "init_smoothing", "correspondences",
                           "lighting", "mesh_discontinuity"},
                       "config");
  PipelineConfig c;
  if (j.contains("match")) section_from_json(j["match"], c.match, "match");
  if (j.contains("light")) section_from_json(j["light"], c.light, "light");
  if (j.contains("em")) section_from_json(j["em"], c.em, "em");
  if (j.contains("integrate")) section_from_json(j["integrate"], c.integrate, "integrate");
  if (j.contains("init_smoothing")) section_from_json(j["init_smoothing"], c.init_smoothing, "init_smoothing");
  std::string s;
  if (j.contains("correspondences")) {
    jsonio::read(j, "correspondences", s, "config");
    RGBDPS_CHECK(s == "matched" || s == "rigid", "config: correspondences must be 'matched' or 'rigid'");
    c.correspondences = s == "matched" ? CorrespondenceSource::Matched : CorrespondenceSource::Rigid;
  }
  if (j.contains("lighting")) {
    jsonio::read(j, "lighting", s, "config");
    RGBDPS_CHECK(s == "estimated" || s == "ground_truth",
                 "config: lighting must be 'estimated' or 'ground_truth'");
    c.lighting = s == "estimated" ? LightingSource::Estimated : LightingSource::GroundTruth;
  }
  jsonio::read(j, "mesh_discontinuity", c.mesh_discontinuity, "config");
  c.validate();
  return c;
}

PipelineConfig read_config(const fs::path& path) { return config_from_json(jsonio::read_file(path)); }

// ---- stages ----------------------------------------------------------------

NormalMap depth_normals(const DepthMap& depth, const CameraIntrinsics& K) {
  return normals_from_depth(depth, K);
}

NormalMap initial_normals(const Dataset& d, const PipelineConfig& cfg) {
  const DepthMap& z = d.frames.at(0).depth;
  if (cfg.init_smoothing.iterations > 0 && cfg.init_smoothing.sigma > 0.0) {
    return normals_from_depth(synth::smooth_depth(z, cfg.init_smoothing), d.K);
  }
  return normals_from_depth(z, d.K);
}

MatchStage run_match(const Dataset& d, const PipelineConfig& cfg) {
  cfg.match.validate();
  RGBDPS_CHECK(!d.frames.empty(), "match: no frames");
  const KeyFrame& ref = d.frames[0];
  MatchStage out;
  out.fields.push_back(match::CorrespondenceField::identity(ref.image.mask));
  out.stats.emplace_back();
  for (std::size_t k = 1; k < d.frames.size(); ++k) {
    const KeyFrame& f = d.frames[k];
    if (cfg.correspondences == CorrespondenceSource::Rigid) {
      out.fields.push_back(match::rigid_correspondences(ref.depth, d.K, f.pose, f.image.mask, &f.depth));
      match::FrameMatchStats st;
      st.reliable = out.fields.back().reliable_count();
      out.stats.push_back(st);
    } else {
      match::FrameMatch fm = match::match_frame(ref.image, ref.depth, d.K, f.pose, f.image, cfg.match);
      out.fields.push_back(std::move(fm.field));
      out.stats.push_back(fm.stats);
    }
  }
  return out;
}

LightStage run_light(const Dataset& d, const MatchStage& m, const PipelineConfig& cfg) {
  LightStage out;
  if (cfg.lighting == LightingSource::GroundTruth) {
    RGBDPS_CHECK(d.gt_lighting.has_value(), "light: the dataset has no ground-truth lighting");
    out.lighting = *d.gt_lighting;
    return out;
  }
  RGBDPS_CHECK(m.fields.size() == d.frames.size(), "light: correspondences do not cover every frame");
  std::vector<NormalMap> normals;
  normals.reserve(d.frames.size());
  for (const auto& f : d.frames) normals.push_back(depth_normals(f.depth, d.K));
  std::vector<lightest::RatioFrame> frames;
  for (std::size_t k = 1; k < d.frames.size(); ++k) {
    frames.push_back({static_cast<int>(k), &d.frames[k].image, &normals[k], &m.fields[k],
                      d.frames[k].pose.R});
  }
  const auto obs = lightest::build_ratio_set(d.frames[0].image, normals[0], d.K, frames, cfg.light);
  std::vector<Vec3> gauge;
  for (std::size_t i = 0; i < normals[0].normals.size(); ++i) {
    if (normals[0].mask[i]) gauge.push_back(normals[0].normals[i]);
  }
  RGBDPS_CHECK(!gauge.empty(), "light: the reference depth yields no normals");
  out.estimate = lightest::estimate_lighting(obs, gauge, cfg.light);
  out.lighting = out.estimate->lighting;
  return out;
}

recover::RecoveredMaps run_recover(const Dataset& d, const MatchStage& m, const QuadraticLighting& L,
                                   const PipelineConfig& cfg) {
  RGBDPS_CHECK(m.fields.size() == d.frames.size(), "recover: correspondences do not cover every frame");
  std::vector<recover::FrameView> views;
  views.push_back({&d.frames[0].image, nullptr, Mat3::Identity()});
  for (std::size_t k = 1; k < d.frames.size(); ++k) {
    views.push_back({&d.frames[k].image, &m.fields[k], d.frames[k].pose.R});
  }
  return recover::recover_map(initial_normals(d, cfg), views, L, d.K, cfg.em);
}

integrate::IntegrationResult run_integrate(const Dataset& d, const recover::RecoveredMaps& r,
                                           const PipelineConfig& cfg) {
  return integrate::integrate_normals(r.normals, d.frames.at(0).depth, r.confidence, d.K, cfg.integrate);
}

// ---- stage artifacts -------------------------------------------------------

namespace {

std::string frame_name(const char* stem, int index, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%02d.%s", stem, index, ext);
  return buf;
}

Image<Vec3> normal_preview(const NormalMap& n) {
  Image<Vec3> img(n.width(), n.height(), Vec3::Zero());
  for (std::size_t i = 0; i < img.size(); ++i) {
    if (n.mask[i]) img[i] = 0.5 * (n.normals[i] + Vec3::Ones());
  }
  return img;
}

json stats_json(const match::FrameMatchStats& s, int frame) {
  return {{"frame", frame},
          {"searched", s.searched},
          {"reliable", s.reliable},
          {"mean_score", s.mean_score},
          {"lattice_iterations", s.lattice_iterations},
          {"lattice_converged", s.lattice_converged},
          {"lattice_fallback", s.lattice_fallback}};
}

json light_json(const LightStage& l) {
  json j{{"source", l.estimate ? "estimated" : "ground_truth"}, {"lighting", to_json(l.lighting)}};
  if (l.estimate) {
    j["observations"] = l.estimate->observations_used;
    j["degenerate_motion"] = l.estimate->degenerate_motion;
    j["objective"] = json::array();
    j["iterations"] = json::array();
    j["converged"] = json::array();
    for (const auto& f : l.estimate->fits) {
      j["objective"].push_back(f.objective);
      j["iterations"].push_back(f.iterations);
      j["converged"].push_back(f.converged);
    }
  }
  return j;
}

json recover_json(const recover::RecoverStats& s) {
  return {{"pixels", s.pixels},
          {"converged", s.converged},
          {"fallback", s.fallback},
          {"mean_iterations", s.mean_iterations},
          {"mean_alpha", s.mean_alpha}};
}

json integrate_json(const integrate::IntegrationResult& r) {
  return {{"iterations", r.iterations},
          {"converged", r.converged},
          {"diverged", r.diverged},
          {"relative_residual", r.relative_residual},
          {"energy_initial", r.energy.empty() ? 0.0 : r.energy.front()},
          {"energy_final", r.energy.empty() ? 0.0 : r.energy.back()}};
}

}  // namespace

void save_match(const fs::path& dir, const Dataset& d, const MatchStage& m) {
  const fs::path sub = dir / "match";
  fs::create_directories(sub);
  json stats = json::array();
  for (std::size_t k = 1; k < m.fields.size(); ++k) {
    const auto& f = m.fields[k];
    const int idx = d.frames[k].index;
    Image<Vec3> q(f.q.width(), f.q.height(), Vec3::Zero());
    for (std::size_t i = 0; i < q.size(); ++i) q[i] = Vec3(f.q[i].x(), f.q[i].y(), f.score[i]);
    io::write_pfm(sub / frame_name("field", idx, "pfm"), q);
    io::write_pgm_mask(sub / frame_name("defined", idx, "pgm"), f.defined);
    io::write_pgm_mask(sub / frame_name("reliable", idx, "pgm"), f.reliable);
    stats.push_back(stats_json(m.stats[k], idx));
  }
  jsonio::write_file(sub / "stats.json", stats);
}

MatchStage load_match(const fs::path& dir, const Dataset& d) {
  const fs::path sub = dir / "match";
  MatchStage m;
  m.fields.push_back(match::CorrespondenceField::identity(d.frames.at(0).image.mask));
  m.stats.emplace_back();
  for (std::size_t k = 1; k < d.frames.size(); ++k) {
    const int idx = d.frames[k].index;
    const Image<Vec3> q = io::read_pfm_rgb(sub / frame_name("field", idx, "pfm"));
    auto f = match::CorrespondenceField::empty(q.width(), q.height());
    RGBDPS_CHECK(q.same_shape(d.K.width, d.K.height), "match: stored field size mismatch");
    for (std::size_t i = 0; i < q.size(); ++i) {
      f.q[i] = Vec2(q[i].x(), q[i].y());
      f.score[i] = q[i].z();
    }
    f.defined = io::read_pgm_mask(sub / frame_name("defined", idx, "pgm"));
    f.reliable = io::read_pgm_mask(sub / frame_name("reliable", idx, "pgm"));
    m.fields.push_back(std::move(f));
    m.stats.emplace_back();
  }
  return m;
}

void save_light(const fs::path& dir, const LightStage& l) {
  fs::create_directories(dir);
  jsonio::write_file(dir / "lighting.json", to_json(l.lighting));
  jsonio::write_file(dir / "light_stats.json", light_json(l));
}

QuadraticLighting load_lighting(const fs::path& dir) {
  return lighting_from_json(jsonio::read_file(dir / "lighting.json"));
}

void save_recover(const fs::path& dir, const recover::RecoveredMaps& r) {
  fs::create_directories(dir);
  Image<Vec3> n = r.normals.normals;
  for (std::size_t i = 0; i < n.size(); ++i) if (!r.normals.mask[i]) n[i] = Vec3::Zero();
  io::write_pfm(dir / "normals.pfm", n);
  io::write_pgm_mask(dir / "normals_mask.pgm", r.normals.mask);
  io::write_png(dir / "normals.png", normal_preview(r.normals), &r.normals.mask);
  io::write_pfm(dir / "albedo.pfm", r.albedo.albedo);
  io::write_pgm_mask(dir / "albedo_mask.pgm", r.albedo.mask);
  io::write_png(dir / "albedo.png", r.albedo.albedo, &r.albedo.mask);
  io::write_pfm(dir / "confidence.pfm", r.confidence);
  jsonio::write_file(dir / "recover_stats.json", recover_json(r.stats));
}

recover::RecoveredMaps load_recover(const fs::path& dir) {
  recover::RecoveredMaps r;
  r.normals.normals = io::read_pfm_rgb(dir / "normals.pfm");
  r.normals.mask = io::read_pgm_mask(dir / "normals_mask.pgm");
  for (std::size_t i = 0; i < r.normals.normals.size(); ++i) {
    if (r.normals.mask[i]) r.normals.normals[i].normalize();
  }
  r.albedo.albedo = io::read_pfm_rgb(dir / "albedo.pfm");
  r.albedo.mask = io::read_pgm_mask(dir / "albedo_mask.pgm");
  r.confidence = io::read_pfm_gray(dir / "confidence.pfm");
  RGBDPS_CHECK(r.normals.mask.same_shape(r.normals.normals) && r.albedo.albedo.same_shape(r.normals.normals) &&
                   r.confidence.same_shape(r.normals.normals),
               "recover: stored maps disagree in size");
  r.iterations = Image<int>(r.normals.width(), r.normals.height(), 0);
  const json s = jsonio::read_file(dir / "recover_stats.json");
  jsonio::read(s, "pixels", r.stats.pixels, "recover_stats");
  jsonio::read(s, "converged", r.stats.converged, "recover_stats");
  jsonio::read(s, "fallback", r.stats.fallback, "recover_stats");
  jsonio::read(s, "mean_iterations", r.stats.mean_iterations, "recover_stats");
  jsonio::read(s, "mean_alpha", r.stats.mean_alpha, "recover_stats");
  return r;
}

void save_integrate(const fs::path& dir, const integrate::IntegrationResult& r, const CameraIntrinsics& K,
                    double mesh_discontinuity) {
  fs::create_directories(dir);
  Image<double> z = r.depth.depth;
  for (std::size_t i = 0; i < z.size(); ++i) if (!r.depth.mask[i]) z[i] = 0.0;
  io::write_pfm(dir / "depth_refined.pfm", z);
  io::write_pgm_mask(dir / "depth_mask.pgm", r.depth.mask);
  io::write_ply(dir / "mesh.ply", integrate::export_mesh(r.depth, K, mesh_discontinuity));
  jsonio::write_file(dir / "integrate_stats.json", integrate_json(r));
}

DepthMap load_refined_depth(const fs::path& dir) {
  DepthMap d{io::read_pfm_gray(dir / "depth_refined.pfm"), io::read_pgm_mask(dir / "depth_mask.pgm")};
  RGBDPS_CHECK(d.mask.same_shape(d.depth), "integrate: stored depth and mask disagree in size");
  return d;
}

// ---- evaluation ------------------------------------------------------------

EvalReport evaluate(const NormalMap& normals, const NormalMap& gt_normals, const AlbedoMap* albedo,
                    const AlbedoMap* gt_albedo, const DepthMap* depth, const DepthMap* gt_depth,
                    const DepthMap* prior_depth) {
  const int w = gt_normals.width(), h = gt_normals.height();
  RGBDPS_CHECK(normals.normals.same_shape(w, h), "eval: normal map size differs from the ground truth");
  EvalReport r;
  r.mask = Mask(w, h, 0);
  r.normal_error = Image<double>(w, h, 0.0);
  std::vector<double> errs;
  for (std::size_t i = 0; i < r.mask.size(); ++i) {
    if (!normals.mask[i] || !gt_normals.mask[i]) continue;
    r.mask[i] = 1;
    r.normal_error[i] = angle_deg(normals.normals[i], gt_normals.normals[i]);
    errs.push_back(r.normal_error[i]);
  }
  RGBDPS_CHECK(!errs.empty(), "eval: the estimate and the ground truth share no pixels");
  r.pixels = errs.size();
  r.normal_mean_deg = std::accumulate(errs.begin(), errs.end(), 0.0) / static_cast<double>(errs.size());
  {
    std::vector<double> e = errs;
    const std::size_t mid = e.size() / 2;
    std::nth_element(e.begin(), e.begin() + static_cast<std::ptrdiff_t>(mid), e.end());
    const double hi = e[mid];
    if (e.size() % 2 == 1) {
      r.normal_median_deg = hi;
    } else {
      const double lo = *std::max_element(e.begin(), e.begin() + static_cast<std::ptrdiff_t>(mid));
      r.normal_median_deg = 0.5 * (lo + hi);
    }
  }
  if (albedo && gt_albedo) {
    RGBDPS_CHECK(albedo->albedo.same_shape(w, h) && gt_albedo->albedo.same_shape(w, h),
                 "eval: albedo size differs from the ground truth");
    Vec3 ab = Vec3::Zero(), aa = Vec3::Zero(), bb = Vec3::Zero();
    for (std::size_t i = 0; i < r.mask.size(); ++i) {
      if (!r.mask[i] || !albedo->mask[i] || !gt_albedo->mask[i]) continue;
      const Vec3& a = albedo->albedo[i];
      const Vec3& b = gt_albedo->albedo[i];
      ab += a.cwiseProduct(b);
      aa += a.cwiseAbs2();
      bb += b.cwiseAbs2();
    }
    Vec3 s;
    for (int c = 0; c < 3; ++c) s[c] = aa[c] > 0.0 ? ab[c] / aa[c] : 0.0;
    Vec3 res = Vec3::Zero();
    r.albedo_error = Image<double>(w, h, 0.0);
    for (std::size_t i = 0; i < r.mask.size(); ++i) {
      if (!r.mask[i] || !albedo->mask[i] || !gt_albedo->mask[i]) continue;
      const Vec3 d = s.cwiseProduct(albedo->albedo[i]) - gt_albedo->albedo[i];
      res += d.cwiseAbs2();
      r.albedo_error[i] = d.norm();
    }
    Vec3 rel;
    for (int c = 0; c < 3; ++c) rel[c] = bb[c] > 0.0 ? std::sqrt(res[c] / bb[c]) : 0.0;
    r.albedo_scale = s;
    r.albedo_rel_rms = rel;
  }
  if (depth && gt_depth) {
    RGBDPS_CHECK(depth->depth.same_shape(w, h) && gt_depth->depth.same_shape(w, h),
                 "eval: depth size differs from the ground truth");
    r.depth_error = Image<double>(w, h, 0.0);
    double sq = 0.0, sq_prior = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < r.mask.size(); ++i) {
      if (!depth->mask[i] || !gt_depth->mask[i]) continue;
      if (prior_depth && !prior_depth->mask[i]) continue;
      const double e = depth->depth[i] - gt_depth->depth[i];
      r.depth_error[i] = std::abs(e);
      sq += e * e;
      if (prior_depth) sq_prior += std::pow(prior_depth->depth[i] - gt_depth->depth[i], 2);
      ++n;
    }
    RGBDPS_CHECK(n > 0, "eval: depth maps share no pixels");
    r.depth_rmse = std::sqrt(sq / static_cast<double>(n));
    if (prior_depth) r.prior_depth_rmse = std::sqrt(sq_prior / static_cast<double>(n));
  }
  return r;
}

json report_to_json(const EvalReport& r) {
  json j{{"pixels", r.pixels}, {"normal_mean_deg", r.normal_mean_deg}, {"normal_median_deg", r.normal_median_deg}};
  if (r.albedo_rel_rms) {
    j["albedo_rel_rms"] = jsonio::to_json(*r.albedo_rel_rms);
    j["albedo_scale"] = jsonio::to_json(*r.albedo_scale);
  }
  if (r.depth_rmse) j["depth_rmse"] = *r.depth_rmse;
  if (r.prior_depth_rmse) j["prior_depth_rmse"] = *r.prior_depth_rmse;
  return j;
}

void save_report(const fs::path& dir, const EvalReport& r) {
  fs::create_directories(dir);
  std::ofstream csv(dir / "eval.csv");
  RGBDPS_CHECK(csv.good(), "eval: cannot write " + (dir / "eval.csv").string());
  csv.precision(10);
  csv << "metric,value\n";
  csv << "pixels," << r.pixels << "\n";
  csv << "normal_mean_deg," << r.normal_mean_deg << "\n";
  csv << "normal_median_deg," << r.normal_median_deg << "\n";
  if (r.albedo_rel_rms) {
    const char* ch[] = {"r", "g", "b"};
    for (int c = 0; c < 3; ++c) csv << "albedo_rel_rms_" << ch[c] << "," << (*r.albedo_rel_rms)[c] << "\n";
  }
  if (r.depth_rmse) csv << "depth_rmse_m," << *r.depth_rmse << "\n";
  if (r.prior_depth_rmse) csv << "prior_depth_rmse_m," << *r.prior_depth_rmse << "\n";
  io::write_error_png(dir / "error_normals.png", r.normal_error, r.mask, 10.0);
  if (!r.albedo_error.empty()) io::write_error_png(dir / "error_albedo.png", r.albedo_error, r.mask, 0.1);
  if (!r.depth_error.empty()) io::write_error_png(dir / "error_depth.png", r.depth_error, r.mask, 0.005);
}

Vec3 shading_error(const QuadraticLighting& est, const QuadraticLighting& truth, const NormalMap& normals) {
  Vec3 out;
  for (int ch = 0; ch < 3; ++ch) {
    double ab = 0.0, aa = 0.0;
    for (std::size_t i = 0; i < normals.normals.size(); ++i) {
      if (!normals.mask[i]) continue;
      const double a = shade(est, normals.normals[i], ch), b = shade(truth, normals.normals[i], ch);
      ab += a * b;
      aa += a * a;
    }
    const double s = aa > 0.0 ? ab / aa : 0.0;
    double e = 0.0, g = 0.0;
    for (std::size_t i = 0; i < normals.normals.size(); ++i) {
      if (!normals.mask[i]) continue;
      const double a = shade(est, normals.normals[i], ch), b = shade(truth, normals.normals[i], ch);
      e += (s * a - b) * (s * a - b);
      g += b * b;
    }
    out[ch] = g > 0.0 ? std::sqrt(e / g) : 0.0;
  }
  return out;
}

std::optional<double> match_median_error(const Dataset& d, const MatchStage& m) {
  if (d.gt_poses.size() != d.frames.size() || m.fields.size() != d.frames.size()) return std::nullopt;
  const DepthMap& ref_depth = d.gt_depth ? *d.gt_depth : d.frames[0].depth;
  std::vector<double> e;
  for (std::size_t k = 1; k < d.frames.size(); ++k) {
    const auto gt = match::rigid_correspondences(ref_depth, d.K, d.gt_poses[k], d.frames[k].image.mask,
                                                 &d.frames[k].depth);
    const auto& f = m.fields[k];
    for (std::size_t i = 0; i < gt.q.size(); ++i) {
      if (gt.defined[i] && f.defined[i]) e.push_back((gt.q[i] - f.q[i]).norm());
    }
  }
  if (e.empty()) return std::nullopt;
  const auto mid = e.begin() + static_cast<std::ptrdiff_t>(e.size() / 2);
  std::nth_element(e.begin(), mid, e.end());
  return *mid;
}

// ---- whole run -------------------------------------------------------------

PipelineRun run_pipeline(const Dataset& d, const PipelineConfig& cfg, const fs::path& out) {
  cfg.validate();
  PipelineRun run;
  json& mj = run.metrics;
  mj = {{"schema_version", kMetricsSchemaVersion}};
  {
    json frames = json::array();
    for (const auto& f : d.frames) frames.push_back(f.index);
    mj["dataset"] = {{"frames", frames}, {"width", d.K.width}, {"height", d.K.height}};
  }
  mj["config"] = config_to_json(cfg);
  const bool write = !out.empty();
  if (write) fs::create_directories(out);
  auto flush = [&] {
    if (write) jsonio::write_file(out / "metrics.json", mj);
  };
  try {
    run.match = run_stage("match", [&] { return run_match(d, cfg); });
    {
      json st = json::array();
      for (std::size_t k = 1; k < run.match.stats.size(); ++k) st.push_back(stats_json(run.match.stats[k], d.frames[k].index));
      mj["match"] = {{"source", cfg.correspondences == CorrespondenceSource::Matched ? "matched" : "rigid"},
                     {"frames", st}};
      if (const auto e = match_median_error(d, run.match)) mj["match"]["median_endpoint_error_px"] = *e;
    }
    if (write) run_stage("match", [&] { save_match(out, d, run.match); });

    run.light = run_stage("light", [&] { return run_light(d, run.match, cfg); });
    mj["light"] = light_json(run.light);
    if (d.gt_lighting && d.gt_normals) {
      mj["light"]["shading_rel_rms"] = jsonio::to_json(shading_error(run.light.lighting, *d.gt_lighting, *d.gt_normals));
    }
    if (write) run_stage("light", [&] { save_light(out, run.light); });

    run.recovered = run_stage("recover", [&] { return run_recover(d, run.match, run.light.lighting, cfg); });
    mj["recover"] = recover_json(run.recovered.stats);
    if (write) run_stage("recover", [&] { save_recover(out, run.recovered); });

    run.integrated = run_stage("integrate", [&] { return run_integrate(d, run.recovered, cfg); });
    mj["integrate"] = integrate_json(run.integrated);
    if (write) run_stage("integrate", [&] { save_integrate(out, run.integrated, d.K, cfg.mesh_discontinuity); });

    if (d.gt_normals) {
      run.report = run_stage("eval", [&] {
        return evaluate(run.recovered.normals, *d.gt_normals, &run.recovered.albedo,
                        d.gt_albedo ? &*d.gt_albedo : nullptr, &run.integrated.depth,
                        d.gt_depth ? &*d.gt_depth : nullptr, &d.frames[0].depth);
      });
      mj["eval"] = report_to_json(*run.report);
      if (write) run_stage("eval", [&] { save_report(out, *run.report); });
    }
    mj["status"] = "ok";
  } catch (const StageError& e) {
    mj["status"] = "failed";
    mj["failed_stage"] = e.stage();
    mj["error"] = e.what();
    flush();
    throw;
  }
  flush();
  return run;
}

}  // namespace rgbdps::pipeline
