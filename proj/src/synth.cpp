#include "rgbdps/synth.hpp"

#include <cmath>
#include <numbers>

#include <nlohmann/json.hpp>

#include "rgbdps/jsonio.hpp"
#include "rgbdps/parallel.hpp"

namespace rgbdps::synth {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t cell_hash(const Eigen::Vector3i& c, std::uint64_t seed) {
  std::uint64_t h = splitmix(seed);
  for (int i = 0; i < 3; ++i) h = splitmix(h ^ static_cast<std::uint64_t>(c[i] + 0x40000000LL));
  return h;
}

const std::array<Vec3, 8> kPalette = {
    Vec3(0.68, 0.22, 0.18), Vec3(0.19, 0.54, 0.26), Vec3(0.21, 0.29, 0.68),
    Vec3(0.67, 0.59, 0.18), Vec3(0.56, 0.24, 0.59), Vec3(0.21, 0.59, 0.62),
    Vec3(0.70, 0.44, 0.21), Vec3(0.46, 0.46, 0.46)};

double smoothstep(double e0, double e1, double x) {
  if (e1 <= e0) return x < e0 ? 0.0 : 1.0;
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

// Blends a per-cell value over the 2x2x2 neighbouring cells with transition
// bands of width `softness` (in cell units) centred on cell boundaries.
template <typename T, typename CellFn>
T blend_cells(const Vec3& p, double softness, CellFn&& cell_value) {
  Eigen::Vector3i base;
  Eigen::Vector3i other;
  Vec3 w_other;
  const double half = 0.5 * softness;
  for (int i = 0; i < 3; ++i) {
    const double f = std::floor(p[i]);
    const double t = p[i] - f;
    base[i] = static_cast<int>(f);
    if (t < 0.5) {
      other[i] = base[i] - 1;
      w_other[i] = 1.0 - smoothstep(-half, half, t);
    } else {
      other[i] = base[i] + 1;
      w_other[i] = smoothstep(-half, half, t - 1.0);
    }
  }
  T acc = T{};
  bool first = true;
  for (int corner = 0; corner < 8; ++corner) {
    double w = 1.0;
    Eigen::Vector3i idx;
    for (int i = 0; i < 3; ++i) {
      const bool use_other = (corner >> i) & 1;
      w *= use_other ? w_other[i] : 1.0 - w_other[i];
      idx[i] = use_other ? other[i] : base[i];
    }
    if (w == 0.0) continue;
    if (first) {
      acc = w * cell_value(idx);
      first = false;
    } else {
      acc += w * cell_value(idx);
    }
  }
  return acc;
}

struct Hit {
  double depth;   // frame-k z-depth
  Vec3 point;     // object frame
  Vec3 normal;    // object frame, outward
};

double displacement(const SurfaceSpec& s, const Vec3& u) {
  return s.amplitude * std::sin(s.frequency * u.x()) * std::sin(s.frequency * u.y());
}

Vec3 bumpy_normal(const SurfaceSpec& s, const Vec3& x) {
  const Vec3 d = x - s.center;
  const double r = d.norm();
  const Vec3 u = d / r;
  const double f = s.frequency;
  const Vec3 grad_h = s.amplitude * f *
                      Vec3(std::cos(f * u.x()) * std::sin(f * u.y()),
                           std::sin(f * u.x()) * std::cos(f * u.y()), 0.0);
  const Vec3 tangential = grad_h - u * u.dot(grad_h);
  return (u - tangential / r).normalized();
}

bool sphere_interval(const Vec3& o, const Vec3& dir, const Vec3& c, double r,
                     double& t0, double& t1) {
  const Vec3 oc = o - c;
  const double a = dir.squaredNorm();
  const double b = 2.0 * dir.dot(oc);
  const double cc = oc.squaredNorm() - r * r;
  const double disc = b * b - 4.0 * a * cc;
  if (disc < 0.0) return false;
  const double sq = std::sqrt(disc);
  t0 = (-b - sq) / (2.0 * a);
  t1 = (-b + sq) / (2.0 * a);
  return t1 > 0.0;
}

// `dir` has unit z in the frame camera, so the ray parameter equals z-depth.
std::optional<Hit> intersect(const SurfaceSpec& s, const Vec3& o, const Vec3& dir,
                             const Vec3& view_dir_obj) {
  switch (s.kind) {
    case SurfaceKind::Sphere: {
      double t0, t1;
      if (!sphere_interval(o, dir, s.center, s.radius, t0, t1) || t0 <= 0.0) return std::nullopt;
      const Vec3 x = o + t0 * dir;
      return Hit{t0, x, (x - s.center).normalized()};
    }
    case SurfaceKind::BumpySphere: {
      const double a = std::abs(s.amplitude);
      double t0, t1;
      if (!sphere_interval(o, dir, s.center, s.radius + a + 1e-9, t0, t1) || t0 <= 0.0) {
        return std::nullopt;
      }
      auto F = [&](double t) {
        const Vec3 d = o + t * dir - s.center;
        const double r = d.norm();
        return r - s.radius - displacement(s, d / r);
      };
      const double step = std::max(a, 1e-4) * 0.1 / dir.norm();
      double lo = t0, flo = F(t0);
      double hi = lo;
      bool found = false;
      for (double t = t0 + step; t <= t1; t += step) {
        const double ft = F(t);
        if (ft <= 0.0) {
          hi = t;
          found = true;
          break;
        }
        lo = t;
        flo = ft;
      }
      if (!found) return std::nullopt;
      (void)flo;
      for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (lo + hi);
        (F(mid) > 0.0 ? lo : hi) = mid;
      }
      const double t = 0.5 * (lo + hi);
      const Vec3 x = o + t * dir;
      return Hit{t, x, bumpy_normal(s, x)};
    }
    case SurfaceKind::Plane: {
      const Vec3 n = s.plane_normal.normalized();
      const double denom = n.dot(dir);
      if (std::abs(denom) < 1e-12 || n.dot(view_dir_obj) >= 0.0) return std::nullopt;
      const double t = n.dot(s.center - o) / denom;
      if (t <= 0.0) return std::nullopt;
      const Vec3 x = o + t * dir;
      const Vec3 e1 = n.unitOrthogonal();
      const Vec3 e2 = n.cross(e1);
      const Vec3 d = x - s.center;
      if (std::abs(d.dot(e1)) > s.plane_half_extent || std::abs(d.dot(e2)) > s.plane_half_extent) {
        return std::nullopt;
      }
      return Hit{t, x, n};
    }
  }
  return std::nullopt;
}

}  // namespace

std::uint64_t Random::next() {
  state_ += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Random::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

double Random::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Vec3 AlbedoSpec::evaluate(const Vec3& local) const {
  auto patch = [&](const Eigen::Vector3i& c) {
    return kPalette[cell_hash(c, seed) % kPalette.size()];
  };
  auto parity = [](const Eigen::Vector3i& c) {
    return ((c[0] + c[1] + c[2]) & 1) ? 1.0 : -1.0;
  };
  switch (kind) {
    case AlbedoKind::Constant:
      return base;
    case AlbedoKind::Checker: {
      const double v = blend_cells<double>(local / checker_size, softness, parity);
      return checker_a + 0.5 * (1.0 + v) * (checker_b - checker_a);
    }
    case AlbedoKind::Patches:
      return blend_cells<Vec3>(local / patch_size, softness, patch);
    case AlbedoKind::CheckerPatches: {
      const Vec3 color = blend_cells<Vec3>(local / patch_size, softness, patch);
      const double v = blend_cells<double>(local / checker_size, softness, parity);
      return color.cwiseProduct(Vec3::Ones() + checker_contrast * v * checker_tint);
    }
  }
  return base;
}

void SyntheticScene::validate() const {
  K.validate();
  lighting.validate();
  RGBDPS_CHECK(!poses.empty(), "scene: no poses");
  RGBDPS_CHECK(poses.front().is_identity(1e-12), "scene: poses[0] must be the identity");
  for (const auto& p : poses) p.validate();
  RGBDPS_CHECK(surface.radius > 0.0, "scene: radius must be positive");
  RGBDPS_CHECK(std::abs(surface.amplitude) < surface.radius, "scene: displacement too large");
  RGBDPS_CHECK(albedo.softness >= 0.0 && albedo.softness <= 1.0, "scene: softness outside [0, 1]");
}

std::vector<RigidPose> orbit_poses(const Vec3& center, const Vec3& axis, double step_deg,
                                   int count) {
  RGBDPS_CHECK(count >= 1, "orbit_poses: need at least one pose");
  std::vector<RigidPose> poses;
  const Vec3 a = axis.normalized();
  for (int k = 0; k < count; ++k) {
    RigidPose p;
    p.R = k == 0 ? Mat3::Identity()
                 : Eigen::AngleAxisd(k * step_deg * kDeg, a).toRotationMatrix();
    p.T = k == 0 ? Vec3::Zero() : Vec3(center - p.R * center);
    poses.push_back(p);
  }
  return poses;
}

SyntheticScene default_scene() {
  SyntheticScene scene;
  scene.K = {150.0, 150.0, 63.5, 63.5, 128, 128};
  scene.lighting = lighting_from_environment(DirectionalEnvironment{});
  scene.poses = orbit_poses(scene.surface.center, Vec3(0.25, 1.0, 0.15), 3.0, 20);
  return scene;
}

std::vector<RenderedFrame> render_sequence(const SyntheticScene& scene) {
  scene.validate();
  const auto& K = scene.K;
  const int w = K.width, h = K.height;
  std::vector<RenderedFrame> frames(scene.poses.size());
  for (std::size_t k = 0; k < scene.poses.size(); ++k) {
    const RigidPose& pose = scene.poses[k];
    const RigidPose inv = pose.inverse();
    const QuadraticLighting& L = scene.lighting;
    RenderedFrame& f = frames[k];
    f.image = {Image<Vec3>(w, h, Vec3::Zero()), Mask(w, h, 0)};
    f.depth = {Image<double>(w, h, 0.0), Mask(w, h, 0)};
    f.normals = {Image<Vec3>(w, h, Vec3::Zero()), Mask(w, h, 0)};
    f.albedo = {Image<Vec3>(w, h, Vec3::Zero()), Mask(w, h, 0)};
    parallel_for(static_cast<std::size_t>(h), [&](std::size_t row) {
      const int v = static_cast<int>(row);
      for (int u = 0; u < w; ++u) {
        const Vec3 ray_k = K.ray(Vec2(u, v));
        const Vec3 dir = inv.R * ray_k;
        const auto hit = intersect(scene.surface, inv.T, dir, dir);
        if (!hit) continue;
        const Vec3 n_k = pose.R * hit->normal;
        const Vec3 rho = scene.albedo.evaluate(hit->point - scene.surface.center);
        f.depth.depth(u, v) = hit->depth;
        f.normals.normals(u, v) = n_k;
        f.albedo.albedo(u, v) = rho;
        f.image.pixels(u, v) = rho.cwiseProduct(shade_rgb(L, n_k));
        f.depth.mask(u, v) = f.normals.mask(u, v) = f.albedo.mask(u, v) = f.image.mask(u, v) = 1;
      }
    });
    bool touches = false;
    for (int u = 0; u < w; ++u) touches |= f.depth.mask(u, 0) || f.depth.mask(u, h - 1);
    for (int v = 0; v < h; ++v) touches |= f.depth.mask(0, v) || f.depth.mask(w - 1, v);
    if (touches || count_set(f.depth.mask) == 0) {
      throw SurfaceOutOfFrustum("surface leaves the frustum in frame " + std::to_string(k));
    }
  }
  return frames;
}

DepthMap smooth_depth(const DepthMap& d, const SmoothingStrength& strength) {
  if (strength.iterations <= 0 || strength.sigma <= 0.0) return d;
  const int w = d.width(), h = d.height();
  const int radius = static_cast<int>(std::ceil(3.0 * strength.sigma));
  std::vector<double> kernel(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * i * i / (strength.sigma * strength.sigma));
  }
  DepthMap out = d;
  Image<double> tmp(w, h, 0.0);
  for (int it = 0; it < strength.iterations; ++it) {
    // Normalised convolution: only masked samples contribute.
    for (int v = 0; v < h; ++v) {
      for (int u = 0; u < w; ++u) {
        if (!d.mask(u, v)) continue;
        double acc = 0.0, wsum = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const int uu = u + i;
          if (uu < 0 || uu >= w || !d.mask(uu, v)) continue;
          acc += kernel[i + radius] * out.depth(uu, v);
          wsum += kernel[i + radius];
        }
        tmp(u, v) = acc / wsum;
      }
    }
    for (int v = 0; v < h; ++v) {
      for (int u = 0; u < w; ++u) {
        if (!d.mask(u, v)) continue;
        double acc = 0.0, wsum = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const int vv = v + i;
          if (vv < 0 || vv >= h || !d.mask(u, vv)) continue;
          acc += kernel[i + radius] * tmp(u, vv);
          wsum += kernel[i + radius];
        }
        out.depth(u, v) = acc / wsum;
      }
    }
  }
  return out;
}

RadianceImage corrupt_salt_pepper(const RadianceImage& img, double density,
                                  std::uint64_t seed) {
  RGBDPS_CHECK(density >= 0.0 && density <= 1.0, "salt and pepper density outside [0, 1]");
  RadianceImage out = img;
  Random rng(seed);
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    if (!out.mask[i]) continue;
    const double hit = rng.uniform();
    const double salt = rng.uniform();
    if (hit < density) out.pixels[i] = Vec3::Constant(salt < 0.5 ? 0.0 : 1.0);
  }
  return out;
}

std::vector<RigidPose> perturb_poses(const std::vector<RigidPose>& poses, double sigma_t,
                                     double sigma_r, std::uint64_t seed) {
  RGBDPS_CHECK(sigma_t >= 0.0 && sigma_r >= 0.0, "perturbation sigmas must be non-negative");
  std::vector<RigidPose> out = poses;
  if (sigma_t == 0.0 && sigma_r == 0.0) return out;
  Random rng(seed);
  for (std::size_t k = 1; k < out.size(); ++k) {
    const Vec3 dt(rng.normal(), rng.normal(), rng.normal());
    const Vec3 dr(rng.normal(), rng.normal(), rng.normal());
    const Vec3 omega = sigma_r * dr;
    const double angle = omega.norm();
    const Mat3 dR = angle > 0.0
                        ? Eigen::AngleAxisd(angle, omega / angle).toRotationMatrix()
                        : Mat3::Identity();
    out[k].R = dR * out[k].R;
    out[k].T += sigma_t * dt;
  }
  return out;
}

namespace {

nlohmann::json vec_json(const Vec3& v) { return {v[0], v[1], v[2]}; }

Vec3 json_vec(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  RGBDPS_CHECK(v.size() == 3, "scene json: expected a 3-vector");
  return {v[0], v[1], v[2]};
}

const std::pair<const char*, SurfaceKind> kSurfaceNames[] = {
    {"sphere", SurfaceKind::Sphere},
    {"bumpy_sphere", SurfaceKind::BumpySphere},
    {"plane", SurfaceKind::Plane}};
const std::pair<const char*, AlbedoKind> kAlbedoNames[] = {
    {"constant", AlbedoKind::Constant},
    {"checker", AlbedoKind::Checker},
    {"patches", AlbedoKind::Patches},
    {"checker_patches", AlbedoKind::CheckerPatches}};

template <typename E, std::size_t N>
const char* enum_name(const std::pair<const char*, E> (&names)[N], E e) {
  for (const auto& [n, v] : names) if (v == e) return n;
  return "";
}

template <typename E, std::size_t N>
E enum_value(const std::pair<const char*, E> (&names)[N], const std::string& s) {
  for (const auto& [n, v] : names) if (s == n) return v;
  throw ValidationError("scene json: unknown kind '" + s + "'");
}

}  // namespace

nlohmann::json scene_to_json(const SyntheticScene& scene) {
  const auto& s = scene.surface;
  const auto& a = scene.albedo;
  return {
      {"surface",
       {{"kind", enum_name(kSurfaceNames, s.kind)},
        {"center", vec_json(s.center)},
        {"radius", s.radius},
        {"amplitude", s.amplitude},
        {"frequency", s.frequency},
        {"plane_normal", vec_json(s.plane_normal)},
        {"plane_half_extent", s.plane_half_extent}}},
      {"albedo",
       {{"kind", enum_name(kAlbedoNames, a.kind)},
        {"base", vec_json(a.base)},
        {"checker_a", vec_json(a.checker_a)},
        {"checker_b", vec_json(a.checker_b)},
        {"patch_size", a.patch_size},
        {"checker_size", a.checker_size},
        {"checker_contrast", a.checker_contrast},
        {"checker_tint", vec_json(a.checker_tint)},
        {"softness", a.softness},
        {"seed", a.seed}}},
  };
}

SyntheticScene scene_from_json(const nlohmann::json& j) {
  SyntheticScene scene = default_scene();
  try {
    jsonio::require_keys(j, {"surface", "albedo", "frames", "step_deg", "axis", "environment"},
                         "scene json");
    if (j.contains("surface")) {
      const auto& s = j["surface"];
      jsonio::require_keys(s, {"kind", "center", "radius", "amplitude", "frequency", "plane_normal",
                               "plane_half_extent"},
                           "scene json: surface");
      auto& out = scene.surface;
      if (s.contains("kind")) out.kind = enum_value(kSurfaceNames, s["kind"].get<std::string>());
      if (s.contains("center")) out.center = json_vec(s["center"]);
      out.radius = s.value("radius", out.radius);
      out.amplitude = s.value("amplitude", out.amplitude);
      out.frequency = s.value("frequency", out.frequency);
      if (s.contains("plane_normal")) out.plane_normal = json_vec(s["plane_normal"]);
      out.plane_half_extent = s.value("plane_half_extent", out.plane_half_extent);
    }
    if (j.contains("albedo")) {
      const auto& a = j["albedo"];
      jsonio::require_keys(a, {"kind", "base", "checker_a", "checker_b", "patch_size", "checker_size",
                               "checker_contrast", "checker_tint", "softness", "seed"},
                           "scene json: albedo");
      auto& out = scene.albedo;
      if (a.contains("kind")) out.kind = enum_value(kAlbedoNames, a["kind"].get<std::string>());
      if (a.contains("base")) out.base = json_vec(a["base"]);
      if (a.contains("checker_a")) out.checker_a = json_vec(a["checker_a"]);
      if (a.contains("checker_b")) out.checker_b = json_vec(a["checker_b"]);
      out.patch_size = a.value("patch_size", out.patch_size);
      out.checker_size = a.value("checker_size", out.checker_size);
      out.checker_contrast = a.value("checker_contrast", out.checker_contrast);
      if (a.contains("checker_tint")) out.checker_tint = json_vec(a["checker_tint"]);
      out.softness = a.value("softness", out.softness);
      out.seed = a.value("seed", out.seed);
    }
    if (j.contains("environment")) {
      const auto& e = j["environment"];
      jsonio::require_keys(e, {"direction", "sun", "sky", "exponent"}, "scene json: environment");
      DirectionalEnvironment env;
      if (e.contains("direction")) env.direction = json_vec(e["direction"]);
      if (e.contains("sun")) env.sun = json_vec(e["sun"]);
      if (e.contains("sky")) env.sky = json_vec(e["sky"]);
      env.exponent = e.value("exponent", env.exponent);
      scene.lighting = lighting_from_environment(env);
    }
    const int frames = j.value("frames", static_cast<int>(scene.poses.size()));
    const double step = j.value("step_deg", 3.0);
    const Vec3 axis = j.contains("axis") ? json_vec(j["axis"]) : Vec3(0.25, 1.0, 0.15);
    scene.poses = orbit_poses(scene.surface.center, axis, step, frames);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("scene json: ") + e.what());
  }
  scene.validate();
  return scene;
}

}  // namespace rgbdps::synth
