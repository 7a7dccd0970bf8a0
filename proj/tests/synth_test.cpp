#include <cmath>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "rgbdps/synth.hpp"

namespace rgbdps::synth {
namespace {

constexpr double kDeg = 3.14159265358979323846 / 180.0;

SyntheticScene SmallScene(int frames = 3) {
  SyntheticScene s = default_scene();
  s.K = {75.0, 75.0, 32.0, 32.0, 64, 64};
  s.poses = orbit_poses(s.surface.center, Vec3(0.2, 1.0, 0.1), 4.0, frames);
  return s;
}

TEST(RenderSequence, FrameZeroIsTheForwardModel) {
  const SyntheticScene s = SmallScene(1);
  const auto fr = render_sequence(s);
  ASSERT_EQ(fr.size(), 1u);
  const auto& f = fr[0];
  std::size_t n = 0;
  for (std::size_t i = 0; i < f.image.pixels.size(); ++i) {
    if (!f.image.mask[i]) continue;
    ++n;
    const Vec3 expect = f.albedo.albedo[i].cwiseProduct(shade_rgb(s.lighting, f.normals.normals[i]));
    EXPECT_EQ(f.image.pixels[i], expect);
  }
  EXPECT_GT(n, 1000u);
}

TEST(RenderSequence, AmbientLightGivesAlbedoTimesConstant) {
  SyntheticScene s = SmallScene(3);
  s.lighting = QuadraticLighting::ambient();
  const auto fr = render_sequence(s);
  for (const auto& f : fr) {
    for (std::size_t i = 0; i < f.image.pixels.size(); ++i) {
      if (!f.image.mask[i]) continue;
      EXPECT_LT((f.image.pixels[i] - f.albedo.albedo[i]).cwiseAbs().maxCoeff(), 1e-15);
    }
  }
}

TEST(RenderSequence, GroundTruthNormalsAreUnitAndMatchDepth) {
  const SyntheticScene s = default_scene();
  SyntheticScene one = s;
  one.poses.resize(1);
  const auto fr = render_sequence(one);
  const NormalMap fromDepth = normals_from_depth(fr[0].depth, s.K);
  const Mask interior = erode(fr[0].depth.mask, 3);
  double err = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < interior.size(); ++i) {
    if (!fr[0].normals.mask[i]) continue;
    EXPECT_NEAR(fr[0].normals.normals[i].norm(), 1.0, 1e-12);
    if (!interior[i] || !fromDepth.mask[i]) continue;
    err += angle_deg(fromDepth.normals[i], fr[0].normals.normals[i]);
    ++n;
  }
  ASSERT_GT(n, 5000);
  EXPECT_LT(err / n, 1.0);
}

// Rotating a sphere about the optical axis through its center by 90 deg
// maps the pixel grid onto itself when the principal point is a pixel, so
// both sides of the ratio identity are available without interpolation.
TEST(RenderSequence, RatioIdentityAtCorrespondingPixels) {
  SyntheticScene s;
  s.K = {90.0, 90.0, 32.0, 32.0, 65, 65};
  s.surface.kind = SurfaceKind::Sphere;
  s.surface.center = Vec3(0.0, 0.0, 2.0);
  s.lighting = lighting_from_environment(DirectionalEnvironment{});
  const Mat3 R = Eigen::AngleAxisd(90.0 * kDeg, Vec3::UnitZ()).toRotationMatrix();
  s.poses = {RigidPose::identity(), RigidPose{R, s.surface.center - R * s.surface.center}};
  const auto fr = render_sequence(s);
  int checked = 0;
  for (int v = 0; v < 65; ++v) {
    for (int u = 0; u < 65; ++u) {
      if (!fr[0].image.mask(u, v)) continue;
      const Vec3 d = R * Vec3(u - 32.0, v - 32.0, 0.0);
      const int uq = static_cast<int>(std::lround(32.0 + d.x()));
      const int vq = static_cast<int>(std::lround(32.0 + d.y()));
      ASSERT_TRUE(fr[1].image.mask(uq, vq));
      const Vec3 n = fr[0].normals.normals(u, v);
      const Vec3 ratio = fr[1].image.pixels(uq, vq).cwiseQuotient(fr[0].image.pixels(u, v));
      const Vec3 expect = shade_rgb(s.lighting, R * n).cwiseQuotient(shade_rgb(s.lighting, n));
      EXPECT_LT((ratio - expect).cwiseAbs().maxCoeff(), 1e-9) << u << "," << v;
      ++checked;
    }
  }
  EXPECT_GT(checked, 1000);
}

TEST(RenderSequence, SurfaceOutOfFrustum) {
  SyntheticScene s = SmallScene(1);
  s.surface.center = Vec3(0.0, 0.0, 0.9);
  EXPECT_THROW(render_sequence(s), SurfaceOutOfFrustum);
}

TEST(RenderSequence, FramesAreSeenFromTheirPoses) {
  const SyntheticScene s = SmallScene(3);
  const auto fr = render_sequence(s);
  // a frame-2 pixel, mapped back to the reference, projects to a reference
  // pixel with the same material albedo
  const RigidPose inv = s.poses[2].inverse();
  int checked = 0;
  for (int v = 0; v < 64; v += 3) {
    for (int u = 0; u < 64; u += 3) {
      if (!fr[2].depth.mask(u, v)) continue;
      const Vec3 Xk = s.K.backproject(Vec2(u, v), fr[2].depth.depth(u, v));
      const Vec3 X = inv.apply(Xk);
      EXPECT_NEAR((X - s.surface.center).norm(), s.surface.radius, 0.011);
      const Vec3 rho = s.albedo.evaluate(X - s.surface.center);
      EXPECT_LT((rho - fr[2].albedo.albedo(u, v)).norm(), 1e-9);
      ++checked;
    }
  }
  EXPECT_GT(checked, 50);
}

TEST(SmoothDepth, ZeroStrengthIsIdentity) {
  const auto fr = render_sequence(SmallScene(1));
  const DepthMap out = smooth_depth(fr[0].depth, {0, 4.0});
  EXPECT_EQ(out.depth, fr[0].depth.depth);
}

TEST(SmoothDepth, PlaneIsAFixedPoint) {
  DepthMap d{Image<double>(64, 64, 0.0), Mask(64, 64, 0)};
  for (int v = 4; v < 60; ++v) {
    for (int u = 3; u < 62; ++u) {
      d.depth(u, v) = 1.0 + 0.01 * u - 0.02 * v;
      d.mask(u, v) = 1;
    }
  }
  const DepthMap out = smooth_depth(d, {2, 3.0});  // support 2 x 9 px
  // a linear function survives symmetric smoothing away from the border;
  // at the border the normalised kernel is one-sided
  const Mask inner = erode(d.mask, 18);
  ASSERT_GT(count_set(inner), 0u);
  for (std::size_t i = 0; i < inner.size(); ++i) {
    if (inner[i]) EXPECT_NEAR(out.depth[i], d.depth[i], 1e-12);
  }
  // constant depth is unchanged everywhere
  DepthMap c = d;
  for (std::size_t i = 0; i < c.depth.size(); ++i) if (c.mask[i]) c.depth[i] = 1.7;
  const DepthMap oc = smooth_depth(c, {3, 4.0});
  for (std::size_t i = 0; i < c.depth.size(); ++i) {
    if (c.mask[i]) EXPECT_NEAR(oc.depth[i], 1.7, 1e-12);
  }
}

TEST(SmoothDepth, RemovesTheBumps) {
  SyntheticScene s = default_scene();
  s.poses.resize(1);
  const auto fr = render_sequence(s);
  const DepthMap sm = smooth_depth(fr[0].depth, {});
  // plain sphere depth along each ray
  const Vec3 c = s.surface.center;
  const double r = s.surface.radius;
  double before = 0.0, after = 0.0;
  int n = 0;
  const Mask inner = erode(fr[0].depth.mask, 12);
  for (int v = 0; v < 128; ++v) {
    for (int u = 0; u < 128; ++u) {
      if (!inner(u, v)) continue;
      const Vec3 d = s.K.ray(Vec2(u, v));
      const Vec3 dn = d.normalized();
      const double b = dn.dot(c);
      const double t = b - std::sqrt(b * b - (c.squaredNorm() - r * r));
      const double z = t * dn.z();
      before += std::pow(fr[0].depth.depth(u, v) - z, 2);
      after += std::pow(sm.depth(u, v) - z, 2);
      ++n;
    }
  }
  ASSERT_GT(n, 1000);
  EXPECT_LT(after, before);
}

TEST(SaltPepper, Examples) {
  const auto fr = render_sequence(SmallScene(1));
  const RadianceImage& img = fr[0].image;
  EXPECT_EQ(corrupt_salt_pepper(img, 0.0, 3).pixels, img.pixels);
  const RadianceImage all = corrupt_salt_pepper(img, 1.0, 3);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    if (!img.mask[i]) {
      EXPECT_EQ(all.pixels[i], img.pixels[i]);
      continue;
    }
    const Vec3 p = all.pixels[i];
    EXPECT_TRUE(p == Vec3::Zero() || p == Vec3::Ones());
  }
}

TEST(SaltPepper, DensityHalfOnFullMask) {
  RadianceImage img{Image<Vec3>(128, 128, Vec3::Constant(0.37)), Mask(128, 128, 1)};
  const RadianceImage out = corrupt_salt_pepper(img, 0.5, 11);
  std::size_t hit = 0, white = 0;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    if (out.pixels[i] != img.pixels[i]) ++hit;
    if (out.pixels[i] == Vec3::Ones()) ++white;
  }
  const double frac = static_cast<double>(hit) / out.pixels.size();
  EXPECT_NEAR(frac, 0.5, 0.02);
  EXPECT_NEAR(static_cast<double>(white) / hit, 0.5, 0.03);
  EXPECT_EQ(corrupt_salt_pepper(img, 0.5, 11).pixels, out.pixels);
  EXPECT_NE(corrupt_salt_pepper(img, 0.5, 12).pixels, out.pixels);
}

TEST(PerturbPoses, Examples) {
  const auto poses = default_scene().poses;
  const auto same = perturb_poses(poses, 0.0, 0.0, 5);
  for (std::size_t k = 0; k < poses.size(); ++k) {
    EXPECT_EQ(same[k].R, poses[k].R);
    EXPECT_EQ(same[k].T, poses[k].T);
  }
  const auto p = perturb_poses(poses, 0.05, 0.01, 5);
  EXPECT_TRUE(p[0].is_identity());
  for (const auto& q : p) q.validate();
  const auto again = perturb_poses(poses, 0.05, 0.01, 5);
  for (std::size_t k = 0; k < p.size(); ++k) {
    EXPECT_EQ(p[k].R, again[k].R);
    EXPECT_EQ(p[k].T, again[k].T);
  }
}

// sigma_t = 3 px * z / f shifts a point at depth z by 3 px rms per image
// axis.
TEST(PerturbPoses, TranslationScaleInPixels) {
  const SyntheticScene s = default_scene();
  std::vector<RigidPose> many(400, RigidPose::identity());
  const double z = s.surface.center.z();
  const double sigma_t = 3.0 * z / s.K.fx;
  const auto p = perturb_poses(many, sigma_t, 0.0, 9);
  double sq = 0.0;
  for (std::size_t k = 1; k < p.size(); ++k) {
    const Projection pr = project_pixel(Vec2(s.K.cx, s.K.cy), z, s.K, p[k]);
    ASSERT_TRUE(pr.usable());
    sq += (pr.q - Vec2(s.K.cx, s.K.cy)).squaredNorm();
  }
  const double rms_axis = std::sqrt(sq / (2.0 * (p.size() - 1)));
  EXPECT_NEAR(rms_axis, 3.0, 0.3);
}

TEST(SceneJson, RoundTripAndUnknownKeys) {
  const SyntheticScene s = default_scene();
  const nlohmann::json j = scene_to_json(s);
  const SyntheticScene back = scene_from_json(j);
  EXPECT_EQ(back.poses.size(), s.poses.size());
  EXPECT_DOUBLE_EQ(back.surface.radius, s.surface.radius);
  EXPECT_DOUBLE_EQ(back.albedo.checker_size, s.albedo.checker_size);
  for (std::size_t k = 0; k < s.poses.size(); ++k) {
    EXPECT_LT((back.poses[k].R - s.poses[k].R).cwiseAbs().maxCoeff(), 1e-12);
  }
  nlohmann::json bad = j;
  bad["colour"] = 1;
  EXPECT_THROW(scene_from_json(bad), ValidationError);
}

TEST(Random, Deterministic) {
  Random a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
  Random c(1);
  double mean = 0.0, sq = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const double x = c.normal();
    mean += x;
    sq += x * x;
  }
  EXPECT_NEAR(mean / 20000, 0.0, 0.03);
  EXPECT_NEAR(sq / 20000, 1.0, 0.05);
}

}  // namespace
}  // namespace rgbdps::synth
