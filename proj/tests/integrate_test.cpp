#include <cmath>

#include <gtest/gtest.h>

#include "rgbdps/integrate.hpp"
#include "rgbdps/synth.hpp"

namespace rgbdps::integrate {
namespace {

const CameraIntrinsics kK{80.0, 80.0, 31.5, 31.5, 64, 64};

// Plane n . X = d seen by kK, masked inside a disc.
struct Plane {
  DepthMap depth;
  NormalMap normals;
};

Plane MakePlane(const Vec3& n_in, double d) {
  const Vec3 n = n_in.normalized();
  Plane p{{Image<double>(64, 64, 0.0), Mask(64, 64, 0)}, {Image<Vec3>(64, 64, Vec3::Zero()), Mask(64, 64, 0)}};
  for (int v = 0; v < 64; ++v) {
    for (int u = 0; u < 64; ++u) {
      if ((u - 31.5) * (u - 31.5) + (v - 31.5) * (v - 31.5) > 28.0 * 28.0) continue;
      const Vec3 r = kK.ray(Vec2(u, v));
      p.depth.depth(u, v) = d / n.dot(r);
      p.depth.mask(u, v) = 1;
      p.normals.normals(u, v) = n;
      p.normals.mask(u, v) = 1;
    }
  }
  return p;
}

double MaxDiff(const DepthMap& a, const DepthMap& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.depth.size(); ++i) {
    if (a.mask[i]) m = std::max(m, std::abs(a.depth[i] - b.depth[i]));
  }
  return m;
}

TEST(DepthGradient, ExactOnAPlane) {
  const Vec3 n = Vec3(0.3, -0.2, -1.0).normalized();
  const Plane p = MakePlane(n, -1.2);
  for (int v = 10; v < 50; v += 9) {
    for (int u = 10; u < 50; u += 7) {
      if (!p.depth.mask(u, v)) continue;
      const auto g = depth_gradient(n, Vec2(u, v), p.depth.depth(u, v), kK, 0.05);
      ASSERT_TRUE(g);
      // a plane's depth is not linear in u, so compare with the central
      // difference of the analytic depth at a small step
      const double h = 1e-4;
      auto z = [&](double uu, double vv) { return -1.2 / n.dot(kK.ray(Vec2(uu, vv))); };
      EXPECT_NEAR(g->x(), (z(u + h, v) - z(u - h, v)) / (2 * h), 1e-8);
      EXPECT_NEAR(g->y(), (z(u, v + h) - z(u, v - h)) / (2 * h), 1e-8);
    }
  }
  EXPECT_FALSE(depth_gradient(Vec3(1, 0, 0), Vec2(31.5, 31.5), 1.0, kK, 0.05));
}

TEST(IntegrateNormals, PlaneIsAFixedPoint) {
  const Plane p = MakePlane(Vec3(0.25, 0.1, -1.0), -1.5);
  const IntegrationResult r = integrate_normals(p.normals, p.depth, {}, kK, IntegrationConfig{});
  EXPECT_TRUE(r.converged);
  EXPECT_FALSE(r.diverged);
  // gradients are averaged over an edge, which is exact only to second order
  EXPECT_LT(MaxDiff(r.depth, p.depth), 1e-6);
}

TEST(IntegrateNormals, HugeLambdaReturnsThePrior) {
  const Plane truth = MakePlane(Vec3(0.0, 0.0, -1.0), -1.5);
  const Plane tilted = MakePlane(Vec3(0.4, 0.0, -1.0), -1.5);
  IntegrationConfig cfg;
  cfg.lambda_depth = 1e6;
  const IntegrationResult r = integrate_normals(tilted.normals, truth.depth, {}, kK, cfg);
  EXPECT_LT(MaxDiff(r.depth, truth.depth), 1e-4);
}

TEST(IntegrateNormals, ZeroConfidenceReturnsThePrior) {
  const Plane truth = MakePlane(Vec3(0.0, 0.0, -1.0), -1.5);
  const Plane tilted = MakePlane(Vec3(0.4, 0.0, -1.0), -1.5);
  const Image<double> zero(64, 64, 0.0);
  const IntegrationResult r = integrate_normals(tilted.normals, truth.depth, zero, kK, IntegrationConfig{});
  EXPECT_LT(MaxDiff(r.depth, truth.depth), 1e-12);
}

TEST(IntegrateNormals, ShiftedPriorMovesTheResultByTheShift) {
  // fronto-parallel normals fix the shape; the prior only sets the offset
  const Plane p = MakePlane(Vec3(0.0, 0.0, -1.0), -1.5);
  DepthMap prior = p.depth;
  for (std::size_t i = 0; i < prior.depth.size(); ++i) if (prior.mask[i]) prior.depth[i] += 0.1;
  const IntegrationResult r = integrate_normals(p.normals, prior, {}, kK, IntegrationConfig{});
  EXPECT_LT(MaxDiff(r.depth, prior), 1e-6);
}

TEST(IntegrateNormals, EnergyNeverIncreasesAndMatchesTheReport) {
  synth::SyntheticScene s = synth::default_scene();
  s.poses.resize(1);
  const auto fr = synth::render_sequence(s);
  const DepthMap prior = synth::smooth_depth(fr[0].depth, {});
  const IntegrationConfig cfg;
  const IntegrationResult r = integrate_normals(fr[0].normals, prior, {}, s.K, cfg);
  ASSERT_TRUE(r.converged);
  ASSERT_EQ(r.energy.size(), static_cast<std::size_t>(r.iterations) + 1);
  for (std::size_t i = 1; i < r.energy.size(); ++i) {
    EXPECT_LE(r.energy[i], r.energy[i - 1] * (1.0 + 1e-12));
  }
  EXPECT_NEAR(integration_energy(prior.depth, fr[0].normals, prior, {}, s.K, cfg), r.energy.front(),
              1e-9 * r.energy.front());
  EXPECT_NEAR(integration_energy(r.depth.depth, fr[0].normals, prior, {}, s.K, cfg), r.energy.back(),
              1e-6 * r.energy.front());
}

TEST(IntegrateNormals, HalvesTheErrorOfASmoothedPrior) {
  synth::SyntheticScene s = synth::default_scene();
  s.poses.resize(1);
  const auto fr = synth::render_sequence(s);
  const DepthMap prior = synth::smooth_depth(fr[0].depth, {});
  const IntegrationResult r = integrate_normals(fr[0].normals, prior, {}, s.K, IntegrationConfig{});
  double before = 0.0, after = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < prior.depth.size(); ++i) {
    if (!prior.mask[i]) continue;
    before += std::pow(prior.depth[i] - fr[0].depth.depth[i], 2);
    after += std::pow(r.depth.depth[i] - fr[0].depth.depth[i], 2);
    ++n;
  }
  EXPECT_LE(std::sqrt(after / n), 0.5 * std::sqrt(before / n));
}

TEST(IntegrateNormals, Validation) {
  const Plane p = MakePlane(Vec3(0, 0, -1), -1.0);
  IntegrationConfig bad;
  bad.lambda_depth = -1.0;
  EXPECT_THROW(integrate_normals(p.normals, p.depth, {}, kK, bad), ValidationError);
  const Image<double> wrong(3, 3, 1.0);
  EXPECT_THROW(integrate_normals(p.normals, p.depth, wrong, kK, IntegrationConfig{}), ValidationError);
}

TEST(IntegrateNormals, IterationCapReportsDivergenceAndKeepsThePrior) {
  const Plane truth = MakePlane(Vec3(0.0, 0.0, -1.0), -1.5);
  const Plane tilted = MakePlane(Vec3(0.4, 0.0, -1.0), -1.5);
  IntegrationConfig cfg;
  cfg.max_iterations = 1;
  const IntegrationResult r = integrate_normals(tilted.normals, truth.depth, {}, kK, cfg);
  EXPECT_TRUE(r.diverged);
  EXPECT_EQ(r.depth.depth, truth.depth.depth);
}

TEST(ExportMesh, VerticesBackprojectAndFacesPointAtTheCamera) {
  const Plane p = MakePlane(Vec3(0.2, 0.1, -1.0), -1.5);
  const io::TriangleMesh m = export_mesh(p.depth, kK);
  EXPECT_EQ(m.vertices.size(), count_set(p.depth.mask));
  ASSERT_GT(m.faces.size(), m.vertices.size());
  for (const auto& f : m.faces) {
    const Eigen::Vector3f a = m.vertices[f[0]], b = m.vertices[f[1]], c = m.vertices[f[2]];
    EXPECT_LT((b - a).cross(c - a).dot(a), 0.0f);
  }
  const Vec3 n = Vec3(0.2, 0.1, -1.0).normalized();
  for (const auto& vn : m.normals) EXPECT_GT(vn.cast<double>().dot(n), 0.9999);
}

}  // namespace
}  // namespace rgbdps::integrate
