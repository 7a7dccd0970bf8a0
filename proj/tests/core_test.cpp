#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "rgbdps/core.hpp"

namespace rgbdps {
namespace {

CameraIntrinsics TestCamera() { return {100.0, 100.0, 64.0, 64.0, 128, 128}; }

RigidPose RandomPose(std::mt19937& rng, double max_angle, double max_t) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const Vec3 axis = Vec3(u(rng), u(rng), u(rng)).normalized();
  RigidPose pose;
  pose.R = Eigen::AngleAxisd(max_angle * u(rng), axis).toRotationMatrix();
  pose.T = max_t * Vec3(u(rng), u(rng), u(rng));
  return pose;
}

// Analytic sphere depth: z-depth of the first ray hit, -1 for a miss.
double SphereDepth(const CameraIntrinsics& K, const Vec2& p, const Vec3& c,
                   double r) {
  const Vec3 d = K.ray(p);
  const double a = d.squaredNorm();
  const double b = -2.0 * d.dot(c);
  const double cc = c.squaredNorm() - r * r;
  const double disc = b * b - 4 * a * cc;
  if (disc < 0) return -1.0;
  return (-b - std::sqrt(disc)) / (2 * a);
}

TEST(ProjectPixel, IdentityPose) {
  const auto K = TestCamera();
  const auto proj = project_pixel({12.25, 99.5}, 3.0, K, RigidPose::identity());
  ASSERT_TRUE(proj.usable());
  EXPECT_NEAR(proj.q.x(), 12.25, 1e-12);
  EXPECT_NEAR(proj.q.y(), 99.5, 1e-12);
  EXPECT_NEAR(proj.depth, 3.0, 1e-12);
}

TEST(ProjectPixel, LateralTranslation) {
  RigidPose pose;
  pose.T = Vec3(0.1, 0.0, 0.0);
  const auto proj = project_pixel({64, 64}, 2.0, TestCamera(), pose);
  ASSERT_TRUE(proj.usable());
  EXPECT_NEAR(proj.q.x(), 69.0, 1e-12);
  EXPECT_NEAR(proj.q.y(), 64.0, 1e-12);
  EXPECT_NEAR(proj.depth, 2.0, 1e-12);
}

TEST(ProjectPixel, PointOnCameraPlane) {
  RigidPose pose;
  pose.T = Vec3(0.0, 0.0, -2.0);
  EXPECT_EQ(project_pixel({64, 64}, 2.0, TestCamera(), pose).status,
            ProjectionStatus::NonPositiveDepth);
  EXPECT_EQ(project_pixel({64, 64}, 0.0, TestCamera(), RigidPose::identity()).status,
            ProjectionStatus::NonPositiveDepth);
}

TEST(ProjectPixel, OutOfFrameIsFlaggedNotFatal) {
  RigidPose pose;
  pose.T = Vec3(5.0, 0.0, 0.0);
  const auto proj = project_pixel({64, 64}, 2.0, TestCamera(), pose);
  EXPECT_EQ(proj.status, ProjectionStatus::OutOfFrame);
  EXPECT_NEAR(proj.q.x(), 64.0 + 250.0, 1e-9);
}

TEST(ProjectPixel, IdentityForEveryDepth) {
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> px(0.0, 127.0), z(0.01, 100.0);
  for (int i = 0; i < 200; ++i) {
    const Vec2 p(px(rng), px(rng));
    const auto proj = project_pixel(p, z(rng), TestCamera(), RigidPose::identity());
    EXPECT_NEAR((proj.q - p).norm(), 0.0, 1e-9);
  }
}

TEST(ProjectPixel, CompositionProperty) {
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> px(20.0, 108.0), z(1.0, 3.0);
  const auto K = TestCamera();
  int checked = 0;
  for (int i = 0; i < 500; ++i) {
    const RigidPose p1 = RandomPose(rng, 0.2, 0.1);
    const RigidPose p2 = RandomPose(rng, 0.2, 0.1);
    const Vec2 p(px(rng), px(rng));
    const double d = z(rng);
    const auto a = project_pixel(p, d, K, p1);
    const auto direct = project_pixel(p, d, K, p2);
    if (a.status == ProjectionStatus::NonPositiveDepth ||
        direct.status == ProjectionStatus::NonPositiveDepth) {
      continue;
    }
    const auto chained = project_pixel(a.q, a.depth, K, p2 * p1.inverse());
    ASSERT_NE(chained.status, ProjectionStatus::NonPositiveDepth);
    EXPECT_LT((chained.q - direct.q).norm(), 1e-6);
    EXPECT_NEAR(chained.depth, direct.depth, 1e-9);
    ++checked;
  }
  EXPECT_GT(checked, 400);
}

TEST(SampleBilinear, Examples) {
  Image<Vec3> img(4, 3, Vec3::Zero());
  Mask mask(4, 3, 1);
  img(0, 0) = Vec3::Constant(0.2);
  img(1, 0) = Vec3::Constant(0.6);
  img(2, 1) = Vec3(0.1, 0.2, 0.3);
  EXPECT_TRUE(sample_bilinear(img, mask, {2, 1})->isApprox(Vec3(0.1, 0.2, 0.3)));
  EXPECT_NEAR((*sample_bilinear(img, mask, {0.5, 0}))[0], 0.4, 1e-15);

  Image<Vec3> flat(2, 2, Vec3::Constant(0.7));
  EXPECT_NEAR((*sample_bilinear(flat, Mask(2, 2, 1), {0.5, 0.5}) -
               Vec3::Constant(0.7)).norm(), 0.0, 1e-15);
}

TEST(SampleBilinear, MaskWeighting) {
  Image<double> img(2, 2, 0.0);
  img(0, 0) = 1.0;
  img(1, 0) = 100.0;
  Mask mask(2, 2, 0);
  mask(0, 0) = 1;
  // Only one usable neighbour: its value after renormalisation.
  EXPECT_DOUBLE_EQ(*sample_bilinear(img, mask, {0.5, 0.5}), 1.0);
  mask(0, 0) = 0;
  EXPECT_FALSE(sample_bilinear(img, mask, {0.5, 0.5}).has_value());
  EXPECT_FALSE(sample_bilinear(img, Mask(2, 2, 1), {1.5, 0.0}).has_value());
}

TEST(SampleBilinear, ConstantImageEverywhere) {
  Image<Vec3> img(9, 7, Vec3(0.3, 0.5, 0.9));
  Mask mask(9, 7, 1);
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> u(0.0, 8.0), v(0.0, 6.0);
  for (int i = 0; i < 1000; ++i) {
    const auto s = sample_bilinear(img, mask, {u(rng), v(rng)});
    ASSERT_TRUE(s.has_value());
    EXPECT_LT((*s - Vec3(0.3, 0.5, 0.9)).norm(), 1e-15);
  }
}

TEST(NormalsFromDepth, FrontoParallelPlane) {
  const auto K = TestCamera();
  DepthMap d{Image<double>(32, 32, 2.0), Mask(32, 32, 1)};
  const NormalMap n = normals_from_depth(d, K);
  for (int v = 1; v < 31; ++v) {
    for (int u = 1; u < 31; ++u) {
      ASSERT_TRUE(n.mask(u, v));
      EXPECT_LT((n.normals(u, v) - Vec3(0, 0, -1)).norm(), 1e-12);
    }
  }
}

TEST(NormalsFromDepth, AnalyticSphere) {
  const CameraIntrinsics K{150.0, 150.0, 63.5, 63.5, 128, 128};
  const Vec3 c(0.0, 0.0, 1.5);
  const double r = 0.5;
  DepthMap d{Image<double>(128, 128, 0.0), Mask(128, 128, 0)};
  for (int v = 0; v < 128; ++v) {
    for (int u = 0; u < 128; ++u) {
      const double z = SphereDepth(K, Vec2(u, v), c, r);
      if (z > 0) {
        d.depth(u, v) = z;
        d.mask(u, v) = 1;
      }
    }
  }
  const NormalMap n = normals_from_depth(d, K);
  double sum = 0.0;
  int count = 0;
  for (int v = 0; v < 128; ++v) {
    for (int u = 0; u < 128; ++u) {
      if (!n.mask(u, v)) continue;
      EXPECT_NEAR(n.normals(u, v).norm(), 1.0, 1e-12);
      const Vec3 x = K.backproject(Vec2(u, v), d.depth(u, v));
      const Vec3 truth = (x - c).normalized();
      EXPECT_LT(truth.z(), 0.0);
      // Stay away from the silhouette, where the surface turns edge-on.
      if (-truth.dot(K.ray(Vec2(u, v)).normalized()) < 0.3) continue;
      sum += angle_deg(n.normals(u, v), truth);
      ++count;
    }
  }
  ASSERT_GT(count, 5000);
  EXPECT_LT(sum / count, 1.0);
}

TEST(NormalsFromDepth, SinglePixelHasNoNormal) {
  DepthMap d{Image<double>(5, 5, 1.0), Mask(5, 5, 0)};
  d.mask(2, 2) = 1;
  EXPECT_EQ(count_set(normals_from_depth(d, TestCamera()).mask), 0u);
}

TEST(RigidPose, Validate) {
  RigidPose pose;
  EXPECT_NO_THROW(pose.validate());
  pose.R(0, 0) = 1.1;
  EXPECT_THROW(pose.validate(), ValidationError);
}

}  // namespace
}  // namespace rgbdps
