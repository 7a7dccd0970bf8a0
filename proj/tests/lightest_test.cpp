#include <cmath>

#include <gtest/gtest.h>

#include "rgbdps/lightest.hpp"
#include "rgbdps/synth.hpp"

namespace rgbdps::lightest {
namespace {

Vec3 RandomFacingNormal(synth::Random& rng) {
  Vec3 n;
  do {
    n = Vec3(rng.normal(), rng.normal(), rng.normal());
  } while (n.norm() < 1e-3);
  n.normalize();
  if (n.z() > -0.3) n.z() = -0.3 - std::abs(n.z());
  return n.normalized();
}

Mat3 RandomRotation(synth::Random& rng, double max_deg) {
  const Vec3 axis = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
  const double ang = max_deg * 3.14159265358979323846 / 180.0 * (0.3 + 0.7 * rng.uniform());
  return Eigen::AngleAxisd(ang, axis).toRotationMatrix();
}

QuadraticLighting SunSky() { return lighting_from_environment(DirectionalEnvironment{}); }

// Noise-free ratio observations of L: the frame-k normal is R n_p.
std::vector<RatioObservation> Synthesize(const QuadraticLighting& L, int frames, int per_frame,
                                         std::uint64_t seed, double max_deg = 25.0) {
  synth::Random rng(seed);
  std::vector<RatioObservation> obs;
  for (int k = 1; k <= frames; ++k) {
    const Mat3 R = RandomRotation(rng, max_deg);
    for (int i = 0; i < per_frame; ++i) {
      RatioObservation o;
      o.p = Vec2(i, k);
      o.frame = k;
      o.n_p = RandomFacingNormal(rng);
      o.R = R;
      o.n_q = R * o.n_p;
      o.ratio = shade_rgb(L, o.n_q).cwiseQuotient(shade_rgb(L, o.n_p));
      o.gamma = Vec3::Ones();
      obs.push_back(o);
    }
  }
  return obs;
}

std::vector<Vec3> GaugeNormals(std::uint64_t seed) {
  synth::Random rng(seed);
  std::vector<Vec3> n(500);
  for (auto& x : n) x = RandomFacingNormal(rng);
  return n;
}

TEST(DarkWeight, Ramp) {
  EXPECT_EQ(dark_weight(0.01, 0.02), 0.0);
  EXPECT_EQ(dark_weight(0.02, 0.02), 0.0);
  EXPECT_DOUBLE_EQ(dark_weight(0.03, 0.02), 0.5);
  EXPECT_EQ(dark_weight(0.04, 0.02), 1.0);
  EXPECT_EQ(dark_weight(0.9, 0.02), 1.0);
  EXPECT_EQ(dark_weight(0.0, 0.0), 0.0);
  EXPECT_EQ(dark_weight(1e-9, 0.0), 1.0);
}

TEST(ShadingFeatures, DotParamsIsShade) {
  synth::Random rng(3);
  for (int t = 0; t < 20; ++t) {
    ChannelLighting::Params p;
    for (int i = 0; i < 10; ++i) p[i] = rng.normal();
    const ChannelLighting L = ChannelLighting::from_params(p);
    const Vec3 n = RandomFacingNormal(rng);
    EXPECT_NEAR(shading_features(n).dot(p), L.shade(n), 1e-12);
  }
}

TEST(RatioObjective, HandExample) {
  // s(n) = 1 - n_z: 2 facing the camera, 1 side-on
  ChannelLighting L;
  L.b = Vec3(0, 0, -1);
  L.c = 1.0;
  RatioObservation o;
  o.n_p = Vec3(0, 0, -1);
  o.n_q = Vec3(1, 0, 0);
  o.R = Mat3::Identity();
  o.gamma = Vec3::Ones();
  o.ratio = Vec3::Constant(0.5);
  std::vector<RatioObservation> obs{o};
  EXPECT_NEAR(ratio_objective(L, obs, 0), 0.0, 1e-15);
  obs[0].ratio = Vec3::Constant(0.6);
  obs[0].gamma = Vec3(2.0, 1.0, 1.0);
  EXPECT_NEAR(ratio_objective(L, obs, 0), 2.0 * 0.01, 1e-15);
  EXPECT_NEAR(ratio_objective(L, obs, 1), 0.01, 1e-15);
  // a vanishing denominator removes the observation
  obs[0].n_p = Vec3(0, 0, 1);
  EXPECT_EQ(ratio_objective(L, obs, 0), 0.0);
}

TEST(RatioObjective, ZeroAtTruthAndGaugeInvariant) {
  const QuadraticLighting L = SunSky();
  const auto obs = Synthesize(L, 6, 200, 1);
  for (int ch = 0; ch < 3; ++ch) {
    EXPECT_LT(ratio_objective(L[ch], obs, ch), 1e-20);
    ChannelLighting M = L[ch].scaled(3.7);
    M.A += 0.4 * Mat3::Identity();
    M.c -= 0.4;
    EXPECT_LT(ratio_objective(M, obs, ch), 1e-20);
  }
  const auto res = ratio_residuals(L, obs);
  EXPECT_EQ(res.size(), obs.size() * 3);
  for (double r : res) EXPECT_LT(std::abs(r), 1e-8);
}

TEST(EstimateLighting, RecoversTheTruthFromAmbient) {
  const QuadraticLighting L = SunSky();
  const auto obs = Synthesize(L, 8, 300, 2);
  const auto gauge = GaugeNormals(5);
  LightConfig cfg;
  const LightingEstimate est = estimate_lighting(obs, gauge, cfg);
  EXPECT_FALSE(est.degenerate_motion);
  EXPECT_EQ(est.observations_used, obs.size());
  const QuadraticLighting truth = normalize_gauge(L, gauge);
  const auto check = GaugeNormals(6);
  for (const Vec3& n : check) {
    EXPECT_LT((shade_rgb(est.lighting, n) - shade_rgb(truth, n)).cwiseAbs().maxCoeff(), 1e-6);
  }
  for (int ch = 0; ch < 3; ++ch) {
    EXPECT_TRUE(est.fits[ch].converged);
    EXPECT_LT(est.fits[ch].objective, 1e-16);
  }
}

TEST(EstimateLighting, ResultDoesNotDependOnTheStartingScale) {
  const QuadraticLighting L = SunSky();
  const auto obs = Synthesize(L, 8, 300, 4);
  const auto gauge = GaugeNormals(5);
  const LightConfig cfg;
  const auto a = estimate_lighting(obs, gauge, cfg, QuadraticLighting::ambient(1.0));
  const auto b = estimate_lighting(obs, gauge, cfg, QuadraticLighting::ambient(25.0));
  for (const Vec3& n : gauge) {
    EXPECT_LT((shade_rgb(a.lighting, n) - shade_rgb(b.lighting, n)).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(EstimateLighting, ObjectiveNeverIncreases) {
  const QuadraticLighting L = SunSky();
  auto obs = Synthesize(L, 6, 250, 8);
  synth::Random rng(17);
  for (auto& o : obs) o.ratio += 0.01 * Vec3(rng.normal(), rng.normal(), rng.normal());
  const auto est = estimate_lighting(obs, GaugeNormals(1), LightConfig{});
  for (const auto& fit : est.fits) {
    ASSERT_GE(fit.history.size(), 2u);
    for (std::size_t i = 1; i < fit.history.size(); ++i) {
      EXPECT_LE(fit.history[i], fit.history[i - 1]);
    }
  }
}

TEST(EstimateLighting, SubsampleIsSeeded) {
  const auto obs = Synthesize(SunSky(), 6, 300, 9);
  LightConfig cfg;
  cfg.max_observations = 700;
  const auto a = estimate_lighting(obs, GaugeNormals(1), cfg);
  const auto b = estimate_lighting(obs, GaugeNormals(1), cfg);
  EXPECT_EQ(a.observations_used, 700u);
  for (int ch = 0; ch < 3; ++ch) EXPECT_EQ(a.lighting[ch].params(), b.lighting[ch].params());
}

TEST(EstimateLighting, FlagsMotionWithoutRotation) {
  const auto obs = Synthesize(SunSky(), 6, 100, 10, 0.5);
  const auto est = estimate_lighting(obs, GaugeNormals(1), LightConfig{});
  EXPECT_TRUE(est.degenerate_motion);
}

TEST(EstimateLighting, TooFewObservations) {
  const auto obs = Synthesize(SunSky(), 6, 20, 11);
  EXPECT_THROW(estimate_lighting(obs, GaugeNormals(1), LightConfig{}), InsufficientObservations);
  const auto few_frames = Synthesize(SunSky(), 3, 300, 11);
  EXPECT_THROW(estimate_lighting(few_frames, GaugeNormals(1), LightConfig{}),
               InsufficientObservations);
}

TEST(BuildRatioSet, RenderedSequenceWithGeometricCorrespondences) {
  synth::SyntheticScene s = synth::default_scene();
  s.poses.resize(4);
  const auto fr = synth::render_sequence(s);
  std::vector<match::CorrespondenceField> fields;
  for (std::size_t k = 1; k < fr.size(); ++k) {
    fields.push_back(match::rigid_correspondences(fr[0].depth, s.K, s.poses[k], fr[k].image.mask,
                                                  &fr[k].depth));
  }
  std::vector<RatioFrame> frames;
  for (std::size_t k = 1; k < fr.size(); ++k) {
    frames.push_back({static_cast<int>(k), &fr[k].image, &fr[k].normals, &fields[k - 1],
                      s.poses[k].R});
  }
  const LightConfig cfg;
  const auto obs = build_ratio_set(fr[0].image, fr[0].normals, s.K, frames, cfg);
  ASSERT_GT(obs.size(), 3000u);
  for (const auto& o : obs) {
    EXPECT_GE(-o.n_p.dot(s.K.ray(o.p).normalized()), cfg.min_view_cosine);
    EXPECT_LE(o.gamma.maxCoeff(), 1.0);
    EXPECT_NEAR(o.n_q.norm(), 1.0, 1e-12);
  }
  // bilinear sampling of intensity and normals: small model residuals
  const auto res = ratio_residuals(s.lighting, obs);
  double sq = 0.0;
  for (double r : res) sq += r * r;
  EXPECT_LT(std::sqrt(sq / res.size()), 0.02);
}

}  // namespace
}  // namespace rgbdps::lightest
