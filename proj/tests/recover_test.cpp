#include <cmath>
#include <numbers>

#include <boost/math/tools/minima.hpp>
#include <gtest/gtest.h>

#include "rgbdps/parallel.hpp"
#include "rgbdps/recover.hpp"
#include "rgbdps/synth.hpp"

namespace rgbdps::recover {
namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

QuadraticLighting SunSky() { return lighting_from_environment(DirectionalEnvironment{}); }

// Twenty key frames turning 3 deg each about a tilted axis.
std::vector<Mat3> Orbit(int count = 20, double step_deg = 3.0) {
  std::vector<Mat3> R;
  const Vec3 axis = Vec3(0.25, 1.0, 0.15).normalized();
  for (int k = 0; k < count; ++k) R.push_back(Eigen::AngleAxisd(k * step_deg * kDeg, axis).toRotationMatrix());
  return R;
}

PixelObservations Observe(const Vec3& n, const Vec3& rho, const FrameLighting& lights) {
  PixelObservations obs;
  for (std::size_t k = 0; k < lights.size(); ++k) {
    obs.intensity.push_back(rho.cwiseProduct(shade_rgb(lights.per_frame[k], n)));
    obs.frame.push_back(static_cast<int>(k));
  }
  return obs;
}

Vec3 Tilt(const Vec3& n, double deg, double phi = 0.7) {
  const auto [t1, t2] = tangent_basis(n);
  return (std::cos(deg * kDeg) * n + std::sin(deg * kDeg) * (std::cos(phi) * t1 + std::sin(phi) * t2)).normalized();
}

TEST(ShadingPerFrame, Identities) {
  const QuadraticLighting L = SunSky();
  synth::Random rng(1);
  for (int t = 0; t < 10; ++t) {
    const Vec3 n = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
    const Mat3 R = Eigen::AngleAxisd(rng.normal(), Vec3(rng.normal(), rng.normal(), rng.normal()).normalized())
                       .toRotationMatrix();
    EXPECT_LT((shading_per_frame(n, L, R) - shade_rgb(L, R * n)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(shading_per_frame(n, L, Mat3::Identity()), shade_rgb(L, n));
    EXPECT_LT((shading_per_frame(n, QuadraticLighting::ambient(0.3), R) - Vec3::Constant(0.3)).norm(), 1e-15);
  }
}

TEST(EStep, PosteriorExamples) {
  EXPECT_EQ(inlier_posterior(0.3, 3, 0.05, 1.0, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(inlier_posterior(0.0, 1, 1.0 / std::sqrt(2.0 * std::numbers::pi), 0.5, 1.0), 0.5);
  EXPECT_NEAR(inlier_posterior(0.01, 1, 0.05, 0.75, 1.0), 0.7641207904, 1e-9);
  // three pooled channels: density of the 3-D isotropic Gaussian
  EXPECT_NEAR(gaussian_density(0.0, 3, 1.0), std::pow(2.0 * std::numbers::pi, -1.5), 1e-15);
}

TEST(EStep, AlphaOneMakesEveryFrameAnInlier) {
  const FrameLighting lights(SunSky(), Orbit(5));
  PixelEMState s;
  s.n = Vec3(0.1, -0.2, -1.0).normalized();
  s.rho = Vec3(0.5, 0.4, 0.3);
  s.alpha = 1.0;
  PixelObservations obs = Observe(s.n, s.rho, lights);
  obs.intensity[2] = Vec3::Ones();
  for (double w : e_step(s, obs, lights, EMConfig{})) EXPECT_EQ(w, 1.0);
}

TEST(MStepClosed, SingleObservation) {
  const FrameLighting lights(QuadraticLighting::ambient(1.0), Orbit(1));
  PixelObservations obs{{Vec3::Constant(0.5)}, {0}};
  PixelEMState s;
  s.omega = {1.0};
  m_step_closed(s, obs, lights, EMConfig{});
  EXPECT_DOUBLE_EQ(s.rho.x(), 0.5);
  EXPECT_DOUBLE_EQ(s.alpha, 1.0);
  EXPECT_EQ(s.sigma, EMConfig{}.sigma_floor);
}

TEST(MStepClosed, MatchesNumericalMaximisationOfQ) {
  // three-observation toy with hand-picked weights
  const auto rots = Orbit(3, 20.0);
  const FrameLighting lights(SunSky(), rots);
  const Vec3 n = Vec3(0.3, -0.2, -0.9).normalized();
  PixelObservations obs{{Vec3(0.42, 0.35, 0.30), Vec3(0.55, 0.31, 0.20), Vec3(0.9, 0.9, 0.1)}, {0, 1, 2}};
  PixelEMState s;
  s.n = n;
  s.omega = {0.9, 0.6, 0.2};
  const EMConfig cfg;
  m_step_closed(s, obs, lights, cfg);
  EXPECT_NEAR(s.alpha, (0.9 + 0.6 + 0.2) / 3.0, 1e-15);

  // rho: per channel 1-D minimisation of the weighted squared residual
  for (int ch = 0; ch < 3; ++ch) {
    auto f = [&](double r) {
      double e = 0.0;
      for (int k = 0; k < 3; ++k) {
        const double d = r * shade(lights.per_frame[k], n, ch) - obs.intensity[k][ch];
        e += s.omega[k] * d * d;
      }
      return e;
    };
    const auto best = boost::math::tools::brent_find_minima(f, 0.0, 5.0, 50);
    EXPECT_NEAR(s.rho[ch], best.first, 1e-8) << ch;
  }
  // sigma: maximise Q with everything else fixed
  auto negq = [&](double sigma) {
    PixelEMState t = s;
    t.sigma = sigma;
    return -expected_log_likelihood(t, s.omega, obs, lights, cfg);
  };
  const auto best = boost::math::tools::brent_find_minima(negq, 1e-3, 2.0, 50);
  EXPECT_NEAR(s.sigma, best.first, 1e-8);
}

TEST(MStepClosed, VanishingWeightsThrow) {
  const FrameLighting lights(SunSky(), Orbit(3));
  PixelObservations obs = Observe(Vec3(0, 0, -1), Vec3::Constant(0.5), lights);
  PixelEMState s;
  s.omega = {0.0, 1e-12, 0.0};
  EXPECT_THROW(m_step_closed(s, obs, lights, EMConfig{}), DegenerateWeights);
}

TEST(NormalObjective, GradientMatchesFiniteDifferences) {
  const FrameLighting lights(SunSky(), Orbit(8, 6.0));
  synth::Random rng(5);
  for (int t = 0; t < 20; ++t) {
    Vec3 n = Vec3(rng.normal(), rng.normal(), -2.0 - std::abs(rng.normal())).normalized();
    const Vec3 rho(0.2 + rng.uniform(), 0.2 + rng.uniform(), 0.2 + rng.uniform());
    PixelObservations obs = Observe(Tilt(n, 15.0, rng.uniform() * 6.0), rho, lights);
    for (auto& I : obs.intensity) I += 0.05 * Vec3(rng.normal(), rng.normal(), rng.normal());
    std::vector<double> omega(obs.intensity.size());
    for (auto& w : omega) w = rng.uniform();
    const auto [t1, t2] = tangent_basis(n);
    const Vec2 g = normal_gradient(n, rho, obs, lights, omega);
    const double h = 1e-6;
    Vec2 fd;
    for (int a = 0; a < 2; ++a) {
      const Vec3 d = a == 0 ? t1 : t2;
      fd[a] = (normal_objective((n + h * d).normalized(), rho, obs, lights, omega) -
               normal_objective((n - h * d).normalized(), rho, obs, lights, omega)) / (2.0 * h);
    }
    EXPECT_LT((g - fd).norm(), 1e-5 * std::max(1.0, fd.norm())) << t;
  }
}

TEST(NormalObjective, LinearLightingHasItsZeroFacingTheLight) {
  QuadraticLighting L;
  for (int ch = 0; ch < 3; ++ch) L[ch].b = Vec3(0, 0, 1);
  const FrameLighting lights(L, Orbit(1));
  const PixelObservations obs{{Vec3::Ones()}, {0}};
  const std::vector<double> w{1.0};
  EXPECT_EQ(normal_objective(Vec3(0, 0, 1), Vec3::Ones(), obs, lights, w), 0.0);
  EXPECT_GT(normal_objective(Tilt(Vec3(0, 0, 1), 5.0), Vec3::Ones(), obs, lights, w), 0.0);
}

TEST(MStepNormal, ExactDataIsAFixedPointAndIsReached) {
  const FrameLighting lights(SunSky(), Orbit());
  const Vec3 n = Vec3(0.2, -0.35, -0.9).normalized();
  const Vec3 rho(0.7, 0.4, 0.25);
  const PixelObservations obs = Observe(n, rho, lights);
  PixelEMState s;
  s.n = Tilt(n, 8.0);
  s.rho = rho;
  s.omega.assign(obs.intensity.size(), 1.0);
  m_step_normal(s, obs, lights, EMConfig{});
  EXPECT_LT(angle_deg(s.n, n), 0.1);
  EXPECT_NEAR(s.n.norm(), 1.0, 1e-12);
}

// Minimum over a 0.5 deg grid of the hemisphere facing the camera, albedo
// profiled out at every node.
Vec3 GridSearch(const PixelObservations& obs, const FrameLighting& lights) {
  const std::vector<double> w(obs.intensity.size(), 1.0);
  double best = std::numeric_limits<double>::infinity();
  Vec3 arg = Vec3::Zero();
  for (double th = 0.25; th < 90.0; th += 0.5) {
    for (double ph = 0.25; ph < 360.0; ph += 0.5) {
      const Vec3 n(std::sin(th * kDeg) * std::cos(ph * kDeg), std::sin(th * kDeg) * std::sin(ph * kDeg),
                   -std::cos(th * kDeg));
      PixelEMState s;
      s.n = n;
      s.omega = w;
      m_step_closed(s, obs, lights, EMConfig{});
      const double e = normal_objective(n, s.rho, obs, lights, w);
      if (e < best) {
        best = e;
        arg = n;
      }
    }
  }
  return arg;
}

TEST(MStepNormal, AgreesWithGridSearch) {
  const FrameLighting lights(SunSky(), Orbit(20, 6.0));
  synth::Random rng(21);
  for (int t = 0; t < 3; ++t) {
    const Vec3 n = Vec3(0.5 * rng.normal(), 0.5 * rng.normal(), -1.0).normalized();
    const Vec3 rho(0.3 + 0.5 * rng.uniform(), 0.3 + 0.5 * rng.uniform(), 0.3 + 0.5 * rng.uniform());
    PixelObservations obs = Observe(n, rho, lights);
    for (auto& I : obs.intensity) I += 0.003 * Vec3(rng.normal(), rng.normal(), rng.normal());
    PixelEMState s;
    s.n = Tilt(n, 10.0, rng.uniform() * 6.0);
    s.omega.assign(obs.intensity.size(), 1.0);
    m_step_closed(s, obs, lights, EMConfig{});
    m_step_normal(s, obs, lights, EMConfig{});
    EXPECT_LT(angle_deg(s.n, GridSearch(obs, lights)), 1.0) << t;
  }
}

TEST(RecoverPixel, NoiseFreeConvergesToTheTruth) {
  const FrameLighting lights(SunSky(), Orbit());
  const Vec3 n = Vec3(-0.25, 0.3, -0.92).normalized();
  const Vec3 rho(0.62, 0.45, 0.3);
  const PixelObservations obs = Observe(n, rho, lights);
  const PixelResult r = recover_pixel(obs, lights, Tilt(n, 10.0), EMConfig{});
  EXPECT_TRUE(r.converged);
  EXPECT_LE(r.iterations, 5);
  EXPECT_LT(angle_deg(r.state.n, n), 0.5);
  EXPECT_LT((r.state.rho - rho).cwiseAbs().maxCoeff(), 1e-4);
  EXPECT_GT(r.state.alpha, 0.999);
}

TEST(RecoverPixel, IgnoresCorruptedFrames) {
  const FrameLighting lights(SunSky(), Orbit());
  const Vec3 n = Vec3(0.3, 0.15, -0.94).normalized();
  const Vec3 rho(0.55, 0.5, 0.35);
  PixelObservations obs = Observe(n, rho, lights);
  const std::vector<int> bad{3, 8, 12, 17};
  for (int k : bad) obs.intensity[k] = (k % 2) ? Vec3::Ones() : Vec3::Zero();
  const PixelResult r = recover_pixel(obs, lights, Tilt(n, 10.0), EMConfig{});
  EXPECT_LT(angle_deg(r.state.n, n), 3.0);
  for (int k : bad) EXPECT_LT(r.state.omega[k], 0.01) << k;

  EMConfig ls;
  ls.robust = false;
  const PixelResult plain = recover_pixel(obs, lights, Tilt(n, 10.0), ls);
  EXPECT_LT(angle_deg(r.state.n, n), angle_deg(plain.state.n, n));
}

TEST(RecoverPixel, InvariantsAndMonotoneQ) {
  const FrameLighting lights(SunSky(), Orbit());
  synth::Random rng(33);
  for (int t = 0; t < 10; ++t) {
    const Vec3 n = Vec3(0.4 * rng.normal(), 0.4 * rng.normal(), -1.0).normalized();
    const Vec3 rho(0.2 + 0.6 * rng.uniform(), 0.2 + 0.6 * rng.uniform(), 0.2 + 0.6 * rng.uniform());
    PixelObservations obs = Observe(n, rho, lights);
    for (auto& I : obs.intensity) I += 0.01 * Vec3(rng.normal(), rng.normal(), rng.normal());
    obs.intensity[static_cast<std::size_t>(t) % 20] = Vec3::Ones();
    const PixelResult r = recover_pixel(obs, lights, Tilt(n, 12.0, t), EMConfig{});
    ASSERT_EQ(r.q_before.size(), r.q_after.size());
    for (std::size_t i = 0; i < r.q_after.size(); ++i) {
      EXPECT_GE(r.q_after[i], r.q_before[i] - 1e-9) << t << " it " << i;
    }
    EXPECT_NEAR(r.state.n.norm(), 1.0, 1e-12);
    EXPECT_GE(r.state.alpha, 0.0);
    EXPECT_LE(r.state.alpha, 1.0);
    EXPECT_GT(r.state.sigma, 0.0);
    EXPECT_TRUE((r.state.rho.array() >= 0.0).all());
    for (double w : r.state.omega) {
      EXPECT_GE(w, 0.0);
      EXPECT_LE(w, 1.0);
    }
  }
}

TEST(RecoverPixel, JointGaugeLeavesTheNormalAlone) {
  const QuadraticLighting L = SunSky();
  QuadraticLighting L2 = L;
  for (int ch = 0; ch < 3; ++ch) L2[ch] = L[ch].scaled(2.5);
  const auto rots = Orbit();
  const FrameLighting a(L, rots), b(L2, rots);
  const Vec3 n = Vec3(0.1, 0.3, -0.95).normalized();
  PixelObservations obs = Observe(n, Vec3(0.5, 0.45, 0.4), a);
  synth::Random rng(2);
  for (auto& I : obs.intensity) I += 0.005 * Vec3(rng.normal(), rng.normal(), rng.normal());
  const PixelResult ra = recover_pixel(obs, a, Tilt(n, 8.0), EMConfig{});
  const PixelResult rb = recover_pixel(obs, b, Tilt(n, 8.0), EMConfig{});
  EXPECT_LT(angle_deg(ra.state.n, rb.state.n), 1e-6);
  EXPECT_LT((ra.state.rho - 2.5 * rb.state.rho).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(RecoverPixel, NoRotationIsIllPosed) {
  const FrameLighting lights(SunSky(), std::vector<Mat3>(6, Mat3::Identity()));
  const PixelObservations obs = Observe(Vec3(0, 0, -1), Vec3::Constant(0.5), lights);
  const PixelResult r = recover_pixel(obs, lights, Vec3(0, 0, -1), EMConfig{});
  EXPECT_TRUE(r.ill_posed);
  EXPECT_FALSE(r.converged);
}

TEST(RecoverPixel, TooFewObservations) {
  const FrameLighting lights(SunSky(), Orbit(2));
  const PixelObservations obs = Observe(Vec3(0, 0, -1), Vec3::Constant(0.5), lights);
  EXPECT_THROW(recover_pixel(obs, lights, Vec3(0, 0, -1), EMConfig{}), TooFewObservations);
}

TEST(RecoverPixel, MultistartNeverLosesLikelihood) {
  const FrameLighting lights(SunSky(), Orbit());
  const Vec3 n = Vec3(0.2, 0.2, -0.96).normalized();
  PixelObservations obs = Observe(n, Vec3(0.4, 0.6, 0.5), lights);
  obs.intensity[4] = obs.intensity[9] = Vec3::Zero();
  const EMConfig cfg;
  const PixelResult one = recover_pixel(obs, lights, Tilt(n, 30.0), cfg);
  const PixelResult many = recover_pixel_multistart(obs, lights, Tilt(n, 30.0), cfg);
  EXPECT_GE(observed_log_likelihood(many.state, obs, lights, cfg),
            observed_log_likelihood(one.state, obs, lights, cfg));
}

struct MapFixture {
  synth::SyntheticScene scene;
  std::vector<synth::RenderedFrame> frames;
  std::vector<match::CorrespondenceField> fields;
  std::vector<FrameView> views;
  NormalMap init;

  explicit MapFixture(synth::AlbedoKind albedo) {
    scene = synth::default_scene();
    scene.K = {75.0, 75.0, 31.5, 31.5, 64, 64};
    scene.albedo.kind = albedo;
    scene.poses.resize(10);
    frames = synth::render_sequence(scene);
    fields.reserve(frames.size());
    for (std::size_t k = 0; k < frames.size(); ++k) {
      fields.push_back(match::rigid_correspondences(frames[0].depth, scene.K, scene.poses[k],
                                                    frames[k].image.mask, &frames[k].depth));
    }
    views.push_back({&frames[0].image, nullptr, Mat3::Identity()});
    for (std::size_t k = 1; k < frames.size(); ++k) {
      views.push_back({&frames[k].image, &fields[k], scene.poses[k].R});
    }
    init = normals_from_depth(synth::smooth_depth(frames[0].depth, {}), scene.K);
  }
};

TEST(RecoverMap, ConstantAlbedoSphere) {
  MapFixture f(synth::AlbedoKind::Constant);
  const RecoveredMaps m = recover_map(f.init, f.views, f.scene.lighting, f.scene.K, EMConfig{});
  const Mask core = erode(f.frames[0].image.mask, 4);
  double err = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < core.size(); ++i) {
    if (!core[i] || !m.normals.mask[i]) continue;
    err += angle_deg(m.normals.normals[i], f.frames[0].normals.normals[i]);
    ++n;
  }
  ASSERT_GT(n, 1000);
  EXPECT_LT(err / n, 0.5);
  EXPECT_GT(m.stats.converged, m.stats.pixels / 2);
  for (std::size_t i = 0; i < m.confidence.size(); ++i) {
    EXPECT_GE(m.confidence[i], 0.0);
    EXPECT_LE(m.confidence[i], 1.0);
  }
}

TEST(RecoverMap, IndependentOfSchedulingAndPixelOrder) {
  MapFixture f(synth::AlbedoKind::CheckerPatches);
  EMConfig cfg;
  cfg.restarts = 2;
  const unsigned saved = max_threads();
  set_max_threads(1);
  const RecoveredMaps a = recover_map(f.init, f.views, f.scene.lighting, f.scene.K, cfg);
  set_max_threads(3);
  const RecoveredMaps b = recover_map(f.init, f.views, f.scene.lighting, f.scene.K, cfg);
  set_max_threads(saved);
  EXPECT_EQ(a.normals.normals, b.normals.normals);
  EXPECT_EQ(a.albedo.albedo, b.albedo.albedo);
  EXPECT_EQ(a.confidence, b.confidence);

  // a pixel solved on its own, in reverse order, gives the same bits
  const std::vector<Mat3> rots = [&] {
    std::vector<Mat3> r;
    for (const auto& v : f.views) r.push_back(v.R);
    return r;
  }();
  const FrameLighting lights(f.scene.lighting, rots);
  int checked = 0;
  for (int v = 63; v >= 0; v -= 7) {
    for (int u = 63; u >= 0; u -= 5) {
      if (!f.init.mask(u, v)) continue;
      const PixelObservations obs = gather_observations(u, v, f.init.normals(u, v), f.views, f.scene.K, cfg);
      try {
        const PixelResult r = recover_pixel_multistart(obs, lights, f.init.normals(u, v), cfg);
        if (r.ill_posed) continue;
        EXPECT_EQ(r.state.n, a.normals.normals(u, v));
        ++checked;
      } catch (const NumericalError&) {
      }
    }
  }
  EXPECT_GT(checked, 20);
}

}  // namespace
}  // namespace rgbdps::recover
