#include "rgbdps/recover.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "rgbdps/parallel.hpp"

namespace rgbdps::recover {

void EMConfig::validate() const {
  RGBDPS_CHECK(alpha0 > 0.0 && alpha0 < 1.0, "em: alpha0 must lie in (0, 1)");
  RGBDPS_CHECK(sigma0 > 0.0, "em: sigma0 must be positive");
  RGBDPS_CHECK(C > 0.0, "em: C must be positive");
  RGBDPS_CHECK(max_iterations >= 1, "em: max_iterations must be >= 1");
  RGBDPS_CHECK(sigma_floor > 0.0, "em: sigma_floor must be positive");
  RGBDPS_CHECK(normal_iterations >= 1, "em: normal_iterations must be >= 1");
  RGBDPS_CHECK(min_frames >= 1, "em: min_frames must be >= 1");
  RGBDPS_CHECK(restarts >= 0, "em: restarts must be >= 0");
  RGBDPS_CHECK(restart_angle_deg > 0.0 && restart_angle_deg < 90.0,
               "em: restart_angle_deg must lie in (0, 90)");
  RGBDPS_CHECK(min_view_cosine >= 0.0 && min_view_cosine < 1.0,
               "em: min_view_cosine must lie in [0, 1)");
}

FrameLighting::FrameLighting(const QuadraticLighting& L, std::span<const Mat3> rotations) {
  per_frame.reserve(rotations.size());
  for (const auto& R : rotations) per_frame.push_back(rotate_lighting(L, R));
  rotations_.assign(rotations.begin(), rotations.end());
}

Vec3 shading_per_frame(const Vec3& n, const QuadraticLighting& L, const Mat3& R) {
  return shade_rgb(rotate_lighting(L, R), n);
}

double gaussian_density(double sq_residual, int dims, double sigma) {
  const double var = sigma * sigma;
  return std::pow(2.0 * std::numbers::pi * var, -0.5 * dims) * std::exp(-0.5 * sq_residual / var);
}

double inlier_posterior(double sq_residual, int dims, double sigma, double alpha, double C) {
  const double in = alpha * gaussian_density(sq_residual, dims, sigma);
  const double out = (1.0 - alpha) / C;
  if (in + out <= 0.0) return 0.0;
  return in / (in + out);
}

namespace {

constexpr int kDims = 3;

double sq_residual(const PixelEMState& s, const Vec3& I, const QuadraticLighting& Lk,
                   const Vec3& n) {
  return (s.rho.cwiseProduct(shade_rgb(Lk, n)) - I).squaredNorm();
}

// a log b with 0 log 0 = 0
double xlog(double a, double b) { return a == 0.0 ? 0.0 : a * std::log(b); }

}  // namespace

std::vector<double> e_step(const PixelEMState& s, const PixelObservations& obs,
                           const FrameLighting& lights, const EMConfig& cfg) {
  std::vector<double> w(obs.intensity.size());
  for (std::size_t k = 0; k < w.size(); ++k) {
    const double r2 = sq_residual(s, obs.intensity[k], lights.per_frame[obs.frame[k]], s.n);
    w[k] = inlier_posterior(r2, kDims, s.sigma, s.alpha, cfg.C);
  }
  return w;
}

void m_step_closed(PixelEMState& s, const PixelObservations& obs, const FrameLighting& lights,
                   const EMConfig& cfg) {
  const std::size_t N = obs.intensity.size();
  RGBDPS_CHECK(s.omega.size() == N, "m_step: omega size mismatch");
  double wsum = 0.0;
  Vec3 num = Vec3::Zero(), den = Vec3::Zero();
  std::vector<Vec3> shading(N);
  for (std::size_t k = 0; k < N; ++k) {
    shading[k] = shade_rgb(lights.per_frame[obs.frame[k]], s.n);
    const double w = s.omega[k];
    wsum += w;
    num += w * shading[k].cwiseProduct(obs.intensity[k]);
    den += w * shading[k].cwiseAbs2();
  }
  if (!(wsum >= 1e-9)) throw DegenerateWeights("m_step: inlier weights vanish");
  for (int ch = 0; ch < 3; ++ch) s.rho[ch] = den[ch] > 0.0 ? std::max(0.0, num[ch] / den[ch]) : 0.0;
  double r2 = 0.0;
  for (std::size_t k = 0; k < N; ++k) {
    r2 += s.omega[k] * (s.rho.cwiseProduct(shading[k]) - obs.intensity[k]).squaredNorm();
  }
  s.sigma = std::max(cfg.sigma_floor, std::sqrt(r2 / (kDims * wsum)));
  s.alpha = wsum / static_cast<double>(N);
}

double normal_objective(const Vec3& n, const Vec3& rho, const PixelObservations& obs,
                        const FrameLighting& lights, std::span<const double> omega) {
  double e = 0.0;
  for (std::size_t k = 0; k < obs.intensity.size(); ++k) {
    const Vec3 r = rho.cwiseProduct(shade_rgb(lights.per_frame[obs.frame[k]], n)) - obs.intensity[k];
    e += omega[k] * r.squaredNorm();
  }
  return e;
}

std::pair<Vec3, Vec3> tangent_basis(const Vec3& n) {
  const Vec3 t1 = n.unitOrthogonal();
  return {t1, n.cross(t1)};
}

namespace {

// J^T J and J^T r of the stacked residuals in tangent coordinates.
void normal_system(const Vec3& n, const Vec3& rho, const PixelObservations& obs,
                   const FrameLighting& lights, std::span<const double> omega,
                   const Vec3& t1, const Vec3& t2, Eigen::Matrix2d& H, Vec2& g) {
  H.setZero();
  g.setZero();
  for (std::size_t k = 0; k < obs.intensity.size(); ++k) {
    const double w = omega[k];
    if (w == 0.0) continue;
    const QuadraticLighting& Lk = lights.per_frame[obs.frame[k]];
    for (int ch = 0; ch < 3; ++ch) {
      const Vec3 grad = rho[ch] * Lk[ch].gradient(n);
      const Vec2 J(grad.dot(t1), grad.dot(t2));
      const double r = rho[ch] * Lk[ch].shade(n) - obs.intensity[k][ch];
      H += w * J * J.transpose();
      g += w * r * J;
    }
  }
}

}  // namespace

Vec2 normal_gradient(const Vec3& n, const Vec3& rho, const PixelObservations& obs,
                     const FrameLighting& lights, std::span<const double> omega) {
  const auto [t1, t2] = tangent_basis(n);
  Eigen::Matrix2d H;
  Vec2 g;
  normal_system(n, rho, obs, lights, omega, t1, t2, H, g);
  return 2.0 * g;
}

namespace {

// Albedo minimising the weighted residual at n, per channel.
Vec3 best_albedo(const Vec3& n, const PixelObservations& obs, const FrameLighting& lights,
                 std::span<const double> omega) {
  Vec3 num = Vec3::Zero(), den = Vec3::Zero();
  for (std::size_t k = 0; k < obs.intensity.size(); ++k) {
    const Vec3 sk = shade_rgb(lights.per_frame[obs.frame[k]], n);
    num += omega[k] * sk.cwiseProduct(obs.intensity[k]);
    den += omega[k] * sk.cwiseAbs2();
  }
  Vec3 rho;
  for (int ch = 0; ch < 3; ++ch) rho[ch] = den[ch] > 0.0 ? std::max(0.0, num[ch] / den[ch]) : 0.0;
  return rho;
}

}  // namespace

bool m_step_normal(PixelEMState& s, const PixelObservations& obs, const FrameLighting& lights,
                   const EMConfig& cfg) {
  // Albedo is profiled out: with rho held fixed the normal can only creep
  // along the valley where rho and n trade off.
  const std::size_t N = obs.intensity.size();
  std::vector<Vec3> shading(N), dshade1(N), dshade2(N);
  double f = normal_objective(s.n, s.rho, obs, lights, s.omega);
  for (int it = 0; it < cfg.normal_iterations; ++it) {
    const auto [t1, t2] = tangent_basis(s.n);
    Vec3 num = Vec3::Zero(), den = Vec3::Zero();
    Vec3 dnum1 = Vec3::Zero(), dnum2 = Vec3::Zero(), dden1 = Vec3::Zero(), dden2 = Vec3::Zero();
    for (std::size_t k = 0; k < N; ++k) {
      const QuadraticLighting& Lk = lights.per_frame[obs.frame[k]];
      const double w = s.omega[k];
      for (int ch = 0; ch < 3; ++ch) {
        const Vec3 g = Lk[ch].gradient(s.n);
        shading[k][ch] = Lk[ch].shade(s.n);
        dshade1[k][ch] = g.dot(t1);
        dshade2[k][ch] = g.dot(t2);
      }
      const Vec3& I = obs.intensity[k];
      num += w * shading[k].cwiseProduct(I);
      den += w * shading[k].cwiseAbs2();
      dnum1 += w * dshade1[k].cwiseProduct(I);
      dnum2 += w * dshade2[k].cwiseProduct(I);
      dden1 += 2.0 * w * shading[k].cwiseProduct(dshade1[k]);
      dden2 += 2.0 * w * shading[k].cwiseProduct(dshade2[k]);
    }
    Vec3 rho, drho1, drho2;
    for (int ch = 0; ch < 3; ++ch) {
      if (!(den[ch] > 0.0)) {
        rho[ch] = drho1[ch] = drho2[ch] = 0.0;
        continue;
      }
      rho[ch] = num[ch] / den[ch];
      drho1[ch] = (dnum1[ch] - rho[ch] * dden1[ch]) / den[ch];
      drho2[ch] = (dnum2[ch] - rho[ch] * dden2[ch]) / den[ch];
    }
    if (it == 0) {
      s.rho = rho.cwiseMax(0.0);
      f = normal_objective(s.n, s.rho, obs, lights, s.omega);
    }
    Eigen::Matrix2d H = Eigen::Matrix2d::Zero();
    Vec2 g = Vec2::Zero();
    for (std::size_t k = 0; k < N; ++k) {
      const double w = s.omega[k];
      if (w == 0.0) continue;
      for (int ch = 0; ch < 3; ++ch) {
        const Vec2 J(rho[ch] * dshade1[k][ch] + shading[k][ch] * drho1[ch],
                     rho[ch] * dshade2[k][ch] + shading[k][ch] * drho2[ch]);
        const double r = rho[ch] * shading[k][ch] - obs.intensity[k][ch];
        H += w * J * J.transpose();
        g += w * r * J;
      }
    }
    H.diagonal().array() += 1e-12 * (H.trace() + 1e-30);
    Vec2 delta = H.ldlt().solve(-g);
    if (!delta.allFinite()) return true;
    bool accepted = false;
    for (int half = 0; half < 30; ++half, delta *= 0.5) {
      const Vec3 trial = (s.n + delta.x() * t1 + delta.y() * t2).normalized();
      const Vec3 rho_t = best_albedo(trial, obs, lights, s.omega);
      const double ft = normal_objective(trial, rho_t, obs, lights, s.omega);
      if (ft < f) {
        s.n = trial;
        s.rho = rho_t;
        f = ft;
        accepted = true;
        break;
      }
    }
    if (!accepted || delta.norm() < 1e-10) return true;
  }
  return false;
}

double expected_log_likelihood(const PixelEMState& s, std::span<const double> omega,
                               const PixelObservations& obs, const FrameLighting& lights,
                               const EMConfig& cfg) {
  double q = 0.0;
  for (std::size_t k = 0; k < obs.intensity.size(); ++k) {
    const double r2 = sq_residual(s, obs.intensity[k], lights.per_frame[obs.frame[k]], s.n);
    const double log_g = -0.5 * kDims * std::log(2.0 * std::numbers::pi * s.sigma * s.sigma) -
                         0.5 * r2 / (s.sigma * s.sigma);
    q += xlog(omega[k], s.alpha) + omega[k] * log_g + xlog(1.0 - omega[k], (1.0 - s.alpha) / cfg.C);
  }
  return q;
}

double observed_log_likelihood(const PixelEMState& s, const PixelObservations& obs,
                               const FrameLighting& lights, const EMConfig& cfg) {
  double ll = 0.0;
  for (std::size_t k = 0; k < obs.intensity.size(); ++k) {
    const double r2 = sq_residual(s, obs.intensity[k], lights.per_frame[obs.frame[k]], s.n);
    ll += std::log(s.alpha * gaussian_density(r2, kDims, s.sigma) + (1.0 - s.alpha) / cfg.C);
  }
  return ll;
}

namespace {

bool lighting_varies(const PixelObservations& obs, const FrameLighting& lights) {
  const double limit = std::numbers::pi / 180.0;
  const Mat3& R0 = lights.rotation(obs.frame.front());
  for (int f : obs.frame) {
    if (rotation_angle(R0.transpose() * lights.rotation(f)) > limit) return true;
  }
  return false;
}

// Least-squares albedo at n with unit weights.
Vec3 plain_albedo(const Vec3& n, const PixelObservations& obs, const FrameLighting& lights) {
  PixelEMState s;
  s.n = n;
  s.omega.assign(obs.intensity.size(), 1.0);
  EMConfig cfg;
  m_step_closed(s, obs, lights, cfg);
  return s.rho;
}

// Per-channel median of I / s at n; insensitive to a minority of outliers.
Vec3 median_albedo(const Vec3& n, const PixelObservations& obs, const FrameLighting& lights) {
  Vec3 rho;
  std::vector<double> ratios;
  for (int ch = 0; ch < 3; ++ch) {
    ratios.clear();
    for (std::size_t k = 0; k < obs.intensity.size(); ++k) {
      const double sh = lights.per_frame[obs.frame[k]][ch].shade(n);
      if (sh > 1e-6) ratios.push_back(obs.intensity[k][ch] / sh);
    }
    if (ratios.empty()) return plain_albedo(n, obs, lights);
    auto mid = ratios.begin() + ratios.size() / 2;
    std::nth_element(ratios.begin(), mid, ratios.end());
    rho[ch] = std::max(0.0, *mid);
  }
  return rho;
}

// 1.4826 x the median residual norm over sqrt(3): the per-channel standard
// deviation of the bulk of the observations.
double robust_scale(const PixelEMState& s, const PixelObservations& obs,
                    const FrameLighting& lights, const EMConfig& cfg) {
  std::vector<double> r(obs.intensity.size());
  for (std::size_t k = 0; k < r.size(); ++k) {
    r[k] = (s.rho.cwiseProduct(shade_rgb(lights.per_frame[obs.frame[k]], s.n)) -
            obs.intensity[k]).norm();
  }
  auto mid = r.begin() + r.size() / 2;
  std::nth_element(r.begin(), mid, r.end());
  return std::max(cfg.sigma_floor, 1.4826 * *mid / std::sqrt(kDims));
}

}  // namespace

PixelResult recover_pixel(const PixelObservations& obs, const FrameLighting& lights,
                          const Vec3& n_init, const EMConfig& cfg) {
  const std::size_t N = obs.intensity.size();
  if (static_cast<int>(N) < cfg.min_frames) {
    throw TooFewObservations("recover_pixel: " + std::to_string(N) + " observations, need " +
                             std::to_string(cfg.min_frames));
  }
  PixelResult res;
  PixelEMState& s = res.state;
  s.n = n_init.normalized();
  s.omega.assign(N, 1.0);
  m_step_closed(s, obs, lights, cfg);
  s.sigma = cfg.sigma0;
  if (cfg.robust) {
    s.rho = median_albedo(s.n, obs, lights);
    if (cfg.robust_sigma_init) s.sigma = std::min(cfg.sigma0, robust_scale(s, obs, lights, cfg));
  }
  s.alpha = cfg.robust ? cfg.alpha0 : 1.0;
  if (!lighting_varies(obs, lights)) {
    res.ill_posed = true;
    return res;
  }
  const double cos_tol = std::cos(cfg.normal_tol_deg * std::numbers::pi / 180.0);
  for (int it = 0; it < cfg.max_iterations; ++it) {
    std::vector<double> omega = cfg.robust ? e_step(s, obs, lights, cfg) : std::vector<double>(N, 1.0);
    const PixelEMState prev = s;
    s.omega = omega;
    res.q_before.push_back(expected_log_likelihood(prev, omega, obs, lights, cfg));
    m_step_closed(s, obs, lights, cfg);
    if (!cfg.robust) s.alpha = 1.0;
    res.normal_nonconvergence = !m_step_normal(s, obs, lights, cfg);
    res.q_after.push_back(expected_log_likelihood(s, omega, obs, lights, cfg));
    res.iterations = it + 1;
    double drho = 0.0;
    for (int ch = 0; ch < 3; ++ch) {
      drho = std::max(drho, std::abs(s.rho[ch] - prev.rho[ch]) / std::max(s.rho[ch], 1e-12));
    }
    if (prev.n.dot(s.n) >= cos_tol && drho < cfg.albedo_tol) {
      res.converged = true;
      break;
    }
  }
  return res;
}

PixelResult recover_pixel_multistart(const PixelObservations& obs, const FrameLighting& lights,
                                     const Vec3& n_init, const EMConfig& cfg) {
  PixelResult best = recover_pixel(obs, lights, n_init, cfg);
  if (best.ill_posed || cfg.restarts == 0) return best;
  double best_ll = observed_log_likelihood(best.state, obs, lights, cfg);
  const Vec3 n0 = n_init.normalized();
  const auto [t1, t2] = tangent_basis(n0);
  const double tilt = cfg.restart_angle_deg * std::numbers::pi / 180.0;
  for (int j = 0; j < cfg.restarts; ++j) {
    const double phi = 2.0 * std::numbers::pi * j / cfg.restarts;
    const Vec3 start = std::cos(tilt) * n0 +
                       std::sin(tilt) * (std::cos(phi) * t1 + std::sin(phi) * t2);
    try {
      PixelResult r = recover_pixel(obs, lights, start, cfg);
      const double ll = observed_log_likelihood(r.state, obs, lights, cfg);
      if (ll > best_ll) {
        best_ll = ll;
        best = std::move(r);
      }
    } catch (const DegenerateWeights&) {
    }
  }
  return best;
}

PixelObservations gather_observations(int u, int v, const Vec3& n_ref,
                                      std::span<const FrameView> frames,
                                      const CameraIntrinsics& K, const EMConfig& cfg) {
  PixelObservations obs;
  for (std::size_t k = 0; k < frames.size(); ++k) {
    const FrameView& f = frames[k];
    std::optional<Vec3> I;
    Vec2 q(u, v);
    if (!f.field) {
      if (f.image->mask(u, v)) I = f.image->pixels(u, v);
    } else if (f.field->defined(u, v)) {
      q = f.field->q(u, v);
      I = sample_bicubic(*f.image, q, cfg.interior_samples);
    }
    if (!I) continue;
    if (cfg.min_view_cosine > 0.0 &&
        -(f.R * n_ref).dot(K.ray(q).normalized()) < cfg.min_view_cosine) {
      continue;
    }
    obs.intensity.push_back(*I);
    obs.frame.push_back(static_cast<int>(k));
  }
  return obs;
}

RecoveredMaps recover_map(const NormalMap& init_normals, std::span<const FrameView> frames,
                          const QuadraticLighting& L, const CameraIntrinsics& K,
                          const EMConfig& cfg) {
  cfg.validate();
  const int w = init_normals.normals.width(), h = init_normals.normals.height();
  std::vector<Mat3> rotations;
  for (const auto& f : frames) {
    RGBDPS_CHECK(f.image && f.image->pixels.same_shape(w, h), "recover_map: frame size mismatch");
    rotations.push_back(f.R);
  }
  const FrameLighting lights(L, rotations);
  RecoveredMaps out{{Image<Vec3>(w, h, Vec3::Zero()), Mask(w, h, 0)},
                    {Image<Vec3>(w, h, Vec3::Zero()), Mask(w, h, 0)},
                    Image<double>(w, h, 0.0),
                    Image<int>(w, h, 0),
                    {}};
  std::vector<std::uint8_t> converged(static_cast<std::size_t>(w) * h, 0);
  std::vector<std::uint8_t> fallback(converged.size(), 0);
  std::vector<double> alpha(converged.size(), 0.0);

  parallel_for(static_cast<std::size_t>(h), [&](std::size_t row) {
    const int v = static_cast<int>(row);
    for (int u = 0; u < w; ++u) {
      if (!init_normals.mask(u, v)) continue;
      const std::size_t i = static_cast<std::size_t>(v) * w + u;
      const Vec3 n0 = init_normals.normals(u, v);
      const PixelObservations obs = gather_observations(u, v, n0, frames, K, cfg);
      bool ok = false;
      try {
        const PixelResult r = recover_pixel_multistart(obs, lights, n0, cfg);
        if (!r.ill_posed) {
          out.normals.normals[i] = r.state.n;
          out.albedo.albedo[i] = r.state.rho;
          out.confidence[i] = r.converged ? r.state.alpha : 0.0;
          out.iterations[i] = r.iterations;
          converged[i] = r.converged;
          alpha[i] = r.state.alpha;
          ok = true;
        }
      } catch (const NumericalError&) {
      }
      if (!ok) {
        fallback[i] = 1;
        out.normals.normals[i] = n0;
        // With every observation filtered out, the reference pixel alone
        // still fixes the albedo at n0.
        PixelObservations basis = obs;
        for (std::size_t k = 0; basis.intensity.empty() && k < frames.size(); ++k) {
          if (!frames[k].field && frames[k].image->mask(u, v)) {
            basis.intensity.push_back(frames[k].image->pixels(u, v));
            basis.frame.push_back(static_cast<int>(k));
          }
        }
        if (!basis.intensity.empty()) {
          out.albedo.albedo[i] = plain_albedo(n0, basis, lights);
          out.albedo.mask[i] = 1;
        }
      } else {
        out.albedo.mask[i] = 1;
      }
      out.normals.mask[i] = 1;
    }
  });

  RecoverStats& st = out.stats;
  double iters = 0.0;
  for (std::size_t i = 0; i < converged.size(); ++i) {
    if (!out.normals.mask[i]) continue;
    ++st.pixels;
    st.converged += converged[i];
    st.fallback += fallback[i];
    if (!fallback[i]) {
      iters += out.iterations[i];
      st.mean_alpha += alpha[i];
    }
  }
  const std::size_t solved = st.pixels - st.fallback;
  if (solved > 0) {
    st.mean_iterations = iters / solved;
    st.mean_alpha /= solved;
  }
  return out;
}

}  // namespace rgbdps::recover
