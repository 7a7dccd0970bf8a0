#include "rgbdps/lightest.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "rgbdps/parallel.hpp"
#include "rgbdps/synth.hpp"

namespace rgbdps::lightest {

void LightConfig::validate() const {
  RGBDPS_CHECK(tau_dark >= 0.0, "light: tau_dark must be non-negative");
  RGBDPS_CHECK(max_observations > 0, "light: max_observations must be positive");
  RGBDPS_CHECK(max_iterations > 0, "light: max_iterations must be positive");
  RGBDPS_CHECK(min_denominator > 0.0, "light: min_denominator must be positive");
  RGBDPS_CHECK(boundary_margin >= 0, "light: boundary_margin must be non-negative");
  RGBDPS_CHECK(min_view_cosine >= 0.0 && min_view_cosine < 1.0,
               "light: min_view_cosine must lie in [0, 1)");
}

double dark_weight(double intensity, double tau) {
  if (tau <= 0.0) return intensity > 0.0 ? 1.0 : 0.0;
  const double t = std::clamp((intensity - tau) / tau, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

std::vector<RatioObservation> build_ratio_set(const RadianceImage& ref,
                                              const NormalMap& ref_normals,
                                              const CameraIntrinsics& K,
                                              std::span<const RatioFrame> frames,
                                              const LightConfig& cfg) {
  cfg.validate();
  std::vector<std::vector<RatioObservation>> per_frame(frames.size());
  const Mask ref_core = erode(ref.mask, cfg.boundary_margin);
  parallel_for(frames.size(), [&](std::size_t fi) {
    const RatioFrame& f = frames[fi];
    RGBDPS_CHECK(f.image && f.normals && f.field, "build_ratio_set: incomplete frame");
    auto& out = per_frame[fi];
    const Mask core = erode(f.image->mask, cfg.boundary_margin);
    for (int v = 0; v < ref.height(); ++v) {
      for (int u = 0; u < ref.width(); ++u) {
        if (!ref_core(u, v) || !ref_normals.mask(u, v)) continue;
        if (!f.field->reliable(u, v)) continue;
        const Vec2 q = f.field->q(u, v);
        const int qu = static_cast<int>(std::lround(q.x())), qv = static_cast<int>(std::lround(q.y()));
        if (!core.contains(qu, qv) || !core(qu, qv)) continue;
        const auto Iq = sample_bilinear(*f.image, q);
        const auto nq = sample_bilinear(f.normals->normals, f.normals->mask, q);
        if (!Iq || !nq || nq->norm() < 0.5) continue;
        const Vec3 np = ref_normals.normals(u, v);
        const Vec3 nqn = nq->normalized();
        if (-np.dot(K.ray(Vec2(u, v)).normalized()) < cfg.min_view_cosine ||
            -nqn.dot(K.ray(q).normalized()) < cfg.min_view_cosine) {
          continue;
        }
        const Vec3& Ip = ref.pixels(u, v);
        if ((Ip.array() <= 0.0).any()) continue;
        RatioObservation o;
        o.p = Vec2(u, v);
        o.frame = f.index;
        o.ratio = Iq->cwiseQuotient(Ip);
        o.n_p = np;
        o.n_q = nqn;
        o.R = f.R;
        for (int ch = 0; ch < 3; ++ch) {
          o.gamma[ch] = dark_weight(std::min(Ip[ch], (*Iq)[ch]), cfg.tau_dark);
        }
        if (!o.ratio.allFinite() || o.gamma.maxCoeff() <= 0.0) continue;
        out.push_back(o);
      }
    }
  });
  std::vector<RatioObservation> all;
  for (auto& v : per_frame) all.insert(all.end(), v.begin(), v.end());
  return all;
}

ChannelLighting::Params shading_features(const Vec3& n) {
  ChannelLighting::Params f;
  const double x = n.x(), y = n.y(), z = n.z();
  f << x * x, 2 * x * y, 2 * x * z, y * y, 2 * y * z, z * z, x, y, z, 1.0;
  return f;
}

namespace {

// Per-observation terms that do not depend on the lighting.
struct Prepared {
  ChannelLighting::Params phi_q;  // of R (R^T n_q), the rotated-lighting numerator
  ChannelLighting::Params phi_p;
  Vec3 ratio;
  Vec3 gamma;
};

std::vector<Prepared> prepare(std::span<const RatioObservation> obs) {
  std::vector<Prepared> out(obs.size());
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const auto& o = obs[i];
    const Vec3 nq_ref = o.R.transpose() * o.n_q;
    out[i] = {shading_features(o.R * nq_ref), shading_features(o.n_p), o.ratio, o.gamma};
  }
  return out;
}

double objective(const ChannelLighting::Params& theta, std::span<const Prepared> obs, int ch,
                 double min_den) {
  double e = 0.0;
  for (const auto& o : obs) {
    if (o.gamma[ch] <= 0.0) continue;
    const double den = o.phi_p.dot(theta);
    if (std::abs(den) < min_den) continue;
    const double r = o.phi_q.dot(theta) / den - o.ratio[ch];
    e += o.gamma[ch] * r * r;
  }
  return e;
}

// Objective and scale are invariant to (A + tI, c - t) and to positive
// scaling; fix both so the parameters stay well conditioned.
ChannelLighting::Params canonical(const ChannelLighting::Params& theta) {
  ChannelLighting L = ChannelLighting::from_params(theta);
  const double tr = L.A.trace() / 3.0;
  L.A -= tr * Mat3::Identity();
  L.c += tr;
  ChannelLighting::Params p = L.params();
  const double n = p.norm();
  return n > 0.0 ? ChannelLighting::Params(p / n) : p;
}

ChannelFit fit_channel(ChannelLighting::Params& theta, std::span<const Prepared> obs, int ch,
                       const LightConfig& cfg) {
  using Mat10 = Eigen::Matrix<double, 10, 10>;
  ChannelFit fit;
  theta = canonical(theta);
  double e = objective(theta, obs, ch, cfg.min_denominator);
  fit.history.push_back(e);
  double mu = 1e-3;
  for (int it = 0; it < cfg.max_iterations; ++it) {
    fit.iterations = it + 1;
    Mat10 H = Mat10::Zero();
    ChannelLighting::Params g = ChannelLighting::Params::Zero();
    for (const auto& o : obs) {
      const double w = o.gamma[ch];
      if (w <= 0.0) continue;
      const double den = o.phi_p.dot(theta);
      if (std::abs(den) < cfg.min_denominator) continue;
      const double num = o.phi_q.dot(theta);
      const double r = num / den - o.ratio[ch];
      const ChannelLighting::Params J = o.phi_q / den - (num / (den * den)) * o.phi_p;
      H.selfadjointView<Eigen::Lower>().rankUpdate(J, w);
      g += w * r * J;
    }
    H = H.selfadjointView<Eigen::Lower>();
    bool accepted = false;
    for (int attempt = 0; attempt < 30; ++attempt) {
      Mat10 D = H;
      D.diagonal() += mu * (H.diagonal().array() + 1e-12).matrix();
      const ChannelLighting::Params step = D.ldlt().solve(-g);
      if (!step.allFinite()) {
        mu *= 10.0;
        continue;
      }
      const ChannelLighting::Params trial = canonical(theta + step);
      const double et = objective(trial, obs, ch, cfg.min_denominator);
      if (et <= e) {
        const double gain = e - et;
        theta = trial;
        e = et;
        mu = std::max(mu / 3.0, 1e-12);
        accepted = true;
        fit.history.push_back(e);
        if (gain <= 1e-14 * std::max(e, 1e-300) || step.norm() < 1e-12) fit.converged = true;
        break;
      }
      mu *= 4.0;
    }
    if (!accepted) {
      fit.converged = true;  // no further decrease reachable
      break;
    }
    if (fit.converged) break;
  }
  fit.objective = e;
  return fit;
}

bool all_rotations_close(std::span<const RatioObservation> obs) {
  if (obs.empty()) return true;
  const Mat3& R0 = obs.front().R;
  const double limit = 1.0 * std::numbers::pi / 180.0;
  return std::all_of(obs.begin(), obs.end(), [&](const RatioObservation& o) {
    return rotation_angle(R0.transpose() * o.R) <= limit;
  });
}

}  // namespace

double ratio_objective(const ChannelLighting& L, std::span<const RatioObservation> obs,
                       int channel, double min_denominator) {
  const auto prep = prepare(obs);
  return objective(L.params(), prep, channel, min_denominator);
}

LightingEstimate estimate_lighting(std::span<const RatioObservation> obs,
                                   std::span<const Vec3> gauge_normals, const LightConfig& cfg,
                                   const QuadraticLighting& initial) {
  cfg.validate();
  std::set<int> frames;
  for (const auto& o : obs) frames.insert(o.frame);
  if (obs.size() < cfg.min_observations || static_cast<int>(frames.size()) < cfg.min_frames) {
    throw InsufficientObservations("estimate_lighting: " + std::to_string(obs.size()) +
                                   " observations over " + std::to_string(frames.size()) +
                                   " frames; need " + std::to_string(cfg.min_observations) +
                                   " over " + std::to_string(cfg.min_frames));
  }
  LightingEstimate out;
  out.degenerate_motion = all_rotations_close(obs);

  // Seeded uniform subsample without replacement, kept in input order.
  std::vector<RatioObservation> used(obs.begin(), obs.end());
  if (used.size() > cfg.max_observations) {
    std::vector<std::size_t> idx(used.size());
    std::iota(idx.begin(), idx.end(), 0);
    synth::Random rng(cfg.seed);
    for (std::size_t i = 0; i < cfg.max_observations; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.uniform() * (idx.size() - i));
      std::swap(idx[i], idx[std::min(j, idx.size() - 1)]);
    }
    idx.resize(cfg.max_observations);
    std::sort(idx.begin(), idx.end());
    std::vector<RatioObservation> sub;
    sub.reserve(idx.size());
    for (auto i : idx) sub.push_back(used[i]);
    used = std::move(sub);
  }
  out.observations_used = used.size();
  const auto prep = prepare(used);

  QuadraticLighting L;
  parallel_for(3, [&](std::size_t ch) {
    ChannelLighting::Params theta = initial[static_cast<int>(ch)].params();
    out.fits[ch] = fit_channel(theta, prep, static_cast<int>(ch), cfg);
    L[static_cast<int>(ch)] = ChannelLighting::from_params(theta);
  });
  out.lighting = normalize_gauge(L, gauge_normals);
  return out;
}

std::vector<double> ratio_residuals(const QuadraticLighting& L,
                                    std::span<const RatioObservation> obs) {
  std::vector<double> out;
  out.reserve(obs.size() * 3);
  for (const auto& o : obs) {
    const Vec3 nq_ref = o.R.transpose() * o.n_q;
    const auto Lk = rotate_lighting(L, o.R);
    for (int ch = 0; ch < 3; ++ch) {
      if (o.gamma[ch] <= 0.0) continue;
      const double den = shade(L, o.n_p, ch);
      if (std::abs(den) < 1e-3) continue;
      out.push_back(shade(Lk, nq_ref, ch) / den - o.ratio[ch]);
    }
  }
  return out;
}

}  // namespace rgbdps::lightest
