#include "rgbdps/shading.hpp"

#include <cmath>
#include <numbers>

#include <boost/math/special_functions/legendre.hpp>
#include <nlohmann/json.hpp>

namespace rgbdps {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kY0 = 0.28209479177387814;   // 1/2 sqrt(1/pi)
constexpr double kY1 = 0.48860251190291992;   // sqrt(3/(4pi))
constexpr double kY2a = 1.0925484305920792;   // 1/2 sqrt(15/pi)
constexpr double kY20 = 0.31539156525252005;  // 1/4 sqrt(5/pi)
constexpr double kY22 = 0.54627421529603959;  // 1/4 sqrt(15/pi)

struct SphereRule {
  std::vector<Vec3> dirs;
  std::vector<double> weights;
};

SphereRule sphere_rule(int polar_nodes) {
  RGBDPS_CHECK(polar_nodes >= 4, "quadrature needs at least 4 polar nodes");
  // Gauss-Legendre in cos(theta), uniform in azimuth.
  const auto pos = boost::math::legendre_p_zeros<double>(polar_nodes);
  std::vector<double> z;
  for (double x : pos) {
    z.push_back(x);
    if (x != 0.0) z.push_back(-x);
  }
  const int azimuth_nodes = 2 * polar_nodes;
  SphereRule rule;
  rule.dirs.reserve(z.size() * azimuth_nodes);
  rule.weights.reserve(z.size() * azimuth_nodes);
  for (double zi : z) {
    const double dp = boost::math::legendre_p_prime(polar_nodes, zi);
    const double wz = 2.0 / ((1.0 - zi * zi) * dp * dp);
    const double r = std::sqrt(std::max(0.0, 1.0 - zi * zi));
    for (int j = 0; j < azimuth_nodes; ++j) {
      const double phi = 2.0 * kPi * (j + 0.5) / azimuth_nodes;
      rule.dirs.emplace_back(r * std::cos(phi), r * std::sin(phi), zi);
      rule.weights.push_back(wz * 2.0 * kPi / azimuth_nodes);
    }
  }
  return rule;
}

}  // namespace

ChannelLighting::Params ChannelLighting::params() const {
  Params p;
  p << A(0, 0), A(0, 1), A(0, 2), A(1, 1), A(1, 2), A(2, 2), b, c;
  return p;
}

ChannelLighting ChannelLighting::from_params(const Params& p) {
  ChannelLighting L;
  L.A << p[0], p[1], p[2],  //
      p[1], p[3], p[4],     //
      p[2], p[4], p[5];
  L.b = p.segment<3>(6);
  L.c = p[9];
  return L;
}

QuadraticLighting QuadraticLighting::ambient(double c) {
  QuadraticLighting L;
  for (auto& ch : L.channels) ch.c = c;
  return L;
}

QuadraticLighting QuadraticLighting::gray(const ChannelLighting& ch) {
  QuadraticLighting L;
  L.channels = {ch, ch, ch};
  return L;
}

void QuadraticLighting::validate() const {
  for (const auto& ch : channels) {
    RGBDPS_CHECK(ch.A.allFinite() && ch.b.allFinite() && std::isfinite(ch.c),
                 "lighting: non-finite coefficients");
    RGBDPS_CHECK((ch.A - ch.A.transpose()).cwiseAbs().maxCoeff() <= 1e-12,
                 "lighting: A must be symmetric");
  }
}

double shade(const QuadraticLighting& L, const Vec3& n, int channel) {
  return L.channels[channel].shade(n);
}

Vec3 shade_rgb(const QuadraticLighting& L, const Vec3& n) {
  return {L[0].shade(n), L[1].shade(n), L[2].shade(n)};
}

RadianceImage render(const QuadraticLighting& L, const NormalMap& normals,
                     const AlbedoMap& albedo) {
  RGBDPS_CHECK(normals.normals.same_shape(albedo.albedo),
               "render: normal and albedo maps differ in size");
  const int w = normals.width(), h = normals.height();
  RadianceImage out{Image<Vec3>(w, h, Vec3::Zero()), Mask(w, h, 0)};
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    if (!normals.mask[i] || !albedo.mask[i]) continue;
    out.pixels[i] = albedo.albedo[i].cwiseProduct(shade_rgb(L, normals.normals[i]));
    out.mask[i] = 1;
  }
  return out;
}

QuadraticLighting rotate_lighting(const QuadraticLighting& L, const Mat3& R) {
  QuadraticLighting out = L;
  for (int ch = 0; ch < 3; ++ch) out[ch] = L[ch].rotated(R);
  return out;
}

QuadraticLighting normalize_gauge(const QuadraticLighting& L,
                                  std::span<const Vec3> normals) {
  RGBDPS_CHECK(!normals.empty(), "normalize_gauge: no normals");
  QuadraticLighting out = L;
  for (int ch = 0; ch < 3; ++ch) {
    ChannelLighting& C = out[ch];
    const double tr = C.A.trace() / 3.0;
    C.A -= tr * Mat3::Identity();
    C.c += tr;
    double mean = 0.0;
    for (const auto& n : normals) mean += C.shade(n);
    mean /= static_cast<double>(normals.size());
    if (!(std::abs(mean) > 1e-12) || !std::isfinite(mean)) {
      throw NumericalError("normalize_gauge: mean shading vanishes");
    }
    const double t = 1.0 / mean;
    C = C.scaled(t);
    out.gauge[ch] *= t;
  }
  return out;
}

SHCoeffs sh_basis(const Vec3& d) {
  const double x = d.x(), y = d.y(), z = d.z();
  SHCoeffs Y;
  Y << kY0, kY1 * y, kY1 * z, kY1 * x, kY2a * x * y, kY2a * y * z,
      kY20 * (3.0 * z * z - 1.0), kY2a * x * z, kY22 * (x * x - y * y);
  return Y;
}

std::array<SHCoeffs, 3> project_environment(const EnvironmentRadiance& radiance,
                                            int polar_nodes) {
  const SphereRule rule = sphere_rule(polar_nodes);
  std::array<SHCoeffs, 3> out{SHCoeffs::Zero(), SHCoeffs::Zero(),
                              SHCoeffs::Zero()};
  for (std::size_t i = 0; i < rule.dirs.size(); ++i) {
    const Vec3 L = radiance(rule.dirs[i]);
    const SHCoeffs Y = sh_basis(rule.dirs[i]) * rule.weights[i];
    for (int ch = 0; ch < 3; ++ch) out[ch] += L[ch] * Y;
  }
  return out;
}

QuadraticLighting lighting_from_sh(const std::array<SHCoeffs, 3>& radiance) {
  constexpr double A0 = kPi, A1 = 2.0 * kPi / 3.0, A2 = kPi / 4.0;
  QuadraticLighting out;
  for (int ch = 0; ch < 3; ++ch) {
    const SHCoeffs& Lm = radiance[ch];
    ChannelLighting& C = out[ch];
    C.c = A0 * kY0 * Lm[0] - A2 * kY20 * Lm[6];
    C.b = A1 * kY1 * Vec3(Lm[3], Lm[1], Lm[2]);
    C.A(0, 0) = A2 * kY22 * Lm[8];
    C.A(1, 1) = -A2 * kY22 * Lm[8];
    C.A(2, 2) = 3.0 * A2 * kY20 * Lm[6];
    C.A(0, 1) = C.A(1, 0) = 0.5 * A2 * kY2a * Lm[4];
    C.A(1, 2) = C.A(2, 1) = 0.5 * A2 * kY2a * Lm[5];
    C.A(0, 2) = C.A(2, 0) = 0.5 * A2 * kY2a * Lm[7];
  }
  return out;
}

Vec3 irradiance_quadrature(const EnvironmentRadiance& radiance, const Vec3& n,
                           int polar_nodes) {
  const SphereRule rule = sphere_rule(polar_nodes);
  const Vec3 nn = n.normalized();
  Vec3 E = Vec3::Zero();
  for (std::size_t i = 0; i < rule.dirs.size(); ++i) {
    const double cosine = nn.dot(rule.dirs[i]);
    if (cosine <= 0.0) continue;
    E += rule.weights[i] * cosine * radiance(rule.dirs[i]);
  }
  return E;
}

Vec3 DirectionalEnvironment::operator()(const Vec3& w) const {
  const double c = std::max(0.0, w.dot(direction.normalized()));
  const double lobe = (exponent + 1.0) / (2.0 * kPi) * std::pow(c, exponent);
  return sun * lobe + sky / kPi;
}

QuadraticLighting lighting_from_environment(const DirectionalEnvironment& env) {
  return lighting_from_sh(project_environment(env));
}

nlohmann::json to_json(const QuadraticLighting& L) {
  nlohmann::json channels = nlohmann::json::array();
  for (int ch = 0; ch < 3; ++ch) {
    const auto& C = L[ch];
    channels.push_back({
        {"A", {C.A(0, 0), C.A(0, 1), C.A(0, 2), C.A(1, 1), C.A(1, 2), C.A(2, 2)}},
        {"b", {C.b[0], C.b[1], C.b[2]}},
        {"c", C.c},
        {"gauge", L.gauge[ch]},
    });
  }
  return {{"model", "quadratic"}, {"channels", channels}};
}

QuadraticLighting lighting_from_json(const nlohmann::json& j) {
  try {
    const auto& channels = j.at("channels");
    RGBDPS_CHECK(channels.is_array() && channels.size() == 3,
                 "lighting json: expected 3 channels");
    QuadraticLighting L;
    for (int ch = 0; ch < 3; ++ch) {
      const auto& c = channels[ch];
      const auto a = c.at("A").get<std::vector<double>>();
      const auto b = c.at("b").get<std::vector<double>>();
      RGBDPS_CHECK(a.size() == 6 && b.size() == 3,
                   "lighting json: A needs 6 entries, b needs 3");
      ChannelLighting::Params p;
      p << a[0], a[1], a[2], a[3], a[4], a[5], b[0], b[1], b[2],
          c.at("c").get<double>();
      L[ch] = ChannelLighting::from_params(p);
      L.gauge[ch] = c.value("gauge", 1.0);
    }
    L.validate();
    return L;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("lighting json: ") + e.what());
  }
}

}  // namespace rgbdps
