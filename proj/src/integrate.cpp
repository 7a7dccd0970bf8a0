#include "rgbdps/integrate.hpp"

#include <cmath>
#include <limits>

#include <Eigen/Sparse>

namespace rgbdps::integrate {

void IntegrationConfig::validate() const {
  RGBDPS_CHECK(lambda_depth >= 0.0 && std::isfinite(lambda_depth),
               "integrate: lambda_depth must be finite and >= 0");
  RGBDPS_CHECK(tolerance > 0.0, "integrate: tolerance must be positive");
  RGBDPS_CHECK(max_iterations >= 1, "integrate: max_iterations must be >= 1");
  RGBDPS_CHECK(min_view_cosine > 0.0 && min_view_cosine < 1.0,
               "integrate: min_view_cosine must lie in (0, 1)");
}

std::optional<Vec2> depth_gradient(const Vec3& n, const Vec2& p, double z,
                                   const CameraIntrinsics& K, double min_view_cosine) {
  const Vec3 r = K.ray(p);
  const double nr = n.dot(r);
  if (std::abs(nr) < min_view_cosine * r.norm() * n.norm()) return std::nullopt;
  return Vec2(-z * n.x() / (K.fx * nr), -z * n.y() / (K.fy * nr));
}

namespace {

struct Edge {
  int a = 0, b = 0;  // unknown indices, b is the +u or +v neighbour
  double w = 0.0;
  double g = 0.0;
};

struct Problem {
  std::vector<int> index;          // pixel -> unknown, -1 outside
  std::vector<std::size_t> pixel;  // unknown -> pixel
  std::vector<double> prior;
  std::vector<Edge> edges;
};

Problem build(const NormalMap& normals, const DepthMap& prior, const Image<double>& confidence,
              const CameraIntrinsics& K, const IntegrationConfig& cfg) {
  const int w = prior.width(), h = prior.height();
  RGBDPS_CHECK(normals.normals.same_shape(w, h), "integrate: normal map size mismatch");
  RGBDPS_CHECK(confidence.empty() || confidence.same_shape(w, h),
               "integrate: confidence size mismatch");
  RGBDPS_CHECK(K.width == w && K.height == h, "integrate: intrinsics do not match the depth");
  Problem pb;
  pb.index.assign(static_cast<std::size_t>(w) * h, -1);
  for (std::size_t i = 0; i < pb.index.size(); ++i) {
    if (!prior.mask[i]) continue;
    RGBDPS_CHECK(std::isfinite(prior.depth[i]) && prior.depth[i] > 0.0,
                 "integrate: prior depth must be positive on its mask");
    pb.index[i] = static_cast<int>(pb.pixel.size());
    pb.pixel.push_back(i);
    pb.prior.push_back(prior.depth[i]);
  }
  std::vector<std::optional<Vec2>> grad(pb.index.size());
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (pb.index[i] < 0 || !normals.mask[i]) continue;
    const int u = static_cast<int>(i % w), v = static_cast<int>(i / w);
    grad[i] = depth_gradient(normals.normals[i], Vec2(u, v), prior.depth[i], K,
                             cfg.min_view_cosine);
  }
  auto conf = [&](std::size_t i) { return confidence.empty() ? 1.0 : confidence[i]; };
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const std::size_t i = static_cast<std::size_t>(v) * w + u;
      if (!grad[i]) continue;
      for (int axis = 0; axis < 2; ++axis) {
        const int un = u + (axis == 0), vn = v + (axis == 1);
        if (un >= w || vn >= h) continue;
        const std::size_t j = static_cast<std::size_t>(vn) * w + un;
        if (!grad[j]) continue;
        const double c = std::min(conf(i), conf(j));
        if (!(c > 0.0)) continue;
        // residuals measured as surface slope: one pixel spans z / f metres
        const double scale = (axis == 0 ? K.fx : K.fy) * 2.0 / (prior.depth[i] + prior.depth[j]);
        const double weight = c * scale * scale;
        pb.edges.push_back({pb.index[i], pb.index[j], weight,
                            0.5 * ((*grad[i])[axis] + (*grad[j])[axis])});
      }
    }
  }
  return pb;
}

double energy_of(const Problem& pb, const Eigen::VectorXd& z, double lambda) {
  double e = 0.0;
  for (const Edge& ed : pb.edges) {
    const double r = z[ed.b] - z[ed.a] - ed.g;
    e += ed.w * r * r;
  }
  for (std::size_t k = 0; k < pb.prior.size(); ++k) {
    const double d = z[static_cast<Eigen::Index>(k)] - pb.prior[k];
    e += lambda * d * d;
  }
  return e;
}

}  // namespace

IntegrationResult integrate_normals(const NormalMap& normals, const DepthMap& prior,
                                    const Image<double>& confidence,
                                    const CameraIntrinsics& K, const IntegrationConfig& cfg) {
  cfg.validate();
  const Problem pb = build(normals, prior, confidence, K, cfg);
  const auto n = static_cast<Eigen::Index>(pb.pixel.size());
  IntegrationResult res;
  res.depth = prior;
  if (n == 0) {
    res.converged = true;
    return res;
  }

  // Normal equations A z = b of the quadratic objective (halved).
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(pb.edges.size() * 4 + static_cast<std::size_t>(n));
  Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
  for (const Edge& e : pb.edges) {
    trips.emplace_back(e.a, e.a, e.w);
    trips.emplace_back(e.b, e.b, e.w);
    trips.emplace_back(e.a, e.b, -e.w);
    trips.emplace_back(e.b, e.a, -e.w);
    b[e.b] += e.w * e.g;
    b[e.a] -= e.w * e.g;
  }
  Eigen::VectorXd z(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    trips.emplace_back(k, k, cfg.lambda_depth);
    b[k] += cfg.lambda_depth * pb.prior[static_cast<std::size_t>(k)];
    z[k] = pb.prior[static_cast<std::size_t>(k)];
  }
  Eigen::SparseMatrix<double, Eigen::RowMajor> A(n, n);
  A.setFromTriplets(trips.begin(), trips.end());
  Eigen::VectorXd inv_diag = A.diagonal();
  for (Eigen::Index k = 0; k < n; ++k) inv_diag[k] = inv_diag[k] > 0.0 ? 1.0 / inv_diag[k] : 1.0;

  const double bnorm = std::max(b.norm(), 1e-300);
  Eigen::VectorXd r = b - A * z;
  Eigen::VectorXd s = inv_diag.cwiseProduct(r);
  Eigen::VectorXd p = s;
  double rs = r.dot(s);
  res.energy.push_back(energy_of(pb, z, cfg.lambda_depth));
  res.relative_residual = r.norm() / bnorm;
  bool finite = true;
  while (res.relative_residual > cfg.tolerance && res.iterations < cfg.max_iterations) {
    const Eigen::VectorXd Ap = A * p;
    const double pAp = p.dot(Ap);
    if (!(pAp > 0.0)) break;
    const double step = rs / pAp;
    z += step * p;
    r -= step * Ap;
    s = inv_diag.cwiseProduct(r);
    const double rs_next = r.dot(s);
    p = s + (rs_next / rs) * p;
    rs = rs_next;
    ++res.iterations;
    res.relative_residual = r.norm() / bnorm;
    res.energy.push_back(energy_of(pb, z, cfg.lambda_depth));
    if (!std::isfinite(res.relative_residual)) {
      finite = false;
      break;
    }
  }
  res.converged = finite && res.relative_residual <= cfg.tolerance;
  if (!res.converged || !z.allFinite()) {
    res.diverged = true;
    return res;
  }
  for (Eigen::Index k = 0; k < n; ++k) res.depth.depth[pb.pixel[static_cast<std::size_t>(k)]] = z[k];
  return res;
}

double integration_energy(const Image<double>& z, const NormalMap& normals,
                          const DepthMap& prior, const Image<double>& confidence,
                          const CameraIntrinsics& K, const IntegrationConfig& cfg) {
  cfg.validate();
  RGBDPS_CHECK(z.same_shape(prior.depth), "integrate: depth size mismatch");
  const Problem pb = build(normals, prior, confidence, K, cfg);
  Eigen::VectorXd x(static_cast<Eigen::Index>(pb.pixel.size()));
  for (std::size_t k = 0; k < pb.pixel.size(); ++k) x[static_cast<Eigen::Index>(k)] = z[pb.pixel[k]];
  return energy_of(pb, x, cfg.lambda_depth);
}

io::TriangleMesh export_mesh(const DepthMap& depth, const CameraIntrinsics& K,
                             double discontinuity) {
  RGBDPS_CHECK(discontinuity > 0.0, "export_mesh: discontinuity threshold must be positive");
  const int w = depth.width(), h = depth.height();
  io::TriangleMesh mesh;
  std::vector<std::int32_t> vid(static_cast<std::size_t>(w) * h, -1);
  std::vector<Vec3> pos;
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const std::size_t i = static_cast<std::size_t>(v) * w + u;
      if (!depth.mask[i] || !(depth.depth[i] > 0.0)) continue;
      vid[i] = static_cast<std::int32_t>(pos.size());
      pos.push_back(K.backproject(Vec2(u, v), depth.depth[i]));
    }
  }
  auto id = [&](int u, int v) { return vid[static_cast<std::size_t>(v) * w + u]; };
  auto coherent = [&](std::initializer_list<std::int32_t> c) {
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for (auto k : c) {
      lo = std::min(lo, pos[k].z());
      hi = std::max(hi, pos[k].z());
    }
    return hi - lo <= discontinuity * lo;
  };
  auto add = [&](std::int32_t a, std::int32_t b, std::int32_t c) {
    if (coherent({a, b, c})) mesh.faces.push_back({a, b, c});
  };
  for (int v = 0; v + 1 < h; ++v) {
    for (int u = 0; u + 1 < w; ++u) {
      // a b
      // c d   (u to the right, v down)
      const auto a = id(u, v), b = id(u + 1, v), c = id(u, v + 1), d = id(u + 1, v + 1);
      const int valid = (a >= 0) + (b >= 0) + (c >= 0) + (d >= 0);
      if (valid == 4) {
        add(a, c, b);
        add(b, c, d);
      } else if (valid == 3) {
        if (a < 0) add(b, c, d);
        if (b < 0) add(a, c, d);
        if (c < 0) add(a, d, b);
        if (d < 0) add(a, c, b);
      }
    }
  }
  std::vector<Vec3> vn(pos.size(), Vec3::Zero());
  for (const auto& f : mesh.faces) {
    const Vec3 fn = (pos[f[1]] - pos[f[0]]).cross(pos[f[2]] - pos[f[0]]);  // 2 x area
    for (auto k : f) vn[k] += fn;
  }
  mesh.vertices.reserve(pos.size());
  mesh.normals.reserve(pos.size());
  for (std::size_t k = 0; k < pos.size(); ++k) {
    mesh.vertices.push_back(pos[k].cast<float>());
    const Vec3 nk = vn[k].norm() > 0.0 ? vn[k].normalized() : Vec3(-pos[k].normalized());
    mesh.normals.push_back(nk.cast<float>());
  }
  return mesh;
}

}  // namespace rgbdps::integrate
