#include "rgbdps/match.hpp"

#include <cmath>
#include <limits>

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include "rgbdps/parallel.hpp"

namespace rgbdps::match {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

void MatchConfig::validate() const {
  RGBDPS_CHECK(patch_radius >= 1 && search_radius >= 1, "match: radii must be >= 1");
  RGBDPS_CHECK(thres_score > 0.0 && thres_score < 1.0, "match: thres_S must lie in (0, 1)");
  RGBDPS_CHECK(thres_peak > 0.0 && thres_peak < 1.0, "match: thres_delta must lie in (0, 1)");
  RGBDPS_CHECK(lattice_spacing >= 2, "match: lattice spacing must be >= 2");
  RGBDPS_CHECK(lambda >= 0.0, "match: lambda must be non-negative");
  RGBDPS_CHECK(max_iterations >= 0, "match: max_iterations must be non-negative");
  RGBDPS_CHECK(min_patch_coverage > 0.0 && min_patch_coverage <= 1.0,
               "match: min_patch_coverage must lie in (0, 1]");
  RGBDPS_CHECK(gain_lambda > 0.0, "match: gain_lambda must be positive");
}

CorrespondenceField CorrespondenceField::empty(int width, int height) {
  return {Image<Vec2>(width, height, Vec2::Constant(kNaN)), Mask(width, height, 0),
          Mask(width, height, 0), Image<double>(width, height, kNaN)};
}

CorrespondenceField CorrespondenceField::identity(const Mask& mask) {
  auto f = empty(mask.width(), mask.height());
  for (int v = 0; v < mask.height(); ++v) {
    for (int u = 0; u < mask.width(); ++u) {
      if (!mask(u, v)) continue;
      f.q(u, v) = Vec2(u, v);
      f.defined(u, v) = f.reliable(u, v) = 1;
      f.score(u, v) = 1.0;
    }
  }
  return f;
}

double CorrespondenceField::mean_reliable_score() const {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < score.size(); ++i) {
    if (!reliable[i]) continue;
    sum += score[i];
    ++n;
  }
  return n ? sum / n : 0.0;
}

RadianceImage chroma_normalize(const RadianceImage& img, double dark) {
  RadianceImage out{Image<Vec3>(img.width(), img.height(), Vec3::Zero()),
                    Mask(img.width(), img.height(), 0)};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    if (!img.mask[i]) continue;
    const double sum = img.pixels[i].sum();
    if (!(sum >= dark)) continue;
    out.pixels[i] = img.pixels[i] / sum;
    out.mask[i] = 1;
  }
  return out;
}

WarpedImage warp_reference(const RadianceImage& ref, const DepthMap& ref_depth,
                           const CameraIntrinsics& K, const RigidPose& pose) {
  const int w = ref.width(), h = ref.height();
  RGBDPS_CHECK(ref_depth.depth.same_shape(w, h), "warp_reference: depth/image size mismatch");
  WarpedImage out{{Image<Vec3>(w, h, Vec3::Zero()), Mask(w, h, 0)},
                  Image<double>(w, h, std::numeric_limits<double>::infinity())};

  Image<Projection> proj(w, h);
  Mask ok(w, h, 0);
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      if (!ref.mask(u, v) || !ref_depth.mask(u, v)) continue;
      proj(u, v) = project_pixel(Vec2(u, v), ref_depth.depth(u, v), K, pose);
      ok(u, v) = proj(u, v).status != ProjectionStatus::NonPositiveDepth;
    }
  }

  auto raster = [&](const std::array<Vec2, 3>& src) {
    std::array<Vec2, 3> q;
    std::array<double, 3> z;
    std::array<Vec3, 3> c;
    double zmin = std::numeric_limits<double>::infinity(), zmax = 0.0;
    for (int i = 0; i < 3; ++i) {
      const int u = static_cast<int>(src[i].x()), v = static_cast<int>(src[i].y());
      if (!ok(u, v)) return;
      q[i] = proj(u, v).q;
      z[i] = proj(u, v).depth;
      c[i] = ref.pixels(u, v);
      zmin = std::min(zmin, ref_depth.depth(u, v));
      zmax = std::max(zmax, ref_depth.depth(u, v));
    }
    if (zmax - zmin > 0.02 * zmin) return;
    const Vec2 e1 = q[1] - q[0], e2 = q[2] - q[0];
    const double area = e1.x() * e2.y() - e1.y() * e2.x();
    if (!(area > 1e-12)) return;  // turned away from the frame camera
    const int u0 = std::max(0, static_cast<int>(std::ceil(std::min({q[0].x(), q[1].x(), q[2].x()}))));
    const int u1 = std::min(w - 1, static_cast<int>(std::floor(std::max({q[0].x(), q[1].x(), q[2].x()}))));
    const int v0 = std::max(0, static_cast<int>(std::ceil(std::min({q[0].y(), q[1].y(), q[2].y()}))));
    const int v1 = std::min(h - 1, static_cast<int>(std::floor(std::max({q[0].y(), q[1].y(), q[2].y()}))));
    for (int v = v0; v <= v1; ++v) {
      for (int u = u0; u <= u1; ++u) {
        const Vec2 d = Vec2(u, v) - q[0];
        const double l1 = (d.x() * e2.y() - d.y() * e2.x()) / area;
        const double l2 = (e1.x() * d.y() - e1.y() * d.x()) / area;
        const double l0 = 1.0 - l1 - l2;
        constexpr double eps = -1e-9;
        if (l0 < eps || l1 < eps || l2 < eps) continue;
        const double depth = l0 * z[0] + l1 * z[1] + l2 * z[2];
        if (depth >= out.depth(u, v)) continue;
        out.depth(u, v) = depth;
        out.image.pixels(u, v) = l0 * c[0] + l1 * c[1] + l2 * c[2];
        out.image.mask(u, v) = 1;
      }
    }
  };

  for (int v = 0; v + 1 < h; ++v) {
    for (int u = 0; u + 1 < w; ++u) {
      raster({Vec2(u, v), Vec2(u + 1, v), Vec2(u, v + 1)});
      raster({Vec2(u + 1, v), Vec2(u + 1, v + 1), Vec2(u, v + 1)});
    }
  }
  for (std::size_t i = 0; i < out.depth.size(); ++i) {
    if (!out.image.mask[i]) out.depth[i] = 0.0;
  }
  return out;
}

std::optional<double> ncc_score(std::span<const Vec3> a, std::span<const Vec3> b,
                                std::span<const std::uint8_t> valid_a,
                                std::span<const std::uint8_t> valid_b) {
  RGBDPS_CHECK(a.size() == b.size(), "ncc_score: patch sizes differ");
  RGBDPS_CHECK(valid_a.empty() || valid_a.size() == a.size(), "ncc_score: bad mask size");
  RGBDPS_CHECK(valid_b.empty() || valid_b.size() == b.size(), "ncc_score: bad mask size");
  double n = 0.0, sa = 0.0, sb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if ((!valid_a.empty() && !valid_a[i]) || (!valid_b.empty() && !valid_b[i])) continue;
    n += 3.0;
    sa += a[i].sum();
    sb += b[i].sum();
  }
  if (n == 0.0) return std::nullopt;
  const double ma = sa / n, mb = sb / n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if ((!valid_a.empty() && !valid_a[i]) || (!valid_b.empty() && !valid_b[i])) continue;
    const Vec3 da = a[i].array() - ma;
    const Vec3 db = b[i].array() - mb;
    cov += da.dot(db);
    va += da.squaredNorm();
    vb += db.squaredNorm();
  }
  if (!(va > 1e-14) || !(vb > 1e-14)) return std::nullopt;
  return std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
}

bool is_reliable(double best, std::optional<double> second_peak, const MatchConfig& cfg) {
  if (!(best >= cfg.thres_score)) return false;
  return !second_peak || best - *second_peak >= cfg.thres_peak;
}

PeakAnalysis analyze_scores(std::span<const double> scores, int r, const MatchConfig& cfg) {
  const int n = 2 * r + 1;
  RGBDPS_CHECK(scores.size() == static_cast<std::size_t>(n * n), "analyze_scores: bad window size");
  auto at = [&](int dx, int dy) {
    if (std::abs(dx) > r || std::abs(dy) > r) return kNaN;
    return scores[(dy + r) * n + (dx + r)];
  };
  PeakAnalysis out;
  int bx = 0, by = 0;
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx) {
      const double s = at(dx, dy);
      if (std::isnan(s)) continue;
      if (!out.found || s > out.best) {
        out.found = true;
        out.best = s;
        bx = dx;
        by = dy;
      }
    }
  }
  if (!out.found) return out;
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx) {
      if (dx == bx && dy == by) continue;
      const double s = at(dx, dy);
      if (std::isnan(s)) continue;
      bool peak = true;
      for (int ey = -1; ey <= 1 && peak; ++ey) {
        for (int ex = -1; ex <= 1; ++ex) {
          if (ex == 0 && ey == 0) continue;
          const double t = at(dx + ex, dy + ey);
          if (!std::isnan(t) && t > s) {
            peak = false;
            break;
          }
        }
      }
      if (peak && (!out.second || s > *out.second)) out.second = s;
    }
  }
  auto refine = [](double sm, double s0, double sp) {
    if (std::isnan(sm) || std::isnan(sp)) return 0.0;
    const double denom = sm - 2.0 * s0 + sp;
    if (!(denom < 0.0)) return 0.0;
    return std::clamp(0.5 * (sm - sp) / denom, -0.5, 0.5);
  };
  out.offset = Vec2(bx + refine(at(bx - 1, by), out.best, at(bx + 1, by)),
                    by + refine(at(bx, by - 1), out.best, at(bx, by + 1)));
  out.on_border = std::abs(bx) == r || std::abs(by) == r;
  out.reliable = !out.on_border && is_reliable(out.best, out.second, cfg);
  return out;
}

SearchResult search_matches(const RadianceImage& A, const RadianceImage& B,
                            const MatchConfig& cfg) {
  cfg.validate();
  const int w = A.width(), h = A.height();
  RGBDPS_CHECK(B.pixels.same_shape(w, h), "search_matches: image sizes differ");
  SearchResult res{Image<Vec2>(w, h, Vec2::Zero()), Mask(w, h, 0), Mask(w, h, 0),
                   Image<double>(w, h, kNaN), Image<double>(w, h, kNaN)};

  std::vector<int> pix;  // linear indices of searched pixels
  int bu0 = w, bu1 = -1, bv0 = h, bv1 = -1;
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      if (!A.mask(u, v)) continue;
      pix.push_back(v * w + u);
      bu0 = std::min(bu0, u);
      bu1 = std::max(bu1, u);
      bv0 = std::min(bv0, v);
      bv1 = std::max(bv1, v);
    }
  }
  if (pix.empty()) return res;

  const int pr = cfg.patch_radius, sr = cfg.search_radius;
  const int nd = (2 * sr + 1) * (2 * sr + 1);
  const double full = (2.0 * pr + 1) * (2.0 * pr + 1);
  const double min_count = cfg.min_patch_coverage * full;

  // Region whose box sums are needed.
  const int eu0 = std::max(0, bu0 - pr), eu1 = std::min(w - 1, bu1 + pr);
  const int ev0 = std::max(0, bv0 - pr), ev1 = std::min(h - 1, bv1 + pr);
  const int ew = eu1 - eu0 + 1, eh = ev1 - ev0 + 1;

  std::vector<float> scores(static_cast<std::size_t>(nd) * pix.size(),
                            std::numeric_limits<float>::quiet_NaN());

  auto valid_a = [&](int u, int v) { return A.mask(u, v) != 0; };
  auto valid_b = [&](int u, int v) { return B.pixels.contains(u, v) && B.mask(u, v); };

  parallel_for(static_cast<std::size_t>(nd), [&](std::size_t di) {
    const int dx = static_cast<int>(di) % (2 * sr + 1) - sr;
    const int dy = static_cast<int>(di) / (2 * sr + 1) - sr;
    // Summed-area tables of m, m*sumA, m*sumB, m*|A|^2, m*|B|^2, m*A.B.
    constexpr int kC = 6;
    std::vector<double> sat(static_cast<std::size_t>(ew + 1) * (eh + 1) * kC, 0.0);
    auto S = [&](int x, int y, int c) -> double& {
      return sat[(static_cast<std::size_t>(y) * (ew + 1) + x) * kC + c];
    };
    for (int y = 0; y < eh; ++y) {
      double row[kC] = {0, 0, 0, 0, 0, 0};
      for (int x = 0; x < ew; ++x) {
        const int u = eu0 + x, v = ev0 + y;
        if (valid_a(u, v) && valid_b(u + dx, v + dy)) {
          const Vec3& a = A.pixels(u, v);
          const Vec3& b = B.pixels(u + dx, v + dy);
          row[0] += 1.0;
          row[1] += a.sum();
          row[2] += b.sum();
          row[3] += a.squaredNorm();
          row[4] += b.squaredNorm();
          row[5] += a.dot(b);
        }
        for (int c = 0; c < kC; ++c) S(x + 1, y + 1, c) = S(x + 1, y, c) + row[c];
      }
    }
    for (std::size_t pi = 0; pi < pix.size(); ++pi) {
      const int u = pix[pi] % w, v = pix[pi] / w;
      if (!valid_b(u + dx, v + dy)) continue;
      const int x0 = std::max(u - pr, eu0) - eu0, x1 = std::min(u + pr, eu1) - eu0 + 1;
      const int y0 = std::max(v - pr, ev0) - ev0, y1 = std::min(v + pr, ev1) - ev0 + 1;
      double s[kC];
      for (int c = 0; c < kC; ++c) s[c] = S(x1, y1, c) - S(x0, y1, c) - S(x1, y0, c) + S(x0, y0, c);
      if (s[0] < min_count) continue;
      const double n = 3.0 * s[0];
      const double va = s[3] - s[1] * s[1] / n;
      const double vb = s[4] - s[2] * s[2] / n;
      if (!(va > 1e-14) || !(vb > 1e-14)) continue;
      const double cov = s[5] - s[1] * s[2] / n;
      scores[pi * nd + di] = static_cast<float>(std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0));
    }
  });

  parallel_for(pix.size(), [&](std::size_t pi) {
    std::vector<double> window(nd);
    for (int di = 0; di < nd; ++di) window[di] = scores[pi * nd + di];
    const PeakAnalysis pa = analyze_scores(window, sr, cfg);
    if (!pa.found) return;
    const int idx = pix[pi];
    res.displacement[idx] = pa.offset;
    res.matched[idx] = 1;
    res.reliable[idx] = pa.reliable;
    res.best[idx] = pa.best;
    res.second[idx] = pa.second ? *pa.second : kNaN;
  });
  return res;
}

DeformationLattice::DeformationLattice(int width, int height, int spacing)
    : spacing_(spacing) {
  RGBDPS_CHECK(width >= 1 && height >= 1 && spacing >= 1, "lattice: bad size");
  nx_ = (width - 1 + spacing - 1) / spacing + 1;
  ny_ = (height - 1 + spacing - 1) / spacing + 1;
  nx_ = std::max(nx_, 2);
  ny_ = std::max(ny_, 2);
  delta_.assign(static_cast<std::size_t>(nx_) * ny_, Vec2::Zero());
  initial_ = delta_;
  support_.assign(delta_.size(), 0);
}

bool DeformationLattice::contains(const Vec2& p) const {
  return p.x() >= 0.0 && p.y() >= 0.0 && p.x() <= (nx_ - 1) * spacing_ &&
         p.y() <= (ny_ - 1) * spacing_;
}

std::array<std::pair<int, double>, 4> DeformationLattice::weights(const Vec2& p) const {
  if (!contains(p)) throw OutsideLattice("point outside the deformation lattice");
  const double gx = p.x() / spacing_, gy = p.y() / spacing_;
  const int i = std::min(static_cast<int>(gx), nx_ - 2);
  const int j = std::min(static_cast<int>(gy), ny_ - 2);
  const double fx = gx - i, fy = gy - j;
  return {{{index(i, j), (1 - fx) * (1 - fy)},
           {index(i + 1, j), fx * (1 - fy)},
           {index(i, j + 1), (1 - fx) * fy},
           {index(i + 1, j + 1), fx * fy}}};
}

Vec2 DeformationLattice::displacement(const Vec2& p) const {
  Vec2 d = Vec2::Zero();
  for (const auto& [idx, wgt] : weights(p)) d += wgt * delta_[idx];
  return d;
}

Vec2 DeformationLattice::apply(const Vec2& p) const { return p + displacement(p); }

DeformationLattice fit_lattice(std::span<const ScatteredMatch> matches, int width,
                               int height, const MatchConfig& cfg) {
  if (matches.size() < 4) {
    throw TooFewMatches("fit_lattice: " + std::to_string(matches.size()) +
                        " reliable matches, need at least 4");
  }
  DeformationLattice lat(width, height, cfg.lattice_spacing);
  const double radius = 1.5 * cfg.lattice_spacing;
  const int nx = lat.nx(), ny = lat.ny();
  std::vector<Vec2> acc(lat.vertex_count(), Vec2::Zero());
  std::vector<double> wsum(lat.vertex_count(), 0.0);
  const int reach = static_cast<int>(std::ceil(radius / cfg.lattice_spacing));
  for (const auto& m : matches) {
    const int ci = static_cast<int>(std::lround(m.position.x() / cfg.lattice_spacing));
    const int cj = static_cast<int>(std::lround(m.position.y() / cfg.lattice_spacing));
    for (int j = std::max(0, cj - reach); j <= std::min(ny - 1, cj + reach); ++j) {
      for (int i = std::max(0, ci - reach); i <= std::min(nx - 1, ci + reach); ++i) {
        const double dist = (lat.vertex_position(i, j) - m.position).norm();
        if (dist > radius) continue;
        const double wgt = 1.0 / std::max(dist, 1.0);
        const int idx = lat.index(i, j);
        acc[idx] += wgt * m.displacement;
        wsum[idx] += wgt;
        ++lat.support()[idx];
      }
    }
  }
  auto& init = lat.initial();
  Vec2 mean = Vec2::Zero();
  int supported = 0;
  for (std::size_t i = 0; i < init.size(); ++i) {
    if (lat.support()[i] == 0) continue;
    init[i] = acc[i] / wsum[i];
    mean += init[i];
    ++supported;
  }
  if (supported == 0) throw TooFewMatches("fit_lattice: no vertex is supported");
  mean /= supported;
  // Harmonic fill: unsupported vertices relax to the mean of their neighbours.
  for (std::size_t i = 0; i < init.size(); ++i) {
    if (lat.support()[i] == 0) init[i] = mean;
  }
  for (int sweep = 0; sweep < 10000; ++sweep) {
    double change = 0.0;
    for (int j = 0; j < ny; ++j) {
      for (int i = 0; i < nx; ++i) {
        const int idx = lat.index(i, j);
        if (lat.support()[idx] != 0) continue;
        Vec2 sum = Vec2::Zero();
        int n = 0;
        if (i > 0) sum += init[lat.index(i - 1, j)], ++n;
        if (i + 1 < nx) sum += init[lat.index(i + 1, j)], ++n;
        if (j > 0) sum += init[lat.index(i, j - 1)], ++n;
        if (j + 1 < ny) sum += init[lat.index(i, j + 1)], ++n;
        const Vec2 next = sum / n;
        change = std::max(change, (next - init[idx]).cwiseAbs().maxCoeff());
        init[idx] = next;
      }
    }
    if (change < 1e-9) break;
  }
  lat.delta() = init;
  return lat;
}

namespace {

// Central-difference gradients of a masked image; one-sided at mask borders.
struct Gradients {
  Image<Vec3> gx, gy;
  Mask mask;
};

Gradients image_gradients(const RadianceImage& img) {
  const int w = img.width(), h = img.height();
  Gradients g{Image<Vec3>(w, h, Vec3::Zero()), Image<Vec3>(w, h, Vec3::Zero()), Mask(w, h, 0)};
  auto ok = [&](int u, int v) { return img.pixels.contains(u, v) && img.mask(u, v); };
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      if (!ok(u, v)) continue;
      const bool l = ok(u - 1, v), r = ok(u + 1, v), t = ok(u, v - 1), b = ok(u, v + 1);
      if (!(l || r) || !(t || b)) continue;
      g.gx(u, v) = (l && r) ? Vec3(0.5 * (img.pixels(u + 1, v) - img.pixels(u - 1, v)))
                   : r      ? Vec3(img.pixels(u + 1, v) - img.pixels(u, v))
                            : Vec3(img.pixels(u, v) - img.pixels(u - 1, v));
      g.gy(u, v) = (t && b) ? Vec3(0.5 * (img.pixels(u, v + 1) - img.pixels(u, v - 1)))
                   : b      ? Vec3(img.pixels(u, v + 1) - img.pixels(u, v))
                            : Vec3(img.pixels(u, v) - img.pixels(u, v - 1));
      g.mask(u, v) = 1;
    }
  }
  return g;
}

// Photo-consistency is measured on the 8-bit intensity scale, so lambda keeps
// its customary magnitude.
constexpr double kDataScale = 255.0 * 255.0;
constexpr double kUnsampledCost = 0.01;
constexpr double kGainTolerance = 1e-4;

}  // namespace

double lattice_energy(const DeformationLattice& lat, const RadianceImage& ref_cn,
                      const RadianceImage& target_cn, double lambda, std::span<const Vec3> gains,
                      double gain_lambda) {
  const bool with_gain = !gains.empty();
  RGBDPS_CHECK(!with_gain || gains.size() == lat.vertex_count(), "lattice_energy: one gain per vertex");
  double e = 0.0;
  for (int v = 0; v < ref_cn.height(); ++v) {
    for (int u = 0; u < ref_cn.width(); ++u) {
      if (!ref_cn.mask(u, v)) continue;
      const Vec2 p(u, v);
      const auto wts = lat.weights(p);
      Vec2 f = p;
      Vec3 g = Vec3::Zero();
      for (const auto& [idx, wgt] : wts) {
        f += wgt * lat.delta()[idx];
        if (with_gain) g += wgt * gains[idx];
      }
      if (!with_gain) g = Vec3::Ones();
      const auto s = sample_bilinear(target_cn, f);
      e += kDataScale * (s ? (g.cwiseProduct(ref_cn.pixels(u, v)) - *s).squaredNorm() : kUnsampledCost);
    }
  }
  for (std::size_t i = 0; i < lat.vertex_count(); ++i) {
    e += lambda * (lat.delta()[i] - lat.initial()[i]).squaredNorm();
    if (with_gain) e += gain_lambda * (gains[i] - Vec3::Ones()).squaredNorm();
  }
  return e;
}

LatticeOptimization optimize_lattice(DeformationLattice lat, const RadianceImage& ref_cn,
                                     const RadianceImage& target_cn, const MatchConfig& cfg) {
  RGBDPS_CHECK(ref_cn.pixels.same_shape(target_cn.pixels), "optimize_lattice: size mismatch");
  const Gradients grad = image_gradients(target_cn);
  // per vertex: dx, dy, then three gains when fitted
  const int stride = cfg.gain_field ? 5 : 2;
  const int nparam = static_cast<int>(stride * lat.vertex_count());
  std::vector<Vec3> gains;
  if (cfg.gain_field) gains.assign(lat.vertex_count(), Vec3::Ones());
  auto energy_of = [&] { return lattice_energy(lat, ref_cn, target_cn, cfg.lambda, gains, cfg.gain_lambda); };
  LatticeOptimization out;
  double energy = energy_of();
  out.energy.push_back(energy);

  for (int it = 0; it < cfg.max_iterations; ++it) {
    std::vector<Eigen::Triplet<double>> trip;
    Eigen::VectorXd g = Eigen::VectorXd::Zero(nparam);
    for (int v = 0; v < ref_cn.height(); ++v) {
      for (int u = 0; u < ref_cn.width(); ++u) {
        if (!ref_cn.mask(u, v)) continue;
        const Vec2 p(u, v);
        const auto wts = lat.weights(p);
        Vec2 f = p;
        Vec3 gain = Vec3::Ones();
        if (cfg.gain_field) gain.setZero();
        for (const auto& [idx, wgt] : wts) {
          f += wgt * lat.delta()[idx];
          if (cfg.gain_field) gain += wgt * gains[idx];
        }
        const auto s = sample_bilinear(target_cn, f);
        const auto gx = sample_bilinear(grad.gx, grad.mask, f);
        const auto gy = sample_bilinear(grad.gy, grad.mask, f);
        if (!s || !gx || !gy) continue;
        const Vec3& a = ref_cn.pixels(u, v);
        const Vec3 r = gain.cwiseProduct(a) - *s;
        // d r / d delta_l = -theta_l grad(target), d r_c / d gamma_lc = theta_l a_c
        for (int ka = 0; ka < 4; ++ka) {
          const auto [ia, wa] = wts[ka];
          if (wa == 0.0) continue;
          const int oa = stride * ia;
          g[oa] += -kDataScale * wa * gx->dot(r);
          g[oa + 1] += -kDataScale * wa * gy->dot(r);
          if (cfg.gain_field) {
            for (int c = 0; c < 3; ++c) g[oa + 2 + c] += kDataScale * wa * a[c] * r[c];
          }
          for (int kb = 0; kb < 4; ++kb) {
            const auto [ib, wb] = wts[kb];
            if (wb == 0.0) continue;
            const int ob = stride * ib;
            const double ww = kDataScale * wa * wb;
            trip.emplace_back(oa, ob, ww * gx->dot(*gx));
            trip.emplace_back(oa, ob + 1, ww * gx->dot(*gy));
            trip.emplace_back(oa + 1, ob, ww * gy->dot(*gx));
            trip.emplace_back(oa + 1, ob + 1, ww * gy->dot(*gy));
            if (cfg.gain_field) {
              for (int c = 0; c < 3; ++c) {
                const double cross_x = -ww * (*gx)[c] * a[c], cross_y = -ww * (*gy)[c] * a[c];
                trip.emplace_back(oa, ob + 2 + c, cross_x);
                trip.emplace_back(oa + 1, ob + 2 + c, cross_y);
                trip.emplace_back(ob + 2 + c, oa, cross_x);
                trip.emplace_back(ob + 2 + c, oa + 1, cross_y);
                trip.emplace_back(oa + 2 + c, ob + 2 + c, ww * a[c] * a[c]);
              }
            }
          }
        }
      }
    }
    for (std::size_t i = 0; i < lat.vertex_count(); ++i) {
      const int o = stride * static_cast<int>(i);
      const Vec2 d = lat.delta()[i] - lat.initial()[i];
      g[o] += cfg.lambda * d.x();
      g[o + 1] += cfg.lambda * d.y();
      // A tiny floor keeps vertices without data or prior solvable.
      trip.emplace_back(o, o, cfg.lambda + 1e-9);
      trip.emplace_back(o + 1, o + 1, cfg.lambda + 1e-9);
      if (cfg.gain_field) {
        for (int c = 0; c < 3; ++c) {
          g[o + 2 + c] += cfg.gain_lambda * (gains[i][c] - 1.0);
          trip.emplace_back(o + 2 + c, o + 2 + c, cfg.gain_lambda);
        }
      }
    }
    Eigen::SparseMatrix<double> H(nparam, nparam);
    H.setFromTriplets(trip.begin(), trip.end());
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(H);
    if (solver.info() != Eigen::Success) break;
    const Eigen::VectorXd step = solver.solve(-g);
    if (!step.allFinite()) break;

    const std::vector<Vec2> base = lat.delta();
    const std::vector<Vec3> base_gain = gains;
    bool accepted = false;
    double scale = 1.0;
    double max_update = 0.0, max_gain_update = 0.0;
    for (int halving = 0; halving < 12; ++halving, scale *= 0.5) {
      max_update = max_gain_update = 0.0;
      for (std::size_t i = 0; i < base.size(); ++i) {
        const int o = stride * static_cast<int>(i);
        const Vec2 d(scale * step[o], scale * step[o + 1]);
        lat.delta()[i] = base[i] + d;
        max_update = std::max(max_update, d.norm());
        if (cfg.gain_field) {
          const Vec3 dg = scale * step.segment<3>(o + 2);
          gains[i] = base_gain[i] + dg;
          max_gain_update = std::max(max_gain_update, dg.cwiseAbs().maxCoeff());
        }
      }
      const double e = energy_of();
      if (e <= energy) {
        energy = e;
        accepted = true;
        break;
      }
    }
    out.iterations = it + 1;
    if (!accepted) {
      lat.delta() = base;
      gains = base_gain;
      out.converged = true;  // no descent direction left
      break;
    }
    out.energy.push_back(energy);
    if (max_update < cfg.convergence_px && max_gain_update < kGainTolerance) {
      out.converged = true;
      break;
    }
  }
  if (cfg.max_iterations == 0) out.converged = true;
  out.lattice = std::move(lat);
  out.gains = std::move(gains);
  return out;
}

CorrespondenceField rigid_correspondences(const DepthMap& ref_depth, const CameraIntrinsics& K,
                                          const RigidPose& pose, const Mask& target_mask,
                                          const DepthMap* target_depth) {
  const int w = ref_depth.width(), h = ref_depth.height();
  auto f = CorrespondenceField::empty(w, h);
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      if (!ref_depth.mask(u, v)) continue;
      const auto proj = project_pixel(Vec2(u, v), ref_depth.depth(u, v), K, pose);
      if (!proj.usable()) continue;
      if (target_depth) {
        const auto z = sample_bilinear(target_depth->depth, target_depth->mask, proj.q);
        if (!z || std::abs(*z - proj.depth) > 0.01 * proj.depth) continue;
      }
      const int qu = static_cast<int>(std::lround(proj.q.x()));
      const int qv = static_cast<int>(std::lround(proj.q.y()));
      if (!target_mask(qu, qv)) continue;
      f.q(u, v) = proj.q;
      f.defined(u, v) = f.reliable(u, v) = 1;
      f.score(u, v) = 1.0;
    }
  }
  return f;
}

FrameMatch match_frame(const RadianceImage& ref, const DepthMap& ref_depth,
                       const CameraIntrinsics& K, const RigidPose& pose,
                       const RadianceImage& target, const MatchConfig& cfg) {
  cfg.validate();
  const int w = ref.width(), h = ref.height();
  const WarpedImage warped = warp_reference(ref, ref_depth, K, pose);
  const RadianceImage A = cfg.chromaticity ? chroma_normalize(warped.image, cfg.dark_threshold)
                                           : warped.image;
  const RadianceImage B = cfg.chromaticity ? chroma_normalize(target, cfg.dark_threshold)
                                           : target;
  const SearchResult search = search_matches(A, B, cfg);

  FrameMatch out;
  std::vector<ScatteredMatch> scattered;
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      if (search.matched(u, v)) ++out.stats.searched;
      if (!search.reliable(u, v)) continue;
      scattered.push_back({Vec2(u, v), search.displacement(u, v)});
      out.stats.mean_score += search.best(u, v);
    }
  }
  out.stats.reliable = scattered.size();
  if (!scattered.empty()) out.stats.mean_score /= scattered.size();

  try {
    DeformationLattice lat = fit_lattice(scattered, w, h, cfg);
    auto opt = optimize_lattice(std::move(lat), A, B, cfg);
    out.lattice = std::move(opt.lattice);
    out.stats.lattice_iterations = opt.iterations;
    out.stats.lattice_converged = opt.converged;
  } catch (const TooFewMatches&) {
    out.lattice = DeformationLattice(w, h, cfg.lattice_spacing);
    out.stats.lattice_fallback = true;
  }

  out.field = CorrespondenceField::empty(w, h);
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      if (!ref.mask(u, v) || !ref_depth.mask(u, v)) continue;
      const auto proj = project_pixel(Vec2(u, v), ref_depth.depth(u, v), K, pose);
      if (!proj.usable()) continue;
      // z-buffer test against the warped surface around q0
      const int qu = static_cast<int>(std::floor(proj.q.x()));
      const int qv = static_cast<int>(std::floor(proj.q.y()));
      bool visible = false;
      for (int dv = 0; dv <= 1 && !visible; ++dv) {
        for (int du = 0; du <= 1; ++du) {
          const int x = qu + du, y = qv + dv;
          if (!warped.image.pixels.contains(x, y) || !warped.image.mask(x, y)) continue;
          if (std::abs(warped.depth(x, y) - proj.depth) <= 0.01 * proj.depth) {
            visible = true;
            break;
          }
        }
      }
      if (!visible) continue;
      const Vec2 q = out.lattice.apply(proj.q);
      if (!sample_bilinear(target, q)) continue;
      out.field.q(u, v) = q;
      out.field.defined(u, v) = 1;
      const int ru = static_cast<int>(std::lround(proj.q.x()));
      const int rv = static_cast<int>(std::lround(proj.q.y()));
      if (search.matched.contains(ru, rv) && search.matched(ru, rv)) {
        out.field.reliable(u, v) = search.reliable(ru, rv);
        out.field.score(u, v) = search.best(ru, rv);
      }
    }
  }
  return out;
}

}  // namespace rgbdps::match
