#pragma once
// Spatial autocorrelation models and their estimation from residuals.

#include <nullfwe/volume.hpp>

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace nullfwe {

/// Spatial autocorrelation as a function of distance.
///
/// `gaussian` is the correlation of white noise smoothed by a Gaussian kernel
/// of FWHM `fwhm_mm`: exp(-2 ln2 r^2 / fwhm^2). `mixed` is the long-tail form
/// a*exp(-r^2/(2 b^2)) + (1-a)*exp(-r/c).
struct AcfModel {
  enum class Kind { gaussian, mixed };
  Kind kind = Kind::gaussian;
  double fwhm_mm = 0.0;
  double a = 1.0, b_mm = 0.0, c_mm = 0.0;

  static AcfModel gaussian(double fwhm) {
    AcfModel m;
    m.kind = Kind::gaussian;
    m.fwhm_mm = fwhm;
    m.validate();
    return m;
  }
  static AcfModel mixed(double a, double b, double c) {
    AcfModel m;
    m.kind = Kind::mixed;
    m.a = a;
    m.b_mm = b;
    m.c_mm = c;
    m.validate();
    return m;
  }

  void validate() const {
    if (kind == Kind::gaussian) {
      if (!(fwhm_mm > 0.0) || !std::isfinite(fwhm_mm)) throw DomainError("Gaussian ACF needs fwhm_mm > 0");
    } else {
      if (!(a >= 0.0 && a <= 1.0)) throw DomainError("mixed ACF needs a in [0, 1]");
      if (!(b_mm > 0.0) || !(c_mm > 0.0) || !std::isfinite(b_mm) || !std::isfinite(c_mm))
        throw DomainError("mixed ACF needs b_mm > 0 and c_mm > 0");
    }
  }

  /// Same shape with every length multiplied by `s`.
  AcfModel scaled(double s) const {
    AcfModel m = *this;
    m.fwhm_mm *= s;
    m.b_mm *= s;
    m.c_mm *= s;
    return m;
  }

  friend bool operator==(const AcfModel&, const AcfModel&) = default;
};

inline double acf_value(const AcfModel& m, double r_mm) {
  if (!(r_mm >= 0.0)) throw DomainError("ACF lag must be >= 0");
  if (m.kind == AcfModel::Kind::gaussian)
    return std::exp(-2.0 * std::numbers::ln2 * r_mm * r_mm / (m.fwhm_mm * m.fwhm_mm));
  return m.a * std::exp(-r_mm * r_mm / (2.0 * m.b_mm * m.b_mm)) + (1.0 - m.a) * std::exp(-r_mm / m.c_mm);
}

struct SmoothnessEstimate {
  std::array<double, 3> fwhm_mm{};
  double resels = 0.0;
  std::size_t mask_voxels = 0;
};

namespace detail {

// Per-voxel scale sqrt(mean_t e^2); 0 marks excluded voxels.
inline std::vector<double> residual_scale(const Dataset4D& res, const Mask& mask) {
  const std::size_t n = res.voxels();
  std::vector<double> ss(n, 0.0);
  for (int t = 0; t < res.time_points(); ++t) {
    auto f = res.frame(t);
    for (std::size_t v = 0; v < n; ++v)
      if (mask[v]) ss[v] += f[v] * f[v];
  }
  for (std::size_t v = 0; v < n; ++v) {
    const double var = ss[v] / res.time_points();
    ss[v] = (mask[v] && var > 1e-300) ? std::sqrt(var) : 0.0;
  }
  return ss;
}

}  // namespace detail

/// Global smoothness from the mean squared forward difference of
/// standardised residuals along each axis.
inline SmoothnessEstimate estimate_fwhm(const Dataset4D& residuals, const Mask& mask) {
  require_same_grid(residuals.meta(), mask.meta(), "residuals and mask");
  mask.require_nonempty();
  if (residuals.time_points() < 3) throw PreconditionError("smoothness estimation needs at least 3 time points");
  const GridMeta& g = residuals.meta();
  const auto scale = detail::residual_scale(residuals, mask);

  std::array<double, 3> sum{0, 0, 0};
  std::array<std::size_t, 3> pairs{0, 0, 0};
  const std::array<std::size_t, 3> stride{1, static_cast<std::size_t>(g.nx),
                                          static_cast<std::size_t>(g.nx) * g.ny};
  for (int z = 0; z < g.nz; ++z)
    for (int y = 0; y < g.ny; ++y)
      for (int x = 0; x < g.nx; ++x) {
        const std::size_t v = g.index(x, y, z);
        if (scale[v] == 0.0) continue;
        const std::array<bool, 3> has{x + 1 < g.nx, y + 1 < g.ny, z + 1 < g.nz};
        for (std::size_t ax = 0; ax < 3; ++ax) {
          if (!has[ax]) continue;
          const std::size_t w = v + stride[ax];
          if (scale[w] == 0.0) continue;
          double acc = 0.0;
          for (int t = 0; t < residuals.time_points(); ++t) {
            const double d = residuals.at(t, w) / scale[w] - residuals.at(t, v) / scale[v];
            acc += d * d;
          }
          sum[ax] += acc;
          pairs[ax] += static_cast<std::size_t>(residuals.time_points());
        }
      }

  SmoothnessEstimate est;
  const auto vox = g.voxel_mm();
  for (std::size_t ax = 0; ax < 3; ++ax) {
    if (pairs[ax] == 0 || !(sum[ax] > 0.0))
      throw Error("smoothness estimation failed: no usable voxel pairs along axis " + std::to_string(ax));
    const double v = sum[ax] / static_cast<double>(pairs[ax]);
    est.fwhm_mm[ax] = vox[ax] * std::sqrt(4.0 * std::numbers::ln2 / v);
  }
  est.mask_voxels = mask.count();
  est.resels = static_cast<double>(est.mask_voxels) * g.voxel_volume_mm3() /
               (est.fwhm_mm[0] * est.fwhm_mm[1] * est.fwhm_mm[2]);
  return est;
}

struct AcfSample {
  double r_mm;
  double correlation;
};

/// Radially binned empirical spatial correlation of standardised residuals,
/// averaged over time points. Bins are one minimum voxel edge wide; each
/// bin reports the pair-weighted mean lag distance.
inline std::vector<AcfSample> estimate_acf(const Dataset4D& residuals, const Mask& mask, double max_r_mm) {
  require_same_grid(residuals.meta(), mask.meta(), "residuals and mask");
  mask.require_nonempty();
  const GridMeta& g = residuals.meta();
  const double width = g.min_edge_mm();
  if (!(max_r_mm >= width)) throw DomainError("max_r_mm must span at least one voxel");
  const auto scale = detail::residual_scale(residuals, mask);
  const int T = residuals.time_points();

  // Standardised copy, time-major per voxel for cache-friendly dot products.
  const std::size_t n = g.size();
  std::vector<double> z(n * static_cast<std::size_t>(T), 0.0);
  for (std::size_t v = 0; v < n; ++v)
    if (scale[v] > 0.0)
      for (int t = 0; t < T; ++t) z[v * T + t] = residuals.at(t, v) / scale[v];

  const std::size_t nbins = static_cast<std::size_t>(std::floor(max_r_mm / width + 0.5)) + 1;
  std::vector<double> corr_sum(nbins, 0.0), r_sum(nbins, 0.0), count(nbins, 0.0);
  corr_sum[0] = 1.0;
  count[0] = 1.0;

  const int rx = static_cast<int>(std::floor(max_r_mm / g.dx)), ry = static_cast<int>(std::floor(max_r_mm / g.dy)),
            rz = static_cast<int>(std::floor(max_r_mm / g.dz));
  for (int oz = 0; oz <= rz; ++oz)
    for (int oy = -ry; oy <= ry; ++oy)
      for (int ox = -rx; ox <= rx; ++ox) {
        // Half-space of offsets: each unordered pair once.
        if (oz == 0 && (oy < 0 || (oy == 0 && ox <= 0))) continue;
        const double r = std::sqrt(ox * ox * g.dx * g.dx + oy * oy * g.dy * g.dy + oz * oz * g.dz * g.dz);
        if (r > max_r_mm) continue;
        const auto bin = static_cast<std::size_t>(std::floor(r / width + 0.5));
        if (bin == 0 || bin >= nbins) continue;
        double acc = 0.0;
        std::size_t npairs = 0;
        for (int zz = std::max(0, -oz); zz < std::min(g.nz, g.nz - oz); ++zz)
          for (int yy = std::max(0, -oy); yy < std::min(g.ny, g.ny - oy); ++yy)
            for (int xx = std::max(0, -ox); xx < std::min(g.nx, g.nx - ox); ++xx) {
              const std::size_t v = g.index(xx, yy, zz), w = g.index(xx + ox, yy + oy, zz + oz);
              if (scale[v] == 0.0 || scale[w] == 0.0) continue;
              const double* a = &z[v * T];
              const double* b = &z[w * T];
              double dot = 0.0;
              for (int t = 0; t < T; ++t) dot += a[t] * b[t];
              acc += dot;
              ++npairs;
            }
        if (npairs == 0) continue;
        corr_sum[bin] += acc / T;
        r_sum[bin] += r * static_cast<double>(npairs);
        count[bin] += static_cast<double>(npairs);
      }

  std::vector<AcfSample> out;
  out.push_back({0.0, 1.0});
  for (std::size_t k = 1; k < nbins; ++k)
    if (count[k] > 0) out.push_back({r_sum[k] / count[k], corr_sum[k] / count[k]});
  return out;
}

/// Least-squares fit of the mixed ACF by damped Gauss-Newton
/// (Levenberg-Marquardt) with a projected onto [0, 1].
inline AcfModel fit_mixed_acf(const std::vector<AcfSample>& samples) {
  if (samples.size() < 4) throw PreconditionError("mixed ACF fit needs at least 4 samples");
  double rmin = 0.0, rmax = 0.0;
  bool has_zero = false;
  for (const auto& s : samples) {
    if (!(s.r_mm >= 0.0) || !std::isfinite(s.correlation)) throw PreconditionError("invalid ACF sample");
    if (s.r_mm == 0.0) has_zero = true;
    if (s.r_mm > 0.0 && (rmin == 0.0 || s.r_mm < rmin)) rmin = s.r_mm;
    rmax = std::max(rmax, s.r_mm);
  }
  if (!has_zero || rmin == 0.0 || rmax < 3.0 * rmin)
    throw PreconditionError("ACF samples must span r = 0 to at least 3 voxel widths");

  const std::size_t m = samples.size();
  Eigen::Vector3d p(0.5, 2.0 * rmin, 4.0 * rmin);
  auto project = [](Eigen::Vector3d q) {
    q[0] = std::clamp(q[0], 0.0, 1.0);
    q[1] = std::max(q[1], 1e-6);
    q[2] = std::max(q[2], 1e-6);
    return q;
  };
  auto sse_of = [&](const Eigen::Vector3d& q) {
    double s = 0.0;
    for (const auto& smp : samples) {
      const double f = q[0] * std::exp(-smp.r_mm * smp.r_mm / (2 * q[1] * q[1])) +
                       (1 - q[0]) * std::exp(-smp.r_mm / q[2]);
      s += (f - smp.correlation) * (f - smp.correlation);
    }
    return s;
  };

  // One damped Gauss-Newton descent; false if it ran out of iterations.
  auto descend = [&](Eigen::Vector3d& p, double& sse) {
    sse = sse_of(p);
    double lambda = 1e-3;
    constexpr int max_iter = 200;
    constexpr double rel_tol = 1e-8;
    for (int it = 0; it < max_iter; ++it) {
      Eigen::MatrixXd J(m, 3);
      Eigen::VectorXd r(m);
      for (std::size_t i = 0; i < m; ++i) {
        const double x = samples[i].r_mm;
        const double g = std::exp(-x * x / (2 * p[1] * p[1]));
        const double e = std::exp(-x / p[2]);
        r[static_cast<Eigen::Index>(i)] = p[0] * g + (1 - p[0]) * e - samples[i].correlation;
        J(static_cast<Eigen::Index>(i), 0) = g - e;
        J(static_cast<Eigen::Index>(i), 1) = p[0] * g * x * x / (p[1] * p[1] * p[1]);
        J(static_cast<Eigen::Index>(i), 2) = (1 - p[0]) * e * x / (p[2] * p[2]);
      }
      const Eigen::Matrix3d JtJ = J.transpose() * J;
      const Eigen::Vector3d Jtr = J.transpose() * r;
      bool accepted = false;
      while (lambda < 1e12) {
        Eigen::Matrix3d A = JtJ;
        for (int k = 0; k < 3; ++k) A(k, k) += lambda * std::max(JtJ(k, k), 1e-12);
        const Eigen::Vector3d cand = project(p - A.ldlt().solve(Jtr));
        const double s = sse_of(cand);
        if (s < sse) {
          const double rel = (sse - s) / std::max(sse, 1e-300);
          p = cand;
          sse = s;
          lambda = std::max(lambda / 10.0, 1e-12);
          accepted = true;
          if (rel < rel_tol || sse < 1e-28) return true;
          break;
        }
        lambda *= 10.0;
      }
      // No descent direction left: projected stationary point.
      if (!accepted) return true;
    }
    return false;
  };

  // The a = 0 and a = 1 faces trap single starts, so descend from a small
  // grid and keep the best stationary point.
  std::optional<Eigen::Vector3d> best;
  double best_sse = std::numeric_limits<double>::infinity();
  Eigen::Vector3d last(0.5, 2.0 * rmin, 4.0 * rmin);
  double last_sse = sse_of(last);
  for (double a0 : {0.2, 0.5, 0.8})
    for (double b0 : {1.0, 2.0, 4.0})
      for (double c0 : {2.0, 4.0, 8.0}) {
        Eigen::Vector3d p(a0, b0 * rmin, c0 * rmin);
        double sse = 0.0;
        const bool ok = descend(p, sse);
        last = p;
        last_sse = sse;
        if (ok && sse < best_sse) {
          best = p;
          best_sse = sse;
        }
      }
  if (!best)
    throw FitError("mixed ACF fit did not converge in 200 iterations", last[0], last[1], last[2], std::sqrt(last_sse));
  return AcfModel::mixed((*best)[0], (*best)[1], (*best)[2]);
}

}  // namespace nullfwe
