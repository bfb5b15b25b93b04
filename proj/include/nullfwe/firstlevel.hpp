#pragma once
// Per-subject GLM, nuisance cleanup and the Yeo-Johnson transform.

#include <nullfwe/design.hpp>
#include <nullfwe/error.hpp>
#include <nullfwe/volume.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <vector>

namespace nullfwe {

struct GlmOptions {
  bool prewhiten = true;
  /// Use this AR(1) coefficient instead of estimating one. No degree of
  /// freedom is charged for a fixed coefficient.
  std::optional<double> fixed_phi;
  bool keep_residuals = true;
  bool keep_betas = true;
  std::size_t block_voxels = 4096;
};

struct FirstLevelResult {
  std::vector<Volume> beta;
  Volume contrast_map;
  Volume contrast_t;
  std::optional<Dataset4D> residuals;
  double dof = 0.0;
  double ar1_phi = 0.0;
  /// In-mask voxels with zero residual variance; their t is set to 0.
  std::vector<std::uint32_t> degenerate;
};

namespace detail {

inline Eigen::MatrixXd gather_block(const Dataset4D& ds, std::span<const std::uint32_t> vox) {
  const int T = ds.time_points();
  Eigen::MatrixXd Y(T, static_cast<Eigen::Index>(vox.size()));
  for (int t = 0; t < T; ++t) {
    auto f = ds.frame(t);
    for (std::size_t j = 0; j < vox.size(); ++j) Y(t, static_cast<Eigen::Index>(j)) = f[vox[j]];
  }
  return Y;
}

inline void scatter_block(Dataset4D& ds, std::span<const std::uint32_t> vox, const Eigen::MatrixXd& Y) {
  for (int t = 0; t < ds.time_points(); ++t) {
    auto f = ds.frame(t);
    for (std::size_t j = 0; j < vox.size(); ++j) f[vox[j]] = Y(t, static_cast<Eigen::Index>(j));
  }
}

// Applies the AR(1) whitening filter down the rows, in place.
inline void whiten_rows(Eigen::MatrixXd& M, double phi) {
  if (phi == 0.0) return;
  for (Eigen::Index t = M.rows() - 1; t >= 1; --t) M.row(t) -= phi * M.row(t - 1);
  M.row(0) *= std::sqrt(1.0 - phi * phi);
}

}  // namespace detail

inline FirstLevelResult glm_fit(const Dataset4D& ds, const DesignMatrix& design, const Mask& mask,
                                const GlmOptions& opts = {}) {
  require_same_grid(ds.meta(), mask.meta(), "dataset and mask");
  mask.require_nonempty();
  const int T = ds.time_points();
  if (design.time_points() != T) throw DimensionError("design rows do not match dataset time points");
  const Eigen::Index p = design.X.cols();
  if (design.contrast.size() != p) throw DimensionError("contrast length does not match design columns");
  if (T <= p) throw DomainError("no residual degrees of freedom: T <= number of design columns");
  {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design.X);
    if (qr.rank() < p) throw DesignError("design matrix is rank deficient");
  }

  const auto vox = mask.indices();
  const std::size_t B = std::max<std::size_t>(1, opts.block_voxels);
  auto blocks = [&](auto&& body) {
    for (std::size_t s = 0; s < vox.size(); s += B) {
      const std::size_t e = std::min(vox.size(), s + B);
      body(std::span<const std::uint32_t>(vox.data() + s, e - s));
    }
  };

  double phi = 0.0;
  bool charged = false;
  if (opts.fixed_phi) {
    phi = *opts.fixed_phi;
    if (!(std::abs(phi) < 1.0)) throw DomainError("AR(1) coefficient must satisfy |phi| < 1");
  } else if (opts.prewhiten) {
    const Eigen::MatrixXd pinv = design.X.colPivHouseholderQr().solve(Eigen::MatrixXd::Identity(T, T));
    double acc = 0.0;
    std::size_t used = 0;
    blocks([&](std::span<const std::uint32_t> b) {
      const Eigen::MatrixXd Y = detail::gather_block(ds, b);
      const Eigen::MatrixXd E = Y - design.X * (pinv * Y);
      for (Eigen::Index j = 0; j < E.cols(); ++j) {
        const double den = E.col(j).squaredNorm();
        if (!(den > 0.0)) continue;
        acc += E.col(j).head(T - 1).dot(E.col(j).tail(T - 1)) / den;
        ++used;
      }
    });
    phi = used > 0 ? std::clamp(acc / static_cast<double>(used), -0.99, 0.99) : 0.0;
    charged = true;
  }

  Eigen::MatrixXd X = design.X;
  detail::whiten_rows(X, phi);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  const Eigen::MatrixXd pinv = qr.solve(Eigen::MatrixXd::Identity(T, T));
  const Eigen::MatrixXd xtx_inv = (X.transpose() * X).inverse();
  const double cvar = design.contrast.dot(xtx_inv * design.contrast);

  FirstLevelResult r;
  r.ar1_phi = phi;
  r.dof = static_cast<double>(T - p) - (charged ? 1.0 : 0.0);
  if (!(r.dof > 0.0)) throw DomainError("no residual degrees of freedom after prewhitening");
  const GridMeta& g = ds.meta();
  r.contrast_map = Volume(g);
  r.contrast_t = Volume(g);
  if (opts.keep_betas) r.beta.assign(static_cast<std::size_t>(p), Volume(g));
  if (opts.keep_residuals) r.residuals.emplace(g, T, ds.tr_s());

  blocks([&](std::span<const std::uint32_t> b) {
    Eigen::MatrixXd Y = detail::gather_block(ds, b);
    detail::whiten_rows(Y, phi);
    const Eigen::MatrixXd beta = pinv * Y;
    const Eigen::MatrixXd E = Y - X * beta;
    const Eigen::RowVectorXd con = design.contrast.transpose() * beta;
    for (Eigen::Index j = 0; j < E.cols(); ++j) {
      const auto v = b[static_cast<std::size_t>(j)];
      const double ss = E.col(j).squaredNorm();
      const double s2 = ss / r.dof;
      r.contrast_map[v] = con[j];
      // Residuals at rounding level of the data count as zero variance.
      if (ss > 1e-24 * Y.col(j).squaredNorm() && std::isfinite(s2)) {
        r.contrast_t[v] = con[j] / std::sqrt(s2 * cvar);
      } else {
        r.contrast_t[v] = 0.0;
        r.degenerate.push_back(v);
      }
      if (opts.keep_betas)
        for (Eigen::Index c = 0; c < p; ++c) r.beta[static_cast<std::size_t>(c)][v] = beta(c, j);
    }
    if (opts.keep_residuals) detail::scatter_block(*r.residuals, b, E);
  });
  return r;
}

/// Removes from every voxel the span of the nuisance columns plus an
/// intercept (full-variance regression).
inline Dataset4D regress_out(const Dataset4D& ds, const Eigen::MatrixXd& nuisance) {
  const int T = ds.time_points();
  if (nuisance.rows() != T) throw DimensionError("nuisance rows do not match dataset time points");
  if (nuisance.cols() < 1) throw PreconditionError("regress_out needs at least one nuisance column");
  if (nuisance.cols() >= T) throw DomainError("more nuisance columns than time points");
  if (!nuisance.allFinite()) throw DomainError("nuisance time courses must be finite");
  Eigen::MatrixXd Z(T, nuisance.cols() + 1);
  Z << nuisance, Eigen::VectorXd::Ones(T);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Z);
  // Orthonormal basis of span(Z).
  const Eigen::MatrixXd Qfull = qr.householderQ() * Eigen::MatrixXd::Identity(T, T);
  const Eigen::MatrixXd Q = Qfull.leftCols(qr.rank());

  Dataset4D out = ds;
  std::vector<std::uint32_t> all(ds.voxels());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<std::uint32_t>(i);
  constexpr std::size_t B = 4096;
  for (std::size_t s = 0; s < all.size(); s += B) {
    std::span<const std::uint32_t> b(all.data() + s, std::min(all.size(), s + B) - s);
    Eigen::MatrixXd Y = detail::gather_block(ds, b);
    Y -= Q * (Q.transpose() * Y);
    detail::scatter_block(out, b, Y);
  }
  return out;
}

inline double yeo_johnson_value(double x, double lambda) {
  if (x >= 0.0) {
    if (std::abs(lambda) < 1e-12) return std::log1p(x);
    return (std::pow(x + 1.0, lambda) - 1.0) / lambda;
  }
  if (std::abs(lambda - 2.0) < 1e-12) return -std::log1p(-x);
  return -(std::pow(1.0 - x, 2.0 - lambda) - 1.0) / (2.0 - lambda);
}

struct YeoJohnsonResult {
  std::vector<double> values;
  double lambda = 1.0;
};

/// Gaussian profile log-likelihood of lambda for the given data.
inline double yeo_johnson_loglik(std::span<const double> x, double lambda) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0, jac = 0.0;
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = yeo_johnson_value(x[i], lambda);
    mean += y[i];
    jac += (x[i] >= 0.0 ? 1.0 : -1.0) * std::log1p(std::abs(x[i]));
  }
  mean /= n;
  double ss = 0.0;
  for (double v : y) ss += (v - mean) * (v - mean);
  const double var = ss / n;
  if (!(var > 0.0)) return -std::numeric_limits<double>::infinity();
  return -0.5 * n * std::log(var) + (lambda - 1.0) * jac;
}

/// Chooses lambda on the grid -2, -1.99, ..., 2 (first maximum wins).
inline double yeo_johnson_auto_lambda(std::span<const double> x) {
  double best = 1.0, best_ll = -std::numeric_limits<double>::infinity();
  for (int i = -200; i <= 200; ++i) {
    const double lam = i / 100.0;
    const double ll = yeo_johnson_loglik(x, lam);
    if (ll > best_ll) {
      best_ll = ll;
      best = lam;
    }
  }
  return best;
}

inline YeoJohnsonResult yeo_johnson(std::span<const double> x, std::optional<double> lambda = std::nullopt) {
  for (double v : x)
    if (!std::isfinite(v)) throw DomainError("Yeo-Johnson input must be finite");
  YeoJohnsonResult r;
  r.lambda = lambda ? *lambda : (x.size() >= 2 ? yeo_johnson_auto_lambda(x) : 1.0);
  r.values.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) r.values[i] = yeo_johnson_value(x[i], r.lambda);
  return r;
}

}  // namespace nullfwe
