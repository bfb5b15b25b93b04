#pragma once
// Distribution helpers and binomial confidence intervals.

#include <nullfwe/error.hpp>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <utility>

namespace nullfwe {

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }
inline double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

/// Upper-tail quantile: returns u with P(Z >= u) = p.
inline double normal_upper_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw DomainError("probability must lie in (0, 1)");
  return boost::math::quantile(boost::math::complement(boost::math::normal_distribution<double>(), p));
}

/// Upper-tail quantile of Student's t: P(T_dof >= u) = p.
inline double t_upper_quantile(double p, double dof) {
  if (!(p > 0.0 && p < 1.0)) throw DomainError("probability must lie in (0, 1)");
  if (!(dof > 0.0)) throw DomainError("degrees of freedom must be positive");
  return boost::math::quantile(boost::math::complement(boost::math::students_t_distribution<double>(dof), p));
}

inline double t_sf(double t, double dof) {
  if (std::isinf(t)) return t > 0 ? 0.0 : 1.0;
  return boost::math::cdf(boost::math::complement(boost::math::students_t_distribution<double>(dof), t));
}

/// Probability-integral transform t -> z with matching tail probabilities.
inline double t_to_z(double t, double dof) {
  if (std::isinf(t) || std::abs(t) > 1e300) return t > 0 ? 38.0 : -38.0;
  const double upper = t_sf(std::abs(t), dof);
  if (upper <= 0.0) return t > 0 ? 38.0 : -38.0;
  const double z = boost::math::quantile(boost::math::complement(boost::math::normal_distribution<double>(), upper));
  return t >= 0 ? z : -z;
}

struct Interval {
  double lo = 0.0;
  double hi = 1.0;
  bool contains(double x) const noexcept { return lo <= x && x <= hi; }
};

/// Wilson score interval at 95%.
inline Interval wilson_ci(long long n_sig, long long n) {
  if (n < 1) throw DomainError("Wilson interval needs n >= 1");
  if (n_sig < 0 || n_sig > n) throw DomainError("Wilson interval needs 0 <= n_sig <= n");
  constexpr double z = 1.959963984540054;
  const double nn = static_cast<double>(n);
  const double phat = static_cast<double>(n_sig) / nn;
  const double denom = 1.0 + z * z / nn;
  const double centre = (phat + z * z / (2.0 * nn)) / denom;
  const double half = z * std::sqrt(phat * (1.0 - phat) / nn + z * z / (4.0 * nn * nn)) / denom;
  Interval ci{centre - half, centre + half};
  if (n_sig == 0) ci.lo = 0.0;
  if (n_sig == n) ci.hi = 1.0;
  ci.lo = std::max(0.0, ci.lo);
  ci.hi = std::min(1.0, ci.hi);
  return ci;
}

}  // namespace nullfwe
