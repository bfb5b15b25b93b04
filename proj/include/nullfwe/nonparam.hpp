#pragma once
// Group t statistics, label permutation, sign flipping and their
// remediation variants, all with max-cluster-size FWE control.

#include <nullfwe/cluster.hpp>
#include <nullfwe/firstlevel.hpp>
#include <nullfwe/parallel.hpp>
#include <nullfwe/paramthresh.hpp>
#include <nullfwe/stats.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

namespace nullfwe {

enum class Sidedness { one, two };
enum class Variant { plain, robust, yeo_johnson, bootstrap };

inline std::string to_string(Sidedness s) { return s == Sidedness::one ? "one" : "two"; }
inline Sidedness sidedness_from_string(const std::string& s) {
  if (s == "one") return Sidedness::one;
  if (s == "two") return Sidedness::two;
  throw DomainError("sidedness must be 'one' or 'two', got '" + s + "'");
}
inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::plain: return "plain";
    case Variant::robust: return "robust";
    case Variant::yeo_johnson: return "yeo-johnson";
    case Variant::bootstrap: return "bootstrap";
  }
  return "plain";
}
inline Variant variant_from_string(const std::string& s) {
  if (s == "plain") return Variant::plain;
  if (s == "robust") return Variant::robust;
  if (s == "yeo-johnson") return Variant::yeo_johnson;
  if (s == "bootstrap") return Variant::bootstrap;
  throw DomainError("unknown variant '" + s + "'");
}

struct GroupSample {
  std::vector<Volume> maps;
  /// Group index (0 or 1) per map for two-sample tests.
  std::optional<std::vector<int>> group_labels;
  Mask mask;

  std::size_t size() const noexcept { return maps.size(); }

  void validate() const {
    if (maps.size() < 2) throw PreconditionError("a group sample needs at least 2 maps");
    for (const auto& m : maps) require_same_grid(m.meta(), mask.meta(), "group maps and mask");
    mask.require_nonempty();
    if (group_labels) {
      if (group_labels->size() != maps.size()) throw DimensionError("one group label per map is required");
      for (int l : *group_labels)
        if (l != 0 && l != 1) throw DomainError("group labels must be 0 or 1");
    }
  }

  std::array<std::size_t, 2> group_sizes() const {
    std::array<std::size_t, 2> n{0, 0};
    if (group_labels)
      for (int l : *group_labels) ++n[static_cast<std::size_t>(l)];
    return n;
  }
};

struct NonparamConfig {
  double cdt_p = 0.001;
  std::size_t n_perm = 1000;
  Sidedness sidedness = Sidedness::one;
  Variant variant = Variant::plain;
  Connectivity connectivity = Connectivity::corners;
  Seed seed = 0;
  unsigned workers = 1;
  /// Permutations evaluated per GEMM batch.
  std::size_t batch = 64;

  void validate() const {
    if (!(cdt_p > 0.0 && cdt_p < 0.5)) throw DomainError("cdt_p must lie in (0, 0.5)");
    if (n_perm < 2) throw DomainError("n_perm must be >= 2");
  }
};

struct NonparamResult {
  ClusterTable table;
  /// Max cluster sizes of the non-identity relabelings; p-values use the +1
  /// convention, so the identity is counted once.
  NullMaxDist dist;
  Volume stat;
  double dof = 0.0;
  double threshold_u = 0.0;
  std::size_t n_perm = 0;
  bool exhaustive = false;
  /// More relabelings were requested than exist.
  bool capped = false;

  /// Smallest cluster p-value, 1 when there are no clusters.
  double min_p_fwe() const {
    double p = 1.0;
    for (const auto& c : table.clusters)
      if (c.p_fwe) p = std::min(p, *c.p_fwe);
    return p;
  }
};

struct GroupTTest {
  Volume t;
  double dof = 0.0;
  std::vector<std::uint32_t> flagged;
};

inline constexpr double kDegenerateT = std::numeric_limits<double>::max();

/// One-sample t of `y`, with the zero-variance guard.
inline double one_sample_t(std::span<const double> y) {
  const double n = static_cast<double>(y.size());
  double s = 0.0, q = 0.0;
  for (double v : y) {
    s += v;
    q += v * v;
  }
  const double m = s / n;
  const double var = (q - n * m * m) / (n - 1.0);
  if (!(var > 1e-14 * q / n)) return m > 0 ? kDegenerateT : (m < 0 ? -kDegenerateT : 0.0);
  return m / std::sqrt(var / n);
}

/// Tukey-bisquare M-estimate of location divided by its weighted standard
/// error (c = 4.685, 20 IRLS iterations, tolerance 1e-6).
inline double robust_location_t(std::span<const double> y) {
  const std::size_t n = y.size();
  std::vector<double> tmp(y.begin(), y.end());
  auto median = [](std::vector<double>& v) {
    const std::size_t h = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(h), v.end());
    double med = v[h];
    if (v.size() % 2 == 0) med = 0.5 * (med + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(h)));
    return med;
  };
  double mu = median(tmp);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = std::abs(y[i] - mu);
  const double scale = median(tmp) / 0.6745;
  if (!(scale > 0.0)) return one_sample_t(y);
  constexpr double c = 4.685;
  std::vector<double> w(n, 1.0);
  for (int it = 0; it < 20; ++it) {
    double sw = 0.0, swy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = (y[i] - mu) / (c * scale);
      w[i] = std::abs(r) < 1.0 ? (1.0 - r * r) * (1.0 - r * r) : 0.0;
      sw += w[i];
      swy += w[i] * y[i];
    }
    if (!(sw > 0.0)) break;
    const double next = swy / sw;
    const bool done = std::abs(next - mu) <= 1e-6 * scale;
    mu = next;
    if (done) break;
  }
  double sw = 0.0, num = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sw += w[i];
    num += w[i] * w[i] * (y[i] - mu) * (y[i] - mu);
  }
  const double se2 = num / (sw * sw) * static_cast<double>(n) / static_cast<double>(n - 1);
  if (!(se2 > 0.0)) return mu > 0 ? kDegenerateT : (mu < 0 ? -kDegenerateT : 0.0);
  return mu / std::sqrt(se2);
}

/// Pooled-variance two-sample t (group 0 minus group 1).
inline double two_sample_t(std::span<const double> y, std::span<const int> labels) {
  double s[2] = {0, 0}, q[2] = {0, 0}, n[2] = {0, 0};
  for (std::size_t i = 0; i < y.size(); ++i) {
    const auto g = static_cast<std::size_t>(labels[i]);
    s[g] += y[i];
    q[g] += y[i] * y[i];
    n[g] += 1.0;
  }
  const double m0 = s[0] / n[0], m1 = s[1] / n[1];
  const double ssw = (q[0] - n[0] * m0 * m0) + (q[1] - n[1] * m1 * m1);
  const double d = m0 - m1;
  const double var = ssw / (n[0] + n[1] - 2.0) * (1.0 / n[0] + 1.0 / n[1]);
  if (!(ssw > 1e-14 * (q[0] + q[1]))) return d > 0 ? kDegenerateT : (d < 0 ? -kDegenerateT : 0.0);
  return d / std::sqrt(var);
}

/// Voxelwise one-sample (no labels) or two-sample t inside the mask.
inline GroupTTest group_ttest(std::span<const Volume> maps, const Mask& mask,
                              const std::vector<int>* labels = nullptr) {
  if (maps.size() < 2) throw PreconditionError("group t-test needs at least 2 maps");
  for (const auto& m : maps) require_same_grid(m.meta(), mask.meta(), "group maps and mask");
  const std::size_t n = maps.size();
  GroupTTest r{Volume(mask.meta()), 0.0, {}};
  if (labels) {
    if (labels->size() != n) throw DimensionError("one group label per map is required");
    std::size_t n0 = 0;
    for (int l : *labels) {
      if (l != 0 && l != 1) throw DomainError("group labels must be 0 or 1");
      n0 += (l == 0);
    }
    if (n0 < 2 || n - n0 < 2) throw PreconditionError("each group needs at least 2 maps");
    r.dof = static_cast<double>(n) - 2.0;
  } else {
    r.dof = static_cast<double>(n) - 1.0;
  }
  std::vector<double> y(n);
  for (std::size_t v = 0; v < mask.size(); ++v) {
    if (!mask[v]) continue;
    for (std::size_t i = 0; i < n; ++i) y[i] = maps[i][v];
    const double t = labels ? two_sample_t(y, *labels) : one_sample_t(y);
    if (std::abs(t) == kDegenerateT) r.flagged.push_back(static_cast<std::uint32_t>(v));
    r.t[v] = t;
  }
  return r;
}

/// Group residual maps (subject minus its group mean), stacked as a 4D set
/// for smoothness estimation.
inline Dataset4D group_residuals(std::span<const Volume> maps, const std::vector<int>* labels = nullptr) {
  const std::size_t n = maps.size();
  if (n < 2) throw PreconditionError("group residuals need at least 2 maps");
  const GridMeta& g = maps[0].meta();
  std::vector<Volume> mean(2, Volume(g));
  std::array<double, 2> cnt{0, 0};
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = labels ? static_cast<std::size_t>((*labels)[i]) : 0u;
    cnt[k] += 1.0;
    for (std::size_t v = 0; v < g.size(); ++v) mean[k][v] += maps[i][v];
  }
  for (std::size_t k = 0; k < 2; ++k)
    if (cnt[k] > 0)
      for (auto& x : mean[k].values()) x /= cnt[k];
  Dataset4D out(g, static_cast<int>(n), 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = labels ? static_cast<std::size_t>((*labels)[i]) : 0u;
    auto f = out.frame(static_cast<int>(i));
    for (std::size_t v = 0; v < g.size(); ++v) f[v] = maps[i][v] - mean[k][v];
  }
  return out;
}

namespace detail {

inline double distinct_sign_patterns(std::size_t n) { return std::ldexp(1.0, static_cast<int>(n)); }

inline double distinct_relabelings(std::size_t n, std::size_t n0) {
  double c = 1.0;
  for (std::size_t i = 1; i <= n0; ++i) c = c * static_cast<double>(n - n0 + i) / static_cast<double>(i);
  return std::round(c);
}

// All n0-subsets of {0..n-1} in lexicographic order, identity first.
inline std::vector<std::vector<int>> all_relabelings(const std::vector<int>& labels) {
  const std::size_t n = labels.size();
  std::size_t n0 = 0;
  for (int l : labels) n0 += (l == 0);
  std::vector<std::vector<int>> out{labels};
  std::vector<int> pick(n, 1);
  std::fill(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(n0), 0);
  std::vector<int> cur = pick;
  do {
    if (cur != labels) out.push_back(cur);
  } while (std::next_permutation(cur.begin(), cur.end()));
  return out;
}

// Voxel-by-subject data and per-voxel constants for the batched kernels.
class GroupEngine {
 public:
  GroupEngine(const GroupSample& s, const NonparamConfig& cfg, double u)
      : cfg_(cfg), grid_(s.mask.meta()), vox_(s.mask.indices()), n_(s.size()), u_(u) {
    const auto M = static_cast<Eigen::Index>(vox_.size());
    Y_.resize(M, static_cast<Eigen::Index>(n_));
    for (std::size_t i = 0; i < n_; ++i)
      for (Eigen::Index j = 0; j < M; ++j) Y_(j, static_cast<Eigen::Index>(i)) = s.maps[i][vox_[static_cast<std::size_t>(j)]];
    two_sample_ = s.group_labels.has_value();
    if (two_sample_) {
      // A per-voxel offset does not change two-sample t; removing it
      // keeps the sum-of-squares identities well conditioned.
      Y_.colwise() -= Y_.rowwise().mean();
      const auto sz = s.group_sizes();
      n0_ = static_cast<double>(sz[0]);
      n1_ = static_cast<double>(sz[1]);
      St_ = Y_.rowwise().sum();
      lambda_ = u_ * u_ * (1.0 / n0_ + 1.0 / n1_) / (n0_ + n1_ - 2.0);
    } else {
      const double n = static_cast<double>(n_);
      kappa_ = u_ * u_ * n / (n - 1.0 + u_ * u_);
    }
    Q_ = Y_.rowwise().squaredNorm();
    if (cfg.variant == Variant::bootstrap) {
      Yc_ = Y_;
      Yc_.colwise() -= Y_.rowwise().mean();
      Yc2_ = Yc_.array().square().matrix();
    }
  }

  std::size_t voxels() const noexcept { return vox_.size(); }
  const std::vector<std::uint32_t>& vox() const noexcept { return vox_; }

  // Weight columns: signs (one-sample), group-0 indicators (two-sample) or
  // bootstrap counts. Returns the max cluster size per column.
  std::vector<std::size_t> max_clusters(const Eigen::MatrixXd& W, ClusterScanner& scanner) const {
    const Eigen::MatrixXd& base = cfg_.variant == Variant::bootstrap ? Yc_ : Y_;
    const Eigen::MatrixXd R = base * W;
    Eigen::MatrixXd R2;
    if (cfg_.variant == Variant::bootstrap) R2 = Yc2_ * W;
    std::vector<std::size_t> out(static_cast<std::size_t>(W.cols()));
    std::vector<std::uint32_t> pos, neg;
    for (Eigen::Index r = 0; r < W.cols(); ++r) {
      pos.clear();
      neg.clear();
      supra(R.col(r), cfg_.variant == Variant::bootstrap ? R2.col(r) : Q_, W.col(r).sum(), pos, neg);
      out[static_cast<std::size_t>(r)] = std::max(scanner.max_cluster(pos), scanner.max_cluster(neg));
    }
    return out;
  }

  void supra(const Eigen::Ref<const Eigen::VectorXd>& S, const Eigen::Ref<const Eigen::VectorXd>& Q, double wsum,
             std::vector<std::uint32_t>& pos, std::vector<std::uint32_t>& neg) const {
    const bool both = cfg_.sidedness == Sidedness::two;
    const auto M = static_cast<Eigen::Index>(vox_.size());
    if (two_sample_) {
      for (Eigen::Index j = 0; j < M; ++j) {
        const double s0 = S[j], s1 = St_[j] - s0;
        const double d = s0 / n0_ - s1 / n1_;
        const double ssw = std::max(0.0, Q[j] - s0 * s0 / n0_ - s1 * s1 / n1_);
        if (d * d < lambda_ * ssw || d == 0.0) continue;
        if (d > 0) pos.push_back(vox_[static_cast<std::size_t>(j)]);
        else if (both) neg.push_back(vox_[static_cast<std::size_t>(j)]);
      }
    } else {
      // t >= u  <=>  S > 0 and S^2 >= kappa Q, with kappa = u^2 n / (n - 1 + u^2).
      const double kappa = cfg_.variant == Variant::bootstrap ? kappa_for(wsum) : kappa_;
      for (Eigen::Index j = 0; j < M; ++j) {
        const double s = S[j];
        if (s == 0.0 || s * s < kappa * Q[j]) continue;
        if (s > 0) pos.push_back(vox_[static_cast<std::size_t>(j)]);
        else if (both) neg.push_back(vox_[static_cast<std::size_t>(j)]);
      }
    }
  }

  // Slow path: explicit per-voxel statistic of sign-flipped values.
  std::size_t max_cluster_slow(const Eigen::VectorXd& signs, ClusterScanner& scanner, Volume* stat_out) const {
    std::vector<double> y(n_);
    std::vector<std::uint32_t> pos, neg;
    const bool both = cfg_.sidedness == Sidedness::two;
    for (std::size_t j = 0; j < vox_.size(); ++j) {
      for (std::size_t i = 0; i < n_; ++i)
        y[i] = signs[static_cast<Eigen::Index>(i)] * Y_(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i));
      double t;
      if (cfg_.variant == Variant::robust) {
        t = robust_location_t(y);
      } else {
        const auto yj = yeo_johnson(y);
        t = one_sample_t(yj.values);
      }
      if (stat_out) (*stat_out)[vox_[j]] = t;
      if (t >= u_) pos.push_back(vox_[j]);
      else if (both && t <= -u_) neg.push_back(vox_[j]);
    }
    return std::max(scanner.max_cluster(pos), scanner.max_cluster(neg));
  }

 private:
  double kappa_for(double n) const { return u_ * u_ * n / (n - 1.0 + u_ * u_); }

  const NonparamConfig& cfg_;
  GridMeta grid_;
  std::vector<std::uint32_t> vox_;
  std::size_t n_;
  double u_;
  bool two_sample_ = false;
  double n0_ = 0, n1_ = 0, kappa_ = 0, lambda_ = 0;
  Eigen::MatrixXd Y_, Yc_, Yc2_;
  Eigen::VectorXd Q_, St_;
};

inline void assign_pvalues(ClusterTable& table, const NullMaxDist& dist) {
  for (auto& c : table.clusters) c.p_fwe = fwe_pvalue_from_dist(dist, static_cast<double>(c.size_voxels));
}

inline ClusterTable observed_clusters(const Volume& stat, const Mask& mask, double u, const NonparamConfig& cfg) {
  return connected_components(stat, mask, u, cfg.connectivity,
                              cfg.sidedness == Sidedness::two ? Tail::both : Tail::positive, cfg.cdt_p);
}

}  // namespace detail

/// Label-permutation test of group 0 minus group 1.
inline NonparamResult two_sample_perm(const GroupSample& sample, const NonparamConfig& cfg) {
  sample.validate();
  cfg.validate();
  if (!sample.group_labels) throw PreconditionError("two-sample permutation needs group labels");
  if (cfg.variant != Variant::plain)
    throw DomainError("variant '" + to_string(cfg.variant) + "' applies to one-sample tests only");
  const auto sz = sample.group_sizes();
  if (sz[0] < 2 || sz[1] < 2) throw PreconditionError("each group needs at least 2 maps");
  const std::size_t n = sample.size();
  const auto& labels = *sample.group_labels;

  NonparamResult res;
  res.dof = static_cast<double>(n) - 2.0;
  const double tail_p = cfg.sidedness == Sidedness::two ? cfg.cdt_p / 2.0 : cfg.cdt_p;
  res.threshold_u = t_upper_quantile(tail_p, res.dof);
  res.stat = group_ttest(sample.maps, sample.mask, &labels).t;

  const double distinct = detail::distinct_relabelings(n, sz[0]);
  std::vector<std::vector<int>> relabel;
  if (static_cast<double>(cfg.n_perm) >= distinct) {
    relabel = detail::all_relabelings(labels);
    res.exhaustive = true;
    res.capped = static_cast<double>(cfg.n_perm) > distinct;
  } else {
    relabel.reserve(cfg.n_perm);
    relabel.push_back(labels);
    for (std::size_t i = 1; i < cfg.n_perm; ++i) {
      Rng rng = make_rng(derive_seed(cfg.seed, Stream::permutation, i));
      auto l = labels;
      std::shuffle(l.begin(), l.end(), rng);
      relabel.push_back(std::move(l));
    }
  }
  res.n_perm = relabel.size();

  detail::GroupEngine engine(sample, cfg, res.threshold_u);
  std::vector<std::size_t> maxes(relabel.size());
  const std::size_t B = std::max<std::size_t>(1, cfg.batch);
  const std::size_t n_batches = (relabel.size() + B - 1) / B;
  const unsigned workers = std::max(1u, cfg.workers);
  std::vector<std::unique_ptr<ClusterScanner>> scanners(workers);
  for (auto& s : scanners) s = std::make_unique<ClusterScanner>(sample.mask.meta(), cfg.connectivity);
  parallel_for(n_batches, workers, [&](unsigned w, std::size_t b) {
    const std::size_t lo = b * B, hi = std::min(relabel.size(), lo + B);
    Eigen::MatrixXd W(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(hi - lo));
    for (std::size_t k = lo; k < hi; ++k)
      for (std::size_t i = 0; i < n; ++i)
        W(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k - lo)) = relabel[k][i] == 0 ? 1.0 : 0.0;
    const auto m = engine.max_clusters(W, *scanners[w]);
    std::copy(m.begin(), m.end(), maxes.begin() + static_cast<std::ptrdiff_t>(lo));
  });

  res.table = detail::observed_clusters(res.stat, sample.mask, res.threshold_u, cfg);
  res.dist.samples.assign(maxes.begin() + 1, maxes.end());
  res.dist.sort();
  res.dist.provenance = NullProvenance::permutation;
  res.dist.seed = cfg.seed;
  res.dist.params = {{"cdt_p", cfg.cdt_p}, {"n_perm", res.n_perm}, {"sidedness", to_string(cfg.sidedness)},
                     {"exhaustive", res.exhaustive}, {"capped", res.capped}};
  detail::assign_pvalues(res.table, res.dist);
  return res;
}

/// Sign-flipping one-sample test with the remediation variants.
inline NonparamResult one_sample_signflip(const GroupSample& sample, const NonparamConfig& cfg) {
  sample.validate();
  cfg.validate();
  const std::size_t n = sample.size();
  {
    bool any = false;
    for (const auto& m : sample.maps)
      for (std::size_t v = 0; v < m.size() && !any; ++v) any = sample.mask[v] && m[v] != 0.0;
    if (!any) throw DomainError("degenerate statistic: all maps are zero inside the mask");
  }

  NonparamResult res;
  res.dof = static_cast<double>(n) - 1.0;
  const double tail_p = cfg.sidedness == Sidedness::two ? cfg.cdt_p / 2.0 : cfg.cdt_p;
  res.threshold_u = t_upper_quantile(tail_p, res.dof);
  detail::GroupEngine engine(sample, cfg, res.threshold_u);

  const bool bootstrap = cfg.variant == Variant::bootstrap;
  const bool slow = cfg.variant == Variant::robust || cfg.variant == Variant::yeo_johnson;
  const double distinct = detail::distinct_sign_patterns(n);
  std::size_t total = cfg.n_perm;
  if (!bootstrap && static_cast<double>(cfg.n_perm) >= distinct) {
    total = static_cast<std::size_t>(distinct);
    res.exhaustive = true;
    res.capped = static_cast<double>(cfg.n_perm) > distinct;
  }
  res.n_perm = total;

  // Column k of the weights: index 0 is the identity (all +1).
  auto weights = [&](std::size_t k) {
    Eigen::VectorXd w = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(n));
    if (k == 0) return w;
    if (res.exhaustive) {
      for (std::size_t i = 0; i < n; ++i)
        if ((k >> i) & 1u) w[static_cast<Eigen::Index>(i)] = -1.0;
      return w;
    }
    Rng rng = make_rng(derive_seed(cfg.seed, Stream::permutation, k));
    if (bootstrap) {
      w.setZero();
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      for (std::size_t i = 0; i < n; ++i) w[static_cast<Eigen::Index>(pick(rng))] += 1.0;
    } else {
      std::bernoulli_distribution flip(0.5);
      for (std::size_t i = 0; i < n; ++i)
        if (flip(rng)) w[static_cast<Eigen::Index>(i)] = -1.0;
    }
    return w;
  };

  std::vector<std::size_t> maxes(total);
  const unsigned workers = std::max(1u, cfg.workers);
  std::vector<std::unique_ptr<ClusterScanner>> scanners(workers);
  for (auto& s : scanners) s = std::make_unique<ClusterScanner>(sample.mask.meta(), cfg.connectivity);

  res.stat = Volume(sample.mask.meta());
  if (slow) {
    maxes[0] = engine.max_cluster_slow(weights(0), *scanners[0], &res.stat);
    parallel_for(total - 1, workers, [&](unsigned w, std::size_t k) {
      maxes[k + 1] = engine.max_cluster_slow(weights(k + 1), *scanners[w], nullptr);
    });
  } else {
    // The identity enters the p-values through the +1 term only.
    res.stat = group_ttest(sample.maps, sample.mask).t;
    const std::size_t B = std::max<std::size_t>(1, cfg.batch);
    const std::size_t rest = total - 1;
    const std::size_t n_batches = (rest + B - 1) / B;
    parallel_for(n_batches, workers, [&](unsigned w, std::size_t b) {
      const std::size_t lo = 1 + b * B, hi = std::min(total, lo + B);
      Eigen::MatrixXd W(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(hi - lo));
      for (std::size_t k = lo; k < hi; ++k) W.col(static_cast<Eigen::Index>(k - lo)) = weights(k);
      const auto m = engine.max_clusters(W, *scanners[w]);
      std::copy(m.begin(), m.end(), maxes.begin() + static_cast<std::ptrdiff_t>(lo));
    });
  }

  res.table = detail::observed_clusters(res.stat, sample.mask, res.threshold_u, cfg);
  res.dist.samples.assign(maxes.begin() + 1, maxes.end());
  res.dist.sort();
  res.dist.provenance = NullProvenance::signflip;
  res.dist.seed = cfg.seed;
  res.dist.params = {{"cdt_p", cfg.cdt_p}, {"n_perm", res.n_perm}, {"sidedness", to_string(cfg.sidedness)},
                     {"variant", to_string(cfg.variant)}, {"exhaustive", res.exhaustive},
                     {"capped", res.capped}};
  detail::assign_pvalues(res.table, res.dist);
  return res;
}

inline std::string cluster_table_csv(const ClusterTable& table, const GridMeta& g) {
  std::ostringstream os;
  os.precision(10);
  os << "cluster_id,size,peak_t,peak_x,peak_y,peak_z,p_fwe\n";
  std::size_t id = 1;
  for (const auto& c : table.clusters) {
    const auto xyz = g.coords(c.peak_index);
    os << id++ << ',' << c.size_voxels << ',' << c.peak_value << ',' << xyz[0] << ',' << xyz[1] << ',' << xyz[2]
       << ',';
    if (c.p_fwe) os << *c.p_fwe;
    os << '\n';
  }
  return os.str();
}

inline void write_cluster_table(const ClusterTable& table, const GridMeta& g, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << cluster_table_csv(table, g);
}

}  // namespace nullfwe
