#pragma once
// Random-field cluster p-values and Monte Carlo cluster-size thresholds.

#include <nullfwe/acf.hpp>
#include <nullfwe/cluster.hpp>
#include <nullfwe/parallel.hpp>
#include <nullfwe/stats.hpp>
#include <nullfwe/synth.hpp>

#include <json.hpp>

#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace nullfwe {

struct GrftContext {
  SmoothnessEstimate smoothness;
  std::size_t mask_voxels = 0;
  double cdt_p = 0.001;
  double dof = 0.0;

  void validate() const {
    if (!(cdt_p > 0.0 && cdt_p < 1.0)) throw DomainError("cdt_p must lie in (0, 1)");
    if (!(smoothness.resels > 0.0)) throw DomainError("resel count must be positive");
    if (mask_voxels == 0) throw DomainError("mask must contain voxels");
  }

  double threshold_u() const { return normal_upper_quantile(cdt_p); }

  /// Expected number of clusters above u (Euler characteristic).
  double expected_clusters() const {
    validate();
    const double u = threshold_u();
    if (u * u <= 1.0)
      throw DomainError("cluster-forming threshold too lax for the random-field approximation; use a stricter cdt_p");
    return smoothness.resels * std::pow(4.0 * std::numbers::ln2, 1.5) / (4.0 * std::numbers::pi * std::numbers::pi) *
           (u * u - 1.0) * std::exp(-0.5 * u * u);
  }

  /// Expected cluster size in voxels.
  double expected_cluster_size() const {
    return static_cast<double>(mask_voxels) * normal_sf(threshold_u()) / expected_clusters();
  }
};

inline double grft_cluster_pvalue(double k, const GrftContext& ctx) {
  if (!(k >= 0.0)) throw DomainError("cluster size must be nonnegative");
  const double em = ctx.expected_clusters();
  const double en = ctx.expected_cluster_size();
  const double beta = std::pow(boost::math::tgamma(2.5) / en, 2.0 / 3.0);
  const double p_size = std::exp(-beta * std::pow(k, 2.0 / 3.0));
  return std::clamp(-std::expm1(-em * p_size), 0.0, 1.0);
}

/// Smallest integer cluster size whose p-value is <= alpha.
inline std::size_t grft_size_threshold(const GrftContext& ctx, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("alpha must lie in (0, 1)");
  std::size_t lo = 0, hi = 1;
  while (grft_cluster_pvalue(static_cast<double>(hi), ctx) > alpha) {
    lo = hi;
    hi *= 2;
    if (hi > (std::size_t{1} << 40)) throw DomainError("no finite cluster size reaches alpha");
  }
  if (grft_cluster_pvalue(0.0, ctx) <= alpha) return 0;
  while (hi - lo > 1) {
    const std::size_t mid = lo + (hi - lo) / 2;
    (grft_cluster_pvalue(static_cast<double>(mid), ctx) <= alpha ? hi : lo) = mid;
  }
  return hi;
}

enum class NullProvenance { monte_carlo, permutation, signflip };

inline std::string to_string(NullProvenance p) {
  switch (p) {
    case NullProvenance::monte_carlo: return "monte-carlo";
    case NullProvenance::permutation: return "permutation";
    case NullProvenance::signflip: return "signflip";
  }
  return "monte-carlo";
}

inline NullProvenance null_provenance_from_string(const std::string& s) {
  if (s == "monte-carlo") return NullProvenance::monte_carlo;
  if (s == "permutation") return NullProvenance::permutation;
  if (s == "signflip") return NullProvenance::signflip;
  throw ParseError("provenance", "unknown null provenance '" + s + "'");
}

struct NullMaxDist {
  std::vector<std::size_t> samples;  // sorted ascending
  NullProvenance provenance = NullProvenance::monte_carlo;
  Seed seed = 0;
  nlohmann::json params = nlohmann::json::object();

  std::size_t n() const noexcept { return samples.size(); }
  void sort() { std::sort(samples.begin(), samples.end()); }

  /// Number of samples >= k.
  std::size_t count_at_least(double k) const {
    const auto it = std::lower_bound(samples.begin(), samples.end(), k,
                                     [](std::size_t s, double kk) { return static_cast<double>(s) < kk; });
    return static_cast<std::size_t>(samples.end() - it);
  }
};

/// Smallest k >= 1 with #{samples >= k} / n <= alpha.
inline std::size_t threshold_from_dist(const NullMaxDist& dist, double alpha) {
  if (dist.samples.empty()) throw DomainError("null distribution is empty");
  if (dist.n() < 100) throw PreconditionError("threshold queries need at least 100 null samples");
  if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("alpha must lie in (0, 1)");
  const double n = static_cast<double>(dist.n());
  for (std::size_t k = 1;; ++k)
    if (static_cast<double>(dist.count_at_least(static_cast<double>(k))) / n <= alpha) return k;
}

/// (1 + #{samples >= k}) / (n + 1).
inline double fwe_pvalue_from_dist(const NullMaxDist& dist, double k) {
  if (dist.samples.empty()) throw DomainError("null distribution is empty");
  return (1.0 + static_cast<double>(dist.count_at_least(k))) / (static_cast<double>(dist.n()) + 1.0);
}

struct McThreshold {
  std::size_t k_thresh = 0;
  NullMaxDist dist;
};

struct McOptions {
  Connectivity connectivity = Connectivity::corners;
  Tail tail = Tail::positive;
  /// Extra Gaussian smoothing applied to the simulated fields.
  double smoothing_mm = 0.0;
  unsigned workers = 1;
};

/// Max in-mask cluster size of simulated null fields thresholded at the
/// Gaussian quantile of cdt_p (split over tails when two-sided).
inline NullMaxDist mc_null_distribution(const AcfModel& acf, const Mask& mask, double cdt_p, std::size_t n_sims,
                                        Seed seed, const McOptions& opts = {}) {
  if (!(cdt_p > 0.0 && cdt_p < 0.5)) throw DomainError("cdt_p must lie in (0, 0.5)");
  if (n_sims < 1) throw DomainError("n_sims must be >= 1");
  mask.require_nonempty();
  const GridMeta& g = mask.meta();
  const double u = normal_upper_quantile(opts.tail == Tail::both ? cdt_p / 2.0 : cdt_p);
  const auto inside = mask.indices();

  NullMaxDist dist;
  dist.samples.assign(n_sims, 0);
  const unsigned workers = std::max(1u, std::min<unsigned>(opts.workers, static_cast<unsigned>(n_sims)));
  std::vector<std::unique_ptr<FieldSampler>> samplers(workers);
  std::vector<std::unique_ptr<ClusterScanner>> scanners(workers);
  for (unsigned w = 0; w < workers; ++w) {
    samplers[w] = std::make_unique<FieldSampler>(g, acf, opts.smoothing_mm);
    scanners[w] = std::make_unique<ClusterScanner>(g, opts.connectivity);
  }
  std::vector<std::vector<double>> field(workers, std::vector<double>(g.size()));
  std::vector<std::vector<std::uint32_t>> pos(workers), neg(workers);
  parallel_for(n_sims, workers, [&](unsigned w, std::size_t i) {
    Rng rng = make_rng(derive_seed(seed, Stream::monte_carlo, i));
    samplers[w]->sample(rng, field[w]);
    pos[w].clear();
    neg[w].clear();
    for (auto v : inside) {
      const double x = field[w][v];
      if (opts.tail != Tail::negative && x >= u) pos[w].push_back(v);
      else if (opts.tail != Tail::positive && x <= -u) neg[w].push_back(v);
    }
    std::size_t best = scanners[w]->max_cluster(pos[w]);
    best = std::max(best, scanners[w]->max_cluster(neg[w]));
    dist.samples[i] = best;
  });
  dist.sort();
  dist.provenance = NullProvenance::monte_carlo;
  dist.seed = seed;
  dist.params = {{"cdt_p", cdt_p},
                 {"n_sims", n_sims},
                 {"acf", acf.kind == AcfModel::Kind::gaussian ? "gaussian" : "mixed"},
                 {"fwhm_mm", acf.fwhm_mm},
                 {"a", acf.a},
                 {"b_mm", acf.b_mm},
                 {"c_mm", acf.c_mm},
                 {"smoothing_mm", opts.smoothing_mm},
                 {"connectivity", static_cast<int>(opts.connectivity)},
                 {"two_sided", opts.tail == Tail::both}};
  return dist;
}

inline McThreshold mc_cluster_threshold(const AcfModel& acf, const Mask& mask, double cdt_p, double alpha,
                                        std::size_t n_sims, Seed seed, const McOptions& opts = {}) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("alpha must lie in (0, 1)");
  McThreshold r;
  r.dist = mc_null_distribution(acf, mask, cdt_p, n_sims, seed, opts);
  r.dist.params["alpha"] = alpha;
  r.k_thresh = threshold_from_dist(r.dist, alpha);
  return r;
}

inline void write_null_dist(const NullMaxDist& dist, const std::filesystem::path& path) {
  nlohmann::json head = {{"provenance", to_string(dist.provenance)},
                         {"seed", dist.seed},
                         {"n", dist.n()},
                         {"params", dist.params}};
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << "# " << head.dump() << "\nmax_cluster_size\n";
  for (auto s : dist.samples) os << s << '\n';
  if (!os) throw Error("write failed for " + path.string());
}

inline NullMaxDist read_null_dist(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line) || line.rfind("# ", 0) != 0)
    throw ParseError("header", "null distribution file must start with a '# {json}' line");
  NullMaxDist d;
  nlohmann::json head;
  try {
    head = nlohmann::json::parse(line.substr(2));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("header", std::string("bad JSON header: ") + e.what());
  }
  d.provenance = null_provenance_from_string(head.value("provenance", std::string("monte-carlo")));
  d.seed = head.value("seed", Seed{0});
  d.params = head.value("params", nlohmann::json::object());
  if (!std::getline(is, line) || line != "max_cluster_size")
    throw ParseError("columns", "expected column header 'max_cluster_size'");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      std::size_t pos = 0;
      if (line.front() == '-' || line.front() == '+') throw std::invalid_argument(line);
      const unsigned long long v = std::stoull(line, &pos);
      if (pos != line.size()) throw std::invalid_argument(line);
      d.samples.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ParseError("max_cluster_size", "not a nonnegative integer: '" + line + "'");
    }
  }
  if (head.contains("n") && head["n"].get<std::size_t>() != d.n())
    throw CorruptionError("null distribution sample count does not match its header");
  d.sort();
  return d;
}

}  // namespace nullfwe
