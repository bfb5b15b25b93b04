#include <nullfwe/paramthresh.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace nullfwe;

namespace {

GrftContext context(double resels, std::size_t voxels, double cdt_p) {
  GrftContext c;
  c.smoothness.resels = resels;
  c.smoothness.mask_voxels = voxels;
  c.mask_voxels = voxels;
  c.cdt_p = cdt_p;
  return c;
}

// Written from the closed forms with literal constants.
struct GrftOracle {
  double em, en, beta;
  GrftOracle(double R, double S, double u, double tail) {
    const double pi = 3.141592653589793;
    em = R * std::pow(4.0 * 0.6931471805599453, 1.5) / (4.0 * pi * pi) * (u * u - 1.0) * std::exp(-u * u / 2.0);
    en = S * tail / em;
    beta = std::pow(1.329340388179137 / en, 2.0 / 3.0);
  }
  double p(double k) const { return 1.0 - std::exp(-em * std::exp(-beta * std::pow(k, 2.0 / 3.0))); }
};

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("nullfwe_test_" + name);
}

}  // namespace

TEST(Grft, MatchesClosedFormOracle) {
  // u = z_{0.999}, upper tail 0.001.
  const GrftOracle o(400.0, 50000.0, 3.090232306167813, 0.001);
  const auto c = context(400.0, 50000, 0.001);
  EXPECT_NEAR(c.threshold_u(), 3.090232306167813, 1e-9);
  EXPECT_NEAR(c.expected_clusters(), o.em, 1e-9 * o.em);
  EXPECT_NEAR(c.expected_cluster_size(), o.en, 1e-6 * o.en);
  for (double k : {0.0, 1.0, 5.0, 20.0, 60.0, 200.0}) EXPECT_NEAR(grft_cluster_pvalue(k, c), o.p(k), 1e-8) << k;
  EXPECT_NEAR(grft_cluster_pvalue(0.0, c), 1.0 - std::exp(-o.em), 1e-12);
}

TEST(Grft, SizeThresholdAgreesWithLinearScan) {
  const GrftOracle o(400.0, 50000.0, 3.090232306167813, 0.001);
  const auto c = context(400.0, 50000, 0.001);
  for (double alpha : {0.01, 0.05, 0.2}) {
    std::size_t k = 0;
    while (o.p(static_cast<double>(k)) > alpha) ++k;
    EXPECT_EQ(grft_size_threshold(c, alpha), k) << alpha;
  }
}

TEST(Grft, PvalueDecreasesWithSize) {
  const auto c = context(250.0, 40000, 0.01);
  double prev = 2.0;
  for (double k = 0; k < 500; k += 7) {
    const double p = grft_cluster_pvalue(k, c);
    EXPECT_LE(p, prev);
    EXPECT_GE(p, 0.0);
    prev = p;
  }
}

TEST(Grft, RejectsLaxThresholdAndBadInputs) {
  EXPECT_THROW(context(100.0, 1000, 0.2).expected_clusters(), DomainError);
  EXPECT_THROW(context(0.0, 1000, 0.001).expected_clusters(), DomainError);
  EXPECT_THROW(grft_cluster_pvalue(-1.0, context(100.0, 1000, 0.001)), DomainError);
  EXPECT_THROW(grft_size_threshold(context(100.0, 1000, 0.001), 1.0), DomainError);
}

TEST(NullDist, PvalueAndThresholdConventions) {
  NullMaxDist d;
  for (std::size_t i = 1; i <= 100; ++i) d.samples.push_back(i);
  EXPECT_DOUBLE_EQ(fwe_pvalue_from_dist(d, 91), 11.0 / 101.0);
  EXPECT_DOUBLE_EQ(fwe_pvalue_from_dist(d, 0), 1.0);
  EXPECT_DOUBLE_EQ(fwe_pvalue_from_dist(d, 1000), 1.0 / 101.0);
  // #{>= k} / 100 <= 0.05 first holds at k = 96.
  EXPECT_EQ(threshold_from_dist(d, 0.05), 96u);
  d.samples.pop_back();
  EXPECT_THROW(threshold_from_dist(d, 0.05), PreconditionError);
  EXPECT_THROW(fwe_pvalue_from_dist(NullMaxDist{}, 3), DomainError);
}

TEST(NullDist, ThresholdWithTies) {
  NullMaxDist d;
  d.samples.assign(200, 0);
  EXPECT_EQ(threshold_from_dist(d, 0.05), 1u);
  for (std::size_t i = 0; i < 20; ++i) d.samples[i] = 7;
  d.sort();
  // 20 / 200 = 0.1 > 0.05 for k <= 7.
  EXPECT_EQ(threshold_from_dist(d, 0.05), 8u);
  EXPECT_EQ(threshold_from_dist(d, 0.1), 1u);
}

TEST(McThreshold, ReproducibleAndMonotoneInAlpha) {
  const GridMeta g{20, 20, 20, 3, 3, 3};
  const Mask m(g);
  const auto acf = AcfModel::gaussian(6.0);
  const auto a = mc_cluster_threshold(acf, m, 0.01, 0.05, 300, 11);
  const auto b = mc_cluster_threshold(acf, m, 0.01, 0.05, 300, 11);
  EXPECT_EQ(a.dist.samples, b.dist.samples);
  EXPECT_EQ(a.k_thresh, b.k_thresh);
  EXPECT_GE(threshold_from_dist(a.dist, 0.01), threshold_from_dist(a.dist, 0.05));
  EXPECT_GE(threshold_from_dist(a.dist, 0.05), threshold_from_dist(a.dist, 0.2));
  EXPECT_TRUE(std::is_sorted(a.dist.samples.begin(), a.dist.samples.end()));
}

TEST(McThreshold, WorkerCountDoesNotChangeDraws) {
  const GridMeta g{16, 16, 16, 3, 3, 3};
  McOptions one, four;
  four.workers = 4;
  const auto a = mc_null_distribution(AcfModel::gaussian(6.0), Mask(g), 0.01, 64, 3, one);
  const auto b = mc_null_distribution(AcfModel::gaussian(6.0), Mask(g), 0.01, 64, 3, four);
  EXPECT_EQ(a.samples, b.samples);
}

TEST(McThreshold, IndependentSeedsAgree) {
  const GridMeta g{20, 20, 20, 3, 3, 3};
  const auto a = mc_cluster_threshold(AcfModel::gaussian(6.0), Mask(g), 0.001, 0.05, 1500, 1);
  const auto b = mc_cluster_threshold(AcfModel::gaussian(6.0), Mask(g), 0.001, 0.05, 1500, 2);
  EXPECT_LE(std::abs(static_cast<long>(a.k_thresh) - static_cast<long>(b.k_thresh)), 1);
}

TEST(McThreshold, FreshFieldsRejectAtNominalRate) {
  const GridMeta g{20, 20, 20, 3, 3, 3};
  const Mask mask(g);
  const auto th = mc_cluster_threshold(AcfModel::gaussian(6.0), mask, 0.01, 0.05, 2000, 11);
  const double u = normal_upper_quantile(0.01);
  int hits = 0;
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    const Volume f = sample_null_field(g, AcfModel::gaussian(6.0), 100000 + static_cast<Seed>(i));
    hits += connected_components(f, mask, u, Connectivity::corners, Tail::positive).max_size() >= th.k_thresh;
  }
  // Wilson 95% interval of 50/1000, widened for the threshold's own MC error.
  EXPECT_GE(hits, 30);
  EXPECT_LE(hits, 70);
}

TEST(McThreshold, SmoothingRaisesThreshold) {
  const GridMeta g{20, 20, 20, 3, 3, 3};
  McOptions smooth;
  smooth.smoothing_mm = 6.0;
  const auto a = mc_cluster_threshold(AcfModel::gaussian(4.0), Mask(g), 0.01, 0.05, 200, 5);
  const auto b = mc_cluster_threshold(AcfModel::gaussian(4.0), Mask(g), 0.01, 0.05, 200, 5, smooth);
  EXPECT_GT(b.k_thresh, a.k_thresh);
}

TEST(McThreshold, Errors) {
  const GridMeta g{8, 8, 8, 3, 3, 3};
  EXPECT_THROW(mc_null_distribution(AcfModel::gaussian(3.0), Mask(g), 0.6, 10, 1), DomainError);
  EXPECT_THROW(mc_null_distribution(AcfModel::gaussian(3.0), Mask(g), 0.01, 0, 1), DomainError);
  EXPECT_THROW(mc_null_distribution(AcfModel::gaussian(3.0), Mask(g, false), 0.01, 10, 1), PreconditionError);
  EXPECT_THROW(mc_cluster_threshold(AcfModel::gaussian(3.0), Mask(g), 0.01, 0.05, 50, 1), PreconditionError);
}

TEST(NullDistFile, RoundTripAndCorruption) {
  const GridMeta g{12, 12, 12, 3, 3, 3};
  const auto d = mc_null_distribution(AcfModel::gaussian(6.0), Mask(g), 0.01, 40, 9);
  const auto path = temp_file("dist.csv");
  write_null_dist(d, path);
  const auto r = read_null_dist(path);
  EXPECT_EQ(r.samples, d.samples);
  EXPECT_EQ(r.seed, 9u);
  EXPECT_EQ(r.provenance, NullProvenance::monte_carlo);
  EXPECT_EQ(r.params.at("n_sims").get<std::size_t>(), 40u);

  {
    std::ofstream os(path, std::ios::app);
    os << "17\n";
  }
  EXPECT_THROW(read_null_dist(path), CorruptionError);
  {
    std::ofstream os(path);
    os << "# {}\nmax_cluster_size\n3\n-4\n";
  }
  EXPECT_THROW(read_null_dist(path), ParseError);
  {
    std::ofstream os(path);
    os << "max_cluster_size\n3\n";
  }
  EXPECT_THROW(read_null_dist(path), ParseError);
  std::filesystem::remove(path);
}
