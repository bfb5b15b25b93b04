#include <nullfwe/design.hpp>

#include <gtest/gtest.h>

#include <cmath>

using namespace nullfwe;

namespace {

// Gamma densities written out directly: shape 6 has Gamma(6) = 120.
double hrf_oracle(double t) {
  if (t <= 0) return 0.0;
  return std::pow(t, 5) * std::exp(-t) / 120.0 - std::pow(t, 15) * std::exp(-t) / std::tgamma(16.0) / 6.0;
}

}  // namespace

TEST(ParadigmKind, StringRoundTrip) {
  for (auto k : {ParadigmKind::B1, ParadigmKind::B2, ParadigmKind::E1, ParadigmKind::E2, ParadigmKind::E3,
                 ParadigmKind::E4, ParadigmKind::custom})
    EXPECT_EQ(paradigm_kind_from_string(to_string(k)), k);
  EXPECT_THROW(paradigm_kind_from_string("E5"), DomainError);
}

TEST(BuildParadigm, BlockDesignsAlternate) {
  const auto b1 = build_paradigm(ParadigmKind::B1, "cambridge", 119, 3.0, 0);
  ASSERT_FALSE(b1.events.empty());
  EXPECT_DOUBLE_EQ(b1.events[0].onset_s, 10.0);
  for (std::size_t i = 1; i < b1.events.size(); ++i) EXPECT_DOUBLE_EQ(b1.events[i].onset_s - b1.events[i - 1].onset_s, 20.0);
  EXPECT_EQ(b1.events.size(), 17u);  // floor((357 - 10 - 10) / 20) + 1

  const auto b2 = build_paradigm(ParadigmKind::B2, "cambridge", 119, 3.0, 0);
  for (const auto& e : b2.events) EXPECT_DOUBLE_EQ(e.duration_s, 30.0);
  EXPECT_EQ(b2.events.size(), 5u);
}

TEST(BuildParadigm, E3BeijingCountsAndTiming) {
  const auto p = build_paradigm(ParadigmKind::E3, "beijing", 225, 2.0, 0);
  EXPECT_EQ(p.count(1), 13u);
  EXPECT_EQ(p.count(2), 13u);
  double prev_end = 0.0;
  for (const auto& e : p.events) {
    EXPECT_GE(e.duration_s, 3.0);
    EXPECT_LE(e.duration_s, 7.0);
    const double rest = e.onset_s - prev_end;
    EXPECT_GE(rest, 11.0 - 1e-9);
    EXPECT_LE(rest, 13.0 + 1e-9);
    prev_end = e.onset_s + e.duration_s;
  }
  EXPECT_LE(prev_end, 450.0);
  EXPECT_NO_THROW(p.validate());
}

TEST(BuildParadigm, E3IsSharedAcrossSubjectsE4IsNot) {
  EXPECT_EQ(build_paradigm(ParadigmKind::E3, "oulu", 245, 1.8, 1), build_paradigm(ParadigmKind::E3, "oulu", 245, 1.8, 2));
  EXPECT_EQ(build_paradigm(ParadigmKind::E4, "oulu", 245, 1.8, 1), build_paradigm(ParadigmKind::E4, "oulu", 245, 1.8, 1));
  EXPECT_NE(build_paradigm(ParadigmKind::E4, "oulu", 245, 1.8, 1), build_paradigm(ParadigmKind::E4, "oulu", 245, 1.8, 2));
}

TEST(BuildParadigm, E4HoldsAcrossManySeeds) {
  for (Seed s = 0; s < 100; ++s) {
    const auto p = build_paradigm(ParadigmKind::E4, "cambridge", 119, 3.0, s);
    EXPECT_EQ(p.count(1), 11u);
    EXPECT_EQ(p.count(2), 11u);
    EXPECT_NO_THROW(p.validate());
    EXPECT_LE(p.events.back().onset_s + p.events.back().duration_s, 357.0);
  }
}

TEST(BuildParadigm, ScheduleThatCannotFitThrows) {
  try {
    build_paradigm(ParadigmKind::E3, "beijing", 100, 2.0, 0);
    FAIL() << "expected SchedulingError";
  } catch (const SchedulingError& e) {
    EXPECT_DOUBLE_EQ(e.required_s, 26 * 14.0);
    EXPECT_DOUBLE_EQ(e.available_s, 200.0);
  }
  EXPECT_THROW(build_paradigm(ParadigmKind::custom, "beijing", 100, 2.0, 0), DomainError);
  EXPECT_THROW(build_paradigm(ParadigmKind::E3, "paris", 100, 2.0, 0), DomainError);
}

TEST(ParadigmCsv, RoundTrip) {
  const auto p = build_paradigm(ParadigmKind::E4, "beijing", 225, 2.0, 9);
  auto q = paradigm_from_csv(paradigm_to_csv(p), p.total_duration_s);
  q.kind = p.kind;
  EXPECT_EQ(q, p);
  EXPECT_THROW(paradigm_from_csv("a,b,c\n", 10.0), ParseError);
  EXPECT_THROW(paradigm_from_csv("onset_s,duration_s,condition\n1;2;1\n", 10.0), ParseError);
  EXPECT_THROW(paradigm_from_csv("onset_s,duration_s,condition\n5,2,1\n4,2,1\n", 10.0), DomainError);
}

TEST(Hrf, ShapeMatchesGammaDifference) {
  for (double t : {0.5, 1.0, 4.0, 5.5, 10.0, 16.0, 25.0}) EXPECT_NEAR(hrf(t), hrf_oracle(t), 1e-14);
  EXPECT_EQ(hrf(-1.0), 0.0);
  double best_t = 0, best = -1;
  for (int k = 0; k < 300; ++k) {
    const double t = 0.1 * k;
    if (hrf(t) > best) {
      best = hrf(t);
      best_t = t;
    }
  }
  EXPECT_GE(best_t, 5.0);
  EXPECT_LE(best_t, 6.0);
}

TEST(ConvolveRegressors, SingleEventIsCentredHrf) {
  Paradigm p;
  p.events = {{0.0, 1.0, 1}};
  p.total_duration_s = 40;
  const auto X = convolve_regressors(p, 40, 1.0);
  ASSERT_EQ(X.cols(), 1);
  double mean = 0;
  for (int i = 0; i < 40; ++i) mean += hrf_oracle(i);
  mean /= 40;
  for (int i = 0; i < 40; ++i) EXPECT_NEAR(X(i, 0), hrf_oracle(i) - mean, 1e-12);
}

TEST(ConvolveRegressors, EmptyParadigmGivesZeroColumn) {
  Paradigm p;
  p.total_duration_s = 20;
  const auto X = convolve_regressors(p, 20, 1.0);
  EXPECT_EQ(X.cols(), 1);
  EXPECT_EQ(X.norm(), 0.0);
}

TEST(BuildDesign, ColumnCountsAndContrast) {
  const auto p = build_paradigm(ParadigmKind::E3, "cambridge", 119, 3.0, 0);
  const auto reg = convolve_regressors(p, 119, 3.0);
  ASSERT_EQ(reg.cols(), 2);
  for (int c = 0; c < 2; ++c) EXPECT_NEAR(reg.col(c).mean(), 0.0, 1e-12);

  const auto plain = build_design(reg, {}, 119, 3.0, 1);
  EXPECT_EQ(plain.columns(), 3);
  EXPECT_EQ(plain.names[2], "intercept");
  EXPECT_EQ(plain.contrast[0], 1.0);
  EXPECT_EQ(plain.contrast[1], -1.0);
  EXPECT_EQ(plain.contrast[2], 0.0);

  EXPECT_EQ(build_design(reg, {Nuisance::motion6}, 119, 3.0, 1).columns(), 3 + 6);
  EXPECT_EQ(build_design(reg, {Nuisance::motion24}, 119, 3.0, 1).columns(), 3 + 24);

  const std::vector<double> global(119, 0.0);
  std::vector<double> g2(119);
  for (int t = 0; t < 119; ++t) g2[static_cast<std::size_t>(t)] = std::sin(0.1 * t);
  EXPECT_EQ(build_design(reg, {Nuisance::global_mean}, 119, 3.0, 1, &g2).columns(), 4);
  EXPECT_THROW(build_design(reg, {Nuisance::global_mean}, 119, 3.0, 1), DomainError);
  // A constant global signal centres to zero and duplicates nothing useful.
  EXPECT_THROW(build_design(reg, {Nuisance::global_mean}, 119, 3.0, 1, &global), DesignError);

  // floor(2 * 357 / 100 + 1) - 1 = 7 cosines.
  EXPECT_EQ(build_design(reg, {Nuisance::drift}, 119, 3.0, 1).columns(), 3 + 7);
}

TEST(BuildDesign, OneConditionContrastIsUnit) {
  const auto p = build_paradigm(ParadigmKind::B1, "cambridge", 119, 3.0, 0);
  const auto dm = build_design(convolve_regressors(p, 119, 3.0), {}, 119, 3.0, 1);
  EXPECT_EQ(dm.contrast[0], 1.0);
  EXPECT_EQ(dm.contrast.tail(dm.columns() - 1).norm(), 0.0);
}

TEST(BuildDesign, CollinearColumnsAreNamed) {
  Eigen::MatrixXd reg(50, 2);
  for (int t = 0; t < 50; ++t) reg(t, 0) = reg(t, 1) = std::cos(0.3 * t);
  try {
    build_design(reg, {}, 50, 2.0, 1);
    FAIL() << "expected DesignError";
  } catch (const DesignError& e) {
    EXPECT_NE(std::string(e.what()).find("task2"), std::string::npos);
  }
  EXPECT_THROW(build_design(reg, {}, 49, 2.0, 1), DimensionError);
}

TEST(DctBasis, OrthogonalToConstant) {
  const auto d = dct_basis(100, 2.0, 100.0);
  EXPECT_EQ(d.cols(), 4);
  for (Eigen::Index c = 0; c < d.cols(); ++c) EXPECT_NEAR(d.col(c).sum(), 0.0, 1e-10);
  EXPECT_NEAR(d.col(0).dot(d.col(1)), 0.0, 1e-10);
}
