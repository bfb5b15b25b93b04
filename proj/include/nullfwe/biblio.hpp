#pragma once
// Bibliometric estimate of studies that used a lax cluster-defining
// threshold, with the CDT-by-software cross-tabulation.

#include <nullfwe/error.hpp>

#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace nullfwe {

inline constexpr std::array<const char*, 5> kSoftware{"AFNI", "BrainVoyager", "FSL", "SPM", "Others"};
inline constexpr std::array<const char*, 5> kCdtBins{">.01", ".01", ".005", ".001", "<.001"};

struct CdtRow {
  std::string cdt;
  std::array<long, 5> counts{};
  long total = 0;
};

struct Crosstab {
  std::vector<CdtRow> rows;
  std::array<long, 5> column_totals{};
  long grand_total = 0;

  const CdtRow& row(const std::string& cdt) const {
    for (const auto& r : rows)
      if (r.cdt == cdt) return r;
    throw ValidationError(cdt, "crosstab has no row '" + cdt + "'");
  }

  /// Checks row sums, column sums and the grand total.
  void validate() const {
    std::array<long, 5> col{};
    long grand = 0;
    for (const auto& r : rows) {
      long s = 0;
      for (std::size_t k = 0; k < 5; ++k) {
        if (r.counts[k] < 0) throw ValidationError(r.cdt, "negative count in row '" + r.cdt + "'");
        s += r.counts[k];
        col[k] += r.counts[k];
      }
      if (s != r.total) throw ValidationError(r.cdt, "row '" + r.cdt + "' sums to " + std::to_string(s) +
                                                         " but its TOTAL is " + std::to_string(r.total));
      grand += s;
    }
    for (std::size_t k = 0; k < 5; ++k)
      if (col[k] != column_totals[k])
        throw ValidationError("TOTAL", std::string("column ") + kSoftware[k] + " sums to " + std::to_string(col[k]) +
                                           " but the TOTAL row says " + std::to_string(column_totals[k]));
    if (grand != grand_total)
      throw ValidationError("TOTAL", "rows sum to " + std::to_string(grand) + " but the grand total is " +
                                         std::to_string(grand_total));
  }
};

/// CDT by software for the 480 studies with enough detail.
inline Crosstab default_crosstab() {
  Crosstab t;
  t.rows = {{">.01", {9, 5, 9, 8, 4}, 35},
            {".01", {9, 4, 44, 20, 3}, 80},
            {".005", {24, 6, 1, 48, 3}, 82},
            {".001", {13, 20, 11, 206, 5}, 255},
            {"<.001", {2, 5, 3, 16, 2}, 28}};
  t.column_totals = {57, 40, 68, 298, 17};
  t.grand_total = 480;
  return t;
}

inline std::string crosstab_csv(const Crosstab& t) {
  std::ostringstream os;
  os << "CDT";
  for (auto s : kSoftware) os << ',' << s;
  os << ",TOTAL\n";
  for (const auto& r : t.rows) {
    os << r.cdt;
    for (long c : r.counts) os << ',' << c;
    os << ',' << r.total << '\n';
  }
  os << "TOTAL";
  for (long c : t.column_totals) os << ',' << c;
  os << ',' << t.grand_total << '\n';
  return os.str();
}

inline Crosstab crosstab_from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw ParseError("header", "empty crosstab CSV");
  Crosstab t;
  bool have_total = false;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7) throw ParseError(cells.empty() ? "row" : cells[0], "crosstab rows need 7 columns");
    std::array<long, 6> v{};
    for (std::size_t k = 0; k < 6; ++k) {
      try {
        std::size_t pos = 0;
        v[k] = std::stol(cells[k + 1], &pos);
        if (pos != cells[k + 1].size()) throw std::invalid_argument(cells[k + 1]);
      } catch (const std::exception&) {
        throw ParseError(cells[0], "non-integer count '" + cells[k + 1] + "' in row '" + cells[0] + "'");
      }
    }
    if (cells[0] == "TOTAL") {
      for (std::size_t k = 0; k < 5; ++k) t.column_totals[k] = v[k];
      t.grand_total = v[5];
      have_total = true;
    } else {
      t.rows.push_back({cells[0], {v[0], v[1], v[2], v[3], v[4]}, v[5]});
    }
  }
  if (!have_total) throw ValidationError("TOTAL", "crosstab CSV has no TOTAL row");
  t.validate();
  return t;
}

inline Crosstab load_crosstab(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("crosstab", "cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return crosstab_from_csv(ss.str());
}

struct BiblioInputs {
  double n_fmri = 23000;
  /// Carried for reference; the published product does not include it.
  double p_has_data = 0.80;
  double p_corrected_given_data = 0.59;
  double p_cluster_given_data_corrected = 0.79;
  Crosstab crosstab = default_crosstab();

  void validate() const {
    if (!(n_fmri >= 0.0)) throw ValidationError("n_fmri", "n_fmri must be >= 0");
    auto frac = [](double p, const char* key) {
      if (!(p >= 0.0 && p <= 1.0)) throw ValidationError(key, std::string(key) + " must lie in [0, 1]");
    };
    frac(p_has_data, "p_has_data");
    frac(p_corrected_given_data, "p_corrected_given_data");
    frac(p_cluster_given_data_corrected, "p_cluster_given_data_corrected");
    crosstab.validate();
  }
};

struct AffectedEstimate {
  long n_cluster_corrected = 0;
  double frac_cdt_ge_01 = 0.0;
  long n_affected = 0;
};

/// Rounds half away from zero to `digits` decimals.
inline double round_to(double x, int digits) {
  const double s = std::pow(10.0, digits);
  return std::round(x * s) / s;
}

/// The fraction is rounded to two decimals before it multiplies the count,
/// as in the published arithmetic.
inline AffectedEstimate estimate_affected(const BiblioInputs& in) {
  in.validate();
  AffectedEstimate e;
  e.n_cluster_corrected =
      std::lround(in.n_fmri * in.p_corrected_given_data * in.p_cluster_given_data_corrected);
  const auto& t = in.crosstab;
  if (t.grand_total > 0)
    e.frac_cdt_ge_01 =
        round_to(static_cast<double>(t.row(">.01").total + t.row(".01").total) / static_cast<double>(t.grand_total), 2);
  e.n_affected = std::lround(static_cast<double>(e.n_cluster_corrected) * e.frac_cdt_ge_01);
  return e;
}

struct CdtDistribution {
  std::vector<std::pair<std::string, double>> bin_fraction;
  std::array<long, 5> software_totals{};
  long total = 0;
};

inline CdtDistribution cdt_distribution(const Crosstab& t) {
  t.validate();
  CdtDistribution d;
  d.total = t.grand_total;
  d.software_totals = t.column_totals;
  for (const auto& r : t.rows)
    d.bin_fraction.emplace_back(r.cdt, t.grand_total > 0 ? static_cast<double>(r.total) / t.grand_total : 0.0);
  return d;
}

struct SurveyCheck {
  double cluster_fraction = 0.0;
  double lax_cdt_fraction = 0.0;
};

/// The 2017 survey: 270 of 388 used cluster inference, 72 of those 270 a
/// CDT of 0.01 or higher. Fractions to three decimals.
inline SurveyCheck survey_check(long cluster = 270, long total = 388, long lax = 72) {
  if (total <= 0 || cluster <= 0) throw DomainError("survey counts must be positive");
  return {round_to(static_cast<double>(cluster) / total, 3), round_to(static_cast<double>(lax) / cluster, 3)};
}

}  // namespace nullfwe
