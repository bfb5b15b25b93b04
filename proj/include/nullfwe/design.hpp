#pragma once
// First-level paradigms, HRF convolution and design matrices.

#include <nullfwe/rng.hpp>
#include <nullfwe/volume.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace nullfwe {

enum class ParadigmKind { B1, B2, E1, E2, E3, E4, custom };

inline ParadigmKind paradigm_kind_from_string(const std::string& s) {
  if (s == "B1") return ParadigmKind::B1;
  if (s == "B2") return ParadigmKind::B2;
  if (s == "E1") return ParadigmKind::E1;
  if (s == "E2") return ParadigmKind::E2;
  if (s == "E3") return ParadigmKind::E3;
  if (s == "E4") return ParadigmKind::E4;
  if (s == "custom") return ParadigmKind::custom;
  throw DomainError("unknown paradigm '" + s + "'");
}

inline std::string to_string(ParadigmKind k) {
  switch (k) {
    case ParadigmKind::B1: return "B1";
    case ParadigmKind::B2: return "B2";
    case ParadigmKind::E1: return "E1";
    case ParadigmKind::E2: return "E2";
    case ParadigmKind::E3: return "E3";
    case ParadigmKind::E4: return "E4";
    case ParadigmKind::custom: return "custom";
  }
  return "custom";
}

struct Event {
  double onset_s = 0.0;
  double duration_s = 0.0;
  int condition = 1;
  friend bool operator==(const Event&, const Event&) = default;
};

struct Paradigm {
  ParadigmKind kind = ParadigmKind::custom;
  std::vector<Event> events;
  double total_duration_s = 0.0;
  int n_conditions = 1;

  std::size_t count(int condition) const {
    return static_cast<std::size_t>(
        std::count_if(events.begin(), events.end(), [&](const Event& e) { return e.condition == condition; }));
  }

  void validate() const {
    if (n_conditions < 1 || n_conditions > 2) throw DomainError("paradigm must have one or two conditions");
    double last_end = 0.0;
    for (const auto& e : events) {
      if (!(e.onset_s >= 0.0) || !(e.duration_s > 0.0)) throw DomainError("event onsets must be >= 0 and durations > 0");
      if (e.condition < 1 || e.condition > n_conditions) throw DomainError("event condition out of range");
      if (e.onset_s < last_end - 1e-9) throw DomainError("events overlap or are unsorted");
      last_end = e.onset_s + e.duration_s;
    }
  }

  friend bool operator==(const Paradigm&, const Paradigm&) = default;
};

/// Per-site two-task schedule parameters for E3/E4.
struct TwoTaskTiming {
  int events_per_task;
  double dur_lo, dur_hi;
  double rest_lo, rest_hi;
};

inline TwoTaskTiming two_task_timing(const std::string& site) {
  if (site == "beijing") return {13, 3.0, 7.0, 11.0, 13.0};
  if (site == "cambridge") return {11, 3.0, 6.0, 11.0, 13.0};
  if (site == "oulu") return {13, 3.0, 6.0, 11.0, 13.0};
  throw DomainError("unknown site '" + site + "' for paradigm timing");
}

namespace detail {

// Draws rest, event, rest, event, ... until all labels are placed; rejects
// draws that overrun the run.
inline std::vector<Event> draw_schedule(const std::vector<int>& labels, double dur_lo, double dur_hi, double rest_lo,
                                        double rest_hi, double available_s, Rng& rng) {
  const double n = static_cast<double>(labels.size());
  const double min_total = n * (dur_lo + rest_lo);
  if (min_total > available_s)
    throw SchedulingError(min_total, available_s,
                          "schedule needs at least " + std::to_string(min_total) + " s but the run lasts " +
                              std::to_string(available_s) + " s");
  std::uniform_real_distribution<double> dur(dur_lo, dur_hi), rest(rest_lo, rest_hi);
  for (int attempt = 0; attempt < 100000; ++attempt) {
    std::vector<Event> ev;
    double t = 0.0;
    for (int c : labels) {
      t += rest(rng);
      const double d = dur(rng);
      ev.push_back({t, d, c});
      t += d;
    }
    if (t <= available_s) return ev;
  }
  throw SchedulingError(min_total, available_s, "could not place the schedule inside the run");
}

}  // namespace detail

/// Builds the paradigm for one subject. E3 and the single-task event designs
/// use a fixed canonical seed (0) and are identical for every subject; E4 is
/// drawn from `seed`.
inline Paradigm build_paradigm(ParadigmKind kind, const std::string& site, int T, double tr_s, Seed seed) {
  if (T < 2 || !(tr_s > 0.0)) throw DomainError("paradigm needs T >= 2 and tr_s > 0");
  const double total = T * tr_s;
  Paradigm p;
  p.kind = kind;
  p.total_duration_s = total;
  constexpr Seed canonical = 0;

  auto blocks = [&](double on, double off) {
    for (double t = off; t + on <= total + 1e-9; t += on + off) p.events.push_back({t, on, 1});
  };

  switch (kind) {
    case ParadigmKind::B1: blocks(10.0, 10.0); break;
    case ParadigmKind::B2: blocks(30.0, 30.0); break;
    case ParadigmKind::E1:
      for (double t = 6.0; t + 2.0 <= total + 1e-9; t += 8.0) p.events.push_back({t, 2.0, 1});
      break;
    case ParadigmKind::E2: {
      Rng rng = make_rng(canonical);
      std::uniform_real_distribution<double> dur(1.0, 4.0), rest(3.0, 6.0);
      double t = rest(rng);
      for (;;) {
        const double d = dur(rng);
        if (t + d > total) break;
        p.events.push_back({t, d, 1});
        t += d + rest(rng);
      }
      break;
    }
    case ParadigmKind::E3:
    case ParadigmKind::E4: {
      const auto timing = two_task_timing(site);
      std::vector<int> labels;
      for (int i = 0; i < timing.events_per_task; ++i) {
        labels.push_back(1);
        labels.push_back(2);
      }
      Rng rng = make_rng(kind == ParadigmKind::E3 ? canonical : seed);
      if (kind == ParadigmKind::E4) std::shuffle(labels.begin(), labels.end(), rng);
      p.events = detail::draw_schedule(labels, timing.dur_lo, timing.dur_hi, timing.rest_lo, timing.rest_hi, total, rng);
      p.n_conditions = 2;
      break;
    }
    case ParadigmKind::custom: throw DomainError("custom paradigms are loaded from CSV, not built");
  }
  return p;
}

inline std::string paradigm_to_csv(const Paradigm& p) {
  std::ostringstream os;
  os.precision(17);
  os << "onset_s,duration_s,condition\n";
  for (const auto& e : p.events) os << e.onset_s << ',' << e.duration_s << ',' << e.condition << '\n';
  return os.str();
}

inline Paradigm paradigm_from_csv(const std::string& text, double total_duration_s) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line.rfind("onset_s,duration_s,condition", 0) != 0)
    throw ParseError("header", "paradigm CSV must start with 'onset_s,duration_s,condition'");
  Paradigm p;
  p.total_duration_s = total_duration_s;
  int row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    std::istringstream ls(line);
    Event e;
    char c1 = 0, c2 = 0;
    if (!(ls >> e.onset_s >> c1 >> e.duration_s >> c2 >> e.condition) || c1 != ',' || c2 != ',')
      throw ParseError("row " + std::to_string(row), "malformed paradigm CSV row " + std::to_string(row));
    p.events.push_back(e);
    p.n_conditions = std::max(p.n_conditions, e.condition);
  }
  p.validate();
  return p;
}

/// Canonical double-gamma HRF: peak shape 6, undershoot shape 16, unit
/// dispersions, undershoot ratio 1/6.
inline double hrf(double t_s) {
  if (t_s < 0.0) return 0.0;
  auto gamma_pdf = [](double t, double shape) {
    if (t == 0.0) return 0.0;
    return std::exp((shape - 1.0) * std::log(t) - t - std::lgamma(shape));
  };
  return gamma_pdf(t_s, 6.0) - gamma_pdf(t_s, 16.0) / 6.0;
}

/// Per-condition boxcar sampled at scan times, convolved with the HRF at
/// the same sampling, then mean-centred. Returns T x n_conditions.
inline Eigen::MatrixXd convolve_regressors(const Paradigm& p, int T, double tr_s) {
  const int k = std::max(1, p.n_conditions);
  Eigen::MatrixXd box = Eigen::MatrixXd::Zero(T, k);
  for (const auto& e : p.events)
    for (int j = 0; j < T; ++j) {
      const double t = j * tr_s;
      if (t >= e.onset_s && t < e.onset_s + e.duration_s) box(j, e.condition - 1) = 1.0;
    }
  std::vector<double> h(static_cast<std::size_t>(T));
  for (int j = 0; j < T; ++j) h[static_cast<std::size_t>(j)] = hrf(j * tr_s);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(T, k);
  for (int c = 0; c < k; ++c) {
    for (int i = 0; i < T; ++i) {
      double acc = 0.0;
      for (int j = 0; j <= i; ++j) acc += box(j, c) * h[static_cast<std::size_t>(i - j)];
      out(i, c) = acc;
    }
    out.col(c).array() -= out.col(c).mean();
  }
  return out;
}

enum class Nuisance { motion6, motion24, global_mean, drift };

inline Nuisance nuisance_from_string(const std::string& s) {
  if (s == "motion6") return Nuisance::motion6;
  if (s == "motion24") return Nuisance::motion24;
  if (s == "global_mean") return Nuisance::global_mean;
  if (s == "drift") return Nuisance::drift;
  throw DomainError("unknown nuisance set '" + s + "'");
}

struct DesignMatrix {
  Eigen::MatrixXd X;
  std::vector<std::string> names;
  Eigen::VectorXd contrast;

  int time_points() const { return static_cast<int>(X.rows()); }
  int columns() const { return static_cast<int>(X.cols()); }
};

/// Six smoothed random walks (translations and rotations stand-ins).
inline Eigen::MatrixXd synthetic_motion(int T, Seed seed) {
  Rng rng = make_rng(derive_seed(seed, Stream::motion));
  std::normal_distribution<double> step(0.0, 0.05);
  Eigen::MatrixXd m(T, 6);
  const double sigma = 2.0;
  const int radius = 6;
  for (int c = 0; c < 6; ++c) {
    std::vector<double> walk(static_cast<std::size_t>(T));
    double x = 0.0;
    for (int t = 0; t < T; ++t) walk[static_cast<std::size_t>(t)] = (x += step(rng));
    for (int t = 0; t < T; ++t) {
      double acc = 0.0, wsum = 0.0;
      for (int j = -radius; j <= radius; ++j) {
        const int s = t + j;
        if (s < 0 || s >= T) continue;
        const double w = std::exp(-0.5 * j * j / (sigma * sigma));
        acc += w * walk[static_cast<std::size_t>(s)];
        wsum += w;
      }
      m(t, c) = acc / wsum;
    }
  }
  return m;
}

/// Discrete cosine high-pass basis without the constant term.
inline Eigen::MatrixXd dct_basis(int T, double tr_s, double cutoff_s) {
  const int n = static_cast<int>(std::floor(2.0 * T * tr_s / cutoff_s + 1.0));
  const int cols = std::max(0, n - 1);
  Eigen::MatrixXd d(T, cols);
  for (int k = 1; k <= cols; ++k)
    for (int t = 0; t < T; ++t) d(t, k - 1) = std::cos(std::numbers::pi * k * (t + 0.5) / T);
  return d;
}

struct DesignOptions {
  double drift_cutoff_s = 100.0;
};

/// X = [task regressors | intercept | selected nuisance]. `global_signal`
/// must be supplied when `global_mean` is requested.
inline DesignMatrix build_design(const Eigen::MatrixXd& regressors, const std::set<Nuisance>& nuisance, int T,
                                 double tr_s, Seed seed, const std::vector<double>* global_signal = nullptr,
                                 const DesignOptions& opts = {}) {
  if (regressors.rows() != T) throw DimensionError("regressor rows do not match T");
  std::vector<Eigen::VectorXd> cols;
  std::vector<std::string> names;
  for (Eigen::Index c = 0; c < regressors.cols(); ++c) {
    cols.emplace_back(regressors.col(c));
    names.push_back("task" + std::to_string(c + 1));
  }
  cols.emplace_back(Eigen::VectorXd::Ones(T));
  names.emplace_back("intercept");

  if (nuisance.count(Nuisance::motion6) || nuisance.count(Nuisance::motion24)) {
    const Eigen::MatrixXd m = synthetic_motion(T, seed);
    const char* axes[6] = {"tx", "ty", "tz", "rx", "ry", "rz"};
    for (int c = 0; c < 6; ++c) {
      cols.emplace_back(m.col(c));
      names.push_back(std::string("motion_") + axes[c]);
    }
    if (nuisance.count(Nuisance::motion24)) {
      for (int c = 0; c < 6; ++c) {
        cols.emplace_back(m.col(c).array().square().matrix());
        names.push_back(std::string("motion_") + axes[c] + "_sq");
      }
      Eigen::MatrixXd diff = Eigen::MatrixXd::Zero(T, 6);
      for (int t = 1; t < T; ++t) diff.row(t) = m.row(t) - m.row(t - 1);
      for (int c = 0; c < 6; ++c) {
        cols.emplace_back(diff.col(c));
        names.push_back(std::string("motion_") + axes[c] + "_diff");
      }
      for (int c = 0; c < 6; ++c) {
        cols.emplace_back(diff.col(c).array().square().matrix());
        names.push_back(std::string("motion_") + axes[c] + "_diff_sq");
      }
    }
  }
  if (nuisance.count(Nuisance::global_mean)) {
    if (global_signal == nullptr || static_cast<int>(global_signal->size()) != T)
      throw DomainError("global_mean covariate requires the global signal time course");
    Eigen::VectorXd gcol = Eigen::Map<const Eigen::VectorXd>(global_signal->data(), T);
    gcol.array() -= gcol.mean();
    cols.push_back(gcol);
    names.emplace_back("global_mean");
  }
  if (nuisance.count(Nuisance::drift)) {
    const Eigen::MatrixXd d = dct_basis(T, tr_s, opts.drift_cutoff_s);
    for (Eigen::Index c = 0; c < d.cols(); ++c) {
      cols.emplace_back(d.col(c));
      names.push_back("drift" + std::to_string(c + 1));
    }
  }

  DesignMatrix dm;
  dm.X.resize(T, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c) dm.X.col(static_cast<Eigen::Index>(c)) = cols[c];
  dm.names = std::move(names);
  if (!dm.X.allFinite()) throw DesignError("design matrix has non-finite entries");

  // Name the columns that add nothing to the span of their predecessors.
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(dm.X);
  if (qr.rank() < dm.X.cols()) {
    std::string bad;
    Eigen::Index prev_rank = 0;
    for (Eigen::Index c = 0; c < dm.X.cols(); ++c) {
      Eigen::ColPivHouseholderQR<Eigen::MatrixXd> sub(dm.X.leftCols(c + 1));
      if (sub.rank() == prev_rank) bad += (bad.empty() ? "" : ", ") + dm.names[static_cast<std::size_t>(c)];
      prev_rank = sub.rank();
    }
    throw DesignError("design matrix is rank deficient; collinear columns: " + bad);
  }

  dm.contrast = Eigen::VectorXd::Zero(dm.X.cols());
  dm.contrast[0] = 1.0;
  if (regressors.cols() >= 2) dm.contrast[1] = -1.0;
  return dm;
}

}  // namespace nullfwe
