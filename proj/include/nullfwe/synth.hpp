#pragma once
// Synthetic null data: stationary Gaussian fields with a prescribed spatial
// ACF, multi-subject 4D cohorts with AR(1) temporal noise, optional
// non-stationary smoothness and shared physiological-style artifacts.

#include <nullfwe/acf.hpp>
#include <nullfwe/fft.hpp>
#include <nullfwe/rng.hpp>
#include <nullfwe/smooth.hpp>

#include <cmath>
#include <complex>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace nullfwe {

struct SitePreset {
  std::string name;
  GridMeta grid;
  int time_points = 2;
  double tr_s = 2.0;
  std::vector<double> smoothing_mm{4, 6, 8, 10};

  void validate() const {
    grid.validate();
    if (time_points < 2) throw DomainError("site preset needs at least 2 time points");
    if (!(tr_s > 0.0)) throw DomainError("site preset needs tr_s > 0");
  }
};

/// Desk-scale presets on a 48x56x48 grid with each site's voxel geometry.
inline SitePreset site_preset(const std::string& site) {
  auto make = [](std::string name, double dx, double dy, double dz, int T, double tr) {
    return SitePreset{std::move(name), GridMeta{48, 56, 48, dx, dy, dz}, T, tr, {4, 6, 8, 10}};
  };
  if (site == "beijing" || site == "beijing-like") return make("beijing", 3.13, 3.13, 3.6, 225, 2.0);
  if (site == "cambridge" || site == "cambridge-like") return make("cambridge", 3.0, 3.0, 3.0, 119, 3.0);
  if (site == "oulu" || site == "oulu-like") return make("oulu", 4.0, 4.0, 4.4, 245, 1.8);
  throw DomainError("unknown site preset '" + site + "'");
}

/// Draws unit-variance stationary Gaussian fields on a periodic grid whose
/// correlation is `acf`, optionally followed by Gaussian smoothing of
/// `extra_fwhm_mm` (folded into the spectrum, so the output stays exactly
/// unit variance). Holds FFT buffers: one instance per thread.
class FieldSampler {
 public:
  FieldSampler(const GridMeta& grid, const AcfModel& acf, double extra_fwhm_mm = 0.0) : fft_(grid) {
    grid.validate();
    acf.validate();
    if (!(extra_fwhm_mm >= 0.0)) throw DomainError("extra smoothing must be >= 0");
    const double half_extent = 0.5 * std::min({grid.nx * grid.dx, grid.ny * grid.dy, grid.nz * grid.dz});
    if (acf_value(acf, half_extent) > 0.01)
      throw DomainError("ACF support exceeds half the grid extent; enlarge the grid");

    // Covariance at periodic lags.
    auto real = fft_.real();
    for (int z = 0; z < grid.nz; ++z)
      for (int y = 0; y < grid.ny; ++y)
        for (int x = 0; x < grid.nx; ++x) {
          const double px = std::min(x, grid.nx - x) * grid.dx, py = std::min(y, grid.ny - y) * grid.dy,
                       pz = std::min(z, grid.nz - z) * grid.dz;
          real[grid.index(x, y, z)] = acf_value(acf, std::sqrt(px * px + py * py + pz * pz));
        }
    fft_.forward();

    const auto tx = smoothing_transfer(grid.nx, grid.dx, extra_fwhm_mm);
    const auto ty = smoothing_transfer(grid.ny, grid.dy, extra_fwhm_mm);
    const auto tz = smoothing_transfer(grid.nz, grid.dz, extra_fwhm_mm);
    auto spec = fft_.spectrum();
    const std::size_t hx = fft_.half_nx();
    amp_.resize(spec.size());
    for (int z = 0; z < grid.nz; ++z)
      for (int y = 0; y < grid.ny; ++y)
        for (std::size_t x = 0; x < hx; ++x) {
          const std::size_t k = x + hx * (static_cast<std::size_t>(y) + static_cast<std::size_t>(grid.ny) * z);
          const double t = tx[x] * ty[static_cast<std::size_t>(y)] * tz[static_cast<std::size_t>(z)];
          amp_[k] = std::max(spec[k].real(), 0.0) * t * t;  // effective power spectrum
        }

    // Field variance = inverse DFT of the power spectrum at lag 0.
    for (std::size_t k = 0; k < spec.size(); ++k) spec[k] = amp_[k];
    fft_.inverse();
    const double n = static_cast<double>(grid.size());
    const double var = fft_.real()[0] / n;
    if (!(var > 0.0)) throw DomainError("ACF yields a degenerate spectrum on this grid");
    for (auto& a : amp_) a = std::sqrt(a) / (n * std::sqrt(var));
  }

  const GridMeta& grid() const noexcept { return fft_.grid(); }

  void sample(Rng& rng, std::span<double> out) {
    std::normal_distribution<double> normal;
    auto real = fft_.real();
    for (auto& v : real) v = normal(rng);
    fft_.forward();
    auto spec = fft_.spectrum();
    for (std::size_t k = 0; k < spec.size(); ++k) spec[k] *= amp_[k];
    fft_.inverse();
    std::copy(real.begin(), real.end(), out.begin());
  }

  Volume sample(Rng& rng) {
    Volume v(grid());
    sample(rng, v.data());
    return v;
  }

 private:
  // DFT of the periodically wrapped, unit-sum smoothing kernel along one axis.
  static std::vector<double> smoothing_transfer(int n, double d, double fwhm) {
    std::vector<double> t(static_cast<std::size_t>(n), 1.0);
    if (fwhm <= 0.0) return t;
    const auto k = gaussian_kernel_1d(fwhm_to_sigma(fwhm) / d);
    const int radius = static_cast<int>(k.size() / 2);
    for (int q = 0; q < n; ++q) {
      double acc = 0.0;
      for (int j = -radius; j <= radius; ++j)
        acc += k[static_cast<std::size_t>(j + radius)] * std::cos(2.0 * std::numbers::pi * q * j / n);
      t[static_cast<std::size_t>(q)] = acc;
    }
    return t;
  }

  RealFft3 fft_;
  std::vector<double> amp_;
};

inline Volume sample_null_field(const GridMeta& grid, const AcfModel& acf, Seed seed) {
  FieldSampler sampler(grid, acf);
  Rng rng = make_rng(seed);
  return sampler.sample(rng);
}

/// Generates subject time series for one (grid, ACF) combination; reuse the
/// instance across subjects to amortise spectrum set-up.
class SubjectSampler {
 public:
  SubjectSampler(const SitePreset& preset, const AcfModel& acf, double ar1_phi, double nonstat_gain)
      : preset_(preset), phi_(ar1_phi), gain_(nonstat_gain), narrow_(preset.grid, acf) {
    preset.validate();
    if (!(ar1_phi >= 0.0 && ar1_phi < 1.0)) throw DomainError("ar1_phi must lie in [0, 1)");
    if (!(nonstat_gain >= 0.0)) throw DomainError("nonstat_gain must be >= 0");
    if (gain_ > 0.0) {
      wide_.emplace(preset.grid, acf.scaled(2.0));
      const GridMeta& g = preset.grid;
      const double extent = std::min({g.nx * g.dx, g.ny * g.dy, g.nz * g.dz});
      weights_.emplace(g, AcfModel::gaussian(0.15 * extent));
    }
  }

  Dataset4D sample(Seed seed) {
    const GridMeta& g = preset_.grid;
    Rng rng = make_rng(seed);
    Dataset4D ds(g, preset_.time_points, preset_.tr_s);
    const std::size_t n = g.size();

    // Blend weights w(x) in [0, 1]: field = sqrt(w) narrow + sqrt(1-w) wide.
    std::vector<double> wn, ww;
    if (gain_ > 0.0) {
      std::vector<double> u(n);
      weights_->sample(rng, u);
      wn.resize(n);
      ww.resize(n);
      for (std::size_t v = 0; v < n; ++v) {
        const double w = std::clamp(0.5 + 0.5 * gain_ * u[v], 0.0, 1.0);
        wn[v] = std::sqrt(w);
        ww[v] = std::sqrt(1.0 - w);
      }
    }

    std::vector<double> eps(n), wide(gain_ > 0.0 ? n : 0);
    const double innov = std::sqrt(1.0 - phi_ * phi_);
    for (int t = 0; t < preset_.time_points; ++t) {
      narrow_.sample(rng, eps);
      if (gain_ > 0.0) {
        wide_->sample(rng, wide);
        for (std::size_t v = 0; v < n; ++v) eps[v] = wn[v] * eps[v] + ww[v] * wide[v];
      }
      auto cur = ds.frame(t);
      if (t == 0) {
        std::copy(eps.begin(), eps.end(), cur.begin());
      } else {
        auto prev = ds.frame(t - 1);
        for (std::size_t v = 0; v < n; ++v) cur[v] = phi_ * prev[v] + innov * eps[v];
      }
    }
    return ds;
  }

 private:
  SitePreset preset_;
  double phi_;
  double gain_;
  FieldSampler narrow_;
  std::optional<FieldSampler> wide_;
  std::optional<FieldSampler> weights_;
};

inline Dataset4D sample_subject(const SitePreset& preset, const AcfModel& acf, double ar1_phi, double nonstat_gain,
                                Seed seed) {
  SubjectSampler s(preset, acf, ar1_phi, nonstat_gain);
  return s.sample(seed);
}

struct ArtifactSpec {
  Mask locus;
  double amplitude = 1.0;  // in units of the noise standard deviation
  double band_lo_hz = 0.01;
  double band_hi_hz = 0.1;
  bool shared_across_subjects = true;
  /// Fraction of time-course variance locked across the cohort when shared.
  double coherence = 0.5;
  /// Fraction of the cohort-locked variance that follows a reference time
  /// course (task-evoked physiology). Needs a reference at injection.
  double task_coupling = 0.0;
  double profile_fwhm_mm = 6.0;

  void validate(double tr_s) const {
    if (!(amplitude >= 0.0)) throw DomainError("artifact amplitude must be >= 0");
    if (!(band_lo_hz >= 0.0 && band_lo_hz < band_hi_hz && band_hi_hz <= 1.0 / (2.0 * tr_s) + 1e-12))
      throw DomainError("artifact band must satisfy 0 <= lo < hi <= Nyquist");
    if (!(coherence >= 0.0 && coherence <= 1.0)) throw DomainError("artifact coherence must lie in [0, 1]");
    if (!(task_coupling >= 0.0 && task_coupling <= 1.0)) throw DomainError("artifact task coupling must lie in [0, 1]");
    if (!(profile_fwhm_mm >= 0.0)) throw DomainError("artifact profile smoothing must be >= 0");
  }
};

/// Unit-variance zero-mean time course with energy only in [lo, hi] Hz.
inline std::vector<double> band_limited_series(int T, double tr_s, double lo_hz, double hi_hz, Rng& rng) {
  const double df = 1.0 / (T * tr_s);
  std::vector<int> bins;
  for (int k = 1; k <= T / 2; ++k)
    if (k * df >= lo_hz && k * df <= hi_hz) bins.push_back(k);
  if (bins.empty()) throw DomainError("artifact band contains no frequency bin for this run length");
  std::normal_distribution<double> normal;
  std::vector<double> x(static_cast<std::size_t>(T), 0.0);
  // Random-phase synthesis on the admitted bins.
  for (int k : bins) {
    const double a = normal(rng), b = normal(rng);
    for (int t = 0; t < T; ++t) {
      const double w = 2.0 * std::numbers::pi * k * t / T;
      x[static_cast<std::size_t>(t)] += a * std::cos(w) + b * std::sin(w);
    }
  }
  double mean = 0.0, ss = 0.0;
  for (double v : x) mean += v;
  mean /= T;
  for (double& v : x) {
    v -= mean;
    ss += v * v;
  }
  const double sd = std::sqrt(ss / T);
  for (double& v : x) v /= sd;
  return x;
}

/// Peak-normalised smooth spatial profile on the locus, keyed by `seed`.
inline Volume artifact_profile(const ArtifactSpec& spec, Seed seed) {
  const GridMeta& g = spec.locus.meta();
  Rng rng = make_rng(derive_seed(seed, Stream::artifact, 1));
  std::normal_distribution<double> normal;
  Volume mod(g);
  for (auto& v : mod.values()) v = normal(rng);
  mod = gaussian_smooth(mod, 2.0 * spec.profile_fwhm_mm);
  double ss = 0.0;
  std::size_t cnt = 0;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (spec.locus[i]) {
      ss += mod[i] * mod[i];
      ++cnt;
    }
  const double sd = cnt > 0 && ss > 0 ? std::sqrt(ss / cnt) : 1.0;
  Volume ind(g);
  for (std::size_t i = 0; i < g.size(); ++i)
    ind[i] = spec.locus[i] ? std::max(0.0, 1.0 + 0.3 * mod[i] / sd) : 0.0;
  Volume s = gaussian_smooth(ind, spec.profile_fwhm_mm);
  double peak = 0.0;
  for (double v : s.values()) peak = std::max(peak, v);
  if (peak > 0.0)
    for (auto& v : s.values()) v /= peak;
  return s;
}

struct ArtifactInjection {
  Dataset4D data;
  std::vector<double> timecourse;
  Volume profile;
};

namespace detail {
inline void standardize(std::vector<double>& x) {
  double mean = 0.0, ss = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  for (double& v : x) {
    v -= mean;
    ss += v * v;
  }
  const double sd = std::sqrt(ss / static_cast<double>(x.size()));
  if (sd > 0.0)
    for (double& v : x) v /= sd;
}
}  // namespace detail

/// Adds amplitude * s(x) * g(t) to `ds` in place and returns g and s.
inline std::pair<std::vector<double>, Volume> apply_artifact(Dataset4D& ds, const ArtifactSpec& spec,
                                                             Seed subject_seed, Seed cohort_seed,
                                                             std::span<const double> reference = {}) {
  require_same_grid(ds.meta(), spec.locus.meta(), "artifact locus and dataset");
  spec.validate(ds.tr_s());
  const int T = ds.time_points();
  const bool shared = spec.shared_across_subjects;
  Volume profile = artifact_profile(spec, shared ? cohort_seed : subject_seed);

  Rng subj_rng = make_rng(derive_seed(subject_seed, Stream::artifact, 2));
  auto g = band_limited_series(T, ds.tr_s(), spec.band_lo_hz, spec.band_hi_hz, subj_rng);
  if (shared && spec.coherence > 0.0) {
    Rng coh_rng = make_rng(derive_seed(cohort_seed, Stream::artifact, 2));
    auto gc = band_limited_series(T, ds.tr_s(), spec.band_lo_hz, spec.band_hi_hz, coh_rng);
    if (spec.task_coupling > 0.0) {
      if (reference.size() != static_cast<std::size_t>(T))
        throw PreconditionError("task-coupled artifact needs a reference of length T");
      std::vector<double> ref(reference.begin(), reference.end());
      detail::standardize(ref);
      const double wr = std::sqrt(spec.task_coupling), wn = std::sqrt(1.0 - spec.task_coupling);
      for (int t = 0; t < T; ++t) {
        const auto i = static_cast<std::size_t>(t);
        gc[i] = wr * ref[i] + wn * gc[i];
      }
      detail::standardize(gc);
    }
    const double wc = std::sqrt(spec.coherence), ws = std::sqrt(1.0 - spec.coherence);
    for (int t = 0; t < T; ++t)
      g[static_cast<std::size_t>(t)] = wc * gc[static_cast<std::size_t>(t)] + ws * g[static_cast<std::size_t>(t)];
    detail::standardize(g);
  }

  if (spec.amplitude > 0.0) {
    std::vector<std::size_t> support;
    for (std::size_t i = 0; i < profile.size(); ++i)
      if (profile[i] != 0.0) support.push_back(i);
    for (int t = 0; t < T; ++t) {
      auto f = ds.frame(t);
      const double gt = spec.amplitude * g[static_cast<std::size_t>(t)];
      for (auto i : support) f[i] += gt * profile[i];
    }
  }
  return {std::move(g), std::move(profile)};
}

inline ArtifactInjection inject_artifact(const Dataset4D& ds, const ArtifactSpec& spec, Seed subject_seed,
                                         Seed cohort_seed, std::span<const double> reference = {}) {
  ArtifactInjection out{ds, {}, {}};
  auto [g, s] = apply_artifact(out.data, spec, subject_seed, cohort_seed, reference);
  out.timecourse = std::move(g);
  out.profile = std::move(s);
  return out;
}

inline Seed subject_seed(Seed master, std::size_t k) { return derive_seed(master, Stream::subject, k); }
inline Seed cohort_seed(Seed master) { return derive_seed(master, Stream::cohort); }

inline std::vector<Dataset4D> make_cohort(std::size_t n, const SitePreset& preset, const AcfModel& acf,
                                          double ar1_phi, double nonstat_gain,
                                          const std::optional<ArtifactSpec>& artifact, Seed master_seed) {
  if (n < 1) throw PreconditionError("cohort needs at least one subject");
  SubjectSampler sampler(preset, acf, ar1_phi, nonstat_gain);
  std::vector<Dataset4D> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    Dataset4D ds = sampler.sample(subject_seed(master_seed, k));
    if (artifact) apply_artifact(ds, *artifact, subject_seed(master_seed, k), cohort_seed(master_seed));
    out.push_back(std::move(ds));
  }
  return out;
}

}  // namespace nullfwe
