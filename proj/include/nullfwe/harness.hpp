#pragma once
// Experiment driver: subject pools, resampled group analyses, FWE
// estimation, prevalence maps, PCA diagnostics and checkpointed batches.

#include <nullfwe/cluster.hpp>
#include <nullfwe/config.hpp>
#include <nullfwe/firstlevel.hpp>
#include <nullfwe/nonparam.hpp>
#include <nullfwe/parallel.hpp>
#include <nullfwe/paramthresh.hpp>
#include <nullfwe/smooth.hpp>
#include <nullfwe/stats.hpp>
#include <nullfwe/synth.hpp>

#include <json.hpp>

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <Eigen/Dense>

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace nullfwe {

struct HarnessOptions {
  unsigned workers = 1;
  /// Where subject pools and Monte Carlo nulls are cached between runs.
  std::optional<std::filesystem::path> cache_dir;
  /// Where per-batch checkpoints are appended; enables resume.
  std::optional<std::filesystem::path> checkpoint_dir;
  std::ostream* log = nullptr;
};

inline constexpr std::size_t kCheckpointBatch = 50;

struct AnalysisOutcome {
  bool ok = false;
  /// Smallest cluster p-value; +inf when the analysis has no clusters.
  double min_p = std::numeric_limits<double>::infinity();
  std::size_t max_size = 0;
  std::string error;
};

struct ExperimentContext {
  ExperimentConfig cfg;
  SitePreset preset;
  Mask mask;
  Mask locus;
  /// Smoothed first-level contrast maps, zero outside the mask.
  std::vector<Volume> pool;
  std::optional<NullMaxDist> mc_dist;
};

namespace detail {

inline void log_line(const HarnessOptions& o, const std::string& s) {
  if (o.log) *o.log << s << '\n' << std::flush;
}

inline std::set<Nuisance> nuisance_set(const ExperimentConfig& c) {
  std::set<Nuisance> s;
  for (const auto& n : c.nuisance) s.insert(nuisance_from_string(n));
  return s;
}

inline ArtifactSpec artifact_spec(const ArtifactConfig& a, const Mask& locus) {
  ArtifactSpec s;
  s.locus = locus;
  s.amplitude = a.amplitude;
  s.band_lo_hz = a.band_lo_hz;
  s.band_hi_hz = a.band_hi_hz;
  s.shared_across_subjects = a.shared;
  s.coherence = a.coherence;
  s.task_coupling = a.task_coupling;
  s.profile_fwhm_mm = a.profile_fwhm_mm;
  return s;
}

inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
  const auto tmp = path.string() + ".tmp" + std::to_string(::getpid());
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw Error("cannot write " + tmp);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

/// Appends with one write() on an O_APPEND descriptor; `header` is written
/// first when the file is empty.
inline void append_atomic(const std::filesystem::path& path, const std::string& text, const std::string& header = {}) {
  const int fd = ::open(path.c_str(), O_WRONLY | O_APPEND | O_CREAT, 0644);
  if (fd < 0) throw Error("cannot open " + path.string() + " for append");
  struct stat st {};
  std::string buf = text;
  if (!header.empty() && ::fstat(fd, &st) == 0 && st.st_size == 0) buf = header + text;
  const auto n = ::write(fd, buf.data(), buf.size());
  ::close(fd);
  if (n != static_cast<ssize_t>(buf.size())) throw Error("short write to " + path.string());
}

inline std::string pool_file_bytes(const std::vector<Volume>& pool, const std::vector<std::uint32_t>& vox) {
  std::string out = "NFWPOOL1";
  auto put64 = [&](std::uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); };
  put64(pool.size());
  put64(vox.size());
  for (const auto& m : pool)
    for (auto v : vox) {
      const double x = m[v];
      out.append(reinterpret_cast<const char*>(&x), 8);
    }
  return out;
}

inline std::optional<std::vector<Volume>> read_pool_file(const std::filesystem::path& p, const Mask& mask,
                                                         std::size_t expect) {
  std::ifstream is(p, std::ios::binary);
  if (!is) return std::nullopt;
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const auto vox = mask.indices();
  if (bytes.size() < 24 || bytes.compare(0, 8, "NFWPOOL1") != 0) return std::nullopt;
  std::uint64_t n = 0, m = 0;
  std::memcpy(&n, bytes.data() + 8, 8);
  std::memcpy(&m, bytes.data() + 16, 8);
  if (n != expect || m != vox.size() || bytes.size() != 24 + n * m * 8) return std::nullopt;
  std::vector<Volume> pool(n, Volume(mask.meta()));
  const char* q = bytes.data() + 24;
  for (std::size_t k = 0; k < n; ++k)
    for (auto v : vox) {
      std::memcpy(&pool[k][v], q, 8);
      q += 8;
    }
  return pool;
}

}  // namespace detail

/// Locus tube for the configured artifact geometry (defaults when the
/// config has no artifact, so clean runs can be compared on the same region).
inline Mask experiment_locus(const ExperimentConfig& cfg, const Mask& mask) {
  const ArtifactConfig a = cfg.artifact.value_or(ArtifactConfig{});
  return sinus_tube_mask(mask, a.radius_vox, a.depth_vox);
}

inline Mask experiment_mask(const ExperimentConfig& cfg) {
  return ellipsoid_mask(site_preset(cfg.site).grid, cfg.mask_fill_scale);
}

/// Smoothed first-level contrast map of pool subject k.
class SubjectPipeline {
 public:
  SubjectPipeline(const ExperimentConfig& cfg, const Mask& mask, const Mask& locus)
      : cfg_(cfg),
        preset_(site_preset(cfg.site)),
        mask_(mask),
        sampler_(preset_, cfg.acf, cfg.ar1_phi, cfg.nonstat_gain),
        nuisance_(detail::nuisance_set(cfg)) {
    if (cfg.artifact) spec_ = detail::artifact_spec(*cfg.artifact, locus);
  }

  struct Output {
    Volume contrast;
    std::vector<double> artifact_timecourse;
  };

  Output run(std::size_t k) {
    const Seed s = subject_seed(cfg_.master_seed, k);
    const int T = preset_.time_points;
    Dataset4D ds = sampler_.sample(s);
    const Paradigm par =
        build_paradigm(cfg_.paradigm, preset_.name, T, preset_.tr_s, derive_seed(s, Stream::subject, 1));
    const Eigen::MatrixXd reg = convolve_regressors(par, T, preset_.tr_s);
    Output out;
    if (spec_) {
      std::span<const double> ref;
      if (reg.cols() > 0) ref = {reg.col(0).data(), static_cast<std::size_t>(T)};
      out.artifact_timecourse = apply_artifact(ds, *spec_, s, cohort_seed(cfg_.master_seed), ref).first;
    }
    if (cfg_.cleanup == Cleanup::regress_known_nuisance)
      ds = regress_out(ds, Eigen::Map<const Eigen::MatrixXd>(out.artifact_timecourse.data(), T, 1));

    std::vector<double> global;
    if (nuisance_.count(Nuisance::global_mean)) {
      const auto vox = mask_.indices();
      for (int t = 0; t < T; ++t) {
        double acc = 0.0;
        for (auto v : vox) acc += ds.at(t, v);
        global.push_back(acc / static_cast<double>(vox.size()));
      }
    }
    const DesignMatrix dm = build_design(reg, nuisance_, T, preset_.tr_s, s, global.empty() ? nullptr : &global);
    GlmOptions o;
    o.prewhiten = cfg_.prewhiten;
    o.keep_residuals = false;
    o.keep_betas = false;
    const FirstLevelResult fl = glm_fit(ds, dm, mask_, o);
    out.contrast = gaussian_smooth(fl.contrast_map, cfg_.smoothing_mm);
    for (std::size_t v = 0; v < out.contrast.size(); ++v)
      if (!mask_[v]) out.contrast[v] = 0.0;
    return out;
  }

 private:
  ExperimentConfig cfg_;
  SitePreset preset_;
  Mask mask_;
  SubjectSampler sampler_;
  std::set<Nuisance> nuisance_;
  std::optional<ArtifactSpec> spec_;
};

inline std::vector<Volume> build_pool(const ExperimentConfig& cfg, const Mask& mask, const Mask& locus,
                                      const HarnessOptions& opts = {}) {
  const unsigned workers = std::max(1u, std::min<unsigned>(opts.workers, static_cast<unsigned>(cfg.pool_size)));
  std::vector<std::unique_ptr<SubjectPipeline>> pipes(workers);
  for (auto& p : pipes) p = std::make_unique<SubjectPipeline>(cfg, mask, locus);
  std::vector<Volume> pool(cfg.pool_size);
  parallel_for(cfg.pool_size, workers, [&](unsigned w, std::size_t k) { pool[k] = pipes[w]->run(k).contrast; });
  return pool;
}

inline ExperimentContext prepare_experiment(const ExperimentConfig& cfg, const HarnessOptions& opts = {}) {
  validate(cfg);
  ExperimentContext ctx{cfg, site_preset(cfg.site), experiment_mask(cfg), Mask(), {}, {}};
  ctx.locus = experiment_locus(cfg, ctx.mask);

  std::optional<std::filesystem::path> pool_path;
  if (opts.cache_dir) {
    std::filesystem::create_directories(*opts.cache_dir);
    pool_path = *opts.cache_dir / ("pool-" + pool_digest(cfg) + ".bin");
    if (auto cached = detail::read_pool_file(*pool_path, ctx.mask, cfg.pool_size)) {
      ctx.pool = std::move(*cached);
      detail::log_line(opts, "pool: loaded " + pool_path->string());
    }
  }
  if (ctx.pool.empty()) {
    const auto t0 = std::chrono::steady_clock::now();
    ctx.pool = build_pool(cfg, ctx.mask, ctx.locus, opts);
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    detail::log_line(opts, "pool: built " + std::to_string(cfg.pool_size) + " subjects in " + std::to_string(dt) + " s");
    if (pool_path) detail::atomic_write(*pool_path, detail::pool_file_bytes(ctx.pool, ctx.mask.indices()));
  }

  if (cfg.method == Method::mc_acf) {
    McOptions mo;
    mo.connectivity = connectivity_from_int(cfg.connectivity);
    mo.tail = cfg.sidedness == Sidedness::two ? Tail::both : Tail::positive;
    mo.smoothing_mm = cfg.smoothing_mm;
    mo.workers = opts.workers;
    const Seed seed = derive_seed(cfg.master_seed, Stream::monte_carlo);
    std::optional<std::filesystem::path> null_path;
    if (opts.cache_dir) {
      nlohmann::json key = {{"acf", detail::acf_to_json(cfg.acf)}, {"cdt_p", cfg.cdt_p},
                            {"sims", cfg.mc_sims},                {"smoothing_mm", cfg.smoothing_mm},
                            {"site", cfg.site},                   {"fill", cfg.mask_fill_scale},
                            {"conn", cfg.connectivity},           {"two", cfg.sidedness == Sidedness::two},
                            {"seed", seed}};
      null_path = *opts.cache_dir / ("mcnull-" + digest_of(key) + ".csv");
      if (std::filesystem::exists(*null_path)) ctx.mc_dist = read_null_dist(*null_path);
    }
    if (!ctx.mc_dist) {
      ctx.mc_dist = mc_null_distribution(cfg.acf, ctx.mask, cfg.cdt_p, cfg.mc_sims, seed, mo);
      if (null_path) {
        const auto tmp = null_path->string() + ".tmp" + std::to_string(::getpid());
        write_null_dist(*ctx.mc_dist, tmp);
        std::filesystem::rename(tmp, *null_path);
      }
    }
  }
  return ctx;
}

/// Subjects of analysis i: a without-replacement draw from the pool. For
/// two-sample tests the first half forms group 0.
inline std::vector<std::size_t> analysis_subjects(const ExperimentConfig& cfg, std::size_t i) {
  Rng rng = make_rng(derive_seed(cfg.master_seed, Stream::analysis, i));
  std::vector<std::size_t> idx(cfg.pool_size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const std::size_t need = cfg.subjects_per_analysis();
  for (std::size_t j = 0; j < need; ++j) {
    std::uniform_int_distribution<std::size_t> pick(j, idx.size() - 1);
    std::swap(idx[j], idx[pick(rng)]);
  }
  idx.resize(need);
  return idx;
}

struct GroupAnalysis {
  ClusterTable table;
  AnalysisOutcome outcome;
};

/// Runs analysis i: draws the group(s) and applies the configured method.
/// Every cluster in the returned table carries its FWE p-value.
inline GroupAnalysis run_group_analysis(const ExperimentContext& ctx, std::size_t i) {
  const ExperimentConfig& cfg = ctx.cfg;
  const auto subjects = analysis_subjects(cfg, i);
  GroupSample gs{{}, std::nullopt, ctx.mask};
  for (auto k : subjects) gs.maps.push_back(ctx.pool[k]);
  std::vector<int> labels;
  if (cfg.test == TestKind::two_sample) {
    labels.assign(subjects.size(), 1);
    std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(cfg.group_size), 0);
    gs.group_labels = labels;
  }
  const Connectivity conn = connectivity_from_int(cfg.connectivity);
  const bool two = cfg.sidedness == Sidedness::two;
  const Seed aseed = derive_seed(cfg.master_seed, Stream::analysis, i);

  GroupAnalysis ga;
  switch (cfg.method) {
    case Method::perm:
    case Method::signflip: {
      NonparamConfig nc;
      nc.cdt_p = cfg.cdt_p;
      nc.n_perm = cfg.n_perm;
      nc.sidedness = cfg.sidedness;
      nc.variant = cfg.variant;
      nc.connectivity = conn;
      nc.seed = derive_seed(aseed, Stream::permutation);
      auto r = cfg.method == Method::perm ? two_sample_perm(gs, nc) : one_sample_signflip(gs, nc);
      ga.table = std::move(r.table);
      break;
    }
    case Method::grft:
    case Method::mc_acf: {
      const auto gt = group_ttest(gs.maps, gs.mask, labels.empty() ? nullptr : &labels);
      const double tail_p = two ? cfg.cdt_p / 2.0 : cfg.cdt_p;
      // Thresholding t at its own quantile is the same as Gaussianizing
      // first and thresholding z at the normal quantile.
      const double u = t_upper_quantile(tail_p, gt.dof);
      ga.table = connected_components(gt.t, gs.mask, u, conn, two ? Tail::both : Tail::positive, cfg.cdt_p);
      if (cfg.method == Method::grft) {
        if (!ga.table.clusters.empty()) {
          GrftContext g;
          g.smoothness = estimate_fwhm(group_residuals(gs.maps, labels.empty() ? nullptr : &labels), gs.mask);
          g.mask_voxels = gs.mask.count();
          g.cdt_p = tail_p;
          g.dof = gt.dof;
          for (auto& c : ga.table.clusters)
            c.p_fwe = std::min(1.0, (two ? 2.0 : 1.0) * grft_cluster_pvalue(static_cast<double>(c.size_voxels), g));
        }
      } else {
        for (auto& c : ga.table.clusters)
          c.p_fwe = fwe_pvalue_from_dist(*ctx.mc_dist, static_cast<double>(c.size_voxels));
      }
      break;
    }
  }
  ga.outcome.ok = true;
  ga.outcome.max_size = ga.table.max_size();
  for (const auto& c : ga.table.clusters)
    if (c.p_fwe) ga.outcome.min_p = std::min(ga.outcome.min_p, *c.p_fwe);
  return ga;
}

/// Cluster-size threshold of an mc-acf experiment at `alpha`.
inline std::size_t mc_threshold_at(const ExperimentContext& ctx, double alpha) {
  if (alpha >= 1.0) return 1;
  return threshold_from_dist(*ctx.mc_dist, alpha);
}

inline bool cluster_significant(const ExperimentContext& ctx, std::size_t size, std::optional<double> p,
                                double alpha) {
  if (size == 0) return false;
  if (ctx.cfg.method == Method::mc_acf) return size >= mc_threshold_at(ctx, alpha);
  return p && *p <= alpha;
}

inline bool analysis_significant(const ExperimentContext& ctx, const AnalysisOutcome& o, double alpha) {
  if (!o.ok || o.max_size == 0) return false;
  if (ctx.cfg.method == Method::mc_acf) return o.max_size >= mc_threshold_at(ctx, alpha);
  return o.min_p <= alpha;
}

struct ExperimentRun {
  ExperimentContext ctx;
  std::vector<AnalysisOutcome> outcomes;
  double wall_time_s = 0.0;
};

namespace detail {

inline nlohmann::json outcome_to_json(std::size_t i, const AnalysisOutcome& o) {
  return {i, o.ok, std::isfinite(o.min_p) ? nlohmann::json(o.min_p) : nlohmann::json(nullptr), o.max_size};
}

inline std::map<std::size_t, std::vector<std::pair<std::size_t, AnalysisOutcome>>> read_checkpoint(
    const std::filesystem::path& p) {
  std::map<std::size_t, std::vector<std::pair<std::size_t, AnalysisOutcome>>> done;
  std::ifstream is(p);
  std::string line;
  while (std::getline(is, line)) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      continue;  // torn line from an interrupted run
    }
    if (!j.contains("batch")) continue;
    std::vector<std::pair<std::size_t, AnalysisOutcome>> rows;
    for (const auto& r : j["outcomes"]) {
      AnalysisOutcome o;
      o.ok = r[1].get<bool>();
      o.min_p = r[2].is_null() ? std::numeric_limits<double>::infinity() : r[2].get<double>();
      o.max_size = r[3].get<std::size_t>();
      rows.emplace_back(r[0].get<std::size_t>(), o);
    }
    done[j["batch"].get<std::size_t>()] = std::move(rows);
  }
  return done;
}

}  // namespace detail

/// Runs analyses [0, n_analyses) in checkpointed batches of 50.
inline ExperimentRun run_experiment(const ExperimentConfig& cfg, const HarnessOptions& opts = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentRun run{prepare_experiment(cfg, opts), {}, 0.0};
  const std::size_t n = cfg.n_analyses;
  run.outcomes.assign(n, {});

  std::optional<std::filesystem::path> ckpt;
  std::map<std::size_t, std::vector<std::pair<std::size_t, AnalysisOutcome>>> done;
  if (opts.checkpoint_dir) {
    std::filesystem::create_directories(*opts.checkpoint_dir);
    ckpt = *opts.checkpoint_dir / ("checkpoint-" + config_digest(cfg) + ".jsonl");
    done = detail::read_checkpoint(*ckpt);
  }

  const std::size_t n_batches = (n + kCheckpointBatch - 1) / kCheckpointBatch;
  for (std::size_t b = 0; b < n_batches; ++b) {
    const std::size_t lo = b * kCheckpointBatch, hi = std::min(n, lo + kCheckpointBatch);
    if (auto it = done.find(b); it != done.end() && it->second.size() == hi - lo) {
      for (const auto& [i, o] : it->second)
        if (i < n) run.outcomes[i] = o;
      continue;
    }
    parallel_for(hi - lo, opts.workers, [&](unsigned, std::size_t k) {
      const std::size_t i = lo + k;
      try {
        run.outcomes[i] = run_group_analysis(run.ctx, i).outcome;
      } catch (const std::exception& e) {
        run.outcomes[i].ok = false;
        run.outcomes[i].error = e.what();
      }
    });
    for (std::size_t i = lo; i < hi; ++i)
      if (!run.outcomes[i].ok) detail::log_line(opts, "analysis " + std::to_string(i) + " excluded: " + run.outcomes[i].error);
    if (ckpt) {
      nlohmann::json rows = nlohmann::json::array();
      for (std::size_t i = lo; i < hi; ++i) rows.push_back(detail::outcome_to_json(i, run.outcomes[i]));
      detail::append_atomic(*ckpt, nlohmann::json{{"batch", b}, {"outcomes", rows}}.dump() + "\n");
    }
  }
  run.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return run;
}

struct FweReport {
  std::string config_digest;
  std::size_t n_analyses = 0;
  std::size_t n_significant = 0;
  double fwe = 0.0;
  Interval ci95;
  double wall_time_s = 0.0;
  std::size_t excluded = 0;
  double alpha = 0.05;
};

inline FweReport summarize(const ExperimentRun& run, double alpha) {
  FweReport r;
  r.config_digest = config_digest(run.ctx.cfg);
  r.alpha = alpha;
  r.wall_time_s = run.wall_time_s;
  for (const auto& o : run.outcomes) {
    if (!o.ok) {
      ++r.excluded;
      continue;
    }
    ++r.n_analyses;
    if (analysis_significant(run.ctx, o, alpha)) ++r.n_significant;
  }
  if (r.n_analyses > 0) {
    r.fwe = static_cast<double>(r.n_significant) / static_cast<double>(r.n_analyses);
    r.ci95 = wilson_ci(static_cast<long long>(r.n_significant), static_cast<long long>(r.n_analyses));
  }
  return r;
}

inline FweReport run_fwe_experiment(const ExperimentConfig& cfg, const HarnessOptions& opts = {}) {
  return summarize(run_experiment(cfg, opts), cfg.alpha);
}

struct InflationReport {
  double alpha_ref = 0.05;
  double alpha_strict = 0.01;
  FweReport ref;
  FweReport strict;
  /// fwe(strict) / fwe(ref); empty when fwe(ref) = 0.
  std::optional<double> ratio;
  /// Wilson interval of n_sig(strict) out of n_sig(ref). Significance at the
  /// stricter alpha implies significance at the looser one, so this is a
  /// binomial proportion.
  std::optional<Interval> ratio_ci;
  double nominal = 0.2;
};

inline InflationReport inflation_ratio(const ExperimentRun& run, double alpha_ref = 0.05, double alpha_strict = 0.01) {
  InflationReport r;
  r.alpha_ref = alpha_ref;
  r.alpha_strict = alpha_strict;
  r.nominal = alpha_strict / alpha_ref;
  r.ref = summarize(run, alpha_ref);
  r.strict = summarize(run, alpha_strict);
  if (r.ref.n_significant > 0) {
    r.ratio = r.strict.fwe / r.ref.fwe;
    if (r.strict.n_significant <= r.ref.n_significant)
      r.ratio_ci = wilson_ci(static_cast<long long>(r.strict.n_significant), static_cast<long long>(r.ref.n_significant));
  }
  return r;
}

inline InflationReport inflation_ratio_experiment(const ExperimentConfig& cfg, double alpha_ref = 0.05,
                                                  double alpha_strict = 0.01, const HarnessOptions& opts = {}) {
  return inflation_ratio(run_experiment(cfg, opts), alpha_ref, alpha_strict);
}

struct PrevalenceMap {
  Volume counts;
  std::size_t n_analyses = 0;
  std::size_t excluded = 0;
};

/// Voxelwise count of membership in FWE-significant clusters. Both tails
/// are always clustered.
inline PrevalenceMap prevalence_map(const ExperimentConfig& cfg_in, std::size_t n_analyses,
                                    const HarnessOptions& opts = {}) {
  ExperimentConfig cfg = cfg_in;
  cfg.sidedness = Sidedness::two;
  cfg.n_analyses = n_analyses;
  const ExperimentContext ctx = prepare_experiment(cfg, opts);
  PrevalenceMap pm{Volume(ctx.mask.meta()), 0, 0};
  const unsigned workers = std::max(1u, opts.workers);
  std::vector<std::vector<std::uint32_t>> counts(workers, std::vector<std::uint32_t>(ctx.mask.size(), 0));
  std::vector<char> ok(n_analyses, 0);
  parallel_for(n_analyses, workers, [&](unsigned w, std::size_t i) {
    try {
      const auto ga = run_group_analysis(ctx, i);
      for (const auto& c : ga.table.clusters)
        if (cluster_significant(ctx, c.size_voxels, c.p_fwe, cfg.alpha))
          for (auto v : c.voxels) ++counts[w][v];
      ok[i] = 1;
    } catch (const std::exception& e) {
      detail::log_line(opts, "analysis " + std::to_string(i) + " excluded: " + e.what());
    }
  });
  for (const auto& c : counts)
    for (std::size_t v = 0; v < c.size(); ++v) pm.counts[v] += c[v];
  for (char o : ok) (o ? pm.n_analyses : pm.excluded) += 1;
  return pm;
}

/// Mean of `v` over `region` divided by its mean over mask \ region; NaN
/// when the off-region mean is zero.
inline double region_mean_ratio(const Volume& v, const Mask& region, const Mask& mask) {
  double on = 0, off = 0;
  std::size_t n_on = 0, n_off = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!mask[i]) continue;
    if (region[i]) {
      on += v[i];
      ++n_on;
    } else {
      off += v[i];
      ++n_off;
    }
  }
  if (n_on == 0 || n_off == 0) throw PreconditionError("region and its complement must both be nonempty");
  const double m_off = off / static_cast<double>(n_off);
  if (m_off == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return (on / static_cast<double>(n_on)) / m_off;
}

struct PcaResult {
  Volume eigenmap;
  double explained = 0.0;
};

/// First principal component of the subject-by-voxel matrix after
/// removing each voxel's mean, via the n x n Gram matrix.
inline PcaResult pca_first_component(std::span<const Volume> maps, const Mask& mask) {
  if (maps.size() < 2) throw DomainError("PCA needs at least 2 maps");
  for (const auto& m : maps) require_same_grid(m.meta(), mask.meta(), "PCA maps and mask");
  mask.require_nonempty();
  const auto vox = mask.indices();
  const auto n = static_cast<Eigen::Index>(maps.size());
  const auto M = static_cast<Eigen::Index>(vox.size());
  Eigen::MatrixXd X(n, M);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < M; ++j) X(i, j) = maps[static_cast<std::size_t>(i)][vox[static_cast<std::size_t>(j)]];
  X.rowwise() -= X.colwise().mean();
  const Eigen::MatrixXd G = X * X.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
  const double trace = G.trace();
  PcaResult r{Volume(mask.meta()), 0.0};
  if (!(trace > 0.0)) throw DomainError("PCA of constant maps is undefined");
  const double lam = es.eigenvalues()[n - 1];
  Eigen::VectorXd comp = X.transpose() * es.eigenvectors().col(n - 1);
  comp /= comp.norm();
  Eigen::Index arg = 0;
  comp.cwiseAbs().maxCoeff(&arg);
  if (comp[arg] < 0) comp = -comp;
  for (Eigen::Index j = 0; j < M; ++j) r.eigenmap[vox[static_cast<std::size_t>(j)]] = comp[j];
  r.explained = lam / trace;
  return r;
}

/// In-mask voxels whose |value| is in the top `fraction`.
inline Mask top_fraction_mask(const Volume& v, const Mask& mask, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw DomainError("fraction must lie in (0, 1]");
  auto vox = mask.indices();
  const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(vox.size())));
  std::stable_sort(vox.begin(), vox.end(), [&](std::uint32_t a, std::uint32_t b) { return std::abs(v[a]) > std::abs(v[b]); });
  Mask out(mask.meta(), false);
  for (std::size_t k = 0; k < keep && k < vox.size(); ++k) out.set(vox[k], true);
  return out;
}

inline double dice(const Mask& a, const Mask& b) {
  require_same_grid(a.meta(), b.meta(), "dice operands");
  std::size_t both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) both += (a[i] && b[i]);
  const std::size_t tot = a.count() + b.count();
  return tot == 0 ? 1.0 : 2.0 * static_cast<double>(both) / static_cast<double>(tot);
}

// ---- results CSV ----

inline const char* results_csv_header() {
  return "site,design,smoothing_mm,test,method,variant,sidedness,cdt_p,alpha,cleanup,n_analyses,n_sig,fwe,ci_lo,"
         "ci_hi,master_seed,excluded";
}

inline std::string format_number(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

inline std::string results_csv_row(const ExperimentConfig& cfg, const FweReport& r) {
  std::ostringstream os;
  os << cfg.site << ',' << to_string(cfg.paradigm) << ',' << format_number(cfg.smoothing_mm) << ','
     << to_string(cfg.test) << ',' << to_string(cfg.method) << ',' << to_string(cfg.variant) << ','
     << to_string(cfg.sidedness) << ',' << format_number(cfg.cdt_p) << ',' << format_number(r.alpha) << ','
     << to_string(cfg.cleanup) << ',' << r.n_analyses << ',' << r.n_significant << ',' << format_number(r.fwe) << ','
     << format_number(r.ci95.lo) << ',' << format_number(r.ci95.hi) << ',' << cfg.master_seed << ',' << r.excluded;
  return os.str();
}

inline void append_results_row(const std::filesystem::path& path, const ExperimentConfig& cfg, const FweReport& r) {
  detail::append_atomic(path, results_csv_row(cfg, r) + "\n", std::string(results_csv_header()) + "\n");
}

}  // namespace nullfwe
