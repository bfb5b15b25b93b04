// Acceptance checks. Each criterion prints one PASS/FAIL line; the exit
// status is nonzero when any selected criterion fails.

#include <nullfwe/acf.hpp>
#include <nullfwe/biblio.hpp>
#include <nullfwe/harness.hpp>
#include <nullfwe/nonparam.hpp>
#include <nullfwe/smooth.hpp>
#include <nullfwe/synth.hpp>

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

using namespace nullfwe;
namespace fs = std::filesystem;

namespace {

struct Env {
  fs::path configs = NULLFWE_CONFIG_DIR;
  fs::path work;
  unsigned workers = 1;
  std::ostream* log = nullptr;

  HarnessOptions options() const {
    HarnessOptions o;
    o.workers = workers;
    o.cache_dir = work / "cache";
    o.checkpoint_dir = work / "checkpoints";
    o.log = log;
    return o;
  }
  ExperimentConfig config(const std::string& name) const {
    return config_from_json(load_config_json(configs / (name + ".json")));
  }
};

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double x, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << x;
  return os.str();
}

std::string fwe_text(const FweReport& r) {
  return "fwe=" + fmt(r.fwe) + " (" + std::to_string(r.n_significant) + "/" + std::to_string(r.n_analyses) +
         ", ci [" + fmt(r.ci95.lo) + ", " + fmt(r.ci95.hi) + "])";
}

/// Wilson interval around alpha for the number of analyses actually run.
Interval nominal_ci(const FweReport& r) {
  const auto n = static_cast<long long>(r.n_analyses);
  return wilson_ci(std::llround(r.alpha * static_cast<double>(n)), n);
}

bool nominal(const FweReport& r, std::string& detail) {
  const auto ci = nominal_ci(r);
  detail += fwe_text(r) + " nominal [" + fmt(ci.lo) + ", " + fmt(ci.hi) + "]";
  return r.n_analyses > 0 && ci.contains(r.fwe);
}

// Runs are cached per config through the checkpoint directory, so several
// criteria can share one experiment.
std::map<std::string, ExperimentRun> g_runs;

const ExperimentRun& run(const Env& env, const std::string& name) {
  auto it = g_runs.find(name);
  if (it == g_runs.end()) it = g_runs.emplace(name, run_experiment(env.config(name), env.options())).first;
  return it->second;
}

Verdict c1(const Env& env) {
  Verdict v;
  v.pass = nominal(summarize(run(env, "calib_perm_gauss6"), 0.05), v.detail);
  return v;
}

Verdict c2(const Env& env) {
  const auto a = summarize(run(env, "grft_longtail_cdt01"), 0.05);
  const auto b = summarize(run(env, "grft_longtail_cdt001"), 0.05);
  return {a.fwe > b.fwe && a.ci95.lo > 0.05, "cdt .01 " + fwe_text(a) + "; cdt .001 " + fwe_text(b)};
}

Verdict c3(const Env& env) {
  Verdict v;
  v.detail = "cdt .01 ";
  const bool a = nominal(summarize(run(env, "mcacf_gauss6_cdt01"), 0.05), v.detail);
  v.detail += "; cdt .001 ";
  const bool b = nominal(summarize(run(env, "mcacf_gauss6_cdt001"), 0.05), v.detail);
  v.pass = a && b;
  return v;
}

Verdict c4(const Env& env) {
  Verdict v;
  const auto plain = summarize(run(env, "signflip_artifact"), 0.05);
  v.detail = "plain one-sided " + fwe_text(plain) + "; cleaned two-sided ";
  const bool fixed = nominal(summarize(run(env, "signflip_artifact_cleaned_twosided"), 0.05), v.detail);
  v.pass = plain.ci95.lo > 0.05 && fixed;
  return v;
}

std::string ratio_text(const InflationReport& r) {
  std::string s = std::to_string(r.strict.n_significant) + "/" + std::to_string(r.ref.n_significant);
  if (r.ratio) s += " = " + fmt(*r.ratio);
  if (r.ratio_ci) s += " ci [" + fmt(r.ratio_ci->lo) + ", " + fmt(r.ratio_ci->hi) + "]";
  return s;
}

Verdict c5(const Env& env) {
  const auto g = inflation_ratio(run(env, "grft_longtail_cdt01"));
  const auto m1 = inflation_ratio(run(env, "mcacf_gauss6_cdt01"));
  const auto m2 = inflation_ratio(run(env, "mcacf_gauss6_cdt001"));
  const bool grft_ok = g.ratio && *g.ratio > 0.2;
  const bool mc_ok = m1.ratio_ci && m1.ratio_ci->contains(0.2) && m2.ratio_ci && m2.ratio_ci->contains(0.2);
  return {grft_ok && mc_ok, "grft " + ratio_text(g) + "; mc-acf .01 " + ratio_text(m1) + "; mc-acf .001 " + ratio_text(m2)};
}

Verdict c6(const Env& env) {
  const auto art_cfg = env.config("prevalence_artifact");
  const auto clean_cfg = env.config("prevalence_clean");
  const auto art = prevalence_map(art_cfg, art_cfg.n_analyses, env.options());
  const auto clean = prevalence_map(clean_cfg, clean_cfg.n_analyses, env.options());
  const Mask mask = experiment_mask(art_cfg);
  const Mask locus = experiment_locus(art_cfg, mask);
  const double ra = region_mean_ratio(art.counts, locus, mask);
  const double rc = region_mean_ratio(clean.counts, locus, mask);
  return {ra > 3.0 && rc >= 0.5 && rc <= 2.0, "artifact locus/off " + fmt(ra) + "; clean " + fmt(rc)};
}

Verdict c7(const Env& env) {
  const auto cfg = env.config("signflip_artifact");
  const auto ctx = prepare_experiment(cfg, env.options());
  const auto pca = pca_first_component(ctx.pool, ctx.mask);
  const double d = dice(top_fraction_mask(pca.eigenmap, ctx.mask, 0.1), ctx.locus);
  return {d > 0.3, "dice " + fmt(d) + ", explained " + fmt(pca.explained) + ", locus " +
                       std::to_string(ctx.locus.count()) + " voxels"};
}

// Enumeration oracle on a small field: every pattern evaluated directly.
Verdict c8(const Env&) {
  const GridMeta g{12, 12, 8, 3, 3, 3};
  const Mask mask(g);
  auto maps_for = [&](std::size_t n, Seed seed) {
    std::vector<Volume> maps;
    for (std::size_t i = 0; i < n; ++i) maps.push_back(sample_null_field(g, AcfModel::gaussian(6.0), seed + i));
    return maps;
  };
  auto max_cluster = [&](const Volume& t, double u) {
    return connected_components(t, mask, u, Connectivity::corners, Tail::positive).max_size();
  };
  auto pvalues_equal = [](const NonparamResult& r, const std::vector<std::size_t>& all_max) {
    // all_max[0] is the identity.
    for (const auto& c : r.table.clusters) {
      double ge = 0;
      for (std::size_t k = 1; k < all_max.size(); ++k) ge += all_max[k] >= c.size_voxels;
      if (!c.p_fwe || *c.p_fwe != (1.0 + ge) / static_cast<double>(all_max.size())) return false;
    }
    return true;
  };

  NonparamConfig cfg;
  cfg.cdt_p = 0.1;
  cfg.n_perm = 1000;
  bool ok = true;
  std::string detail;

  {
    const auto maps = maps_for(3, 100);
    const auto r = one_sample_signflip(GroupSample{maps, std::nullopt, mask}, cfg);
    std::vector<std::size_t> all;
    for (int k = 0; k < 8; ++k) {
      std::vector<Volume> flipped = maps;
      for (int i = 0; i < 3; ++i)
        if ((k >> i) & 1)
          for (auto& x : flipped[static_cast<std::size_t>(i)].values()) x = -x;
      all.push_back(max_cluster(group_ttest(flipped, mask).t, r.threshold_u));
    }
    const bool good = r.exhaustive && r.n_perm == 8 && pvalues_equal(r, all) && !r.table.clusters.empty();
    ok = ok && good;
    detail += "sign-flip n=3: 8 patterns, " + std::to_string(r.table.clusters.size()) + " clusters " +
              (good ? "match" : "MISMATCH");
  }
  {
    const auto maps = maps_for(6, 200);
    const std::vector<int> labels{0, 0, 0, 1, 1, 1};
    const auto r = two_sample_perm(GroupSample{maps, labels, mask}, cfg);
    std::vector<std::size_t> all{max_cluster(group_ttest(maps, mask, &labels).t, r.threshold_u)};
    std::vector<int> pick{0, 0, 0, 1, 1, 1};
    do {
      if (pick != labels) all.push_back(max_cluster(group_ttest(maps, mask, &pick).t, r.threshold_u));
    } while (std::next_permutation(pick.begin(), pick.end()));
    const bool good = r.exhaustive && r.n_perm == 20 && all.size() == 20 && pvalues_equal(r, all) &&
                      !r.table.clusters.empty();
    ok = ok && good;
    detail += "; 3v3: 20 relabelings, " + std::to_string(r.table.clusters.size()) + " clusters " +
              (good ? "match" : "MISMATCH");
  }
  return {ok, detail};
}

Verdict c9(const Env&) {
  const auto e = estimate_affected(BiblioInputs{});
  const auto t = default_crosstab();
  const auto s = survey_check();
  const bool ok = e.n_cluster_corrected == 10720 && e.frac_cdt_ge_01 == 0.24 && e.n_affected == 2573 &&
                  t.column_totals == std::array<long, 5>{57, 40, 68, 298, 17} && t.grand_total == 480 &&
                  t.row(".001").total == 255 && s.cluster_fraction == 0.696 && s.lax_cdt_fraction == 0.267;
  return {ok, std::to_string(e.n_cluster_corrected) + "; " + fmt(e.frac_cdt_ge_01) + "; " +
                  std::to_string(e.n_affected) + "; totals 57,40,68,298,17,480; .001 row " +
                  std::to_string(t.row(".001").total) + "; survey " + fmt(100 * s.cluster_fraction) + "%, " +
                  fmt(100 * s.lax_cdt_fraction) + "%"};
}

Verdict c10(const Env&) {
  bool ok = true;
  std::string detail;
  auto field_fwhm = [](const GridMeta& g, double fwhm, Seed seed) {
    FieldSampler fs(g, AcfModel::gaussian(fwhm));
    Dataset4D ds(g, 10, 1.0);
    Rng rng = make_rng(seed);
    for (int t = 0; t < 10; ++t) fs.sample(rng, ds.frame(t));
    const auto e = estimate_fwhm(ds, Mask(g));
    return (e.fwhm_mm[0] + e.fwhm_mm[1] + e.fwhm_mm[2]) / 3.0;
  };
  for (auto [fwhm, vox] : {std::pair{6.0, 3.0}, std::pair{8.0, 2.0}}) {
    const double f = field_fwhm(GridMeta{48, 48, 48, vox, vox, vox}, fwhm, 31);
    const double rel = std::abs(f / fwhm - 1.0);
    ok = ok && rel <= 0.10;
    detail += "fwhm " + fmt(fwhm) + " mm -> " + fmt(f) + " (" + fmt(100 * rel, 3) + "%); ";
  }

  double worst = 0;
  for (double a : {0.3, 0.5, 0.8})
    for (double b : {2.0, 4.0, 6.0})
      for (double c : {8.0, 15.0}) {
        const auto m = AcfModel::mixed(a, b, c);
        std::vector<AcfSample> s;
        for (double r = 0; r <= 45.0; r += 1.0) s.push_back({r, acf_value(m, r)});
        const auto fit = fit_mixed_acf(s);
        worst = std::max({worst, std::abs(fit.a / a - 1), std::abs(fit.b_mm / b - 1), std::abs(fit.c_mm / c - 1)});
      }
  ok = ok && worst <= 0.02;
  detail += "mixed fit worst " + fmt(100 * worst, 3) + "%; ";

  const GridMeta g{40, 40, 40, 3, 3, 3};
  Dataset4D ds(g, 10, 1.0);
  Rng rng = make_rng(5);
  std::normal_distribution<double> nd;
  for (auto& x : ds.raw()) x = nd(rng);
  const auto e = estimate_fwhm(ds, Mask(g));
  const double ratio = e.fwhm_mm[0] / 3.0;
  const double rel = std::abs(ratio / std::sqrt(2.0 * std::numbers::ln2) - 1.0);
  ok = ok && rel <= 0.05;
  detail += "white noise " + fmt(ratio) + " voxels (" + fmt(100 * rel, 3) + "% from 1.177)";
  return {ok, detail};
}

std::string last_line(const fs::path& p) {
  std::ifstream is(p);
  std::string line, last;
  while (std::getline(is, line))
    if (!line.empty()) last = line;
  return last;
}

Verdict c11(const Env& env) {
  const fs::path root = env.work / "determinism";
  fs::remove_all(root);
  std::string rows[2];
  int i = 0;
  for (const char* w : {"1", "8"}) {
    const fs::path out = root / (std::string("workers") + w);
    const std::string cmd = std::string("\"") + NULLFWE_CLI_PATH + "\" fwe --config \"" +
                            (env.configs / "determinism_small.json").string() + "\" --workers " + w + " --out \"" +
                            out.string() + "\" > \"" + (root / (std::string("stdout") + w)).string() + "\" 2>&1";
    fs::create_directories(root);
    if (std::system(cmd.c_str()) != 0) return {false, "CLI failed with --workers " + std::string(w)};
    rows[i++] = last_line(out / "results.csv");
  }
  return {!rows[0].empty() && rows[0] == rows[1], "workers 1: " + rows[0] + " | workers 8: " + rows[1]};
}

const std::vector<std::pair<std::string, std::function<Verdict(const Env&)>>>& criteria() {
  static const std::vector<std::pair<std::string, std::function<Verdict(const Env&)>>> list{
      {"calibrated two-sample permutation test", c1},
      {"GRFT inflation on long-tail ACF, CDT .01 vs .001", c2},
      {"matched Monte Carlo threshold calibration", c3},
      {"one-sample artifact failure and remediation", c4},
      {"inflation ratio at alpha .01 vs .05", c5},
      {"prevalence map localizes the artifact", c6},
      {"PCA eigenmap overlaps the artifact locus", c7},
      {"exhaustive enumeration oracle", c8},
      {"bibliometric arithmetic", c9},
      {"estimator round-trips", c10},
      {"determinism across worker counts", c11}};
  return list;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"nullfwe acceptance checks"};
  std::vector<int> which;
  Env env;
  std::string work = "acceptance-work";
  bool verbose = false;
  app.add_option("--criterion,-c", which, "criterion numbers to run (default: all)")->check(CLI::Range(1, 11));
  app.add_option("--work", work, "cache and scratch directory");
  app.add_option("--workers", env.workers, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--configs", env.configs, "config directory");
  app.add_flag("--verbose,-v", verbose, "log harness progress to stderr");
  CLI11_PARSE(app, argc, argv);
  env.work = work;
  if (verbose) env.log = &std::cerr;
  if (which.empty())
    for (int k = 1; k <= 11; ++k) which.push_back(k);

  int failed = 0;
  for (int k : which) {
    const auto& [name, fn] = criteria()[static_cast<std::size_t>(k - 1)];
    Verdict v;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      v = fn(env);
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("[%s] %2d %s: %s (%.0f s)\n", v.pass ? "PASS" : "FAIL", k, name.c_str(), v.detail.c_str(), dt);
    std::fflush(stdout);
    failed += !v.pass;
  }
  return failed == 0 ? 0 : 1;
}
