// nullfwe: command-line front end for the null-data FWE harness.
//
// Exit codes: 0 success, 1 usage error, 2 invalid config or missing input,
// 3 failure while running.

#include <nullfwe/biblio.hpp>
#include <nullfwe/config.hpp>
#include <nullfwe/harness.hpp>
#include <nullfwe/volume_io.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace nullfwe;

namespace {

constexpr int kUsage = 1;
constexpr int kInvalid = 2;
constexpr int kFailed = 3;

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  unsigned workers = default_workers();
  bool dry_run = false;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

void add_common(CLI::App* sub, Common& c, bool with_config = true) {
  if (with_config) {
    sub->add_option("--config", c.config, "experiment config (JSON)");
    sub->add_option("--set", c.sets, "override KEY=VALUE, dotted keys, last wins")->take_all();
    sub->add_option("--seed", c.seed, "master seed")->each([&c](const std::string&) { c.seed_given = true; });
  }
  sub->add_option("--out", c.out, "output directory (default $NULLFWE_OUT or ./nullfwe-out)");
  sub->add_option("--workers", c.workers, "worker threads")->check(CLI::PositiveNumber);
  sub->add_flag("--dry-run", c.dry_run, "validate inputs and exit without writing");
}

fs::path out_dir(const Common& c) {
  if (!c.out.empty()) return c.out;
  if (const char* env = std::getenv("NULLFWE_OUT"); env && *env) return env;
  return "nullfwe-out";
}

ExperimentConfig resolve_config(const Common& c) {
  nlohmann::json j = nlohmann::json::object();
  if (!c.config.empty()) j = load_config_json(c.config);
  for (const auto& s : c.sets) apply_override(j, s);
  ExperimentConfig cfg = config_from_json(j);
  if (c.seed_given) cfg.master_seed = c.seed;
  validate(cfg);
  return cfg;
}

HarnessOptions harness_options(const Common& c) {
  HarnessOptions o;
  o.workers = c.workers;
  o.cache_dir = out_dir(c) / "cache";
  o.checkpoint_dir = out_dir(c) / "checkpoints";
  o.log = &std::cerr;
  return o;
}

Volume mask_volume(const Mask& m) {
  Volume v(m.meta());
  for (std::size_t i = 0; i < m.size(); ++i) v[i] = m[i] ? 1.0 : 0.0;
  return v;
}

void print_plan(const ExperimentConfig& cfg, const char* cmd) {
  std::cout << "dry run: " << cmd << " config " << config_digest(cfg) << "\n" << config_to_json(cfg).dump(2) << "\n";
}

int cmd_synth(const Common& c, std::size_t first, std::size_t count) {
  const ExperimentConfig cfg = resolve_config(c);
  if (first + count > cfg.pool_size)
    throw ValidationError("pool_size", "pool_size: subjects " + std::to_string(first) + ".." +
                                           std::to_string(first + count - 1) + " exceed the pool");
  if (c.dry_run) {
    print_plan(cfg, "synth");
    return 0;
  }
  const Mask mask = experiment_mask(cfg);
  const Mask locus = experiment_locus(cfg, mask);
  const fs::path dir = out_dir(c) / ("synth-" + pool_digest(cfg));
  fs::create_directories(dir);
  write_volume(mask_volume(mask), dir / "mask");
  if (cfg.artifact) write_volume(mask_volume(locus), dir / "locus");
  std::vector<std::unique_ptr<SubjectPipeline>> pipes(std::max(1u, c.workers));
  for (auto& p : pipes) p = std::make_unique<SubjectPipeline>(cfg, mask, locus);
  parallel_for(count, c.workers, [&](unsigned w, std::size_t k) {
    char name[32];
    std::snprintf(name, sizeof name, "subject-%04zu", first + k);
    write_volume(pipes[w]->run(first + k).contrast, dir / name);
  });
  std::cout << dir.string() << "\n";
  return 0;
}

int cmd_analyze(const Common& c, std::size_t index) {
  const ExperimentConfig cfg = resolve_config(c);
  if (c.dry_run) {
    print_plan(cfg, "analyze");
    return 0;
  }
  const ExperimentContext ctx = prepare_experiment(cfg, harness_options(c));
  const GroupAnalysis ga = run_group_analysis(ctx, index);
  const fs::path path = out_dir(c) / ("clusters-" + config_digest(cfg) + "-" + std::to_string(index) + ".csv");
  write_cluster_table(ga.table, ctx.mask.meta(), path);
  std::cout << "analysis " << index << ": " << ga.table.clusters.size() << " clusters, max size "
            << ga.outcome.max_size << ", min p "
            << (std::isfinite(ga.outcome.min_p) ? format_number(ga.outcome.min_p) : std::string("none"))
            << ", significant " << (analysis_significant(ctx, ga.outcome, cfg.alpha) ? "yes" : "no") << "\n"
            << path.string() << "\n";
  return 0;
}

int cmd_fwe(const Common& c) {
  const ExperimentConfig cfg = resolve_config(c);
  if (c.dry_run) {
    print_plan(cfg, "fwe");
    return 0;
  }
  const FweReport r = run_fwe_experiment(cfg, harness_options(c));
  const fs::path csv = out_dir(c) / "results.csv";
  append_results_row(csv, cfg, r);
  std::cout << results_csv_header() << "\n" << results_csv_row(cfg, r) << "\n";
  std::cerr << "wall time " << format_number(r.wall_time_s) << " s, appended to " << csv.string() << "\n";
  return 0;
}

int cmd_prevalence(const Common& c, std::size_t n) {
  const ExperimentConfig cfg = resolve_config(c);
  if (n == 0) n = cfg.n_analyses;
  if (c.dry_run) {
    print_plan(cfg, "prevalence");
    return 0;
  }
  const PrevalenceMap pm = prevalence_map(cfg, n, harness_options(c));
  const fs::path path = out_dir(c) / ("prevalence-" + config_digest(cfg));
  write_volume(pm.counts, path);
  const Mask mask = experiment_mask(cfg);
  const double ratio = region_mean_ratio(pm.counts, experiment_locus(cfg, mask), mask);
  std::cout << "analyses " << pm.n_analyses << ", excluded " << pm.excluded << ", locus/off-locus mean ratio "
            << format_number(ratio) << "\n"
            << path.string() << ".vhdr\n";
  return 0;
}

int cmd_pca(const Common& c, double top) {
  const ExperimentConfig cfg = resolve_config(c);
  if (c.dry_run) {
    print_plan(cfg, "pca");
    return 0;
  }
  const ExperimentContext ctx = prepare_experiment(cfg, harness_options(c));
  const PcaResult pr = pca_first_component(ctx.pool, ctx.mask);
  const fs::path path = out_dir(c) / ("pca-" + pool_digest(cfg));
  write_volume(pr.eigenmap, path);
  std::cout << "explained variance " << format_number(pr.explained) << ", dice(top " << format_number(top)
            << ", locus) " << format_number(dice(top_fraction_mask(pr.eigenmap, ctx.mask, top), ctx.locus)) << "\n"
            << path.string() << ".vhdr\n";
  return 0;
}

int cmd_biblio(bool defaults, const std::string& crosstab, bool table) {
  if (!defaults && crosstab.empty()) {
    std::cerr << "nullfwe biblio: pass --defaults or --crosstab PATH\n";
    return kUsage;
  }
  BiblioInputs in;
  if (!crosstab.empty()) {
    if (!fs::exists(crosstab)) throw ValidationError("crosstab", "crosstab: no such file " + crosstab);
    in.crosstab = load_crosstab(crosstab);
  }
  const AffectedEstimate e = estimate_affected(in);
  const SurveyCheck s = survey_check();
  std::printf("cluster_corrected_studies %ld\n", e.n_cluster_corrected);
  std::printf("fraction_cdt_ge_0.01 %.2f\n", e.frac_cdt_ge_01);
  std::printf("affected_studies %ld\n", e.n_affected);
  std::printf("survey_cluster_fraction %.3f\n", s.cluster_fraction);
  std::printf("survey_lax_cdt_fraction %.3f\n", s.lax_cdt_fraction);
  if (table) std::cout << crosstab_csv(in.crosstab);
  return 0;
}

/// Concatenates results CSVs under one header, dropping repeated rows.
int cmd_report(const Common& c, const std::vector<std::string>& inputs) {
  std::vector<std::string> rows;
  std::set<std::string> seen;
  for (const auto& in : inputs) {
    std::ifstream is(in);
    if (!is) throw ValidationError("input", "input: cannot open " + in);
    std::string line;
    if (!std::getline(is, line) || line != results_csv_header())
      throw ValidationError("input", "input: " + in + " does not start with the results CSV header");
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      if (seen.insert(line).second) rows.push_back(line);
    }
  }
  if (c.dry_run) {
    std::cout << "dry run: " << rows.size() << " rows from " << inputs.size() << " files\n";
    return 0;
  }
  std::ostringstream os;
  os << results_csv_header() << "\n";
  for (const auto& r : rows) os << r << "\n";
  fs::create_directories(out_dir(c));
  const fs::path path = out_dir(c) / "figure_input.csv";
  detail::atomic_write(path, os.str());
  std::cout << path.string() << " (" << rows.size() << " rows)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Null-data familywise error harness for cluster inference"};
  app.require_subcommand(1);
  Common common;

  auto* synth = app.add_subcommand("synth", "write smoothed first-level contrast maps of pool subjects");
  add_common(synth, common);
  std::size_t synth_first = 0, synth_count = 1;
  synth->add_option("--first", synth_first, "first subject index");
  synth->add_option("--count", synth_count, "number of subjects")->check(CLI::PositiveNumber);

  auto* analyze = app.add_subcommand("analyze", "run one group analysis and write its cluster table");
  add_common(analyze, common);
  std::size_t index = 0;
  analyze->add_option("--index", index, "analysis index");

  auto* fwe = app.add_subcommand("fwe", "estimate the familywise error rate of a configuration");
  add_common(fwe, common);

  auto* prev = app.add_subcommand("prevalence", "count voxel membership in significant clusters");
  add_common(prev, common);
  std::size_t prev_n = 0;
  prev->add_option("--analyses", prev_n, "number of analyses (default: n_analyses from the config)");

  auto* pca = app.add_subcommand("pca", "first principal component of the subject pool");
  add_common(pca, common);
  double top = 0.1;
  pca->add_option("--top", top, "fraction of voxels compared with the artifact locus")->check(CLI::Range(0.0, 1.0));

  auto* biblio = app.add_subcommand("biblio", "estimate the number of affected studies");
  bool biblio_defaults = false, biblio_table = false;
  std::string crosstab;
  biblio->add_flag("--defaults", biblio_defaults, "use the embedded survey numbers");
  biblio->add_option("--crosstab", crosstab, "CDT-by-software CSV");
  biblio->add_flag("--table", biblio_table, "also print the cross-tabulation");

  auto* report = app.add_subcommand("report", "merge results CSVs into one figure-input file");
  add_common(report, common, false);
  std::vector<std::string> inputs;
  report->add_option("inputs", inputs, "results CSV files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kUsage;
  }

  try {
    if (*synth) return cmd_synth(common, synth_first, synth_count);
    if (*analyze) return cmd_analyze(common, index);
    if (*fwe) return cmd_fwe(common);
    if (*prev) return cmd_prevalence(common, prev_n);
    if (*pca) return cmd_pca(common, top);
    if (*biblio) return cmd_biblio(biblio_defaults, crosstab, biblio_table);
    if (*report) return cmd_report(common, inputs);
  } catch (const ValidationError& e) {
    std::cerr << "nullfwe: invalid config: " << e.what() << "\n";
    return kInvalid;
  } catch (const ParseError& e) {
    std::cerr << "nullfwe: cannot parse " << e.field << ": " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "nullfwe: " << e.what() << "\n";
    return kFailed;
  }
  return kUsage;
}
