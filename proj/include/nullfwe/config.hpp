#pragma once
// Experiment configuration: JSON schema with unknown-key rejection,
// dotted overrides and a stable digest.

#include <nullfwe/acf.hpp>
#include <nullfwe/design.hpp>
#include <nullfwe/error.hpp>
#include <nullfwe/nonparam.hpp>
#include <nullfwe/rng.hpp>
#include <nullfwe/synth.hpp>

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace nullfwe {

enum class TestKind { one_sample, two_sample };
enum class Method { grft, mc_acf, perm, signflip };
enum class Cleanup { none, regress_known_nuisance };

inline std::string to_string(TestKind t) { return t == TestKind::one_sample ? "one-sample" : "two-sample"; }
inline std::string to_string(Method m) {
  switch (m) {
    case Method::grft: return "grft";
    case Method::mc_acf: return "mc-acf";
    case Method::perm: return "perm";
    case Method::signflip: return "signflip";
  }
  return "grft";
}
inline std::string to_string(Cleanup c) { return c == Cleanup::none ? "none" : "regress-known-nuisance"; }

/// Geometry and dynamics of the injected artifact. The locus is a tube
/// below the top of the brain mask.
struct ArtifactConfig {
  double radius_vox = 5.0;
  double depth_vox = 6.0;
  double amplitude = 1.0;
  double band_lo_hz = 0.01;
  double band_hi_hz = 0.1;
  bool shared = true;
  double coherence = 0.5;
  double task_coupling = 0.0;
  double profile_fwhm_mm = 6.0;
  friend bool operator==(const ArtifactConfig&, const ArtifactConfig&) = default;
};

struct ExperimentConfig {
  std::string site = "beijing";
  AcfModel acf = AcfModel::gaussian(6.0);
  double ar1_phi = 0.4;
  double nonstat_gain = 0.0;
  std::optional<ArtifactConfig> artifact;
  ParadigmKind paradigm = ParadigmKind::E3;
  double smoothing_mm = 6.0;
  TestKind test = TestKind::two_sample;
  std::size_t group_size = 20;
  Method method = Method::perm;
  Variant variant = Variant::plain;
  Sidedness sidedness = Sidedness::one;
  double cdt_p = 0.001;
  double alpha = 0.05;
  std::size_t n_analyses = 1000;
  Cleanup cleanup = Cleanup::none;
  Seed master_seed = 0;
  std::size_t pool_size = 100;
  std::size_t n_perm = 1000;
  std::size_t mc_sims = 10000;
  int connectivity = 26;
  bool prewhiten = true;
  std::vector<std::string> nuisance;
  double mask_fill_scale = 1.05;

  /// Subjects drawn per analysis.
  std::size_t subjects_per_analysis() const {
    return test == TestKind::two_sample ? 2 * group_size : group_size;
  }
};

namespace detail {

[[noreturn]] inline void invalid(const std::string& key, const std::string& what) {
  throw ValidationError(key, key + ": " + what);
}

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& prefix) {
  if (!j.is_object()) invalid(prefix.empty() ? "<root>" : prefix, "expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) invalid(prefix + it.key(), "unknown key");
}

template <class T>
T get_as(const nlohmann::json& j, const std::string& key) {
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception&) {
    invalid(key, "wrong type");
  }
}

inline AcfModel acf_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"kind", "fwhm_mm", "a", "b_mm", "c_mm"}, "acf.");
  const std::string kind = j.contains("kind") ? get_as<std::string>(j["kind"], "acf.kind") : "gaussian";
  try {
    if (kind == "gaussian") {
      if (!j.contains("fwhm_mm")) invalid("acf.fwhm_mm", "required for a Gaussian ACF");
      return AcfModel::gaussian(get_as<double>(j["fwhm_mm"], "acf.fwhm_mm"));
    }
    if (kind == "mixed") {
      for (const char* k : {"a", "b_mm", "c_mm"})
        if (!j.contains(k)) invalid(std::string("acf.") + k, "required for a mixed ACF");
      return AcfModel::mixed(get_as<double>(j["a"], "acf.a"), get_as<double>(j["b_mm"], "acf.b_mm"),
                             get_as<double>(j["c_mm"], "acf.c_mm"));
    }
  } catch (const DomainError& e) {
    invalid("acf", e.what());
  }
  invalid("acf.kind", "must be 'gaussian' or 'mixed'");
}

inline nlohmann::json acf_to_json(const AcfModel& m) {
  if (m.kind == AcfModel::Kind::gaussian) return {{"kind", "gaussian"}, {"fwhm_mm", m.fwhm_mm}};
  return {{"kind", "mixed"}, {"a", m.a}, {"b_mm", m.b_mm}, {"c_mm", m.c_mm}};
}

inline ArtifactConfig artifact_from_json(const nlohmann::json& j) {
  reject_unknown(j,
                 {"radius_vox", "depth_vox", "amplitude", "band_lo_hz", "band_hi_hz", "shared", "coherence",
                  "task_coupling", "profile_fwhm_mm"},
                 "artifact.");
  ArtifactConfig a;
  auto num = [&](const char* k, double& out) {
    if (j.contains(k)) out = get_as<double>(j[k], std::string("artifact.") + k);
  };
  num("radius_vox", a.radius_vox);
  num("depth_vox", a.depth_vox);
  num("amplitude", a.amplitude);
  num("band_lo_hz", a.band_lo_hz);
  num("band_hi_hz", a.band_hi_hz);
  num("coherence", a.coherence);
  num("task_coupling", a.task_coupling);
  num("profile_fwhm_mm", a.profile_fwhm_mm);
  if (j.contains("shared")) a.shared = get_as<bool>(j["shared"], "artifact.shared");
  return a;
}

inline nlohmann::json artifact_to_json(const ArtifactConfig& a) {
  return {{"radius_vox", a.radius_vox}, {"depth_vox", a.depth_vox},   {"amplitude", a.amplitude},
          {"band_lo_hz", a.band_lo_hz}, {"band_hi_hz", a.band_hi_hz}, {"shared", a.shared},
          {"coherence", a.coherence},   {"task_coupling", a.task_coupling},
          {"profile_fwhm_mm", a.profile_fwhm_mm}};
}

}  // namespace detail

inline const std::set<std::string>& config_keys() {
  static const std::set<std::string> keys{
      "site",     "acf",        "ar1_phi",     "nonstat_gain", "artifact",  "paradigm",   "smoothing_mm",
      "test",     "group_size", "method",      "variant",      "sidedness", "cdt_p",      "alpha",
      "n_analyses", "cleanup",  "master_seed", "pool_size",    "n_perm",    "mc_sims",    "connectivity",
      "prewhiten", "nuisance",  "mask_fill_scale"};
  return keys;
}

inline void validate(const ExperimentConfig& c) {
  using detail::invalid;
  try {
    site_preset(c.site);
  } catch (const DomainError&) {
    invalid("site", "must be one of beijing, cambridge, oulu");
  }
  if (!(c.ar1_phi >= 0.0 && c.ar1_phi < 1.0)) invalid("ar1_phi", "must lie in [0, 1)");
  if (!(c.nonstat_gain >= 0.0)) invalid("nonstat_gain", "must be >= 0");
  if (c.paradigm == ParadigmKind::custom) invalid("paradigm", "custom paradigms are not supported in experiments");
  if (!(c.smoothing_mm == 4.0 || c.smoothing_mm == 6.0 || c.smoothing_mm == 8.0 || c.smoothing_mm == 10.0))
    invalid("smoothing_mm", "must be one of 4, 6, 8, 10");
  if (c.group_size < 2) invalid("group_size", "must be >= 2");
  if (!(c.cdt_p == 0.01 || c.cdt_p == 0.001)) invalid("cdt_p", "must be 0.01 or 0.001");
  if (!(c.alpha > 0.0 && c.alpha <= 1.0)) invalid("alpha", "must lie in (0, 1]");
  if (c.pool_size < c.subjects_per_analysis())
    invalid("pool_size", "smaller than the number of subjects each analysis draws");
  if (c.n_perm < 100) invalid("n_perm", "must be >= 100");
  if (c.method == Method::mc_acf && c.mc_sims < 1000) invalid("mc_sims", "must be >= 1000");
  if (c.connectivity != 6 && c.connectivity != 18 && c.connectivity != 26)
    invalid("connectivity", "must be 6, 18 or 26");
  if (!(c.mask_fill_scale > 0.2 && c.mask_fill_scale <= 1.5)) invalid("mask_fill_scale", "must lie in (0.2, 1.5]");
  if (c.method == Method::perm && c.test != TestKind::two_sample)
    invalid("method", "perm is the two-sample test; use signflip for one-sample");
  if (c.method == Method::signflip && c.test != TestKind::one_sample)
    invalid("method", "signflip is the one-sample test; use perm for two-sample");
  if (c.variant != Variant::plain && c.method != Method::signflip)
    invalid("variant", "remediation variants apply to signflip only");
  if (c.cleanup == Cleanup::regress_known_nuisance && !c.artifact)
    invalid("cleanup", "regress-known-nuisance needs an artifact to regress out");
  for (const auto& n : c.nuisance) {
    try {
      nuisance_from_string(n);
    } catch (const DomainError&) {
      invalid("nuisance", "unknown nuisance set '" + n + "'");
    }
  }
  if (c.artifact) {
    const auto& a = *c.artifact;
    if (!(a.radius_vox > 0.0)) invalid("artifact.radius_vox", "must be > 0");
    if (!(a.depth_vox >= 0.0)) invalid("artifact.depth_vox", "must be >= 0");
    if (!(a.amplitude >= 0.0)) invalid("artifact.amplitude", "must be >= 0");
    if (!(a.coherence >= 0.0 && a.coherence <= 1.0)) invalid("artifact.coherence", "must lie in [0, 1]");
    if (!(a.task_coupling >= 0.0 && a.task_coupling <= 1.0)) invalid("artifact.task_coupling", "must lie in [0, 1]");
    if (!(a.profile_fwhm_mm >= 0.0)) invalid("artifact.profile_fwhm_mm", "must be >= 0");
    const double nyq = 0.5 / site_preset(c.site).tr_s;
    if (!(a.band_lo_hz >= 0.0 && a.band_lo_hz < a.band_hi_hz && a.band_hi_hz <= nyq + 1e-12))
      invalid("artifact.band_hi_hz", "band must satisfy 0 <= lo < hi <= Nyquist");
  }
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::get_as;
  using detail::invalid;
  detail::reject_unknown(j, config_keys(), "");
  ExperimentConfig c;
  auto str = [&](const char* k) { return get_as<std::string>(j[k], k); };
  auto wrap = [&](const char* k, auto&& fn) {
    if (!j.contains(k)) return;
    try {
      fn();
    } catch (const DomainError& e) {
      invalid(k, e.what());
    }
  };
  if (j.contains("site")) c.site = str("site");
  if (j.contains("acf")) c.acf = detail::acf_from_json(j["acf"]);
  if (j.contains("ar1_phi")) c.ar1_phi = get_as<double>(j["ar1_phi"], "ar1_phi");
  if (j.contains("nonstat_gain")) c.nonstat_gain = get_as<double>(j["nonstat_gain"], "nonstat_gain");
  if (j.contains("artifact") && !j["artifact"].is_null()) c.artifact = detail::artifact_from_json(j["artifact"]);
  wrap("paradigm", [&] { c.paradigm = paradigm_kind_from_string(str("paradigm")); });
  if (j.contains("smoothing_mm")) c.smoothing_mm = get_as<double>(j["smoothing_mm"], "smoothing_mm");
  if (j.contains("test")) {
    const auto t = str("test");
    if (t == "one-sample") c.test = TestKind::one_sample;
    else if (t == "two-sample") c.test = TestKind::two_sample;
    else invalid("test", "must be 'one-sample' or 'two-sample'");
  }
  if (j.contains("group_size")) c.group_size = get_as<std::size_t>(j["group_size"], "group_size");
  if (j.contains("method")) {
    const auto m = str("method");
    if (m == "grft") c.method = Method::grft;
    else if (m == "mc-acf") c.method = Method::mc_acf;
    else if (m == "perm") c.method = Method::perm;
    else if (m == "signflip") c.method = Method::signflip;
    else invalid("method", "must be grft, mc-acf, perm or signflip");
  }
  wrap("variant", [&] { c.variant = variant_from_string(str("variant")); });
  wrap("sidedness", [&] { c.sidedness = sidedness_from_string(str("sidedness")); });
  if (j.contains("cdt_p")) c.cdt_p = get_as<double>(j["cdt_p"], "cdt_p");
  if (j.contains("alpha")) c.alpha = get_as<double>(j["alpha"], "alpha");
  if (j.contains("n_analyses")) c.n_analyses = get_as<std::size_t>(j["n_analyses"], "n_analyses");
  if (j.contains("cleanup")) {
    const auto s = str("cleanup");
    if (s == "none") c.cleanup = Cleanup::none;
    else if (s == "regress-known-nuisance") c.cleanup = Cleanup::regress_known_nuisance;
    else invalid("cleanup", "must be 'none' or 'regress-known-nuisance'");
  }
  if (j.contains("master_seed")) c.master_seed = get_as<Seed>(j["master_seed"], "master_seed");
  if (j.contains("pool_size")) c.pool_size = get_as<std::size_t>(j["pool_size"], "pool_size");
  if (j.contains("n_perm")) c.n_perm = get_as<std::size_t>(j["n_perm"], "n_perm");
  if (j.contains("mc_sims")) c.mc_sims = get_as<std::size_t>(j["mc_sims"], "mc_sims");
  if (j.contains("connectivity")) c.connectivity = get_as<int>(j["connectivity"], "connectivity");
  if (j.contains("prewhiten")) c.prewhiten = get_as<bool>(j["prewhiten"], "prewhiten");
  if (j.contains("nuisance")) c.nuisance = get_as<std::vector<std::string>>(j["nuisance"], "nuisance");
  if (j.contains("mask_fill_scale")) c.mask_fill_scale = get_as<double>(j["mask_fill_scale"], "mask_fill_scale");
  validate(c);
  return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j = {{"site", c.site},
                      {"acf", detail::acf_to_json(c.acf)},
                      {"ar1_phi", c.ar1_phi},
                      {"nonstat_gain", c.nonstat_gain},
                      {"artifact", c.artifact ? detail::artifact_to_json(*c.artifact) : nlohmann::json(nullptr)},
                      {"paradigm", to_string(c.paradigm)},
                      {"smoothing_mm", c.smoothing_mm},
                      {"test", to_string(c.test)},
                      {"group_size", c.group_size},
                      {"method", to_string(c.method)},
                      {"variant", to_string(c.variant)},
                      {"sidedness", to_string(c.sidedness)},
                      {"cdt_p", c.cdt_p},
                      {"alpha", c.alpha},
                      {"n_analyses", c.n_analyses},
                      {"cleanup", to_string(c.cleanup)},
                      {"master_seed", c.master_seed},
                      {"pool_size", c.pool_size},
                      {"n_perm", c.n_perm},
                      {"mc_sims", c.mc_sims},
                      {"connectivity", c.connectivity},
                      {"prewhiten", c.prewhiten},
                      {"nuisance", c.nuisance},
                      {"mask_fill_scale", c.mask_fill_scale}};
  return j;
}

/// Applies "a.b.c=value". The value is parsed as JSON when possible and
/// taken as a string otherwise.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ValidationError(assignment, "override must look like key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  nlohmann::json* node = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ValidationError(path, "empty key segment in override '" + path + "'");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    if (!node->contains(key) || !(*node)[key].is_object()) (*node)[key] = nlohmann::json::object();
    node = &(*node)[key];
    start = dot + 1;
  }
}

inline nlohmann::json load_config_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("config", "cannot open config file " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config", std::string("config is not valid JSON: ") + e.what());
  }
}

/// FNV-1a over canonical JSON, as 16 hex digits.
inline std::string digest_of(const nlohmann::json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string config_digest(const ExperimentConfig& c) { return digest_of(config_to_json(c)); }

/// Digest of the fields that determine the subject pool.
inline std::string pool_digest(const ExperimentConfig& c) {
  const auto j = config_to_json(c);
  nlohmann::json k;
  for (const char* key : {"site", "acf", "ar1_phi", "nonstat_gain", "artifact", "paradigm", "smoothing_mm",
                          "cleanup", "master_seed", "pool_size", "prewhiten", "nuisance", "mask_fill_scale"})
    k[key] = j[key];
  k["format"] = 1;
  return digest_of(k);
}

}  // namespace nullfwe
