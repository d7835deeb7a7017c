#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "casecohort/simulation.hpp"
#include "casecohort/version.hpp"

namespace casecohort {

// Exit-code contract used by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInputError = 1;
inline constexpr int kExitNumericalError = 2;

inline std::string fnv1a_digest_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataFormatError("cannot open '" + path + "' for digesting");
  std::uint64_t h = 14695981039346656037ull;
  char buf[65536];
  while (in.read(buf, sizeof buf), in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  char out[32];
  std::snprintf(out, sizeof out, "fnv1a:%016llx",
                static_cast<unsigned long long>(h));
  return out;
}

/**
 * Provenance block embedded in every output artifact. Wall time and the
 * requested thread count are recorded only in the side manifest file:
 * embedded manifests must be byte-identical across reruns and worker
 * counts.
 */
struct RunManifest {
  std::string command;
  std::string version = kVersion;
  std::uint64_t seed = 0;
  std::string input_digest;
  nlohmann::json config;
  double wall_seconds = 0.0;  // volatile
  int threads_requested = 0;  // volatile
};

inline nlohmann::json manifest_json(const RunManifest& m, bool include_volatile) {
  nlohmann::json j;
  j["command"] = m.command;
  j["version"] = m.version;
  j["seed"] = m.seed;
  j["input_digest"] = m.input_digest;
  j["config"] = m.config;
  if (include_volatile) {
    j["wall_seconds"] = m.wall_seconds;
    j["threads_requested"] = m.threads_requested;
  }
  return j;
}

inline nlohmann::json scenario_json(const Scenario& sc) {
  nlohmann::json j;
  j["n"] = sc.cohort_size;
  j["covariate_setup"] =
      sc.setup == CovariateSetup::kExpensiveOnly ? "x_only" : "x_and_z";
  j["beta"] = sc.beta;
  j["gamma"] = sc.gamma;
  j["sigma_e"] = sc.aux_noise_sd;
  j["p_c"] = sc.target_case_rate;
  j["q_s"] = sc.subcohort_prob;
  j["q_c"] = sc.case_prob;
  j["n_t"] = sc.scheduled_exams;
  j["attendance"] = sc.attendance;
  j["end_of_study"] = sc.end_of_study;
  return j;
}

// Two-sided normal p-value for estimate/se.
inline double wald_p_value(double estimate, double se) {
  if (!(se > 0.0)) return estimate == 0.0 ? 1.0 : 0.0;
  return std::erfc(std::abs(estimate / se) / std::sqrt(2.0));
}

namespace detail {

inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string compact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

}  // namespace detail

/**
 * Study report as CSV. Header columns are fixed; one row per
 * (method, coefficient). The manifest rides along as a comment line, wall
 * time and thread count excluded so identical runs give identical bytes.
 */
inline void write_simulation_csv(const ReplicationReport& report,
                                 const RunManifest& manifest, std::ostream& out) {
  out << "# manifest " << manifest_json(manifest, false).dump() << "\n";
  out << "# replicates_used=" << report.replicates_used
      << " replicate_failures=" << report.replicate_failures
      << " bootstrap_failures=" << report.bootstrap_failures << "\n";
  out << "p_c,q_c,method,rho,bias,ssd,ese,cp,re,param\n";
  const Scenario& sc = report.scenario;
  for (const MetricRow& row : report.rows) {
    out << detail::compact(sc.target_case_rate) << ','
        << detail::compact(sc.case_prob) << ',' << row.method << ','
        << detail::fixed(sc.aux_correlation(), 4) << ','
        << detail::fixed(row.bias, 6) << ',' << detail::fixed(row.ssd, 6) << ','
        << detail::fixed(row.ese, 6) << ',' << detail::fixed(row.cp, 4) << ','
        << detail::fixed(row.re, 4) << ',' << row.param << "\n";
  }
}

inline nlohmann::json simulation_report_json(const ReplicationReport& report,
                                             const RunManifest& manifest) {
  nlohmann::json j;
  j["manifest"] = manifest_json(manifest, false);
  j["scenario"] = scenario_json(report.scenario);
  j["rho"] = report.scenario.aux_correlation();
  j["counts"] = {{"replicates_requested", report.replicates_requested},
                 {"replicates_used", report.replicates_used},
                 {"replicate_failures", report.replicate_failures},
                 {"bootstrap_failures", report.bootstrap_failures}};
  nlohmann::json rows = nlohmann::json::array();
  for (const MetricRow& row : report.rows) {
    rows.push_back({{"method", row.method},
                    {"param", row.param},
                    {"bias", row.bias},
                    {"ssd", row.ssd},
                    {"ese", row.ese},
                    {"cp", row.cp},
                    {"re", row.re}});
  }
  j["rows"] = rows;
  return j;
}

struct FitCommandOptions {
  std::string data_path;
  double q_subcohort = 0.0;  // required unless estimate_design
  double q_case = 1.0;
  bool estimate_design = false;
  int degree = 3;
  int bootstrap = 500;
  std::uint64_t seed = 1;
  std::string working = "auto";  // auto | aux | z
  std::string out_path = "fit_report.json";
  int threads = 0;
};

struct SimulateCommandOptions {
  std::string scenario_path;
  int replicates = 200;
  int bootstrap = 500;
  std::uint64_t seed = 1;
  int threads = 0;
  std::string out_dir = ".";
};

struct CalibrateCommandOptions {
  std::string scenario_path;
  double target_rate = -1.0;  // <= 0: take the scenario's p_c
  std::uint64_t seed = 1;
  double bracket_lo = 0.1;
  double bracket_hi = 50.0;
};

/**
 * Fits the weighted and update estimators to a dataset and writes a JSON
 * report (estimates, bootstrap SEs, two-sided normal p-values for both
 * methods). Returns 0, or 2 when any fit failed to converge (a partial
 * report is still written).
 */
inline int run_fit_command(const FitCommandOptions& opt, std::ostream& console) {
  const std::string digest = fnv1a_digest_file(opt.data_path);
  SamplingDesign design = opt.estimate_design
                              ? SamplingDesign(1.0, 1.0)
                              : SamplingDesign(opt.q_subcohort, opt.q_case);
  CohortDataset data = load_dataset_csv(opt.data_path, design);
  if (opt.estimate_design) {
    data.design = estimate_design(data);
  }

  CovariateSelector working;
  if (opt.working == "auto")
    working = working_selector(data);
  else if (opt.working == "aux")
    working = CovariateSelector::kWorkingAux;
  else if (opt.working == "z")
    working = CovariateSelector::kWorkingCheap;
  else
    throw ConfigError("--working must be auto, aux or z");
  covariate_dimension(data, working);  // validates availability

  const SieveConfig sieve = sieve_from_data(data, opt.degree);
  const FitConfig fitcfg;

  PointFits point;
  point.working = working;
  {
    const std::vector<double> w = sampling_weights(data);
    const std::vector<double> ones(data.size(), 1.0);
    point.main_ipw = fit(data, w, CovariateSelector::kMain, sieve, fitcfg);
    point.working_ipw = fit(data, w, working, sieve, fitcfg);
    point.working_full = fit(data, ones, working, sieve, fitcfg);
  }

  BootstrapConfig bootcfg;
  bootcfg.replicates = opt.bootstrap;
  bootcfg.seed = opt.seed;
  const BootstrapRun boot =
      run_bootstrap(data, sieve, fitcfg, bootcfg, point, opt.threads);
  const CovarianceBlocks sigma = estimate_sigma(boot.replicates, data.size());
  const UpdateResult upd = update_estimate(
      point.main_ipw.regression, point.working_ipw.regression,
      point.working_full.regression, sigma, data.size());

  RunManifest manifest;
  manifest.command = "fit";
  manifest.seed = opt.seed;
  manifest.input_digest = digest;
  manifest.config = {{"data", opt.data_path},
                     {"q_s", data.design.q_subcohort},
                     {"q_c", data.design.q_case},
                     {"design_estimated", opt.estimate_design},
                     {"degree", opt.degree},
                     {"bootstrap", opt.bootstrap},
                     {"working", opt.working == "auto"
                                     ? (working == CovariateSelector::kWorkingAux
                                            ? "aux"
                                            : "z")
                                     : opt.working}};

  const std::vector<std::string> names =
      covariate_labels(data, CovariateSelector::kMain);
  nlohmann::json coefficients = nlohmann::json::array();
  for (std::size_t j = 0; j < names.size(); ++j) {
    const auto idx = static_cast<Eigen::Index>(j);
    const double e0 = point.main_ipw.regression[idx];
    const double s0 = upd.se_original[idx];
    const double e1 = upd.updated[idx];
    const double s1 = upd.se_updated[idx];
    coefficients.push_back(
        {{"name", names[j]},
         {"ipw", {{"estimate", e0}, {"se", s0}, {"p", wald_p_value(e0, s0)}}},
         {"update", {{"estimate", e1}, {"se", s1}, {"p", wald_p_value(e1, s1)}}}});
  }

  auto fit_block = [](const FitResult& r) {
    return nlohmann::json{{"converged", r.converged},
                          {"loglik", r.loglik},
                          {"iterations", r.iterations}};
  };
  nlohmann::json report;
  report["manifest"] = manifest_json(manifest, false);
  report["data"] = {{"path", opt.data_path},
                    {"subjects", data.size()},
                    {"cases", data.case_count()},
                    {"sampled", data.sampled_count()},
                    {"q_s", data.design.q_subcohort},
                    {"q_c", data.design.q_case}};
  report["sieve"] = {{"degree", sieve.degree},
                     {"lower", sieve.lower},
                     {"upper", sieve.upper}};
  report["fits"] = {{"ipw", fit_block(point.main_ipw)},
                    {"working_ipw", fit_block(point.working_ipw)},
                    {"working_full", fit_block(point.working_full)}};
  report["bootstrap"] = {{"replicates", opt.bootstrap},
                         {"used", sigma.n_replicates_used},
                         {"failures", boot.failures}};
  report["update_fallback"] = upd.fallback;
  report["coefficients"] = coefficients;

  {
    std::ofstream out(opt.out_path);
    if (!out) throw DataFormatError("cannot write '" + opt.out_path + "'");
    out << report.dump(2) << "\n";
  }

  console << "subjects " << data.size() << ", cases " << data.case_count()
          << ", sampled " << data.sampled_count() << "\n";
  console << "bootstrap replicates used " << sigma.n_replicates_used << "/"
          << opt.bootstrap << (upd.fallback ? " (update fallback)" : "") << "\n";
  console << "coefficient        ipw (se)             update (se)          p(update)\n";
  for (const auto& c : coefficients) {
    char line[160];
    std::snprintf(line, sizeof line, "%-12s %10.5f (%.5f) %10.5f (%.5f)   %.4g\n",
                  c["name"].get<std::string>().c_str(),
                  c["ipw"]["estimate"].get<double>(),
                  c["ipw"]["se"].get<double>(),
                  c["update"]["estimate"].get<double>(),
                  c["update"]["se"].get<double>(), c["update"]["p"].get<double>());
    console << line;
  }
  console << "report written to " << opt.out_path << "\n";
  return point.all_converged() ? kExitOk : kExitNumericalError;
}

/**
 * Runs a replication study from a scenario file and writes report.csv,
 * report.json and manifest.json into the output directory.
 */
inline int run_simulate_command(const SimulateCommandOptions& opt,
                                std::ostream& console) {
  const Scenario scenario = parse_scenario_file(opt.scenario_path);
  const auto start = std::chrono::steady_clock::now();
  BootstrapConfig bootcfg;
  bootcfg.replicates = opt.bootstrap;
  ReplicationReport report =
      run_study(scenario, opt.replicates, bootcfg, opt.seed, opt.threads);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();

  RunManifest manifest;
  manifest.command = "simulate";
  manifest.seed = opt.seed;
  manifest.input_digest = fnv1a_digest_file(opt.scenario_path);
  manifest.config = {{"scenario_file", opt.scenario_path},
                     {"scenario", scenario_json(report.scenario)},
                     {"replicates", opt.replicates},
                     {"bootstrap", opt.bootstrap}};
  manifest.wall_seconds = report.wall_seconds;
  manifest.threads_requested = opt.threads;

  std::filesystem::create_directories(opt.out_dir);
  const std::filesystem::path dir(opt.out_dir);
  {
    std::ofstream csv(dir / "report.csv", std::ios::binary);
    if (!csv) throw DataFormatError("cannot write report.csv in '" + opt.out_dir + "'");
    write_simulation_csv(report, manifest, csv);
  }
  {
    std::ofstream js(dir / "report.json", std::ios::binary);
    if (!js) throw DataFormatError("cannot write report.json in '" + opt.out_dir + "'");
    js << simulation_report_json(report, manifest).dump(2) << "\n";
  }
  {
    std::ofstream mf(dir / "manifest.json", std::ios::binary);
    if (!mf) throw DataFormatError("cannot write manifest.json in '" + opt.out_dir + "'");
    mf << manifest_json(manifest, true).dump(2) << "\n";
  }

  console << "end_of_study " << report.scenario.end_of_study << ", replicates used "
          << report.replicates_used << "/" << report.replicates_requested
          << ", failures " << report.replicate_failures << "\n";
  for (const MetricRow& row : report.rows) {
    char line[160];
    std::snprintf(line, sizeof line,
                  "%-7s %-6s bias %+0.4f  ssd %0.4f  ese %0.4f  cp %0.3f  re %0.3f\n",
                  row.method.c_str(), row.param.c_str(), row.bias, row.ssd,
                  row.ese, row.cp, row.re);
    console << line;
  }
  console << "reports written to " << opt.out_dir << "\n";
  return kExitOk;
}

/** Calibrates follow-up length to a target case rate and verifies it. */
inline int run_calibrate_command(const CalibrateCommandOptions& opt,
                                 std::ostream& console) {
  const Scenario scenario = parse_scenario_file(opt.scenario_path);
  const double target =
      opt.target_rate > 0.0 ? opt.target_rate : scenario.target_case_rate;
  const double u = calibrate_end_of_study(scenario, target, opt.seed,
                                          opt.bracket_lo, opt.bracket_hi);
  RngStream verify(opt.seed, {detail::kTagCalibrate, 1});
  const double achieved = estimate_case_rate(scenario, u, 100000, verify);
  char line[160];
  std::snprintf(line, sizeof line, "end_of_study = %.17g\n", u);
  console << line;
  std::snprintf(line, sizeof line,
                "achieved_rate = %.4f (target %.4f, verification draw of 100000)\n",
                achieved, target);
  console << line;
  return kExitOk;
}

/** Full argv-level entry point; maps errors onto the exit-code contract. */
inline int run_cli(int argc, const char* const* argv, std::ostream& console,
                   std::ostream& errors) {
  CLI::App app{"Cox models for interval-censored case-cohort data"};
  app.require_subcommand(1);

  FitCommandOptions fit_opt;
  CLI::App* fit_cmd =
      app.add_subcommand("fit", "fit a dataset and write a JSON report");
  fit_cmd->add_option("--data", fit_opt.data_path, "cohort CSV file")
      ->required();
  auto* qs_opt =
      fit_cmd->add_option("--qs", fit_opt.q_subcohort, "subcohort sampling probability");
  fit_cmd->add_option("--qc", fit_opt.q_case,
                      "case sampling probability (default 1)");
  fit_cmd->add_flag("--estimate-design", fit_opt.estimate_design,
                    "estimate the sampling probabilities from the indicators");
  fit_cmd->add_option("--degree", fit_opt.degree, "Bernstein degree (default 3)");
  fit_cmd->add_option("--bootstrap", fit_opt.bootstrap,
                      "bootstrap replicates (default 500)");
  fit_cmd->add_option("--seed", fit_opt.seed, "random seed");
  fit_cmd->add_option("--working", fit_opt.working,
                      "working-model covariates: auto, aux or z");
  fit_cmd->add_option("--out", fit_opt.out_path,
                      "report path (default fit_report.json)");
  fit_cmd->add_option("--threads", fit_opt.threads,
                      "worker threads (default: CASECOHORT_THREADS or hardware)");

  SimulateCommandOptions sim_opt;
  CLI::App* sim_cmd =
      app.add_subcommand("simulate", "run a replication study from a scenario file");
  sim_cmd->add_option("--scenario", sim_opt.scenario_path, "scenario config file")
      ->required();
  sim_cmd->add_option("--replicates", sim_opt.replicates, "replicates (default 200)");
  sim_cmd->add_option("--bootstrap", sim_opt.bootstrap,
                      "bootstrap replicates per replicate (default 500)");
  sim_cmd->add_option("--seed", sim_opt.seed, "random seed");
  sim_cmd->add_option("--threads", sim_opt.threads,
                      "worker threads (default: CASECOHORT_THREADS or hardware)");
  sim_cmd->add_option("--out-dir", sim_opt.out_dir, "output directory");

  CalibrateCommandOptions cal_opt;
  CLI::App* cal_cmd = app.add_subcommand(
      "calibrate", "calibrate follow-up length to a target case rate");
  cal_cmd->add_option("--scenario", cal_opt.scenario_path, "scenario config file")
      ->required();
  cal_cmd->add_option("--target-rate", cal_opt.target_rate,
                      "target case rate (default: the scenario's p_c)");
  cal_cmd->add_option("--seed", cal_opt.seed, "random seed");
  cal_cmd->add_option("--bracket-lo", cal_opt.bracket_lo,
                      "lower end of the search bracket (default 0.1)");
  cal_cmd->add_option("--bracket-hi", cal_opt.bracket_hi,
                      "upper end of the search bracket (default 50)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      console << app.help();
      return kExitOk;
    }
    errors << "error: " << e.what() << "\n";
    return kExitInputError;
  }

  try {
    if (fit_cmd->parsed()) {
      if (!fit_opt.estimate_design && qs_opt->count() == 0)
        throw ConfigError("--qs is required unless --estimate-design is given");
      return run_fit_command(fit_opt, console);
    }
    if (sim_cmd->parsed()) return run_simulate_command(sim_opt, console);
    return run_calibrate_command(cal_opt, console);
  } catch (const FitError& e) {
    errors << "error: " << e.what() << "\n";
    return kExitNumericalError;
  } catch (const Error& e) {
    errors << "error: " << e.what() << "\n";
    return kExitInputError;
  } catch (const std::exception& e) {
    errors << "error: " << e.what() << "\n";
    return kExitInputError;
  }
}

}  // namespace casecohort
