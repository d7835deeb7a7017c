#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "casecohort/update.hpp"

namespace casecohort {

enum class CovariateSetup { kExpensiveOnly, kExpensiveAndCheap };

/**
 * One synthetic-study configuration. The generating model is a Cox model
 * with baseline cumulative hazard 0.2 t^2; the expensive covariate is
 * standard normal (bivariate with the cheap one, correlation 0.2, when both
 * are present), and its error-prone surrogate adds N(0, aux_noise_sd^2)
 * noise. Follow-up runs to end_of_study with scheduled_exams jittered,
 * partially attended examinations; end_of_study set to 0 means "calibrate
 * to target_case_rate first".
 */
struct Scenario {
  std::size_t cohort_size = 1000;
  CovariateSetup setup = CovariateSetup::kExpensiveOnly;
  double beta = 0.3;
  double gamma = 0.5;
  double aux_noise_sd = 0.30;
  double target_case_rate = 0.2;
  double subcohort_prob = 0.2;
  double case_prob = 1.0;
  int scheduled_exams = 12;
  double attendance = 0.8;
  double end_of_study = 0.0;
  double jitter_fraction = 1.0 / 3.0;  // of the exam spacing; fits tests

  double true_cumhaz(double t) const { return 0.2 * t * t; }

  double aux_correlation() const {
    return 1.0 / std::sqrt(1.0 + aux_noise_sd * aux_noise_sd);
  }

  Eigen::VectorXd true_regression() const {
    if (setup == CovariateSetup::kExpensiveOnly) {
      Eigen::VectorXd v(1);
      v << beta;
      return v;
    }
    Eigen::VectorXd v(2);
    v << beta, gamma;
    return v;
  }

  SamplingDesign design() const { return {subcohort_prob, case_prob}; }

  void validate() const {
    if (cohort_size < 2) throw ConfigError("cohort size must be at least 2");
    if (!(target_case_rate > 0.0) || target_case_rate >= 1.0)
      throw ConfigError("target case rate must lie in (0, 1)");
    if (!(attendance > 0.0) || attendance > 1.0)
      throw ConfigError("attendance probability must lie in (0, 1]");
    if (scheduled_exams < 1) throw ConfigError("need at least one scheduled exam");
    if (!(aux_noise_sd >= 0.0)) throw ConfigError("auxiliary noise sd must be >= 0");
    if (!(jitter_fraction >= 0.0) || jitter_fraction >= 0.5)
      throw ConfigError("jitter fraction must lie in [0, 0.5) to keep exams ordered");
    if (end_of_study < 0.0) throw ConfigError("end of study cannot be negative");
    design();  // validates the sampling probabilities
  }
};

namespace detail {
inline constexpr std::uint64_t kTagCohort = 1;
inline constexpr std::uint64_t kTagCalibrate = 3;
inline constexpr std::uint64_t kTagReplicateBootstrap = 5;
}  // namespace detail

inline constexpr double kZ975 = 1.959963984540054;

// Inverse-transform draw from the generating model: 0.2 T^2 e^eta ~ Exp(1).
inline double generate_failure_time(double eta, RngStream& stream) {
  return std::sqrt(stream.exponential() * std::exp(-eta) / 0.2);
}

/**
 * Attended examination times: scheduled_exams visits at equal spacing over
 * (0, end_of_study), each jittered within +-jitter_fraction of the spacing
 * and attended independently. Empty schedules are redrawn. Jitter and
 * attendance draws are consumed for every visit, attended or not, so the
 * draw count per schedule is fixed.
 */
inline std::vector<double> generate_exam_schedule(const Scenario& scenario,
                                                  RngStream& stream) {
  const double spacing =
      scenario.end_of_study / static_cast<double>(scenario.scheduled_exams + 1);
  for (;;) {
    std::vector<double> attended;
    for (int j = 1; j <= scenario.scheduled_exams; ++j) {
      const double jitter = spacing * scenario.jitter_fraction *
                            (2.0 * stream.uniform01() - 1.0);
      const bool present = stream.bernoulli(scenario.attendance);
      if (present) attended.push_back(static_cast<double>(j) * spacing + jitter);
    }
    if (!attended.empty()) return attended;
  }
}

namespace detail {

struct SubjectDraw {
  double expensive = 0.0;
  double cheap = 0.0;
  bool has_cheap = false;
  double aux = 0.0;
  double failure_time = 0.0;
  std::vector<double> exams;
};

// Fixed draw order per subject: covariates, surrogate noise, failure time,
// schedule. Changing this order changes every seeded result.
inline SubjectDraw draw_subject(const Scenario& scenario, RngStream& stream) {
  SubjectDraw d;
  double eta = 0.0;
  if (scenario.setup == CovariateSetup::kExpensiveAndCheap) {
    const double n1 = stream.normal();
    const double n2 = stream.normal();
    d.expensive = n1;
    d.cheap = 0.2 * n1 + 0.9797958971132712 * n2;  // corr(X, Z) = 0.2
    d.has_cheap = true;
    eta = scenario.beta * d.expensive + scenario.gamma * d.cheap;
  } else {
    d.expensive = stream.normal();
    eta = scenario.beta * d.expensive;
  }
  d.aux = d.expensive + scenario.aux_noise_sd * stream.normal();
  d.failure_time = generate_failure_time(eta, stream);
  d.exams = generate_exam_schedule(scenario, stream);
  return d;
}

inline std::pair<double, double> observed_interval(const SubjectDraw& d) {
  std::vector<int> flags(d.exams.size() + 1, 0);
  std::size_t gap = d.exams.size();
  for (std::size_t k = 0; k < d.exams.size(); ++k) {
    if (d.failure_time <= d.exams[k]) {
      gap = k;
      break;
    }
  }
  flags[gap] = 1;
  return reduce_exam_history(d.exams, flags);
}

}  // namespace detail

/** Draws a full synthetic cohort, sampling indicators included. */
inline CohortDataset generate_cohort(const Scenario& scenario, RngStream& stream) {
  scenario.validate();
  if (!(scenario.end_of_study > 0.0))
    throw ConfigError("scenario must be calibrated (end_of_study > 0) before generation");
  CohortDataset data;
  data.design = scenario.design();
  data.expensive_names = {"x1"};
  data.aux_names = {"x1"};
  if (scenario.setup == CovariateSetup::kExpensiveAndCheap)
    data.cheap_names = {"z1"};
  data.subjects.reserve(scenario.cohort_size);
  for (std::size_t i = 0; i < scenario.cohort_size; ++i) {
    const detail::SubjectDraw d = detail::draw_subject(scenario, stream);
    IntervalObservation obs;
    obs.id = "s" + std::to_string(i + 1);
    const auto [left, right] = detail::observed_interval(d);
    obs.left = left;
    obs.right = right;
    if (d.has_cheap) obs.cheap = {d.cheap};
    obs.aux = {d.aux};
    obs.in_subcohort = stream.bernoulli(scenario.subcohort_prob);
    if (obs.is_case() && !obs.in_subcohort)
      obs.selected_case = stream.bernoulli(scenario.case_prob);
    obs.sampled = obs.in_subcohort || obs.selected_case;
    if (obs.sampled) obs.expensive = std::vector<double>{d.expensive};
    validate_observation(obs, "generated subject " + std::to_string(i + 1));
    data.subjects.push_back(std::move(obs));
  }
  return data;
}

// Monte Carlo case rate of the scenario run to the given end of study.
inline double estimate_case_rate(const Scenario& scenario, double end_of_study,
                                 std::size_t subjects, RngStream& stream) {
  if (!(end_of_study > 0.0))
    throw DomainError("case-rate estimation needs a positive end of study");
  if (subjects == 0)
    throw DomainError("case-rate estimation needs at least one subject");
  Scenario sc = scenario;
  sc.end_of_study = end_of_study;
  sc.validate();
  std::size_t cases = 0;
  for (std::size_t i = 0; i < subjects; ++i) {
    const detail::SubjectDraw d = detail::draw_subject(sc, stream);
    cases += d.failure_time <= d.exams.back();
  }
  return static_cast<double>(cases) / static_cast<double>(subjects);
}

/**
 * Finds the end of study hitting the target case rate by bisection on
 * Monte Carlo rate estimates. Every evaluation replays the same stream, so
 * the estimated rate is exactly nondecreasing in the follow-up length and
 * the search is deterministic given the seed.
 */
inline double calibrate_end_of_study(const Scenario& scenario, double target,
                                     std::uint64_t seed, double bracket_lo = 0.1,
                                     double bracket_hi = 50.0,
                                     std::size_t samples = 50000) {
  if (!(target > 0.0) || target >= 1.0)
    throw CalibrationError("target case rate must lie in (0, 1)");
  if (!(bracket_lo > 0.0) || !(bracket_hi > bracket_lo))
    throw CalibrationError("calibration bracket must satisfy 0 < lo < hi");
  const double tol = 0.005;
  auto rate_at = [&](double u) {
    RngStream stream(seed, {detail::kTagCalibrate});
    return estimate_case_rate(scenario, u, samples, stream);
  };
  double lo = bracket_lo, hi = bracket_hi;
  const double rate_lo = rate_at(lo), rate_hi = rate_at(hi);
  if (std::abs(rate_lo - target) <= tol) return lo;
  if (std::abs(rate_hi - target) <= tol) return hi;
  if (rate_lo > target || rate_hi < target) {
    std::ostringstream msg;
    msg << "target case rate " << target << " is unreachable on bracket ["
        << bracket_lo << ", " << bracket_hi << "]: rate spans [" << rate_lo
        << ", " << rate_hi << "]";
    throw CalibrationError(msg.str());
  }
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double r = rate_at(mid);
    if (std::abs(r - target) <= tol) return mid;
    (r < target ? lo : hi) = mid;
  }
  throw CalibrationError("bisection failed to reach the rate tolerance");
}

/**
 * L2 distance on [lower, upper] between the fitted cumulative hazard and a
 * reference function, by the trapezoid rule on a 1000-point grid.
 */
inline double cumhaz_l2_distance(const FitResult& fit,
                                 const std::function<double(double)>& reference,
                                 const SieveConfig& sieve) {
  constexpr int kGrid = 1000;
  const double h = (sieve.upper - sieve.lower) / (kGrid - 1);
  double acc = 0.0;
  for (int i = 0; i < kGrid; ++i) {
    const double t = i + 1 == kGrid ? sieve.upper : sieve.lower + h * i;
    const double diff = cumhaz_eval(fit.cumhaz_coefficients, t, sieve) - reference(t);
    const double term = diff * diff;
    acc += (i == 0 || i + 1 == kGrid) ? 0.5 * term : term;
  }
  return std::sqrt(acc * h);
}

struct MetricRow {
  std::string method;  // "ipw" or "update"
  std::string param;   // coefficient label
  double bias = 0.0;
  double ssd = 0.0;
  double ese = 0.0;
  double cp = 0.0;
  double re = 1.0;  // ssd(ipw)^2 / ssd(method)^2
};

struct ReplicationReport {
  Scenario scenario;  // resolved: end_of_study is the value actually used
  int replicates_requested = 0;
  int replicates_used = 0;
  int replicate_failures = 0;
  long long bootstrap_failures = 0;  // dropped refits within used replicates
  std::vector<MetricRow> rows;
  double wall_seconds = 0.0;  // filled by callers that time the run
};

/**
 * Full study: per replicate, generate a cohort, run the three point fits,
 * the shared-multiplier bootstrap, and the update step; aggregate bias,
 * spread, bootstrap SE, coverage, and relative efficiency per coefficient.
 * Replicates whose fits fail to converge (or whose bootstrap collapses)
 * are excluded and counted. Deterministic for fixed (scenario, replicates,
 * bootstrap config, seed) regardless of thread count.
 */
inline ReplicationReport run_study(const Scenario& scenario, int replicates,
                                   const BootstrapConfig& bootcfg,
                                   std::uint64_t seed, int threads = 0) {
  if (replicates < 2) throw ConfigError("need at least 2 replicates");
  Scenario resolved = scenario;
  resolved.validate();
  if (resolved.end_of_study <= 0.0)
    resolved.end_of_study =
        calibrate_end_of_study(resolved, resolved.target_case_rate, seed);

  const Eigen::VectorXd truth = resolved.true_regression();
  const Eigen::Index d = truth.size();

  struct Outcome {
    bool ok = false;
    Eigen::VectorXd ipw_estimate, ipw_se, updated_estimate, updated_se;
    int bootstrap_failures = 0;
  };
  std::vector<Outcome> outcomes(static_cast<std::size_t>(replicates));

  parallel_for_indexed(
      outcomes.size(), resolve_thread_count(threads), [&](std::size_t r) {
        Outcome& out = outcomes[r];
        try {
          RngStream gen(seed, {detail::kTagCohort, static_cast<std::uint64_t>(r)});
          const CohortDataset data = generate_cohort(resolved, gen);
          const SieveConfig sieve = sieve_from_data(data);
          const FitConfig fitcfg;
          const PointFits point = fit_point_estimates(data, sieve, fitcfg);
          if (!point.all_converged()) return;
          BootstrapConfig bc = bootcfg;
          bc.seed = stream_key(seed, {detail::kTagReplicateBootstrap,
                                      static_cast<std::uint64_t>(r)});
          const BootstrapRun boot =
              run_bootstrap(data, sieve, fitcfg, bc, point, /*threads=*/1);
          const CovarianceBlocks sigma =
              estimate_sigma(boot.replicates, data.size());
          const UpdateResult upd = update_estimate(
              point.main_ipw.regression, point.working_ipw.regression,
              point.working_full.regression, sigma, data.size());
          out.ipw_estimate = point.main_ipw.regression;
          out.ipw_se = upd.se_original;
          out.updated_estimate = upd.updated;
          out.updated_se = upd.se_updated;
          out.bootstrap_failures = boot.failures;
          out.ok = true;
        } catch (const Error&) {
          out.ok = false;
        }
      });

  ReplicationReport report;
  report.scenario = resolved;
  report.replicates_requested = replicates;
  for (const Outcome& o : outcomes) {
    report.replicates_used += o.ok;
    report.replicate_failures += !o.ok;
    if (o.ok) report.bootstrap_failures += o.bootstrap_failures;
  }
  if (report.replicates_used < 2)
    throw FitError("fewer than 2 replicates produced usable estimates");

  const auto aggregate = [&](auto estimate_of, auto se_of) {
    std::vector<MetricRow> rows(static_cast<std::size_t>(d));
    const double used = report.replicates_used;
    for (Eigen::Index j = 0; j < d; ++j) {
      double mean = 0.0;
      for (const Outcome& o : outcomes)
        if (o.ok) mean += estimate_of(o)[j];
      mean /= used;
      double var = 0.0, ese = 0.0, covered = 0.0;
      for (const Outcome& o : outcomes) {
        if (!o.ok) continue;
        const double e = estimate_of(o)[j];
        var += (e - mean) * (e - mean);
        const double se = se_of(o)[j];
        ese += se;
        covered += std::abs(e - truth[j]) <= kZ975 * se;
      }
      MetricRow& row = rows[static_cast<std::size_t>(j)];
      row.bias = mean - truth[j];
      row.ssd = std::sqrt(var / (used - 1.0));
      row.ese = ese / used;
      row.cp = covered / used;
    }
    return rows;
  };

  std::vector<MetricRow> ipw_rows =
      aggregate([](const Outcome& o) -> const Eigen::VectorXd& { return o.ipw_estimate; },
                [](const Outcome& o) -> const Eigen::VectorXd& { return o.ipw_se; });
  std::vector<MetricRow> upd_rows = aggregate(
      [](const Outcome& o) -> const Eigen::VectorXd& { return o.updated_estimate; },
      [](const Outcome& o) -> const Eigen::VectorXd& { return o.updated_se; });

  const std::vector<std::string> labels =
      resolved.setup == CovariateSetup::kExpensiveOnly
          ? std::vector<std::string>{"beta"}
          : std::vector<std::string>{"beta", "gamma"};
  for (Eigen::Index j = 0; j < d; ++j) {
    MetricRow& ipw = ipw_rows[static_cast<std::size_t>(j)];
    MetricRow& upd = upd_rows[static_cast<std::size_t>(j)];
    ipw.method = "ipw";
    upd.method = "update";
    ipw.param = upd.param = labels[static_cast<std::size_t>(j)];
    ipw.re = 1.0;
    upd.re = upd.ssd > 0.0 ? (ipw.ssd * ipw.ssd) / (upd.ssd * upd.ssd)
                           : std::numeric_limits<double>::infinity();
    report.rows.push_back(ipw);
    report.rows.push_back(upd);
  }
  return report;
}

/**
 * Key-value scenario parser. Keys: n, covariate_setup (x_only | x_and_z),
 * beta, gamma, sigma_e, p_c, q_s, q_c, n_t, attendance, end_of_study
 * (omit or 0 to calibrate). '#' starts a comment. Unknown keys are errors.
 */
inline Scenario parse_scenario(const std::map<std::string, std::string>& keys) {
  Scenario sc;
  auto number = [](const std::string& key, const std::string& value) {
    try {
      std::size_t pos = 0;
      const double v = std::stod(value, &pos);
      if (pos != value.size()) throw std::invalid_argument(value);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("scenario key '" + key + "' has non-numeric value '" +
                        value + "'");
    }
  };
  for (const auto& [key, value] : keys) {
    if (key == "n") {
      const double v = number(key, value);
      if (v < 1 || v != std::floor(v))
        throw ConfigError("scenario key 'n' must be a positive integer");
      sc.cohort_size = static_cast<std::size_t>(v);
    } else if (key == "covariate_setup") {
      if (value == "x_only")
        sc.setup = CovariateSetup::kExpensiveOnly;
      else if (value == "x_and_z")
        sc.setup = CovariateSetup::kExpensiveAndCheap;
      else
        throw ConfigError("covariate_setup must be x_only or x_and_z, got '" +
                          value + "'");
    } else if (key == "beta") {
      sc.beta = number(key, value);
    } else if (key == "gamma") {
      sc.gamma = number(key, value);
    } else if (key == "sigma_e") {
      sc.aux_noise_sd = number(key, value);
    } else if (key == "p_c") {
      sc.target_case_rate = number(key, value);
    } else if (key == "q_s") {
      sc.subcohort_prob = number(key, value);
    } else if (key == "q_c") {
      sc.case_prob = number(key, value);
    } else if (key == "n_t") {
      const double v = number(key, value);
      if (v < 1 || v != std::floor(v))
        throw ConfigError("scenario key 'n_t' must be a positive integer");
      sc.scheduled_exams = static_cast<int>(v);
    } else if (key == "attendance") {
      sc.attendance = number(key, value);
    } else if (key == "end_of_study") {
      sc.end_of_study = number(key, value);
    } else {
      throw ConfigError("unknown scenario key '" + key + "'");
    }
  }
  sc.validate();
  return sc;
}

inline Scenario parse_scenario_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open scenario file '" + path + "'");
  std::map<std::string, std::string> keys;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string text = detail::trimmed(line);
    if (text.empty()) continue;
    const std::size_t eq = text.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(line_no) +
                        ": expected 'key = value'");
    const std::string key = detail::trimmed(text.substr(0, eq));
    const std::string value = detail::trimmed(text.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError(path + ":" + std::to_string(line_no) +
                        ": expected 'key = value'");
    if (!keys.emplace(key, value).second)
      throw ConfigError(path + ":" + std::to_string(line_no) +
                        ": duplicate key '" + key + "'");
  }
  return parse_scenario(keys);
}

}  // namespace casecohort
