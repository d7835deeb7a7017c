#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "casecohort/estimator.hpp"
#include "casecohort/parallel.hpp"
#include "casecohort/rng.hpp"

namespace casecohort {

namespace detail {
inline constexpr std::uint64_t kTagBootstrapDraw = 2;
}

struct BootstrapConfig {
  int replicates = 500;
  std::uint64_t seed = 0;
  // Multipliers are Exp(1), mean and variance one; the distribution is part
  // of the method, not a knob.
};

inline Eigen::VectorXd draw_bootstrap_weights(std::size_t n, RngStream& stream) {
  if (n == 0) throw DomainError("bootstrap weights need at least one subject");
  Eigen::VectorXd u(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < u.size(); ++i) u[i] = stream.exponential();
  return u;
}

/**
 * The three point fits the update estimator combines: the weighted fit on
 * the phase-two covariates, and the weighted and full-cohort fits of the
 * working model.
 */
struct PointFits {
  FitResult main_ipw;
  FitResult working_ipw;
  FitResult working_full;
  CovariateSelector working = CovariateSelector::kWorkingAux;

  bool all_converged() const {
    return main_ipw.converged && working_ipw.converged && working_full.converged;
  }
};

inline PointFits fit_point_estimates(
    const CohortDataset& data, const SieveConfig& sieve, const FitConfig& cfg = {},
    const std::optional<SieveConfig>& working_sieve = std::nullopt) {
  PointFits out;
  out.working = working_selector(data);
  const SieveConfig& ws = working_sieve ? *working_sieve : sieve;
  out.main_ipw = fit_main_ipw(data, sieve, cfg);
  out.working_ipw = fit_working_ipw(data, ws, cfg);
  out.working_full = fit_working_full(data, ws, cfg);
  return out;
}

/** One bootstrap replicate's three regression estimates. */
struct ReplicateFits {
  Eigen::VectorXd main;
  Eigen::VectorXd working_ipw;
  Eigen::VectorXd working_full;
  bool converged = false;
};

namespace detail {

// Shared refitting core. The same multiplier vector u reweights all three
// fits; that sharing is what makes the off-diagonal covariance block
// nonzero, so it must never be broken up.
class BootstrapRefitter {
 public:
  BootstrapRefitter(const CohortDataset& data, const SieveConfig& sieve,
                    const std::optional<SieveConfig>& working_sieve,
                    const FitConfig& cfg, const PointFits& point)
      : base_weights_(sampling_weights(data)),
        unit_weights_(data.size(), 1.0),
        main_engine_(data, CovariateSelector::kMain, sieve, base_weights_),
        working_ipw_engine_(data, point.working,
                            working_sieve ? *working_sieve : sieve, base_weights_),
        working_full_engine_(data, point.working,
                             working_sieve ? *working_sieve : sieve, unit_weights_),
        cfg_(cfg),
        ipw_censored_(censored_fraction(data, base_weights_)),
        full_censored_(censored_fraction(data, unit_weights_)),
        main_start_(main_engine_.pack(
            {point.main_ipw.regression, point.main_ipw.log_increments})),
        working_ipw_start_(working_ipw_engine_.pack(
            {point.working_ipw.regression, point.working_ipw.log_increments})),
        working_full_start_(working_full_engine_.pack(
            {point.working_full.regression, point.working_full.log_increments})),
        point_(point) {
    cfg_.restarts = 1;  // refits are warm-started from the base optimum
  }

  std::size_t size() const { return base_weights_.size(); }

  ReplicateFits refit(const Eigen::VectorXd& u) const {
    if (static_cast<std::size_t>(u.size()) != base_weights_.size())
      throw DomainError("multiplier vector length does not match the data");
    std::vector<double> reweighted(base_weights_.size());
    for (std::size_t i = 0; i < reweighted.size(); ++i)
      reweighted[i] = u[static_cast<Eigen::Index>(i)] * base_weights_[i];
    std::vector<double> multipliers(u.data(), u.data() + u.size());

    ReplicateFits rep;
    bool ok = true;
    rep.main = solve(main_engine_, reweighted, base_weights_, ipw_censored_,
                     main_start_, point_.main_ipw, ok);
    rep.working_ipw =
        solve(working_ipw_engine_, reweighted, base_weights_, ipw_censored_,
              working_ipw_start_, point_.working_ipw, ok);
    rep.working_full =
        solve(working_full_engine_, multipliers, unit_weights_, full_censored_,
              working_full_start_, point_.working_full, ok);
    rep.converged = ok;
    return rep;
  }

 private:
  Eigen::VectorXd solve(const LikelihoodEngine& engine,
                        const std::vector<double>& weights,
                        const std::vector<double>& base, double censored,
                        const Eigen::VectorXd& start, const FitResult& base_fit,
                        bool& ok) const {
    // Identity multipliers reproduce the base weights bitwise; the fit is
    // deterministic, so its result can be reused without re-optimizing.
    if (std::equal(weights.begin(), weights.end(), base.begin()))
      return base_fit.regression;
    try {
      FitResult r = fit_with_engine(engine, weights, cfg_, censored, &start);
      if (!r.converged) ok = false;
      return r.regression;
    } catch (const FitError&) {
      ok = false;
      return Eigen::VectorXd::Zero(
          static_cast<Eigen::Index>(engine.regression_dim()));
    }
  }

  std::vector<double> base_weights_;
  std::vector<double> unit_weights_;
  LikelihoodEngine main_engine_;
  LikelihoodEngine working_ipw_engine_;
  LikelihoodEngine working_full_engine_;
  FitConfig cfg_;
  double ipw_censored_;
  double full_censored_;
  Eigen::VectorXd main_start_;
  Eigen::VectorXd working_ipw_start_;
  Eigen::VectorXd working_full_start_;
  PointFits point_;
};

}  // namespace detail

/**
 * Refits all three models once under shared multipliers u. Exposed mostly
 * for tests; run_bootstrap amortizes the engine construction across
 * replicates.
 */
inline ReplicateFits bootstrap_replicate(const CohortDataset& data,
                                         const Eigen::VectorXd& u,
                                         const SieveConfig& sieve,
                                         const FitConfig& cfg,
                                         const PointFits& point) {
  detail::BootstrapRefitter refitter(data, sieve, std::nullopt, cfg, point);
  return refitter.refit(u);
}

struct BootstrapRun {
  std::vector<ReplicateFits> replicates;  // indexed by replicate, failures kept
  int failures = 0;
};

/**
 * Draws B multiplier vectors and refits. Replicate b's stream is keyed by
 * (seed, b), so results do not depend on how work lands on threads; failed
 * replicates stay in place, flagged, for the covariance step to skip.
 */
inline BootstrapRun run_bootstrap(
    const CohortDataset& data, const SieveConfig& sieve, const FitConfig& cfg,
    const BootstrapConfig& bootcfg, const PointFits& point, int threads = 0,
    const std::optional<SieveConfig>& working_sieve = std::nullopt) {
  if (bootcfg.replicates < 2)
    throw DomainError("bootstrap needs at least 2 replicates");
  detail::BootstrapRefitter refitter(data, sieve, working_sieve, cfg, point);
  BootstrapRun run;
  run.replicates.resize(static_cast<std::size_t>(bootcfg.replicates));
  parallel_for_indexed(
      run.replicates.size(), resolve_thread_count(threads), [&](std::size_t b) {
        RngStream stream(bootcfg.seed,
                         {detail::kTagBootstrapDraw, static_cast<std::uint64_t>(b)});
        const Eigen::VectorXd u = draw_bootstrap_weights(refitter.size(), stream);
        run.replicates[b] = refitter.refit(u);
      });
  for (const auto& rep : run.replicates) run.failures += !rep.converged;
  return run;
}

/** Bootstrap estimate of the joint covariance, partitioned into blocks. */
struct CovarianceBlocks {
  Eigen::MatrixXd sigma11;  // cov of sqrt(n) * main estimate
  Eigen::MatrixXd sigma12;  // cross block
  Eigen::MatrixXd sigma22;  // cov of sqrt(n) * working-model contrast
  int n_replicates_used = 0;
};

/**
 * Sample covariance (denominator used - 1, centered at replicate means) of
 * the stacked vector [sqrt(n) main_b, sqrt(n) (working_ipw_b - working_full_b)].
 */
inline CovarianceBlocks estimate_sigma(std::span<const ReplicateFits> replicates,
                                       std::size_t cohort_size) {
  std::vector<const ReplicateFits*> used;
  for (const auto& rep : replicates)
    if (rep.converged) used.push_back(&rep);
  if (used.size() < 2)
    throw FitError("bootstrap collapsed: fewer than 2 usable replicates");

  const double root_n = std::sqrt(static_cast<double>(cohort_size));
  const Eigen::Index d = used.front()->main.size();
  const Eigen::Index dw = used.front()->working_ipw.size();
  const Eigen::Index total = d + dw;

  Eigen::VectorXd mean = Eigen::VectorXd::Zero(total);
  std::vector<Eigen::VectorXd> stacked;
  stacked.reserve(used.size());
  for (const ReplicateFits* rep : used) {
    Eigen::VectorXd v(total);
    v.head(d) = root_n * rep->main;
    v.tail(dw) = root_n * (rep->working_ipw - rep->working_full);
    mean += v;
    stacked.push_back(std::move(v));
  }
  mean /= static_cast<double>(used.size());

  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(total, total);
  for (const Eigen::VectorXd& v : stacked)
    cov.selfadjointView<Eigen::Lower>().rankUpdate(v - mean);
  cov = Eigen::MatrixXd(cov.selfadjointView<Eigen::Lower>()) /
        static_cast<double>(used.size() - 1);

  CovarianceBlocks blocks;
  blocks.sigma11 = cov.topLeftCorner(d, d);
  blocks.sigma12 = cov.topRightCorner(d, dw);
  blocks.sigma22 = cov.bottomRightCorner(dw, dw);
  blocks.n_replicates_used = static_cast<int>(used.size());
  return blocks;
}

// Moore-Penrose inverse of a symmetric PSD matrix, dropping eigenvalues
// below rel_cutoff times the largest.
inline Eigen::MatrixXd pseudo_inverse_psd(const Eigen::MatrixXd& m,
                                          double rel_cutoff = 1e-10) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  const Eigen::VectorXd& values = eig.eigenvalues();
  const double top = values.maxCoeff();
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(values.size());
  if (top > 0.0) {
    const double cutoff = rel_cutoff * top;
    for (Eigen::Index i = 0; i < values.size(); ++i)
      if (values[i] > cutoff) inv[i] = 1.0 / values[i];
  }
  return eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
}

struct UpdateResult {
  Eigen::VectorXd updated;      // combined regression estimate
  Eigen::MatrixXd covariance;   // asymptotic covariance of sqrt(n)(updated - truth)
  Eigen::VectorXd se_original;  // from sigma11 / n
  Eigen::VectorXd se_updated;   // from covariance / n
  Eigen::VectorXd gain;         // per-coordinate variance ratio original/updated
  bool fallback = false;        // sigma22 numerically zero; update skipped
};

/**
 * Combines the point fits: updated = main - S12 S22^+ (working_ipw -
 * working_full), with covariance S11 - S12 S22^+ S21. A numerically zero
 * S22 (all working refits identical, e.g. full sampling) falls back to the
 * plain weighted estimator.
 */
inline UpdateResult update_estimate(const Eigen::VectorXd& main_estimate,
                                    const Eigen::VectorXd& working_ipw_estimate,
                                    const Eigen::VectorXd& working_full_estimate,
                                    const CovarianceBlocks& blocks,
                                    std::size_t cohort_size) {
  const Eigen::Index d = main_estimate.size();
  const Eigen::Index dw = working_ipw_estimate.size();
  if (blocks.sigma11.rows() != d || blocks.sigma12.rows() != d ||
      blocks.sigma12.cols() != dw || blocks.sigma22.rows() != dw ||
      working_full_estimate.size() != dw)
    throw DomainError("covariance blocks do not match the estimate dimensions");

  UpdateResult out;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(blocks.sigma22);
  if (!(eig.eigenvalues().maxCoeff() > 0.0)) {
    out.fallback = true;
    out.updated = main_estimate;
    out.covariance = blocks.sigma11;
  } else {
    const Eigen::MatrixXd mixing = blocks.sigma12 * pseudo_inverse_psd(blocks.sigma22);
    out.updated = main_estimate -
                  mixing * (working_ipw_estimate - working_full_estimate);
    Eigen::MatrixXd cov = blocks.sigma11 - mixing * blocks.sigma12.transpose();
    out.covariance = 0.5 * (cov + cov.transpose());
  }

  const double n = static_cast<double>(cohort_size);
  out.se_original.resize(d);
  out.se_updated.resize(d);
  out.gain.resize(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    const double v0 = std::max(blocks.sigma11(j, j), 0.0);
    const double v1 = std::max(out.covariance(j, j), 0.0);
    out.se_original[j] = std::sqrt(v0 / n);
    out.se_updated[j] = std::sqrt(v1 / n);
    out.gain[j] = v1 > 0.0 ? v0 / v1 : std::numeric_limits<double>::infinity();
  }
  return out;
}

}  // namespace casecohort
