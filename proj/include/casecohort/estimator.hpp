#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "casecohort/likelihood.hpp"
#include "casecohort/rng.hpp"

namespace casecohort {

struct FitConfig {
  int max_iterations = 500;
  double gradient_tolerance = 1e-7;     // max-norm of the gradient
  double relative_f_tolerance = 1e-10;  // on two successive accepted steps
  int restarts = 1;
  std::uint64_t restart_seed = 0;       // jitter stream for restarts > 1
  bool check_rank = true;
  bool optimize_sieve = true;  // false freezes the hazard coefficients
};

struct FitResult {
  Eigen::VectorXd regression;
  MonotoneCoefficients cumhaz_coefficients;
  UnconstrainedCoefficients log_increments;
  double loglik = -std::numeric_limits<double>::infinity();
  bool converged = false;
  int iterations = 0;
  double gradient_norm = std::numeric_limits<double>::infinity();
};

namespace detail {

inline constexpr std::uint64_t kTagRestart = 4;

struct MinimizeOutcome {
  Eigen::VectorXd x;
  double f = std::numeric_limits<double>::infinity();
  double gradient_norm = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
};

// BFGS with backtracking Armijo line search. `eval(x, grad_or_null)`
// returns the objective; +inf trial values are backed off from. Convergence
// is gradient max-norm below tolerance or a relative objective change below
// relative_f_tolerance on two successive accepted steps.
template <class ValueGrad>
MinimizeOutcome minimize_bfgs(ValueGrad&& eval, Eigen::VectorXd x,
                              const FitConfig& cfg) {
  const Eigen::Index n = x.size();
  MinimizeOutcome out;
  Eigen::VectorXd g(n);
  double f = eval(x, &g);
  if (!std::isfinite(f))
    throw FitError("objective is not finite at the initial point");

  Eigen::MatrixXd hessian_inv =
      Eigen::MatrixXd::Identity(n, n) / std::max(1.0, g.norm());
  bool rescale_pending = true;
  int flat_steps = 0;
  int iter = 0;
  for (; iter < cfg.max_iterations; ++iter) {
    if (g.lpNorm<Eigen::Infinity>() <= cfg.gradient_tolerance) {
      out.converged = true;
      break;
    }
    Eigen::VectorXd direction = -hessian_inv * g;
    double slope = g.dot(direction);
    if (!(slope < 0.0)) {
      // Curvature information went bad; restart from scaled steepest descent.
      hessian_inv = Eigen::MatrixXd::Identity(n, n) / std::max(1.0, g.norm());
      direction = -hessian_inv * g;
      slope = g.dot(direction);
      rescale_pending = true;
    }

    double step = 1.0;
    double f_new = std::numeric_limits<double>::infinity();
    Eigen::VectorXd x_new, g_new(n);
    bool have_gradient = false, accepted = false;
    for (int trial = 0; trial < 60; ++trial) {
      x_new = x + step * direction;
      have_gradient = trial == 0;  // full steps dominate; fuse their gradient
      f_new = have_gradient ? eval(x_new, &g_new) : eval(x_new, nullptr);
      if (std::isfinite(f_new) && f_new <= f + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    if (!have_gradient) {
      const double check = eval(x_new, &g_new);
      (void)check;
    }

    const Eigen::VectorXd s = x_new - x;
    const Eigen::VectorXd y = g_new - g;
    const double sy = s.dot(y);
    if (rescale_pending && sy > 0.0) {
      hessian_inv =
          Eigen::MatrixXd::Identity(n, n) * (sy / std::max(y.squaredNorm(), 1e-300));
      rescale_pending = false;
    }
    if (sy > 1e-10 * s.norm() * y.norm()) {
      const double rho = 1.0 / sy;
      const Eigen::VectorXd hy = hessian_inv * y;
      hessian_inv += rho * ((1.0 + rho * y.dot(hy)) * (s * s.transpose())) -
                     rho * (hy * s.transpose() + s * hy.transpose());
    }

    const double rel_change =
        std::abs(f - f_new) / std::max({1.0, std::abs(f), std::abs(f_new)});
    flat_steps = rel_change <= cfg.relative_f_tolerance ? flat_steps + 1 : 0;
    x = std::move(x_new);
    f = f_new;
    g = g_new;
    if (flat_steps >= 2) {
      out.converged = true;
      ++iter;
      break;
    }
  }
  out.x = std::move(x);
  out.f = f;
  out.gradient_norm = g.lpNorm<Eigen::Infinity>();
  out.iterations = iter;
  if (g.lpNorm<Eigen::Infinity>() <= cfg.gradient_tolerance) out.converged = true;
  return out;
}

}  // namespace detail

// Starting point: regression at zero, hazard coefficients rising linearly
// to the scale implied by the censoring fraction of the usable rows.
inline Eigen::VectorXd default_initial_point(const LikelihoodEngine& engine,
                                             double censored_fraction) {
  const double frac = std::clamp(censored_fraction, 1e-3, 1.0);
  const double level = std::max(0.1, -std::log(frac));
  const int m = engine.sieve().degree;
  MonotoneCoefficients phi;
  phi.phi.resize(static_cast<std::size_t>(m) + 1);
  for (int j = 0; j <= m; ++j)
    phi.phi[static_cast<std::size_t>(j)] =
        level * (0.1 + 0.9 * static_cast<double>(j) / static_cast<double>(m));
  CoxParams params;
  params.regression = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(engine.regression_dim()));
  params.log_increments = from_monotone(phi);
  return engine.pack(params);
}

/**
 * Maximizes the weighted log-likelihood over (regression, log-increments)
 * for a prebuilt engine. `initial` may seed the optimizer (bootstrap refits
 * warm-start from the base optimum); `censored_fraction` feeds the default
 * start when `initial` is absent.
 */
inline FitResult fit_with_engine(const LikelihoodEngine& engine,
                                 std::span<const double> weights,
                                 const FitConfig& cfg,
                                 double censored_fraction = 0.5,
                                 const Eigen::VectorXd* initial = nullptr) {
  const Eigen::Index d = static_cast<Eigen::Index>(engine.regression_dim());
  const Eigen::Index total = static_cast<Eigen::Index>(engine.param_dim());

  std::vector<Eigen::Index> free_coords;
  for (Eigen::Index i = 0; i < total; ++i)
    if (cfg.optimize_sieve || i < d) free_coords.push_back(i);

  Eigen::VectorXd base =
      initial ? *initial : default_initial_point(engine, censored_fraction);
  if (base.size() != total) throw DomainError("initial point has wrong length");

  Eigen::VectorXd full = base;
  auto eval_free = [&](const Eigen::VectorXd& xf, Eigen::VectorXd* grad) {
    for (std::size_t k = 0; k < free_coords.size(); ++k)
      full[free_coords[k]] = xf[static_cast<Eigen::Index>(k)];
    if (!grad) return -engine.value(full, weights);
    Eigen::VectorXd g_full;
    const double v = engine.value_and_gradient(full, weights, g_full);
    grad->resize(static_cast<Eigen::Index>(free_coords.size()));
    for (std::size_t k = 0; k < free_coords.size(); ++k)
      (*grad)[static_cast<Eigen::Index>(k)] = -g_full[free_coords[k]];
    return -v;
  };

  std::optional<detail::MinimizeOutcome> best;
  const int runs = std::max(1, cfg.restarts);
  for (int r = 0; r < runs; ++r) {
    Eigen::VectorXd start = base;
    if (r > 0) {
      RngStream jitter(cfg.restart_seed, {detail::kTagRestart,
                                          static_cast<std::uint64_t>(r)});
      for (Eigen::Index i = d; i < total; ++i) start[i] += 0.5 * jitter.normal();
    }
    Eigen::VectorXd start_free(static_cast<Eigen::Index>(free_coords.size()));
    for (std::size_t k = 0; k < free_coords.size(); ++k)
      start_free[static_cast<Eigen::Index>(k)] = start[free_coords[k]];
    detail::MinimizeOutcome run = detail::minimize_bfgs(eval_free, start_free, cfg);
    if (!best || run.f < best->f) best = std::move(run);
  }

  for (std::size_t k = 0; k < free_coords.size(); ++k)
    full[free_coords[k]] = best->x[static_cast<Eigen::Index>(k)];

  FitResult result;
  CoxParams params = engine.unpack(full);
  result.regression = std::move(params.regression);
  result.log_increments = std::move(params.log_increments);
  result.cumhaz_coefficients = to_monotone(result.log_increments);
  result.loglik = -best->f;
  result.converged = best->converged;
  result.iterations = best->iterations;
  result.gradient_norm = best->gradient_norm;

  if (std::isfinite(engine.sieve().coefficient_bound)) {
    MonotoneCoefficients capped = result.cumhaz_coefficients;
    apply_coefficient_bound(capped, engine.sieve());
    if (capped.phi != result.cumhaz_coefficients.phi) {
      result.cumhaz_coefficients = capped;
      result.log_increments = from_monotone(capped);
      result.loglik = engine.value(engine.pack({result.regression,
                                                result.log_increments}),
                                   weights);
    }
  }
  return result;
}

namespace detail {

inline double censored_fraction(const CohortDataset& data,
                                std::span<const double> weights) {
  std::size_t used = 0, censored = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (weights[i] == 0.0) continue;
    ++used;
    censored += !data.subjects[i].is_case();
  }
  return used ? static_cast<double>(censored) / static_cast<double>(used) : 0.5;
}

inline void require_fittable(const CohortDataset& data,
                             std::span<const double> weights) {
  bool has_case = false, has_censored = false;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (weights[i] == 0.0) continue;
    (data.subjects[i].is_case() ? has_case : has_censored) = true;
  }
  if (!has_case)
    throw FitError("no positive-weight failures: the model is not fittable");
  if (!has_censored)
    throw FitError("no positive-weight censored subjects: the model is not fittable");
}

inline void require_full_rank(const CohortDataset& data,
                              std::span<const double> weights,
                              CovariateSelector sel) {
  const std::size_t dim = covariate_dimension(data, sel);
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(dim + 1, dim + 1);
  Eigen::VectorXd v(static_cast<Eigen::Index>(dim) + 1);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (weights[i] == 0.0) continue;
    v[0] = 1.0;
    v.tail(static_cast<Eigen::Index>(dim)) =
        selected_covariates(data.subjects[i], sel);
    gram.selfadjointView<Eigen::Lower>().rankUpdate(v);
  }
  const Eigen::MatrixXd full_gram = gram.selfadjointView<Eigen::Lower>();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(full_gram);
  const double top = eig.eigenvalues().maxCoeff();
  if (!(top > 0.0) || eig.eigenvalues().minCoeff() <= 1e-9 * top)
    throw IdentifiabilityError(
        "covariates (with intercept) are collinear; model not identifiable");
}

}  // namespace detail

/**
 * Sieve maximum weighted likelihood fit. Requires at least one
 * positive-weight failure and one positive-weight censored subject, and a
 * full-rank covariate design over the positive-weight rows.
 */
inline FitResult fit(const CohortDataset& data, std::span<const double> weights,
                     CovariateSelector sel, const SieveConfig& sieve,
                     const FitConfig& cfg = {}) {
  if (weights.size() != data.size())
    throw DomainError("weight vector length does not match the data");
  detail::require_fittable(data, weights);
  if (cfg.check_rank) detail::require_full_rank(data, weights, sel);
  LikelihoodEngine engine(data, sel, sieve, weights);
  return fit_with_engine(engine, weights, cfg,
                         detail::censored_fraction(data, weights));
}

// The inverse-probability-weighted fit on the phase-two covariates.
inline FitResult fit_main_ipw(const CohortDataset& data, const SieveConfig& sieve,
                              const FitConfig& cfg = {}) {
  const std::vector<double> w = sampling_weights(data);
  return fit(data, w, CovariateSelector::kMain, sieve, cfg);
}

// The working-model fit under the same weights.
inline FitResult fit_working_ipw(const CohortDataset& data,
                                 const SieveConfig& sieve,
                                 const FitConfig& cfg = {}) {
  const std::vector<double> w = sampling_weights(data);
  return fit(data, w, working_selector(data), sieve, cfg);
}

// The working-model fit over the whole cohort with unit weights.
inline FitResult fit_working_full(const CohortDataset& data,
                                  const SieveConfig& sieve,
                                  const FitConfig& cfg = {}) {
  const std::vector<double> w(data.size(), 1.0);
  return fit(data, w, working_selector(data), sieve, cfg);
}

}  // namespace casecohort
