#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "casecohort/errors.hpp"

namespace casecohort {

// Arguments to exp() are capped here so the cumulative-sum
// reparameterization below cannot overflow; the derivative of the capped
// map is 0 past the cap, keeping value and gradient consistent.
inline constexpr double kExpCap = 50.0;
inline double capped_exp(double v) { return std::exp(std::min(v, kExpCap)); }
inline double capped_exp_derivative(double v) {
  return v < kExpCap ? std::exp(v) : 0.0;
}

// Increments smaller than this are floored before taking logs when
// inverting the reparameterization.
inline constexpr double kIncrementFloor = 1e-10;

/**
 * Bernstein representation of the cumulative baseline hazard on
 * [lower, upper]: degree, support window, and an optional hard bound on the
 * largest coefficient (unenforced at +inf, which is the default).
 */
struct SieveConfig {
  int degree;
  double lower;
  double upper;
  double coefficient_bound;

  SieveConfig(int m, double sigma, double tau,
              double bound = std::numeric_limits<double>::infinity())
      : degree(m), lower(sigma), upper(tau), coefficient_bound(bound) {
    if (m < 1) throw DomainError("sieve degree must be at least 1");
    if (!(sigma > 0.0) || !std::isfinite(sigma))
      throw DomainError("sieve lower endpoint must be positive and finite");
    if (!(tau > sigma) || !std::isfinite(tau))
      throw DomainError("sieve upper endpoint must exceed the lower one");
    if (!(bound > 0.0)) throw DomainError("coefficient bound must be positive");
  }
};

inline int default_degree() { return 3; }

// Data-driven degree rule m = ceil(n^{1/4}).
inline int degree_for_cohort(std::size_t n) {
  if (n == 0) return 1;
  const double m = std::ceil(std::pow(static_cast<double>(n), 0.25));
  return std::max(1, static_cast<int>(m));
}

// Nondecreasing coefficients 0 <= phi_0 <= ... <= phi_m of the hazard
// representation.
struct MonotoneCoefficients {
  std::vector<double> phi;
};

// Free coordinates psi; phi_j = sum_{l<=j} exp(psi_l) recovers the
// monotone vector.
struct UnconstrainedCoefficients {
  std::vector<double> psi;
};

inline double binomial_coefficient(int m, int j) {
  double c = 1.0;
  for (int i = 1; i <= j; ++i)
    c = c * static_cast<double>(m - j + i) / static_cast<double>(i);
  return c;
}

namespace detail {

inline double unit_position(double t, const SieveConfig& config,
                            const char* who) {
  if (!(t >= config.lower) || !(t <= config.upper))
    throw DomainError(std::string(who) + ": time outside the sieve window");
  return (t - config.lower) / (config.upper - config.lower);
}

}  // namespace detail

// B_j(t) = C(m,j) s^j (1-s)^{m-j} with s the position of t in [lower, upper].
inline double basis_eval(double t, int j, const SieveConfig& config) {
  if (j < 0 || j > config.degree)
    throw DomainError("basis index outside 0..degree");
  const double s = detail::unit_position(t, config, "basis_eval");
  const int m = config.degree;
  return binomial_coefficient(m, j) * std::pow(s, j) * std::pow(1.0 - s, m - j);
}

// Suffix sums T_l(t) = sum_{j >= l} B_j(t), the quantity the gradient of
// the cumulative hazard factors through. Length degree + 1.
inline std::vector<double> basis_tail_sums(double t, const SieveConfig& config) {
  const double s = detail::unit_position(t, config, "basis_tail_sums");
  const int m = config.degree;
  std::vector<double> tails(static_cast<std::size_t>(m) + 1);
  double acc = 0.0;
  for (int j = m; j >= 0; --j) {
    acc += binomial_coefficient(m, j) * std::pow(s, j) * std::pow(1.0 - s, m - j);
    tails[static_cast<std::size_t>(j)] = acc;
  }
  return tails;
}

/**
 * Evaluates the represented cumulative hazard. t = 0 returns 0 exactly (the
 * hazard starts at zero); otherwise t must lie inside the sieve window.
 */
inline double cumhaz_eval(const MonotoneCoefficients& coef, double t,
                          const SieveConfig& config) {
  if (t == 0.0) return 0.0;
  if (coef.phi.size() != static_cast<std::size_t>(config.degree) + 1)
    throw DomainError("coefficient count does not match the sieve degree");
  const double s = detail::unit_position(t, config, "cumhaz_eval");
  const int m = config.degree;
  double acc = 0.0;
  for (int j = 0; j <= m; ++j)
    acc += coef.phi[static_cast<std::size_t>(j)] * binomial_coefficient(m, j) *
           std::pow(s, j) * std::pow(1.0 - s, m - j);
  return acc;
}

inline MonotoneCoefficients to_monotone(const UnconstrainedCoefficients& free) {
  MonotoneCoefficients out;
  out.phi.resize(free.psi.size());
  double acc = 0.0;
  for (std::size_t l = 0; l < free.psi.size(); ++l) {
    acc += capped_exp(free.psi[l]);
    out.phi[l] = acc;
  }
  return out;
}

// Inverse of to_monotone; ties and non-positive increments are floored at
// kIncrementFloor before the log.
inline UnconstrainedCoefficients from_monotone(const MonotoneCoefficients& coef) {
  UnconstrainedCoefficients out;
  out.psi.resize(coef.phi.size());
  double prev = 0.0;
  for (std::size_t l = 0; l < coef.phi.size(); ++l) {
    out.psi[l] = std::log(std::max(coef.phi[l] - prev, kIncrementFloor));
    prev = coef.phi[l];
  }
  return out;
}

// d cumhaz / d psi_l = exp(psi_l) * T_l(t), through the cumulative-sum map.
inline std::vector<double> cumhaz_gradient(const UnconstrainedCoefficients& free,
                                           double t, const SieveConfig& config) {
  if (free.psi.size() != static_cast<std::size_t>(config.degree) + 1)
    throw DomainError("coefficient count does not match the sieve degree");
  if (t == 0.0)
    return std::vector<double>(free.psi.size(), 0.0);
  const std::vector<double> tails = basis_tail_sums(t, config);
  std::vector<double> grad(free.psi.size());
  for (std::size_t l = 0; l < free.psi.size(); ++l)
    grad[l] = capped_exp_derivative(free.psi[l]) * tails[l];
  return grad;
}

// Rescales phi so the largest coefficient respects the configured bound.
inline void apply_coefficient_bound(MonotoneCoefficients& coef,
                                    const SieveConfig& config) {
  if (!std::isfinite(config.coefficient_bound) || coef.phi.empty()) return;
  const double top = coef.phi.back();
  if (top > config.coefficient_bound) {
    const double scale = config.coefficient_bound / top;
    for (double& p : coef.phi) p *= scale;
  }
}

}  // namespace casecohort
