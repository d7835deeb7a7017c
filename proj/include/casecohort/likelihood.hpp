#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "casecohort/bernstein.hpp"
#include "casecohort/data.hpp"
#include "casecohort/errors.hpp"

namespace casecohort {

// Which covariate blocks feed the linear predictor. kMain uses the
// phase-two block and is only evaluable on sampled rows; the working
// selectors use full-cohort columns and never touch phase-two data.
enum class CovariateSelector { kMain, kWorkingAux, kWorkingCheap };

inline std::size_t covariate_dimension(const CohortDataset& data,
                                       CovariateSelector sel) {
  std::size_t d = 0;
  switch (sel) {
    case CovariateSelector::kMain:
      d = data.expensive_names.size() + data.cheap_names.size();
      break;
    case CovariateSelector::kWorkingAux:
      if (!data.has_aux())
        throw DomainError("working model requested auxiliary covariates but none exist");
      d = data.aux_names.size() + data.cheap_names.size();
      break;
    case CovariateSelector::kWorkingCheap:
      d = data.cheap_names.size();
      break;
  }
  if (d == 0) throw DomainError("selected covariate blocks are empty");
  return d;
}

inline std::vector<std::string> covariate_labels(const CohortDataset& data,
                                                 CovariateSelector sel) {
  std::vector<std::string> out;
  if (sel == CovariateSelector::kMain)
    out = data.expensive_names;
  else if (sel == CovariateSelector::kWorkingAux)
    out = data.aux_names;
  out.insert(out.end(), data.cheap_names.begin(), data.cheap_names.end());
  return out;
}

// Auxiliary covariates if the study collected them, else the cheap block.
inline CovariateSelector working_selector(const CohortDataset& data) {
  if (data.has_aux()) return CovariateSelector::kWorkingAux;
  if (data.has_cheap()) return CovariateSelector::kWorkingCheap;
  throw DomainError("no full-cohort covariates available for a working model");
}

// Builds the linear-predictor covariate vector for one subject. Reading the
// phase-two block of an unsampled subject is a hard error: correctness of
// the weighted likelihood depends on never needing those cells.
inline Eigen::VectorXd selected_covariates(const IntervalObservation& obs,
                                           CovariateSelector sel) {
  const std::vector<double>* head = nullptr;
  if (sel == CovariateSelector::kMain) {
    if (!obs.expensive)
      throw DomainError("phase-two covariates requested for unsampled subject '" +
                        obs.id + "'");
    head = &*obs.expensive;
  } else if (sel == CovariateSelector::kWorkingAux) {
    head = &obs.aux;
  }
  const std::size_t nh = head ? head->size() : 0;
  Eigen::VectorXd cov(nh + obs.cheap.size());
  for (std::size_t j = 0; j < nh; ++j) cov[static_cast<Eigen::Index>(j)] = (*head)[j];
  for (std::size_t j = 0; j < obs.cheap.size(); ++j)
    cov[static_cast<Eigen::Index>(nh + j)] = obs.cheap[j];
  return cov;
}

/**
 * Model parameters: the regression vector (phase-two block stacked over the
 * cheap block, matching selected_covariates order) and the free coordinates
 * of the cumulative-hazard coefficients.
 */
struct CoxParams {
  Eigen::VectorXd regression;
  UnconstrainedCoefficients log_increments;
};

namespace detail {

// log(1 - e^{-d}) for d > 0, switching forms at ln 2 to keep full precision
// at both extremes.
inline double log1mexp(double d) {
  if (d <= 0.6931471805599453) return std::log(-std::expm1(-d));
  return std::log1p(-std::exp(-d));
}

}  // namespace detail

/**
 * log(e^{-a} - e^{-b}) for 0 <= a < b <= +inf, the probability mass a
 * survival function assigns to an interval, evaluated without cancellation.
 * b = +inf gives -a.
 */
inline double log_diff_exp(double a, double b) {
  if (!(a >= 0.0)) throw DomainError("log_diff_exp: first argument must be >= 0");
  if (!(b > a)) throw DomainError("log_diff_exp: arguments must satisfy a < b");
  if (std::isinf(b)) return -a;
  return -a + detail::log1mexp(b - a);
}

/**
 * Log-probability that the failure time falls in the subject's interval
 * under the represented model: log[exp{-L(left) e^eta} - exp{-L(right) e^eta}].
 * A zero-probability interval (hazard flat across it) yields -inf and sets
 * *degenerate instead of throwing, so optimizers can back off.
 */
inline double subject_loglik(const CoxParams& params,
                             const IntervalObservation& obs,
                             CovariateSelector sel, const SieveConfig& config,
                             bool* degenerate = nullptr) {
  if (degenerate) *degenerate = false;
  const Eigen::VectorXd cov = selected_covariates(obs, sel);
  if (cov.size() != params.regression.size())
    throw DomainError("regression parameter length does not match covariates");
  const double eta = params.regression.dot(cov);
  const MonotoneCoefficients phi = to_monotone(params.log_increments);
  const double scale = std::exp(eta);
  const double a = cumhaz_eval(phi, obs.left, config) * scale;
  if (!obs.is_case()) return -a;
  const double b = cumhaz_eval(phi, obs.right, config) * scale;
  if (!(b > a)) {
    if (degenerate) *degenerate = true;
    return -std::numeric_limits<double>::infinity();
  }
  return -a + detail::log1mexp(b - a);
}

/**
 * Caches everything about the rows that does not change across parameter
 * values: selected covariates and the Bernstein tail sums at both interval
 * endpoints. Rows whose support weight is zero are dropped at construction,
 * so their covariates are never read; later evaluations may vary the
 * weights (bootstrap multipliers) but must keep those rows at zero.
 *
 * The packed parameter layout everywhere is [regression | log_increments].
 */
class LikelihoodEngine {
 public:
  LikelihoodEngine(const CohortDataset& data, CovariateSelector sel,
                   const SieveConfig& sieve, std::span<const double> support)
      : sieve_(sieve),
        regression_dim_(covariate_dimension(data, sel)),
        total_rows_(data.size()) {
    if (support.size() != data.size())
      throw DomainError("support weight vector length does not match the data");
    rows_.reserve(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (support[i] == 0.0) continue;
      if (support[i] < 0.0)
        throw DomainError("negative weight for subject '" + data.subjects[i].id + "'");
      const IntervalObservation& obs = data.subjects[i];
      Row row;
      row.index = i;
      row.covariates = selected_covariates(obs, sel);
      if (row.covariates.size() != static_cast<Eigen::Index>(regression_dim_))
        throw DataFormatError("subject '" + obs.id + "' has inconsistent covariate count");
      row.is_case = obs.is_case();
      row.left_tails = endpoint_tails(obs.left);
      if (row.is_case) row.right_tails = endpoint_tails(obs.right);
      rows_.push_back(std::move(row));
    }
  }

  std::size_t regression_dim() const { return regression_dim_; }
  std::size_t sieve_dim() const {
    return static_cast<std::size_t>(sieve_.degree) + 1;
  }
  std::size_t param_dim() const { return regression_dim_ + sieve_dim(); }
  std::size_t active_rows() const { return rows_.size(); }
  const SieveConfig& sieve() const { return sieve_; }

  Eigen::VectorXd pack(const CoxParams& params) const {
    if (params.log_increments.psi.size() != sieve_dim())
      throw DomainError("log-increment count does not match the sieve degree");
    Eigen::VectorXd packed(param_dim());
    packed.head(params.regression.size()) = params.regression;
    for (std::size_t l = 0; l < sieve_dim(); ++l)
      packed[static_cast<Eigen::Index>(regression_dim_ + l)] =
          params.log_increments.psi[l];
    return packed;
  }

  CoxParams unpack(const Eigen::VectorXd& packed) const {
    CoxParams p;
    p.regression = packed.head(static_cast<Eigen::Index>(regression_dim_));
    p.log_increments.psi.assign(packed.data() + regression_dim_,
                                packed.data() + param_dim());
    return p;
  }

  // Weighted log-likelihood. Zero-probability rows force -inf; their
  // original indices are appended to *degenerate_rows when provided.
  double value(const Eigen::VectorXd& packed, std::span<const double> weights,
               std::vector<std::size_t>* degenerate_rows = nullptr) const {
    return evaluate(packed, weights, nullptr, degenerate_rows);
  }

  // Value plus gradient in the packed layout. The gradient is only
  // meaningful when the returned value is finite.
  double value_and_gradient(const Eigen::VectorXd& packed,
                            std::span<const double> weights,
                            Eigen::VectorXd& gradient,
                            std::vector<std::size_t>* degenerate_rows = nullptr) const {
    gradient.setZero(static_cast<Eigen::Index>(param_dim()));
    return evaluate(packed, weights, &gradient, degenerate_rows);
  }

 private:
  struct Row {
    std::size_t index = 0;
    Eigen::VectorXd covariates;
    Eigen::VectorXd left_tails;   // empty when left == 0
    Eigen::VectorXd right_tails;  // empty when right censored
    bool is_case = false;
  };

  Eigen::VectorXd endpoint_tails(double t) const {
    if (t == 0.0) return Eigen::VectorXd();
    const std::vector<double> tails = basis_tail_sums(t, sieve_);
    return Eigen::Map<const Eigen::VectorXd>(tails.data(),
                                             static_cast<Eigen::Index>(tails.size()));
  }

  double evaluate(const Eigen::VectorXd& packed, std::span<const double> weights,
                  Eigen::VectorXd* gradient,
                  std::vector<std::size_t>* degenerate_rows) const {
    if (packed.size() != static_cast<Eigen::Index>(param_dim()))
      throw DomainError("packed parameter length does not match the engine");
    if (weights.size() != total_rows_)
      throw DomainError("weight vector length does not match the data");
    const Eigen::Index d = static_cast<Eigen::Index>(regression_dim_);
    const Eigen::Index k = static_cast<Eigen::Index>(sieve_dim());
    const auto vartheta = packed.head(d);
    Eigen::VectorXd exp_psi(k), dexp_psi(k);
    for (Eigen::Index l = 0; l < k; ++l) {
      exp_psi[l] = capped_exp(packed[d + l]);
      dexp_psi[l] = capped_exp_derivative(packed[d + l]);
    }

    double total = 0.0;
    bool any_degenerate = false;
    for (const Row& row : rows_) {
      const double w = weights[row.index];
      if (w == 0.0) continue;
      const double eta = row.covariates.dot(vartheta);
      const double scale = std::exp(eta);
      const double lam_left =
          row.left_tails.size() ? exp_psi.dot(row.left_tails) : 0.0;
      const double a = lam_left * scale;
      if (!row.is_case) {
        total -= w * a;
        if (gradient) {
          gradient->head(d) -= (w * a) * row.covariates;
          if (row.left_tails.size())
            gradient->tail(k) -=
                (w * scale) * dexp_psi.cwiseProduct(row.left_tails);
        }
        continue;
      }
      const double lam_right = exp_psi.dot(row.right_tails);
      const double span = (lam_right - lam_left) * scale;
      if (!(span > 0.0)) {
        any_degenerate = true;
        if (degenerate_rows) degenerate_rows->push_back(row.index);
        continue;
      }
      total += w * (-a + detail::log1mexp(span));
      if (gradient) {
        const double b = lam_right * scale;
        const double c_left = 1.0 / (-std::expm1(-span));   // 1/(1 - e^{-span})
        const double c_right = 1.0 / std::expm1(span);      // 1/(e^{span} - 1)
        gradient->head(d) += (w * (-c_left * a + c_right * b)) * row.covariates;
        if (row.left_tails.size())
          gradient->tail(k) -=
              (w * scale * c_left) * dexp_psi.cwiseProduct(row.left_tails);
        gradient->tail(k) +=
            (w * scale * c_right) * dexp_psi.cwiseProduct(row.right_tails);
      }
    }
    if (any_degenerate) return -std::numeric_limits<double>::infinity();
    return total;
  }

  SieveConfig sieve_;
  std::size_t regression_dim_;
  std::size_t total_rows_;
  std::vector<Row> rows_;
};

/**
 * Sum of weighted subject log-likelihoods; -inf with the offending rows in
 * *degenerate_rows when any evaluated interval has zero probability.
 */
inline double weighted_loglik(const CoxParams& params, const CohortDataset& data,
                              std::span<const double> weights,
                              CovariateSelector sel, const SieveConfig& config,
                              std::vector<std::size_t>* degenerate_rows = nullptr) {
  LikelihoodEngine engine(data, sel, config, weights);
  return engine.value(engine.pack(params), weights, degenerate_rows);
}

// Analytic gradient with respect to [regression | log_increments]; throws
// FitError when the log-likelihood is not finite at this point.
inline Eigen::VectorXd weighted_loglik_gradient(
    const CoxParams& params, const CohortDataset& data,
    std::span<const double> weights, CovariateSelector sel,
    const SieveConfig& config) {
  LikelihoodEngine engine(data, sel, config, weights);
  Eigen::VectorXd grad;
  const double value =
      engine.value_and_gradient(engine.pack(params), weights, grad);
  if (!std::isfinite(value))
    throw FitError("gradient unavailable: log-likelihood is not finite here");
  return grad;
}

// Sieve window from the data: the span of all finite positive interval
// endpoints, which covers every endpoint the likelihood will evaluate.
inline SieveConfig sieve_from_data(
    const CohortDataset& data, int degree = default_degree(),
    double coefficient_bound = std::numeric_limits<double>::infinity()) {
  double lo = kInf, hi = 0.0;
  for (const auto& s : data.subjects) {
    if (s.left > 0.0) {
      lo = std::min(lo, s.left);
      hi = std::max(hi, s.left);
    }
    if (std::isfinite(s.right)) {
      lo = std::min(lo, s.right);
      hi = std::max(hi, s.right);
    }
  }
  if (!std::isfinite(lo) || !(hi > lo))
    throw DomainError("data yield no usable sieve window (need two distinct finite endpoints)");
  return SieveConfig(degree, lo, hi, coefficient_bound);
}

}  // namespace casecohort
