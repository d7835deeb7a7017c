#pragma once

// Shared synthetic-data builders for the test binaries.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "casecohort/bernstein.hpp"
#include "casecohort/data.hpp"
#include "casecohort/rng.hpp"

namespace testsupport {

// Bracketing interval of t on a fully attended, fixed exam grid.
inline std::pair<double, double> bracket_on_grid(double t,
                                                 const std::vector<double>& exams) {
  std::vector<int> flags(exams.size() + 1, 0);
  std::size_t gap = exams.size();
  for (std::size_t k = 0; k < exams.size(); ++k) {
    if (t <= exams[k]) {
      gap = k;
      break;
    }
  }
  flags[gap] = 1;
  return casecohort::reduce_exam_history(exams, flags);
}

/**
 * Cohort drawn from a proportional-hazards model whose baseline cumulative
 * hazard is exactly the Bernstein polynomial `phi` on `config`'s window.
 * Exams sit on a fully attended grid spanning the window, so every finite
 * endpoint is admissible for the sieve; all subjects are sampled and carry
 * one expensive covariate.
 */
inline casecohort::CohortDataset bernstein_truth_cohort(
    std::size_t n, double beta, const casecohort::MonotoneCoefficients& phi,
    const casecohort::SieveConfig& config, std::uint64_t seed) {
  using namespace casecohort;
  std::vector<double> exams;
  constexpr int kExams = 7;
  for (int k = 0; k < kExams; ++k)
    exams.push_back(config.lower +
                    (config.upper - config.lower) * k / (kExams - 1.0));
  exams.back() = config.upper;

  std::vector<double> exam_cumhaz;
  for (double u : exams) exam_cumhaz.push_back(cumhaz_eval(phi, u, config));

  CohortDataset data;
  data.design = SamplingDesign(1.0, 1.0);
  data.expensive_names = {"x1"};
  RngStream stream(seed, {101});
  for (std::size_t i = 0; i < n; ++i) {
    const double x = stream.normal();
    const double target = stream.exponential() * std::exp(-beta * x);
    std::vector<int> flags(exams.size() + 1, 0);
    std::size_t gap = exams.size();
    for (std::size_t k = 0; k < exams.size(); ++k) {
      if (exam_cumhaz[k] >= target) {
        gap = k;
        break;
      }
    }
    flags[gap] = 1;
    IntervalObservation obs;
    obs.id = "s" + std::to_string(i + 1);
    const auto [left, right] = reduce_exam_history(exams, flags);
    obs.left = left;
    obs.right = right;
    obs.in_subcohort = true;
    obs.sampled = true;
    obs.expensive = std::vector<double>{x};
    data.subjects.push_back(std::move(obs));
  }
  return data;
}

}  // namespace testsupport
