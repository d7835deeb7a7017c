#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "casecohort/likelihood.hpp"
#include "casecohort/simulation.hpp"

using namespace casecohort;

namespace {

// One-exam case and one censored subject, both sampled; enough for engines.
CohortDataset two_subject_data() {
  CohortDataset data;
  data.design = SamplingDesign(1.0, 1.0);
  data.expensive_names = {"x1"};
  IntervalObservation a;
  a.id = "a";
  a.left = 1.0;
  a.right = 3.0;
  a.in_subcohort = a.sampled = true;
  a.expensive = std::vector<double>{0.7};
  IntervalObservation b;
  b.id = "b";
  b.left = 2.0;
  b.right = kInf;
  b.in_subcohort = b.sampled = true;
  b.expensive = std::vector<double>{-0.4};
  data.subjects = {a, b};
  return data;
}

Scenario small_scenario() {
  Scenario sc;
  sc.cohort_size = 50;
  sc.setup = CovariateSetup::kExpensiveAndCheap;
  sc.beta = 0.3;
  sc.gamma = 0.5;
  sc.subcohort_prob = 0.5;
  sc.end_of_study = 2.0;
  return sc;
}

}  // namespace

TEST_CASE("covariate selection dimensions and labels") {
  CohortDataset data;
  data.cheap_names = {"z1", "z2"};
  data.aux_names = {"x1"};
  data.expensive_names = {"x1"};
  CHECK(covariate_dimension(data, CovariateSelector::kMain) == 3);
  CHECK(covariate_dimension(data, CovariateSelector::kWorkingAux) == 3);
  CHECK(covariate_dimension(data, CovariateSelector::kWorkingCheap) == 2);
  CHECK(covariate_labels(data, CovariateSelector::kMain) ==
        std::vector<std::string>{"x1", "z1", "z2"});
  CHECK(covariate_labels(data, CovariateSelector::kWorkingCheap) ==
        std::vector<std::string>{"z1", "z2"});
  CHECK(working_selector(data) == CovariateSelector::kWorkingAux);

  CohortDataset no_aux = data;
  no_aux.aux_names.clear();
  CHECK(working_selector(no_aux) == CovariateSelector::kWorkingCheap);
  CHECK_THROWS_AS(covariate_dimension(no_aux, CovariateSelector::kWorkingAux),
                  DomainError);

  CohortDataset bare;
  bare.expensive_names = {"x1"};
  CHECK_THROWS_AS(working_selector(bare), DomainError);
  CHECK_THROWS_AS(covariate_dimension(bare, CovariateSelector::kWorkingCheap),
                  DomainError);
}

TEST_CASE("phase-two covariates of unsampled subjects are never readable") {
  IntervalObservation obs;
  obs.id = "u";
  obs.left = 1.0;
  obs.right = 2.0;
  obs.cheap = {0.5};
  obs.aux = {0.1};
  CHECK_THROWS_AS(selected_covariates(obs, CovariateSelector::kMain), DomainError);
  CHECK_NOTHROW(selected_covariates(obs, CovariateSelector::kWorkingAux));
  CHECK_NOTHROW(selected_covariates(obs, CovariateSelector::kWorkingCheap));
}

TEST_CASE("stable log of a survival-probability difference") {
  SECTION("infinite right end gives the survival term") {
    CHECK(log_diff_exp(0.5, kInf) == -0.5);
  }
  SECTION("finite bracket matches the high-precision value") {
    CHECK(log_diff_exp(0.5, 1.0) ==
          Catch::Approx(-1.43275212956718857).margin(1e-14));
  }
  SECTION("tiny bracket stays finite where the naive form underflows") {
    const double v = log_diff_exp(0.0, 1e-12);
    CHECK(std::isfinite(v));
    CHECK(v == Catch::Approx(-27.6310211159290482).margin(1e-12));
  }
  SECTION("argument validation") {
    CHECK_THROWS_AS(log_diff_exp(1.0, 1.0), DomainError);
    CHECK_THROWS_AS(log_diff_exp(2.0, 1.0), DomainError);
    CHECK_THROWS_AS(log_diff_exp(-0.1, 1.0), DomainError);
  }
}

TEST_CASE("subject log-likelihood at hand-computed hazards") {
  // Degree-1 representation on [1, 3] with values 0.5 and 1.0 at the ends.
  const SieveConfig config(1, 1.0, 3.0);
  CoxParams params;
  params.regression = Eigen::VectorXd::Zero(1);
  params.log_increments.psi = {std::log(0.5), std::log(0.5)};

  IntervalObservation obs;
  obs.id = "s";
  obs.in_subcohort = obs.sampled = true;
  obs.expensive = std::vector<double>{0.7};

  SECTION("right-censored term") {
    obs.left = 3.0;
    obs.right = kInf;
    CHECK(subject_loglik(params, obs, CovariateSelector::kMain, config) ==
          Catch::Approx(-1.0).margin(1e-14));
    obs.left = 1.0;
    CHECK(subject_loglik(params, obs, CovariateSelector::kMain, config) ==
          Catch::Approx(-0.5).margin(1e-14));
  }
  SECTION("interval term") {
    obs.left = 1.0;
    obs.right = 3.0;
    CHECK(subject_loglik(params, obs, CovariateSelector::kMain, config) ==
          Catch::Approx(-1.43275212956718857).margin(1e-12));
  }
  SECTION("left-censored term") {
    obs.left = 0.0;
    obs.right = 1.0;
    CHECK(subject_loglik(params, obs, CovariateSelector::kMain, config) ==
          Catch::Approx(-0.93275212956718857).margin(1e-12));
  }
  SECTION("a nonzero linear predictor scales the hazard") {
    obs.left = 1.0;
    obs.right = kInf;
    params.regression[0] = 0.9;
    const double eta = 0.9 * 0.7;
    CHECK(subject_loglik(params, obs, CovariateSelector::kMain, config) ==
          Catch::Approx(-0.5 * std::exp(eta)).epsilon(1e-13));
  }
  SECTION("log-probabilities are never positive") {
    RngStream stream(5, {9});
    for (int k = 0; k < 200; ++k) {
      CoxParams p;
      p.regression = Eigen::VectorXd::Constant(1, stream.uniform(-1.5, 1.5));
      p.log_increments.psi = {stream.uniform(-3.0, 1.0), stream.uniform(-3.0, 1.0)};
      IntervalObservation o = obs;
      const double a = stream.uniform(1.0, 3.0);
      const double b = stream.uniform(1.0, 3.0);
      o.left = std::min(a, b);
      o.right = stream.bernoulli(0.5) ? kInf : std::max(a, b);
      if (!(o.right > o.left)) o.right = kInf;
      CHECK(subject_loglik(p, o, CovariateSelector::kMain, config) <= 0.0);
    }
  }
}

TEST_CASE("flat hazard across a finite interval is degenerate, not thrown") {
  const SieveConfig config(1, 1.0, 3.0);
  CoxParams params;
  params.regression = Eigen::VectorXd::Zero(1);
  params.log_increments.psi = {0.0, -60.0};  // both endpoint values equal 1

  IntervalObservation obs;
  obs.id = "s";
  obs.left = 1.0;
  obs.right = 3.0;
  obs.in_subcohort = obs.sampled = true;
  obs.expensive = std::vector<double>{0.0};

  bool degenerate = false;
  const double v =
      subject_loglik(params, obs, CovariateSelector::kMain, config, &degenerate);
  CHECK(std::isinf(v));
  CHECK(v < 0.0);
  CHECK(degenerate);
}

TEST_CASE("weighted log-likelihood is linear in the weights") {
  const CohortDataset data = two_subject_data();
  const SieveConfig config(2, 1.0, 3.0);
  CoxParams params;
  params.regression = Eigen::VectorXd::Constant(1, 0.4);
  params.log_increments.psi = {-1.0, -0.7, -1.2};

  SECTION("all weights zero gives an empty sum") {
    const std::vector<double> w = {0.0, 0.0};
    CHECK(weighted_loglik(params, data, w, CovariateSelector::kMain, config) == 0.0);
  }
  SECTION("unit weights reproduce the plain sum") {
    const std::vector<double> w = {1.0, 1.0};
    const double direct =
        subject_loglik(params, data.subjects[0], CovariateSelector::kMain, config) +
        subject_loglik(params, data.subjects[1], CovariateSelector::kMain, config);
    CHECK(weighted_loglik(params, data, w, CovariateSelector::kMain, config) ==
          Catch::Approx(direct).margin(1e-13));
  }
  SECTION("weight two equals a duplicated subject") {
    const std::vector<double> w2 = {2.0, 1.0};
    CohortDataset duplicated = data;
    duplicated.subjects.push_back(duplicated.subjects[0]);
    const std::vector<double> w1 = {1.0, 1.0, 1.0};
    CHECK(weighted_loglik(params, data, w2, CovariateSelector::kMain, config) ==
          Catch::Approx(weighted_loglik(params, duplicated, w1,
                                        CovariateSelector::kMain, config))
              .margin(1e-12));
  }
}

TEST_CASE("degenerate rows are reported with their indices") {
  CohortDataset data = two_subject_data();
  data.subjects[0].left = 1.0;
  data.subjects[0].right = 3.0;
  const SieveConfig config(1, 1.0, 3.0);
  CoxParams params;
  params.regression = Eigen::VectorXd::Zero(1);
  params.log_increments.psi = {0.0, -60.0};
  const std::vector<double> w = {1.0, 1.0};
  std::vector<std::size_t> rows;
  const double v =
      weighted_loglik(params, data, w, CovariateSelector::kMain, config, &rows);
  CHECK(std::isinf(v));
  REQUIRE(rows.size() == 1);
  CHECK(rows[0] == 0);
}

TEST_CASE("analytic gradient matches central finite differences") {
  RngStream seeder(2024, {1});
  Scenario sc = small_scenario();
  RngStream gen(31, {casecohort::detail::kTagCohort, 0});
  const CohortDataset data = generate_cohort(sc, gen);
  const SieveConfig sieve = sieve_from_data(data);
  const std::vector<double> weights = sampling_weights(data);
  const LikelihoodEngine engine(data, CovariateSelector::kMain, sieve, weights);

  for (int point = 0; point < 20; ++point) {
    Eigen::VectorXd x(engine.param_dim());
    for (Eigen::Index i = 0; i < x.size(); ++i)
      x[i] = i < static_cast<Eigen::Index>(engine.regression_dim())
                 ? seeder.uniform(-0.8, 0.8)
                 : seeder.uniform(-2.0, 0.5);
    Eigen::VectorXd grad;
    const double value = engine.value_and_gradient(x, weights, grad);
    REQUIRE(std::isfinite(value));
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double h = 1e-6 * std::max(1.0, std::abs(x[i]));
      Eigen::VectorXd up = x, dn = x;
      up[i] += h;
      dn[i] -= h;
      const double fd =
          (engine.value(up, weights) - engine.value(dn, weights)) / (2.0 * h);
      const double rel =
          std::abs(grad[i] - fd) / std::max({1.0, std::abs(grad[i]), std::abs(fd)});
      CHECK(rel < 1e-6);
    }
  }
}

TEST_CASE("gradient edge cases") {
  const SieveConfig config(2, 1.0, 3.0);
  CoxParams params;
  params.regression = Eigen::VectorXd::Constant(1, 0.8);
  params.log_increments.psi = {-1.0, -0.5, -1.5};

  SECTION("a covariate that is identically zero has zero gradient") {
    CohortDataset data = two_subject_data();
    (*data.subjects[0].expensive)[0] = 0.0;
    (*data.subjects[1].expensive)[0] = 0.0;
    const std::vector<double> w = {1.0, 1.0};
    const Eigen::VectorXd g = weighted_loglik_gradient(
        params, data, w, CovariateSelector::kMain, config);
    CHECK(g[0] == 0.0);
  }
  SECTION("zero weights give a zero gradient") {
    const CohortDataset data = two_subject_data();
    const std::vector<double> w = {0.0, 0.0};
    const Eigen::VectorXd g = weighted_loglik_gradient(
        params, data, w, CovariateSelector::kMain, config);
    CHECK(g.lpNorm<Eigen::Infinity>() == 0.0);
  }
  SECTION("gradient at a non-finite point is an error") {
    CohortDataset data = two_subject_data();
    data.subjects[0].left = 1.0;
    data.subjects[0].right = 3.0;
    const SieveConfig line(1, 1.0, 3.0);
    CoxParams flat;
    flat.regression = Eigen::VectorXd::Zero(1);
    flat.log_increments.psi = {0.0, -60.0};
    const std::vector<double> w = {1.0, 1.0};
    CHECK_THROWS_AS(
        weighted_loglik_gradient(flat, data, w, CovariateSelector::kMain, line),
        FitError);
  }
}

TEST_CASE("shifting a covariate column is equivalent to rescaling the hazard") {
  Scenario sc = small_scenario();
  RngStream gen(77, {casecohort::detail::kTagCohort, 0});
  CohortDataset data = generate_cohort(sc, gen);
  const SieveConfig sieve = sieve_from_data(data);
  const std::vector<double> weights = sampling_weights(data);

  CoxParams params;
  params.regression = Eigen::VectorXd(2);
  params.regression << 0.45, -0.3;
  params.log_increments.psi = {-1.2, -0.8, -1.6, -0.9};
  const double base =
      weighted_loglik(params, data, weights, CovariateSelector::kMain, sieve);

  const double c = 0.7;
  CohortDataset shifted = data;
  for (auto& s : shifted.subjects)
    if (s.expensive) (*s.expensive)[0] += c;

  CoxParams compensated = params;
  for (double& psi : compensated.log_increments.psi)
    psi -= c * params.regression[0];

  const double moved = weighted_loglik(compensated, shifted, weights,
                                       CovariateSelector::kMain, sieve);
  CHECK(moved == Catch::Approx(base).margin(1e-10));
}

TEST_CASE("right-censored likelihood decreases as the hazard grows") {
  CohortDataset data;
  data.design = SamplingDesign(1.0, 1.0);
  data.expensive_names = {"x1"};
  for (double left : {1.5, 2.0, 2.8}) {
    IntervalObservation obs;
    obs.id = "c" + std::to_string(static_cast<int>(left * 10));
    obs.left = left;
    obs.right = kInf;
    obs.in_subcohort = obs.sampled = true;
    obs.expensive = std::vector<double>{0.3};
    data.subjects.push_back(obs);
  }
  const SieveConfig config(2, 1.0, 3.0);
  const std::vector<double> w(3, 1.0);
  CoxParams params;
  params.regression = Eigen::VectorXd::Constant(1, 0.2);
  params.log_increments.psi = {-1.0, -0.9, -1.1};
  const double base =
      weighted_loglik(params, data, w, CovariateSelector::kMain, config);
  for (std::size_t l = 0; l < 3; ++l) {
    CoxParams bumped = params;
    bumped.log_increments.psi[l] += 0.1;
    CHECK(weighted_loglik(bumped, data, w, CovariateSelector::kMain, config) <
          base);
  }
}

TEST_CASE("engine caches only the supported rows and checks its inputs") {
  Scenario sc = small_scenario();
  RngStream gen(13, {casecohort::detail::kTagCohort, 1});
  const CohortDataset data = generate_cohort(sc, gen);
  const SieveConfig sieve = sieve_from_data(data);
  const std::vector<double> weights = sampling_weights(data);

  const LikelihoodEngine engine(data, CovariateSelector::kMain, sieve, weights);
  CHECK(engine.active_rows() == data.sampled_count());
  CHECK(engine.regression_dim() == 2);
  CHECK(engine.param_dim() == 2 + 4);

  SECTION("pack and unpack are inverse") {
    CoxParams params;
    params.regression = Eigen::VectorXd(2);
    params.regression << 0.3, -0.2;
    params.log_increments.psi = {-1.0, -0.5, 0.1, -2.0};
    const Eigen::VectorXd packed = engine.pack(params);
    const CoxParams back = engine.unpack(packed);
    CHECK(back.regression == params.regression);
    CHECK(back.log_increments.psi == params.log_increments.psi);
  }
  SECTION("value agrees with the summed form") {
    CoxParams params;
    params.regression = Eigen::VectorXd(2);
    params.regression << 0.3, -0.2;
    params.log_increments.psi = {-1.0, -0.5, 0.1, -2.0};
    CHECK(engine.value(engine.pack(params), weights) ==
          Catch::Approx(weighted_loglik(params, data, weights,
                                        CovariateSelector::kMain, sieve))
              .margin(1e-12));
  }
  SECTION("negative support weights are rejected") {
    std::vector<double> bad = weights;
    bad[0] = -0.5;
    CHECK_THROWS_AS(
        LikelihoodEngine(data, CovariateSelector::kMain, sieve, bad), DomainError);
  }
  SECTION("evaluation weights may differ from support, zeros staying zero") {
    std::vector<double> scaled = weights;
    for (double& v : scaled) v *= 1.7;
    CoxParams params;
    params.regression = Eigen::VectorXd::Zero(2);
    params.log_increments.psi = {-1.0, -1.0, -1.0, -1.0};
    const double a = engine.value(engine.pack(params), weights);
    const double b = engine.value(engine.pack(params), scaled);
    CHECK(b == Catch::Approx(1.7 * a).epsilon(1e-12));
  }
  SECTION("mismatched lengths are domain errors") {
    CoxParams params;
    params.regression = Eigen::VectorXd::Zero(2);
    params.log_increments.psi = {-1.0, -1.0, -1.0, -1.0};
    const Eigen::VectorXd packed = engine.pack(params);
    std::vector<double> short_weights(data.size() - 1, 1.0);
    CHECK_THROWS_AS(engine.value(packed, short_weights), DomainError);
    CHECK_THROWS_AS(engine.value(packed.head(3), weights), DomainError);
  }
}

TEST_CASE("sieve window spans the finite endpoints of the data") {
  CohortDataset data = two_subject_data();
  data.subjects[0].left = 0.8;
  data.subjects[0].right = 2.5;
  data.subjects[1].left = 3.1;
  const SieveConfig sieve = sieve_from_data(data);
  CHECK(sieve.degree == 3);
  CHECK(sieve.lower == 0.8);
  CHECK(sieve.upper == 3.1);
  CHECK(sieve_from_data(data, 5).degree == 5);

  CohortDataset degenerate;
  degenerate.expensive_names = {"x1"};
  IntervalObservation only;
  only.id = "o";
  only.left = 1.0;
  only.right = kInf;
  only.in_subcohort = only.sampled = true;
  only.expensive = std::vector<double>{0.1};
  degenerate.subjects = {only};
  CHECK_THROWS_AS(sieve_from_data(degenerate), DomainError);
}
