#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "casecohort/bernstein.hpp"
#include "casecohort/rng.hpp"

using namespace casecohort;

TEST_CASE("sieve configuration validation") {
  CHECK_NOTHROW(SieveConfig(3, 0.5, 2.0));
  CHECK_THROWS_AS(SieveConfig(0, 0.5, 2.0), DomainError);
  CHECK_THROWS_AS(SieveConfig(3, 0.0, 2.0), DomainError);
  CHECK_THROWS_AS(SieveConfig(3, -1.0, 2.0), DomainError);
  CHECK_THROWS_AS(SieveConfig(3, 2.0, 2.0), DomainError);
  CHECK_THROWS_AS(SieveConfig(3, 2.0, 1.0), DomainError);
  CHECK_THROWS_AS(SieveConfig(3, 0.5, 2.0, 0.0), DomainError);
}

TEST_CASE("degree rule grows like the fourth root") {
  CHECK(degree_for_cohort(0) == 1);
  CHECK(degree_for_cohort(1) == 1);
  CHECK(degree_for_cohort(16) == 2);
  CHECK(degree_for_cohort(81) == 3);
  CHECK(degree_for_cohort(1000) == 6);
  CHECK(default_degree() == 3);
}

TEST_CASE("basis values at the window endpoints and midpoint") {
  const SieveConfig config(2, 1.0, 3.0);
  CHECK(basis_eval(1.0, 0, config) == 1.0);
  CHECK(basis_eval(1.0, 1, config) == 0.0);
  CHECK(basis_eval(1.0, 2, config) == 0.0);
  CHECK(basis_eval(3.0, 2, config) == 1.0);
  CHECK(basis_eval(2.0, 0, config) == Catch::Approx(0.25).epsilon(1e-14));
  CHECK(basis_eval(2.0, 1, config) == Catch::Approx(0.5).epsilon(1e-14));
  CHECK(basis_eval(2.0, 2, config) == Catch::Approx(0.25).epsilon(1e-14));
}

TEST_CASE("basis evaluation outside the window or index range is an error") {
  const SieveConfig config(2, 1.0, 3.0);
  CHECK_THROWS_AS(basis_eval(0.5, 0, config), DomainError);
  CHECK_THROWS_AS(basis_eval(3.5, 0, config), DomainError);
  CHECK_THROWS_AS(basis_eval(2.0, -1, config), DomainError);
  CHECK_THROWS_AS(basis_eval(2.0, 3, config), DomainError);
}

TEST_CASE("partition of unity across degrees and random points") {
  RngStream stream(7, {1});
  for (int m = 1; m <= 10; ++m) {
    const SieveConfig config(m, 0.3, 4.7);
    for (int k = 0; k < 100; ++k) {
      const double t = stream.uniform(config.lower, config.upper);
      double sum = 0.0;
      for (int j = 0; j <= m; ++j) sum += basis_eval(t, j, config);
      CHECK(std::abs(sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("tail sums agree with direct suffix summation") {
  const SieveConfig config(4, 0.5, 2.5);
  RngStream stream(11, {2});
  for (int k = 0; k < 50; ++k) {
    const double t = stream.uniform(config.lower, config.upper);
    const std::vector<double> tails = basis_tail_sums(t, config);
    REQUIRE(tails.size() == 5);
    for (int l = 0; l <= 4; ++l) {
      double direct = 0.0;
      for (int j = l; j <= 4; ++j) direct += basis_eval(t, j, config);
      CHECK(tails[static_cast<std::size_t>(l)] ==
            Catch::Approx(direct).margin(1e-14));
    }
    CHECK(tails[0] == Catch::Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("hazard evaluation basics") {
  const SieveConfig config(2, 1.0, 3.0);

  SECTION("zero is always zero") {
    MonotoneCoefficients coef{{0.4, 0.9, 2.0}};
    CHECK(cumhaz_eval(coef, 0.0, config) == 0.0);
  }
  SECTION("constant coefficients give a flat hazard") {
    MonotoneCoefficients coef{{0.7, 0.7, 0.7}};
    for (double t : {1.0, 1.3, 2.0, 2.9, 3.0})
      CHECK(cumhaz_eval(coef, t, config) == Catch::Approx(0.7).epsilon(1e-14));
  }
  SECTION("zero coefficients give zero") {
    MonotoneCoefficients coef{{0.0, 0.0, 0.0}};
    CHECK(cumhaz_eval(coef, 2.0, config) == 0.0);
  }
  SECTION("degree one interpolates linearly") {
    const SieveConfig line(1, 1.0, 3.0);
    MonotoneCoefficients coef{{0.0, 1.0}};
    CHECK(cumhaz_eval(coef, 2.0, line) == Catch::Approx(0.5).epsilon(1e-14));
  }
  SECTION("coefficient count is checked") {
    MonotoneCoefficients coef{{0.0, 1.0}};
    CHECK_THROWS_AS(cumhaz_eval(coef, 2.0, config), DomainError);
  }
  SECTION("no evaluation between zero and the window") {
    MonotoneCoefficients coef{{0.4, 0.9, 2.0}};
    CHECK_THROWS_AS(cumhaz_eval(coef, 0.5, config), DomainError);
    CHECK_THROWS_AS(cumhaz_eval(coef, 3.01, config), DomainError);
  }
}

TEST_CASE("endpoint identities hold exactly") {
  const SieveConfig config(3, 0.8, 2.2);
  MonotoneCoefficients coef{{0.25, 0.5, 1.0, 1.75}};
  CHECK(cumhaz_eval(coef, config.lower, config) == 0.25);
  CHECK(cumhaz_eval(coef, config.upper, config) == 1.75);
}

TEST_CASE("reparameterization round trip") {
  SECTION("zeros map to the integer ramp") {
    const MonotoneCoefficients phi = to_monotone({{0.0, 0.0, 0.0}});
    REQUIRE(phi.phi.size() == 3);
    CHECK(phi.phi[0] == Catch::Approx(1.0).epsilon(1e-15));
    CHECK(phi.phi[1] == Catch::Approx(2.0).epsilon(1e-15));
    CHECK(phi.phi[2] == Catch::Approx(3.0).epsilon(1e-15));
  }
  SECTION("log-halves map to halves") {
    const double lh = std::log(0.5);
    const MonotoneCoefficients phi = to_monotone({{lh, lh}});
    CHECK(phi.phi[0] == Catch::Approx(0.5).epsilon(1e-15));
    CHECK(phi.phi[1] == Catch::Approx(1.0).epsilon(1e-15));
  }
  SECTION("inverse pair on random coefficients") {
    RngStream stream(3, {5});
    for (int k = 0; k < 100; ++k) {
      UnconstrainedCoefficients psi;
      for (int l = 0; l < 4; ++l) psi.psi.push_back(stream.uniform(-3.0, 3.0));
      const UnconstrainedCoefficients back = from_monotone(to_monotone(psi));
      for (int l = 0; l < 4; ++l)
        CHECK(back.psi[static_cast<std::size_t>(l)] ==
              Catch::Approx(psi.psi[static_cast<std::size_t>(l)]).margin(1e-12));
    }
  }
  SECTION("known increments invert") {
    const UnconstrainedCoefficients psi = from_monotone({{1.0, 2.0, 3.0}});
    CHECK(psi.psi[0] == Catch::Approx(0.0).margin(1e-15));
    CHECK(psi.psi[1] == Catch::Approx(0.0).margin(1e-15));
    CHECK(psi.psi[2] == Catch::Approx(0.0).margin(1e-15));
  }
  SECTION("tied coefficients floor the increment") {
    const UnconstrainedCoefficients psi = from_monotone({{1.0, 1.0}});
    CHECK(psi.psi[1] == Catch::Approx(std::log(1e-10)).epsilon(1e-12));
  }
}

TEST_CASE("the exponential cap keeps the map finite and consistent") {
  const MonotoneCoefficients phi = to_monotone({{100.0, 0.0}});
  CHECK(std::isfinite(phi.phi[1]));
  CHECK(phi.phi[0] == Catch::Approx(std::exp(50.0)));
  CHECK(capped_exp_derivative(100.0) == 0.0);
  CHECK(capped_exp_derivative(49.0) == Catch::Approx(std::exp(49.0)));
}

TEST_CASE("represented hazard is nondecreasing for any free coefficients") {
  RngStream stream(19, {4});
  const SieveConfig config(5, 0.4, 3.6);
  for (int k = 0; k < 100; ++k) {
    UnconstrainedCoefficients psi;
    for (int l = 0; l <= 5; ++l) psi.psi.push_back(stream.uniform(-4.0, 4.0));
    const MonotoneCoefficients phi = to_monotone(psi);
    double prev = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const double t =
          config.lower + (config.upper - config.lower) * i / 999.0;
      const double v = cumhaz_eval(phi, t, config);
      CHECK(v >= prev - 1e-12);
      prev = v;
    }
  }
}

TEST_CASE("hazard gradient endpoints and finite differences") {
  const SieveConfig config(3, 0.6, 2.4);
  UnconstrainedCoefficients psi{{0.2, -0.5, 0.9, -1.3}};

  SECTION("window start only sees the first coefficient") {
    const std::vector<double> g = cumhaz_gradient(psi, config.lower, config);
    CHECK(g[0] == Catch::Approx(std::exp(0.2)).epsilon(1e-14));
    CHECK(g[1] == 0.0);
    CHECK(g[2] == 0.0);
    CHECK(g[3] == 0.0);
  }
  SECTION("window end sees every coefficient") {
    const std::vector<double> g = cumhaz_gradient(psi, config.upper, config);
    for (std::size_t l = 0; l < 4; ++l)
      CHECK(g[l] == Catch::Approx(std::exp(psi.psi[l])).epsilon(1e-12));
  }
  SECTION("time zero has zero gradient") {
    const std::vector<double> g = cumhaz_gradient(psi, 0.0, config);
    for (double v : g) CHECK(v == 0.0);
  }
  SECTION("matches central differences at random points") {
    RngStream stream(23, {6});
    for (int k = 0; k < 50; ++k) {
      UnconstrainedCoefficients p;
      for (int l = 0; l < 4; ++l) p.psi.push_back(stream.uniform(-2.0, 2.0));
      const double t = stream.uniform(config.lower, config.upper);
      const std::vector<double> g = cumhaz_gradient(p, t, config);
      for (std::size_t l = 0; l < 4; ++l) {
        const double h = 1e-6;
        UnconstrainedCoefficients up = p, dn = p;
        up.psi[l] += h;
        dn.psi[l] -= h;
        const double fd = (cumhaz_eval(to_monotone(up), t, config) -
                           cumhaz_eval(to_monotone(dn), t, config)) /
                          (2.0 * h);
        CHECK(g[l] == Catch::Approx(fd).epsilon(1e-7).margin(1e-9));
      }
    }
  }
}

TEST_CASE("coefficient bound rescales the whole vector") {
  const SieveConfig config(2, 1.0, 3.0, 2.0);
  MonotoneCoefficients coef{{1.0, 2.0, 4.0}};
  apply_coefficient_bound(coef, config);
  CHECK(coef.phi[0] == Catch::Approx(0.5));
  CHECK(coef.phi[1] == Catch::Approx(1.0));
  CHECK(coef.phi[2] == Catch::Approx(2.0));

  MonotoneCoefficients small{{0.5, 1.0, 1.5}};
  apply_coefficient_bound(small, config);
  CHECK(small.phi[2] == 1.5);
}
