#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ixvol/theory.hpp"

using namespace ixvol;

namespace {

SurfacePtr flat(double vol, double cap = 5.0) {
    return std::make_shared<VolSurface>(constant_surface(vol, 1.0, 1e-6, 1e6, cap));
}

ModelSpec equal_weight_spec(int m, double beta, double delta, double sigma, double eta,
                            double s0 = 100.0, double rate = 0.05) {
    std::vector<double> w(static_cast<std::size_t>(m), 1.0 / m);
    std::vector<double> b(static_cast<std::size_t>(m), beta);
    std::vector<double> d(static_cast<std::size_t>(m), delta);
    std::vector<double> s(static_cast<std::size_t>(m), s0);
    std::vector<SurfacePtr> etas(static_cast<std::size_t>(m), flat(eta));
    return make_model_spec(w, b, d, s, rate, 1.0, flat(sigma), etas);
}

// Second implementation of the index-theorem constant, assembled from the
// Gronwall pieces C_0 e^{C_1 T} instead of the single closed expression.
double rederived_theorem1_constant(double s0_max, double beta_max, double rate, double horizon,
                                   double k_b, double k_sigma, double beta, double delta, int p) {
    const double pd = p;
    const double kp = universal_bdg_constant(p);
    const double cp = std::pow(s0_max, 2 * pd) *
                      std::exp((2 * rate + (2 * pd - 1) * (beta_max * beta_max + 1) * k_b * k_b) * pd * horizon);
    const double c0 = std::pow(8.0, 2 * pd - 1) * std::pow(horizon, pd) *
                      (std::pow(horizon, pd) + kp * std::pow(k_b, 2 * pd)) * cp;
    const double c1 = std::pow(4.0, 2 * pd - 1) *
                      (std::pow(2.0, 2 * pd - 1) * kp * std::pow(horizon, pd - 1) *
                           std::pow(beta * k_sigma, 2 * pd) +
                       std::pow(2.0 * horizon, 2 * pd - 1) * std::pow(delta, 2 * pd) +
                       std::pow(rate, 2 * pd) * std::pow(horizon, 2 * pd - 1));
    return c0 * std::exp(c1 * horizon);
}

double rederived_theorem2_constant(double s0_max, double beta_max, double rate, double horizon,
                                   double k_b, double k_eta, double k_lip, double beta_j,
                                   double delta_j, int p) {
    const double pd = p;
    const double kp = universal_bdg_constant(p);
    const double c2p = std::pow(s0_max, 4 * pd) *
                       std::exp((2 * rate + (4 * pd - 1) * (beta_max * beta_max + 1) * k_b * k_b) *
                                2 * pd * horizon);
    const double lead = std::pow(6.0, 2 * pd - 1) * kp * std::pow(horizon, pd) *
                        std::pow(beta_j, 2 * pd) * std::sqrt(c2p) * std::pow(k_lip, 2 * pd);
    const double expo = std::pow(3.0, 2 * pd - 1) *
                        (std::pow(rate - delta_j, 2 * pd) * std::pow(horizon, 2 * pd - 1) +
                         kp * std::pow(horizon, pd - 1) * std::pow(k_eta, 2 * pd) +
                         std::pow(2.0, 2 * pd - 1) * kp * std::pow(horizon, pd - 1) *
                             std::pow(beta_j, 2 * pd) * std::pow(k_b, 2 * pd)) *
                        horizon;
    return lead * std::exp(expo);
}

} // namespace

TEST_CASE("universal BDG constant") {
    CHECK(universal_bdg_constant(1) == 4.0);  // Doob L^2
    double prev = 0.0;
    for (int p = 1; p <= 10; ++p) {
        const double kp = universal_bdg_constant(p);
        CHECK(std::isfinite(kp));
        CHECK(kp > prev);
        prev = kp;
    }
    CHECK_THROWS_AS(universal_bdg_constant(0), config_error);
}

TEST_CASE("lemma 1 constant") {
    SECTION("vanishing rate and volatility cap reduce to max s0^{2p}") {
        std::vector<SurfacePtr> etas{flat(0.0), flat(0.0)};
        const auto spec = make_model_spec({0.5, 0.5}, {1.0, 1.0}, {0.0, 0.0}, {80.0, 120.0}, 0.0,
                                          1.0, flat(0.0), etas);
        CHECK(lemma1_bound(spec, 0.0, 1) == 120.0 * 120.0);
        CHECK(lemma1_bound(spec, 0.0, 2) == std::pow(120.0, 4.0));
    }
    SECTION("worked instance") {
        const auto spec = equal_weight_spec(3, 1.0, 0.0, 0.5, 0.6);
        const double expected = 1e4 * std::exp((0.1 + 1.0 * 2.0 * 0.36) * 1.0);
        CHECK_THAT(lemma1_bound(spec, 0.6, 1), Catch::Matchers::WithinRel(expected, 1e-12));
    }
    SECTION("doubling T with r = 0 squares the exponential factor") {
        std::vector<double> w{1.0}, b{1.0}, d{0.0}, s{100.0};
        auto s1 = make_model_spec(w, b, d, s, 0.0, 1.0, flat(0.4), {flat(0.4)});
        auto s2 = make_model_spec(w, b, d, s, 0.0, 2.0, flat(0.4), {flat(0.4)});
        const double f1 = lemma1_bound(s1, 0.5, 1) / 1e4;
        const double f2 = lemma1_bound(s2, 0.5, 1) / 1e4;
        CHECK_THAT(f2, Catch::Matchers::WithinRel(f1 * f1, 1e-12));
    }
    SECTION("cap below the observed surface maximum is rejected") {
        const auto spec = equal_weight_spec(2, 1.0, 0.0, 0.5, 0.3);
        CHECK_THROWS_AS(lemma1_bound(spec, 0.4, 1), config_error);
    }
}

TEST_CASE("theorem 1 bound") {
    SECTION("equal weights and matched constants leave only the P_w term") {
        for (int m : {4, 25}) {
            for (int p : {1, 2}) {
                const auto spec = equal_weight_spec(m, 1.0, 0.02, 0.4, 0.3);
                const auto limit = make_limit_spec(1.0, 0.02, 0.02, 100.0, spec.index_vol);
                const double bound = theorem1_bound(spec, limit, 0.7, 1.0, p);
                const double c = theorem1_constant(spec, limit, 0.7, 1.0, p);
                CHECK_THAT(bound, Catch::Matchers::WithinRel(c * std::pow(1.0 / m, p), 1e-12));
            }
        }
    }
    SECTION("single stock: the bound is the finite constant C_T") {
        const auto spec = equal_weight_spec(1, 1.0, 0.0, 0.4, 0.3);
        const auto limit = make_limit_spec(1.0, 0.0, 0.0, 100.0, spec.index_vol);
        const double bound = theorem1_bound(spec, limit, 0.7, 1.0, 1);
        CHECK(std::isfinite(bound));
        CHECK_THAT(bound, Catch::Matchers::WithinRel(theorem1_constant(spec, limit, 0.7, 1.0, 1), 1e-12));
    }
    SECTION("cross-check against the independently assembled constant") {
        const auto spec = equal_weight_spec(50, 1.0, 0.0, 0.5, 0.6);
        const auto limit = make_limit_spec(1.0, 0.0, 0.0, 100.0, spec.index_vol);
        for (int p : {1, 2}) {
            const double mine = theorem1_constant(spec, limit, 0.6, 1.0, p);
            const double ref = rederived_theorem1_constant(100.0, 1.0, 0.05, 1.0, 0.6, 1.0, 1.0, 0.0, p);
            CHECK_THAT(mine, Catch::Matchers::WithinRel(ref, 1e-12));
        }
    }
    SECTION("p below 1 is rejected") {
        const auto spec = equal_weight_spec(2, 1.0, 0.0, 0.4, 0.3);
        const auto limit = make_limit_spec(1.0, 0.0, 0.0, 100.0, spec.index_vol);
        CHECK_THROWS_AS(theorem1_bound(spec, limit, 0.7, 1.0, 0), config_error);
    }
}

TEST_CASE("theorem 1 bound monotonicity sweeps") {
    // the bound is non-decreasing in each proximity metric, T and K_b
    auto make_spec = [&](double beta_spread, double delta_spread, double horizon) {
        std::vector<double> w{0.5, 0.5};
        std::vector<double> b{1.0 - beta_spread, 1.0 + beta_spread};
        std::vector<double> d{0.0, delta_spread};
        std::vector<double> s{100.0, 100.0};
        std::vector<SurfacePtr> etas{flat(0.3), flat(0.3)};
        return make_model_spec(w, b, d, s, 0.05, horizon, flat(0.4), etas);
    };
    double prev = 0.0;
    for (double spread : {0.0, 0.1, 0.2, 0.4}) {
        const auto spec = make_spec(spread, 0.0, 1.0);
        const auto limit = make_limit_spec(1.0, 0.0, 0.0, 100.0, spec.index_vol);
        const double bound = theorem1_bound(spec, limit, 0.7, 1.0, 1);
        CHECK(bound >= prev);
        prev = bound;
    }
    prev = 0.0;
    for (double spread : {0.0, 0.02, 0.05}) {
        const auto spec = make_spec(0.0, spread, 1.0);
        const auto limit = make_limit_spec(1.0, 0.0, 0.0, 100.0, spec.index_vol);
        const double bound = theorem1_bound(spec, limit, 0.7, 1.0, 1);
        CHECK(bound >= prev);
        prev = bound;
    }
    prev = 0.0;
    for (double horizon : {0.5, 1.0, 2.0}) {
        const auto spec = make_spec(0.1, 0.01, horizon);
        const auto limit = make_limit_spec(1.0, 0.0, 0.0, 100.0, spec.index_vol);
        const double bound = theorem1_bound(spec, limit, 0.7, 1.0, 1);
        CHECK(bound >= prev);
        prev = bound;
    }
    prev = 0.0;
    for (double k_b : {0.5, 0.8, 1.5}) {
        const auto spec = make_spec(0.1, 0.01, 1.0);
        const auto limit = make_limit_spec(1.0, 0.0, 0.0, 100.0, spec.index_vol);
        const double bound = theorem1_bound(spec, limit, k_b, 1.0, 1);
        CHECK(bound >= prev);
        prev = bound;
    }
}

TEST_CASE("matched constants zero the proximity metrics exactly") {
    const auto spec = equal_weight_spec(7, 1.3, 0.04, 0.4, 0.3);
    const auto m = proximity_metrics(spec, 1.3, 0.04);
    CHECK(m.p_beta == 0.0);
    CHECK(m.p_delta == 0.0);
}

TEST_CASE("theorem 2 bound") {
    SECTION("zero beta kills the bound") {
        const auto spec = equal_weight_spec(2, 0.0, 0.0, 0.4, 0.3);
        const auto limit = make_limit_spec(0.0, 0.0, 0.0, 100.0, spec.index_vol);
        CHECK(theorem2_bound(spec, limit, 0, 0.7, 1.0, 1.0, 1.0, 1) == 0.0);
    }
    SECTION("constant-in-level sigma (K_Lip = 0) kills the bound") {
        const auto spec = equal_weight_spec(2, 1.0, 0.0, 0.4, 0.3);
        const auto limit = make_limit_spec(1.0, 0.0, 0.0, 100.0, spec.index_vol);
        CHECK(theorem2_bound(spec, limit, 0, 0.7, 1.0, 1.0, 0.0, 1) == 0.0);
        // the discrete estimate of a constant surface is exactly zero
        CHECK(spec.index_vol->lipschitz_vol() == 0.0);
    }
    SECTION("cross-check against the independently assembled constant") {
        const auto spec = equal_weight_spec(5, 1.2, 0.01, 0.5, 0.6);
        for (int p : {1, 2}) {
            const double mine = theorem2_constant(spec, 0, 0.6, 1.0, 0.8, 0.9, p);
            const double ref =
                rederived_theorem2_constant(100.0, 1.2, 0.05, 1.0, 0.6, 0.8, 0.9, 1.2, 0.01, p);
            CHECK_THAT(mine, Catch::Matchers::WithinRel(ref, 1e-12));
        }
    }
}

TEST_CASE("reconstructed index bound carries the weight-sum factor") {
    const auto base = equal_weight_spec(4, 1.0, 0.0, 0.4, 0.3);
    const auto limit = make_limit_spec(1.0, 0.0, 0.0, 100.0, base.index_vol);
    const double b1 = reconstructed_index_bound(base, limit, 0.7, 1.0, 1.0, 1.0, 1);
    // doubling every weight doubles i0; rebuild a consistent limit
    std::vector<double> w2(4, 0.5);
    const auto spec2 = make_model_spec(w2, base.betas, base.dividends, base.s0, base.rate,
                                       base.horizon, base.index_vol, base.idio_vols);
    const auto limit2 = make_limit_spec(1.0, 0.0, 0.0, 200.0, base.index_vol);
    const double b2 = reconstructed_index_bound(spec2, limit2, 0.7, 1.0, 1.0, 1.0, 1);
    // (sum w)^2 and P_w^2 both quadruple: total factor 16
    CHECK_THAT(b2, Catch::Matchers::WithinRel(16.0 * b1, 1e-12));
}

TEST_CASE("bound report populates every constant") {
    const auto spec = equal_weight_spec(3, 1.0, 0.01, 0.4, 0.3);
    const auto limit = make_limit_spec(1.0, 0.01, 0.01, 100.0, spec.index_vol);
    const auto rep = make_bound_report(spec, limit, 1);
    CHECK(rep.k_p == 4.0);
    CHECK(rep.k_b == 0.4);
    CHECK(rep.c_p > 0.0);
    CHECK(rep.theorem1 > 0.0);
    CHECK(rep.theorem2.size() == 3);
    CHECK(rep.reconstructed >= 0.0);
    CHECK(rep.p_beta == 0.0);
}

TEST_CASE("convergence study: rate, dominance and degenerate cases") {
    // mildly level-dependent sigma so every theorem constant is positive
    auto sigma_fn = [](double, double x) { return 0.35 - 0.001 * std::clamp(x - 100.0, -50.0, 50.0); };
    std::vector<double> levels;
    for (int i = 0; i <= 20; ++i) levels.push_back(10.0 + 490.0 * i / 20.0);
    const auto sigma =
        std::make_shared<VolSurface>(build_surface_from_function(sigma_fn, {0.0, 1.0}, levels, 1.0));
    auto family = [&](int m) {
        std::vector<double> w(static_cast<std::size_t>(m), 1.0 / m);
        std::vector<double> b(static_cast<std::size_t>(m), 1.0);
        std::vector<double> d(static_cast<std::size_t>(m), 0.0);
        std::vector<double> s(static_cast<std::size_t>(m), 100.0);
        std::vector<SurfacePtr> etas(static_cast<std::size_t>(m), flat(0.3));
        return make_model_spec(w, b, d, s, 0.05, 1.0, sigma, etas);
    };
    const auto limit = make_limit_spec(1.0, 0.0, 0.0, 100.0, sigma);

    SECTION("equal-weight family contracts at the predicted rate") {
        const auto res = convergence_study(family, limit, {4, 16, 64}, 1, 4000, 10, 20240101);
        REQUIRE(res.rows.size() == 3);
        double prev = 1e300;
        for (const auto& row : res.rows) {
            CHECK(row.index_distance.mean < prev);
            prev = row.index_distance.mean;
            CHECK(row.bound_theorem1 > 0.0);
            CHECK(row.bound_theorem2 > 0.0);
            CHECK(row.index_distance.mean <= row.bound_theorem1);
            CHECK(row.stock_distance.mean <= row.bound_theorem2);
            CHECK_FALSE(row.flagged);
            CHECK(row.p_beta == 0.0);
            CHECK(row.p_delta == 0.0);
        }
        CHECK(res.slope <= -0.8);
        CHECK(res.slope >= -1.3);
    }

    SECTION("M = 1 with matched constants is exact to machine precision") {
        auto family1 = [&](int m) {
            std::vector<double> w(static_cast<std::size_t>(m), 1.0);
            std::vector<SurfacePtr> etas(static_cast<std::size_t>(m), flat(0.0));
            return make_model_spec(w, {1.0}, {0.0}, {100.0}, 0.05, 1.0, sigma, etas);
        };
        const auto res = convergence_study(family1, limit, {1}, 1, 50, 10, 7);
        CHECK(res.rows[0].index_distance.mean == 0.0);
    }

    SECTION("constant sigma keeps the coupled stock recursions bit-identical") {
        const auto flat_sigma = flat(0.4);
        auto cfamily = [&](int m) { return equal_weight_spec(m, 1.0, 0.0, 0.4, 0.3); };
        const auto climit = make_limit_spec(1.0, 0.0, 0.0, 100.0, flat_sigma);
        const auto res = convergence_study(cfamily, climit, {4}, 1, 500, 10, 99);
        CHECK(res.rows[0].stock_distance.mean == 0.0);
        CHECK(res.rows[0].index_distance.mean > 0.0);
    }

    SECTION("mismatched i0 is rejected") {
        const auto bad_limit = make_limit_spec(1.0, 0.0, 0.0, 123.0, sigma);
        CHECK_THROWS_AS(convergence_study(family, bad_limit, {4}, 1, 50, 5, 7), config_error);
    }
}

TEST_CASE("lemma 1 dominates the empirical second moment") {
    const auto spec = equal_weight_spec(2, 1.0, 0.0, 0.3, 0.25);
    NoisePlan plan{999, 0};
    const auto ens = simulate_original(spec, 20, 20000, plan, {}, {0});
    const auto terminals = ens.column(ens.stocks[0], 20);
    double sum2 = 0.0;
    for (double x : terminals) sum2 += x * x;
    const double c1 = lemma1_bound(spec, 0.3, 1);
    CHECK(sum2 / 20000.0 <= c1);
}
