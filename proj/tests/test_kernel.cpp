#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <random>

#include "ixvol/kernel.hpp"

using namespace ixvol;

TEST_CASE("nadaraya-watson: constant ys are exact for any sample and bandwidth") {
    const std::vector<double> xs{-3.0, 0.1, 0.2, 7.5};
    const std::vector<double> ys{0.42, 0.42, 0.42, 0.42};
    for (double h : {0.01, 1.0, 50.0}) {
        for (double x : {-10.0, 0.0, 3.3}) {
            CHECK(nadaraya_watson(xs, ys, x, h) == 0.42);
        }
    }
}

TEST_CASE("nadaraya-watson: symmetric two-point cases") {
    const std::vector<double> xs{0.0, 1.0};
    const std::vector<double> ys{0.0, 1.0};
    CHECK_THAT(nadaraya_watson(xs, ys, 0.5, 0.3), Catch::Matchers::WithinAbs(0.5, 1e-15));
    // query at 0, h = 1: weight ratio e^0 : e^{-1/2}
    const double expected = std::exp(-0.5) / (1.0 + std::exp(-0.5));
    CHECK_THAT(nadaraya_watson(xs, ys, 0.0, 1.0), Catch::Matchers::WithinAbs(expected, 1e-12));
    CHECK_THAT(nadaraya_watson(xs, ys, 0.0, 1.0), Catch::Matchers::WithinAbs(0.3775, 5e-5));
}

TEST_CASE("nadaraya-watson: estimate stays within the convex hull of ys") {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> ux(-5.0, 5.0);
    std::uniform_real_distribution<double> uy(-10.0, 10.0);
    std::uniform_real_distribution<double> uh(0.01, 3.0);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 1 + static_cast<int>(rng() % 20);
        std::vector<double> xs(static_cast<std::size_t>(n)), ys(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            xs[static_cast<std::size_t>(i)] = ux(rng);
            ys[static_cast<std::size_t>(i)] = uy(rng);
        }
        const double est = nadaraya_watson(xs, ys, ux(rng), uh(rng));
        const auto [lo, hi] = std::minmax_element(ys.begin(), ys.end());
        CHECK(est >= *lo - 1e-12);
        CHECK(est <= *hi + 1e-12);
    }
}

TEST_CASE("nadaraya-watson: total underflow falls back to the nearest sample") {
    const std::vector<double> xs{0.0, 1.0};
    const std::vector<double> ys{5.0, 9.0};
    bool underflowed = false;
    const double est = nadaraya_watson(xs, ys, 1e6, 1e-3, &underflowed);
    CHECK(underflowed);
    CHECK(est == 9.0);
}

TEST_CASE("accelerated estimator: zero threshold matches the reference estimator") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    std::vector<double> xs(200), ys(200);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        xs[i] = u(rng);
        ys[i] = std::sin(3.0 * xs[i]);
    }
    std::sort(xs.begin(), xs.end());
    const auto res = accelerated_nw_all(xs, ys, 0.25, 0.0);
    REQUIRE(res.estimates.size() == xs.size());
    // full sweep: N evaluations per query
    CHECK(res.interactions == static_cast<std::int64_t>(xs.size() * xs.size()));
    for (std::size_t q = 0; q < xs.size(); ++q) {
        CHECK_THAT(res.estimates[q],
                   Catch::Matchers::WithinRel(nadaraya_watson(xs, ys, xs[q], 0.25), 1e-12));
    }
}

TEST_CASE("accelerated estimator: well-separated clusters are severed by the threshold") {
    const double h = 0.1;
    // two clusters 20h apart; cross contributions are below any sane threshold
    std::vector<double> left{0.00, 0.02, 0.05, 0.08, 0.11};
    std::vector<double> right;
    for (double x : left) right.push_back(x + 20.0 * h);
    std::vector<double> xs = left;
    xs.insert(xs.end(), right.begin(), right.end());
    std::vector<double> ys{1.0, 1.1, 0.9, 1.2, 1.05, 5.0, 5.2, 4.9, 5.1, 5.3};

    const double tau = 1e-20;  // far above K(20h/h) but below within-cluster weights
    const auto res = accelerated_nw_all(xs, ys, h, tau);

    const std::vector<double> ys_left(ys.begin(), ys.begin() + 5);
    const std::vector<double> ys_right(ys.begin() + 5, ys.end());
    for (std::size_t q = 0; q < 5; ++q) {
        CHECK_THAT(res.estimates[q],
                   Catch::Matchers::WithinRel(nadaraya_watson(left, ys_left, xs[q], h), 1e-12));
        CHECK_THAT(res.estimates[q + 5],
                   Catch::Matchers::WithinRel(nadaraya_watson(right, ys_right, xs[q + 5], h), 1e-12));
    }
    CHECK(res.interactions < static_cast<std::int64_t>(xs.size() * xs.size()));
}

TEST_CASE("accelerated estimator: three-point hand computation") {
    const std::vector<double> xs{0.0, 1.0, 3.0};
    const std::vector<double> ys{2.0, 4.0, 10.0};
    const double h = 1.0, tau = 0.1;
    // query at 0: self K(0), right neighbour K(1) >= tau, then K(3) < tau stops
    const double k0 = gaussian_kernel(0.0), k1 = gaussian_kernel(1.0);
    const double expected0 = (k0 * 2.0 + k1 * 4.0) / (k0 + k1);
    // query at 1: self, left K(1), right K(2) >= tau... K(2) = 0.05399 < 0.1 stops
    const double expected1 = (k0 * 4.0 + k1 * 2.0) / (k0 + k1);
    // query at 3: self, left K(2) < tau stops immediately
    const double expected2 = 10.0;
    const auto res = accelerated_nw_all(xs, ys, h, tau);
    CHECK_THAT(res.estimates[0], Catch::Matchers::WithinRel(expected0, 1e-14));
    CHECK_THAT(res.estimates[1], Catch::Matchers::WithinRel(expected1, 1e-14));
    CHECK_THAT(res.estimates[2], Catch::Matchers::WithinRel(expected2, 1e-14));
    // evaluations: q0: self + K(1) + K(3)-stop = 3; q1: self + K(1) + K(2)-stop = 3;
    // q2: self + K(2)-stop = 2
    CHECK(res.interactions == 8);
}

TEST_CASE("accelerated-vs-naive deviation bound") {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> xs(500), ys(500);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        xs[i] = u(rng);
        ys[i] = 2.0 + std::cos(4.0 * xs[i]);
    }
    std::sort(xs.begin(), xs.end());
    const double h = 0.05;
    const double tau = 1.0 / 500.0;
    const auto fast = accelerated_nw_all(xs, ys, h, tau);
    const auto naive = accelerated_nw_all(xs, ys, h, 0.0);
    const double max_y = *std::max_element(ys.begin(), ys.end());
    for (std::size_t q = 0; q < xs.size(); ++q) {
        // crude bound: each dropped particle contributes < tau * max|y| to the
        // numerator and < tau to the denominator
        double den = 0.0;
        for (std::size_t j = 0; j < xs.size(); ++j) den += gaussian_kernel((xs[q] - xs[j]) / h);
        const double bound = 2.0 * tau * static_cast<double>(xs.size()) * max_y / den;
        CHECK(std::abs(fast.estimates[q] - naive.estimates[q]) <= bound);
    }
    CHECK(fast.interactions < naive.interactions);
}

TEST_CASE("kernel config validation") {
    CHECK_THROWS_AS(make_kernel_config(KernelConfig::Mode::naive, 0.0, 0.0), config_error);
    CHECK_THROWS_AS(make_kernel_config(KernelConfig::Mode::naive, 1.0, 0.0), config_error);
    CHECK_THROWS_AS(make_kernel_config(KernelConfig::Mode::accelerated, 0.1, -1.0), config_error);
    const auto cfg = make_kernel_config(KernelConfig::Mode::accelerated, 0.1, 1e-4);
    CHECK_THAT(cfg.bandwidth(100000), Catch::Matchers::WithinRel(std::pow(10.0, -0.5), 1e-12));
}

TEST_CASE("parametric fit: exact line through three points") {
    BasisSpec basis;
    basis.fns = {[](double) { return 1.0; }, [](double x) { return x; }};
    basis.names = {"1", "x"};
    const std::vector<double> xs{0.0, 1.0, 2.0};
    const std::vector<double> ys{0.0, 1.0, 2.0};
    const auto alpha = fit_parametric(xs, ys, basis);
    REQUIRE(alpha.size() == 2);
    CHECK_THAT(alpha[0], Catch::Matchers::WithinAbs(0.0, 1e-12));
    CHECK_THAT(alpha[1], Catch::Matchers::WithinAbs(1.0, 1e-12));
}

TEST_CASE("parametric fit: constant basis returns the mean") {
    BasisSpec basis;
    basis.fns = {[](double) { return 1.0; }};
    basis.names = {"1"};
    const std::vector<double> xs{1.0, 2.0, 3.0, 4.0};
    const std::vector<double> ys{2.0, 4.0, 8.0, 10.0};
    const auto alpha = fit_parametric(xs, ys, basis);
    CHECK_THAT(alpha[0], Catch::Matchers::WithinRel(6.0, 1e-13));
}

TEST_CASE("parametric fit: recovers coefficients when ys lie in the span") {
    const auto basis = log_moneyness_monomials(100.0, 3);
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(60.0, 160.0);
    std::vector<double> xs(50), ys(50);
    const std::vector<double> truth{0.04, -0.01, 0.003, 0.0021};
    for (std::size_t i = 0; i < xs.size(); ++i) {
        xs[i] = u(rng);
        double y = 0.0;
        for (std::size_t l = 0; l < truth.size(); ++l) y += truth[l] * basis.fns[l](xs[i]);
        ys[i] = y;
    }
    const auto alpha = fit_parametric(xs, ys, basis);
    for (std::size_t l = 0; l < truth.size(); ++l) {
        CHECK_THAT(alpha[l], Catch::Matchers::WithinAbs(truth[l], 1e-9));
    }
}

TEST_CASE("parametric fit: residual is orthogonal to the basis") {
    const auto basis = log_moneyness_monomials(100.0, 2);
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(50.0, 200.0);
    std::normal_distribution<double> noise(0.0, 0.3);
    std::vector<double> xs(200), ys(200);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        xs[i] = u(rng);
        ys[i] = 0.05 + 0.02 * std::log(xs[i] / 100.0) + noise(rng);
    }
    const auto alpha = fit_parametric(xs, ys, basis);
    for (std::size_t l = 0; l < basis.size(); ++l) {
        double dot = 0.0, scale = 0.0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            double fit = 0.0;
            for (std::size_t k = 0; k < basis.size(); ++k) fit += alpha[k] * basis.fns[k](xs[i]);
            const double f = basis.fns[l](xs[i]);
            dot += (ys[i] - fit) * f;
            scale += std::abs(ys[i] * f);
        }
        CHECK(std::abs(dot) <= 1e-8 * std::max(1.0, scale));
    }
}

TEST_CASE("parametric fit: rank deficiency names the offending basis function") {
    BasisSpec basis;
    basis.fns = {[](double) { return 1.0; }, [](double x) { return x; },
                 [](double x) { return 2.0 * x; }};
    basis.names = {"1", "x", "2x"};
    const std::vector<double> xs{0.0, 1.0, 2.0, 3.0};
    const std::vector<double> ys{0.0, 1.0, 2.0, 3.0};
    CHECK_THROWS_WITH(fit_parametric(xs, ys, basis), Catch::Matchers::ContainsSubstring("2x"));
}

TEST_CASE("parametric fit: input validation") {
    BasisSpec basis;
    basis.fns = {[](double) { return 1.0; }, [](double x) { return x; }};
    basis.names = {"1", "x"};
    const std::vector<double> xs{1.0};
    const std::vector<double> ys{1.0};
    CHECK_THROWS_AS(fit_parametric(xs, ys, basis), config_error);
}
