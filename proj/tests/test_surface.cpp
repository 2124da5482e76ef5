#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "ixvol/pricing.hpp"
#include "ixvol/surface.hpp"

using namespace ixvol;

TEST_CASE("constant surface evaluates to the constant everywhere") {
    const auto s = constant_surface(0.2, 1.0, 50.0, 200.0);
    CHECK(s.eval(0.0, 50.0) == 0.2);
    CHECK(s.eval(0.37, 123.4) == 0.2);
    CHECK(s.eval(5.0, 1000.0) == 0.2);  // flat extrapolation
}

TEST_CASE("grid nodes reproduce stored values exactly") {
    const auto s = make_vol_surface({0.0, 1.0}, {80.0, 120.0}, {0.1, 0.2, 0.3, 0.4});
    CHECK(s.eval(0.0, 80.0) == 0.1);
    CHECK(s.eval(0.0, 120.0) == 0.2);
    CHECK(s.eval(1.0, 80.0) == 0.3);
    CHECK(s.eval(1.0, 120.0) == 0.4);
}

TEST_CASE("cell midpoint is the arithmetic bilinear blend") {
    const double a = 0.1, b = 0.24, c = 0.32, d = 0.48;
    const auto s = make_vol_surface({0.0, 1.0}, {80.0, 120.0}, {a, b, c, d});
    CHECK_THAT(s.eval(0.5, 100.0), Catch::Matchers::WithinAbs(0.25 * (a + b + c + d), 1e-15));
    // generic point, hand bilinear formula
    const double wt = 0.25, wx = 0.75;
    const double expected = (1 - wt) * ((1 - wx) * a + wx * b) + wt * ((1 - wx) * c + wx * d);
    CHECK_THAT(s.eval(0.25, 110.0), Catch::Matchers::WithinAbs(expected, 1e-15));
}

TEST_CASE("flat extrapolation beyond the hull") {
    const auto s = make_vol_surface({0.0, 1.0}, {80.0, 120.0}, {0.1, 0.2, 0.3, 0.4});
    CHECK(s.eval(-1.0, 70.0) == 0.1);
    CHECK(s.eval(2.0, 500.0) == 0.4);
    CHECK(s.eval(0.5, 10.0) == s.eval(0.5, 80.0));
}

TEST_CASE("eval is continuous: dense sampling against the interpolant Lipschitz bound") {
    const auto s = make_vol_surface({0.0, 0.5, 1.0}, {80.0, 100.0, 140.0},
                                    {0.10, 0.22, 0.18, 0.15, 0.27, 0.21, 0.19, 0.30, 0.24});
    double lip_t = 0.0, lip_x = 0.0;
    for (std::size_t i = 0; i + 1 < s.times.size(); ++i) {
        for (std::size_t j = 0; j < s.levels.size(); ++j) {
            lip_t = std::max(lip_t, std::abs(s.at(i + 1, j) - s.at(i, j)) / (s.times[i + 1] - s.times[i]));
        }
    }
    for (std::size_t i = 0; i < s.times.size(); ++i) {
        for (std::size_t j = 0; j + 1 < s.levels.size(); ++j) {
            lip_x = std::max(lip_x, std::abs(s.at(i, j + 1) - s.at(i, j)) / (s.levels[j + 1] - s.levels[j]));
        }
    }
    const double dt = 1e-4, dx = 1e-3;
    for (int i = 0; i <= 100; ++i) {
        for (int j = 0; j <= 100; ++j) {
            const double t = -0.1 + 1.2 * i / 100.0;
            const double x = 70.0 + 80.0 * j / 100.0;
            const double base = s.eval(t, x);
            CHECK(std::abs(s.eval(t + dt, x) - base) <= lip_t * dt * (1 + 1e-9) + 1e-14);
            CHECK(std::abs(s.eval(t, x + dx) - base) <= lip_x * dx * (1 + 1e-9) + 1e-14);
        }
    }
}

TEST_CASE("build_surface_from_function samples exactly") {
    const std::vector<double> times{0.0, 0.5, 1.0};
    const std::vector<double> levels{50.0, 100.0, 150.0};

    SECTION("constant 0.6") {
        const auto s = build_surface_from_function([](double, double) { return 0.6; }, times, levels);
        for (double v : s.values) CHECK(v == 0.6);
    }
    SECTION("indicator function reproduced at nodes") {
        auto f = [](double, double x) { return 0.2 + (x < 100.0 ? 0.1 : 0.0); };
        const auto s = build_surface_from_function(f, times, levels);
        for (double t : times) {
            for (double x : levels) CHECK(s.eval(t, x) == f(t, x));
        }
    }
    SECTION("values above the cap are rejected") {
        CHECK_THROWS_AS(build_surface_from_function([](double, double) { return 1.2; }, times, levels, 1.0),
                        config_error);
    }
    SECTION("negative values are rejected") {
        CHECK_THROWS_AS(build_surface_from_function([](double, double) { return -0.1; }, times, levels),
                        config_error);
    }
}

TEST_CASE("surface validation rejects bad grids") {
    CHECK_THROWS_AS(make_vol_surface({0.0, 0.0}, {1.0, 2.0}, {0.1, 0.1, 0.1, 0.1}), config_error);
    CHECK_THROWS_AS(make_vol_surface({0.0, 1.0}, {2.0, 1.0}, {0.1, 0.1, 0.1, 0.1}), config_error);
    CHECK_THROWS_AS(make_vol_surface({0.0, 1.0}, {1.0, 2.0}, {0.1, 0.1, 0.1}), config_error);
    CHECK_THROWS_AS(make_vol_surface({0.0, 1.0}, {-1.0, 2.0}, {0.1, 0.1, 0.1, 0.1}), config_error);
}

TEST_CASE("surface CSV round trip is bit exact") {
    const auto s = make_vol_surface({0.0, 0.3333333333333333, 1.0}, {80.0, 101.7, 140.0},
                                    {0.1, 0.2212345678901234, 0.18, 0.15, 0.27, 0.21, 0.19, 0.3, 0.24},
                                    0.9, true);
    const auto path = std::filesystem::temp_directory_path() / "ixvol_surface_roundtrip.csv";
    write_surface_csv(s, path.string());
    const auto back = read_surface_csv(path.string(), 0.9, true);
    CHECK(back.times == s.times);
    CHECK(back.levels == s.levels);
    CHECK(back.values == s.values);
    std::filesystem::remove(path);
}

namespace {

PriceSurface flat_vol_prices(double sigma, double spot, double rate, double q) {
    std::vector<double> times, strikes, calls;
    for (int i = 0; i <= 10; ++i) times.push_back(0.5 + 0.01 * i);
    for (int k = -20; k <= 20; ++k) strikes.push_back(spot * (1.0 + 0.005 * k));
    for (double t : times) {
        for (double strike : strikes) calls.push_back(lognormal_call(spot, strike, t, rate, q, sigma));
    }
    return make_price_surface(times, strikes, calls, spot, rate, q);
}

} // namespace

TEST_CASE("dupire recovers a constant local variance from lognormal prices") {
    const double sigma = 0.25;
    const auto ps = flat_vol_prices(sigma, 100.0, 0.02, 0.01);
    double vmin = 1e9, vmax = -1e9;
    for (std::size_t ti = 0; ti < ps.times.size(); ++ti) {
        for (std::size_t ki = 1; ki + 1 < ps.strikes.size(); ++ki) {
            const double v = dupire_local_variance(ps, ps.times[ti], ps.strikes[ki]);
            CHECK_THAT(v, Catch::Matchers::WithinAbs(sigma * sigma, 1e-3));
            vmin = std::min(vmin, v);
            vmax = std::max(vmax, v);
        }
    }
    // flatness: any two interior points agree within the same tolerance
    CHECK(vmax - vmin <= 1e-3);
}

TEST_CASE("dupire clamps a negative numerator to the variance floor") {
    auto ps = flat_vol_prices(0.25, 100.0, 0.0, 0.0);
    // push one node down so the forward time difference at the first slice
    // turns negative (calendar arbitrage), keeping strike-convexity intact
    const std::size_t nk = ps.strikes.size();
    const std::size_t ki = nk / 2;
    ps.calls[1 * nk + ki] = ps.calls[0 * nk + ki] - 0.5;
    CHECK(dupire_local_variance(ps, ps.times[0], ps.strikes[ki]) == kVarianceFloor);
}

TEST_CASE("dupire reports butterfly arbitrage") {
    auto ps = flat_vol_prices(0.25, 100.0, 0.0, 0.0);
    const std::size_t nk = ps.strikes.size();
    const std::size_t ki = nk / 2;
    // depress one quote so the curvature at its neighbour goes negative
    ps.calls[5 * nk + ki] -= 1.0;
    CHECK_THROWS_AS(dupire_local_variance(ps, ps.times[5], ps.strikes[ki + 1]), numeric_error);
}

TEST_CASE("price surface validation") {
    // increasing in strike
    CHECK_THROWS_AS(make_price_surface({1.0}, {90.0, 100.0}, {5.0, 6.0}, 100.0, 0.0, 0.0),
                    config_error);
    // below intrinsic: spot 100, strike 90, zero rates -> intrinsic 10
    CHECK_THROWS_AS(make_price_surface({1.0}, {90.0, 100.0}, {8.0, 7.0}, 100.0, 0.0, 0.0),
                    config_error);
}
