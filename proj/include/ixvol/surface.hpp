#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "csv.hpp"
#include "errors.hpp"

namespace ixvol {

namespace detail {

inline void check_strictly_increasing(const std::vector<double>& g, const std::string& name) {
    if (g.empty()) throw config_error(name + ": grid is empty");
    for (std::size_t i = 1; i < g.size(); ++i) {
        if (!(g[i] > g[i - 1])) {
            throw config_error(name + ": grid must be strictly increasing (index " +
                               std::to_string(i) + ")");
        }
    }
}

// Index of the cell [g[i], g[i+1]] containing x, clamped to the grid so that
// out-of-range queries reuse the edge cell (flat extrapolation happens via
// clamping the query itself).
inline std::size_t cell_index(const std::vector<double>& g, double x) {
    if (g.size() == 1 || x <= g.front()) return 0;
    if (x >= g.back()) return g.size() - 2;
    const auto it = std::upper_bound(g.begin(), g.end(), x);
    return static_cast<std::size_t>(it - g.begin()) - 1;
}

} // namespace detail

// Gridded volatility surface with bilinear interpolation in (t, level) and
// flat extrapolation beyond the grid hull. Values are capped by a declared
// bound so downstream coefficients stay bounded. The level grid is either an
// absolute level (index surfaces) or moneyness (stock surfaces); the flag
// records which. Immutable after construction.
struct VolSurface {
    std::vector<double> times;   // strictly increasing, >= 0
    std::vector<double> levels;  // strictly increasing, > 0
    std::vector<double> values;  // row-major [times][levels], vol per sqrt(year)
    double cap = 5.0;            // declared bound K_b
    bool levels_are_moneyness = false;

    double at(std::size_t ti, std::size_t li) const { return values[ti * levels.size() + li]; }

    // Bilinear interpolation in native coordinates; flat outside the hull.
    // std::lerp keeps node queries and constant surfaces exact.
    double eval(double t, double x) const {
        const double tc = std::clamp(t, times.front(), times.back());
        const double xc = std::clamp(x, levels.front(), levels.back());
        const std::size_t i = detail::cell_index(times, tc);
        const std::size_t j = detail::cell_index(levels, xc);
        if (times.size() == 1 && levels.size() == 1) return at(0, 0);
        double wt = 0.0, wx = 0.0;
        if (times.size() > 1) wt = (tc - times[i]) / (times[i + 1] - times[i]);
        if (levels.size() > 1) wx = (xc - levels[j]) / (levels[j + 1] - levels[j]);
        const std::size_t i1 = times.size() > 1 ? i + 1 : i;
        const std::size_t j1 = levels.size() > 1 ? j + 1 : j;
        const double lo = std::lerp(at(i, j), at(i, j1), wx);
        const double hi = std::lerp(at(i1, j), at(i1, j1), wx);
        return std::lerp(lo, hi, wt);
    }

    // Evaluate at an absolute level, converting through the reference spot
    // when the grid is in moneyness.
    double value_at_level(double t, double level, double ref_spot) const {
        return eval(t, levels_are_moneyness ? level / ref_spot : level);
    }

    double max_value() const { return *std::max_element(values.begin(), values.end()); }

    // Discrete estimate of the Lipschitz constant of x -> x*vol(t,x) over the
    // grid (native level coordinates).
    double lipschitz_x_vol() const {
        double best = 0.0;
        for (std::size_t ti = 0; ti < times.size(); ++ti) {
            for (std::size_t li = 0; li + 1 < levels.size(); ++li) {
                const double a = levels[li] * at(ti, li);
                const double b = levels[li + 1] * at(ti, li + 1);
                best = std::max(best, std::abs(b - a) / (levels[li + 1] - levels[li]));
            }
        }
        return best;
    }

    // Discrete estimate of the Lipschitz constant of x -> vol(t,x).
    double lipschitz_vol() const {
        double best = 0.0;
        for (std::size_t ti = 0; ti < times.size(); ++ti) {
            for (std::size_t li = 0; li + 1 < levels.size(); ++li) {
                const double d = std::abs(at(ti, li + 1) - at(ti, li));
                best = std::max(best, d / (levels[li + 1] - levels[li]));
            }
        }
        return best;
    }
};

using SurfacePtr = std::shared_ptr<const VolSurface>;

inline VolSurface make_vol_surface(std::vector<double> times, std::vector<double> levels,
                                   std::vector<double> values, double cap = 5.0,
                                   bool levels_are_moneyness = false) {
    detail::check_strictly_increasing(times, "surface time grid");
    detail::check_strictly_increasing(levels, "surface level grid");
    if (times.front() < 0.0) throw config_error("surface time grid: times must be >= 0");
    if (levels.front() <= 0.0) throw config_error("surface level grid: levels must be > 0");
    if (values.size() != times.size() * levels.size()) {
        throw config_error("surface values: expected " +
                           std::to_string(times.size() * levels.size()) + " entries, got " +
                           std::to_string(values.size()));
    }
    if (!(cap > 0.0)) throw config_error("surface cap: must be > 0");
    for (double v : values) {
        if (!std::isfinite(v) || v < 0.0) throw config_error("surface values: negative or non-finite value");
        if (v > cap) {
            throw config_error("surface values: value " + fmt17(v) + " exceeds declared cap " + fmt17(cap));
        }
    }
    VolSurface s;
    s.times = std::move(times);
    s.levels = std::move(levels);
    s.values = std::move(values);
    s.cap = cap;
    s.levels_are_moneyness = levels_are_moneyness;
    return s;
}

inline VolSurface build_surface_from_function(const std::function<double(double, double)>& f,
                                              const std::vector<double>& time_grid,
                                              const std::vector<double>& level_grid,
                                              double cap = 5.0, bool levels_are_moneyness = false) {
    std::vector<double> vals;
    vals.reserve(time_grid.size() * level_grid.size());
    for (double t : time_grid) {
        for (double x : level_grid) {
            vals.push_back(f(t, x));
        }
    }
    return make_vol_surface(time_grid, level_grid, std::move(vals), cap, levels_are_moneyness);
}

inline VolSurface constant_surface(double vol, double horizon, double level_lo, double level_hi,
                                   double cap = 5.0, bool moneyness = false) {
    return make_vol_surface({0.0, horizon}, {level_lo, level_hi}, {vol, vol, vol, vol}, cap, moneyness);
}

// CSV layout: header row = level grid (first cell "time"), one row per time
// with the time in the first column and the values after it.
inline std::string surface_to_csv(const VolSurface& s) {
    std::ostringstream out;
    out << "time";
    for (double x : s.levels) out << ',' << fmt17(x);
    out << '\n';
    for (std::size_t ti = 0; ti < s.times.size(); ++ti) {
        out << fmt17(s.times[ti]);
        for (std::size_t li = 0; li < s.levels.size(); ++li) out << ',' << fmt17(s.at(ti, li));
        out << '\n';
    }
    return out.str();
}

inline void write_surface_csv(const VolSurface& s, const std::string& path) {
    write_file_atomic(path, surface_to_csv(s));
}

inline VolSurface read_surface_csv(const std::string& path, double cap = 5.0,
                                   bool levels_are_moneyness = false) {
    std::ifstream in(path);
    if (!in) throw config_error("surface file not found: " + path);
    std::string line;
    if (!std::getline(in, line)) throw config_error("surface file is empty: " + path);
    const auto header = split_csv_line(line);
    if (header.size() < 2) throw config_error("surface file " + path + ": header needs >= 1 level");
    std::vector<double> levels;
    for (std::size_t i = 1; i < header.size(); ++i) {
        try {
            levels.push_back(std::stod(header[i]));
        } catch (const std::exception&) {
            throw config_error("surface file " + path + ": bad level '" + header[i] + "'");
        }
    }
    std::vector<double> times, values;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != header.size()) {
            throw config_error("surface file " + path + ": row with " + std::to_string(cells.size()) +
                               " cells, expected " + std::to_string(header.size()));
        }
        try {
            times.push_back(std::stod(cells[0]));
            for (std::size_t i = 1; i < cells.size(); ++i) values.push_back(std::stod(cells[i]));
        } catch (const std::exception&) {
            throw config_error("surface file " + path + ": non-numeric cell");
        }
    }
    return make_vol_surface(std::move(times), std::move(levels), std::move(values), cap,
                            levels_are_moneyness);
}

// Call-price grid used by the Dupire extractor.
struct PriceSurface {
    std::vector<double> times;    // strictly increasing, > 0
    std::vector<double> strikes;  // strictly increasing, > 0
    std::vector<double> calls;    // row-major [times][strikes]
    double spot = 0.0;
    double rate = 0.0;
    double dividend = 0.0;  // continuous yield of the underlying

    double at(std::size_t ti, std::size_t ki) const { return calls[ti * strikes.size() + ki]; }
};

inline PriceSurface make_price_surface(std::vector<double> times, std::vector<double> strikes,
                                       std::vector<double> calls, double spot, double rate,
                                       double dividend) {
    detail::check_strictly_increasing(times, "price surface time grid");
    detail::check_strictly_increasing(strikes, "price surface strike grid");
    if (times.front() <= 0.0) throw config_error("price surface time grid: times must be > 0");
    if (strikes.front() <= 0.0) throw config_error("price surface strike grid: strikes must be > 0");
    if (calls.size() != times.size() * strikes.size()) {
        throw config_error("price surface values: dimension mismatch");
    }
    if (!(spot > 0.0)) throw config_error("price surface spot: must be > 0");
    PriceSurface ps;
    ps.times = std::move(times);
    ps.strikes = std::move(strikes);
    ps.calls = std::move(calls);
    ps.spot = spot;
    ps.rate = rate;
    ps.dividend = dividend;
    const double tol = 1e-8 * spot;
    for (std::size_t ti = 0; ti < ps.times.size(); ++ti) {
        for (std::size_t ki = 0; ki < ps.strikes.size(); ++ki) {
            const double c = ps.at(ti, ki);
            if (!std::isfinite(c) || c < -tol) {
                throw config_error("price surface values: negative call price at (t=" +
                                   fmt17(ps.times[ti]) + ", K=" + fmt17(ps.strikes[ki]) + ")");
            }
            const double intrinsic = std::exp(-ps.dividend * ps.times[ti]) * spot -
                                     std::exp(-ps.rate * ps.times[ti]) * ps.strikes[ki];
            if (c + tol < std::max(intrinsic, 0.0)) {
                throw config_error("price surface values: below intrinsic bound at (t=" +
                                   fmt17(ps.times[ti]) + ", K=" + fmt17(ps.strikes[ki]) + ")");
            }
            if (ki > 0 && ps.at(ti, ki - 1) + tol < c) {
                throw config_error("price surface values: increasing in strike at (t=" +
                                   fmt17(ps.times[ti]) + ", K=" + fmt17(ps.strikes[ki]) + ")");
            }
        }
    }
    return ps;
}

inline constexpr double kVarianceFloor = 1e-6;

// Local variance from the call grid:
//   2 (dC/dt + (r - q) K dC/dK + q C) / (K^2 d2C/dK2)
// with central differences in strike, forward time difference on the first
// slice, backward on the last, central elsewhere. The ratio is clamped to
// [variance_floor, vol_cap^2]; a non-positive curvature is a butterfly
// arbitrage and raises instead of clamping.
inline double dupire_local_variance(const PriceSurface& ps, double t, double strike,
                                    double variance_floor = kVarianceFloor, double vol_cap = 5.0) {
    const std::size_t nt = ps.times.size();
    const std::size_t nk = ps.strikes.size();
    if (nt < 2 || nk < 3) throw config_error("dupire: need >= 2 times and >= 3 strikes");

    auto locate = [](const std::vector<double>& g, double x, const char* what) {
        const std::size_t i = detail::cell_index(g, x);
        const std::size_t j = (std::abs(g[i] - x) <= std::abs(g[std::min(i + 1, g.size() - 1)] - x))
                                  ? i
                                  : i + 1;
        if (std::abs(g[j] - x) > 1e-9 * std::max(1.0, std::abs(x))) {
            throw config_error(std::string("dupire: ") + what + " " + fmt17(x) +
                               " is not on the price grid");
        }
        return j;
    };
    const std::size_t ti = locate(ps.times, t, "time");
    const std::size_t ki = locate(ps.strikes, strike, "strike");
    if (ki == 0 || ki + 1 >= nk) {
        throw config_error("dupire: strike " + fmt17(strike) + " must be interior to the grid");
    }

    const double k = ps.strikes[ki];
    const double c = ps.at(ti, ki);

    double dcdt;
    if (ti == 0) {
        dcdt = (ps.at(1, ki) - ps.at(0, ki)) / (ps.times[1] - ps.times[0]);
    } else if (ti + 1 == nt) {
        dcdt = (ps.at(nt - 1, ki) - ps.at(nt - 2, ki)) / (ps.times[nt - 1] - ps.times[nt - 2]);
    } else {
        dcdt = (ps.at(ti + 1, ki) - ps.at(ti - 1, ki)) / (ps.times[ti + 1] - ps.times[ti - 1]);
    }

    const double hl = ps.strikes[ki] - ps.strikes[ki - 1];
    const double hr = ps.strikes[ki + 1] - ps.strikes[ki];
    const double dcdk = (ps.at(ti, ki + 1) - ps.at(ti, ki - 1)) / (hl + hr);
    const double d2cdk2 =
        2.0 * (hl * ps.at(ti, ki + 1) - (hl + hr) * c + hr * ps.at(ti, ki - 1)) / (hl * hr * (hl + hr));

    const double butterfly_floor = 1e-12 * ps.spot;
    if (d2cdk2 <= butterfly_floor) {
        throw numeric_error("dupire: butterfly arbitrage (non-positive call curvature) at (t=" +
                            fmt17(ps.times[ti]) + ", K=" + fmt17(k) + ")");
    }

    const double q = ps.dividend;
    const double numerator = dcdt + (ps.rate - q) * k * dcdk + q * c;
    const double variance = 2.0 * numerator / (k * k * d2cdk2);
    return std::clamp(variance, variance_floor, vol_cap * vol_cap);
}

} // namespace ixvol
