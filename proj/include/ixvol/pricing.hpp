#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "particle.hpp"
#include "sde.hpp"

namespace ixvol {

inline double norm_cdf(double x) { return 0.5 * std::erfc(-x * 0.70710678118654752440); }

// Black-Scholes call with continuous dividend yield q. Degenerate corners
// (sigma, T or K at zero) return the corresponding limits.
inline double lognormal_call(double s0, double strike, double maturity, double rate, double q,
                             double sigma) {
    if (!(s0 > 0.0)) throw config_error("lognormal_call: s0 must be > 0");
    if (strike <= 0.0) return std::exp(-q * maturity) * s0 - std::exp(-rate * maturity) * strike;
    if (maturity <= 0.0 || sigma <= 0.0) {
        return std::max(std::exp(-q * maturity) * s0 - std::exp(-rate * maturity) * strike, 0.0);
    }
    const double vs = sigma * std::sqrt(maturity);
    const double d1 = (std::log(s0 / strike) + (rate - q + 0.5 * sigma * sigma) * maturity) / vs;
    const double d2 = d1 - vs;
    return std::exp(-q * maturity) * s0 * norm_cdf(d1) -
           std::exp(-rate * maturity) * strike * norm_cdf(d2);
}

inline double lognormal_put(double s0, double strike, double maturity, double rate, double q,
                            double sigma) {
    return lognormal_call(s0, strike, maturity, rate, q, sigma) - std::exp(-q * maturity) * s0 +
           std::exp(-rate * maturity) * strike;
}

enum class InversionStatus { ok, ok_widened, below_intrinsic, above_spot };

inline const char* to_string(InversionStatus s) {
    switch (s) {
        case InversionStatus::ok: return "ok";
        case InversionStatus::ok_widened: return "ok_widened";
        case InversionStatus::below_intrinsic: return "below_intrinsic";
        case InversionStatus::above_spot: return "above_spot";
    }
    return "?";
}

struct InversionResult {
    InversionStatus status = InversionStatus::ok;
    double vol = 0.0;
};

inline constexpr double kVolBracketLo = 1e-4;
inline constexpr double kVolBracketHi = 5.0;

// Bisection for the volatility reproducing a call price, on [1e-4, 5] per
// sqrt(year); the bracket is widened (and reported) when the upper bound
// binds. Prices outside the no-arbitrage band are reported, not inverted.
inline InversionResult implied_vol_checked(double price, double s0, double strike, double maturity,
                                           double rate, double q) {
    if (!(s0 > 0.0 && strike > 0.0 && maturity > 0.0)) {
        throw config_error("implied_vol: s0, strike and maturity must be > 0");
    }
    const double lower = std::max(std::exp(-q * maturity) * s0 - std::exp(-rate * maturity) * strike, 0.0);
    const double upper = std::exp(-q * maturity) * s0;
    if (price <= lower) return {InversionStatus::below_intrinsic, 0.0};
    if (price >= upper) return {InversionStatus::above_spot, 0.0};

    double lo = kVolBracketLo, hi = kVolBracketHi;
    bool widened = false;
    if (lognormal_call(s0, strike, maturity, rate, q, lo) >= price) {
        return {InversionStatus::ok, lo};
    }
    while (lognormal_call(s0, strike, maturity, rate, q, hi) < price) {
        widened = true;
        hi *= 2.0;
        if (hi > 40.0) {
            throw numeric_error("implied_vol: no volatility below 40 reproduces the price " + fmt17(price));
        }
    }
    const double tol = 1e-10 * s0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        const double diff = lognormal_call(s0, strike, maturity, rate, q, mid) - price;
        if ((std::abs(diff) <= tol && hi - lo < 1e-9) || hi - lo < 1e-15) {
            return {widened ? InversionStatus::ok_widened : InversionStatus::ok, mid};
        }
        if (diff < 0.0) lo = mid;
        else hi = mid;
    }
    return {widened ? InversionStatus::ok_widened : InversionStatus::ok, 0.5 * (lo + hi)};
}

inline double implied_vol(double price, double s0, double strike, double maturity, double rate,
                          double q) {
    const auto res = implied_vol_checked(price, s0, strike, maturity, rate, q);
    if (res.status == InversionStatus::below_intrinsic) {
        throw numeric_error("implied_vol: price " + fmt17(price) + " is at or below the intrinsic bound");
    }
    if (res.status == InversionStatus::above_spot) {
        throw numeric_error("implied_vol: price " + fmt17(price) + " is at or above the spot bound");
    }
    return res.vol;
}

struct PriceEstimate {
    double price = 0.0;
    double stderr_est = 0.0;
};

namespace detail {

template <typename Payoff>
PriceEstimate mc_discounted_mean(std::span<const double> terminals, double rate, double maturity,
                                 Payoff&& payoff) {
    if (terminals.empty()) throw config_error("mc pricing: empty ensemble");
    const double df = std::exp(-rate * maturity);
    double sum = 0.0, sum2 = 0.0;
    for (double x : terminals) {
        const double p = payoff(x);
        sum += p;
        sum2 += p * p;
    }
    const double n = static_cast<double>(terminals.size());
    const double mean = sum / n;
    const double var = std::max(sum2 / n - mean * mean, 0.0);
    PriceEstimate out;
    out.price = df * mean;
    out.stderr_est = terminals.size() > 1 ? df * std::sqrt(var / (n - 1.0)) : 0.0;
    return out;
}

} // namespace detail

inline PriceEstimate mc_vanilla_terminals(std::span<const double> terminals, double strike,
                                          double rate, double maturity) {
    return detail::mc_discounted_mean(terminals, rate, maturity,
                                      [strike](double x) { return std::max(x - strike, 0.0); });
}

inline PriceEstimate mc_put_terminals(std::span<const double> terminals, double strike, double rate,
                                      double maturity) {
    return detail::mc_discounted_mean(terminals, rate, maturity,
                                      [strike](double x) { return std::max(strike - x, 0.0); });
}

// Discounted mean call payoff of a recorded series at a grid time.
inline PriceEstimate mc_vanilla(const PathEnsemble& ensemble, const RecordedSeries& series,
                                double strike, double rate, double maturity) {
    const int step = ensemble.step_of_time(maturity);
    const auto col = ensemble.column(series, step);
    return mc_vanilla_terminals(col, strike, rate, maturity);
}

inline PriceEstimate mc_vanilla(const ParticleCloud& cloud, double strike, double rate,
                                double maturity) {
    const double k = maturity / cloud.dt;
    const int ki = static_cast<int>(std::lround(k));
    if (ki < 0 || ki > cloud.n_steps || std::abs(k - ki) > 1e-9 * cloud.n_steps) {
        throw config_error("mc_vanilla: maturity not on the particle grid");
    }
    return mc_vanilla_terminals(cloud.stocks[static_cast<std::size_t>(ki)], strike, rate, maturity);
}

// Strike -> implied vol curve with per-strike MC errors. Strikes are
// moneyness times the spot reference.
struct SmileCurve {
    std::string underlying;
    double maturity = 0.0;
    std::vector<double> moneyness;
    std::vector<double> implied_vols;  // NaN where inversion failed
    std::vector<double> prices;
    std::vector<double> stderrs;
    std::vector<InversionStatus> status;
};

// In-the-money calls are inverted through the out-of-the-money put plus the
// deterministic scheme forward, which prices the same contract with far less
// Monte Carlo noise; the quoted price and stderr follow the inverted side.
inline SmileCurve smile_from_terminals(std::span<const double> terminals, double spot_ref,
                                       double scheme_forward,
                                       const std::vector<double>& moneyness_grid, double rate,
                                       double q, double maturity, const std::string& underlying) {
    SmileCurve curve;
    curve.underlying = underlying;
    curve.maturity = maturity;
    const double df = std::exp(-rate * maturity);
    for (double m : moneyness_grid) {
        const double strike = m * spot_ref;
        PriceEstimate call;
        if (strike < scheme_forward) {
            const auto put = mc_put_terminals(terminals, strike, rate, maturity);
            call.price = put.price + df * (scheme_forward - strike);
            call.stderr_est = put.stderr_est;
        } else {
            call = mc_vanilla_terminals(terminals, strike, rate, maturity);
        }
        const auto inv = implied_vol_checked(call.price, spot_ref, strike, maturity, rate, q);
        curve.moneyness.push_back(m);
        curve.prices.push_back(call.price);
        curve.stderrs.push_back(call.stderr_est);
        curve.status.push_back(inv.status);
        const bool ok = inv.status == InversionStatus::ok || inv.status == InversionStatus::ok_widened;
        curve.implied_vols.push_back(ok ? inv.vol : std::numeric_limits<double>::quiet_NaN());
    }
    return curve;
}

inline SmileCurve smile(const PathEnsemble& ensemble, const RecordedSeries& series,
                        const std::vector<double>& moneyness_grid, double rate, double q,
                        double maturity) {
    const int step = ensemble.step_of_time(maturity);
    const auto col = ensemble.column(series, step);
    const double fwd = series.x0 * series.fwd_factors[static_cast<std::size_t>(step)];
    return smile_from_terminals(col, series.x0, fwd, moneyness_grid, rate, q, maturity, series.name);
}

inline SmileCurve smile(const ParticleCloud& cloud, const std::vector<double>& moneyness_grid,
                        double rate, double q, double maturity) {
    const double k = maturity / cloud.dt;
    const int ki = static_cast<int>(std::lround(k));
    if (ki < 0 || ki > cloud.n_steps || std::abs(k - ki) > 1e-9 * cloud.n_steps) {
        throw config_error("smile: maturity not on the particle grid");
    }
    const double fwd = cloud.s0 * std::pow(1.0 + (cloud.rate - cloud.dividend) * cloud.dt, ki);
    return smile_from_terminals(cloud.stocks[static_cast<std::size_t>(ki)], cloud.s0, fwd,
                                moneyness_grid, rate, q, maturity, "stock");
}

// Discounted MC price of (min_j S^j_T / S^j_0 - K)+ over all recorded stocks.
inline PriceEstimate worst_of_price(const PathEnsemble& ensemble, double strike, double rate,
                                    double maturity) {
    if (ensemble.stocks.empty()) {
        throw config_error("worst_of_price: ensemble has no recorded stock paths");
    }
    const int step = ensemble.step_of_time(maturity);
    const double df = std::exp(-rate * maturity);
    double sum = 0.0, sum2 = 0.0;
    for (std::int64_t p = 0; p < ensemble.n_paths; ++p) {
        double worst = std::numeric_limits<double>::infinity();
        for (const auto& s : ensemble.stocks) {
            worst = std::min(worst, ensemble.value(s, p, step) / s.x0);
        }
        const double payoff = std::max(worst - strike, 0.0);
        sum += payoff;
        sum2 += payoff * payoff;
    }
    const double n = static_cast<double>(ensemble.n_paths);
    const double mean = sum / n;
    const double var = std::max(sum2 / n - mean * mean, 0.0);
    PriceEstimate out;
    out.price = df * mean;
    out.stderr_est = ensemble.n_paths > 1 ? df * std::sqrt(var / (n - 1.0)) : 0.0;
    return out;
}

} // namespace ixvol
