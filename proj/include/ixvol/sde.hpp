#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "model.hpp"
#include "noise.hpp"
#include "parallel.hpp"
#include "surface.hpp"

namespace ixvol {

inline constexpr double kLevelFloorScale = 1e-12;

// One simulated series over the ensemble: values are path-major, path p's
// level at step k sits at values[p * (n_steps + 1) + k]. fwd_factors[k] is
// the scheme-exact undiscounted forward factor E[X_k] / X_0 of the Euler
// recursion, used by the smile inverter.
struct RecordedSeries {
    std::string name;
    double x0 = 0.0;
    double dividend = 0.0;
    std::vector<double> fwd_factors;
    std::vector<double> values;
};

struct PathEnsemble {
    std::int64_t n_paths = 0;
    int n_steps = 0;
    double dt = 0.0;
    double horizon = 0.0;
    double rate = 0.0;
    std::uint64_t seed = 0;
    std::string noise_layout;
    std::int64_t clamp_count = 0;

    RecordedSeries index;
    std::vector<RecordedSeries> stocks;
    std::optional<RecordedSeries> index_companion;
    std::vector<RecordedSeries> stocks_companion;  // aligned with `stocks` when present
    std::optional<RecordedSeries> reconstructed_index;

    double value(const RecordedSeries& s, std::int64_t path, int step) const {
        return s.values[static_cast<std::size_t>(path) * (n_steps + 1) + step];
    }
    std::vector<double> column(const RecordedSeries& s, int step) const {
        std::vector<double> out(static_cast<std::size_t>(n_paths));
        for (std::int64_t p = 0; p < n_paths; ++p) out[static_cast<std::size_t>(p)] = value(s, p, step);
        return out;
    }
    int step_of_time(double t) const {
        const double k = t / dt;
        const int ki = static_cast<int>(std::lround(k));
        if (ki < 0 || ki > n_steps || std::abs(k - ki) > 1e-9 * (n_steps ? n_steps : 1)) {
            throw config_error("time " + fmt17(t) + " is not on the simulation grid");
        }
        return ki;
    }
};

namespace detail {

inline RecordedSeries make_series(const std::string& name, double x0, double dividend,
                                  double rate, double dt, int n_steps, std::int64_t n_paths) {
    RecordedSeries s;
    s.name = name;
    s.x0 = x0;
    s.dividend = dividend;
    s.fwd_factors.resize(static_cast<std::size_t>(n_steps) + 1);
    const double step = 1.0 + (rate - dividend) * dt;
    double f = 1.0;
    for (int k = 0; k <= n_steps; ++k) {
        s.fwd_factors[static_cast<std::size_t>(k)] = f;
        f *= step;
    }
    s.values.assign(static_cast<std::size_t>(n_paths) * (n_steps + 1), 0.0);
    return s;
}

inline double clamp_level(double x, double floor, std::int64_t& clamps) {
    if (x <= floor) {
        ++clamps;
        return floor;
    }
    return x;
}

inline void check_run_sizes(int n_steps, std::int64_t n_paths) {
    if (n_steps < 1) throw config_error("n_steps: must be >= 1");
    if (n_paths < 1) throw config_error("n_paths: must be >= 1");
}

} // namespace detail

struct CompanionRequest {
    bool enabled = false;
    LimitSpec limit;
};

// Coupled M-stock model: each stock carries beta_j * sigma(t, I^M) systemic
// volatility plus eta_j(t, S^j); the index is recomputed as the exact
// weighted sum after every step. Channel layout: 0 = shared index Brownian
// motion, 1 + j = stock j. With a companion request the limiting index and
// the limiting stocks are advanced with the same Gaussian draws, which is the
// coupling the convergence bench relies on.
inline PathEnsemble simulate_original(const ModelSpec& spec, int n_steps, std::int64_t n_paths,
                                      const NoisePlan& plan,
                                      const CompanionRequest& companion = {},
                                      std::vector<int> record_stocks = {}, int threads = 1) {
    detail::check_run_sizes(n_steps, n_paths);
    const int m = spec.n_stocks();
    for (int j : record_stocks) {
        if (j < 0 || j >= m) throw config_error("record_stocks: index out of range");
    }

    PathEnsemble out;
    out.n_paths = n_paths;
    out.n_steps = n_steps;
    out.dt = spec.horizon / n_steps;
    out.horizon = spec.horizon;
    out.rate = spec.rate;
    out.seed = plan.seed;
    out.noise_layout = "original/v1";

    const double dt = out.dt;
    const double sqdt = std::sqrt(dt);
    const double i0 = spec.index_0();

    out.index = detail::make_series("index", i0, 0.0, 0.0, dt, n_steps, n_paths);
    for (int k = 0; k <= n_steps; ++k) {
        double fwd = 0.0;
        for (int j = 0; j < m; ++j) {
            fwd += spec.weights[j] * spec.s0[j] * std::pow(1.0 + (spec.rate - spec.dividends[j]) * dt, k);
        }
        out.index.fwd_factors[static_cast<std::size_t>(k)] = fwd / i0;
    }

    for (int j : record_stocks) {
        out.stocks.push_back(detail::make_series("stock_" + std::to_string(j + 1), spec.s0[j],
                                                 spec.dividends[j], spec.rate, dt, n_steps, n_paths));
    }
    if (companion.enabled) {
        const LimitSpec& lim = companion.limit;
        out.index_companion =
            detail::make_series("index_limit", lim.i0, lim.delta, spec.rate, dt, n_steps, n_paths);
        for (int j : record_stocks) {
            out.stocks_companion.push_back(detail::make_series("stock_" + std::to_string(j + 1) + "_limit",
                                                               spec.s0[j], spec.dividends[j], spec.rate,
                                                               dt, n_steps, n_paths));
        }
    }

    std::atomic<std::int64_t> clamp_total{0};
    parallel_for(n_paths, threads, [&](std::int64_t lo, std::int64_t hi) {
        std::vector<double> s(static_cast<std::size_t>(m));
        std::vector<double> s_lim;
        std::int64_t clamps = 0;
        for (std::int64_t p = lo; p < hi; ++p) {
            const std::size_t base = static_cast<std::size_t>(p) * (n_steps + 1);
            for (int j = 0; j < m; ++j) s[static_cast<std::size_t>(j)] = spec.s0[j];
            double index = i0;
            double index_lim = companion.enabled ? companion.limit.i0 : 0.0;
            if (companion.enabled) {
                s_lim.resize(record_stocks.size());
                for (std::size_t r = 0; r < record_stocks.size(); ++r) s_lim[r] = spec.s0[record_stocks[r]];
            }
            out.index.values[base] = index;
            if (companion.enabled) out.index_companion->values[base] = index_lim;
            for (std::size_t r = 0; r < record_stocks.size(); ++r) {
                out.stocks[r].values[base] = spec.s0[record_stocks[r]];
                if (companion.enabled) out.stocks_companion[r].values[base] = s_lim[r];
            }

            for (int k = 0; k < n_steps; ++k) {
                const double t = k * dt;
                const double sig = spec.index_vol->eval(t, index);
                const double g_index = plan.normal(static_cast<std::uint64_t>(p),
                                                   static_cast<std::uint32_t>(k), 0);
                double sig_lim = 0.0;
                if (companion.enabled) sig_lim = companion.limit.index_vol->eval(t, index_lim);

                double new_index = 0.0;
                for (int j = 0; j < m; ++j) {
                    const double g = plan.normal(static_cast<std::uint64_t>(p),
                                                 static_cast<std::uint32_t>(k),
                                                 static_cast<std::uint32_t>(1 + j));
                    const double eta = spec.idio_vols[j]->value_at_level(t, s[static_cast<std::size_t>(j)], spec.s0[j]);
                    double next = s[static_cast<std::size_t>(j)] *
                                  (1.0 + (spec.rate - spec.dividends[j]) * dt +
                                   spec.betas[j] * sig * sqdt * g_index + eta * sqdt * g);
                    next = detail::clamp_level(next, kLevelFloorScale * spec.s0[j], clamps);
                    s[static_cast<std::size_t>(j)] = next;
                    new_index += spec.weights[j] * next;

                    if (companion.enabled) {
                        for (std::size_t r = 0; r < record_stocks.size(); ++r) {
                            if (record_stocks[r] != j) continue;
                            const double eta_lim = spec.idio_vols[j]->value_at_level(t, s_lim[r], spec.s0[j]);
                            double nl = s_lim[r] * (1.0 + (spec.rate - spec.dividends[j]) * dt +
                                                    spec.betas[j] * sig_lim * sqdt * g_index +
                                                    eta_lim * sqdt * g);
                            s_lim[r] = detail::clamp_level(nl, kLevelFloorScale * spec.s0[j], clamps);
                        }
                    }
                }
                index = new_index;
                if (companion.enabled) {
                    const LimitSpec& lim = companion.limit;
                    double nl = index_lim * (1.0 + (spec.rate - lim.delta) * dt +
                                             lim.beta * sig_lim * sqdt * g_index);
                    index_lim = detail::clamp_level(nl, kLevelFloorScale * lim.i0, clamps);
                }

                out.index.values[base + k + 1] = index;
                if (companion.enabled) out.index_companion->values[base + k + 1] = index_lim;
                for (std::size_t r = 0; r < record_stocks.size(); ++r) {
                    out.stocks[r].values[base + k + 1] = s[static_cast<std::size_t>(record_stocks[r])];
                    if (companion.enabled) out.stocks_companion[r].values[base + k + 1] = s_lim[r];
                }
            }
        }
        clamp_total.fetch_add(clamps, std::memory_order_relaxed);
    });
    out.clamp_count = clamp_total.load();
    return out;
}

// One stock leg of the simplified (limiting) model.
struct SimplifiedLeg {
    double s0 = 0.0;
    double beta = 1.0;
    double dividend = 0.0;
    SurfacePtr eta;  // idiosyncratic surface
};

// Limiting model: the index follows its autonomous local-volatility dynamics
// and every leg shares the index Brownian motion (channel 0). When weights
// are supplied the weighted sum of the legs is recorded as the reconstructed
// index.
inline PathEnsemble simulate_simplified(const LimitSpec& limit, const std::vector<SimplifiedLeg>& legs,
                                        double rate, double horizon, int n_steps,
                                        std::int64_t n_paths, const NoisePlan& plan,
                                        const std::vector<double>& weights = {}, int threads = 1) {
    detail::check_run_sizes(n_steps, n_paths);
    if (!(horizon > 0.0)) throw config_error("simplified: horizon must be > 0");
    if (!weights.empty() && weights.size() != legs.size()) {
        throw config_error("simplified: weights must match the number of legs");
    }
    for (const auto& leg : legs) {
        if (!(leg.s0 > 0.0)) throw config_error("simplified: leg s0 must be > 0");
        if (!leg.eta) throw config_error("simplified: leg is missing its eta surface");
    }

    PathEnsemble out;
    out.n_paths = n_paths;
    out.n_steps = n_steps;
    out.horizon = horizon;
    out.dt = horizon / n_steps;
    out.rate = rate;
    out.seed = plan.seed;
    out.noise_layout = "simplified/v1";

    const double dt = out.dt;
    const double sqdt = std::sqrt(dt);
    const std::size_t nl = legs.size();

    out.index = detail::make_series("index", limit.i0, limit.delta_index, rate, dt, n_steps, n_paths);
    for (std::size_t j = 0; j < nl; ++j) {
        out.stocks.push_back(detail::make_series("stock_" + std::to_string(j + 1), legs[j].s0,
                                                 legs[j].dividend, rate, dt, n_steps, n_paths));
    }
    if (!weights.empty()) {
        double i0_rec = 0.0;
        for (std::size_t j = 0; j < nl; ++j) i0_rec += weights[j] * legs[j].s0;
        out.reconstructed_index = detail::make_series("index_reconstructed", i0_rec, 0.0, 0.0, dt, n_steps, n_paths);
        for (int k = 0; k <= n_steps; ++k) {
            double fwd = 0.0;
            for (std::size_t j = 0; j < nl; ++j) {
                fwd += weights[j] * legs[j].s0 * std::pow(1.0 + (rate - legs[j].dividend) * dt, k);
            }
            out.reconstructed_index->fwd_factors[static_cast<std::size_t>(k)] = fwd / i0_rec;
        }
    }

    std::atomic<std::int64_t> clamp_total{0};
    parallel_for(n_paths, threads, [&](std::int64_t lo, std::int64_t hi) {
        std::vector<double> s(nl);
        std::int64_t clamps = 0;
        for (std::int64_t p = lo; p < hi; ++p) {
            const std::size_t base = static_cast<std::size_t>(p) * (n_steps + 1);
            double index = limit.i0;
            for (std::size_t j = 0; j < nl; ++j) s[j] = legs[j].s0;
            out.index.values[base] = index;
            double rec = 0.0;
            for (std::size_t j = 0; j < nl; ++j) {
                out.stocks[j].values[base] = s[j];
                if (out.reconstructed_index) rec += weights[j] * s[j];
            }
            if (out.reconstructed_index) out.reconstructed_index->values[base] = rec;

            for (int k = 0; k < n_steps; ++k) {
                const double t = k * dt;
                const double sig = limit.index_vol->eval(t, index);
                const double g_index = plan.normal(static_cast<std::uint64_t>(p),
                                                   static_cast<std::uint32_t>(k), 0);
                rec = 0.0;
                for (std::size_t j = 0; j < nl; ++j) {
                    const double g = plan.normal(static_cast<std::uint64_t>(p),
                                                 static_cast<std::uint32_t>(k),
                                                 static_cast<std::uint32_t>(1 + j));
                    const double eta = legs[j].eta->value_at_level(t, s[j], legs[j].s0);
                    double next = s[j] * (1.0 + (rate - legs[j].dividend) * dt +
                                          legs[j].beta * sig * sqdt * g_index + eta * sqdt * g);
                    next = detail::clamp_level(next, kLevelFloorScale * legs[j].s0, clamps);
                    s[j] = next;
                    out.stocks[j].values[base + k + 1] = next;
                    if (out.reconstructed_index) rec += weights[j] * next;
                }
                double ni = index * (1.0 + (rate - limit.delta_index) * dt + sig * sqdt * g_index);
                index = detail::clamp_level(ni, kLevelFloorScale * limit.i0, clamps);
                out.index.values[base + k + 1] = index;
                if (out.reconstructed_index) out.reconstructed_index->values[base + k + 1] = rec;
            }
        }
        clamp_total.fetch_add(clamps, std::memory_order_relaxed);
    });
    out.clamp_count = clamp_total.load();
    return out;
}

// One stock of the constantly-correlated benchmark model.
struct MarketLeg {
    double s0 = 0.0;
    SurfacePtr loc_vol;  // sqrt of the local variance
};

// Constant-correlation local-volatility benchmark: every pair of stock
// Brownian motions carries correlation rho, realized through the exact
// factorization W_j = sqrt(rho) Z0 + sqrt(1-rho) Z_j (channel 0 = common
// factor, 1 + j = stock j). With weights, the weighted sum is recorded as the
// index series.
inline PathEnsemble simulate_market_model(const std::vector<MarketLeg>& legs, double rho, double rate,
                                          double horizon, int n_steps, std::int64_t n_paths,
                                          const NoisePlan& plan, const std::vector<double>& weights = {},
                                          int threads = 1) {
    detail::check_run_sizes(n_steps, n_paths);
    if (!(rho >= 0.0 && rho < 1.0)) {
        throw config_error("market model: rho must lie in [0, 1) for the factorization to be valid");
    }
    if (legs.empty()) throw config_error("market model: needs at least one leg");
    if (!weights.empty() && weights.size() != legs.size()) {
        throw config_error("market model: weights must match the number of legs");
    }
    for (const auto& leg : legs) {
        if (!(leg.s0 > 0.0)) throw config_error("market model: leg s0 must be > 0");
        if (!leg.loc_vol) throw config_error("market model: leg is missing its local-vol surface");
    }

    PathEnsemble out;
    out.n_paths = n_paths;
    out.n_steps = n_steps;
    out.horizon = horizon;
    out.dt = horizon / n_steps;
    out.rate = rate;
    out.seed = plan.seed;
    out.noise_layout = "market/v1";

    const double dt = out.dt;
    const double sqdt = std::sqrt(dt);
    const double sq_rho = std::sqrt(rho);
    const double sq_comp = std::sqrt(1.0 - rho);
    const std::size_t nl = legs.size();

    for (std::size_t j = 0; j < nl; ++j) {
        out.stocks.push_back(detail::make_series("stock_" + std::to_string(j + 1), legs[j].s0, 0.0,
                                                 rate, dt, n_steps, n_paths));
    }
    double i0 = 0.0;
    if (!weights.empty()) {
        for (std::size_t j = 0; j < nl; ++j) i0 += weights[j] * legs[j].s0;
    } else {
        i0 = legs[0].s0;
    }
    out.index = detail::make_series("index", i0, 0.0, rate, dt, n_steps, n_paths);

    std::atomic<std::int64_t> clamp_total{0};
    parallel_for(n_paths, threads, [&](std::int64_t lo, std::int64_t hi) {
        std::vector<double> s(nl);
        std::int64_t clamps = 0;
        for (std::int64_t p = lo; p < hi; ++p) {
            const std::size_t base = static_cast<std::size_t>(p) * (n_steps + 1);
            for (std::size_t j = 0; j < nl; ++j) {
                s[j] = legs[j].s0;
                out.stocks[j].values[base] = s[j];
            }
            double index = 0.0;
            if (!weights.empty()) {
                for (std::size_t j = 0; j < nl; ++j) index += weights[j] * s[j];
            } else {
                index = s[0];
            }
            out.index.values[base] = index;

            for (int k = 0; k < n_steps; ++k) {
                const double t = k * dt;
                const double z0 = plan.normal(static_cast<std::uint64_t>(p),
                                              static_cast<std::uint32_t>(k), 0);
                index = 0.0;
                for (std::size_t j = 0; j < nl; ++j) {
                    const double zj = plan.normal(static_cast<std::uint64_t>(p),
                                                  static_cast<std::uint32_t>(k),
                                                  static_cast<std::uint32_t>(1 + j));
                    const double w = sq_rho * z0 + sq_comp * zj;
                    const double vol = legs[j].loc_vol->value_at_level(t, s[j], legs[j].s0);
                    double next = s[j] * (1.0 + rate * dt + vol * sqdt * w);
                    next = detail::clamp_level(next, kLevelFloorScale * legs[j].s0, clamps);
                    s[j] = next;
                    out.stocks[j].values[base + k + 1] = next;
                    if (!weights.empty()) index += weights[j] * next;
                }
                if (weights.empty()) index = s[0];
                out.index.values[base + k + 1] = index;
            }
        }
        clamp_total.fetch_add(clamps, std::memory_order_relaxed);
    });
    out.clamp_count = clamp_total.load();
    return out;
}

} // namespace ixvol
