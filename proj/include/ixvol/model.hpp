#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "surface.hpp"

namespace ixvol {

// Full parameterization of the M-stock coupled model: the index is the
// weighted sum of the stocks and feeds back into each stock's systemic
// volatility beta_j * sigma(t, I), on top of the idiosyncratic eta_j(t, S).
// Immutable after construction; safe to share across workers.
struct ModelSpec {
    std::vector<double> weights;    // w_j > 0
    std::vector<double> betas;      // beta_j
    std::vector<double> dividends;  // delta_j >= 0, per year
    std::vector<double> s0;         // initial stock values > 0
    double rate = 0.0;              // r, per year
    double horizon = 1.0;           // T, years
    SurfacePtr index_vol;               // sigma(t, x), absolute level grid
    std::vector<SurfacePtr> idio_vols;  // eta_j(t, x), one per stock

    int n_stocks() const { return static_cast<int>(weights.size()); }
    double index_0() const {
        return std::inner_product(weights.begin(), weights.end(), s0.begin(), 0.0);
    }
};

inline ModelSpec make_model_spec(std::vector<double> weights, std::vector<double> betas,
                                 std::vector<double> dividends, std::vector<double> s0, double rate,
                                 double horizon, SurfacePtr index_vol,
                                 std::vector<SurfacePtr> idio_vols) {
    const std::size_t m = weights.size();
    if (m == 0) throw config_error("model: needs at least one stock");
    if (betas.size() != m || dividends.size() != m || s0.size() != m || idio_vols.size() != m) {
        throw config_error("model: weights, betas, dividends, s0 and idio_vols must have equal length");
    }
    for (std::size_t j = 0; j < m; ++j) {
        if (!(weights[j] > 0.0)) throw config_error("model: weight " + std::to_string(j + 1) + " must be > 0");
        if (!(s0[j] > 0.0)) throw config_error("model: s0 " + std::to_string(j + 1) + " must be > 0");
        if (dividends[j] < 0.0) throw config_error("model: dividend " + std::to_string(j + 1) + " must be >= 0");
        if (!idio_vols[j]) throw config_error("model: missing idiosyncratic surface for stock " + std::to_string(j + 1));
    }
    if (!index_vol) throw config_error("model: missing index volatility surface");
    if (!(horizon > 0.0)) throw config_error("model: horizon must be > 0");
    ModelSpec spec;
    spec.weights = std::move(weights);
    spec.betas = std::move(betas);
    spec.dividends = std::move(dividends);
    spec.s0 = std::move(s0);
    spec.rate = rate;
    spec.horizon = horizon;
    spec.index_vol = std::move(index_vol);
    spec.idio_vols = std::move(idio_vols);
    return spec;
}

// Instantaneous cross-correlation between stocks i and j at the given levels:
//   beta_i beta_j sigma^2 / sqrt((beta_i^2 sigma^2 + eta_i^2)(beta_j^2 sigma^2 + eta_j^2))
inline double cross_correlation(const ModelSpec& spec, int i, int j, double t, double index_level,
                                double s_i, double s_j) {
    const int m = spec.n_stocks();
    if (i == j || i < 0 || j < 0 || i >= m || j >= m) {
        throw config_error("cross_correlation: needs two distinct stock indices in range");
    }
    const double sigma = spec.index_vol->eval(t, index_level);
    const double eta_i = spec.idio_vols[static_cast<std::size_t>(i)]->value_at_level(t, s_i, spec.s0[static_cast<std::size_t>(i)]);
    const double eta_j = spec.idio_vols[static_cast<std::size_t>(j)]->value_at_level(t, s_j, spec.s0[static_cast<std::size_t>(j)]);
    const double bi = spec.betas[static_cast<std::size_t>(i)];
    const double bj = spec.betas[static_cast<std::size_t>(j)];
    const double vi = bi * bi * sigma * sigma + eta_i * eta_i;
    const double vj = bj * bj * sigma * sigma + eta_j * eta_j;
    if (vi <= 0.0 || vj <= 0.0) {
        throw numeric_error("cross_correlation: total volatility of a stock is zero, correlation undefined");
    }
    return bi * bj * sigma * sigma / std::sqrt(vi * vj);
}

// Weighted median: the smallest data value minimizing sum_j w_j |v_j - m|.
inline double optimal_constant(const std::vector<double>& weights, const std::vector<double>& values) {
    if (values.empty()) throw config_error("optimal_constant: empty input");
    if (weights.size() != values.size()) throw config_error("optimal_constant: length mismatch");
    double total = 0.0;
    for (double w : weights) {
        if (!(w > 0.0)) throw config_error("optimal_constant: weights must be > 0");
        total += w;
    }
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    double cum = 0.0;
    for (std::size_t idx : order) {
        cum += weights[idx];
        if (cum >= 0.5 * total) return values[idx];
    }
    return values[order.back()];
}

// The three quantities controlling the distance to the limit model:
// P_w = sqrt(sum w^2), P_beta = sum w |beta - beta_bar|, P_delta likewise.
struct ProximityMetrics {
    double p_w = 0.0;
    double p_beta = 0.0;
    double p_delta = 0.0;
};

inline ProximityMetrics proximity_metrics(const ModelSpec& spec, double beta, double delta) {
    ProximityMetrics m;
    double sw2 = 0.0;
    for (std::size_t j = 0; j < spec.weights.size(); ++j) {
        const double w = spec.weights[j];
        sw2 += w * w;
        m.p_beta += w * std::abs(spec.betas[j] - beta);
        m.p_delta += w * std::abs(spec.dividends[j] - delta);
    }
    m.p_w = std::sqrt(sw2);
    return m;
}

// Limiting one-factor dynamics: dI/I = (r - delta_index) dt + sigma(t, I) dB,
// with each stock carrying beta * sigma(t, I) systemic volatility.
struct LimitSpec {
    double beta = 1.0;
    double delta = 0.0;        // constant dividend proxy of Theorem 1
    double delta_index = 0.0;  // dividend yield used in the index drift
    double i0 = 0.0;
    SurfacePtr index_vol;
};

inline LimitSpec make_limit_spec(double beta, double delta, double delta_index, double i0,
                                 SurfacePtr index_vol) {
    if (!(i0 > 0.0)) throw config_error("limit: i0 must be > 0");
    if (!index_vol) throw config_error("limit: missing index volatility surface");
    LimitSpec l;
    l.beta = beta;
    l.delta = delta;
    l.delta_index = delta_index;
    l.i0 = i0;
    l.index_vol = std::move(index_vol);
    return l;
}

// beta defaults to 1 (the regression reading of the coefficient); delta is the
// weighted median of the dividends, and delta_index follows delta unless the
// caller overrides either.
inline LimitSpec limit_from_model(const ModelSpec& spec, std::optional<double> beta_override = {},
                                  std::optional<double> delta_index_override = {}) {
    const double delta = optimal_constant(spec.weights, spec.dividends);
    return make_limit_spec(beta_override.value_or(1.0), delta,
                           delta_index_override.value_or(delta), spec.index_0(), spec.index_vol);
}

} // namespace ixvol
