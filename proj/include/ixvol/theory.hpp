#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "model.hpp"
#include "noise.hpp"
#include "sde.hpp"

namespace ixvol {

// Upper constant K_p for E[sup_t |M_t|^{2p}] <= K_p E[<M>_T^p] on continuous
// martingales. Derivation: Doob's L^{2p} maximal inequality gives
// E[sup|M|^{2p}] <= (2p/(2p-1))^{2p} E[|M_T|^{2p}] <= 4^p E[|M_T|^{2p}], and
// Ito's formula plus Holder gives E[|M_T|^{2p}] <= p(2p-1)
// E[sup|M|^{2p}]^{(p-1)/p} E[<M>_T^p]^{1/p}; solving the recursion yields
// K_p = (4^p p (2p-1))^p. At p = 1 this is Doob's classical constant 4.
inline double universal_bdg_constant(int p) {
    if (p < 1) throw config_error("bdg constant: p must be a positive integer");
    const double pd = static_cast<double>(p);
    return std::pow(std::pow(4.0, pd) * pd * (2.0 * pd - 1.0), pd);
}

namespace detail {

inline void check_order(int p) {
    if (p < 1) throw config_error("theorem bound: p must be a positive integer");
}

inline double observed_vol_sup(const ModelSpec& spec) {
    double sup = spec.index_vol->max_value();
    for (const auto& s : spec.idio_vols) sup = std::max(sup, s->max_value());
    return sup;
}

} // namespace detail

// Moment constant of the technical lemma:
//   C_p = max_j s0_j^{2p} exp((2r + (2p-1)(max_j beta_j^2 + 1) K_b^2) p T).
inline double lemma1_bound(const ModelSpec& spec, double k_b, int p) {
    detail::check_order(p);
    const double observed = detail::observed_vol_sup(spec);
    if (k_b < observed) {
        throw config_error("lemma1_bound: K_b = " + fmt17(k_b) +
                           " is below the observed surface maximum " + fmt17(observed));
    }
    double max_s0 = 0.0, max_beta2 = 0.0;
    for (std::size_t j = 0; j < spec.s0.size(); ++j) {
        max_s0 = std::max(max_s0, std::abs(spec.s0[j]));
        max_beta2 = std::max(max_beta2, spec.betas[j] * spec.betas[j]);
    }
    const double pd = static_cast<double>(p);
    return std::pow(max_s0, 2.0 * pd) *
           std::exp((2.0 * spec.rate + (2.0 * pd - 1.0) * (max_beta2 + 1.0) * k_b * k_b) * pd *
                    spec.horizon);
}

// Constant of the index convergence theorem:
//   C_T = 8^{2p-1} T^p (T^p + K_p K_b^{2p}) C_p
//         * exp(4^{2p-1} T (2^{2p-1} K_p T^{p-1} (beta K_sigma)^{2p}
//                           + (2T)^{2p-1} delta^{2p} + r^{2p} T^{2p-1})).
inline double theorem1_constant(const ModelSpec& spec, const LimitSpec& limit, double k_b,
                                double k_sigma, int p) {
    detail::check_order(p);
    const double pd = static_cast<double>(p);
    const double t = spec.horizon;
    const double kp = universal_bdg_constant(p);
    const double cp = lemma1_bound(spec, k_b, p);
    const double lead = std::pow(8.0, 2.0 * pd - 1.0) * std::pow(t, pd) *
                        (std::pow(t, pd) + kp * std::pow(k_b, 2.0 * pd)) * cp;
    const double expo = std::pow(4.0, 2.0 * pd - 1.0) * t *
                        (std::pow(2.0, 2.0 * pd - 1.0) * kp * std::pow(t, pd - 1.0) *
                             std::pow(limit.beta * k_sigma, 2.0 * pd) +
                         std::pow(2.0 * t, 2.0 * pd - 1.0) * std::pow(limit.delta, 2.0 * pd) +
                         std::pow(spec.rate, 2.0 * pd) * std::pow(t, 2.0 * pd - 1.0));
    return lead * std::exp(expo);
}

inline double proximity_sum(const ModelSpec& spec, const LimitSpec& limit, int p) {
    const auto m = proximity_metrics(spec, limit.beta, limit.delta);
    const double pd = static_cast<double>(p);
    return std::pow(m.p_w * m.p_w, pd) + std::pow(m.p_beta, 2.0 * pd) + std::pow(m.p_delta, 2.0 * pd);
}

// Upper bound of E[sup_t |I^M_t - I_t|^{2p}].
inline double theorem1_bound(const ModelSpec& spec, const LimitSpec& limit, double k_b,
                             double k_sigma, int p) {
    return theorem1_constant(spec, limit, k_b, k_sigma, p) * proximity_sum(spec, limit, p);
}

// Per-stock constant of the stock convergence theorem:
//   C~j_T = 6^{2p-1} K_p T^p beta_j^{2p} C_{2p}^{1/2} K_Lip^{2p}
//           * exp(3^{2p-1} ((r-delta_j)^{2p} T^{2p-1} + K_p T^{p-1} K_eta^{2p}
//                           + 2^{2p-1} K_p T^{p-1} beta_j^{2p} K_b^{2p}) T).
inline double theorem2_constant(const ModelSpec& spec, int stock, double k_b, double k_sigma,
                                double k_eta, double k_lip, int p) {
    (void)k_sigma;
    detail::check_order(p);
    if (stock < 0 || stock >= spec.n_stocks()) throw config_error("theorem2: stock index out of range");
    const double pd = static_cast<double>(p);
    const double t = spec.horizon;
    const double kp = universal_bdg_constant(p);
    const double beta_j = spec.betas[static_cast<std::size_t>(stock)];
    const double delta_j = spec.dividends[static_cast<std::size_t>(stock)];
    const double c2p = lemma1_bound(spec, k_b, 2 * p);
    const double lead = std::pow(6.0, 2.0 * pd - 1.0) * kp * std::pow(t, pd) *
                        std::pow(beta_j, 2.0 * pd) * std::sqrt(c2p) * std::pow(k_lip, 2.0 * pd);
    const double expo = std::pow(3.0, 2.0 * pd - 1.0) *
                        (std::pow(spec.rate - delta_j, 2.0 * pd) * std::pow(t, 2.0 * pd - 1.0) +
                         kp * std::pow(t, pd - 1.0) * std::pow(k_eta, 2.0 * pd) +
                         std::pow(2.0, 2.0 * pd - 1.0) * kp * std::pow(t, pd - 1.0) *
                             std::pow(beta_j, 2.0 * pd) * std::pow(k_b, 2.0 * pd)) *
                        t;
    return lead * std::exp(expo);
}

// Upper bound of E[sup_t |S^{j,M}_t - S^j_t|^{2p}].
inline double theorem2_bound(const ModelSpec& spec, const LimitSpec& limit, int stock, double k_b,
                             double k_sigma, double k_eta, double k_lip, int p) {
    return theorem2_constant(spec, stock, k_b, k_sigma, k_eta, k_lip, p) *
           proximity_sum(spec, limit, p);
}

// Upper bound of E[sup_t |I^M_t - Ibar^M_t|^{2p}] for the reconstructed index,
// which carries the extra (sum_j w_j)^{2p} factor and the worst per-stock
// constant.
inline double reconstructed_index_bound(const ModelSpec& spec, const LimitSpec& limit, double k_b,
                                        double k_sigma, double k_eta, double k_lip, int p) {
    detail::check_order(p);
    double c_max = 0.0;
    for (int j = 0; j < spec.n_stocks(); ++j) {
        c_max = std::max(c_max, theorem2_constant(spec, j, k_b, k_sigma, k_eta, k_lip, p));
    }
    double wsum = 0.0;
    for (double w : spec.weights) wsum += w;
    return c_max * std::pow(wsum, 2.0 * static_cast<double>(p)) * proximity_sum(spec, limit, p);
}

struct BoundReport {
    int p = 1;
    double p_w = 0.0, p_beta = 0.0, p_delta = 0.0;
    double k_p = 0.0, k_b = 0.0, k_sigma = 0.0, k_eta = 0.0, k_lip = 0.0;
    double c_p = 0.0;
    double theorem1_c = 0.0;
    double theorem1 = 0.0;
    std::vector<double> theorem2_c;  // per stock
    std::vector<double> theorem2;    // per stock
    double reconstructed = 0.0;
};

// Constants default to discrete estimates from the surfaces; any can be
// overridden by passing a positive value.
inline BoundReport make_bound_report(const ModelSpec& spec, const LimitSpec& limit, int p,
                                     double k_b = 0.0, double k_sigma = 0.0, double k_eta = 0.0,
                                     double k_lip = 0.0) {
    detail::check_order(p);
    BoundReport rep;
    rep.p = p;
    if (k_b <= 0.0) k_b = detail::observed_vol_sup(spec);
    if (k_sigma <= 0.0) k_sigma = spec.index_vol->lipschitz_x_vol();
    if (k_lip <= 0.0) k_lip = spec.index_vol->lipschitz_vol();
    if (k_eta <= 0.0) {
        for (const auto& s : spec.idio_vols) k_eta = std::max(k_eta, s->lipschitz_x_vol());
    }
    const auto m = proximity_metrics(spec, limit.beta, limit.delta);
    rep.p_w = m.p_w;
    rep.p_beta = m.p_beta;
    rep.p_delta = m.p_delta;
    rep.k_p = universal_bdg_constant(p);
    rep.k_b = k_b;
    rep.k_sigma = k_sigma;
    rep.k_eta = k_eta;
    rep.k_lip = k_lip;
    rep.c_p = lemma1_bound(spec, k_b, p);
    rep.theorem1_c = theorem1_constant(spec, limit, k_b, k_sigma, p);
    rep.theorem1 = rep.theorem1_c * proximity_sum(spec, limit, p);
    for (int j = 0; j < spec.n_stocks(); ++j) {
        rep.theorem2_c.push_back(theorem2_constant(spec, j, k_b, k_sigma, k_eta, k_lip, p));
        rep.theorem2.push_back(rep.theorem2_c.back() * proximity_sum(spec, limit, p));
    }
    rep.reconstructed = reconstructed_index_bound(spec, limit, k_b, k_sigma, k_eta, k_lip, p);
    return rep;
}

struct MomentEstimate {
    double mean = 0.0;
    double stderr_est = 0.0;
};

// Empirical E[sup_k |A_k - B_k|^{2p}] over the ensemble paths; the sup runs
// over the Euler grid times only.
inline MomentEstimate coupled_sup_distance(const PathEnsemble& ensemble, const RecordedSeries& a,
                                           const RecordedSeries& b, int p) {
    detail::check_order(p);
    double sum = 0.0, sum2 = 0.0;
    for (std::int64_t path = 0; path < ensemble.n_paths; ++path) {
        double sup = 0.0;
        for (int k = 0; k <= ensemble.n_steps; ++k) {
            sup = std::max(sup, std::abs(ensemble.value(a, path, k) - ensemble.value(b, path, k)));
        }
        const double d = std::pow(sup, 2.0 * p);
        sum += d;
        sum2 += d * d;
    }
    const double n = static_cast<double>(ensemble.n_paths);
    MomentEstimate est;
    est.mean = sum / n;
    const double var = std::max(sum2 / n - est.mean * est.mean, 0.0);
    est.stderr_est = ensemble.n_paths > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
    return est;
}

struct StudyRow {
    int m = 0;
    double p_w = 0.0, p_beta = 0.0, p_delta = 0.0;
    MomentEstimate index_distance;
    MomentEstimate stock_distance;  // stock 1
    double bound_theorem1 = 0.0;
    double bound_theorem2 = 0.0;
    bool flagged = false;  // stderr > 50% of the estimate
};

struct StudyResult {
    std::vector<StudyRow> rows;
    double slope = 0.0;      // log-log slope of the index distance vs M
    double intercept = 0.0;
};

inline std::uint64_t derive_row_seed(std::uint64_t master, int m) {
    // splitmix64 step on master ^ M
    std::uint64_t z = master ^ (static_cast<std::uint64_t>(m) * 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// Coupled simulation across the M grid with shared Brownian increments per
// row, empirical L^{2p} distances against the bounds, and the fitted log-log
// rate.
inline StudyResult convergence_study(const std::function<ModelSpec(int)>& family,
                                     const LimitSpec& limit, const std::vector<int>& m_grid,
                                     int p, std::int64_t n_paths, int n_steps,
                                     std::uint64_t master_seed, int threads = 1,
                                     double k_b = 0.0, double k_sigma = 0.0, double k_eta = 0.0,
                                     double k_lip = 0.0) {
    detail::check_order(p);
    if (m_grid.empty()) throw config_error("convergence_study: empty M grid");
    StudyResult result;
    for (int m : m_grid) {
        const ModelSpec spec = family(m);
        if (spec.n_stocks() != m) throw config_error("convergence_study: family(M) returned wrong size");
        const double i0 = spec.index_0();
        if (std::abs(i0 - limit.i0) > 1e-9 * limit.i0) {
            throw config_error("convergence_study: family i0 " + fmt17(i0) +
                               " does not match the limit i0 " + fmt17(limit.i0));
        }
        NoisePlan plan{derive_row_seed(master_seed, m), 0};
        CompanionRequest companion{true, limit};
        const auto ensemble = simulate_original(spec, n_steps, n_paths, plan, companion, {0}, threads);

        StudyRow row;
        row.m = m;
        const auto metrics = proximity_metrics(spec, limit.beta, limit.delta);
        row.p_w = metrics.p_w;
        row.p_beta = metrics.p_beta;
        row.p_delta = metrics.p_delta;
        row.index_distance = coupled_sup_distance(ensemble, ensemble.index, *ensemble.index_companion, p);
        row.stock_distance =
            coupled_sup_distance(ensemble, ensemble.stocks[0], ensemble.stocks_companion[0], p);
        const double kb_row = k_b > 0.0 ? k_b : detail::observed_vol_sup(spec);
        const double ks_row = k_sigma > 0.0 ? k_sigma : spec.index_vol->lipschitz_x_vol();
        const double ke_row = k_eta > 0.0 ? k_eta : [&] {
            double v = 0.0;
            for (const auto& s : spec.idio_vols) v = std::max(v, s->lipschitz_x_vol());
            return v;
        }();
        const double kl_row = k_lip > 0.0 ? k_lip : spec.index_vol->lipschitz_vol();
        row.bound_theorem1 = theorem1_bound(spec, limit, kb_row, ks_row, p);
        row.bound_theorem2 = theorem2_bound(spec, limit, 0, kb_row, ks_row, ke_row, kl_row, p);
        row.flagged = row.index_distance.stderr_est > 0.5 * row.index_distance.mean;
        result.rows.push_back(row);
    }

    // least squares of ln(distance) on ln(M), over rows with a positive estimate
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    double n = 0.0;
    for (const auto& row : result.rows) {
        if (!(row.index_distance.mean > 0.0)) continue;
        const double x = std::log(static_cast<double>(row.m));
        const double y = std::log(row.index_distance.mean);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
        n += 1.0;
    }
    const double denom = n * sxx - sx * sx;
    if (std::abs(denom) > 1e-12) {
        result.slope = (n * sxy - sx * sy) / denom;
        result.intercept = (sy - result.slope * sx) / n;
    }
    return result;
}

} // namespace ixvol
