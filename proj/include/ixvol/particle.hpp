#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "kernel.hpp"
#include "model.hpp"
#include "noise.hpp"
#include "parallel.hpp"
#include "sde.hpp"
#include "surface.hpp"

namespace ixvol {

// State of the interacting particle system for the McKean-nonlinear stock
// dynamics: each particle carries a stock value and its own companion index
// path. idio_var[k] holds the clamped idiosyncratic variance each particle
// used in the step k -> k+1.
struct ParticleCloud {
    std::int64_t n_particles = 0;
    int n_steps = 0;
    double dt = 0.0;
    double horizon = 0.0;
    double rate = 0.0;
    double dividend = 0.0;
    double dividend_index = 0.0;
    double s0 = 0.0;
    double i0 = 0.0;
    double beta = 0.0;
    std::uint64_t seed = 0;
    KernelConfig kernel;
    SurfacePtr loc_vol;    // sqrt(v_loc): target local volatility of the stock
    SurfacePtr index_vol;  // sigma

    std::vector<std::vector<double>> stocks;    // [k][i], k = 0..n_steps
    std::vector<std::vector<double>> indices;   // [k][i]
    std::vector<std::vector<double>> idio_var;  // [k][i], k = 0..n_steps-1

    // per-step diagnostics for the calibration report (k = 0..n_steps-1)
    std::vector<std::int64_t> clamp_count;
    std::vector<double> clamp_mass;
    std::vector<double> eta_min;
    std::vector<double> eta_max;
    std::vector<std::int64_t> interactions;
    std::int64_t underflow_fallbacks = 0;
    std::int64_t level_clamps = 0;

    std::int64_t total_clamps() const {
        return std::accumulate(clamp_count.begin(), clamp_count.end(), std::int64_t{0});
    }
    std::int64_t total_interactions() const {
        return std::accumulate(interactions.begin(), interactions.end(), std::int64_t{0});
    }
};

namespace detail {

// One sorted-sweep NW query; identical arithmetic to accelerated_nw_all but
// callable per query index so steps can shard the estimation across workers.
inline double nw_query_sorted(const std::vector<double>& xs, const std::vector<double>& ys,
                              std::size_t q, double h, double threshold,
                              std::int64_t& interactions, std::int64_t& fallbacks) {
    const double x = xs[q];
    double est = ys[q];
    double den = gaussian_kernel(0.0);
    ++interactions;
    for (std::size_t j = q; j-- > 0;) {
        const double w = gaussian_kernel((x - xs[j]) / h);
        ++interactions;
        if (w < threshold) break;
        if (w > 0.0) {
            den += w;
            est += (w / den) * (ys[j] - est);
        }
    }
    for (std::size_t j = q + 1; j < xs.size(); ++j) {
        const double w = gaussian_kernel((x - xs[j]) / h);
        ++interactions;
        if (w < threshold) break;
        if (w > 0.0) {
            den += w;
            est += (w / den) * (ys[j] - est);
        }
    }
    if (den < kNwDenominatorFloor) {
        ++fallbacks;
        return ys[q];
    }
    return est;
}

// Stable sort permutation by value; equal values keep particle-index order.
inline void sort_permutation(const std::vector<double>& v, std::vector<std::uint32_t>& perm) {
    perm.resize(v.size());
    std::iota(perm.begin(), perm.end(), 0u);
    std::stable_sort(perm.begin(), perm.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return v[a] < v[b]; });
}

} // namespace detail

// Simulates the McKean-nonlinear stock dynamics by N interacting particles:
// at every Euler step the conditional expectation E[sigma^2(t, I) | S] is
// replaced by the kernel estimate over the cloud, the idiosyncratic variance
// is v_loc - beta^2 * estimate clamped at zero (clamps counted), and the
// stock and its companion index advance with a shared systemic Gaussian and
// an independent idiosyncratic one.
inline ParticleCloud simulate_particle_system(const LimitSpec& limit, const SurfacePtr& loc_vol,
                                              double beta, double rate, double dividend, double s0,
                                              double horizon, std::int64_t n_particles, int n_steps,
                                              const KernelConfig& kernel, const NoisePlan& plan,
                                              int threads = 1) {
    if (n_particles < 2) throw config_error("particle system: needs at least 2 particles");
    if (n_steps < 1) throw config_error("particle system: n_steps must be >= 1");
    if (!(s0 > 0.0)) throw config_error("particle system: s0 must be > 0");
    if (!(horizon > 0.0)) throw config_error("particle system: horizon must be > 0");
    if (!loc_vol) throw config_error("particle system: missing local-vol surface");

    ParticleCloud cloud;
    cloud.n_particles = n_particles;
    cloud.n_steps = n_steps;
    cloud.horizon = horizon;
    cloud.dt = horizon / n_steps;
    cloud.rate = rate;
    cloud.dividend = dividend;
    cloud.dividend_index = limit.delta_index;
    cloud.s0 = s0;
    cloud.i0 = limit.i0;
    cloud.beta = beta;
    cloud.seed = plan.seed;
    cloud.kernel = kernel;
    cloud.loc_vol = loc_vol;
    cloud.index_vol = limit.index_vol;

    const double dt = cloud.dt;
    const double sqdt = std::sqrt(dt);
    const double h = kernel.bandwidth(n_particles);
    const double threshold = kernel.effective_threshold();
    const std::size_t n = static_cast<std::size_t>(n_particles);

    cloud.stocks.assign(static_cast<std::size_t>(n_steps) + 1, std::vector<double>(n, s0));
    cloud.indices.assign(static_cast<std::size_t>(n_steps) + 1, std::vector<double>(n, limit.i0));
    cloud.idio_var.assign(static_cast<std::size_t>(n_steps), std::vector<double>(n, 0.0));
    cloud.clamp_count.assign(static_cast<std::size_t>(n_steps), 0);
    cloud.clamp_mass.assign(static_cast<std::size_t>(n_steps), 0.0);
    cloud.eta_min.assign(static_cast<std::size_t>(n_steps), 0.0);
    cloud.eta_max.assign(static_cast<std::size_t>(n_steps), 0.0);
    cloud.interactions.assign(static_cast<std::size_t>(n_steps), 0);

    std::vector<double> sorted_s(n), sorted_y(n), sigma2(n), estimate(n);
    std::vector<std::uint32_t> perm;
    const int workers = resolve_threads(threads);

    for (int k = 0; k < n_steps; ++k) {
        const double t = k * dt;
        const auto& s_now = cloud.stocks[static_cast<std::size_t>(k)];
        const auto& i_now = cloud.indices[static_cast<std::size_t>(k)];
        auto& s_next = cloud.stocks[static_cast<std::size_t>(k) + 1];
        auto& i_next = cloud.indices[static_cast<std::size_t>(k) + 1];
        auto& var_row = cloud.idio_var[static_cast<std::size_t>(k)];

        for (std::size_t i = 0; i < n; ++i) {
            const double sig = cloud.index_vol->eval(t, i_now[i]);
            sigma2[i] = sig * sig;
        }
        detail::sort_permutation(s_now, perm);
        for (std::size_t r = 0; r < n; ++r) {
            sorted_s[r] = s_now[perm[r]];
            sorted_y[r] = sigma2[perm[r]];
        }

        std::vector<std::int64_t> inter_part(static_cast<std::size_t>(workers), 0);
        std::vector<std::int64_t> fall_part(static_cast<std::size_t>(workers), 0);
        {
            std::atomic<int> slot{0};
            parallel_for(static_cast<std::int64_t>(n), workers, [&](std::int64_t lo, std::int64_t hi) {
                const int my = slot.fetch_add(1);
                std::int64_t inter = 0, falls = 0;
                for (std::int64_t q = lo; q < hi; ++q) {
                    estimate[perm[static_cast<std::size_t>(q)]] = detail::nw_query_sorted(
                        sorted_s, sorted_y, static_cast<std::size_t>(q), h, threshold, inter, falls);
                }
                inter_part[static_cast<std::size_t>(my)] += inter;
                fall_part[static_cast<std::size_t>(my)] += falls;
            });
        }
        for (int w = 0; w < workers; ++w) {
            cloud.interactions[static_cast<std::size_t>(k)] += inter_part[static_cast<std::size_t>(w)];
            cloud.underflow_fallbacks += fall_part[static_cast<std::size_t>(w)];
        }

        std::int64_t clamps = 0, level_clamps = 0;
        double mass = 0.0, vmin = 0.0, vmax = 0.0;
        bool first = true;
        for (std::size_t i = 0; i < n; ++i) {
            const double lv = cloud.loc_vol->value_at_level(t, s_now[i], s0);
            double v = lv * lv - beta * beta * estimate[i];
            if (v < 0.0) {
                ++clamps;
                mass += -v;
                v = 0.0;
            }
            var_row[i] = v;
            if (first) {
                vmin = vmax = v;
                first = false;
            } else {
                vmin = std::min(vmin, v);
                vmax = std::max(vmax, v);
            }

            const double sig = std::sqrt(sigma2[i]);
            const double g = plan.normal(static_cast<std::uint64_t>(i), static_cast<std::uint32_t>(k), 0);
            const double gt = plan.normal(static_cast<std::uint64_t>(i), static_cast<std::uint32_t>(k), 1);
            double s_new = s_now[i] * (1.0 + (rate - dividend) * dt + beta * sig * sqdt * g +
                                       std::sqrt(v) * sqdt * gt);
            double i_new = i_now[i] * (1.0 + (rate - limit.delta_index) * dt + sig * sqdt * g);
            s_next[i] = detail::clamp_level(s_new, kLevelFloorScale * s0, level_clamps);
            i_next[i] = detail::clamp_level(i_new, kLevelFloorScale * limit.i0, level_clamps);
        }
        cloud.clamp_count[static_cast<std::size_t>(k)] = clamps;
        cloud.clamp_mass[static_cast<std::size_t>(k)] = mass;
        cloud.eta_min[static_cast<std::size_t>(k)] = std::sqrt(vmin);
        cloud.eta_max[static_cast<std::size_t>(k)] = std::sqrt(vmax);
        cloud.level_clamps += level_clamps;
    }
    return cloud;
}

// Wrap per-step snapshots of an already-simulated (stock, index) pair as a
// particle cloud so the conditional-expectation extractors below can run on
// independent paths as well as on interacting particles.
inline ParticleCloud cloud_from_ensemble(const PathEnsemble& ensemble, std::size_t stock_idx,
                                         const SurfacePtr& index_vol) {
    if (stock_idx >= ensemble.stocks.size()) {
        throw config_error("cloud_from_ensemble: stock index out of range");
    }
    ParticleCloud cloud;
    cloud.n_particles = ensemble.n_paths;
    cloud.n_steps = ensemble.n_steps;
    cloud.dt = ensemble.dt;
    cloud.horizon = ensemble.horizon;
    cloud.rate = ensemble.rate;
    cloud.dividend = ensemble.stocks[stock_idx].dividend;
    cloud.s0 = ensemble.stocks[stock_idx].x0;
    cloud.i0 = ensemble.index.x0;
    cloud.seed = ensemble.seed;
    cloud.index_vol = index_vol;
    const int n_steps = ensemble.n_steps;
    cloud.stocks.resize(static_cast<std::size_t>(n_steps) + 1);
    cloud.indices.resize(static_cast<std::size_t>(n_steps) + 1);
    for (int k = 0; k <= n_steps; ++k) {
        cloud.stocks[static_cast<std::size_t>(k)] = ensemble.column(ensemble.stocks[stock_idx], k);
        cloud.indices[static_cast<std::size_t>(k)] = ensemble.column(ensemble.index, k);
    }
    return cloud;
}

// beta = min(beta_hist, inf over the surface grid of sqrt(v_loc(t, s0 x)) /
// sigma(t, i0 x)). The scan runs over the union of both surfaces' grid nodes
// mapped through moneyness.
inline double select_beta(const VolSurface& loc_vol, const VolSurface& index_vol, double s0,
                          double i0, double beta_hist) {
    if (!(s0 > 0.0 && i0 > 0.0)) throw config_error("select_beta: s0 and i0 must be > 0");
    std::vector<double> moneyness;
    for (double x : loc_vol.levels) moneyness.push_back(loc_vol.levels_are_moneyness ? x : x / s0);
    for (double x : index_vol.levels) moneyness.push_back(index_vol.levels_are_moneyness ? x : x / i0);
    std::vector<double> times = loc_vol.times;
    times.insert(times.end(), index_vol.times.begin(), index_vol.times.end());
    std::sort(times.begin(), times.end());
    times.erase(std::unique(times.begin(), times.end()), times.end());
    std::sort(moneyness.begin(), moneyness.end());
    moneyness.erase(std::unique(moneyness.begin(), moneyness.end()), moneyness.end());

    double inf_ratio = std::numeric_limits<double>::infinity();
    for (double t : times) {
        for (double m : moneyness) {
            const double num = loc_vol.value_at_level(t, s0 * m, s0);
            const double den = index_vol.value_at_level(t, i0 * m, i0);
            if (!(den > 0.0)) {
                throw numeric_error("select_beta: index volatility is zero at (t=" + fmt17(t) +
                                    ", moneyness=" + fmt17(m) + ")");
            }
            inf_ratio = std::min(inf_ratio, num / den);
        }
    }
    return std::min(beta_hist, inf_ratio);
}

inline std::vector<double> default_extraction_levels() {
    std::vector<double> m(41);
    for (int i = 0; i < 41; ++i) m[static_cast<std::size_t>(i)] = 0.3 + 1.7 * i / 40.0;
    return m;
}

struct SurfaceExtraction {
    VolSurface surface;  // moneyness-flagged
    std::vector<std::pair<int, int>> unpopulated;  // (time index, level index) flat-filled nodes
};

namespace detail {

// NW estimates of E[sigma^2(t_k, I) | S = x] at absolute query levels, one
// row per cloud snapshot. Nodes where every kernel weight underflows are
// flat-filled from the nearest populated node of the same time slice.
inline std::vector<double> conditional_sigma2_grid(const ParticleCloud& cloud,
                                                   const std::vector<double>& query_levels,
                                                   double h,
                                                   std::vector<std::pair<int, int>>& unpopulated) {
    if (!cloud.index_vol) throw config_error("surface extraction: cloud has no index surface");
    const std::size_t nl = query_levels.size();
    const int n_slices = cloud.n_steps + 1;
    std::vector<double> grid(static_cast<std::size_t>(n_slices) * nl, 0.0);
    std::vector<char> flagged(nl);
    std::vector<double> sigma2(static_cast<std::size_t>(cloud.n_particles));
    for (int k = 0; k < n_slices; ++k) {
        const double t = k * cloud.dt;
        const auto& xs = cloud.stocks[static_cast<std::size_t>(k)];
        const auto& is = cloud.indices[static_cast<std::size_t>(k)];
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const double sig = cloud.index_vol->eval(t, is[i]);
            sigma2[i] = sig * sig;
        }
        for (std::size_t m = 0; m < nl; ++m) {
            bool underflow = false;
            const double est = nadaraya_watson(xs, sigma2, query_levels[m], h, &underflow);
            grid[static_cast<std::size_t>(k) * nl + m] = est;
            flagged[m] = underflow ? 1 : 0;
        }
        // flat-fill flagged nodes from the nearest populated node
        for (std::size_t m = 0; m < nl; ++m) {
            if (!flagged[m]) continue;
            std::size_t best = nl;
            for (std::size_t d = 1; d < nl; ++d) {
                if (m >= d && !flagged[m - d]) { best = m - d; break; }
                if (m + d < nl && !flagged[m + d]) { best = m + d; break; }
            }
            if (best < nl) {
                grid[static_cast<std::size_t>(k) * nl + m] = grid[static_cast<std::size_t>(k) * nl + best];
            }
            unpopulated.emplace_back(k, static_cast<int>(m));
        }
    }
    return grid;
}

} // namespace detail

// Reconstructs the idiosyncratic volatility eta(t, x) = sqrt(max(v_loc -
// beta^2 E[sigma^2(t,I)|S=x], 0)) on (every Euler step time) x (moneyness
// grid), for use by the independent-path stage.
inline SurfaceExtraction extract_eta_surface(const ParticleCloud& cloud,
                                             const std::vector<double>& moneyness_grid,
                                             double h_interp) {
    if (cloud.stocks.empty()) throw config_error("extract_eta_surface: empty cloud");
    if (!cloud.loc_vol) throw config_error("extract_eta_surface: cloud has no local-vol target");
    if (!(h_interp > 0.0)) throw config_error("extract_eta_surface: bandwidth must be > 0");
    detail::check_strictly_increasing(moneyness_grid, "extraction level grid");

    std::vector<double> levels_abs;
    for (double m : moneyness_grid) levels_abs.push_back(m * cloud.s0);

    SurfaceExtraction out;
    const auto cond = detail::conditional_sigma2_grid(cloud, levels_abs, h_interp, out.unpopulated);

    const std::size_t nl = moneyness_grid.size();
    std::vector<double> times(static_cast<std::size_t>(cloud.n_steps) + 1);
    for (int k = 0; k <= cloud.n_steps; ++k) times[static_cast<std::size_t>(k)] = k * cloud.dt;
    std::vector<double> values(times.size() * nl, 0.0);
    for (std::size_t k = 0; k < times.size(); ++k) {
        for (std::size_t m = 0; m < nl; ++m) {
            const double lv = cloud.loc_vol->value_at_level(times[k], levels_abs[m], cloud.s0);
            const double v = lv * lv - cloud.beta * cloud.beta * cond[k * nl + m];
            values[k * nl + m] = std::sqrt(std::max(v, 0.0));
        }
    }
    out.surface = make_vol_surface(std::move(times), moneyness_grid, std::move(values),
                                   cloud.loc_vol->cap, true);
    return out;
}

// Local volatility for the constant-correlation benchmark so that it shares
// the single-stock smile: sqrt(eta^2(t,x) + E[sigma^2(t, I_t) | S_t = x]).
inline SurfaceExtraction reconstruct_market_vloc(const VolSurface& eta, const ParticleCloud& cloud,
                                                 const std::vector<double>& moneyness_grid,
                                                 double h_interp) {
    if (cloud.stocks.empty()) throw config_error("reconstruct_market_vloc: empty cloud");
    if (!(h_interp > 0.0)) throw config_error("reconstruct_market_vloc: bandwidth must be > 0");
    detail::check_strictly_increasing(moneyness_grid, "reconstruction level grid");

    std::vector<double> levels_abs;
    for (double m : moneyness_grid) levels_abs.push_back(m * cloud.s0);

    SurfaceExtraction out;
    const auto cond = detail::conditional_sigma2_grid(cloud, levels_abs, h_interp, out.unpopulated);

    const std::size_t nl = moneyness_grid.size();
    std::vector<double> times(static_cast<std::size_t>(cloud.n_steps) + 1);
    for (int k = 0; k <= cloud.n_steps; ++k) times[static_cast<std::size_t>(k)] = k * cloud.dt;
    std::vector<double> values(times.size() * nl, 0.0);
    double max_val = 0.0;
    for (std::size_t k = 0; k < times.size(); ++k) {
        for (std::size_t m = 0; m < nl; ++m) {
            const double e = eta.value_at_level(times[k], levels_abs[m], cloud.s0);
            values[k * nl + m] = std::sqrt(e * e + cond[k * nl + m]);
            max_val = std::max(max_val, values[k * nl + m]);
        }
    }
    const double cap = std::max(max_val, eta.cap);
    out.surface = make_vol_surface(std::move(times), moneyness_grid, std::move(values), cap, true);
    return out;
}

// Joint calibration cloud for the original model: N particles, each carrying
// all M stocks with the index as their exact weighted sum.
struct CalibratedCloud {
    std::int64_t n_particles = 0;
    int n_steps = 0;
    double dt = 0.0;
    double horizon = 0.0;
    double rate = 0.0;
    std::vector<double> s0;
    std::vector<double> betas;
    std::vector<double> dividends;
    double i0 = 0.0;
    std::uint64_t seed = 0;
    SurfacePtr index_vol;
    std::vector<SurfacePtr> loc_vols;

    std::vector<std::vector<std::vector<double>>> stocks;    // [k][j][i]
    std::vector<std::vector<double>> index;                  // [k][i]
    std::vector<std::vector<std::vector<double>>> idio_var;  // [k][j][i]
    std::vector<std::vector<std::int64_t>> clamp_count;      // [k][j]
    std::vector<std::int64_t> interactions;                  // [k]
    std::int64_t underflow_fallbacks = 0;
    std::int64_t level_clamps = 0;

    std::int64_t total_clamps() const {
        std::int64_t c = 0;
        for (const auto& row : clamp_count) for (auto v : row) c += v;
        return c;
    }
};

// Adaptation of the particle method to the original coupled model: all M
// stocks are calibrated at the same time, with eta_j^2 = v_loc^j - beta_j^2 *
// E[sigma^2(t, I^M) | S^j] estimated across the cloud per stock. Refuses
// M * N * n interaction work above the budget (budget <= 0 disables the
// guardrail).
inline CalibratedCloud simulate_original_calibrated(const ModelSpec& spec,
                                                    const std::vector<SurfacePtr>& loc_vols,
                                                    const std::vector<double>& betas,
                                                    std::int64_t n_particles, int n_steps,
                                                    const KernelConfig& kernel, const NoisePlan& plan,
                                                    double work_budget = 0.0, int threads = 1) {
    const int m = spec.n_stocks();
    if (static_cast<int>(loc_vols.size()) != m || static_cast<int>(betas.size()) != m) {
        throw config_error("calibrated cloud: need one local-vol surface and one beta per stock");
    }
    for (const auto& s : loc_vols) {
        if (!s) throw config_error("calibrated cloud: missing local-vol surface");
    }
    if (n_particles < 2) throw config_error("calibrated cloud: needs at least 2 particles");
    if (n_steps < 1) throw config_error("calibrated cloud: n_steps must be >= 1");
    const double work = static_cast<double>(m) * static_cast<double>(n_particles) * n_steps;
    if (work_budget > 0.0 && work > work_budget) {
        throw budget_error("calibrated cloud: interaction work M*N*n = " + fmt17(work) +
                           " exceeds budget " + fmt17(work_budget));
    }

    CalibratedCloud cloud;
    cloud.n_particles = n_particles;
    cloud.n_steps = n_steps;
    cloud.horizon = spec.horizon;
    cloud.dt = spec.horizon / n_steps;
    cloud.rate = spec.rate;
    cloud.s0 = spec.s0;
    cloud.betas = betas;
    cloud.dividends = spec.dividends;
    cloud.i0 = spec.index_0();
    cloud.seed = plan.seed;
    cloud.index_vol = spec.index_vol;
    cloud.loc_vols = loc_vols;

    const double dt = cloud.dt;
    const double sqdt = std::sqrt(dt);
    const double h = kernel.bandwidth(n_particles);
    const double threshold = kernel.effective_threshold();
    const std::size_t n = static_cast<std::size_t>(n_particles);

    cloud.stocks.assign(static_cast<std::size_t>(n_steps) + 1,
                        std::vector<std::vector<double>>(static_cast<std::size_t>(m)));
    cloud.index.assign(static_cast<std::size_t>(n_steps) + 1, std::vector<double>(n, cloud.i0));
    cloud.idio_var.assign(static_cast<std::size_t>(n_steps),
                          std::vector<std::vector<double>>(static_cast<std::size_t>(m),
                                                           std::vector<double>(n, 0.0)));
    cloud.clamp_count.assign(static_cast<std::size_t>(n_steps),
                             std::vector<std::int64_t>(static_cast<std::size_t>(m), 0));
    cloud.interactions.assign(static_cast<std::size_t>(n_steps), 0);
    for (int j = 0; j < m; ++j) {
        for (int k = 0; k <= n_steps; ++k) {
            cloud.stocks[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)].assign(n, spec.s0[j]);
        }
    }

    std::vector<double> sigma2(n), sorted_s(n), sorted_y(n), estimate(n);
    std::vector<std::uint32_t> perm;
    const int workers = resolve_threads(threads);

    for (int k = 0; k < n_steps; ++k) {
        const double t = k * dt;
        const auto& i_now = cloud.index[static_cast<std::size_t>(k)];
        for (std::size_t i = 0; i < n; ++i) {
            const double sig = spec.index_vol->eval(t, i_now[i]);
            sigma2[i] = sig * sig;
        }

        for (int j = 0; j < m; ++j) {
            const auto& s_now = cloud.stocks[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)];
            detail::sort_permutation(s_now, perm);
            for (std::size_t r = 0; r < n; ++r) {
                sorted_s[r] = s_now[perm[r]];
                sorted_y[r] = sigma2[perm[r]];
            }
            std::vector<std::int64_t> inter_part(static_cast<std::size_t>(workers), 0);
            std::vector<std::int64_t> fall_part(static_cast<std::size_t>(workers), 0);
            {
                std::atomic<int> slot{0};
                parallel_for(static_cast<std::int64_t>(n), workers, [&](std::int64_t lo, std::int64_t hi) {
                    const int my = slot.fetch_add(1);
                    std::int64_t inter = 0, falls = 0;
                    for (std::int64_t q = lo; q < hi; ++q) {
                        estimate[perm[static_cast<std::size_t>(q)]] = detail::nw_query_sorted(
                            sorted_s, sorted_y, static_cast<std::size_t>(q), h, threshold, inter, falls);
                    }
                    inter_part[static_cast<std::size_t>(my)] += inter;
                    fall_part[static_cast<std::size_t>(my)] += falls;
                });
            }
            for (int w = 0; w < workers; ++w) {
                cloud.interactions[static_cast<std::size_t>(k)] += inter_part[static_cast<std::size_t>(w)];
                cloud.underflow_fallbacks += fall_part[static_cast<std::size_t>(w)];
            }

            auto& var_row = cloud.idio_var[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)];
            std::int64_t clamps = 0;
            for (std::size_t i = 0; i < n; ++i) {
                const double lv = loc_vols[static_cast<std::size_t>(j)]->value_at_level(t, s_now[i], spec.s0[j]);
                double v = lv * lv - betas[static_cast<std::size_t>(j)] * betas[static_cast<std::size_t>(j)] * estimate[i];
                if (v < 0.0) {
                    ++clamps;
                    v = 0.0;
                }
                var_row[i] = v;
            }
            cloud.clamp_count[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)] = clamps;
        }

        // advance all stocks with the shared systemic draw, then rebuild the
        // index as the exact weighted sum
        auto& i_next = cloud.index[static_cast<std::size_t>(k) + 1];
        std::int64_t level_clamps = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double sig = std::sqrt(sigma2[i]);
            const double g = plan.normal(static_cast<std::uint64_t>(i), static_cast<std::uint32_t>(k), 0);
            double new_index = 0.0;
            for (int j = 0; j < m; ++j) {
                const double gj = plan.normal(static_cast<std::uint64_t>(i), static_cast<std::uint32_t>(k),
                                              static_cast<std::uint32_t>(1 + j));
                const double s_cur = cloud.stocks[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)][i];
                const double v = cloud.idio_var[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)][i];
                double s_new = s_cur * (1.0 + (spec.rate - spec.dividends[j]) * dt +
                                        betas[static_cast<std::size_t>(j)] * sig * sqdt * g +
                                        std::sqrt(v) * sqdt * gj);
                s_new = detail::clamp_level(s_new, kLevelFloorScale * spec.s0[j], level_clamps);
                cloud.stocks[static_cast<std::size_t>(k) + 1][static_cast<std::size_t>(j)][i] = s_new;
                new_index += spec.weights[j] * s_new;
            }
            i_next[i] = new_index;
        }
        cloud.level_clamps += level_clamps;
    }
    return cloud;
}

// View one stock of a calibrated cloud as a single-stock particle cloud so
// the surface extractors can run on it.
inline ParticleCloud stock_view(const CalibratedCloud& cloud, int stock) {
    if (stock < 0 || stock >= static_cast<int>(cloud.loc_vols.size())) {
        throw config_error("stock_view: stock index out of range");
    }
    ParticleCloud out;
    out.n_particles = cloud.n_particles;
    out.n_steps = cloud.n_steps;
    out.dt = cloud.dt;
    out.horizon = cloud.horizon;
    out.rate = cloud.rate;
    out.dividend = cloud.dividends[static_cast<std::size_t>(stock)];
    out.s0 = cloud.s0[static_cast<std::size_t>(stock)];
    out.i0 = cloud.i0;
    out.beta = cloud.betas[static_cast<std::size_t>(stock)];
    out.seed = cloud.seed;
    out.index_vol = cloud.index_vol;
    out.loc_vol = cloud.loc_vols[static_cast<std::size_t>(stock)];
    out.stocks.resize(static_cast<std::size_t>(cloud.n_steps) + 1);
    out.indices = cloud.index;
    for (int k = 0; k <= cloud.n_steps; ++k) {
        out.stocks[static_cast<std::size_t>(k)] = cloud.stocks[static_cast<std::size_t>(k)][static_cast<std::size_t>(stock)];
    }
    return out;
}

} // namespace ixvol
