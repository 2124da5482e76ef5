#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "config.hpp"
#include "csv.hpp"
#include "errors.hpp"
#include "kernel.hpp"
#include "model.hpp"
#include "noise.hpp"
#include "particle.hpp"
#include "pricing.hpp"
#include "sde.hpp"
#include "surface.hpp"
#include "theory.hpp"

namespace ixvol {

struct CommandContext {
    IniConfig cfg;
    std::uint64_t seed = 0;
    std::string out_dir = "out";
    int threads = 1;

    std::string out_path(const std::string& name) const {
        std::filesystem::create_directories(out_dir);
        return (std::filesystem::path(out_dir) / name).string();
    }
};

inline constexpr const char* kSummaryHeader =
    "series,s0,terminal_mean,terminal_stderr,terminal_min,terminal_max,discounted_mean,clamp_count";
inline constexpr const char* kCalibReportHeader =
    "step,time,clamp_count,clamp_mass,eta_min,eta_max,interactions";
inline constexpr const char* kSmileHeader = "moneyness,implied_vol,price,stderr,status";
inline constexpr const char* kWorstOfHeader = "strike,price,stderr";
inline constexpr const char* kStudyHeader =
    "m,p_w,p_beta,p_delta,empirical_index,stderr_index,empirical_stock1,stderr_stock1,"
    "bound_theorem1,bound_theorem2,flagged";

namespace detail {

inline SurfacePtr load_surface(const IniConfig& cfg, const std::string& key, bool default_moneyness,
                               const std::string& base_dir) {
    const std::string raw = cfg.get_string("surfaces", key);
    std::filesystem::path p(raw);
    if (p.is_relative() && !base_dir.empty()) {
        const auto joined = std::filesystem::path(base_dir) / p;
        if (std::filesystem::exists(joined)) p = joined;
    }
    if (!std::filesystem::exists(p)) {
        throw config_error("[surfaces] " + key + ": file not found: " + raw);
    }
    const double cap = cfg.get_double_or("surfaces", key + "_cap", 5.0);
    const bool moneyness = cfg.get_bool_or("surfaces", key + "_moneyness", default_moneyness);
    return std::make_shared<VolSurface>(read_surface_csv(p.string(), cap, moneyness));
}

inline std::string config_dir(const IniConfig& cfg) {
    const auto& origin = cfg.origin();
    if (origin.empty() || origin == "<string>") return "";
    return std::filesystem::path(origin).parent_path().string();
}

inline void check_positive_count(std::int64_t v, const std::string& field) {
    if (v < 1) throw config_error(field + ": must be >= 1");
}

// Per-stock surfaces: either one shared `<key>` entry or `<key>_1 .. <key>_M`.
inline std::vector<SurfacePtr> load_stock_surfaces(const IniConfig& cfg, const std::string& key,
                                                   std::size_t m, const std::string& base_dir) {
    std::vector<SurfacePtr> out;
    if (cfg.has("surfaces", key)) {
        const auto shared = load_surface(cfg, key, true, base_dir);
        out.assign(m, shared);
        return out;
    }
    for (std::size_t j = 1; j <= m; ++j) {
        out.push_back(load_surface(cfg, key + "_" + std::to_string(j), true, base_dir));
    }
    return out;
}

inline ModelSpec load_model(const IniConfig& cfg) {
    const auto weights = cfg.get_list("model", "weights");
    const auto betas = cfg.get_list("model", "betas");
    const auto dividends = cfg.get_list("model", "dividends");
    const auto s0 = cfg.get_list("model", "s0");
    const double rate = cfg.get_double("model", "rate");
    const double horizon = cfg.get_double("model", "horizon");
    const std::string dir = config_dir(cfg);
    const auto index_vol = load_surface(cfg, "index_vol", false, dir);
    const auto idio = load_stock_surfaces(cfg, "idio_vol", weights.size(), dir);
    return make_model_spec(weights, betas, dividends, s0, rate, horizon, index_vol, idio);
}

inline LimitSpec load_limit(const IniConfig& cfg) {
    const std::string dir = config_dir(cfg);
    const auto index_vol = load_surface(cfg, "index_vol", false, dir);
    return make_limit_spec(cfg.get_double_or("limit", "beta", 1.0), cfg.get_double("limit", "delta"),
                           cfg.get_double_or("limit", "delta_index", cfg.get_double("limit", "delta")),
                           cfg.get_double("limit", "i0"), index_vol);
}

struct SimulationBundle {
    PathEnsemble ensemble;
    double rate = 0.0;
    double delta_index = 0.0;        // q used for index smiles
    std::vector<double> dividends;   // q per stock
};

inline SimulationBundle run_family(const CommandContext& ctx, const std::string& section) {
    const auto& cfg = ctx.cfg;
    const std::string family = cfg.get_string(section, "family");
    const auto n_paths = cfg.get_int(section, "n_paths");
    const auto n_steps = cfg.get_int(section, "n_steps");
    check_positive_count(n_paths, "[" + section + "] n_paths");
    check_positive_count(n_steps, "[" + section + "] n_steps");
    NoisePlan plan{ctx.seed, 0};
    const std::string dir = config_dir(cfg);

    SimulationBundle out;
    if (family == "original") {
        const auto spec = load_model(cfg);
        std::vector<int> record(static_cast<std::size_t>(spec.n_stocks()));
        for (int j = 0; j < spec.n_stocks(); ++j) record[static_cast<std::size_t>(j)] = j;
        out.ensemble = simulate_original(spec, static_cast<int>(n_steps), n_paths, plan, {}, record,
                                         ctx.threads);
        out.rate = spec.rate;
        out.delta_index = cfg.get_double_or("limit", "delta_index", 0.0);
        out.dividends = spec.dividends;
    } else if (family == "simplified") {
        const auto limit = load_limit(cfg);
        const auto s0 = cfg.get_list("legs", "s0");
        const auto betas = cfg.get_list("legs", "betas");
        const auto dividends = cfg.get_list("legs", "dividends");
        if (betas.size() != s0.size() || dividends.size() != s0.size()) {
            throw config_error("[legs] s0, betas and dividends must have equal length");
        }
        const auto etas = load_stock_surfaces(cfg, "eta_vol", s0.size(), dir);
        std::vector<SimplifiedLeg> legs;
        for (std::size_t j = 0; j < s0.size(); ++j) {
            legs.push_back({s0[j], betas[j], dividends[j], etas[j]});
        }
        std::vector<double> weights;
        if (cfg.has("legs", "weights")) weights = cfg.get_list("legs", "weights");
        const double rate = cfg.get_double("legs", "rate");
        const double horizon = cfg.get_double("legs", "horizon");
        out.ensemble = simulate_simplified(limit, legs, rate, horizon, static_cast<int>(n_steps),
                                           n_paths, plan, weights, ctx.threads);
        out.rate = rate;
        out.delta_index = limit.delta_index;
        out.dividends = dividends;
    } else if (family == "market") {
        const auto s0 = cfg.get_list("market", "s0");
        const auto vols = load_stock_surfaces(cfg, "loc_vol", s0.size(), dir);
        std::vector<MarketLeg> legs;
        for (std::size_t j = 0; j < s0.size(); ++j) legs.push_back({s0[j], vols[j]});
        std::vector<double> weights;
        if (cfg.has("market", "weights")) weights = cfg.get_list("market", "weights");
        const double rate = cfg.get_double("market", "rate");
        const double horizon = cfg.get_double("market", "horizon");
        const double rho = cfg.get_double("market", "rho");
        out.ensemble = simulate_market_model(legs, rho, rate, horizon, static_cast<int>(n_steps),
                                             n_paths, plan, weights, ctx.threads);
        out.rate = rate;
        out.delta_index = 0.0;
        out.dividends.assign(s0.size(), 0.0);
    } else {
        throw config_error("[" + section + "] family: unknown family '" + family + "'");
    }
    return out;
}

inline void append_series_summary(std::vector<std::vector<std::string>>& rows,
                                  const PathEnsemble& ens, const RecordedSeries& series,
                                  double rate) {
    const auto terminals = ens.column(series, ens.n_steps);
    double sum = 0.0, sum2 = 0.0, mn = terminals[0], mx = terminals[0];
    for (double x : terminals) {
        sum += x;
        sum2 += x * x;
        mn = std::min(mn, x);
        mx = std::max(mx, x);
    }
    const double n = static_cast<double>(terminals.size());
    const double mean = sum / n;
    const double var = std::max(sum2 / n - mean * mean, 0.0);
    const double se = terminals.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
    rows.push_back({series.name, fmt17(series.x0), fmt17(mean), fmt17(se), fmt17(mn), fmt17(mx),
                    fmt17(std::exp(-rate * ens.horizon) * mean), fmt_int(ens.clamp_count)});
}

inline const RecordedSeries& select_series(const PathEnsemble& ens, const std::string& name) {
    if (name == "index") return ens.index;
    if (name == "reconstructed") {
        if (!ens.reconstructed_index) {
            throw config_error("series 'reconstructed' requires weights in the leg section");
        }
        return *ens.reconstructed_index;
    }
    for (const auto& s : ens.stocks) {
        if (s.name == name) return s;
    }
    throw config_error("unknown series '" + name + "' (use index, reconstructed or stock_<j>)");
}

struct CalibrationArtifacts {
    ParticleCloud cloud;
    double beta = 0.0;
    KernelConfig kernel;
    SurfaceExtraction eta;
    std::vector<double> level_grid;
    double h_interp = 0.0;
};

inline CalibrationArtifacts run_calibration(const CommandContext& ctx) {
    const auto& cfg = ctx.cfg;
    const std::string dir = config_dir(cfg);
    const auto limit = load_limit(cfg);
    const auto loc_vol = load_surface(cfg, "loc_vol", true, dir);

    const auto n_particles = cfg.get_int("particles", "n_particles");
    const auto n_steps = cfg.get_int("particles", "n_steps");
    check_positive_count(n_particles, "[particles] n_particles");
    check_positive_count(n_steps, "[particles] n_steps");
    const double horizon = cfg.get_double("particles", "horizon");
    const double s0 = cfg.get_double("limit", "s0");
    const double rate = cfg.get_double("limit", "rate");
    const double dividend = cfg.get_double("limit", "delta");

    const std::string mode_raw = cfg.get_string_or("kernel", "mode", "naive");
    KernelConfig::Mode mode;
    if (mode_raw == "naive") mode = KernelConfig::Mode::naive;
    else if (mode_raw == "accelerated") mode = KernelConfig::Mode::accelerated;
    else throw config_error("[kernel] mode: expected naive or accelerated, got '" + mode_raw + "'");
    const double default_exponent = mode == KernelConfig::Mode::accelerated ? 0.1 : 0.2;
    const double exponent = cfg.get_double_or("kernel", "bandwidth_exponent", default_exponent);
    const double default_threshold =
        mode == KernelConfig::Mode::accelerated ? 1.0 / static_cast<double>(n_particles) : 0.0;
    const double threshold = cfg.get_double_or("kernel", "threshold", default_threshold);
    const auto kernel = make_kernel_config(mode, exponent, threshold);

    CalibrationArtifacts art;
    art.kernel = kernel;
    art.beta = cfg.has("limit", "beta")
                   ? cfg.get_double("limit", "beta")
                   : select_beta(*loc_vol, *limit.index_vol, s0, limit.i0,
                                 cfg.get_double("limit", "beta_hist"));

    NoisePlan plan{ctx.seed, 0};
    art.cloud = simulate_particle_system(limit, loc_vol, art.beta, rate, dividend, s0, horizon,
                                         n_particles, static_cast<int>(n_steps), kernel, plan,
                                         ctx.threads);

    const double lo = cfg.get_double_or("extract", "level_min", 0.3);
    const double hi = cfg.get_double_or("extract", "level_max", 2.0);
    const auto n_levels = cfg.get_int_or("extract", "n_levels", 41);
    check_positive_count(n_levels, "[extract] n_levels");
    if (!(hi > lo && lo > 0.0)) throw config_error("[extract] level_min/level_max: need 0 < min < max");
    art.level_grid.resize(static_cast<std::size_t>(n_levels));
    for (std::int64_t i = 0; i < n_levels; ++i) {
        art.level_grid[static_cast<std::size_t>(i)] =
            n_levels == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n_levels - 1);
    }
    art.h_interp = cfg.get_double_or("extract", "h_interp",
                                     std::pow(static_cast<double>(n_particles), -0.1));
    art.eta = extract_eta_surface(art.cloud, art.level_grid, art.h_interp);
    return art;
}

inline void write_calibration_report(const CommandContext& ctx, const ParticleCloud& cloud) {
    std::vector<std::vector<std::string>> rows;
    for (int k = 0; k < cloud.n_steps; ++k) {
        rows.push_back({fmt_int(k), fmt17(k * cloud.dt),
                        fmt_int(cloud.clamp_count[static_cast<std::size_t>(k)]),
                        fmt17(cloud.clamp_mass[static_cast<std::size_t>(k)]),
                        fmt17(cloud.eta_min[static_cast<std::size_t>(k)]),
                        fmt17(cloud.eta_max[static_cast<std::size_t>(k)]),
                        fmt_int(cloud.interactions[static_cast<std::size_t>(k)])});
    }
    write_csv(ctx.out_path("calib_report.csv"), split_csv_line(kCalibReportHeader), rows);
}

} // namespace detail

// simulate: run one model family and emit terminal statistics (and the full
// path dump when requested).
inline void cmd_simulate(const CommandContext& ctx) {
    const auto bundle = detail::run_family(ctx, "simulate");
    const auto& ens = bundle.ensemble;

    std::vector<std::vector<std::string>> rows;
    detail::append_series_summary(rows, ens, ens.index, bundle.rate);
    for (const auto& s : ens.stocks) detail::append_series_summary(rows, ens, s, bundle.rate);
    if (ens.reconstructed_index) {
        detail::append_series_summary(rows, ens, *ens.reconstructed_index, bundle.rate);
    }
    write_csv(ctx.out_path("summary.csv"), split_csv_line(kSummaryHeader), rows);

    if (ctx.cfg.get_bool_or("simulate", "dump_paths", false)) {
        std::vector<std::string> header{"path", "step", "time", "index"};
        for (const auto& s : ens.stocks) header.push_back(s.name);
        std::vector<std::vector<std::string>> dump;
        for (std::int64_t p = 0; p < ens.n_paths; ++p) {
            for (int k = 0; k <= ens.n_steps; ++k) {
                std::vector<std::string> row{fmt_int(p), fmt_int(k), fmt17(k * ens.dt),
                                             fmt17(ens.value(ens.index, p, k))};
                for (const auto& s : ens.stocks) row.push_back(fmt17(ens.value(s, p, k)));
                dump.push_back(std::move(row));
            }
        }
        write_csv(ctx.out_path("dump.csv"), header, dump);
    }
}

// calibrate: the two-stage procedure. Runs the interacting-particle system,
// extracts the idiosyncratic surface, and writes it with the per-step
// clamp/interaction report.
inline void cmd_calibrate(const CommandContext& ctx) {
    const auto art = detail::run_calibration(ctx);
    write_surface_csv(art.eta.surface, ctx.out_path("eta_surface.csv"));
    detail::write_calibration_report(ctx, art.cloud);

    std::vector<std::vector<std::string>> rows;
    rows.push_back({"beta", fmt17(art.beta)});
    rows.push_back({"n_particles", fmt_int(art.cloud.n_particles)});
    rows.push_back({"n_steps", fmt_int(art.cloud.n_steps)});
    rows.push_back({"bandwidth", fmt17(art.kernel.bandwidth(art.cloud.n_particles))});
    rows.push_back({"threshold", fmt17(art.kernel.effective_threshold())});
    rows.push_back({"h_interp", fmt17(art.h_interp)});
    rows.push_back({"total_interactions", fmt_int(art.cloud.total_interactions())});
    rows.push_back({"total_variance_clamps", fmt_int(art.cloud.total_clamps())});
    rows.push_back({"level_clamps", fmt_int(art.cloud.level_clamps)});
    rows.push_back({"underflow_fallbacks", fmt_int(art.cloud.underflow_fallbacks)});
    rows.push_back({"unpopulated_nodes", fmt_int(static_cast<std::int64_t>(art.eta.unpopulated.size()))});
    write_csv(ctx.out_path("calib_summary.csv"), {"name", "value"}, rows);
}

// smile: price a strike grid on a simulated family (or on the interacting
// cloud itself) and invert to implied volatilities.
inline void cmd_smile(const CommandContext& ctx) {
    const auto& cfg = ctx.cfg;
    const auto moneyness = cfg.get_list("smile", "moneyness");
    const std::string family = cfg.get_string("smile", "family");

    SmileCurve curve;
    if (family == "particle") {
        const auto art = detail::run_calibration(ctx);
        const double maturity = cfg.get_double_or("smile", "maturity", art.cloud.horizon);
        const double q = cfg.get_double_or("smile", "q", art.cloud.dividend);
        curve = smile(art.cloud, moneyness, art.cloud.rate, q, maturity);
        detail::write_calibration_report(ctx, art.cloud);
    } else {
        const auto bundle = detail::run_family(ctx, "smile");
        const std::string series_name = cfg.get_string_or("smile", "series", "index");
        const auto& series = detail::select_series(bundle.ensemble, series_name);
        const double maturity = cfg.get_double_or("smile", "maturity", bundle.ensemble.horizon);
        double q_default = bundle.delta_index;
        for (std::size_t j = 0; j < bundle.ensemble.stocks.size(); ++j) {
            if (&bundle.ensemble.stocks[j] == &series) q_default = bundle.dividends[j];
        }
        const double q = cfg.get_double_or("smile", "q", q_default);
        curve = smile(bundle.ensemble, series, moneyness, bundle.rate, q, maturity);
    }

    std::vector<std::vector<std::string>> rows;
    for (std::size_t i = 0; i < curve.moneyness.size(); ++i) {
        rows.push_back({fmt17(curve.moneyness[i]),
                        std::isnan(curve.implied_vols[i]) ? "nan" : fmt17(curve.implied_vols[i]),
                        fmt17(curve.prices[i]), fmt17(curve.stderrs[i]),
                        to_string(curve.status[i])});
    }
    write_csv(ctx.out_path("smile.csv"), split_csv_line(kSmileHeader), rows);
}

// worst-of: discounted MC price of the worst normalized performance.
inline void cmd_worst_of(const CommandContext& ctx) {
    const auto& cfg = ctx.cfg;
    const auto strikes = cfg.get_list("worst_of", "strikes");
    const auto bundle = detail::run_family(ctx, "worst_of");
    const double maturity = cfg.get_double_or("worst_of", "maturity", bundle.ensemble.horizon);
    std::vector<std::vector<std::string>> rows;
    for (double strike : strikes) {
        const auto est = worst_of_price(bundle.ensemble, strike, bundle.rate, maturity);
        rows.push_back({fmt17(strike), fmt17(est.price), fmt17(est.stderr_est)});
    }
    write_csv(ctx.out_path("worstof.csv"), split_csv_line(kWorstOfHeader), rows);
}

// dupire: local volatility surface extracted from a call-price grid.
inline void cmd_dupire(const CommandContext& ctx) {
    const auto& cfg = ctx.cfg;
    std::string path = cfg.get_string("dupire", "prices");
    if (!std::filesystem::exists(path)) {
        const std::string dir = detail::config_dir(cfg);
        const auto joined = std::filesystem::path(dir) / path;
        if (!dir.empty() && std::filesystem::exists(joined)) path = joined.string();
        else throw config_error("[dupire] prices: file not found: " + path);
    }
    const double spot = cfg.get_double("dupire", "spot");
    const double rate = cfg.get_double("dupire", "rate");
    const double dividend = cfg.get_double_or("dupire", "dividend", 0.0);
    const double floor = cfg.get_double_or("dupire", "variance_floor", kVarianceFloor);
    const double cap = cfg.get_double_or("dupire", "vol_cap", 5.0);

    // price grids reuse the surface CSV layout: header = strikes, rows = times
    const auto raw = read_surface_csv(path, 1e300, false);
    const auto ps = make_price_surface(raw.times, raw.levels, raw.values, spot, rate, dividend);

    std::vector<double> strikes(ps.strikes.begin() + 1, ps.strikes.end() - 1);
    std::vector<double> values;
    for (double t : ps.times) {
        for (double strike : strikes) {
            values.push_back(std::sqrt(dupire_local_variance(ps, t, strike, floor, cap)));
        }
    }
    const auto out = make_vol_surface(ps.times, strikes, values, cap, false);
    write_surface_csv(out, ctx.out_path("localvol.csv"));
}

// theorems: explicit constants, bounds and the coupled convergence study.
inline void cmd_theorems(const CommandContext& ctx) {
    const auto& cfg = ctx.cfg;
    const std::string dir = detail::config_dir(cfg);
    const auto m_list_raw = cfg.get_int_list("family", "m_list");
    const double beta = cfg.get_double_or("family", "beta", 1.0);
    const double delta = cfg.get_double_or("family", "delta", 0.0);
    const double s0 = cfg.get_double("family", "s0");
    const double rate = cfg.get_double("family", "rate");
    const double horizon = cfg.get_double("family", "horizon");
    const auto index_vol = detail::load_surface(cfg, "index_vol", false, dir);
    const auto eta_vol = detail::load_surface(cfg, "eta_vol", true, dir);

    const int p = static_cast<int>(cfg.get_int_or("study", "p", 1));
    const auto n_paths = cfg.get_int("study", "n_paths");
    const auto n_steps = cfg.get_int("study", "n_steps");
    detail::check_positive_count(n_paths, "[study] n_paths");
    detail::check_positive_count(n_steps, "[study] n_steps");

    auto family = [&](int m) {
        std::vector<double> w(static_cast<std::size_t>(m), 1.0 / m);
        std::vector<double> b(static_cast<std::size_t>(m), beta);
        std::vector<double> d(static_cast<std::size_t>(m), delta);
        std::vector<double> s(static_cast<std::size_t>(m), s0);
        std::vector<SurfacePtr> etas(static_cast<std::size_t>(m), eta_vol);
        return make_model_spec(w, b, d, s, rate, horizon, index_vol, etas);
    };
    const auto limit = make_limit_spec(beta, delta, cfg.get_double_or("family", "delta_index", delta),
                                       s0, index_vol);

    std::vector<int> m_grid;
    for (auto m : m_list_raw) m_grid.push_back(static_cast<int>(m));
    const auto study = convergence_study(family, limit, m_grid, p, n_paths,
                                         static_cast<int>(n_steps), ctx.seed, ctx.threads);

    std::vector<std::vector<std::string>> rows;
    for (const auto& row : study.rows) {
        rows.push_back({fmt_int(row.m), fmt17(row.p_w), fmt17(row.p_beta), fmt17(row.p_delta),
                        fmt17(row.index_distance.mean), fmt17(row.index_distance.stderr_est),
                        fmt17(row.stock_distance.mean), fmt17(row.stock_distance.stderr_est),
                        fmt17(row.bound_theorem1), fmt17(row.bound_theorem2),
                        row.flagged ? "1" : "0"});
    }
    write_csv(ctx.out_path("study.csv"), split_csv_line(kStudyHeader), rows);

    const auto spec = family(m_grid.back());
    const auto report = make_bound_report(spec, limit, p);
    std::vector<std::vector<std::string>> brows;
    brows.push_back({"p", fmt_int(report.p)});
    brows.push_back({"m", fmt_int(m_grid.back())});
    brows.push_back({"p_w", fmt17(report.p_w)});
    brows.push_back({"p_beta", fmt17(report.p_beta)});
    brows.push_back({"p_delta", fmt17(report.p_delta)});
    brows.push_back({"k_p", fmt17(report.k_p)});
    brows.push_back({"k_b", fmt17(report.k_b)});
    brows.push_back({"k_sigma", fmt17(report.k_sigma)});
    brows.push_back({"k_eta", fmt17(report.k_eta)});
    brows.push_back({"k_lip", fmt17(report.k_lip)});
    brows.push_back({"c_p", fmt17(report.c_p)});
    brows.push_back({"theorem1_constant", fmt17(report.theorem1_c)});
    brows.push_back({"theorem1_bound", fmt17(report.theorem1)});
    brows.push_back({"theorem2_bound_stock1", fmt17(report.theorem2.front())});
    brows.push_back({"reconstructed_bound", fmt17(report.reconstructed)});
    brows.push_back({"study_slope", fmt17(study.slope)});
    brows.push_back({"study_intercept", fmt17(study.intercept)});
    write_csv(ctx.out_path("bounds.csv"), {"name", "value"}, brows);
}

} // namespace ixvol
