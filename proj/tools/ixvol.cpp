#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "ixvol/commands.hpp"

namespace {

struct CliOptions {
    std::string config_path;
    std::string out_dir;
    bool out_dir_set = false;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int threads = 0;
    bool threads_set = false;
};

void add_common(CLI::App* cmd, CliOptions& opt) {
    cmd->add_option("--config", opt.config_path, "run configuration file")->required();
    cmd->add_option("--seed", opt.seed, "seed override (takes precedence over the config)")
        ->each([&opt](const std::string&) { opt.seed_set = true; });
    cmd->add_option("--out", opt.out_dir, "output directory override")
        ->each([&opt](const std::string&) { opt.out_dir_set = true; });
    cmd->add_option("--threads", opt.threads, "worker count, 0 = auto (never changes results)")
        ->each([&opt](const std::string&) { opt.threads_set = true; });
}

ixvol::CommandContext make_context(const CliOptions& opt) {
    ixvol::CommandContext ctx;
    ctx.cfg = ixvol::IniConfig::parse_file(opt.config_path);
    if (opt.seed_set) {
        ctx.seed = opt.seed;
    } else if (ctx.cfg.has("run", "seed")) {
        ctx.seed = ctx.cfg.get_u64("run", "seed");
    } else {
        throw ixvol::config_error("[run] seed: required (or pass --seed); runs must be reproducible");
    }
    ctx.out_dir = opt.out_dir_set ? opt.out_dir : ctx.cfg.get_string_or("run", "out_dir", "out");
    const int threads =
        opt.threads_set ? opt.threads : static_cast<int>(ctx.cfg.get_int_or("run", "threads", 0));
    ctx.threads = ixvol::resolve_threads(threads);
    return ctx;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Monte Carlo toolchain for an index-coupled equity model"};
    app.require_subcommand(1);

    CliOptions opt;
    auto* c_sim = app.add_subcommand("simulate", "run a model family, emit terminal statistics");
    auto* c_cal = app.add_subcommand("calibrate", "particle calibration of the idiosyncratic surface");
    auto* c_smile = app.add_subcommand("smile", "implied-volatility curve from a simulated family");
    auto* c_wof = app.add_subcommand("worst-of", "worst-of basket call prices");
    auto* c_dup = app.add_subcommand("dupire", "local volatility from a call-price grid");
    auto* c_thm = app.add_subcommand("theorems", "convergence bounds and the coupled rate study");
    for (auto* cmd : {c_sim, c_cal, c_smile, c_wof, c_dup, c_thm}) add_common(cmd, opt);

    CLI11_PARSE(app, argc, argv);

    try {
        const auto ctx = make_context(opt);
        if (c_sim->parsed()) ixvol::cmd_simulate(ctx);
        else if (c_cal->parsed()) ixvol::cmd_calibrate(ctx);
        else if (c_smile->parsed()) ixvol::cmd_smile(ctx);
        else if (c_wof->parsed()) ixvol::cmd_worst_of(ctx);
        else if (c_dup->parsed()) ixvol::cmd_dupire(ctx);
        else if (c_thm->parsed()) ixvol::cmd_theorems(ctx);
        return 0;
    } catch (const ixvol::budget_error& e) {
        std::fprintf(stderr, "budget error: %s\n", e.what());
        return 4;
    } catch (const ixvol::numeric_error& e) {
        std::fprintf(stderr, "numerical error: %s\n", e.what());
        return 3;
    } catch (const ixvol::config_error& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
