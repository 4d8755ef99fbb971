// ttmlab: runs the toy experiments and writes CSV.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "ttm/ttm.hpp"

namespace {

struct Args {
    std::string experiment;
    std::string config;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string out;
    std::string ckpt;
};

void emit(const ttm::CsvTable& t, const std::string& path) {
    if (path.empty())
        t.write(std::cout);
    else
        t.save(path);
}

std::string require_ckpt(const Args& a) {
    if (a.ckpt.empty()) throw ttm::ConfigError(a.experiment + ": --ckpt <path> is required");
    return a.ckpt;
}

int run(const Args& a) {
    using namespace ttm;
    Config cfg = Config::load(a.config);
    if (cfg.has("experiment") && cfg.get_string("experiment", "") != a.experiment)
        throw ConfigError("config names experiment '" + cfg.get_string("experiment", "") + "' but '" + a.experiment +
                          "' was requested");
    const std::uint64_t seed = a.seed_set ? a.seed : static_cast<std::uint64_t>(cfg.get_int("seed", 0));
    const std::string& e = a.experiment;

    std::optional<CsvTable> table;
    if (e == "single-step-error") {
        table = to_csv(run_single_step_error(cfg, seed));
    } else if (e == "fd-gap") {
        table = to_csv(run_fd_gap(cfg, seed));
    } else if (e == "lte-slopes") {
        table = to_csv(run_lte_slopes(cfg, seed));
    } else if (e == "encode-decode") {
        table = to_csv(run_encode_decode(cfg, seed));
    } else if (e == "guidance-sweep") {
        table = to_csv(run_guidance_sweep(cfg, seed));
    } else if (e == "sample-grid") {
        const SampleGridResult r = run_sample_grid(cfg, seed);
        CsvTable samples = samples_csv(r);
        CsvTable summary = summary_csv(r);
        stamp(samples, e, cfg, seed);
        stamp(summary, e, cfg, seed);
        emit(samples, a.out);
        if (a.out.empty())
            summary.write(std::cout);
        else
            summary.save(a.out + ".summary.csv");
    } else if (e == "train-score") {
        const std::string ckpt = require_ckpt(a);
        TrainScoreResult r = run_train_score(cfg, seed);
        r.net.save(ckpt);
        table = to_csv(r);
    } else if (e == "train-head") {
        const std::string ckpt = require_ckpt(a);
        const Mlp score = Mlp::load(cfg.require_string("score_ckpt"));
        TrainHeadResult r = run_train_head(cfg, seed, score);
        r.head.net.save(ckpt);
        table = to_csv(r);
    } else {
        throw ConfigError("unknown experiment '" + e + "'");
    }
    if (table) {
        stamp(*table, e, cfg, seed);
        emit(*table, a.out);
    }
    for (const auto& k : cfg.unused_keys()) std::cerr << "ttmlab: warning: config key '" << k << "' was not used\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"ttmlab: higher-order diffusion ODE solver experiments on a 2D toy"};
    Args a;
    app.add_option("experiment", a.experiment,
                   "single-step-error | fd-gap | sample-grid | lte-slopes | encode-decode | guidance-sweep | "
                   "train-score | train-head")
        ->required();
    app.add_option("--config", a.config, "flat key = value config file")->required();
    auto* seed_opt = app.add_option("--seed", a.seed, "master seed (overrides the config's seed key)");
    app.add_option("--out", a.out, "output CSV path (stdout if omitted)");
    app.add_option("--ckpt", a.ckpt, "checkpoint output path for train-score / train-head");
    CLI11_PARSE(app, argc, argv);
    a.seed_set = seed_opt->count() > 0;
    try {
        return run(a);
    } catch (const ttm::ConfigError& ex) {
        std::cerr << "ttmlab: config error: " << ex.what() << "\n";
        return 2;
    } catch (const ttm::CapabilityError& ex) {
        std::cerr << "ttmlab: capability error: " << ex.what() << "\n";
        return 3;
    } catch (const std::exception& ex) {
        std::cerr << "ttmlab: error: " << ex.what() << "\n";
        return 1;
    }
}
