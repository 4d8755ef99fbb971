#pragma once

// The toy experiments. Each run_* function reads its parameters from a flat
// Config, computes a result struct, and can render it as a CsvTable whose
// metadata lines carry the config hash and seed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "config.hpp"
#include "fields.hpp"
#include "gmm.hpp"
#include "metrics.hpp"
#include "net.hpp"
#include "schedule.hpp"
#include "solvers.hpp"

namespace ttm {

// ---------------------------------------------------------------------------
// Shared setup.

struct Setup {
    VpSchedule sched;
    GaussianMixture gmm;
};

inline VpSchedule schedule_from(const Config& c) {
    return VpSchedule(c.get_double("beta0", 0.1), c.get_double("beta1", 19.9), c.get_double("t_cutoff", 1e-3));
}

inline Setup setup_from(const Config& c) {
    Setup s{schedule_from(c), {}};
    if (c.has("mixture")) {
        s.gmm = load_mixture(c.get_string("mixture", ""));
    } else {
        ToySpec spec;
        spec.s1 = c.get_double("s1", spec.s1);
        spec.s2 = c.get_double("s2", spec.s2);
        spec.sigma = c.get_double("sigma", spec.sigma);
        s.gmm = build_toy(spec);
    }
    return s;
}

inline StridingSpec striding_from(const Config& c, const std::string& key, double t_cutoff,
                                  const std::string& def = "quadratic") {
    const std::string kind = c.get_string(key, def);
    if (kind == "linear") return StridingSpec::linear(t_cutoff);
    if (kind == "quadratic") return StridingSpec::quadratic(t_cutoff);
    if (kind == "power") return StridingSpec{StridingKind::power, c.get_double(key + "_rho", 2.0), t_cutoff};
    throw ConfigError("unknown striding '" + kind + "'");
}

inline DerivativeKind derivative_from(const Config& c) {
    const std::string d = c.get_string("derivative", "exact");
    if (d == "exact") return DerivativeKind::exact;
    if (d == "autodiff") return DerivativeKind::autodiff;
    if (d == "none") return DerivativeKind::none;
    throw ConfigError("unknown derivative provider '" + d + "'");
}

inline std::vector<Method> methods_from(const Config& c, const std::string& key, std::vector<std::string> def) {
    std::vector<Method> out;
    for (const auto& s : c.get_strings(key, std::move(def))) out.push_back(parse_method(s));
    return out;
}

inline void stamp(CsvTable& t, const std::string& experiment, const Config& c, std::uint64_t seed) {
    t.meta("experiment", experiment);
    t.meta("config_hash", c.hash_hex());
    t.meta("seed", std::to_string(seed));
}

/// Points x_t = alpha x0 + sigma eps with x0 from the data, from one stream.
inline std::vector<Vec2d> diffused_points(const GaussianMixture& gmm, const VpSchedule& sched, double t, std::size_t n,
                                          std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<Vec2d> x0 = gmm.sample(n, rng);
    for (auto& p : x0) p = p * sched.alpha(t) + standard_normal2(rng) * sched.sigma(t);
    return x0;
}

struct Stats {
    double mean = 0.0, std = 0.0, q10 = 0.0, q50 = 0.0, q90 = 0.0;
};

inline Stats summarize(std::vector<double> v) {
    Stats s;
    if (v.empty()) return s;
    const double n = static_cast<double>(v.size());
    s.mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = v.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    std::sort(v.begin(), v.end());
    auto q = [&](double p) {
        const double pos = p * (n - 1.0);
        const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
        const std::size_t hi = std::min(lo + 1, v.size() - 1);
        return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
    };
    s.q10 = q(0.1);
    s.q50 = q(0.5);
    s.q90 = q(0.9);
    return s;
}

/// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw ShapeError("loglog_slope: need >= 2 matching points");
    double mx = 0.0, my = 0.0;
    const double n = static_cast<double>(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += std::log(x[i]);
        my += std::log(y[i]);
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = std::log(x[i]) - mx;
        sxy += dx * (std::log(y[i]) - my);
        sxx += dx * dx;
    }
    return sxy / sxx;
}

// ---------------------------------------------------------------------------
// Single-step error against fine DDIM oracle trajectories.

struct SingleStepRow {
    Method method;
    double t_start, dt;
    Stats err;
};

struct SingleStepResult {
    std::vector<SingleStepRow> rows;
    const SingleStepRow* find(Method m, double t, double dt) const {
        for (const auto& r : rows)
            if (r.method == m && r.t_start == t && r.dt == dt) return &r;
        return nullptr;
    }
};

inline SingleStepResult run_single_step_error(const Config& c, std::uint64_t seed) {
    const Setup su = setup_from(c);
    const auto ts = c.get_doubles("t_starts", {0.1, 0.2, 0.5});
    const auto dts = c.get_doubles("dts", {0.002, 0.005, 0.01, 0.02, 0.05});
    const auto methods = methods_from(c, "methods", {"ddim", "genie", "ttm3"});
    const std::size_t n = static_cast<std::size_t>(c.get_int("n_traj", 1000));
    const int substeps = static_cast<int>(c.get_int("oracle_substeps", 10000));
    const EpsField f = EpsField::analytic(su.gmm, su.sched);

    SingleStepResult res;
    for (std::size_t ti = 0; ti < ts.size(); ++ti) {
        const double t = ts[ti];
        const std::vector<Vec2d> xs = diffused_points(su.gmm, su.sched, t, n, stream_seed(seed, ti));
        for (double dt : dts) {
            const double tn = t - dt;
            if (tn < su.sched.t_cutoff()) throw ConfigError("single-step-error: t - dt below t_cutoff");
            const double g = su.sched.gamma(t), gn = su.sched.gamma(tn);
            std::vector<Vec2d> ref(n);
            for (std::size_t i = 0; i < n; ++i) ref[i] = oracle_ddim(f, xs[i], t, tn, substeps);
            for (Method m : methods) {
                std::vector<double> err(n);
                for (std::size_t i = 0; i < n; ++i) {
                    const FieldEval ev = f.evaluate(xs[i], t, derivative_order(m));
                    const Vec2d xb = taylor_update(to_bar(xs[i], g), gn - g, ev, derivative_order(m));
                    err[i] = norm(from_bar(xb, gn) - ref[i]);
                }
                res.rows.push_back({m, t, dt, summarize(err)});
            }
        }
    }
    return res;
}

inline CsvTable to_csv(const SingleStepResult& r) {
    CsvTable t({"method", "t_start", "dt", "mean_err", "std_err", "q10", "median", "q90"});
    for (const auto& row : r.rows)
        t.row() << to_string(row.method) << row.t_start << row.dt << row.err.mean << row.err.std << row.err.q10
                << row.err.q50 << row.err.q90;
    return t;
}

// ---------------------------------------------------------------------------
// Gap between the exact derivative and the first-order finite difference.

struct FdGapRow {
    double t, dt;
    Stats gap;
};

struct FdGapResult {
    std::vector<FdGapRow> rows;
    const FdGapRow* find(double t, double dt) const {
        for (const auto& r : rows)
            if (r.t == t && r.dt == dt) return &r;
        return nullptr;
    }
};

/// xi_t(dt) = |d eps/d gamma (x, t) - (eps(x, t) - eps(x', t + dt)) / (g_t - g_{t+dt})|,
/// where x' is x transported back along the ODE to t + dt.
inline FdGapResult run_fd_gap(const Config& c, std::uint64_t seed) {
    const Setup su = setup_from(c);
    const auto ts = c.get_doubles("t_starts", {0.1, 0.2, 0.5});
    const auto dts = c.get_doubles("dts", {0.002, 0.005, 0.01, 0.02, 0.05});
    const std::size_t n = static_cast<std::size_t>(c.get_int("n_samples", 1000));
    const int substeps = static_cast<int>(c.get_int("reference_substeps", 64));
    const EpsField f = EpsField::analytic(su.gmm, su.sched);
    FdGapResult res;
    for (std::size_t ti = 0; ti < ts.size(); ++ti) {
        const double t = ts[ti];
        const std::vector<Vec2d> xs = diffused_points(su.gmm, su.sched, t, n, stream_seed(seed, ti));
        for (double dt : dts) {
            if (t + dt > 1.0) throw ConfigError("fd-gap: t + dt above 1");
            std::vector<double> gap(n);
            for (std::size_t i = 0; i < n; ++i) {
                const FieldEval ev = f.evaluate(xs[i], t, 1);
                const Vec2d xp = reference_rk4(f, xs[i], t, t + dt, substeps);
                const Vec2d ep = f.raw_eps(xp, t + dt);
                const Vec2d fd = finite_diff_d_gamma(su.sched.gamma(t + dt), ep, su.sched.gamma(t), ev.eps);
                gap[i] = norm(ev.d1 - fd);
            }
            res.rows.push_back({t, dt, summarize(gap)});
        }
    }
    return res;
}

inline CsvTable to_csv(const FdGapResult& r) {
    CsvTable t({"t", "dt", "mean_gap", "std_gap", "q10", "median", "q90"});
    for (const auto& row : r.rows)
        t.row() << row.t << row.dt << row.gap.mean << row.gap.std << row.gap.q10 << row.gap.q50 << row.gap.q90;
    return t;
}

// ---------------------------------------------------------------------------
// Local truncation error slopes.

struct LteResult {
    std::vector<double> dgammas;
    std::vector<Method> methods;
    std::vector<std::vector<double>> errors; // [method][dgamma]
    std::vector<double> slopes;

    double slope(Method m) const {
        for (std::size_t i = 0; i < methods.size(); ++i)
            if (methods[i] == m) return slopes[i];
        throw ConfigError("LteResult: method not run");
    }
};

/// Mean one-step error in x against an RK4 reference over a log grid of
/// gamma step sizes, comparing increments so tiny steps keep full precision.
inline LteResult run_lte_slopes(const Config& c, std::uint64_t seed) {
    const Setup su = setup_from(c);
    const double t = c.get_double("t", 0.5);
    const double lo = c.get_double("dgamma_min", 1e-3), hi = c.get_double("dgamma_max", 1e-1);
    const int npts = static_cast<int>(c.get_int("n_dgamma", 9));
    const std::size_t n = static_cast<std::size_t>(c.get_int("n_points", 64));
    const int substeps = static_cast<int>(c.get_int("reference_substeps", 64));
    if (npts < 2 || !(lo > 0.0 && hi > lo)) throw ConfigError("lte-slopes: bad dgamma grid");
    LteResult r;
    r.methods = methods_from(c, "methods", {"ddim", "genie", "ttm3"});
    const EpsField f = EpsField::analytic(su.gmm, su.sched);
    const std::vector<Vec2d> xs = diffused_points(su.gmm, su.sched, t, n, stream_seed(seed, 0));
    const double g = su.sched.gamma(t);
    for (int k = 0; k < npts; ++k) r.dgammas.push_back(lo * std::pow(hi / lo, static_cast<double>(k) / (npts - 1)));
    r.errors.assign(r.methods.size(), std::vector<double>(r.dgammas.size(), 0.0));
    for (std::size_t k = 0; k < r.dgammas.size(); ++k) {
        const double gn = g - r.dgammas[k];
        if (!(gn > 0.0)) throw ConfigError("lte-slopes: step leaves gamma > 0");
        const double tn = su.sched.t_of_gamma(gn);
        for (std::size_t i = 0; i < n; ++i) {
            const Vec2d ref = reference_rk4_increment(f, xs[i], t, tn, substeps);
            const FieldEval ev = f.evaluate(xs[i], t, 2);
            for (std::size_t m = 0; m < r.methods.size(); ++m) {
                const Vec2d inc = taylor_update(Vec2d{}, gn - g, ev, derivative_order(r.methods[m]));
                r.errors[m][k] += norm(inc - ref) / bar_scale(gn) / static_cast<double>(n);
            }
        }
    }
    for (std::size_t m = 0; m < r.methods.size(); ++m) r.slopes.push_back(loglog_slope(r.dgammas, r.errors[m]));
    return r;
}

inline CsvTable to_csv(const LteResult& r) {
    CsvTable t({"method", "dgamma", "mean_err", "slope"});
    for (std::size_t m = 0; m < r.methods.size(); ++m)
        for (std::size_t k = 0; k < r.dgammas.size(); ++k)
            t.row() << to_string(r.methods[m]) << r.dgammas[k] << r.errors[m][k] << r.slopes[m];
    return t;
}

// ---------------------------------------------------------------------------
// Learned fields from checkpoints.

struct LearnedModels {
    std::shared_ptr<const Mlp> score;
    std::shared_ptr<const DistillHead> head; // may be null
};

inline std::optional<LearnedModels> learned_from(const Config& c) {
    if (!c.has("score_ckpt")) return std::nullopt;
    LearnedModels m;
    m.score = std::make_shared<const Mlp>(Mlp::load(c.get_string("score_ckpt", "")));
    if (c.has("head_ckpt")) {
        auto h = std::make_shared<DistillHead>();
        h->net = Mlp::load(c.get_string("head_ckpt", ""));
        h->validate();
        m.head = h;
    }
    return m;
}

// ---------------------------------------------------------------------------
// Sample grid.

struct SampleCell {
    std::string field;
    Method method;
    int nfe;
    bool feasible = true;
    std::vector<Vec2d> samples;
    double energy = 0.0;
    double low_density = 0.0;
    std::vector<std::size_t> modes;
};

struct SampleGridResult {
    std::vector<SampleCell> cells;
    const SampleCell* find(const std::string& field, Method m, int nfe) const {
        for (const auto& c : cells)
            if (c.field == field && c.method == m && c.nfe == nfe) return &c;
        return nullptr;
    }
};

/// Sample-quality summary of one batch: energy distance to the data
/// reference and the fraction of samples where p_0 < rel_threshold * peak.
inline void score_cell(SampleCell& cell, const Setup& su, const std::vector<Vec2d>& data, double rel_threshold,
                       std::size_t ref_pairs) {
    if (cell.samples.empty()) return;
    cell.energy = energy_distance(cell.samples, data, ref_pairs);
    cell.low_density = low_density_fraction(cell.samples, su.gmm, 0.0, su.sched, rel_threshold);
    cell.modes = mode_histogram(cell.samples, su.gmm);
}

inline SampleGridResult run_sample_grid(const Config& c, std::uint64_t seed) {
    const Setup su = setup_from(c);
    const auto methods = methods_from(c, "methods", {"ddim", "genie", "ttm3", "ab2", "ab4", "euler_maruyama"});
    const auto nfes = c.get_ints("nfes", {5, 10, 15, 20, 25});
    const std::size_t n = static_cast<std::size_t>(c.get_int("n_samples", 4096));
    const std::size_t n_data = static_cast<std::size_t>(c.get_int("n_data", 100000));
    const std::size_t ref_pairs = static_cast<std::size_t>(c.get_int("energy_ref_pairs", 5000));
    const double thr = c.get_double("density_threshold", 0.01);
    const bool denoise = c.get_bool("denoise", true);
    const bool afs = c.get_bool("afs", false);
    const StridingSpec single = striding_from(c, "striding", su.sched.t_cutoff());
    // multistep methods reject anything but linear striding when run
    const StridingSpec multi = striding_from(c, "striding_multistep", su.sched.t_cutoff(), "linear");

    struct Panel {
        std::string name;
        EpsField field;
        std::vector<Method> methods;
    };
    std::vector<Panel> panels;
    if (c.get_bool("analytic", true))
        panels.push_back({"analytic", EpsField::analytic(su.gmm, su.sched, derivative_from(c)), methods});
    if (auto learned = learned_from(c)) {
        // the head supplies no second derivative, so ttm3 is off by default here
        auto lm = methods_from(c, "learned_methods", {"ddim", "genie", "ab2", "ab4", "euler_maruyama"});
        if (learned->head)
            panels.push_back({"learned_head", distilled_field(learned->score, learned->head, su.sched), lm});
        else
            panels.push_back({"learned_ad", mlp_field(learned->score, su.sched), lm});
    }
    const std::vector<Vec2d> data = su.gmm.sample(n_data, stream_seed(seed, 0xda7a));

    SampleGridResult res;
    for (const auto& p : panels) {
        for (Method m : p.methods) {
            for (int nfe : nfes) {
                SampleCell cell{p.name, m, nfe};
                SolverRun run{m, nfe, is_multistep(m) ? multi : single, afs, denoise, seed};
                cell.feasible = run.feasible();
                if (cell.feasible) {
                    cell.samples = sample_many(run, p.field, n);
                    score_cell(cell, su, data, thr, ref_pairs);
                }
                res.cells.push_back(std::move(cell));
            }
        }
    }
    return res;
}

inline CsvTable samples_csv(const SampleGridResult& r) {
    CsvTable t({"field", "method", "nfe", "index", "x", "y"});
    for (const auto& c : r.cells)
        for (std::size_t i = 0; i < c.samples.size(); ++i)
            t.row() << c.field << to_string(c.method) << c.nfe << i << c.samples[i][0] << c.samples[i][1];
    return t;
}

inline CsvTable summary_csv(const SampleGridResult& r) {
    CsvTable t({"field", "method", "nfe", "n", "energy_distance", "low_density_frac", "modes_hit", "mode_count_min",
                "mode_count_max"});
    for (const auto& c : r.cells) {
        auto& row = t.row() << c.field << to_string(c.method) << c.nfe << c.samples.size();
        if (!c.feasible || c.samples.empty()) {
            row << "NA" << "NA" << "NA" << "NA" << "NA";
            continue;
        }
        std::size_t hit = 0, mn = c.modes.empty() ? 0 : c.modes[0], mx = 0;
        for (std::size_t k : c.modes) {
            hit += k > 0;
            mn = std::min(mn, k);
            mx = std::max(mx, k);
        }
        row << c.energy << c.low_density << hit << mn << mx;
    }
    return t;
}

// ---------------------------------------------------------------------------
// Encode / decode round trips.

struct EncodeDecodeRow {
    Method method;
    int nfe;
    Stats err;
};

struct EncodeDecodeResult {
    std::vector<EncodeDecodeRow> rows;
    const EncodeDecodeRow* find(Method m, int nfe) const {
        for (const auto& r : rows)
            if (r.method == m && r.nfe == nfe) return &r;
        return nullptr;
    }
};

/// x0 -> encode with `nfe` steps -> decode with `nfe` steps plus the denoising call.
inline Vec2d round_trip(const EpsField& f, const Vec2d& x0, Method m, int nfe, const StridingSpec& st,
                        std::uint64_t seed, std::uint64_t index) {
    SolverRun enc{m, nfe, st, false, false, seed};
    const Vec2d z = encode(f, x0, enc, index);
    SolverRun dec{m, nfe + 1, st, false, true, seed};
    return sample_from(dec, f, z).output;
}

inline EncodeDecodeResult run_encode_decode(const Config& c, std::uint64_t seed) {
    const Setup su = setup_from(c);
    const auto methods = methods_from(c, "methods", {"ddim", "genie"});
    const auto nfes = c.get_ints("nfes", {10, 25, 50, 100});
    const std::size_t n = static_cast<std::size_t>(c.get_int("n_points", 256));
    const StridingSpec st = striding_from(c, "striding", su.sched.t_cutoff());
    const EpsField f = EpsField::analytic(su.gmm, su.sched);
    const std::vector<Vec2d> x0 = su.gmm.sample(n, stream_seed(seed, 0xda7a));
    EncodeDecodeResult res;
    for (Method m : methods) {
        for (int nfe : nfes) {
            std::vector<double> err(n);
            for (std::size_t i = 0; i < n; ++i) err[i] = norm(round_trip(f, x0[i], m, nfe, st, seed, i) - x0[i]);
            res.rows.push_back({m, nfe, summarize(err)});
        }
    }
    return res;
}

inline CsvTable to_csv(const EncodeDecodeResult& r) {
    CsvTable t({"method", "nfe", "mean_err", "std_err", "q10", "median", "q90"});
    for (const auto& row : r.rows)
        t.row() << to_string(row.method) << row.nfe << row.err.mean << row.err.std << row.err.q10 << row.err.q50
                << row.err.q90;
    return t;
}

// ---------------------------------------------------------------------------
// Classifier-free guidance sweep on the labelled toy.

struct GuidanceRow {
    Method method;
    int nfe;
    double w;
    double fidelity;     // mean over classes
    int bitwise_cond = -1; // for w = 0: 1 if guided samples equal conditional samples bit for bit
};

struct GuidanceResult {
    std::vector<GuidanceRow> rows;
    const GuidanceRow* find(Method m, int nfe, double w) const {
        for (const auto& r : rows)
            if (r.method == m && r.nfe == nfe && r.w == w) return &r;
        return nullptr;
    }
};

inline GuidanceResult run_guidance_sweep(const Config& c, std::uint64_t seed) {
    const Setup su = setup_from(c);
    const auto methods = methods_from(c, "methods", {"ddim", "genie"});
    const auto nfes = c.get_ints("nfes", {5, 10, 15});
    const auto ws = c.get_doubles("ws", {0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0});
    std::vector<int> classes = c.get_ints("classes", {});
    if (classes.empty())
        for (int k = 0; k < su.gmm.num_classes(); ++k) classes.push_back(k);
    const std::size_t n = static_cast<std::size_t>(c.get_int("n_per_class", 256));
    const bool denoise = c.get_bool("denoise", true);
    const StridingSpec st = striding_from(c, "striding", su.sched.t_cutoff());
    const GuidedField base = GuidedField::analytic(su.gmm, su.sched, 0.0);

    GuidanceResult res;
    for (Method m : methods) {
        for (int nfe : nfes) {
            for (double w : ws) {
                const GuidedField gf = base.with_scale(w);
                double fid = 0.0;
                int bitwise = w == 0.0 ? 1 : -1;
                for (int cls : classes) {
                    SolverRun run{m, nfe, st, false, denoise, stream_seed(seed, static_cast<std::uint64_t>(cls))};
                    const std::vector<Vec2d> xs = sample_many(run, gf.as_field(cls), n);
                    fid += class_fidelity(xs, su.gmm, cls);
                    if (w == 0.0) {
                        const std::vector<Vec2d> ref = sample_many(run, gf.conditional(cls), n);
                        if (!(xs == ref)) bitwise = 0;
                    }
                }
                res.rows.push_back({m, nfe, w, fid / static_cast<double>(classes.size()), bitwise});
            }
        }
    }
    return res;
}

inline CsvTable to_csv(const GuidanceResult& r) {
    CsvTable t({"method", "nfe", "w", "class_fidelity", "w0_bitwise_conditional"});
    for (const auto& row : r.rows) {
        auto& out = t.row() << to_string(row.method) << row.nfe << row.w << row.fidelity;
        if (row.bitwise_cond < 0)
            out << "NA";
        else
            out << row.bitwise_cond;
    }
    return t;
}

// ---------------------------------------------------------------------------
// Training.

inline TrainConfig train_config_from(const Config& c, std::uint64_t seed, const std::string& prefix = "") {
    TrainConfig t;
    auto k = [&](const char* name) { return prefix + name; };
    t.iters = static_cast<int>(c.get_int(k("iters"), t.iters));
    t.batch = static_cast<int>(c.get_int(k("batch"), t.batch));
    t.lr = c.get_double(k("lr"), t.lr);
    t.lr_schedule = parse_lr_schedule(c.get_string(k("lr_schedule"), "linear_decay"));
    t.warmup_iters = static_cast<int>(c.get_int(k("warmup_iters"), t.warmup_iters));
    t.t_cutoff = c.get_double(k("train_t_min"), c.get_double("t_cutoff", t.t_cutoff));
    t.t_max = c.get_double(k("train_t_max"), t.t_max);
    t.clip = c.get_double(k("clip"), t.clip);
    t.log_every = static_cast<int>(c.get_int(k("log_every"), t.log_every));
    t.seed = seed;
    t.validate();
    return t;
}

inline TimeEmbedding embedding_from(const Config& c) {
    TimeEmbedding e;
    const std::string kind = c.get_string("embed", "fourier");
    if (kind == "raw")
        e.kind = TimeEmbedding::Kind::raw;
    else if (kind == "fourier")
        e.kind = TimeEmbedding::Kind::fourier;
    else
        throw ConfigError("unknown embed '" + kind + "'");
    e.n_freq = static_cast<int>(c.get_int("embed_freqs", e.n_freq));
    e.w_min = c.get_double("embed_w_min", e.w_min);
    e.w_max = c.get_double("embed_w_max", e.w_max);
    e.validate();
    return e;
}

/// Mean |s_theta - s| / mean |s| over diffused data points at time t.
inline double relative_score_error(const EpsField& model, const Setup& su, double t, std::size_t n, std::uint64_t seed) {
    const EpsField exact = EpsField::analytic(su.gmm, su.sched);
    double num = 0.0, den = 0.0;
    for (const auto& x : diffused_points(su.gmm, su.sched, t, n, seed)) {
        const Vec2d s = exact.raw_eps(x, t);
        num += norm(model.raw_eps(x, t) - s);
        den += norm(s);
    }
    return num / den; // the sigma_t factor cancels
}

struct TrainScoreResult {
    Mlp net;
    TrainLog log;
    std::vector<std::pair<double, double>> rel_score_err; // (t, error)
};

inline TrainScoreResult run_train_score(const Config& c, std::uint64_t seed) {
    const Setup su = setup_from(c);
    const TrainConfig tc = train_config_from(c, seed);
    Mlp net = Mlp::score_net(c.get_ints("hidden", {64, 64, 64}), parse_activation(c.get_string("activation", "silu")),
                             embedding_from(c), stream_seed(seed, 0x1417));
    TrainScoreResult r;
    r.net = train_dsm(su.gmm, su.sched, tc, std::move(net), &r.log);
    const EpsField f = mlp_field(r.net, su.sched);
    for (double t : c.get_doubles("eval_ts", {0.2, 0.5}))
        r.rel_score_err.emplace_back(t, relative_score_error(f, su, t, 2000, stream_seed(seed, 0xe7a1)));
    return r;
}

inline CsvTable to_csv(const TrainScoreResult& r) {
    CsvTable t({"iter", "loss"});
    for (const auto& [tt, e] : r.rel_score_err) t.meta("rel_score_err_t" + fmt_double(tt), fmt_double(e));
    for (std::size_t i = 0; i < r.log.iter.size(); ++i) t.row() << r.log.iter[i] << r.log.loss[i];
    return t;
}

// ---------------------------------------------------------------------------
// Head training and its evaluation.

struct DistillEndpoints {
    int nfe = 25;
    std::size_t n = 0;
    double err_ddim = 0.0;       // DDIM vs oracle
    double err_genie_ad = 0.0;   // GENIE with AD derivatives vs oracle
    double err_genie_head = 0.0; // GENIE with the distilled head vs oracle
    double oracle_self_gap = 0.0; // mean |oracle(S) - oracle(2S)|
};

/// Endpoint errors (no denoising) of DDIM, GENIE+AD and GENIE+head on the
/// learned field, against a fine reference integration of the same field
/// over the same striding.
inline DistillEndpoints evaluate_distill_endpoints(std::shared_ptr<const Mlp> score,
                                                   std::shared_ptr<const DistillHead> head, const VpSchedule& sched,
                                                   int nfe, std::size_t n, std::uint64_t seed, OracleKind oracle,
                                                   int substeps, StridingSpec st = StridingSpec::quadratic()) {
    const EpsField ad = mlp_field(score, sched);
    const EpsField hd = distilled_field(score, head, sched);
    DistillEndpoints r;
    r.nfe = nfe;
    r.n = n;
    SolverRun run{Method::ddim, nfe, st, false, false, seed};
    const std::vector<double> times = make_striding(st, run.steps()).times;
    const std::vector<Vec2d> x1 = initial_states(seed, n);
    for (std::size_t i = 0; i < n; ++i) {
        const Vec2d ref = oracle_endpoint(ad, x1[i], times, substeps, oracle);
        const Vec2d ref2 = oracle_endpoint(ad, x1[i], times, 2 * substeps, oracle);
        r.oracle_self_gap += norm(ref - ref2);
        run.method = Method::ddim;
        r.err_ddim += norm(sample_from(run, ad, x1[i]).output - ref2);
        run.method = Method::genie;
        r.err_genie_ad += norm(sample_from(run, ad, x1[i]).output - ref2);
        r.err_genie_head += norm(sample_from(run, hd, x1[i]).output - ref2);
    }
    const double dn = static_cast<double>(n);
    r.err_ddim /= dn;
    r.err_genie_ad /= dn;
    r.err_genie_head /= dn;
    r.oracle_self_gap /= dn;
    return r;
}

struct TrainHeadResult {
    DistillHead head;
    TrainLog log;
    DistillResidual residual;
    std::optional<DistillEndpoints> endpoints;
};

inline TrainHeadResult run_train_head(const Config& c, std::uint64_t seed, const Mlp& score) {
    const Setup su = setup_from(c);
    const TrainConfig tc = train_config_from(c, seed, "head_");
    DistillHead head = DistillHead::make(c.get_ints("head_hidden", {64, 64}),
                                         parse_activation(c.get_string("activation", "silu")), embedding_from(c),
                                         stream_seed(seed, 0x4ead));
    TrainHeadResult r;
    r.head = train_distill(score, su.gmm, su.sched, tc, std::move(head), &r.log);
    r.residual = distill_residual(score, r.head, su.gmm, su.sched, static_cast<int>(c.get_int("eval_points", 4096)),
                                  stream_seed(seed, 0xe7a1));
    if (c.get_bool("eval_endpoints", false)) {
        const std::string ok = c.get_string("oracle", "ddim");
        if (ok != "ddim" && ok != "rk4") throw ConfigError("unknown oracle '" + ok + "'");
        const int nfe = static_cast<int>(c.get_int("eval_nfe", 25));
        const StridingSpec st = striding_from(c, "striding", su.sched.t_cutoff());
        const int steps = SolverRun{Method::genie, nfe, st, false, false, seed}.steps();
        // total oracle steps spread evenly over the solver's intervals
        const long long total = c.get_int("oracle_total_steps", 10000);
        const int sub = static_cast<int>((total + steps - 1) / steps);
        r.endpoints = evaluate_distill_endpoints(
            std::make_shared<const Mlp>(score), std::make_shared<const DistillHead>(r.head), su.sched, nfe,
            static_cast<std::size_t>(c.get_int("eval_traj", 1024)), stream_seed(seed, 0xe4d),
            ok == "ddim" ? OracleKind::ddim : OracleKind::rk4, sub, st);
    }
    return r;
}

inline CsvTable to_csv(const TrainHeadResult& r) {
    CsvTable t({"iter", "loss"});
    t.meta("weighted_residual", fmt_double(r.residual.residual));
    t.meta("zero_baseline", fmt_double(r.residual.baseline));
    t.meta("residual_ratio", fmt_double(r.residual.ratio()));
    if (r.endpoints) {
        t.meta("endpoint_nfe", std::to_string(r.endpoints->nfe));
        t.meta("endpoint_err_ddim", fmt_double(r.endpoints->err_ddim));
        t.meta("endpoint_err_genie_ad", fmt_double(r.endpoints->err_genie_ad));
        t.meta("endpoint_err_genie_head", fmt_double(r.endpoints->err_genie_head));
        t.meta("oracle_self_gap", fmt_double(r.endpoints->oracle_self_gap));
    }
    for (std::size_t i = 0; i < r.log.iter.size(); ++i) t.row() << r.log.iter[i] << r.log.loss[i];
    return t;
}

} // namespace ttm
