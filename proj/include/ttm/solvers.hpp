#pragma once

// Samplers for the DDIM ODE d xbar / d gamma = eps(x, t), xbar = sqrt(1+g^2) x,
// and the reverse SDE. Deterministic solvers integrate in (gamma, xbar) and
// convert to x only for field calls; h = gamma_next - gamma_n is negative
// while sampling.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "fields.hpp"
#include "schedule.hpp"
#include "vec.hpp"

namespace ttm {

enum class Method { ddim, genie, ttm3, ab2, ab4, euler_maruyama };

inline const char* to_string(Method m) {
    switch (m) {
    case Method::ddim: return "ddim";
    case Method::genie: return "genie";
    case Method::ttm3: return "ttm3";
    case Method::ab2: return "ab2";
    case Method::ab4: return "ab4";
    case Method::euler_maruyama: return "euler_maruyama";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    if (s == "ddim") return Method::ddim;
    if (s == "genie") return Method::genie;
    if (s == "ttm3") return Method::ttm3;
    if (s == "ab2") return Method::ab2;
    if (s == "ab4") return Method::ab4;
    if (s == "euler_maruyama" || s == "em") return Method::euler_maruyama;
    throw ConfigError("unknown solver method '" + s + "'");
}

inline bool is_deterministic(Method m) { return m != Method::euler_maruyama; }
inline bool is_multistep(Method m) { return m == Method::ab2 || m == Method::ab4; }

/// Derivative order a method needs from the field per step.
inline int derivative_order(Method m) {
    switch (m) {
    case Method::genie: return 1;
    case Method::ttm3: return 2;
    default: return 0;
    }
}

// ---------------------------------------------------------------------------
// Seeds: one independent stream per trajectory, derived from the master seed.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t stream_seed(std::uint64_t master, std::uint64_t index) {
    return splitmix64(splitmix64(master) ^ splitmix64(index * 0xd1b54a32d192ed03ull + 1));
}

inline Vec2d standard_normal2(std::mt19937_64& rng) {
    std::normal_distribution<double> n;
    double a = n(rng);
    double b = n(rng);
    return {{a, b}};
}

// ---------------------------------------------------------------------------
// Coordinates.

inline double bar_scale(double g) { return std::sqrt(1.0 + g * g); }

inline Vec2d to_bar(const Vec2d& x, double g) { return x * bar_scale(g); }
inline Vec2d from_bar(const Vec2d& xbar, double g) { return xbar / bar_scale(g); }

// ---------------------------------------------------------------------------
// Single steps. Each evaluates the field once at (x(t_n), t_n).

/// Taylor update of order p from a precomputed field evaluation.
inline Vec2d taylor_update(const Vec2d& xbar, double h, const FieldEval& ev, int order) {
    Vec2d out = xbar + ev.eps * h;
    if (order >= 1) out += ev.d1 * (0.5 * h * h);
    if (order >= 2) out += ev.d2 * (h * h * h / 6.0);
    return out;
}

/// DDIM: xbar + h eps.
inline Vec2d step_ddim(const EpsField& f, const Vec2d& xbar, double t_n, double t_next) {
    const VpSchedule& s = f.schedule();
    const double g = s.gamma(t_n);
    const double h = s.gamma(t_next) - g;
    return xbar + f.eps(from_bar(xbar, g), t_n) * h;
}

/// GENIE: xbar + h eps + h^2/2 d eps/d gamma.
inline Vec2d step_genie(const EpsField& f, const Vec2d& xbar, double t_n, double t_next) {
    const VpSchedule& s = f.schedule();
    const double g = s.gamma(t_n);
    const double h = s.gamma(t_next) - g;
    return taylor_update(xbar, h, f.evaluate(from_bar(xbar, g), t_n, 1), 1);
}

/// Third-order Taylor: GENIE plus h^3/6 d^2 eps/d gamma^2.
inline Vec2d step_ttm3(const EpsField& f, const Vec2d& xbar, double t_n, double t_next) {
    const VpSchedule& s = f.schedule();
    const double g = s.gamma(t_n);
    const double h = s.gamma(t_next) - g;
    return taylor_update(xbar, h, f.evaluate(from_bar(xbar, g), t_n, 2), 2);
}

/// Past evaluations (gamma, eps), oldest first; back() is the current one.
using EpsHistory = std::vector<std::pair<double, Vec2d>>;

/// Two-step Adams-Bashforth: xbar + h (3/2 eps_n - 1/2 eps_{n-1}).
inline Vec2d step_ab2(const EpsHistory& hist, const Vec2d& xbar, double g_n, double g_next) {
    if (hist.size() < 2) throw StateError("step_ab2: need the current and one previous evaluation");
    const double h = g_next - g_n;
    const auto& e = hist;
    const std::size_t n = e.size() - 1;
    return xbar + (e[n].second * 1.5 - e[n - 1].second * 0.5) * h;
}

/// Three-step Adams-Bashforth (used while AB4 history fills).
inline Vec2d step_ab3(const EpsHistory& hist, const Vec2d& xbar, double g_n, double g_next) {
    if (hist.size() < 3) throw StateError("step_ab3: need three evaluations");
    const double h = g_next - g_n;
    const std::size_t n = hist.size() - 1;
    return xbar + (hist[n].second * 23.0 - hist[n - 1].second * 16.0 + hist[n - 2].second * 5.0) * (h / 12.0);
}

/// Four-step Adams-Bashforth: coefficients (55, -59, 37, -9) / 24.
inline Vec2d step_ab4(const EpsHistory& hist, const Vec2d& xbar, double g_n, double g_next) {
    if (hist.size() < 4) throw StateError("step_ab4: need four evaluations");
    const double h = g_next - g_n;
    const std::size_t n = hist.size() - 1;
    return xbar + (hist[n].second * 55.0 - hist[n - 1].second * 59.0 + hist[n - 2].second * 37.0 -
                   hist[n - 3].second * 9.0) *
                      (h / 24.0);
}

/// Classic RK4 in gamma on d xbar/d gamma = eps. `k1` is eps at the start
/// (already evaluated); three further calls are made.
inline Vec2d rk4_step(const EpsField& f, const Vec2d& xbar, double g0, double g1, const Vec2d& k1, bool counted = true) {
    const VpSchedule& s = f.schedule();
    const double h = g1 - g0;
    const double gm = g0 + 0.5 * h;
    const double tm = s.t_of_gamma(gm);
    const double t1 = s.t_of_gamma(g1);
    auto call = [&](const Vec2d& xb, double g, double t) {
        const Vec2d x = from_bar(xb, g);
        return counted ? f.eps(x, t) : f.raw_eps(x, t);
    };
    const Vec2d k2 = call(xbar + k1 * (0.5 * h), gm, tm);
    const Vec2d k3 = call(xbar + k2 * (0.5 * h), gm, tm);
    const Vec2d k4 = call(xbar + k3 * h, g1, t1);
    return xbar + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
}

/// Reverse-SDE Euler-Maruyama in x-space with dt = t_next - t_n (< 0):
///   x - 1/2 beta (x + 2 s) dt + sqrt(beta |dt|) noise,  s = -eps / sigma.
inline Vec2d em_update(const VpSchedule& s, const Vec2d& x, double t_n, double t_next, const Vec2d& eps,
                       const Vec2d& noise) {
    const double beta = s.beta(t_n);
    const double dt = t_next - t_n;
    const Vec2d score = eps / (-s.sigma(t_n));
    return x - (x + score * 2.0) * (0.5 * beta * dt) + noise * std::sqrt(beta * std::abs(dt));
}

inline Vec2d step_euler_maruyama(const EpsField& f, const Vec2d& x, double t_n, double t_next, const Vec2d& noise) {
    return em_update(f.schedule(), x, t_n, t_next, f.eps(x, t_n), noise);
}

// ---------------------------------------------------------------------------
// Full runs.

struct SolverRun {
    Method method = Method::ddim;
    int nfe = 25;
    StridingSpec striding = StridingSpec::quadratic();
    bool afs = false;
    bool denoise = true;
    std::uint64_t seed = 0;

    /// Number of solver steps the budget buys, or a BudgetError if none.
    int steps() const {
        if (nfe < 1) throw BudgetError("SolverRun: NFE budget must be >= 1");
        int n = nfe - (denoise ? 1 : 0) + (afs ? 1 : 0);
        if (method == Method::ab4) {
            // One RK4 warm-up step costs three calls beyond its first.
            if (nfe < 5) throw BudgetError("SolverRun: ab4 needs at least 5 NFE (N/A)");
            n -= 3;
        }
        if (n < 1) throw BudgetError("SolverRun: NFE budget leaves no solver steps (N/A)");
        return n;
    }

    bool feasible() const {
        try {
            steps();
            return true;
        } catch (const BudgetError&) {
            return false;
        }
    }

    void validate() const {
        if (is_multistep(method) && striding.kind != StridingKind::linear)
            throw ConfigError(std::string("SolverRun: ") + to_string(method) + " requires linear striding");
        steps();
    }
};

/// Visited states, stored in bar coordinates; x is derived.
struct Trajectory {
    std::vector<double> times;
    std::vector<double> gammas;
    std::vector<Vec2d> states_bar;
    Vec2d output{};  // denoised estimate if the run denoises, else the final x
    int nfe_used = 0;
    bool denoised = false;

    std::size_t size() const { return times.size(); }
    Vec2d x(std::size_t n) const { return from_bar(states_bar.at(n), gammas.at(n)); }
    Vec2d final_x() const { return x(size() - 1); }

    std::vector<Vec2d> states_x() const {
        std::vector<Vec2d> out(size());
        for (std::size_t n = 0; n < size(); ++n) out[n] = x(n);
        return out;
    }

    void push(double t, double g, const Vec2d& xbar) {
        times.push_back(t);
        gammas.push_back(g);
        states_bar.push_back(xbar);
    }
};

namespace detail {

inline void check_capability(const EpsField& f, Method m) {
    const int order = derivative_order(m);
    if (order >= 1 && !f.has_derivative())
        throw CapabilityError(std::string(to_string(m)) + ": field '" + f.name() + "' has no d_gamma eps provider");
    if (order >= 2 && !f.has_second_derivative())
        throw CapabilityError(std::string(to_string(m)) + ": field '" + f.name() + "' has no second-derivative provider");
}

/// Integrates over `times` (any direction) with a deterministic method.
/// `afs` replaces the first evaluation by eps = x, d eps = 0.
inline void integrate(const EpsField& f, Method m, const std::vector<double>& times, Trajectory& tr, bool afs) {
    const VpSchedule& s = f.schedule();
    EpsHistory hist;
    const std::size_t N = times.size() - 1;
    for (std::size_t n = 0; n < N; ++n) {
        const double t = times[n], tn = times[n + 1];
        const double g = tr.gammas.back(), gn = s.gamma(tn);
        const Vec2d xbar = tr.states_bar.back();
        const Vec2d x = from_bar(xbar, g);
        const double h = gn - g;
        const bool analytic_first = afs && n == 0;
        Vec2d next;
        if (m == Method::ddim || m == Method::genie || m == Method::ttm3) {
            FieldEval ev;
            if (analytic_first) {
                ev.eps = x;
            } else {
                ev = f.evaluate(x, t, derivative_order(m));
                ++tr.nfe_used;
            }
            next = taylor_update(xbar, h, ev, derivative_order(m));
        } else {
            Vec2d e;
            if (analytic_first) {
                e = x;
            } else {
                e = f.eps(x, t);
                ++tr.nfe_used;
            }
            hist.emplace_back(g, e);
            if (hist.size() > 4) hist.erase(hist.begin());
            if (m == Method::ab2) {
                next = hist.size() < 2 ? xbar + e * h : step_ab2(hist, xbar, g, gn);
            } else if (n == 0) {
                next = rk4_step(f, xbar, g, gn, e);
                tr.nfe_used += 3;
            } else if (hist.size() == 2) {
                next = step_ab2(hist, xbar, g, gn);
            } else if (hist.size() == 3) {
                next = step_ab3(hist, xbar, g, gn);
            } else {
                next = step_ab4(hist, xbar, g, gn);
            }
        }
        tr.push(tn, gn, next);
    }
}

} // namespace detail

/// Runs `run` from the given initial x at t = 1. EM noise is drawn from `rng`.
inline Trajectory sample_from(const SolverRun& run, const EpsField& f, const Vec2d& x_init, std::mt19937_64& rng) {
    run.validate();
    detail::check_capability(f, run.method);
    const VpSchedule& s = f.schedule();
    StridingSpec spec = run.striding;
    const StridingSchedule sch = make_striding(spec, run.steps());
    Trajectory tr;
    const double g0 = s.gamma(sch.times.front());
    tr.push(sch.times.front(), g0, to_bar(x_init, g0));

    if (run.method == Method::euler_maruyama) {
        Vec2d x = x_init;
        for (std::size_t n = 0; n + 1 < sch.times.size(); ++n) {
            const double t = sch.times[n], tn = sch.times[n + 1];
            Vec2d e;
            if (run.afs && n == 0) {
                e = x;
            } else {
                e = f.eps(x, t);
                ++tr.nfe_used;
            }
            x = em_update(s, x, t, tn, e, standard_normal2(rng));
            const double gn = s.gamma(tn);
            tr.push(tn, gn, to_bar(x, gn));
        }
    } else {
        detail::integrate(f, run.method, sch.times, tr, run.afs);
    }

    const Vec2d xN = tr.final_x();
    if (run.denoise) {
        const double tN = tr.times.back();
        const Vec2d e = f.eps(xN, tN);
        ++tr.nfe_used;
        tr.output = (xN - e * s.sigma(tN)) / s.alpha(tN);
        tr.denoised = true;
    } else {
        tr.output = xN;
    }
    return tr;
}

inline Trajectory sample_from(const SolverRun& run, const EpsField& f, const Vec2d& x_init) {
    std::mt19937_64 rng(stream_seed(run.seed, 0x5eed));
    return sample_from(run, f, x_init, rng);
}

/// One trajectory from x ~ N(0, I), stream `index` of the run's seed.
inline Trajectory sample(const SolverRun& run, const EpsField& f, std::uint64_t index = 0) {
    std::mt19937_64 rng(stream_seed(run.seed, index));
    const Vec2d x = standard_normal2(rng);
    return sample_from(run, f, x, rng);
}

/// Outputs of n independent trajectories (streams 0..n-1).
inline std::vector<Vec2d> sample_many(const SolverRun& run, const EpsField& f, std::size_t n) {
    run.validate();
    std::vector<Vec2d> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = sample(run, f, i).output;
    return out;
}

/// Initial states x_1 ~ N(0, I) for streams 0..n-1, as used by sample().
inline std::vector<Vec2d> initial_states(std::uint64_t seed, std::size_t n) {
    std::vector<Vec2d> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::mt19937_64 rng(stream_seed(seed, i));
        out[i] = standard_normal2(rng);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Encoding and interpolation.

/// Diffuses x0 to t_cutoff with fresh noise, then integrates the ODE forward
/// to t = 1 over the reversed striding with `nfe` evaluations (nfe = 0 returns
/// the diffused point).
inline Vec2d encode(const EpsField& f, const Vec2d& x0, const SolverRun& run, std::uint64_t index = 0) {
    if (!is_deterministic(run.method)) throw CapabilityError("encode: stochastic solvers cannot encode");
    if (is_multistep(run.method) && run.striding.kind != StridingKind::linear)
        throw ConfigError(std::string("encode: ") + to_string(run.method) + " requires linear striding");
    detail::check_capability(f, run.method);
    const VpSchedule& s = f.schedule();
    const double tc = run.striding.t_cutoff;
    std::mt19937_64 rng(stream_seed(run.seed ^ 0xe4c0de, index));
    const Vec2d xc = x0 * s.alpha(tc) + standard_normal2(rng) * s.sigma(tc);
    if (run.nfe == 0) return xc;
    int n = run.nfe;
    if (run.method == Method::ab4) {
        if (n < 4) throw BudgetError("encode: ab4 needs at least 4 NFE (N/A)");
        n -= 3;
    }
    StridingSchedule sch = make_striding(run.striding, n);
    std::vector<double> times(sch.times.rbegin(), sch.times.rend());
    Trajectory tr;
    const double g0 = s.gamma(times.front());
    tr.push(times.front(), g0, to_bar(xc, g0));
    detail::integrate(f, run.method, times, tr, false);
    return tr.final_x();
}

/// z0 sqrt(1 - b) + z1 sqrt(b).
inline Vec2d slerp(const Vec2d& z0, const Vec2d& z1, double b) {
    if (!(b >= 0.0 && b <= 1.0)) throw DomainError("slerp: weight must lie in [0, 1]");
    return z0 * std::sqrt(1.0 - b) + z1 * std::sqrt(b);
}

// ---------------------------------------------------------------------------
// Reference integrators (uncounted field calls).

/// DDIM with `substeps` uniform-gamma substeps from t_from to t_to.
inline Vec2d oracle_ddim(const EpsField& f, const Vec2d& x, double t_from, double t_to, int substeps) {
    if (substeps < 1) throw ConfigError("oracle_ddim: substeps must be >= 1");
    const VpSchedule& s = f.schedule();
    const double ga = s.gamma(t_from), gb = s.gamma(t_to);
    const double h = (gb - ga) / substeps;
    Vec2d xbar = to_bar(x, ga);
    double g = ga, t = t_from;
    for (int k = 0; k < substeps; ++k) {
        xbar += f.raw_eps(from_bar(xbar, g), t) * h;
        g = (k + 1 == substeps) ? gb : ga + (k + 1) * h;
        t = (k + 1 == substeps) ? t_to : s.t_of_gamma(g);
    }
    return from_bar(xbar, gb);
}

/// RK4 with `substeps` uniform-gamma substeps from t_from to t_to.
inline Vec2d reference_rk4(const EpsField& f, const Vec2d& x, double t_from, double t_to, int substeps) {
    if (substeps < 1) throw ConfigError("reference_rk4: substeps must be >= 1");
    const VpSchedule& s = f.schedule();
    const double ga = s.gamma(t_from), gb = s.gamma(t_to);
    const double h = (gb - ga) / substeps;
    Vec2d xbar = to_bar(x, ga);
    double g = ga, t = t_from;
    for (int k = 0; k < substeps; ++k) {
        const double g1 = (k + 1 == substeps) ? gb : ga + (k + 1) * h;
        const Vec2d k1 = f.raw_eps(from_bar(xbar, g), t);
        xbar = rk4_step(f, xbar, g, g1, k1, false);
        g = g1;
        t = (k + 1 == substeps) ? t_to : s.t_of_gamma(g);
    }
    return from_bar(xbar, gb);
}

/// xbar increment of RK4 over [t_from, t_to] with uniform-gamma substeps. The
/// increment is accumulated on its own so that tiny steps keep full relative
/// precision (used for local-error measurements).
inline Vec2d reference_rk4_increment(const EpsField& f, const Vec2d& x, double t_from, double t_to, int substeps) {
    if (substeps < 1) throw ConfigError("reference_rk4_increment: substeps must be >= 1");
    const VpSchedule& s = f.schedule();
    const double ga = s.gamma(t_from), gb = s.gamma(t_to);
    const double h = (gb - ga) / substeps;
    const Vec2d base = to_bar(x, ga);
    Vec2d delta{};
    auto eval = [&](const Vec2d& d, double g, double t) { return f.raw_eps(from_bar(base + d, g), t); };
    double g = ga, t = t_from;
    for (int k = 0; k < substeps; ++k) {
        const double g1 = (k + 1 == substeps) ? gb : ga + (k + 1) * h;
        const double hk = g1 - g;
        const double gm = g + 0.5 * hk;
        const double tm = s.t_of_gamma(gm);
        const double t1 = (k + 1 == substeps) ? t_to : s.t_of_gamma(g1);
        const Vec2d k1 = eval(delta, g, t);
        const Vec2d k2 = eval(delta + k1 * (0.5 * hk), gm, tm);
        const Vec2d k3 = eval(delta + k2 * (0.5 * hk), gm, tm);
        const Vec2d k4 = eval(delta + k3 * hk, g1, t1);
        delta += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (hk / 6.0);
        g = g1;
        t = t1;
    }
    return delta;
}

enum class OracleKind { ddim, rk4 };

/// Reference endpoint of a whole run: integrates between consecutive
/// striding times with `substeps` each, no denoising.
inline Vec2d oracle_endpoint(const EpsField& f, const Vec2d& x_init, const std::vector<double>& times, int substeps,
                             OracleKind kind = OracleKind::ddim) {
    Vec2d x = x_init;
    for (std::size_t n = 0; n + 1 < times.size(); ++n)
        x = kind == OracleKind::ddim ? oracle_ddim(f, x, times[n], times[n + 1], substeps)
                                     : reference_rk4(f, x, times[n], times[n + 1], substeps);
    return x;
}

} // namespace ttm
