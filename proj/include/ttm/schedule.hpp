#pragma once

// Variance-preserving noise schedule with linear beta(t) = beta0 + beta1 t,
// the gamma-time reparameterization gamma_t = sqrt((1 - alpha_t^2) / alpha_t^2)
// and the striding schedules that pick solver evaluation times.
//
// All time functions are templates over the scalar so the same code runs on
// doubles and on (nested) dual numbers.

#include <cmath>
#include <string>
#include <vector>

#include "errors.hpp"
#include "fwdad.hpp"

namespace ttm {

class VpSchedule {
public:
    constexpr VpSchedule() = default;
    VpSchedule(double beta0, double beta1, double t_cutoff = 1e-3) : beta0_(beta0), beta1_(beta1), t_cutoff_(t_cutoff) {
        if (!(beta0 >= 0.0) || !(beta1 >= 0.0) || beta0 + beta1 <= 0.0)
            throw ConfigError("VpSchedule: beta coefficients must be nonnegative and not both zero");
        if (!(t_cutoff > 0.0 && t_cutoff < 1.0)) throw ConfigError("VpSchedule: t_cutoff must lie in (0, 1)");
    }

    double beta0() const { return beta0_; }
    double beta1() const { return beta1_; }
    double t_cutoff() const { return t_cutoff_; }

    template <class S>
    S beta(const S& t) const {
        check_time(t, "beta");
        return beta0_ + beta1_ * t;
    }

    /// Integral of beta over [0, t]; alpha_t^2 = exp(-log_snr_integral(t)).
    template <class S>
    S beta_integral(const S& t) const {
        return beta0_ * t + 0.5 * beta1_ * t * t;
    }

    template <class S>
    S alpha(const S& t) const {
        using std::exp;
        check_time(t, "alpha");
        return exp(-0.5 * beta_integral(t));
    }

    template <class S>
    S alpha2(const S& t) const {
        using std::exp;
        check_time(t, "alpha2");
        return exp(-beta_integral(t));
    }

    template <class S>
    S sigma2(const S& t) const {
        using std::expm1;
        check_time(t, "sigma2");
        return -expm1(-beta_integral(t));
    }

    template <class S>
    S sigma(const S& t) const {
        using std::sqrt;
        return sqrt(sigma2(t));
    }

    /// gamma_t; exactly 0 at t = 0 (by continuity).
    template <class S>
    S gamma(const S& t) const {
        using std::expm1;
        using std::sqrt;
        if (value_of(t) < 0.0) throw DomainError("gamma: t must be >= 0");
        if (value_of(t) > 1.0) throw DomainError("gamma: t must be <= 1");
        if (value_of(t) == 0.0) return S(0.0);
        return sqrt(expm1(beta_integral(t)));
    }

    /// Inverse of gamma: solves b0 t + b1 t^2 / 2 = log(1 + g^2) for t >= 0.
    double t_of_gamma(double g) const {
        if (!(g >= 0.0)) throw DomainError("t_of_gamma: g must be >= 0");
        const double L = std::log1p(g * g);
        if (beta1_ == 0.0) return L / beta0_;
        // Rationalized root (-b0 + sqrt(b0^2 + 2 b1 L)) / b1 avoids cancellation at small L.
        return 2.0 * L / (beta0_ + std::sqrt(beta0_ * beta0_ + 2.0 * beta1_ * L));
    }

    /// dt/dgamma in closed form, expressed through gamma_t:
    ///   2 gamma / ((gamma^2 + 1) sqrt(b0^2 + 2 b1 log(gamma^2 + 1))).
    template <class S>
    S dt_dgamma(const S& t) const {
        using std::log1p;
        using std::sqrt;
        if (!(value_of(t) > 0.0)) throw DomainError("dt_dgamma: t must be > 0");
        S g = gamma(t);
        S g2 = g * g;
        return 2.0 * g / ((g2 + 1.0) * sqrt(beta0_ * beta0_ + 2.0 * beta1_ * log1p(g2)));
    }

    /// dx/dgamma of the probability-flow state: eps / sqrt(1 + g^2) - g x / (1 + g^2).
    template <class S>
    Vec2<S> flow_velocity(const Vec2<S>& x, const S& t, const Vec2<S>& eps) const {
        using std::sqrt;
        S g = gamma(t);
        S g2p1 = 1.0 + g * g;
        return eps / sqrt(g2p1) - x * (g / g2p1);
    }

private:
    template <class S>
    static void check_time(const S& t, const char* what) {
        double v = value_of(t);
        if (!(v >= 0.0 && v <= 1.0)) throw DomainError(std::string(what) + ": t outside [0, 1]");
    }

    double beta0_ = 0.1;
    double beta1_ = 19.9;
    double t_cutoff_ = 1e-3;
};

// ---------------------------------------------------------------------------

enum class StridingKind { linear, power };

struct StridingSpec {
    StridingKind kind = StridingKind::power;
    double rho = 2.0;
    double t_cutoff = 1e-3;

    static StridingSpec linear(double t_cutoff = 1e-3) { return {StridingKind::linear, 1.0, t_cutoff}; }
    static StridingSpec quadratic(double t_cutoff = 1e-3) { return {StridingKind::power, 2.0, t_cutoff}; }
};

struct StridingSchedule {
    StridingSpec spec;
    int n_steps = 0;
    std::vector<double> times; // t_0 = 1 > t_1 > ... > t_N = t_cutoff
};

/// Evaluation times for N solver steps.
///   linear:     t_n = 1 - (1 - t_c) n / N
///   power(rho): t_n = (1 - (1 - t_c^{1/rho}) n / N)^rho
/// Endpoints are assigned exactly.
inline StridingSchedule make_striding(const StridingSpec& spec, int n_steps) {
    if (n_steps < 1) throw ConfigError("make_striding: need at least one step");
    if (!(spec.t_cutoff > 0.0 && spec.t_cutoff < 1.0)) throw ConfigError("make_striding: t_cutoff must lie in (0, 1)");
    if (spec.kind == StridingKind::power && !(spec.rho > 1.0))
        throw ConfigError("make_striding: power striding requires rho > 1");

    StridingSchedule s{spec, n_steps, std::vector<double>(static_cast<std::size_t>(n_steps) + 1)};
    const double N = n_steps;
    for (int n = 0; n <= n_steps; ++n) {
        double t;
        if (spec.kind == StridingKind::linear) {
            t = 1.0 - (1.0 - spec.t_cutoff) * (n / N);
        } else {
            const double root = std::pow(spec.t_cutoff, 1.0 / spec.rho);
            t = std::pow(1.0 - (1.0 - root) * (n / N), spec.rho);
        }
        s.times[static_cast<std::size_t>(n)] = t;
    }
    s.times.front() = 1.0;
    s.times.back() = spec.t_cutoff;
    return s;
}

inline StridingSchedule make_striding(StridingKind kind, int n_steps, double t_cutoff, double rho = 2.0) {
    return make_striding(StridingSpec{kind, rho, t_cutoff}, n_steps);
}

} // namespace ttm
