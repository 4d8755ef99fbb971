#pragma once

// Isotropic Gaussian mixtures in the plane and their exact diffused score
// fields under a VP schedule. Under the forward process a component
// N(mu, s0^2 I) becomes N(alpha_t mu, (alpha_t^2 s0^2 + sigma_t^2) I), so the
// diffused density, score, score Jacobian and every eps-derivative the Taylor
// solvers need are available in closed form (time partials via AD).

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "fwdad.hpp"
#include "schedule.hpp"
#include "vec.hpp"

namespace ttm {

struct ToySpec {
    double s1 = 0.9;
    double s2 = 0.2;
    double sigma = 1e-2;
    std::vector<Vec2d> base_mus = default_directions();

    static std::vector<Vec2d> default_directions() {
        const double h = 1.0 / std::numbers::sqrt2;
        return {{{1.0, 0.0}}, {{-1.0, 0.0}}, {{0.0, 1.0}}, {{0.0, -1.0}},
                {{h, h}},     {{h, -h}},     {{-h, h}},    {{-h, -h}}};
    }
};

class GaussianMixture {
public:
    GaussianMixture() = default;

    GaussianMixture(std::vector<double> weights, std::vector<Vec2d> means, std::vector<double> stds,
                    std::vector<int> labels = {})
        : weights_(std::move(weights)), means_(std::move(means)), stds_(std::move(stds)), labels_(std::move(labels)) {
        validate();
        log_weights_.resize(weights_.size());
        for (std::size_t i = 0; i < weights_.size(); ++i) log_weights_[i] = std::log(weights_[i]);
    }

    std::size_t size() const { return weights_.size(); }
    const std::vector<double>& weights() const { return weights_; }
    const std::vector<Vec2d>& means() const { return means_; }
    const std::vector<double>& stds() const { return stds_; }
    const std::vector<int>& labels() const { return labels_; }
    bool has_labels() const { return !labels_.empty(); }

    /// Components carrying `label`, with weights renormalized.
    GaussianMixture sub_mixture(int label) const {
        if (!has_labels()) throw ConfigError("sub_mixture: mixture has no class labels");
        std::vector<double> w;
        std::vector<Vec2d> m;
        std::vector<double> s;
        std::vector<int> l;
        double total = 0.0;
        for (std::size_t i = 0; i < size(); ++i) {
            if (labels_[i] != label) continue;
            w.push_back(weights_[i]);
            m.push_back(means_[i]);
            s.push_back(stds_[i]);
            l.push_back(label);
            total += weights_[i];
        }
        if (w.empty()) throw ConfigError("sub_mixture: unknown class " + std::to_string(label));
        for (double& v : w) v /= total;
        return GaussianMixture(std::move(w), std::move(m), std::move(s), std::move(l));
    }

    int num_classes() const {
        if (!has_labels()) return 0;
        return *std::max_element(labels_.begin(), labels_.end()) + 1;
    }

    /// i.i.d. samples from the undiffused mixture.
    std::vector<Vec2d> sample(std::size_t n, std::uint64_t seed) const {
        std::mt19937_64 rng(seed);
        return sample(n, rng);
    }

    std::vector<Vec2d> sample(std::size_t n, std::mt19937_64& rng) const {
        std::discrete_distribution<std::size_t> pick(weights_.begin(), weights_.end());
        std::normal_distribution<double> normal;
        std::vector<Vec2d> out(n);
        for (auto& p : out) {
            std::size_t k = pick(rng);
            double z0 = normal(rng);
            double z1 = normal(rng);
            p = means_[k] + Vec2d{{z0, z1}} * stds_[k];
        }
        return out;
    }

    /// Index of the component with the largest posterior at (x, t = 0) under
    /// equal-variance assumption; used for mode assignment.
    std::size_t nearest_component(const Vec2d& x) const {
        std::size_t best = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < size(); ++i) {
            Vec2d d = x - means_[i];
            double v = dot(d, d);
            if (v < bd) {
                bd = v;
                best = i;
            }
        }
        return best;
    }

    // -- diffused quantities -------------------------------------------------

    /// log p_t(x) for the diffused mixture.
    template <class S>
    S log_density(const Vec2<S>& x, const S& t, const VpSchedule& sched) const {
        return accumulate<S, false>(x, t, sched).log_norm;
    }

    /// grad_x log p_t(x).
    template <class S>
    Vec2<S> score(const Vec2<S>& x, const S& t, const VpSchedule& sched) const {
        return accumulate<S, false>(x, t, sched).score;
    }

    /// Hessian of log p_t(x): sum_i r_i (-I / v_i + (s_i - s)(s_i - s)^T). Symmetric.
    template <class S>
    Mat2<S> score_jacobian(const Vec2<S>& x, const S& t, const VpSchedule& sched) const {
        Moments<S> m = accumulate<S, true>(x, t, sched);
        Mat2<S> H;
        H(0, 0) = m.neg_inv_var + m.cov[0];
        H(1, 1) = m.neg_inv_var + m.cov[2];
        H(0, 1) = m.cov[1];
        H(1, 0) = H(0, 1);
        return H;
    }

    /// eps(x, t) = -sigma_t * score, defined for t in [t_cutoff, 1].
    template <class S>
    Vec2<S> eps(const Vec2<S>& x, const S& t, const VpSchedule& sched) const {
        check_point(x);
        check_cutoff(t, sched);
        return score(x, t, sched) * (-sched.sigma(t));
    }

    /// Total derivative d eps / d gamma along the flow driven by `drive`, i.e.
    /// d xbar / d gamma = drive with xbar = x / alpha. In xbar each component is
    /// N(mu_i, w_i I) with w_i = s_i^2 + gamma^2, so with c_i = (xbar - mu_i) / w_i
    /// and posteriors r_i,
    ///   eps   = gamma sum_i r_i c_i
    ///   d eps = sum_i r_i [ (D_i - Dbar) gamma c_i + (c_i (s_i^2 - gamma^2) + gamma drive) / w_i ]
    ///   D_i   = gamma (|c_i|^2 - 2 / w_i) - c_i . drive
    /// A single point mass makes both bracket terms vanish identically.
    template <class S>
    Vec2<S> d_gamma_eps(const Vec2<S>& x, const S& t, const VpSchedule& sched, const Vec2<S>& drive) const {
        using std::exp;
        using std::log;
        check_cutoff(t, sched);
        const S g = sched.gamma(t);
        const S g2 = g * g;
        const Vec2<S> xb = x / sched.alpha(t);
        const std::size_t k = size();
        std::vector<S> logit(k), w(k), d(k);
        std::vector<Vec2<S>> c(k);
        double shift = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < k; ++i) {
            w[i] = stds_[i] * stds_[i] + g2;
            const Vec2<S> dl = xb - means_[i] * S(1.0);
            c[i] = dl / w[i];
            logit[i] = log_weights_[i] - 0.5 * dot(dl, c[i]) - log(w[i]);
            shift = std::max(shift, value_of(logit[i]));
            d[i] = g * (dot(c[i], c[i]) - 2.0 / w[i]) - dot(c[i], drive);
        }
        S z(0.0), dbar(0.0);
        std::vector<S> om(k);
        for (std::size_t i = 0; i < k; ++i) {
            om[i] = exp(logit[i] - shift);
            z = z + om[i];
            dbar = dbar + om[i] * d[i];
        }
        dbar = dbar / z;
        Vec2<S> out{};
        for (std::size_t i = 0; i < k; ++i) {
            const S si2 = S(stds_[i] * stds_[i]);
            out += (c[i] * ((d[i] - dbar) * g) + (c[i] * (si2 - g2) + drive * g) / w[i]) * om[i];
        }
        return out / z;
    }

    template <class S>
    Vec2<S> d_gamma_eps(const Vec2<S>& x, const S& t, const VpSchedule& sched) const {
        return d_gamma_eps(x, t, sched, eps(x, t, sched));
    }

    /// d^2 eps / d gamma^2 along the field's own flow: one more dual level over
    /// the first-order assembly, seeded with (dx/dgamma, dt/dgamma).
    Vec2d d2_gamma_eps(const Vec2d& x, double t, const VpSchedule& sched) const {
        check_cutoff(t, sched);
        Vec2d e = eps(x, t, sched);
        Vec2d u = sched.flow_velocity(x, t, e);
        Vec2<Dual1> xs = seed(x, u);
        Dual1 ts(t, sched.dt_dgamma(t));
        Vec2<Dual1> es = eps(xs, ts, sched);
        return tangent(d_gamma_eps(xs, ts, sched, es));
    }

private:
    template <class S>
    struct Moments {
        S log_norm;          // log p_t(x)
        Vec2<S> score;       // sum_i r_i s_i
        S neg_inv_var;       // sum_i r_i (-1 / v_i)
        std::array<S, 3> cov;   // sum_i r_i (s_i - s)(s_i - s)^T as (00, 01, 11)
    };

    // Posterior-weighted sums over components with a streaming max-shifted
    // log-sum-exp, where s_i = -(x - alpha mu_i) / v_i and v_i = alpha^2 s0_i^2 + sigma^2.
    template <class S, bool WithSecond>
    Moments<S> accumulate(const Vec2<S>& x, const S& t, const VpSchedule& sched) const {
        using std::exp;
        using std::log;
        const S a = sched.alpha(t);
        const S a2 = a * a;
        const S s2 = sched.sigma2(t);
        const double log_2pi = std::log(2.0 * std::numbers::pi);

        double shift = -std::numeric_limits<double>::infinity();
        S z(0.0), niv(0.0);
        Vec2<S> sc{};
        S v(0.0), inv_v(0.0), log_norm_c(0.0);
        for (std::size_t i = 0; i < size(); ++i) {
            // Variance terms only change with the component std; toy mixtures share one.
            if (i == 0 || stds_[i] != stds_[i - 1]) {
                v = a2 * (stds_[i] * stds_[i]) + s2;
                if (!(value_of(v) > 0.0))
                    throw DomainError("GaussianMixture: zero diffused variance (delta component at t = 0)");
                inv_v = 1.0 / v;
                log_norm_c = log(v) + log_2pi;
            }
            const Vec2<S> d = x - means_[i] * a;
            // 2D Gaussian log density: -|d|^2 / (2v) - log(2 pi v)
            const S logit = log_weights_[i] - 0.5 * dot(d, d) * inv_v - log_norm_c;
            const double lv = value_of(logit);
            if (lv > shift) {
                // Rescale running sums to the new shift.
                if (std::isfinite(shift)) {
                    const double f = std::exp(shift - lv);
                    z = z * f;
                    niv = niv * f;
                    sc = sc * f;
                }
                shift = lv;
            }
            const S w = exp(logit - shift);
            const Vec2<S> si = d * (-inv_v);
            z = z + w;
            sc += si * w;
            if constexpr (WithSecond) niv = niv - w * inv_v;
        }
        Moments<S> m;
        const S inv_z = 1.0 / z;
        m.log_norm = log(z) + shift;
        m.score = sc * inv_z;
        m.neg_inv_var = niv * inv_z;
        m.cov = {S(0.0), S(0.0), S(0.0)};
        if constexpr (WithSecond) {
            // Centered second pass: s s^T is never subtracted, so a single
            // component gives an exactly zero covariance however large s is.
            for (std::size_t i = 0; i < size(); ++i) {
                const S vi = a2 * (stds_[i] * stds_[i]) + s2;
                const Vec2<S> d = x - means_[i] * a;
                const S r = exp(log_weights_[i] - 0.5 * dot(d, d) / vi - (log(vi) + log_2pi) - m.log_norm);
                const Vec2<S> c = d * (-1.0 / vi) - m.score;
                m.cov[0] = m.cov[0] + r * c[0] * c[0];
                m.cov[1] = m.cov[1] + r * c[0] * c[1];
                m.cov[2] = m.cov[2] + r * c[1] * c[1];
            }
        }
        return m;
    }

    template <class S>
    static void check_point(const Vec2<S>& x) {
        for (int i = 0; i < 2; ++i)
            if (!std::isfinite(value_of(x[i]))) throw DomainError("GaussianMixture: non-finite point");
    }

    template <class S>
    static void check_cutoff(const S& t, const VpSchedule& sched) {
        // Small slack so striding endpoints that round just below the cutoff pass.
        if (value_of(t) < sched.t_cutoff() * (1.0 - 1e-12) || value_of(t) > 1.0)
            throw DomainError("GaussianMixture: eps requested outside [t_cutoff, 1]");
    }

    void validate() const {
        if (weights_.empty()) throw ConfigError("GaussianMixture: no components");
        if (means_.size() != weights_.size() || stds_.size() != weights_.size())
            throw ConfigError("GaussianMixture: weights/means/stds length mismatch");
        if (!labels_.empty() && labels_.size() != weights_.size())
            throw ConfigError("GaussianMixture: labels length mismatch");
        double total = 0.0;
        for (double w : weights_) {
            if (!(w > 0.0)) throw ConfigError("GaussianMixture: weights must be positive");
            total += w;
        }
        if (std::abs(total - 1.0) > 1e-12) throw ConfigError("GaussianMixture: weights must sum to 1");
        for (double s : stds_)
            if (!(s >= 0.0) || !std::isfinite(s)) throw ConfigError("GaussianMixture: stds must be finite and >= 0");
        for (const auto& m : means_)
            if (!all_finite(m)) throw ConfigError("GaussianMixture: non-finite mean");
        for (int l : labels_)
            if (l < 0) throw ConfigError("GaussianMixture: labels must be >= 0");
    }

    std::vector<double> weights_;
    std::vector<Vec2d> means_;
    std::vector<double> stds_;
    std::vector<int> labels_;
    std::vector<double> log_weights_;
};

/// The 64-component toy: components at s1 mu_i + s1 s2 mu_j, label i.
inline GaussianMixture build_toy(const ToySpec& spec = {}) {
    if (!(spec.s1 > 0.0) || !(spec.s2 > 0.0) || !(spec.sigma > 0.0) || spec.base_mus.empty())
        throw ConfigError("build_toy: spec fields must be positive");
    const std::size_t k = spec.base_mus.size();
    std::vector<double> w(k * k, 1.0 / static_cast<double>(k * k));
    std::vector<Vec2d> means;
    std::vector<int> labels;
    means.reserve(k * k);
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            means.push_back(spec.base_mus[i] * spec.s1 + spec.base_mus[j] * (spec.s1 * spec.s2));
            labels.push_back(static_cast<int>(i));
        }
    }
    // Uniform weights may not sum to exactly 1 in floating point for every k.
    double total = 0.0;
    for (double v : w) total += v;
    for (double& v : w) v /= total;
    return GaussianMixture(std::move(w), std::move(means), std::vector<double>(k * k, spec.sigma), std::move(labels));
}

/// Single point mass (s0 = 0) at `mu`.
inline GaussianMixture point_mass(Vec2d mu = {}) {
    return GaussianMixture({1.0}, {mu}, {0.0});
}

/// One isotropic Gaussian N(mu, s0^2 I).
inline GaussianMixture single_gaussian(Vec2d mu, double s0) {
    return GaussianMixture({1.0}, {mu}, {s0});
}

// ---------------------------------------------------------------------------
// Plain-text mixture specs. Recognized keys (one per line, `key = values`):
//   toy     = true                 -> build_toy with optional s1/s2/sigma keys
//   weights = w1 w2 ...
//   means   = x1 y1 x2 y2 ...
//   stds    = s1 s2 ...            (a single value is broadcast)
//   labels  = l1 l2 ...            (optional)
// '#' starts a comment. Weights are renormalized if they sum to 1 within 1e-6.

namespace detail {
inline std::vector<double> parse_numbers(const std::string& text, const std::string& key) {
    std::vector<double> out;
    std::string cleaned = text;
    std::replace(cleaned.begin(), cleaned.end(), ',', ' ');
    std::replace(cleaned.begin(), cleaned.end(), ';', ' ');
    std::istringstream in(cleaned);
    std::string tok;
    while (in >> tok) {
        try {
            std::size_t used = 0;
            double v = std::stod(tok, &used);
            if (used != tok.size()) throw std::invalid_argument(tok);
            out.push_back(v);
        } catch (const std::exception&) {
            throw ConfigError("mixture spec: bad number '" + tok + "' for key '" + key + "'");
        }
    }
    return out;
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}
} // namespace detail

inline GaussianMixture parse_mixture(std::istream& in) {
    std::vector<double> weights, means, stds, labels;
    bool toy = false;
    ToySpec toy_spec;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("mixture spec line " + std::to_string(lineno) + ": expected key = value");
        std::string key = detail::trim(line.substr(0, eq));
        std::string val = detail::trim(line.substr(eq + 1));
        if (key == "toy") {
            toy = (val == "true" || val == "1");
        } else if (key == "s1" || key == "s2" || key == "sigma") {
            auto v = detail::parse_numbers(val, key);
            if (v.size() != 1) throw ConfigError("mixture spec: '" + key + "' takes one value");
            (key == "s1" ? toy_spec.s1 : key == "s2" ? toy_spec.s2 : toy_spec.sigma) = v[0];
        } else if (key == "weights") {
            weights = detail::parse_numbers(val, key);
        } else if (key == "means") {
            means = detail::parse_numbers(val, key);
        } else if (key == "stds") {
            stds = detail::parse_numbers(val, key);
        } else if (key == "labels") {
            labels = detail::parse_numbers(val, key);
        } else {
            throw ConfigError("mixture spec: unknown key '" + key + "'");
        }
    }
    if (toy) return build_toy(toy_spec);
    if (means.size() % 2 != 0) throw ConfigError("mixture spec: means must hold x y pairs");
    const std::size_t k = means.size() / 2;
    if (weights.size() != k) throw ConfigError("mixture spec: weights/means length mismatch");
    if (stds.size() == 1) stds.assign(k, stds[0]);
    double total = 0.0;
    for (double w : weights) total += w;
    if (std::abs(total - 1.0) > 1e-6) throw ConfigError("mixture spec: weights must sum to 1");
    for (double& w : weights) w /= total;
    std::vector<Vec2d> mus(k);
    for (std::size_t i = 0; i < k; ++i) mus[i] = {{means[2 * i], means[2 * i + 1]}};
    std::vector<int> lab;
    for (double l : labels) {
        if (l != std::floor(l)) throw ConfigError("mixture spec: labels must be integers");
        lab.push_back(static_cast<int>(l));
    }
    return GaussianMixture(std::move(weights), std::move(mus), std::move(stds), std::move(lab));
}

inline GaussianMixture load_mixture(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open mixture spec '" + path + "'");
    return parse_mixture(in);
}

} // namespace ttm
