#pragma once

// eps-prediction fields as seen by the solvers. An EpsField bundles a value
// map eps(x, t) with an optional provider for the total derivative along the
// DDIM flow,
//   d eps / d gamma = J_x eps (dx/dgamma) + (d eps / dt) dt/dgamma,
//   dx/dgamma       = eps / sqrt(1+g^2) - g x / (1+g^2),
// and optionally the second total derivative. Providers: closed form
// (analytic mixtures), forward-mode AD through any generic callable, a
// distilled head, or a guided combination of other fields.
//
// Derivative providers take a separate "drive" eps that sets the direction
// of dx/dgamma. For an ordinary field the drive is its own eps; a guided
// field passes the guided eps so that each sub-field is differentiated along
// the flow that is actually being integrated.

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "fwdad.hpp"
#include "gmm.hpp"
#include "schedule.hpp"
#include "vec.hpp"

namespace ttm {

enum class DerivativeKind { none, exact, autodiff, distilled, combined };

inline const char* to_string(DerivativeKind k) {
    switch (k) {
    case DerivativeKind::none: return "none";
    case DerivativeKind::exact: return "exact";
    case DerivativeKind::autodiff: return "autodiff";
    case DerivativeKind::distilled: return "distilled";
    case DerivativeKind::combined: return "combined";
    }
    return "?";
}

/// Result of one fused field call.
struct FieldEval {
    Vec2d eps{};
    Vec2d d1{}; // d eps / d gamma
    Vec2d d2{}; // d^2 eps / d gamma^2
};

using CallCounter = std::shared_ptr<std::atomic<std::int64_t>>;

inline CallCounter make_counter() { return std::make_shared<std::atomic<std::int64_t>>(0); }

class EpsField {
public:
    using Value = std::function<Vec2d(const Vec2d&, double)>;
    using Value1 = std::function<Vec2<Dual1>(const Vec2<Dual1>&, const Dual1&)>;
    using Value2 = std::function<Vec2<Dual2>(const Vec2<Dual2>&, const Dual2&)>;
    /// (x, t, own eps at (x, t), drive eps) -> d eps / d gamma
    using Deriv = std::function<Vec2d(const Vec2d&, double, const Vec2d&, const Vec2d&)>;
    /// (x, t, own eps) -> d^2 eps / d gamma^2 along the field's own flow
    using Deriv2 = std::function<Vec2d(const Vec2d&, double, const Vec2d&)>;

    EpsField() = default;
    EpsField(VpSchedule sched, Value value, std::string name = "field")
        : sched_(sched), value_(std::move(value)), name_(std::move(name)) {}

    /// Field from a callable generic over the scalar: f(Vec2<S>, S) -> Vec2<S>
    /// for S in {double, Dual1, Dual2}. First and second derivatives come from AD.
    template <class F>
    static EpsField from_generic(F f, VpSchedule sched, std::string name = "generic") {
        auto fp = std::make_shared<const F>(std::move(f));
        EpsField out(sched, [fp](const Vec2d& x, double t) { return (*fp)(x, t); }, std::move(name));
        out.value1_ = [fp](const Vec2<Dual1>& x, const Dual1& t) { return (*fp)(x, t); };
        out.value2_ = [fp](const Vec2<Dual2>& x, const Dual2& t) { return (*fp)(x, t); };
        return out.with_autodiff();
    }

    /// Exact diffused eps field of a mixture. `provider` selects closed-form
    /// (exact) or AD derivatives; both are available on the returned field.
    static EpsField analytic(const GaussianMixture& gmm, VpSchedule sched,
                             DerivativeKind provider = DerivativeKind::exact) {
        auto g = std::make_shared<const GaussianMixture>(gmm);
        EpsField out(sched, [g, sched](const Vec2d& x, double t) { return g->eps(x, t, sched); }, "analytic");
        out.value1_ = [g, sched](const Vec2<Dual1>& x, const Dual1& t) { return g->eps(x, t, sched); };
        out.value2_ = [g, sched](const Vec2<Dual2>& x, const Dual2& t) { return g->eps(x, t, sched); };
        if (provider == DerivativeKind::autodiff) return out.with_autodiff();
        if (provider == DerivativeKind::none) return out;
        if (provider != DerivativeKind::exact)
            throw ConfigError(std::string("EpsField::analytic: unsupported provider ") + to_string(provider));
        out.kind_ = DerivativeKind::exact;
        out.deriv_ = [g, sched](const Vec2d& x, double t, const Vec2d&, const Vec2d& drive) {
            return g->d_gamma_eps(x, t, sched, drive);
        };
        out.deriv2_ = [g, sched](const Vec2d& x, double t, const Vec2d&) { return g->d2_gamma_eps(x, t, sched); };
        return out;
    }

    // -- provider swaps -------------------------------------------------------

    EpsField with_derivative(DerivativeKind kind, Deriv d, Deriv2 d2 = {}) const {
        EpsField out = *this;
        out.kind_ = d ? kind : DerivativeKind::none;
        out.deriv_ = std::move(d);
        out.deriv2_ = std::move(d2);
        return out;
    }

    /// Derivatives by forward-mode AD through the dual-valued evaluators.
    EpsField with_autodiff() const {
        if (!value1_) throw CapabilityError("EpsField '" + name_ + "': no dual evaluator for autodiff");
        EpsField out = *this;
        out.kind_ = DerivativeKind::autodiff;
        Value1 f1 = value1_;
        Value2 f2 = value2_;
        VpSchedule s = sched_;
        out.deriv_ = [f1, s](const Vec2d& x, double t, const Vec2d&, const Vec2d& drive) {
            return ad_d_gamma(f1, s, x, t, drive);
        };
        if (f2)
            out.deriv2_ = [f1, f2, s](const Vec2d& x, double t, const Vec2d& e) {
                return ad_d2_gamma(f1, f2, s, x, t, e).second;
            };
        else
            out.deriv2_ = nullptr;
        return out;
    }

    EpsField without_derivative() const {
        EpsField out = *this;
        out.kind_ = DerivativeKind::none;
        out.deriv_ = nullptr;
        out.deriv2_ = nullptr;
        return out;
    }

    /// Same field; every public evaluation increments `c` by one.
    EpsField with_counter(CallCounter c) const {
        EpsField out = *this;
        out.counter_ = std::move(c);
        return out;
    }

    EpsField renamed(std::string name) const {
        EpsField out = *this;
        out.name_ = std::move(name);
        return out;
    }

    // -- queries --------------------------------------------------------------

    const VpSchedule& schedule() const { return sched_; }
    const std::string& name() const { return name_; }
    DerivativeKind kind() const { return kind_; }
    bool valid() const { return static_cast<bool>(value_); }
    bool has_derivative() const { return static_cast<bool>(deriv_); }
    bool has_second_derivative() const { return static_cast<bool>(deriv2_); }
    bool has_duals() const { return value1_ && value2_; }
    const CallCounter& counter() const { return counter_; }

    /// One field evaluation (counts as one call).
    Vec2d eps(const Vec2d& x, double t) const {
        tick();
        return raw_eps(x, t);
    }

    /// score = -eps / sigma_t.
    Vec2d score(const Vec2d& x, double t) const { return eps(x, t) / (-sched_.sigma(t)); }

    /// d eps / d gamma along the field's own flow (one fused call).
    Vec2d d_gamma(const Vec2d& x, double t) const { return evaluate(x, t, 1).d1; }

    /// d eps / d gamma with a supplied eps value and drive (no call counted).
    Vec2d d_gamma(const Vec2d& x, double t, const Vec2d& own_eps, const Vec2d& drive) const {
        require(1);
        return deriv_(x, t, own_eps, drive);
    }

    Vec2d d2_gamma(const Vec2d& x, double t) const { return evaluate(x, t, 2).d2; }

    /// eps and its first `order` total derivatives in one call.
    FieldEval evaluate(const Vec2d& x, double t, int order) const {
        require(order);
        tick();
        FieldEval r;
        r.eps = raw_eps(x, t);
        if (order >= 1) r.d1 = deriv_(x, t, r.eps, r.eps);
        if (order >= 2) r.d2 = deriv2_(x, t, r.eps);
        return r;
    }

    // Uncounted access for composing fields.
    Vec2d raw_eps(const Vec2d& x, double t) const {
        if (!value_) throw StateError("EpsField: empty field");
        return value_(x, t);
    }
    const Value1& value1() const { return value1_; }
    const Value2& value2() const { return value2_; }

    EpsField with_duals(Value1 f1, Value2 f2) const {
        EpsField out = *this;
        out.value1_ = std::move(f1);
        out.value2_ = std::move(f2);
        return out;
    }

    // -- AD helpers -----------------------------------------------------------

    /// J (dx/dgamma) + (d eps/dt) dt/dgamma by one Dual1 pass.
    static Vec2d ad_d_gamma(const Value1& f1, const VpSchedule& s, const Vec2d& x, double t, const Vec2d& drive) {
        Vec2d u = s.flow_velocity(x, t, drive);
        return tangent(f1(seed(x, u), Dual1(t, s.dt_dgamma(t))));
    }

    /// First and second total derivatives along the own flow by nesting: the
    /// inner level moves (x, t) along the flow, the outer level differentiates
    /// eps in the flow direction evaluated at that moving point.
    static std::pair<Vec2d, Vec2d> ad_d2_gamma(const Value1& f1, const Value2& f2, const VpSchedule& s,
                                               const Vec2d& x, double t, const Vec2d& e) {
        const Vec2<Dual1> x1 = seed(x, s.flow_velocity(x, t, e));
        const Dual1 t1(t, s.dt_dgamma(t));
        const Vec2<Dual1> e1 = f1(x1, t1);
        const Vec2<Dual1> u1 = s.flow_velocity(x1, t1, e1);
        const Dual1 tau1 = s.dt_dgamma(t1);
        const Vec2<Dual1> g = tangent(f2(seed(x1, u1), Dual2(t1, tau1)));
        return {primal(g), tangent(g)};
    }

private:
    void tick() const {
        if (counter_) counter_->fetch_add(1, std::memory_order_relaxed);
    }

    void require(int order) const {
        if (order >= 1 && !deriv_)
            throw CapabilityError("EpsField '" + name_ + "': no d_gamma eps provider");
        if (order >= 2 && !deriv2_)
            throw CapabilityError("EpsField '" + name_ + "': no second-derivative provider");
    }

    VpSchedule sched_{};
    Value value_;
    Value1 value1_;
    Value2 value2_;
    Deriv deriv_;
    Deriv2 deriv2_;
    DerivativeKind kind_ = DerivativeKind::none;
    std::string name_ = "field";
    CallCounter counter_;
};

/// First-order forward difference (eps_n - eps_{n-1}) / (g_n - g_{n-1}).
inline Vec2d finite_diff_d_gamma(double g_prev, const Vec2d& eps_prev, double g_cur, const Vec2d& eps_cur) {
    const double dg = g_cur - g_prev;
    if (dg == 0.0) throw DomainError("finite_diff_d_gamma: identical gamma values (division by zero)");
    return (eps_cur - eps_prev) / dg;
}

// ---------------------------------------------------------------------------

/// Classifier-free guidance: (1+w) eps_c - w eps_uncond, and the same linear
/// combination of total derivatives.
class GuidedField {
public:
    GuidedField(std::vector<EpsField> cond, EpsField uncond, double w)
        : cond_(std::move(cond)), uncond_(std::move(uncond)), w_(w) {
        if (!(w_ >= 0.0) || !std::isfinite(w_)) throw ConfigError("GuidedField: guidance scale must be finite and >= 0");
        if (cond_.empty()) throw ConfigError("GuidedField: no conditional fields");
    }

    /// Analytic toy guidance: class c is the sub-mixture with label c, the
    /// unconditional field is the full mixture.
    static GuidedField analytic(const GaussianMixture& gmm, VpSchedule sched, double w,
                                DerivativeKind provider = DerivativeKind::exact) {
        if (!gmm.has_labels()) throw ConfigError("GuidedField::analytic: mixture has no class labels");
        std::vector<EpsField> cond;
        for (int c = 0; c < gmm.num_classes(); ++c)
            cond.push_back(EpsField::analytic(gmm.sub_mixture(c), sched, provider).renamed("class" + std::to_string(c)));
        return GuidedField(std::move(cond), EpsField::analytic(gmm, sched, provider).renamed("uncond"), w);
    }

    GuidedField with_scale(double w) const { return GuidedField(cond_, uncond_, w); }

    double w() const { return w_; }
    int num_classes() const { return static_cast<int>(cond_.size()); }
    const EpsField& conditional(int c) const { return cond_.at(check_class(c)); }
    const EpsField& unconditional() const { return uncond_; }

    Vec2d guided_eps(const Vec2d& x, double t, int c) const {
        const EpsField& fc = cond_[check_class(c)];
        return combine(fc.raw_eps(x, t), uncond_.raw_eps(x, t));
    }

    /// Guided d eps / d gamma along the guided flow.
    Vec2d guided_d_gamma(const Vec2d& x, double t, int c) const {
        const EpsField& fc = cond_[check_class(c)];
        if (!fc.has_derivative() || !uncond_.has_derivative())
            throw CapabilityError("GuidedField: a sub-field has no derivative provider");
        const Vec2d ec = fc.raw_eps(x, t);
        const Vec2d eu = uncond_.raw_eps(x, t);
        const Vec2d drive = combine(ec, eu);
        return combine(fc.d_gamma(x, t, ec, drive), uncond_.d_gamma(x, t, eu, drive));
    }

    /// The guided field for class c as an ordinary EpsField.
    EpsField as_field(int c) const {
        const EpsField fc = cond_[check_class(c)];
        const EpsField fu = uncond_;
        const double w = w_;
        EpsField out(
            fc.schedule(), [fc, fu, w](const Vec2d& x, double t) { return mix(w, fc.raw_eps(x, t), fu.raw_eps(x, t)); },
            "guided(" + fc.name() + ")");
        if (fc.has_duals() && fu.has_duals()) {
            out = out.with_duals(
                [fc, fu, w](const Vec2<Dual1>& x, const Dual1& t) { return mix(w, fc.value1()(x, t), fu.value1()(x, t)); },
                [fc, fu, w](const Vec2<Dual2>& x, const Dual2& t) { return mix(w, fc.value2()(x, t), fu.value2()(x, t)); });
        }
        if (fc.has_derivative() && fu.has_derivative()) {
            EpsField::Deriv2 d2;
            if (out.has_duals()) {
                auto f1 = out.value1();
                auto f2 = out.value2();
                VpSchedule s = out.schedule();
                d2 = [f1, f2, s](const Vec2d& x, double t, const Vec2d& e) {
                    return EpsField::ad_d2_gamma(f1, f2, s, x, t, e).second;
                };
            }
            out = out.with_derivative(
                DerivativeKind::combined,
                [fc, fu, w](const Vec2d& x, double t, const Vec2d&, const Vec2d& drive) {
                    return mix(w, fc.d_gamma(x, t, fc.raw_eps(x, t), drive), fu.d_gamma(x, t, fu.raw_eps(x, t), drive));
                },
                std::move(d2));
        }
        return out;
    }

private:
    template <class S>
    static Vec2<S> mix(double w, const Vec2<S>& c, const Vec2<S>& u) {
        return c * (1.0 + w) - u * w;
    }
    Vec2d combine(const Vec2d& c, const Vec2d& u) const { return mix(w_, c, u); }

    std::size_t check_class(int c) const {
        if (c < 0 || c >= num_classes()) throw ConfigError("GuidedField: unknown class " + std::to_string(c));
        return static_cast<std::size_t>(c);
    }

    std::vector<EpsField> cond_;
    EpsField uncond_;
    double w_ = 0.0;
};

} // namespace ttm
