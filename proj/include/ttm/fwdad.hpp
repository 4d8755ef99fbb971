#pragma once

// Forward-mode automatic differentiation with nestable dual numbers.
//
// A Dual<T> carries a value and a tangent; arithmetic propagates the tangent
// by the chain rule, so evaluating f on seeded duals yields a directional
// derivative alongside the value. Dual<Dual<double>> gives second directional
// derivatives. Generic code should be written against an arbitrary scalar S
// and call math functions unqualified (after `using std::exp;` etc.) so that
// ADL picks the dual overloads.

#include <cmath>
#include <cstddef>
#include <span>
#include <type_traits>
#include <vector>

#include "errors.hpp"
#include "vec.hpp"

namespace ttm {

template <class T>
struct Dual {
    T value{};
    T tangent{};

    constexpr Dual() = default;
    constexpr Dual(const T& v) : value(v), tangent(T(0.0)) {} // NOLINT: constants promote implicitly
    constexpr Dual(const T& v, const T& d) : value(v), tangent(d) {}

    // Allows double -> Dual<Dual<double>> in one implicit step.
    template <class U>
        requires(std::is_arithmetic_v<U> && !std::is_same_v<T, U>)
    constexpr Dual(U v) : value(T(v)), tangent(T(0.0)) {} // NOLINT

    constexpr Dual& operator+=(const Dual& o) { return *this = *this + o; }
    constexpr Dual& operator-=(const Dual& o) { return *this = *this - o; }
    constexpr Dual& operator*=(const Dual& o) { return *this = *this * o; }
    constexpr Dual& operator/=(const Dual& o) { return *this = *this / o; }

    friend constexpr Dual operator+(const Dual& a, const Dual& b) { return {a.value + b.value, a.tangent + b.tangent}; }
    friend constexpr Dual operator-(const Dual& a, const Dual& b) { return {a.value - b.value, a.tangent - b.tangent}; }
    friend constexpr Dual operator-(const Dual& a) { return {-a.value, -a.tangent}; }
    friend constexpr Dual operator*(const Dual& a, const Dual& b) {
        return {a.value * b.value, a.value * b.tangent + a.tangent * b.value};
    }
    friend constexpr Dual operator/(const Dual& a, const Dual& b) {
        T inv = T(1.0) / b.value;
        T q = a.value * inv;
        return {q, (a.tangent - q * b.tangent) * inv};
    }

    // Mixed arithmetic with plain numbers; keeps literals like 0.5 * d cheap.
    friend constexpr Dual operator+(const Dual& a, double b) { return {a.value + b, a.tangent}; }
    friend constexpr Dual operator+(double a, const Dual& b) { return {a + b.value, b.tangent}; }
    friend constexpr Dual operator-(const Dual& a, double b) { return {a.value - b, a.tangent}; }
    friend constexpr Dual operator-(double a, const Dual& b) { return {a - b.value, -b.tangent}; }
    friend constexpr Dual operator*(const Dual& a, double b) { return {a.value * b, a.tangent * b}; }
    friend constexpr Dual operator*(double a, const Dual& b) { return {a * b.value, a * b.tangent}; }
    friend constexpr Dual operator/(const Dual& a, double b) { return {a.value / b, a.tangent / b}; }
    friend constexpr Dual operator/(double a, const Dual& b) { return Dual(T(a)) / b; }
};

using Dual1 = Dual<double>;
using Dual2 = Dual<Dual<double>>;

template <class T>
struct is_dual : std::false_type {};
template <class T>
struct is_dual<Dual<T>> : std::true_type {};

/// Underlying double of any nesting depth; used for branch decisions
/// (max-shift, comparisons) that must not depend on tangents.
constexpr double value_of(double x) { return x; }
template <class T>
constexpr double value_of(const Dual<T>& x) {
    return value_of(x.value);
}

template <class T>
constexpr bool operator<(const Dual<T>& a, const Dual<T>& b) {
    return value_of(a) < value_of(b);
}

// Elementary functions. Each returns f(value) with tangent f'(value) * tangent.
template <class T>
Dual<T> exp(const Dual<T>& a) {
    using std::exp;
    T e = exp(a.value);
    return {e, e * a.tangent};
}
template <class T>
Dual<T> expm1(const Dual<T>& a) {
    using std::exp;
    using std::expm1;
    return {expm1(a.value), exp(a.value) * a.tangent};
}
template <class T>
Dual<T> log(const Dual<T>& a) {
    using std::log;
    return {log(a.value), a.tangent / a.value};
}
template <class T>
Dual<T> log1p(const Dual<T>& a) {
    using std::log1p;
    return {log1p(a.value), a.tangent / (1.0 + a.value)};
}
template <class T>
Dual<T> sqrt(const Dual<T>& a) {
    using std::sqrt;
    T r = sqrt(a.value);
    return {r, a.tangent / (2.0 * r)};
}
template <class T>
Dual<T> tanh(const Dual<T>& a) {
    using std::tanh;
    T th = tanh(a.value);
    return {th, (1.0 - th * th) * a.tangent};
}
template <class T>
Dual<T> sin(const Dual<T>& a) {
    using std::cos;
    using std::sin;
    return {sin(a.value), cos(a.value) * a.tangent};
}
template <class T>
Dual<T> cos(const Dual<T>& a) {
    using std::cos;
    using std::sin;
    return {cos(a.value), -sin(a.value) * a.tangent};
}
template <class T>
Dual<T> pow(const Dual<T>& a, double p) {
    using std::pow;
    return {pow(a.value, p), p * pow(a.value, p - 1.0) * a.tangent};
}

/// Logistic function, written so it is stable for large |x| at any scalar type.
template <class S>
S sigmoid(const S& x) {
    using std::exp;
    if (value_of(x) >= 0.0) return 1.0 / (1.0 + exp(-x));
    S e = exp(x);
    return e / (1.0 + e);
}

/// SiLU / swish activation x * sigmoid(x); C-infinity, so nested duals are valid.
template <class S>
S silu(const S& x) {
    return x * sigmoid(x);
}

// ---------------------------------------------------------------------------
// DualVec: a vector of duals split into primal values and tangents.

template <class T, std::size_t N>
Vec<Dual<T>, N> seed(const Vec<T, N>& values, const Vec<T, N>& tangents) {
    Vec<Dual<T>, N> out;
    for (std::size_t i = 0; i < N; ++i) out[i] = Dual<T>(values[i], tangents[i]);
    return out;
}

template <class T, std::size_t N>
Vec<T, N> primal(const Vec<Dual<T>, N>& v) {
    Vec<T, N> out;
    for (std::size_t i = 0; i < N; ++i) out[i] = v[i].value;
    return out;
}

template <class T, std::size_t N>
Vec<T, N> tangent(const Vec<Dual<T>, N>& v) {
    Vec<T, N> out;
    for (std::size_t i = 0; i < N; ++i) out[i] = v[i].tangent;
    return out;
}

/// Dynamic-size dual vector for maps whose dimension is only known at runtime.
struct DualVec {
    std::vector<double> values;
    std::vector<double> tangents;

    DualVec(std::span<const double> v, std::span<const double> d) : values(v.begin(), v.end()), tangents(d.begin(), d.end()) {
        if (values.size() != tangents.size()) throw ShapeError("DualVec: value/tangent size mismatch");
    }

    std::size_t size() const { return values.size(); }

    std::vector<Dual1> duals() const {
        std::vector<Dual1> out(values.size());
        for (std::size_t i = 0; i < values.size(); ++i) out[i] = {values[i], tangents[i]};
        return out;
    }
};

// ---------------------------------------------------------------------------
// Directional derivatives of fields f(x, t) -> R^N. `f` must be generic over
// the scalar type: f(Vec<S, N>, S) -> Vec<S, N>.

/// Combined directional derivative (df/dx) dx + (df/dt) dt at scalar level T.
template <class F, class T, std::size_t N>
Vec<T, N> directional(const F& f, const Vec<T, N>& x, const T& t, const Vec<T, N>& dx, const T& dt) {
    return tangent(f(seed(x, dx), Dual<T>(t, dt)));
}

/// (df/dx)(x, t) v.
template <class F, std::size_t N>
Vec<double, N> jvp(const F& f, const Vec<double, N>& x, double t, const Vec<double, N>& v) {
    for (double c : v.c)
        if (!std::isfinite(c)) throw DomainError("jvp: non-finite direction");
    return directional(f, x, t, v, 0.0);
}

/// Runtime-dimension JVP; f maps std::vector<Dual1> x Dual1 -> std::vector<Dual1>.
template <class F>
std::vector<double> jvp(const F& f, std::span<const double> x, double t, std::span<const double> v) {
    DualVec in(x, v);
    std::vector<Dual1> y = f(in.duals(), Dual1(t, 0.0));
    std::vector<double> out(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) out[i] = y[i].tangent;
    return out;
}

/// df/dt at fixed x.
template <class F, std::size_t N>
Vec<double, N> time_derivative(const F& f, const Vec<double, N>& x, double t) {
    return directional(f, x, t, Vec<double, N>{}, 1.0);
}

/// v^T (d^2 f / dx^2) v, one component per output, via Dual<Dual<double>>.
template <class F, std::size_t N>
Vec<double, N> second_directional(const F& f, const Vec<double, N>& x, double t, const Vec<double, N>& v) {
    Vec<Dual1, N> xo = seed(x, v);
    Vec<Dual1, N> vo;
    for (std::size_t i = 0; i < N; ++i) vo[i] = Dual1(v[i], 0.0);
    Vec<Dual1, N> inner = directional(f, xo, Dual1(t, 0.0), vo, Dual1(0.0, 0.0));
    return tangent(inner);
}

/// Jacobian (df/dx) assembled column by column from JVPs.
template <class F, std::size_t N>
Mat<double, N> jacobian(const F& f, const Vec<double, N>& x, double t) {
    Mat<double, N> J;
    for (std::size_t c = 0; c < N; ++c) {
        Vec<double, N> e{};
        e[c] = 1.0;
        Vec<double, N> col = jvp(f, x, t, e);
        for (std::size_t r = 0; r < N; ++r) J(r, c) = col[r];
    }
    return J;
}

} // namespace ttm
