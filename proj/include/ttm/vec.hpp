#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <ostream>
#include <type_traits>
#include <utility>

namespace ttm {

/// Small fixed-size vector over an arbitrary scalar (double or a dual type).
template <class S, std::size_t N>
struct Vec {
    std::array<S, N> c{};

    static constexpr std::size_t size() { return N; }

    constexpr S& operator[](std::size_t i) { return c[i]; }
    constexpr const S& operator[](std::size_t i) const { return c[i]; }

    constexpr Vec& operator+=(const Vec& o) {
        for (std::size_t i = 0; i < N; ++i) c[i] = c[i] + o.c[i];
        return *this;
    }
    constexpr Vec& operator-=(const Vec& o) {
        for (std::size_t i = 0; i < N; ++i) c[i] = c[i] - o.c[i];
        return *this;
    }
};

template <class S>
using Vec2 = Vec<S, 2>;
using Vec2d = Vec2<double>;

template <class S, std::size_t N>
constexpr Vec<S, N> operator+(Vec<S, N> a, const Vec<S, N>& b) {
    return a += b;
}

template <class S, std::size_t N>
constexpr Vec<S, N> operator-(Vec<S, N> a, const Vec<S, N>& b) {
    return a -= b;
}

template <class S, std::size_t N>
constexpr Vec<S, N> operator-(const Vec<S, N>& a) {
    Vec<S, N> r;
    for (std::size_t i = 0; i < N; ++i) r[i] = -a[i];
    return r;
}

template <class T>
struct is_vec : std::false_type {};
template <class S, std::size_t N>
struct is_vec<Vec<S, N>> : std::true_type {};

// Scaling by a scalar of another type promotes, e.g. Vec<double> * Dual -> Vec<Dual>.
template <class S, class K, std::size_t N>
    requires(!is_vec<K>::value)
constexpr auto operator*(const K& k, const Vec<S, N>& a) {
    Vec<decltype(std::declval<S>() * std::declval<K>()), N> r;
    for (std::size_t i = 0; i < N; ++i) r[i] = a[i] * k;
    return r;
}

template <class S, class K, std::size_t N>
    requires(!is_vec<K>::value)
constexpr auto operator*(const Vec<S, N>& a, const K& k) {
    return k * a;
}

template <class S, class K, std::size_t N>
    requires(!is_vec<K>::value)
constexpr auto operator/(const Vec<S, N>& a, const K& k) {
    Vec<decltype(std::declval<S>() / std::declval<K>()), N> r;
    for (std::size_t i = 0; i < N; ++i) r[i] = a[i] / k;
    return r;
}

template <class S, std::size_t N>
constexpr bool operator==(const Vec<S, N>& a, const Vec<S, N>& b) {
    return a.c == b.c;
}

template <class S, std::size_t N>
constexpr S dot(const Vec<S, N>& a, const Vec<S, N>& b) {
    S r = a[0] * b[0];
    for (std::size_t i = 1; i < N; ++i) r = r + a[i] * b[i];
    return r;
}

template <std::size_t N>
inline double norm(const Vec<double, N>& a) {
    return std::sqrt(dot(a, a));
}

template <std::size_t N>
inline bool all_finite(const Vec<double, N>& a) {
    for (double v : a.c)
        if (!std::isfinite(v)) return false;
    return true;
}

template <std::size_t N>
std::ostream& operator<<(std::ostream& os, const Vec<double, N>& a) {
    os << '(';
    for (std::size_t i = 0; i < N; ++i) os << (i ? ", " : "") << a[i];
    return os << ')';
}

/// Row-major N x N matrix.
template <class S, std::size_t N>
struct Mat {
    std::array<S, N * N> m{};

    constexpr S& operator()(std::size_t r, std::size_t c) { return m[r * N + c]; }
    constexpr const S& operator()(std::size_t r, std::size_t c) const { return m[r * N + c]; }

    constexpr Vec<S, N> operator*(const Vec<S, N>& v) const {
        Vec<S, N> out;
        for (std::size_t r = 0; r < N; ++r) {
            S acc = (*this)(r, 0) * v[0];
            for (std::size_t c = 1; c < N; ++c) acc = acc + (*this)(r, c) * v[c];
            out[r] = acc;
        }
        return out;
    }

    constexpr Mat transposed() const {
        Mat t;
        for (std::size_t r = 0; r < N; ++r)
            for (std::size_t c = 0; c < N; ++c) t(c, r) = (*this)(r, c);
        return t;
    }
};

template <class S>
using Mat2 = Mat<S, 2>;
using Mat2d = Mat2<double>;

} // namespace ttm
