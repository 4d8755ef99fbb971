#pragma once

// Sample-quality statistics for the 2D toy.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "errors.hpp"
#include "gmm.hpp"
#include "schedule.hpp"
#include "vec.hpp"

namespace ttm {

namespace detail {
inline double mean_pair_distance(const std::vector<Vec2d>& a, std::size_t na, const std::vector<Vec2d>& b,
                                 std::size_t nb, bool same) {
    double s = 0.0;
    for (std::size_t i = 0; i < na; ++i) {
        const Vec2d& p = a[i];
        double row = 0.0;
        for (std::size_t j = same ? i + 1 : 0; j < nb; ++j) {
            const double dx = p[0] - b[j][0], dy = p[1] - b[j][1];
            row += std::sqrt(dx * dx + dy * dy);
        }
        s += row;
    }
    if (same) return na > 1 ? 2.0 * s / (static_cast<double>(na) * static_cast<double>(na - 1)) : 0.0;
    return s / (static_cast<double>(na) * static_cast<double>(nb));
}
} // namespace detail

/// Energy distance 2 E|X-Y| - E|X-X'| - E|Y-Y'| (U-statistics for the
/// within-sample terms). The within-reference term uses at most
/// `max_ref_pairs_n` points of `ref` (its leading entries).
inline double energy_distance(const std::vector<Vec2d>& x, const std::vector<Vec2d>& ref,
                              std::size_t max_ref_pairs_n = 5000) {
    if (x.empty() || ref.empty()) throw ConfigError("energy_distance: empty sample");
    const std::size_t m = std::min(ref.size(), max_ref_pairs_n);
    const double xy = detail::mean_pair_distance(x, x.size(), ref, ref.size(), false);
    const double xx = detail::mean_pair_distance(x, x.size(), x, x.size(), true);
    const double yy = detail::mean_pair_distance(ref, m, ref, m, true);
    return 2.0 * xy - xx - yy;
}

/// Largest value of the diffused density over the component means (a lower
/// bound on the peak that is tight for well-separated narrow modes).
inline double peak_density(const GaussianMixture& gmm, double t, const VpSchedule& sched) {
    double best = 0.0;
    const double a = sched.alpha(t);
    for (const auto& mu : gmm.means()) best = std::max(best, std::exp(gmm.log_density(mu * a, t, sched)));
    return best;
}

/// Fraction of points where p_t is below `rel_threshold` times its peak.
inline double low_density_fraction(const std::vector<Vec2d>& pts, const GaussianMixture& gmm, double t,
                                   const VpSchedule& sched, double rel_threshold = 0.01) {
    if (pts.empty()) return 0.0;
    const double cut = std::log(rel_threshold * peak_density(gmm, t, sched));
    std::size_t low = 0;
    for (const auto& p : pts)
        if (gmm.log_density(p, t, sched) < cut) ++low;
    return static_cast<double>(low) / static_cast<double>(pts.size());
}

/// Per-component counts of nearest-mean assignments.
inline std::vector<std::size_t> mode_histogram(const std::vector<Vec2d>& pts, const GaussianMixture& gmm) {
    std::vector<std::size_t> h(gmm.size(), 0);
    for (const auto& p : pts) ++h[gmm.nearest_component(p)];
    return h;
}

/// Fraction of points whose nearest component carries label `c`.
inline double class_fidelity(const std::vector<Vec2d>& pts, const GaussianMixture& gmm, int c) {
    if (!gmm.has_labels()) throw ConfigError("class_fidelity: mixture has no labels");
    if (c < 0 || c >= gmm.num_classes()) throw ConfigError("class_fidelity: unknown class");
    if (pts.empty()) return 0.0;
    std::size_t hit = 0;
    for (const auto& p : pts)
        if (gmm.labels()[gmm.nearest_component(p)] == c) ++hit;
    return static_cast<double>(hit) / static_cast<double>(pts.size());
}

inline double mean_distance(const std::vector<Vec2d>& a, const std::vector<Vec2d>& b) {
    if (a.size() != b.size() || a.empty()) throw ShapeError("mean_distance: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += norm(a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

} // namespace ttm
