// Encodes two data points to latents, slerps between them and decodes each
// blend with GENIE.

#include <cstdio>

#include "ttm/ttm.hpp"

int main() {
    using namespace ttm;
    const VpSchedule sched;
    const GaussianMixture gmm = build_toy();
    const EpsField field = EpsField::analytic(gmm, sched);
    const Vec2d a = gmm.means()[0], b = gmm.means()[63];

    SolverRun enc{Method::genie, 50, StridingSpec::quadratic(), false, false, 3};
    const Vec2d za = encode(field, a, enc, 0), zb = encode(field, b, enc, 1);
    SolverRun dec{Method::genie, 51, StridingSpec::quadratic(), false, true, 3};

    std::printf("# a = (%.4f, %.4f), b = (%.4f, %.4f)\n", a[0], a[1], b[0], b[1]);
    std::printf("%5s %10s %10s %6s\n", "blend", "x", "y", "mode");
    for (int k = 0; k <= 10; ++k) {
        const double w = k / 10.0;
        const Vec2d x = sample_from(dec, field, slerp(za, zb, w)).output;
        std::printf("%5.2f %10.4f %10.4f %6zu\n", w, x[0], x[1], gmm.nearest_component(x));
    }
}
