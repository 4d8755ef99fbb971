// Class fidelity of guided GENIE sampling as the guidance scale grows.

#include <cstdio>

#include "ttm/ttm.hpp"

int main() {
    using namespace ttm;
    const VpSchedule sched;
    const GaussianMixture gmm = build_toy();
    const GuidedField guided = GuidedField::analytic(gmm, sched, 0.0);

    std::printf("%5s %10s\n", "w", "fidelity");
    for (double w : {0.0, 0.5, 1.0, 2.0, 4.0}) {
        const GuidedField g = guided.with_scale(w);
        double fid = 0.0;
        for (int c = 0; c < gmm.num_classes(); ++c) {
            SolverRun run{Method::genie, 10, StridingSpec::quadratic(), false, true, static_cast<std::uint64_t>(c)};
            fid += class_fidelity(sample_many(run, g.as_field(c), 256), gmm, c);
        }
        std::printf("%5.2f %10.4f\n", w, fid / gmm.num_classes());
    }
}
