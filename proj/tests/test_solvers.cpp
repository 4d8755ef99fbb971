#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <tuple>

#include "ttm/solvers.hpp"

using namespace ttm;

namespace {

const VpSchedule kSched;

StridingSpec striding_for(Method m) { return is_multistep(m) ? StridingSpec::linear() : StridingSpec::quadratic(); }

/// eps(x, t) = poly(gamma_t), independent of x.
EpsField gamma_poly_field(Vec2d a, Vec2d b, Vec2d c, Vec2d d) {
    return EpsField::from_generic(
        [=](const auto& x, const auto& t) {
            using S = std::decay_t<decltype(t)>;
            (void)x;
            const S g = kSched.gamma(t);
            Vec2<S> out;
            for (int k = 0; k < 2; ++k) out[k] = a[k] + g * (b[k] + g * (c[k] + g * d[k]));
            return out;
        },
        kSched, "gamma-poly");
}

} // namespace

TEST(Methods, NamesRoundTrip) {
    for (Method m : {Method::ddim, Method::genie, Method::ttm3, Method::ab2, Method::ab4, Method::euler_maruyama})
        EXPECT_EQ(parse_method(to_string(m)), m);
    EXPECT_EQ(parse_method("em"), Method::euler_maruyama);
    EXPECT_THROW(parse_method("heun"), ConfigError);
}

TEST(Seeds, StreamsAreDistinctAndStable) {
    EXPECT_EQ(stream_seed(1, 2), stream_seed(1, 2));
    EXPECT_NE(stream_seed(1, 2), stream_seed(1, 3));
    EXPECT_NE(stream_seed(1, 2), stream_seed(2, 2));
}

class NfeAccounting : public ::testing::TestWithParam<std::tuple<Method, bool, bool, int>> {};

TEST_P(NfeAccounting, CountedCallsEqualBudget) {
    const auto [m, afs, denoise, nfe] = GetParam();
    SolverRun run{m, nfe, striding_for(m), afs, denoise, 9};
    if (!run.feasible()) {
        EXPECT_THROW(run.steps(), BudgetError);
        return;
    }
    auto counter = make_counter();
    const EpsField f = EpsField::analytic(build_toy(), kSched).with_counter(counter);
    const Trajectory tr = sample(run, f, 3);
    EXPECT_EQ(counter->load(), nfe);
    EXPECT_EQ(tr.nfe_used, nfe);
    EXPECT_EQ(tr.size(), static_cast<std::size_t>(run.steps()) + 1);
    EXPECT_EQ(tr.denoised, denoise);
}

INSTANTIATE_TEST_SUITE_P(AllCombos, NfeAccounting,
                         ::testing::Combine(::testing::Values(Method::ddim, Method::genie, Method::ttm3, Method::ab2,
                                                              Method::ab4, Method::euler_maruyama),
                                            ::testing::Bool(), ::testing::Bool(), ::testing::Values(1, 2, 4, 5, 10, 25)));

TEST(Budget, InfeasibleRuns) {
    EXPECT_THROW((SolverRun{Method::ddim, 1, StridingSpec::quadratic(), false, true}.steps()), BudgetError);
    EXPECT_NO_THROW((SolverRun{Method::ddim, 1, StridingSpec::quadratic(), true, true}.steps()));
    EXPECT_FALSE((SolverRun{Method::ab4, 4, StridingSpec::linear(), false, false}.feasible()));
    EXPECT_EQ((SolverRun{Method::ab4, 5, StridingSpec::linear(), false, false}.steps()), 2);
    EXPECT_THROW((SolverRun{Method::ddim, 0}.steps()), BudgetError);
    EXPECT_THROW((SolverRun{Method::ab2, 10, StridingSpec::quadratic()}.validate()), ConfigError);
}

TEST(Capability, MissingDerivativeIsReported) {
    const EpsField f = EpsField::analytic(build_toy(), kSched).without_derivative();
    EXPECT_THROW(sample(SolverRun{Method::genie, 10}, f), CapabilityError);
    EXPECT_NO_THROW(sample(SolverRun{Method::ddim, 10}, f));
    const EpsField g = EpsField::analytic(build_toy(), kSched).with_derivative(
        DerivativeKind::distilled, [](const Vec2d&, double, const Vec2d&, const Vec2d&) { return Vec2d{}; });
    EXPECT_THROW(sample(SolverRun{Method::ttm3, 10}, g), CapabilityError);
    EXPECT_NO_THROW(sample(SolverRun{Method::genie, 10}, g));
}

TEST(Stationary, StandardNormalDataHasZeroVelocity) {
    const EpsField f = EpsField::analytic(single_gaussian(Vec2d{}, 1.0), kSched);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> ut(kSched.t_cutoff(), 1.0);
    for (int k = 0; k < 200; ++k) {
        const Vec2d x = standard_normal2(rng) * 2.0;
        const double t = ut(rng);
        EXPECT_LT(norm(kSched.flow_velocity(x, t, f.eps(x, t))), 1e-12);
    }
}

// one DDIM step on N(0,I) data in closed form: eps = sigma x
TEST(Stationary, DdimStepMatchesClosedForm) {
    const EpsField f = EpsField::analytic(single_gaussian(Vec2d{}, 1.0), kSched);
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> ut(kSched.t_cutoff(), 1.0);
    for (int k = 0; k < 200; ++k) {
        const Vec2d x = standard_normal2(rng) * 2.0;
        const double t = ut(rng), tn = std::uniform_real_distribution<double>(kSched.t_cutoff(), t)(rng);
        const double g = kSched.gamma(t), gn = kSched.gamma(tn);
        const Vec2d got = from_bar(step_ddim(f, to_bar(x, g), t, tn), gn);
        const double factor = (std::sqrt(1 + g * g) + (gn - g) * g / std::sqrt(1 + g * g)) / std::sqrt(1 + gn * gn);
        EXPECT_LT(norm(got - x * factor), 1e-12);
    }
}

// discrete steps drift in x; the drift shrinks with the step size at the solver's order
TEST(Stationary, DriftShrinksWithStepSize) {
    const EpsField f = EpsField::analytic(single_gaussian(Vec2d{}, 1.0), kSched);
    const Vec2d x0{{1.3, -0.7}};
    for (Method m : {Method::ddim, Method::genie, Method::ttm3, Method::ab2, Method::ab4}) {
        auto drift = [&](int nfe) {
            const Trajectory tr = sample_from(SolverRun{m, nfe, striding_for(m), false, false, 0}, f, x0);
            return norm(tr.x(tr.size() - 1) - x0);
        };
        const double coarse = drift(20), fine = drift(80);
        EXPECT_LT(fine, coarse * 0.5) << to_string(m);
    }
}

TEST(ZeroProperty, HigherOrderStepsEqualDdimForPointMass) {
    const EpsField f = EpsField::analytic(single_gaussian(Vec2d{{0.3, -0.6}}, 0.0), kSched);
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> ut(0.01, 1.0), uf(0.05, 0.95);
    for (int k = 0; k < 1000; ++k) {
        const double t = ut(rng), tn = t * uf(rng);
        if (tn < kSched.t_cutoff()) continue;
        const Vec2d xb = standard_normal2(rng) * 3.0;
        const Vec2d d = step_ddim(f, xb, t, tn);
        EXPECT_LT(norm(step_genie(f, xb, t, tn) - d), 1e-12);
        EXPECT_LT(norm(step_ttm3(f, xb, t, tn) - d), 1e-12);
    }
}

TEST(Multistep, Ab2ExactForLinearInGammaOnUniformGrid) {
    const EpsField f = gamma_poly_field({{0.3, -0.1}}, {{1.2, 0.4}}, {}, {});
    const double g0 = 2.0, h = -0.25;
    EpsHistory hist;
    for (int k = 0; k < 2; ++k) {
        const double g = g0 + k * h;
        hist.emplace_back(g, f.raw_eps(Vec2d{}, kSched.t_of_gamma(g)));
    }
    const double gn = g0 + h, gnext = gn + h;
    const Vec2d xb{{1.0, 2.0}};
    const Vec2d got = step_ab2(hist, xb, gn, gnext);
    const Vec2d want = xb + Vec2d{{0.3 * h + 1.2 * 0.5 * (gnext * gnext - gn * gn), -0.1 * h + 0.4 * 0.5 * (gnext * gnext - gn * gn)}};
    EXPECT_LT(norm(got - want), 1e-12);
}

TEST(Multistep, Ab4ExactForCubicInGammaOnUniformGrid) {
    const Vec2d a{{0.3, -0.1}}, b{{1.2, 0.4}}, c{{-0.5, 0.2}}, d{{0.1, 0.07}};
    const EpsField f = gamma_poly_field(a, b, c, d);
    auto antideriv = [&](double g) { return a * g + b * (g * g / 2) + c * (g * g * g / 3) + d * (g * g * g * g / 4); };
    const double g0 = 3.0, h = -0.2;
    EpsHistory hist;
    for (int k = 0; k < 4; ++k) {
        const double g = g0 + k * h;
        hist.emplace_back(g, f.raw_eps(Vec2d{}, kSched.t_of_gamma(g)));
    }
    const double gn = g0 + 3 * h, gnext = gn + h;
    const Vec2d xb{{0.5, 0.5}};
    EXPECT_LT(norm(step_ab4(hist, xb, gn, gnext) - (xb + antideriv(gnext) - antideriv(gn))), 1e-11);
    EpsHistory short_hist(hist.begin(), hist.begin() + 3);
    EXPECT_THROW(step_ab4(short_hist, xb, gn, gnext), StateError);
}

TEST(Multistep, Rk4WarmupExactForCubicInGamma) {
    const Vec2d a{{0.3, -0.1}}, b{{1.2, 0.4}}, c{{-0.5, 0.2}}, d{{0.1, 0.07}};
    const EpsField f = gamma_poly_field(a, b, c, d);
    auto antideriv = [&](double g) { return a * g + b * (g * g / 2) + c * (g * g * g / 3) + d * (g * g * g * g / 4); };
    const double g0 = 2.0, g1 = 1.1;
    const Vec2d xb{{0.1, 0.2}};
    const Vec2d k1 = f.raw_eps(Vec2d{}, kSched.t_of_gamma(g0));
    EXPECT_LT(norm(rk4_step(f, xb, g0, g1, k1, false) - (xb + antideriv(g1) - antideriv(g0))), 1e-12);
}

TEST(Taylor, ExactForPolynomialFields) {
    // eps = a + b g: GENIE is exact; eps quadratic in g: TTM3 is exact.
    const Vec2d a{{0.3, -0.1}}, b{{1.2, 0.4}}, c{{-0.5, 0.2}};
    const EpsField lin = gamma_poly_field(a, b, {}, {});
    const EpsField quad = gamma_poly_field(a, b, c, {});
    const double t = 0.6, tn = 0.2;
    const double g = kSched.gamma(t), gn = kSched.gamma(tn);
    const Vec2d xb{{0.4, 0.4}};
    auto exact = [&](const Vec2d& cc) {
        auto F = [&](double s) { return a * s + b * (s * s / 2) + cc * (s * s * s / 3); };
        return xb + F(gn) - F(g);
    };
    EXPECT_LT(norm(step_genie(lin, xb, t, tn) - exact(Vec2d{})), 1e-12);
    EXPECT_LT(norm(step_ttm3(quad, xb, t, tn) - exact(c)), 1e-11);
    EXPECT_GT(norm(step_ddim(lin, xb, t, tn) - exact(Vec2d{})), 1e-3);
}

TEST(Sampling, DeterministicUnderFixedSeed) {
    const EpsField f = EpsField::analytic(build_toy(), kSched);
    for (Method m : {Method::genie, Method::euler_maruyama}) {
        SolverRun run{m, 10, StridingSpec::quadratic(), false, true, 123};
        const auto a = sample_many(run, f, 16), b = sample_many(run, f, 16);
        EXPECT_EQ(a, b);
        run.seed = 124;
        EXPECT_NE(sample_many(run, f, 16), a);
    }
}

TEST(Sampling, DenoiseUsesFreshCall) {
    const EpsField f = EpsField::analytic(build_toy(), kSched);
    const SolverRun with{Method::ddim, 11, StridingSpec::quadratic(), false, true, 4};
    const SolverRun without{Method::ddim, 10, StridingSpec::quadratic(), false, false, 4};
    const Trajectory a = sample(with, f, 0), b = sample(without, f, 0);
    EXPECT_EQ(a.final_x(), b.final_x());
    const double tc = kSched.t_cutoff();
    const Vec2d x = b.final_x();
    const Vec2d want = (x - f.raw_eps(x, tc) * kSched.sigma(tc)) / kSched.alpha(tc);
    EXPECT_LT(norm(a.output - want), 1e-14);
}

TEST(Sampling, AfsReplacesFirstEvaluation) {
    auto counter = make_counter();
    const EpsField f = EpsField::analytic(build_toy(), kSched).with_counter(counter);
    const SolverRun run{Method::ddim, 5, StridingSpec::quadratic(), true, false, 0};
    const Vec2d x1{{0.5, -1.0}};
    const Trajectory tr = sample_from(run, f, x1);
    EXPECT_EQ(tr.size(), 7u);
    const double g0 = kSched.gamma(1.0), g1 = tr.gammas[1];
    EXPECT_LT(norm(tr.states_bar[1] - (to_bar(x1, g0) + x1 * (g1 - g0))), 1e-14);
    EXPECT_EQ(counter->load(), 5);
}

TEST(Sampling, GenieBeatsDdimGlobally) {
    const EpsField f = EpsField::analytic(single_gaussian(Vec2d{{1.0, 0.5}}, 0.2), kSched);
    const std::vector<Vec2d> x1 = initial_states(3, 32);
    double e_ddim = 0.0, e_genie = 0.0;
    for (const auto& x : x1) {
        const std::vector<double> times = make_striding(StridingSpec::quadratic(), 10).times;
        const Vec2d ref = oracle_endpoint(f, x, times, 64, OracleKind::rk4);
        e_ddim += norm(sample_from(SolverRun{Method::ddim, 10, StridingSpec::quadratic(), false, false}, f, x).output - ref);
        e_genie += norm(sample_from(SolverRun{Method::genie, 10, StridingSpec::quadratic(), false, false}, f, x).output - ref);
    }
    EXPECT_LT(e_genie, 0.5 * e_ddim);
}

TEST(Sampling, EulerMaruyamaRecoversGaussianMean) {
    const EpsField f = EpsField::analytic(single_gaussian(Vec2d{{1.0, -0.5}}, 0.3), kSched);
    const auto xs = sample_many(SolverRun{Method::euler_maruyama, 200, StridingSpec::linear(), false, true, 8}, f, 2000);
    Vec2d mean{};
    for (const auto& x : xs) mean += x / 2000.0;
    EXPECT_NEAR(mean[0], 1.0, 0.05);
    EXPECT_NEAR(mean[1], -0.5, 0.05);
}

TEST(Encode, ZeroBudgetReturnsDiffusedPointAndRoundTripImproves) {
    const EpsField f = EpsField::analytic(single_gaussian(Vec2d{{0.5, 0.5}}, 0.5), kSched);
    const Vec2d x0{{0.8, 0.1}};
    const SolverRun zero{Method::ddim, 0, StridingSpec::quadratic(), false, false, 1};
    const Vec2d xc = encode(f, x0, zero, 0);
    EXPECT_LT(norm(xc - x0), 0.1);
    EXPECT_EQ(xc, encode(f, x0, zero, 0));
    double prev = 1e9;
    for (int nfe : {5, 20, 80}) {
        const Vec2d z = encode(f, x0, SolverRun{Method::genie, nfe, StridingSpec::quadratic(), false, false, 1}, 0);
        const Vec2d back = sample_from(SolverRun{Method::genie, nfe + 1, StridingSpec::quadratic(), false, true, 1}, f, z).output;
        const double err = norm(back - x0);
        EXPECT_LT(err, prev);
        prev = err;
    }
    EXPECT_THROW(encode(f, x0, SolverRun{Method::euler_maruyama, 5}, 0), CapabilityError);
    EXPECT_THROW(encode(f, x0, SolverRun{Method::ab2, 5, StridingSpec::quadratic()}, 0), ConfigError);
}

TEST(Slerp, EndpointsAndDomain) {
    const Vec2d a{{1.0, 0.0}}, b{{0.0, 2.0}};
    EXPECT_EQ(slerp(a, b, 0.0), a);
    EXPECT_EQ(slerp(a, b, 1.0), b);
    EXPECT_THROW(slerp(a, b, 1.5), DomainError);
}

TEST(Oracle, RefinementConverges) {
    const EpsField f = EpsField::analytic(build_toy(), kSched);
    const Vec2d x{{0.3, 0.9}};
    const Vec2d r1 = reference_rk4(f, x, 0.5, 0.3, 32), r2 = reference_rk4(f, x, 0.5, 0.3, 64);
    const Vec2d r3 = reference_rk4(f, x, 0.5, 0.3, 128);
    const Vec2d d1 = oracle_ddim(f, x, 0.5, 0.3, 2000), d2 = oracle_ddim(f, x, 0.5, 0.3, 4000);
    EXPECT_GT(norm(r1 - r2), 8.0 * norm(r2 - r3));
    EXPECT_LT(norm(r2 - r3), 2e-9);
    EXPECT_LT(norm(d2 - r2), norm(d1 - r2));
    const Vec2d inc = reference_rk4_increment(f, x, 0.5, 0.3, 64);
    EXPECT_LT(norm(from_bar(to_bar(x, kSched.gamma(0.5)) + inc, kSched.gamma(0.3)) - r2), 1e-13);
}
