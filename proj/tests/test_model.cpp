#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "klab/model.hpp"

using namespace klab;

namespace {

// Independent route to the vegetated states: scan + bisection on
// g(v) = a - u(v) - u(v) v^2 with u(v) = m/((1-b v) v), no quadratic formula.
std::vector<double> vegetated_roots_by_bisection(const ModelParams& p) {
    auto g = [&](double v) {
        const double u = p.m / ((1.0 - p.b * v) * v);
        return p.a - u - u * v * v;
    };
    std::vector<double> roots;
    const int n = 20000;
    const double lo = 1e-9, hi = 1.0 / p.b - 1e-9;
    double v0 = lo, g0 = g(v0);
    for (int i = 1; i <= n; ++i) {
        const double v1 = lo + (hi - lo) * i / n;
        const double g1 = g(v1);
        if ((g0 < 0.0) != (g1 < 0.0)) {
            double a = v0, b = v1, ga = g0;
            for (int it = 0; it < 200; ++it) {
                const double mid = 0.5 * (a + b), gm = g(mid);
                if ((gm < 0.0) == (ga < 0.0)) {
                    a = mid;
                    ga = gm;
                } else {
                    b = mid;
                }
            }
            roots.push_back(0.5 * (a + b));
        }
        v0 = v1;
        g0 = g1;
    }
    return roots;
}

}  // namespace

TEST_CASE("reaction terms at hand-checked points", "[model]") {
    const ModelParams p{2.0, 0.5, 0.45, 0.01};
    auto [du, dv] = reaction_terms(2.0, 1.0, p);
    CHECK(du == Catch::Approx(-2.0).margin(1e-15));
    CHECK(dv == Catch::Approx(0.55).margin(1e-15));
    auto [du0, dv0] = reaction_terms(p.a, 0.0, p);
    CHECK(du0 == 0.0);
    CHECK(dv0 == 0.0);
}

TEST_CASE("steady states: count, residuals, and bisection oracle", "[model]") {
    const ModelParams p{2.0, 0.5, 0.45, 0.01};
    auto states = uniform_steady_states(p);
    REQUIRE(states.size() == 3);

    for (const auto& s : states) {
        auto [du, dv] = reaction_terms(s.u, s.v, p);
        CHECK(std::abs(du) < 1e-12);
        CHECK(std::abs(dv) < 1e-12);
    }

    // Frozen oracle values (scan + bisection, run separately).
    CHECK(states[1].v == Catch::Approx(0.283109444049945).epsilon(1e-12));
    CHECK(states[1].u == Catch::Approx(1.8515930449020637).epsilon(1e-12));
    CHECK(states[2].v == Catch::Approx(1.0962009007776414).epsilon(1e-12));
    CHECK(states[2].u == Catch::Approx(0.9084069550979362).epsilon(1e-12));

    auto roots = vegetated_roots_by_bisection(p);
    REQUIRE(roots.size() == 2);
    CHECK(states[1].v == Catch::Approx(roots[0]).epsilon(1e-10));
    CHECK(states[2].v == Catch::Approx(roots[1]).epsilon(1e-10));
}

TEST_CASE("steady-state existence threshold and degeneracy flag", "[model]") {
    const double b = 0.5, m = 0.45;
    const double onset = regime_thresholds(b, m).existence_onset;

    ModelParams below{(onset - 0.05) * m, b, m, 0.01};
    CHECK(uniform_steady_states(below).size() == 1);

    ModelParams above{(onset + 0.05) * m, b, m, 0.01};
    auto st = uniform_steady_states(above);
    REQUIRE(st.size() == 3);
    CHECK_FALSE(st[1].degenerate);

    ModelParams at{onset * m, b, m, 0.01};
    auto stc = uniform_steady_states(at);
    REQUIRE(stc.size() == 3);
    CHECK(stc[1].degenerate);
    CHECK(stc[1].v == Catch::Approx(stc[2].v).epsilon(1e-6));
}

TEST_CASE("homogeneous stability: desert exact, saddle middle branch", "[model]") {
    const ModelParams p{2.0, 0.5, 0.45, 0.01};
    auto states = uniform_steady_states(p);

    auto d = homogeneous_stability(states[0], p);
    CHECK(d.eig_real[0] == Catch::Approx(-p.m).margin(1e-15));
    CHECK(d.eig_real[1] == Catch::Approx(-1.0).margin(1e-15));
    CHECK(d.stable);

    auto mid = homogeneous_stability(states[1], p);
    CHECK(mid.det == Catch::Approx(-0.33378111190011).epsilon(1e-10));
    CHECK_FALSE(mid.stable);

    auto top = homogeneous_stability(states[2], p);
    CHECK(top.trace == Catch::Approx(-2.2974529373167445).epsilon(1e-10));
    CHECK(top.det == Catch::Approx(1.2924018015552834).epsilon(1e-10));
    CHECK(top.stable);
}

TEST_CASE("upper vegetated state destabilizes only below the canard ratio",
          "[model]") {
    // The kinetics-stable range of (U2,V2) is a/m > 4b + 1/b when that ratio
    // binds; scan a band of ratios and check stability flips exactly once.
    const double b = 0.35, m = 0.45;  // small b: canard well above onset
    const auto t = regime_thresholds(b, m);
    int flips = 0;
    bool prev = false, first = true;
    for (double r = t.existence_onset + 1e-3; r < t.canard + 2.0; r += 1e-3) {
        const ModelParams p{r * m, b, m, 0.01};
        auto st = uniform_steady_states(p);
        const bool stable = homogeneous_stability(st[2], p).stable;
        if (!first && stable != prev) ++flips;
        prev = stable;
        first = false;
    }
    CHECK(flips <= 1);
    // Well above the canard ratio it must be stable.
    const ModelParams hi{(t.canard + 1.5) * m, b, m, 0.01};
    CHECK(homogeneous_stability(uniform_steady_states(hi)[2], hi).stable);
}

TEST_CASE("regime thresholds: values, ordering, confluence at b=2/3", "[model]") {
    const auto t = regime_thresholds(0.6, 0.5);
    CHECK(t.existence_onset == Catch::Approx(3.532381).margin(1e-6));
    CHECK(t.loop_stripe == Catch::Approx(2.7).margin(1e-12));
    CHECK(t.fold_jump == Catch::Approx(3.75).margin(1e-12));
    CHECK(t.canard == Catch::Approx(4.0666666666666667).margin(1e-12));
    CHECK(t.a_bar_dh == Catch::Approx(3.940888).margin(1e-6));
    CHECK(t.loop_gap == Catch::Approx(6.0333333333333333).margin(1e-12));
    // b = 0.6 < 2/3: fold-touching window open
    CHECK(t.a_bar == t.canard);
    CHECK(t.a_bar_hyp == t.fold_jump);

    // At b = 2/3 the three upper thresholds coincide (25/6).
    const auto tc = regime_thresholds(2.0 / 3.0, 0.5);
    CHECK(tc.a_bar_dh == Catch::Approx(25.0 / 6.0).epsilon(1e-12));
    CHECK(tc.canard == Catch::Approx(25.0 / 6.0).epsilon(1e-12));
    CHECK(tc.fold_jump == Catch::Approx(25.0 / 6.0).epsilon(1e-12));

    // b > 2/3: both upper ends collapse onto a_bar_dh
    const auto tw = regime_thresholds(0.74, 0.5);
    CHECK(tw.a_bar == tw.a_bar_dh);
    CHECK(tw.a_bar_hyp == tw.a_bar_dh);
    CHECK(tw.a_bar_dh == Catch::Approx(4.422582).margin(1e-6));
}

TEST_CASE("parameter validation", "[model]") {
    CHECK_THROWS_AS((ModelParams{-1.0, 0.5, 0.45, 0.01}.validate()), ConfigError);
    CHECK_THROWS_AS((ModelParams{1.0, 0.5, 0.45, 0.0}.validate()), ConfigError);
    CHECK_THROWS_AS((ModelParams{1.0, 0.5, 0.45, 0.01, -0.1}.validate()),
                    ConfigError);
    const ModelParams with_d{1.0, 0.5, 0.45, 0.01, 1.0};
    CHECK_THROWS_AS(with_d.require_no_diffusion("test"), ConfigError);
}
