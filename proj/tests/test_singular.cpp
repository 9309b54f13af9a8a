#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <variant>

#include "klab/singular.hpp"

using namespace klab;

namespace {
const ModelParams kP{1.2, 0.5, 0.45, 0.01};  // stripe range: a/m = 2.667

ModelParams with_a(double a, double b = 0.5, double m = 0.45) {
    return ModelParams{a, b, m, 0.01};
}
}  // namespace

TEST_CASE("vegetated branches and the fold", "[singular]") {
    auto v = v_pm(2.0, kP);
    CHECK(v.v_minus == Catch::Approx(1.0 - std::sqrt(0.55)).epsilon(1e-14));
    CHECK(v.v_plus == Catch::Approx(1.0 + std::sqrt(0.55)).epsilon(1e-14));
    CHECK_FALSE(v.at_fold);

    auto f = v_pm(fold_level(kP), kP);
    CHECK(f.at_fold);
    CHECK(f.v_minus == Catch::Approx(1.0).epsilon(1e-12));
    CHECK(f.v_plus == Catch::Approx(1.0).epsilon(1e-12));

    CHECK_THROWS_AS(v_pm(0.5 * fold_level(kP), kP), std::domain_error);
}

TEST_CASE("front speeds: two closed forms agree, fold value exact",
          "[singular]") {
    // The speed can also be written sqrt(2bu)/2 * (v_plus - 2 v_minus).
    for (double u = 0.95; u < 3.0; u += 0.17) {
        auto v = v_pm(u, kP);
        const double alt =
            0.5 * std::sqrt(2.0 * kP.b * u) * (v.v_plus - 2.0 * v.v_minus);
        CHECK(front_speed(FrontKind::fall, u, kP) ==
              Catch::Approx(alt).margin(1e-12));
        CHECK(front_speed(FrontKind::rise, u, kP) ==
              Catch::Approx(-alt).margin(1e-12));
    }
    const double cf = front_speed(FrontKind::fall, fold_level(kP), kP);
    CHECK(cf == Catch::Approx(-std::sqrt(kP.m / 2.0)).epsilon(1e-14));
    CHECK_THROWS_AS(front_speed(FrontKind::fall, 0.8, kP), std::domain_error);

    // strictly increasing in u
    double prev = front_speed(FrontKind::fall, 0.91, kP);
    for (double u = 0.96; u < 4.0; u += 0.05) {
        const double c = front_speed(FrontKind::fall, u, kP);
        CHECK(c > prev);
        prev = c;
    }
}

TEST_CASE("front profiles solve the frozen-water layer equation", "[singular]") {
    const double h = 1e-5;
    for (FrontKind k : {FrontKind::rise, FrontKind::fall}) {
        for (double u : {1.1, 1.7, 2.4}) {
            const double c = front_speed(k, u, kP);
            for (double xi : {-4.0, -1.3, 0.0, 0.8, 2.9}) {
                auto fm = front_profile(k, u, kP, xi - h);
                auto f0 = front_profile(k, u, kP, xi);
                auto fp = front_profile(k, u, kP, xi + h);
                const double dq = (fp.q - fm.q) / (2.0 * h);
                const double dv = (fp.v - fm.v) / (2.0 * h);
                CHECK(dv == Catch::Approx(f0.q).margin(1e-8));
                const double rhs = kP.m * f0.v -
                                   (1.0 - kP.b * f0.v) * u * f0.v * f0.v -
                                   c * f0.q;
                CHECK(dq == Catch::Approx(rhs).margin(1e-6));
            }
        }
    }
}

TEST_CASE("matched jump levels and their defining speed identities",
          "[singular]") {
    // stripe level: rising front at u_star co-moves with the falling front at a
    const ModelParams fig{1.61, 0.6, 0.5, 0.003};
    const double us = u_star(fig.a, fig);
    CHECK(us == Catch::Approx(1.2228774052287799).epsilon(1e-12));
    CHECK(front_speed(FrontKind::rise, us, fig) ==
          Catch::Approx(c_star(fig.a, fig)).margin(1e-12));
    CHECK(c_star(fig.a, fig) == Catch::Approx(0.29763221737437406).epsilon(1e-12));

    // u_star hits a at the lower window edge and the fold past 25b/4
    const double m = 0.45, b = 0.5;
    const double a_lo = 4.5 * b * m;
    CHECK(u_star(a_lo, with_a(a_lo)) == Catch::Approx(a_lo).epsilon(1e-12));
    const double a_fold = 6.25 * b * m;
    CHECK(u_star(a_fold + 0.2, with_a(a_fold + 0.2)) ==
          Catch::Approx(4.0 * b * m).epsilon(1e-14));
    CHECK(u_star(a_fold - 1e-9, with_a(a_fold - 1e-9)) ==
          Catch::Approx(4.0 * b * m).margin(1e-7));
    CHECK_THROWS_AS(u_star(0.9, with_a(0.9)), WindowError);

    // gap takeoff level: falling front at u_hat2 co-moves with the rising
    // front at the vegetated level u2
    const ModelParams gp = with_a(2.0);
    const double uh = u_hat2(gp.a, gp);
    CHECK(uh == Catch::Approx(1.26025934079606).epsilon(1e-12));
    CHECK(front_speed(FrontKind::fall, uh, gp) ==
          Catch::Approx(c_hat(gp.a, gp)).margin(1e-12));
    CHECK(c_hat(gp.a, gp) == Catch::Approx(0.3390177528024108).epsilon(1e-12));

    // at the canard ratio the takeoff level is 25bm/4
    const double a_can = (4.0 * b + 1.0 / b) * m;
    CHECK(u_hat2(a_can, with_a(a_can)) ==
          Catch::Approx(6.25 * b * m).epsilon(1e-9));
}

TEST_CASE("singular orbits: windows, continuity, speeds", "[singular]") {
    auto stripe = build_singular_orbit(OrbitKind::stripe, kP);
    CHECK(stripe.speed == Catch::Approx(0.27386127875258304).epsilon(1e-12));
    REQUIRE(stripe.segments.size() == 4);

    // consecutive segments must share their (u, v) endpoint
    auto knots = stripe.knots(kP);
    REQUIRE(knots.size() == 8);
    for (std::size_t i = 1; i + 1 < knots.size(); i += 2) {
        CHECK(knots[i][0] == Catch::Approx(knots[i + 1][0]).margin(1e-12));
        CHECK(knots[i][1] == Catch::Approx(knots[i + 1][1]).margin(1e-12));
    }
    // closes onto the desert state
    CHECK(knots.front()[0] == Catch::Approx(kP.a));
    CHECK(knots.front()[1] == 0.0);
    CHECK(knots.back()[1] == 0.0);

    auto gap = build_singular_orbit(OrbitKind::gap, with_a(2.0));
    CHECK(gap.speed == Catch::Approx(0.3390177528024108).epsilon(1e-12));
    auto gk = gap.knots(with_a(2.0));
    for (std::size_t i = 1; i + 1 < gk.size(); i += 2) {
        CHECK(gk[i][0] == Catch::Approx(gk[i + 1][0]).margin(1e-12));
        CHECK(gk[i][1] == Catch::Approx(gk[i + 1][1]).margin(1e-12));
    }

    // degenerate stripe at the lower edge: zero speed, flagged
    const double a_lo = 4.5 * 0.5 * 0.45;
    auto deg = build_singular_orbit(OrbitKind::stripe, with_a(a_lo));
    CHECK(deg.degenerate_boundary);
    CHECK(std::abs(deg.speed) < 1e-12);
}

TEST_CASE("singular orbit window rejections name the threshold", "[singular]") {
    // stripe below the loop threshold
    try {
        build_singular_orbit(OrbitKind::stripe, with_a(0.9));
        FAIL("expected rejection");
    } catch (const WindowError& e) {
        CHECK(e.threshold == "loop_stripe");
    }
    // stripe at/above the fold-jump ratio (b <= 2/3)
    try {
        build_singular_orbit(OrbitKind::stripe, with_a(6.25 * 0.5 * 0.45));
        FAIL("expected rejection");
    } catch (const WindowError& e) {
        CHECK(e.threshold == "fold_jump");
    }
    // wide saturation: blocked by the vegetated state instead
    try {
        const double b = 0.74, m = 0.5;
        const double a = 4.6 * m;  // a/m above a_bar_dh ~ 4.42, below 25b/4
        build_singular_orbit(OrbitKind::stripe, with_a(a, b, m));
        FAIL("expected rejection");
    } catch (const WindowError& e) {
        CHECK(e.threshold == "a_bar_dh");
    }
    // gap outside its window
    CHECK_THROWS_AS(build_singular_orbit(OrbitKind::gap, with_a(1.7)),
                    WindowError);
    CHECK_THROWS_AS(build_singular_orbit(OrbitKind::gap, with_a(3.0)),
                    WindowError);
    // fronts need the vegetated state above the fold
    CHECK_THROWS_AS(
        build_singular_orbit(OrbitKind::front_veg_to_bare, with_a(1.7)),
        WindowError);
}

TEST_CASE("bare-to-veg front reverses at the zero-speed ratio", "[singular]") {
    const double b = 0.5, m = 0.45;
    const double r0 = 4.5 * b + 2.0 / b;  // 6.25
    auto below = build_singular_orbit(OrbitKind::front_bare_to_veg,
                                      with_a((r0 - 0.3) * m));
    auto above = build_singular_orbit(OrbitKind::front_bare_to_veg,
                                      with_a((r0 + 0.3) * m));
    CHECK(below.speed > 0.0);
    CHECK(above.speed < 0.0);
    auto at = build_singular_orbit(OrbitKind::front_bare_to_veg,
                                   with_a(r0 * m));
    CHECK(std::abs(at.speed) < 1e-12);
    CHECK(at.degenerate_boundary);
    // the veg-to-bare front keeps its sign
    CHECK(build_singular_orbit(OrbitKind::front_veg_to_bare,
                               with_a((r0 + 0.3) * m))
              .speed > 0.0);
}

TEST_CASE("slow passage times against an independent ODE clock", "[singular]") {
    // March du/dtau = g(u) in u with RK4 on dtau/du = 1/g and compare with
    // the quadrature/closed-form route.
    auto rk4_time = [](auto g, double u0, double u1, int n) {
        const double h = (u1 - u0) / n;
        double tau = 0.0;
        auto f = [&](double u) { return 1.0 / g(u); };
        for (int i = 0; i < n; ++i) {
            const double u = u0 + i * h;
            const double k1 = f(u), k2 = f(u + 0.5 * h), k4 = f(u + h);
            tau += h * (k1 + 4.0 * k2 + k4) / 6.0;  // Simpson step
        }
        return tau;
    };

    auto stripe = build_singular_orbit(OrbitKind::stripe, kP);
    const double us = u_star(kP.a, kP);
    const double t_stripe = rk4_time(
        [&](double u) { return slow_flow_rhs(SlowBranch::dense, u, kP); }, us,
        kP.a, 20000);
    CHECK(stripe.slow_passage == Catch::Approx(t_stripe).epsilon(1e-9));
    CHECK(stripe.slow_passage ==
          Catch::Approx(0.16284834468987303).epsilon(1e-7));

    const ModelParams gp = with_a(2.0);
    auto gap = build_singular_orbit(OrbitKind::gap, gp);
    const double uh = u_hat2(gp.a, gp);
    const double u2 = u2_level(gp);
    // bare-branch flow runs downhill; clock it from uh to u2
    const double t_gap = rk4_time(
        [&](double u) { return -(u - gp.a); }, u2, uh, 20000);
    CHECK(gap.slow_passage == Catch::Approx(t_gap).epsilon(1e-9));
    CHECK(gap.slow_passage == Catch::Approx(0.3890937531053553).epsilon(1e-7));

    const ModelParams fig{1.61, 0.6, 0.5, 0.003};
    CHECK(build_singular_orbit(OrbitKind::stripe, fig).slow_passage ==
          Catch::Approx(0.25667422879712926).epsilon(1e-7));
}

TEST_CASE("zero-eps bifurcation diagram windows and refined edges",
          "[singular]") {
    const double b = 0.5, m = 0.45;
    auto dia = singular_bifurcation_diagram(b, m, 2.0, 7.0, 101);
    const auto t = regime_thresholds(b, m);

    int stripe_in = 0, gap_in = 0;
    double stripe_lo = 1e30, stripe_hi = -1e30, gap_lo = 1e30, gap_hi = -1e30;
    for (const auto& pt : dia.points) {
        if (!pt.inside_window) {
            CHECK(std::isnan(pt.c));
            continue;
        }
        CHECK(std::isfinite(pt.c));
        if (pt.family == OrbitKind::stripe) {
            ++stripe_in;
            stripe_lo = std::min(stripe_lo, pt.a_over_m);
            stripe_hi = std::max(stripe_hi, pt.a_over_m);
        } else if (pt.family == OrbitKind::gap) {
            ++gap_in;
            gap_lo = std::min(gap_lo, pt.a_over_m);
            gap_hi = std::max(gap_hi, pt.a_over_m);
        }
    }
    REQUIRE(stripe_in > 0);
    REQUIRE(gap_in > 0);
    // refined edges sit within 1e-8 of the analytic thresholds
    CHECK(stripe_lo >= t.loop_stripe - 1e-8);
    CHECK(stripe_lo <= t.loop_stripe + 0.06);
    CHECK(stripe_hi <= t.a_bar_hyp + 1e-8);
    CHECK(stripe_hi >= t.a_bar_hyp - 1e-6);
    CHECK(gap_lo >= t.canard - 1e-8);
    CHECK(gap_lo <= t.canard + 0.06);
    CHECK(gap_hi <= t.loop_gap + 1e-8);
    CHECK(gap_hi >= t.loop_gap - 1e-6);
}
