#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>

#include "klab/melnikov.hpp"

using namespace klab;

namespace {

// Independent route: march the adjoint system
//   psi' = [[0, -m + u v (2-3bv)], [-1, c]] psi
// with RK4 and accumulate the pairing integrals with Simpson's rule on the
// fly.  The bounded adjoint solution is forward-dominant left of the front
// and backward-dominant right of it, so each tail is marched toward the
// front from an equilibrium eigendirection seed and the two halves are
// matched by a scalar at the interface.  No quadrature library, and the
// closed-form adjoint solution enters only through the seed amplitudes.
struct AdjointOracle {
    double M_c, M_u;
};

AdjointOracle adjoint_oracle(FrontKind kind, double u0, const ModelParams& p,
                             double h_mag = 1e-3) {
    const double c0 = front_speed(kind, u0, p);
    const double k = front_rate(u0, p);

    auto rhs = [&](double xi, std::array<double, 2> psi) {
        const auto f = front_profile(kind, u0, p, xi);
        const double a12 = -p.m + u0 * f.v * (2.0 - 3.0 * p.b * f.v);
        return std::array<double, 2>{a12 * psi[1], -psi[0] + c0 * psi[1]};
    };
    auto integrands = [&](double xi, const std::array<double, 2>& psi) {
        const auto f = front_profile(kind, u0, p, xi);
        return std::array<double, 2>{
            -f.q * psi[1], -(1.0 - p.b * f.v) * f.v * f.v * psi[1]};
    };
    // Adjoint eigendirection (c0 - mu, 1) at a tail equilibrium whose layer
    // linearization has v-coefficient nu; mu is the adjoint rate selected by
    // the bounded solution on that side.  Unit psi2, amplitude applied later:
    // the true amplitude at the far right tail underflows double precision.
    auto tail_dir = [&](double nu, double sign_root) {
        const double mu =
            0.5 * (c0 + sign_root * std::sqrt(c0 * c0 + 4.0 * nu));
        return std::array<double, 2>{c0 - mu, 1.0};
    };
    // RK4 march from a to b (either direction) with Simpson accumulation.
    struct Half {
        std::array<double, 2> psi;
        double Mc, Mu;
    };
    auto march = [&](double a, double b, std::array<double, 2> psi) {
        const int n = std::max(64, (int)std::ceil(std::abs(b - a) / h_mag));
        const double h = (b - a) / n;
        auto rk4 = [&](double xi, std::array<double, 2> y, double step) {
            const auto k1 = rhs(xi, y);
            const auto k2 = rhs(xi + 0.5 * step,
                                {y[0] + 0.5 * step * k1[0],
                                 y[1] + 0.5 * step * k1[1]});
            const auto k3 = rhs(xi + 0.5 * step,
                                {y[0] + 0.5 * step * k2[0],
                                 y[1] + 0.5 * step * k2[1]});
            const auto k4 =
                rhs(xi + step, {y[0] + step * k3[0], y[1] + step * k3[1]});
            return std::array<double, 2>{
                y[0] + step / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
                y[1] + step / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])};
        };
        double Mc = 0.0, Mu = 0.0;
        for (int i = 0; i < n; ++i) {
            const double xi = a + i * h;
            const auto g0 = integrands(xi, psi);
            const auto pm = rk4(xi, psi, 0.5 * h);
            const auto gm = integrands(xi + 0.5 * h, pm);
            psi = rk4(xi + 0.5 * h, pm, 0.5 * h);
            const auto g1 = integrands(xi + h, psi);
            Mc += h / 6.0 * (g0[0] + 4.0 * gm[0] + g1[0]);
            Mu += h / 6.0 * (g0[1] + 4.0 * gm[1] + g1[1]);
        }
        return Half{psi, Mc, Mu};
    };

    // nu values of the layer linearization in the two tails
    const double vp = v_pm(u0, p).v_plus;
    const double nu_plateau =
        p.m - u0 * vp * (2.0 - 3.0 * p.b * vp);  // vegetated side (negative of a12)
    const double nu_bare = p.m;
    const double nu_left = (kind == FrontKind::rise) ? nu_bare : nu_plateau;
    const double nu_right = (kind == FrontKind::rise) ? nu_plateau : nu_bare;

    // the left cutoff also keeps tanh(k xi) away from saturation, where the
    // closed-form amplitude below would lose the v-q consistency it needs
    const double xl = -std::min((40.0 + 20.0 * std::abs(c0)) / k, 18.0 / k);
    const double xr = (40.0 + 20.0 * std::abs(c0)) / k;

    // bounded solution leaves the left tail along the growing adjoint mode
    // (+ root) and enters the right tail along the decaying one (- root)
    auto left = march(xl, 0.0, tail_dir(nu_left, +1.0));
    auto right = march(xr, 0.0, tail_dir(nu_right, -1.0));

    // physical amplitude from psi = e^{c0 xi} (q', -q) at the left seed,
    // where every factor is comfortably inside double range
    const double amp_l =
        -std::exp(c0 * xl) * front_profile(kind, u0, p, xl).q;
    // right amplitude follows from continuity at the interface; marching the
    // right half backward makes its integrals enter with a sign flip
    const double amp_r = amp_l * left.psi[1] / right.psi[1];
    return {amp_l * left.Mc - amp_r * right.Mc,
            amp_l * left.Mu - amp_r * right.Mu};
}

}  // namespace

TEST_CASE("splitting integrals agree with the adjoint-ODE oracle",
          "[melnikov]") {
    struct Case {
        FrontKind kind;
        double u0, b, m;
    };
    const Case cases[] = {
        {FrontKind::rise, 1.2228774052287799, 0.6, 0.5},  // stripe jump level
        {FrontKind::fall, 1.26025934079606, 0.5, 0.45},   // gap takeoff level
        {FrontKind::rise, 2.0, 0.5, 0.45},                // generic, c0 < 0
        {FrontKind::fall, 1.8, 0.6, 0.5},
    };
    for (const auto& c : cases) {
        const ModelParams p{1.0, c.b, c.m, 0.01};
        const auto M = melnikov_integrals(c.kind, c.u0, p);
        const auto O = adjoint_oracle(c.kind, c.u0, p);
        CHECK(M.M_c == Catch::Approx(O.M_c).epsilon(1e-8));
        CHECK(M.M_u == Catch::Approx(O.M_u).epsilon(1e-8));
    }
}

TEST_CASE("frozen values from a second quadrature implementation",
          "[melnikov]") {
    const ModelParams fig{1.61, 0.6, 0.5, 0.003};
    const auto Ms = melnikov_integrals(FrontKind::rise, u_star(fig.a, fig), fig);
    CHECK(Ms.M_c == Catch::Approx(0.1023982974091586).epsilon(1e-8));
    CHECK(Ms.M_u == Catch::Approx(0.44237845535502485).epsilon(1e-8));

    const ModelParams gp{2.0, 0.5, 0.45, 0.01};
    const auto Mg = melnikov_integrals(FrontKind::fall, u_hat2(gp.a, gp), gp);
    CHECK(Mg.M_c == Catch::Approx(0.37403024860309214).epsilon(1e-8));
    CHECK(Mg.M_u == Catch::Approx(-0.3840749110089093).epsilon(1e-8));

    const auto Mr = melnikov_integrals(FrontKind::rise, 2.0, gp);
    CHECK(Mr.c0 == Catch::Approx(-0.8661064910686799).epsilon(1e-12));
    CHECK(Mr.M_c == Catch::Approx(0.8658390884164577).epsilon(1e-8));
    CHECK(Mr.M_u == Catch::Approx(0.46609871162478533).epsilon(1e-8));
}

TEST_CASE("sign pattern across a valid parameter block", "[melnikov]") {
    for (double b : {0.4, 0.5, 0.6, 0.7, 0.8}) {
        for (double mult : {1.1, 1.4, 1.8, 2.3, 2.9}) {
            const ModelParams p{1.0, b, 0.45, 0.01};
            const double u0 = mult * fold_level(p);
            const auto Mr = melnikov_integrals(FrontKind::rise, u0, p);
            const auto Mf = melnikov_integrals(FrontKind::fall, u0, p);
            CHECK(Mr.M_c > 0.0);
            CHECK(Mf.M_c > 0.0);
            CHECK(Mr.M_u > 0.0);
            CHECK(Mf.M_u < 0.0);
        }
    }
}

TEST_CASE("critical eigenvalue predictions", "[melnikov]") {
    const ModelParams fig{1.61, 0.6, 0.5, 0.003};
    const auto ps = critical_eig_prediction(OrbitKind::stripe, fig);
    CHECK(ps.lambda_c == Catch::Approx(-0.009205754164346193).epsilon(1e-7));
    CHECK(ps.lambda_c < 0.0);
    CHECK(ps.M_lambda > 0.0);
    CHECK(ps.M_eps > 0.0);

    const ModelParams gp{2.0, 0.5, 0.45, 0.01};
    const auto pg = critical_eig_prediction(OrbitKind::gap, gp);
    CHECK(pg.lambda_c == Catch::Approx(-0.007596065529847533).epsilon(1e-7));
    CHECK(pg.M_eps > 0.0);

    const ModelParams st{1.2, 0.5, 0.45, 0.01};
    const auto pst = critical_eig_prediction(OrbitKind::stripe, st);
    CHECK(pst.lambda_c == Catch::Approx(-0.04792572378170204).epsilon(1e-7));

    // linear eps scaling is exact at this order
    ModelParams half = fig;
    half.eps *= 0.5;
    const auto ph = critical_eig_prediction(OrbitKind::stripe, half);
    CHECK(ph.lambda_c == Catch::Approx(0.5 * ps.lambda_c).epsilon(1e-12));

    CHECK_THROWS_AS(
        critical_eig_prediction(OrbitKind::front_veg_to_bare, fig),
        ConfigError);
}

TEST_CASE("divergent weight is rejected at the fold level", "[melnikov]") {
    // At u = 4bm the weight rate equals the decay rate exactly.
    const ModelParams p{1.0, 0.5, 0.45, 0.01};
    CHECK_THROWS_AS(melnikov_integrals(FrontKind::fall, fold_level(p), p),
                    SolverError);
}
