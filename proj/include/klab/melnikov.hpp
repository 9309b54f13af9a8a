#pragma once

// Weighted splitting integrals along the closed-form fast fronts.  M_c
// measures the response of the front speed, M_u the response to water-level
// drift; their ratio (scaled by the slow drift at the jump level) gives the
// leading-order critical eigenvalue of a pulse.

#include <cmath>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "klab/common.hpp"
#include "klab/model.hpp"
#include "klab/singular.hpp"

namespace klab {

struct MelnikovPair {
    FrontKind kind;
    double u0;   // frozen water level of the front
    double c0;   // front speed, also the exponential weight rate
    double M_c;  // int e^{c0 xi} q^2            (> 0 for both kinds)
    double M_u;  // int e^{c0 xi} (1-bv) v^2 q   (> 0 rise, < 0 fall)
};

inline MelnikovPair melnikov_integrals(FrontKind kind, double u0,
                                       const ModelParams& p) {
    p.require_no_diffusion("melnikov_integrals");
    const double c0 = front_speed(kind, u0, p);
    const double k = front_rate(u0, p);
    // Tail integrands decay like e^{-(2k - |c0|)|xi|}; beyond that the weight
    // wins and the integrals do not exist.
    if (!(std::abs(c0) < 2.0 * k))
        throw SolverError(
            "melnikov_integrals: weight rate exceeds the front decay rate, "
            "integrals diverge");
    const double xi_max = (40.0 + 20.0 * std::abs(c0)) / k;

    auto fc = [&](double xi) {
        const auto f = front_profile(kind, u0, p, xi);
        return std::exp(c0 * xi) * f.q * f.q;
    };
    auto fu = [&](double xi) {
        const auto f = front_profile(kind, u0, p, xi);
        return std::exp(c0 * xi) * (1.0 - p.b * f.v) * f.v * f.v * f.q;
    };

    // Integrate the sharp interface zone and the two slowly decaying
    // exponential tails as separate adaptive calls; a single call over the
    // whole window can stall its refinement on the tails.
    const double w = std::min(20.0 / k, xi_max);
    const double cuts[] = {-xi_max, -w, w, xi_max};
    using gk = boost::math::quadrature::gauss_kronrod<double, 31>;
    auto integrate = [&](auto f) {
        double val = 0.0, err = 0.0;
        for (int i = 0; i + 1 < 4; ++i) {
            if (cuts[i] >= cuts[i + 1]) continue;
            double e = 0.0;
            val += gk::integrate(f, cuts[i], cuts[i + 1], 12, 1e-14, &e);
            err += e;
        }
        if (!(err < 1e-12 * std::max(1.0, std::abs(val))))
            throw SolverError("melnikov_integrals: quadrature did not converge");
        return val;
    };
    const double M_c = integrate(fc);
    const double M_u = integrate(fu);

    if (!(M_c > 0.0) ||
        (kind == FrontKind::rise ? !(M_u > 0.0) : !(M_u < 0.0)))
        throw SolverError("melnikov_integrals: sign postcondition violated");
    return {kind, u0, c0, M_c, M_u};
}

struct CriticalEigPrediction {
    OrbitKind family;  // stripe or gap
    double M_lambda;   // speed-splitting integral at the slaved front
    double M_eps;      // drift-splitting integral scaled by the slow flux
    double lambda_c;   // -eps * M_eps / M_lambda, always negative
};

// Leading-order interface eigenvalue of a pulse.  The stripe reads it off the
// rising front at u_star (slow flux through the dense branch); the gap off
// the falling front at u_hat2 (slow flux through the bare branch).
inline CriticalEigPrediction critical_eig_prediction(OrbitKind family,
                                                     const ModelParams& p) {
    p.require_no_diffusion("critical_eig_prediction");
    double u0 = 0.0, flux = 0.0;
    FrontKind kind{};
    if (family == OrbitKind::stripe) {
        u0 = u_star(p.a, p);
        kind = FrontKind::rise;
        flux = slow_flow_rhs(SlowBranch::dense, u0, p);
    } else if (family == OrbitKind::gap) {
        u0 = u_hat2(p.a, p);
        kind = FrontKind::fall;
        flux = slow_flow_rhs(SlowBranch::bare, u0, p);
    } else {
        throw ConfigError(
            "critical_eig_prediction: only pulse families carry an interface "
            "eigenvalue");
    }
    const auto M = melnikov_integrals(kind, u0, p);
    CriticalEigPrediction out{};
    out.family = family;
    out.M_lambda = M.M_c;
    out.M_eps = flux * M.M_u;
    out.lambda_c = -p.eps * out.M_eps / out.M_lambda;
    if (!(out.lambda_c < 0.0))
        throw SolverError(
            "critical_eig_prediction: predicted eigenvalue is not negative");
    return out;
}

}  // namespace klab
