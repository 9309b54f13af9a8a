#pragma once

// Reaction kinetics, spatially uniform steady states and the parameter-plane
// thresholds of the advection-limited vegetation model
//
//   u_t = (1/eps) u_x + a - u - u v^2            (water)
//   v_t = lap(v) - m v + (1 - b v) u v^2         (biomass)
//
// The saturation factor (1 - b v) caps growth; all structural thresholds of
// the model are functions of the rainfall/mortality ratio a/m and b alone.

#include <array>
#include <cmath>
#include <utility>
#include <vector>

#include "klab/common.hpp"

namespace klab {

struct ModelParams {
    double a;    // rainfall
    double b;    // saturation strength
    double m;    // biomass mortality
    double eps;  // ratio of biomass to water timescales (advection ~ 1/eps)
    double D = 0.0;  // water diffusion; only the 2D simulator accepts D > 0

    double ratio() const { return a / m; }

    void validate() const {
        if (!(a > 0.0) || !(b > 0.0) || !(m > 0.0))
            throw ConfigError("model parameters a, b, m must be positive");
        if (!(eps > 0.0))
            throw ConfigError("eps must be positive");
        if (!(D >= 0.0)) throw ConfigError("D must be nonnegative");
    }

    // Analysis modules are formulated for the advection-only water equation.
    void require_no_diffusion(const char* who) const {
        validate();
        if (D != 0.0)
            throw ConfigError(std::string(who) +
                              " requires D == 0 (water diffusion is a "
                              "simulation-only extension)");
    }
};

inline std::pair<double, double> reaction_terms(double u, double v,
                                                const ModelParams& p) {
    const double g = u * v * v;
    return {p.a - u - g, -p.m * v + (1.0 - p.b * v) * g};
}

enum class SteadyStateKind { desert, vegetated_unstable, vegetated };

struct SteadyState {
    double u = 0.0;
    double v = 0.0;
    SteadyStateKind kind = SteadyStateKind::desert;
    bool degenerate = false;  // saddle-node: the two vegetated states collide
};

// Nontrivial uniform states solve (m + a b) v^2 - a v + m = 0 with
// u = m / ((1 - b v) v).  The larger root is computed without cancellation
// and the smaller one recovered from the product of roots m/(m + a b).
inline std::vector<SteadyState> uniform_steady_states(const ModelParams& p) {
    p.validate();
    std::vector<SteadyState> out;
    out.push_back({p.a, 0.0, SteadyStateKind::desert, false});

    const double c2 = p.m + p.a * p.b;
    const double disc = p.a * p.a - 4.0 * p.m * c2;
    const double scale = std::max(p.a * p.a, 4.0 * p.m * c2);
    const bool degen = std::abs(disc) <= 1e-10 * scale;
    if (disc < 0.0 && !degen) return out;  // desert only

    const double root = degen ? 0.0 : std::sqrt(disc);
    const double v2 = (p.a + root) / (2.0 * c2);
    const double v1 = p.m / (c2 * v2);
    const auto u_of = [&](double v) { return p.m / ((1.0 - p.b * v) * v); };
    out.push_back({u_of(v1), v1, SteadyStateKind::vegetated_unstable, degen});
    out.push_back({u_of(v2), v2, SteadyStateKind::vegetated, degen});
    return out;
}

struct HomogeneousStability {
    double trace;
    double det;
    std::array<double, 2> eig_real;  // real parts, descending
    bool oscillatory;                // complex pair
    bool stable;
};

// Linearization of the kinetics alone (no transport) about a uniform state.
inline HomogeneousStability homogeneous_stability(const SteadyState& s,
                                                  const ModelParams& p) {
    p.validate();
    const double u = s.u, v = s.v;
    const double j11 = -1.0 - v * v;
    const double j12 = -2.0 * u * v;
    const double j21 = (1.0 - p.b * v) * v * v;
    const double j22 = -p.m + (2.0 - 3.0 * p.b * v) * u * v;

    HomogeneousStability r{};
    r.trace = j11 + j22;
    r.det = j11 * j22 - j12 * j21;
    const double h = 0.25 * r.trace * r.trace - r.det;
    if (h >= 0.0) {
        const double s2 = std::sqrt(h);
        r.eig_real = {0.5 * r.trace + s2, 0.5 * r.trace - s2};
        r.oscillatory = false;
    } else {
        r.eig_real = {0.5 * r.trace, 0.5 * r.trace};
        r.oscillatory = true;
    }
    r.stable = (r.trace < 0.0 && r.det > 0.0);
    return r;
}

// Every threshold is a value of a/m.  Order on the a/m axis for b <= 2/3:
//   existence_onset < 9b/2 < 25b/4 (= a_bar_hyp) < 4b + 1/b (= a_bar)
// and for b > 2/3 the fold-touching window closes: a_bar = a_bar_hyp = a_bar_dh.
struct RegimeThresholds {
    double existence_onset;  // vegetated states appear: 2(b + sqrt(1+b^2))
    double loop_stripe;      // stripe loops exist from 9b/2 on
    double fold_jump;        // 25b/4: the stripe jump level hits the fold
    double canard;           // 4b + 1/b: vegetated state crosses the fold
    double a_bar_dh;         // takeoff level meets the jump level
    double a_bar;            // upper end of stripe existence
    double a_bar_hyp;        // upper end of normally hyperbolic stripes
    double loop_gap;         // 9b/2 + 2/b: gap loop speed crosses zero
};

inline RegimeThresholds regime_thresholds(double b, double m) {
    if (!(b > 0.0) || !(m > 0.0))
        throw ConfigError("regime_thresholds: b, m must be positive");
    (void)m;  // thresholds are pure a/m ratios; m kept for call-site symmetry
    RegimeThresholds t{};
    t.existence_onset = 2.0 * (b + std::sqrt(1.0 + b * b));
    t.loop_stripe = 4.5 * b;
    t.fold_jump = 6.25 * b;
    t.canard = 4.0 * b + 1.0 / b;
    t.a_bar_dh = 2.0 * b + 5.0 * std::sqrt(3.0) * b * b /
                     (2.0 * std::sqrt(4.0 + 3.0 * b * b)) +
                 8.0 / std::sqrt(12.0 + 9.0 * b * b);
    const bool narrow = (b <= 2.0 / 3.0);
    t.a_bar = narrow ? t.canard : t.a_bar_dh;
    t.a_bar_hyp = narrow ? t.fold_jump : t.a_bar_dh;
    t.loop_gap = 4.5 * b + 2.0 / b;
    return t;
}

}  // namespace klab
