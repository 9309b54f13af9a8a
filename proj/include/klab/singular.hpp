#pragma once

// Zero-eps skeletons of the traveling structures: the fast (layer) fronts in
// the biomass variable at frozen water level, the slow drift of water along
// the branches of vanishing biomass reaction, and their concatenation into
// stripe pulses, bare gaps and single interfaces.  Everything here is closed
// form except one passage-time quadrature.

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <variant>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "klab/common.hpp"
#include "klab/model.hpp"

namespace klab {

// --- biomass nullcline branches at frozen water level -----------------------

struct VPair {
    double v_minus;
    double v_plus;
    bool at_fold;  // u == 4 b m: the two branches collide at 1/(2b)
};

inline double fold_level(const ModelParams& p) { return 4.0 * p.b * p.m; }

inline VPair v_pm(double u, const ModelParams& p) {
    const double uf = fold_level(p);
    double s = 1.0 - uf / u;
    if (s < 0.0) {
        if (s > -1e-12)
            s = 0.0;
        else
            throw std::domain_error(
                "v_pm: no vegetated branches below the fold level u = 4bm");
    }
    const double r = std::sqrt(s);
    const bool fold = (s < 1e-12);
    return {(1.0 - r) / (2.0 * p.b), (1.0 + r) / (2.0 * p.b), fold};
}

// --- fast fronts at frozen u -------------------------------------------------

// rise: biomass grows from 0 to v_plus(u) along xi; fall: the reverse.
enum class FrontKind { rise, fall };

// Speed of the falling front; the rising one moves with the opposite sign.
inline double front_speed(FrontKind kind, double u, const ModelParams& p) {
    const double uf = fold_level(p);
    double s = u - uf;
    if (s < 0.0) {
        if (s > -1e-12 * std::max(1.0, uf))
            s = 0.0;
        else
            throw std::domain_error("front_speed: u below the fold level 4bm");
    }
    const double c_fall =
        (-std::sqrt(u) + 3.0 * std::sqrt(s)) / (2.0 * std::sqrt(2.0 * p.b));
    return kind == FrontKind::fall ? c_fall : -c_fall;
}

// Interface steepness; front width ~ 1/front_rate.
inline double front_rate(double u, const ModelParams& p) {
    const double vp = v_pm(u, p).v_plus;
    return vp * std::sqrt(u * p.b) / (2.0 * std::sqrt(2.0));
}

struct FrontPoint {
    double v;
    double q;  // dv/dxi
};

inline FrontPoint front_profile(FrontKind kind, double u, const ModelParams& p,
                                double xi) {
    const double vp = v_pm(u, p).v_plus;
    const double k = front_rate(u, p);
    const double th = std::tanh(k * xi);
    // 1 - th*th saturates to zero already for |k xi| > ~19 and would truncate
    // exponentially weighted tail integrals; 1/cosh keeps ~300 more e-folds.
    const double is = 1.0 / std::cosh(k * xi);
    const double sech2 = is * is;
    if (kind == FrontKind::fall)
        return {0.5 * vp * (1.0 - th), -0.5 * vp * k * sech2};
    return {0.5 * vp * (1.0 + th), 0.5 * vp * k * sech2};
}

// --- slow drift of water between jumps --------------------------------------

// bare: v = 0; sparse/dense: lower/upper vegetated branch.
enum class SlowBranch { bare, sparse, dense };

inline double slow_flow_rhs(SlowBranch branch, double u, const ModelParams& p) {
    switch (branch) {
        case SlowBranch::bare:
            return u - p.a;
        case SlowBranch::sparse: {
            const double v = v_pm(u, p).v_minus;
            return u - p.a + u * v * v;
        }
        case SlowBranch::dense: {
            const double v = v_pm(u, p).v_plus;
            return u - p.a + u * v * v;
        }
    }
    return 0.0;  // unreachable
}

// --- matched water levels ----------------------------------------------------

// Level at which the rising front moves exactly as fast as the falling front
// at level a (stripe construction).  Clamps to the fold level once the ratio
// a/m passes 25b/4.
inline double u_star(double a, const ModelParams& p) {
    const double r = a / p.m;
    const auto t = regime_thresholds(p.b, p.m);
    if (r < t.loop_stripe - 1e-14)
        throw WindowError(
            "u_star: jump level would exceed the rainfall level for a/m < 9b/2",
            "loop_stripe");
    if (r >= t.fold_jump) return fold_level(p);
    const double bm = p.b * p.m;
    return (17.0 * a - 18.0 * bm - 15.0 * std::sqrt(a * (a - 4.0 * bm))) / 8.0;
}

inline double u2_level(const ModelParams& p) {
    auto st = uniform_steady_states(p);
    if (st.size() < 3)
        throw WindowError("vegetated uniform state does not exist",
                          "existence_onset");
    return st[2].u;
}

// Takeoff level of the gap loop: the falling front at u_hat2 matches the speed
// of the rising front at u2.
inline double u_hat2(double a, const ModelParams& p) {
    const double r = a / p.m;
    const auto t = regime_thresholds(p.b, p.m);
    if (r < t.canard - 1e-12)
        throw WindowError(
            "u_hat2: vegetated state sits below the fold for a/m < 4b + 1/b",
            "canard");
    ModelParams q = p;
    q.a = a;
    const double u2 = u2_level(q);
    const double bm = p.b * p.m;
    double disc = u2 * (u2 - 4.0 * bm);
    if (disc < 0.0) disc = 0.0;  // u2 -> 4bm at the canard ratio
    return (17.0 * u2 - 18.0 * bm - 15.0 * std::sqrt(disc)) / 8.0;
}

inline double c_star(double a, const ModelParams& p) {
    return front_speed(FrontKind::fall, a, p);
}

inline double c_hat(double a, const ModelParams& p) {
    ModelParams q = p;
    q.a = a;
    return front_speed(FrontKind::rise, u2_level(q), p);
}

// --- singular orbits ---------------------------------------------------------

enum class OrbitKind {
    stripe,            // vegetated pulse on bare ground
    gap,               // bare gap in uniform vegetation
    front_veg_to_bare, // vegetated left, bare right; speed c_star(a)
    front_bare_to_veg, // bare left, vegetated right; speed c_hat(a)
};

inline const char* to_string(OrbitKind k) {
    switch (k) {
        case OrbitKind::stripe: return "stripe";
        case OrbitKind::gap: return "gap";
        case OrbitKind::front_veg_to_bare: return "front_veg_to_bare";
        case OrbitKind::front_bare_to_veg: return "front_bare_to_veg";
    }
    return "?";
}

struct SlowSegment {
    SlowBranch branch;
    double u_from;
    double u_to;
};

struct JumpSegment {
    FrontKind kind;
    double u;
};

using OrbitSegment = std::variant<SlowSegment, JumpSegment>;

struct SingularOrbit {
    OrbitKind kind;
    double speed;
    std::vector<OrbitSegment> segments;
    // Total reduced-flow passage time of the slow segments (finite only for
    // the two pulse types; the fronts park at equilibria).
    double slow_passage = 0.0;
    bool degenerate_boundary = false;  // sits exactly on a window endpoint

    // (u, v) endpoints of every segment in traversal order, for continuity
    // checks and for seeding profiles.
    std::vector<std::array<double, 2>> knots(const ModelParams& p) const {
        std::vector<std::array<double, 2>> k;
        auto v_on = [&](SlowBranch br, double u) {
            if (br == SlowBranch::bare) return 0.0;
            auto vp = v_pm(u, p);
            return br == SlowBranch::dense ? vp.v_plus : vp.v_minus;
        };
        for (const auto& seg : segments) {
            if (std::holds_alternative<SlowSegment>(seg)) {
                const auto& s = std::get<SlowSegment>(seg);
                k.push_back({s.u_from, v_on(s.branch, s.u_from)});
                k.push_back({s.u_to, v_on(s.branch, s.u_to)});
            } else {
                const auto& j = std::get<JumpSegment>(seg);
                const double vp = v_pm(j.u, p).v_plus;
                if (j.kind == FrontKind::rise) {
                    k.push_back({j.u, 0.0});
                    k.push_back({j.u, vp});
                } else {
                    k.push_back({j.u, vp});
                    k.push_back({j.u, 0.0});
                }
            }
        }
        return k;
    }
};

// Reduced-flow passage time of the slow interior of a pulse: quadrature over
// the dense branch for stripes, closed form over the bare branch for gaps.
inline double pulse_length(OrbitKind kind, const ModelParams& p) {
    p.require_no_diffusion("pulse_length");
    const double a = p.a;
    if (kind == OrbitKind::stripe) {
        const double us = u_star(a, p);
        if (std::abs(us - a) < 1e-14 * a) return 0.0;
        // substitute u = us + s^2: near the fold-jump edge us approaches the
        // fold level 4bm, where v_plus has a square-root branch point whose
        // infinite slope at the endpoint defeats plain adaptive quadrature
        auto f = [&](double s) {
            const double u = us + s * s;
            const double g = slow_flow_rhs(SlowBranch::dense, u, p);
            if (!(g > 0.0))
                throw SolverError(
                    "pulse_length: slow flow stalls inside the stripe plateau");
            return 2.0 * s / g;
        };
        double err = 0.0;
        const double val =
            boost::math::quadrature::gauss_kronrod<double, 31>::integrate(
                f, 0.0, std::sqrt(a - us), 12, 1e-12, &err);
        if (!(err < 1e-10 * std::max(1.0, std::abs(val))))
            throw SolverError("pulse_length: quadrature failed to converge");
        return val;
    }
    if (kind == OrbitKind::gap) {
        ModelParams q = p;
        const double u2 = u2_level(q);
        const double uh = u_hat2(a, p);
        if (!(uh < a) || !(u2 < a))
            throw SolverError(
                "pulse_length: gap passage crosses the rainfall equilibrium");
        return std::log((u2 - a) / (uh - a));
    }
    throw ConfigError("pulse_length: only stripe and gap have a finite pulse");
}

inline SingularOrbit build_singular_orbit(OrbitKind kind,
                                          const ModelParams& p) {
    p.require_no_diffusion("build_singular_orbit");
    const double a = p.a;
    const double r = p.ratio();
    const auto t = regime_thresholds(p.b, p.m);
    const double rel = 1e-12;

    SingularOrbit orb;
    orb.kind = kind;

    switch (kind) {
        case OrbitKind::stripe: {
            if (r < t.loop_stripe * (1.0 - rel))
                throw WindowError(
                    "stripe rejected: a/m below 9b/2, no matched jump level",
                    "loop_stripe");
            if (r >= t.a_bar_hyp * (1.0 - rel)) {
                if (p.b <= 2.0 / 3.0)
                    throw WindowError(
                        "stripe rejected: rising front lands on the fold "
                        "(u* = 4bm) for a/m >= 25b/4",
                        "fold_jump");
                throw WindowError(
                    "stripe rejected: blocked by the vegetated state on the "
                    "dense branch (u2 <= u*) for a/m >= a_bar_dh",
                    "a_bar_dh");
            }
            const double us = u_star(a, p);
            orb.speed = c_star(a, p);
            orb.segments = {SlowSegment{SlowBranch::bare, a, us},
                            JumpSegment{FrontKind::rise, us},
                            SlowSegment{SlowBranch::dense, us, a},
                            JumpSegment{FrontKind::fall, a}};
            orb.slow_passage = pulse_length(kind, p);
            orb.degenerate_boundary = std::abs(r - t.loop_stripe) <= rel * r;
            break;
        }
        case OrbitKind::gap: {
            if (r < t.a_bar * (1.0 - rel))
                throw WindowError(
                    "gap rejected: a/m below the lower gap threshold a_bar",
                    p.b <= 2.0 / 3.0 ? "canard" : "a_bar_dh");
            if (r <= t.canard * (1.0 + rel))
                throw WindowError(
                    "gap rejected: vegetated state sits on the fold at the "
                    "canard ratio a/m = 4b + 1/b",
                    "canard");
            if (r > t.loop_gap * (1.0 + rel))
                throw WindowError(
                    "gap rejected: a/m above 9b/2 + 2/b, loop speed would "
                    "reverse",
                    "loop_gap");
            ModelParams q = p;
            const double u2 = u2_level(q);
            const double uh = u_hat2(a, p);
            orb.speed = c_hat(a, p);
            orb.segments = {SlowSegment{SlowBranch::dense, u2, uh},
                            JumpSegment{FrontKind::fall, uh},
                            SlowSegment{SlowBranch::bare, uh, u2},
                            JumpSegment{FrontKind::rise, u2}};
            orb.slow_passage = pulse_length(kind, p);
            orb.degenerate_boundary = std::abs(r - t.loop_gap) <= rel * r;
            break;
        }
        case OrbitKind::front_veg_to_bare: {
            if (r <= t.canard * (1.0 + rel))
                throw WindowError(
                    "front rejected: vegetated state below or on the fold for "
                    "a/m <= 4b + 1/b",
                    "canard");
            ModelParams q = p;
            const double u2 = u2_level(q);
            orb.speed = c_star(a, p);
            orb.segments = {SlowSegment{SlowBranch::dense, u2, a},
                            JumpSegment{FrontKind::fall, a}};
            break;
        }
        case OrbitKind::front_bare_to_veg: {
            if (r <= t.canard * (1.0 + rel))
                throw WindowError(
                    "front rejected: vegetated state below or on the fold for "
                    "a/m <= 4b + 1/b",
                    "canard");
            ModelParams q = p;
            const double u2 = u2_level(q);
            orb.speed = c_hat(a, p);
            orb.segments = {SlowSegment{SlowBranch::bare, a, u2},
                            JumpSegment{FrontKind::rise, u2}};
            orb.degenerate_boundary = std::abs(r - t.loop_gap) <= rel * r;
            break;
        }
    }
    return orb;
}

// --- zero-eps bifurcation diagram -------------------------------------------

struct DiagramPoint {
    OrbitKind family;
    double a_over_m;
    double c;  // NaN outside the family's window
    bool inside_window;
};

struct SingularDiagram {
    std::vector<DiagramPoint> points;
};

namespace detail {

inline bool orbit_exists(OrbitKind k, double ratio, double b, double m) {
    ModelParams p{ratio * m, b, m, 1e-3};
    try {
        (void)build_singular_orbit(k, p);
        return true;
    } catch (const WindowError&) {
        return false;
    }
}

inline double orbit_speed(OrbitKind k, double ratio, double b, double m) {
    ModelParams p{ratio * m, b, m, 1e-3};
    return build_singular_orbit(k, p).speed;
}

}  // namespace detail

// One curve per family over [ratio_lo, ratio_hi]: n grid points each, plus
// window endpoints located by bisection to 1e-8 in a/m.
inline SingularDiagram singular_bifurcation_diagram(double b, double m,
                                                    double ratio_lo,
                                                    double ratio_hi,
                                                    int n = 400) {
    if (!(ratio_hi > ratio_lo) || n < 2)
        throw ConfigError("singular_bifurcation_diagram: bad ratio grid");
    SingularDiagram out;
    const OrbitKind fams[] = {OrbitKind::stripe, OrbitKind::gap,
                              OrbitKind::front_veg_to_bare,
                              OrbitKind::front_bare_to_veg};
    for (OrbitKind fam : fams) {
        std::vector<double> ratios(n);
        for (int i = 0; i < n; ++i)
            ratios[i] = ratio_lo + (ratio_hi - ratio_lo) * i / (n - 1);

        std::vector<bool> inside(n);
        for (int i = 0; i < n; ++i)
            inside[i] = detail::orbit_exists(fam, ratios[i], b, m);

        // refine each window edge and splice the edge points into the grid
        std::vector<double> edges;
        for (int i = 0; i + 1 < n; ++i) {
            if (inside[i] == inside[i + 1]) continue;
            double lo = ratios[i], hi = ratios[i + 1];
            bool lo_in = inside[i];
            while (hi - lo > 1e-8) {
                const double mid = 0.5 * (lo + hi);
                if (detail::orbit_exists(fam, mid, b, m) == lo_in)
                    lo = mid;
                else
                    hi = mid;
            }
            edges.push_back(lo_in ? lo : hi);  // the inside endpoint
        }

        std::size_t next_edge = 0;
        for (int i = 0; i < n; ++i) {
            while (next_edge < edges.size() && edges[next_edge] < ratios[i]) {
                out.points.push_back({fam, edges[next_edge],
                                      detail::orbit_speed(fam, edges[next_edge],
                                                          b, m),
                                      true});
                ++next_edge;
            }
            out.points.push_back(
                {fam, ratios[i],
                 inside[i] ? detail::orbit_speed(fam, ratios[i], b, m)
                           : std::numeric_limits<double>::quiet_NaN(),
                 inside[i]});
        }
        while (next_edge < edges.size()) {
            out.points.push_back({fam, edges[next_edge],
                                  detail::orbit_speed(fam, edges[next_edge], b,
                                                      m),
                                  true});
            ++next_edge;
        }
    }
    return out;
}

}  // namespace klab
