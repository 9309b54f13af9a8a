#pragma once

// Finite-eps traveling waves as collocation boundary-value problems.  The
// wave ODE in the comoving frame xi = x - c t is
//
//   u' = eps/(1+eps c) (u - a + u v^2),   v' = q,
//   q' = m v - (1-b v) u v^2 - c q,
//
// solved here with 3-stage Gauss collocation (order 6) on a nonuniform mesh
// that concentrates cells in the O(1)-wide fronts while the plateaus and the
// O(1/eps) slow tails are covered by geometrically graded cells.  Pulses and
// fronts use projection boundary conditions at truncated ends; the speed c
// (or the period T) is an unknown closed by an integral phase condition.
// Branches in rainfall, period, or speed are traced with pseudo-arclength
// continuation, including fold detection and refinement.

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "klab/common.hpp"
#include "klab/model.hpp"
#include "klab/singular.hpp"

namespace klab {

enum class WaveKind {
    stripe,
    gap,
    front_veg_to_bare,
    front_bare_to_veg,
    periodic,
};

inline const char* to_string(WaveKind k) {
    switch (k) {
        case WaveKind::stripe: return "stripe";
        case WaveKind::gap: return "gap";
        case WaveKind::front_veg_to_bare: return "front_veg_to_bare";
        case WaveKind::front_bare_to_veg: return "front_bare_to_veg";
        case WaveKind::periodic: return "periodic";
    }
    return "?";
}

inline WaveKind wave_kind(OrbitKind k) {
    switch (k) {
        case OrbitKind::stripe: return WaveKind::stripe;
        case OrbitKind::gap: return WaveKind::gap;
        case OrbitKind::front_veg_to_bare: return WaveKind::front_veg_to_bare;
        case OrbitKind::front_bare_to_veg: return WaveKind::front_bare_to_veg;
    }
    return WaveKind::stripe;
}

struct WaveSolveOptions {
    double newton_tol = 1e-10;      // max-norm of the Newton update
    int max_newton = 25;
    double residual_tol = 1e-9;     // accepted collocation residual
    double front_h = 0.15;          // front-zone cell size, units of 1/kappa
    double front_halfwidth = 16.0;  // front zone half width, units of 1/kappa
    double plateau_h = 1.5;         // interior cell cap (widened on long plateaus)
    double tail_decades = 11.5;     // slow-tail e-folds kept before truncation
    double grade_ratio = 1.2;       // geometric growth of graded cells
};

struct TravelingWaveSolution {
    WaveKind kind = WaveKind::stripe;
    ModelParams p{1.0, 0.5, 0.45, 0.01};
    double c = 0.0;
    double T = 0.0;  // period; 0 for non-periodic kinds
    std::vector<double> xi;  // mesh nodes (physical; [0,T] for periodic)
    Eigen::Matrix3Xd y;      // (u, v, q) at the nodes
    double residual_norm = 0.0;
    // c minus the zero-eps orbit speed when solved from a singular seed
    double singular_speed_offset = std::numeric_limits<double>::quiet_NaN();

    Eigen::Vector3d rhs_at(int i) const;
    Eigen::Vector3d value_at(double x) const;  // cubic Hermite between nodes
};

namespace tw_detail {

using V3 = Eigen::Vector3d;
using M3 = Eigen::Matrix3d;

// Gauss-Legendre 3-stage tableau (collocation order 6)
inline constexpr double kS15 = 3.8729833462074168852;  // sqrt(15)
inline constexpr double kC[3] = {0.5 - kS15 / 10.0, 0.5, 0.5 + kS15 / 10.0};
inline constexpr double kA[3][3] = {
    {5.0 / 36.0, 2.0 / 9.0 - kS15 / 15.0, 5.0 / 36.0 - kS15 / 30.0},
    {5.0 / 36.0 + kS15 / 24.0, 2.0 / 9.0, 5.0 / 36.0 - kS15 / 24.0},
    {5.0 / 36.0 + kS15 / 30.0, 2.0 / 9.0 + kS15 / 15.0, 5.0 / 36.0}};
inline constexpr double kB[3] = {5.0 / 18.0, 4.0 / 9.0, 5.0 / 18.0};

inline double eps_tilde(const ModelParams& p, double c) {
    return p.eps / (1.0 + p.eps * c);
}

inline V3 rhs(const V3& y, const ModelParams& p, double c) {
    const double et = eps_tilde(p, c);
    const double u = y[0], v = y[1], q = y[2];
    return {et * (u - p.a + u * v * v), q,
            p.m * v - (1.0 - p.b * v) * u * v * v - c * q};
}

inline M3 rhs_jac(const V3& y, const ModelParams& p, double c) {
    const double et = eps_tilde(p, c);
    const double u = y[0], v = y[1];
    M3 J;
    J << et * (1.0 + v * v), et * 2.0 * u * v, 0.0,
         0.0, 0.0, 1.0,
         -(1.0 - p.b * v) * v * v,
         p.m - 2.0 * u * v + 3.0 * p.b * u * v * v, -c;
    return J;
}

// d(rhs)/dc; uses d(eps_tilde)/dc = -eps_tilde^2
inline V3 rhs_dc(const V3& y, const ModelParams& p, double c) {
    const double et = eps_tilde(p, c);
    const double u = y[0], v = y[1], q = y[2];
    return {-et * et * (u - p.a + u * v * v), 0.0, -q};
}

inline V3 rhs_da(const V3& y, const ModelParams& p, double c) {
    return {-eps_tilde(p, c), 0.0, 0.0};
}

// ---- boundary projections -------------------------------------------------

// Appends rows annihilating the components of (y_end - equilibrium) along
// every left-eigenvector direction whose eigenvalue satisfies
// sign * Re(lambda) > 0.  Complex pairs contribute their real and imaginary
// parts, orthonormalized for conditioning.
inline void end_rows(std::vector<Eigen::RowVector3d>& out, const M3& J,
                     int sign) {
    Eigen::EigenSolver<M3> es(J.transpose());
    if (es.info() != Eigen::Success)
        throw SolverError("boundary eigenproblem failed");
    const auto lam = es.eigenvalues();
    const auto W = es.eigenvectors();

    auto push = [&](const Eigen::Vector3cd& w, bool pair) {
        // deterministic gauge: largest component made real and positive
        int j = 0;
        for (int i = 1; i < 3; ++i)
            if (std::abs(w[i]) > std::abs(w[j]) * (1.0 + 1e-12)) j = i;
        const Eigen::Vector3cd wn = w * (std::conj(w[j]) / std::abs(w[j]));
        Eigen::RowVector3d re = wn.real().transpose();
        const double rn = re.norm();
        if (!(rn > 0.0)) throw SolverError("degenerate boundary eigenvector");
        re /= rn;
        out.push_back(re);
        if (pair) {
            Eigen::RowVector3d im = wn.imag().transpose() / rn;
            im -= im.dot(re) * re;  // orthonormalize within the pair's plane
            const double in = im.norm();
            if (in > 1e-9) out.push_back(im / in);
            else out.push_back(re);  // defective pair; rare and transient
        }
    };

    for (int i = 0; i < 3; ++i) {
        if (!(sign * lam[i].real() > 0.0)) continue;
        const bool cplx =
            std::abs(lam[i].imag()) > 1e-12 * (1.0 + std::abs(lam[i]));
        if (cplx) {
            if (lam[i].imag() < 0.0) continue;  // the conjugate covers it
            push(W.col(i), true);
        } else {
            push(W.col(i).real().cast<std::complex<double>>(), false);
        }
    }
}

struct BoundaryOperator {
    Eigen::Matrix<double, Eigen::Dynamic, 3> left, right;
    V3 eq_left, eq_right;
};

inline V3 vegetated_equilibrium(const ModelParams& p) {
    for (const auto& s : uniform_steady_states(p))
        if (s.kind == SteadyStateKind::vegetated) return {s.u, s.v, 0.0};
    throw WindowError("vegetated uniform state does not exist here", "onset");
}

// Projection boundary conditions: connections leave their left equilibrium
// along its unstable manifold and land on the stable manifold of the right
// one, so the left end kills every stable direction and the right end every
// unstable direction.  Both the desert state (slow unstable, fast saddle)
// and the vegetated state (unstable slow/spiral plane, one stable
// direction) have a 1-dimensional stable and a 2-dimensional unstable
// subspace throughout the parameter windows, which closes the count at
// 1 + 2 = 3 rows.
inline BoundaryOperator boundary_operator(WaveKind kind, const ModelParams& p,
                                          double c) {
    BoundaryOperator bop;
    const V3 desert{p.a, 0.0, 0.0};
    switch (kind) {
        case WaveKind::stripe:
            bop.eq_left = bop.eq_right = desert;
            break;
        case WaveKind::gap:
            bop.eq_left = bop.eq_right = vegetated_equilibrium(p);
            break;
        case WaveKind::front_bare_to_veg:
            bop.eq_left = desert;
            bop.eq_right = vegetated_equilibrium(p);
            break;
        case WaveKind::front_veg_to_bare:
            bop.eq_left = vegetated_equilibrium(p);
            bop.eq_right = desert;
            break;
        case WaveKind::periodic:
            throw ConfigError("periodic waves use periodicity, not projections");
    }
    std::vector<Eigen::RowVector3d> L, R;
    end_rows(L, rhs_jac(bop.eq_left, p, c), -1);
    end_rows(R, rhs_jac(bop.eq_right, p, c), +1);
    if (L.size() != 1 || R.size() != 2)
        throw SolverError(
            "boundary equilibrium lost its saddle splitting (expected 1 "
            "stable and 2 unstable directions)");
    bop.left.resize((int)L.size(), 3);
    for (int i = 0; i < (int)L.size(); ++i) bop.left.row(i) = L[i];
    bop.right.resize((int)R.size(), 3);
    for (int i = 0; i < (int)R.size(); ++i) bop.right.row(i) = R[i];
    return bop;
}

// ---- meshes ---------------------------------------------------------------

// Cell widths covering span, starting near h_near and growing geometrically
// up to h_cap, scaled so they sum to span exactly.
inline std::vector<double> graded_widths(double span, double h_near,
                                         double h_cap, double ratio) {
    std::vector<double> w;
    if (!(span > 0.0)) return w;
    if (span <= h_near * 1.5) {
        w.push_back(span);
        return w;
    }
    double h = h_near, sum = 0.0;
    while (sum < span) {
        w.push_back(h);
        sum += h;
        h = std::min(h * ratio, std::max(h_cap, h_near));
    }
    const double s = span / sum;
    for (double& x : w) x *= s;
    return w;
}

struct WaveStructure {
    int n_fronts = 0;
    double f1 = 0.0, f2 = 0.0;      // front centers, ascending
    double kap1 = 1.0, kap2 = 1.0;  // front decay rates
    double L_left = 0.0, L_right = 0.0;  // tail lengths beyond the zones
    double T = 0.0;                 // period for periodic meshes
};

// Nodes from left to right: graded left tail, uniform front zone(s), graded
// interior, graded right tail.  Front zones are clipped so they never
// swallow the interior when the scale separation is marginal.
inline std::vector<double> build_nodes(const WaveStructure& st,
                                       const WaveSolveOptions& o) {
    std::vector<double> widths;
    double w1 = o.front_halfwidth / st.kap1;
    double w2 = st.n_fronts > 1 ? o.front_halfwidth / st.kap2 : 0.0;
    if (st.n_fronts > 1) {
        const double gapw = st.f2 - st.f1;
        w1 = std::min(w1, 0.42 * gapw);
        w2 = std::min(w2, 0.42 * gapw);
    }
    const double h1 = o.front_h / st.kap1;
    const double h2 = st.n_fronts > 1 ? o.front_h / st.kap2 : h1;

    auto append_reversed = [&](std::vector<double> g) {
        widths.insert(widths.end(), g.rbegin(), g.rend());
    };
    auto append_uniform = [&](double span, double h) {
        const int n = std::max(4, (int)std::ceil(span / h));
        for (int i = 0; i < n; ++i) widths.push_back(span / n);
    };

    // left tail, fine end adjacent to the first front zone
    append_reversed(graded_widths(st.L_left, h1, st.L_left / 40.0,
                                  o.grade_ratio));
    append_uniform(2.0 * w1, h1);
    if (st.n_fronts > 1) {
        const double span = (st.f2 - w2) - (st.f1 + w1);
        if (span > 1e-9) {
            const double hp = std::max(o.plateau_h, span / 80.0);
            auto a = graded_widths(0.5 * span, h1, hp, o.grade_ratio);
            auto b = graded_widths(span - 0.5 * span, h2, hp, o.grade_ratio);
            widths.insert(widths.end(), a.begin(), a.end());
            append_reversed(b);
        }
        append_uniform(2.0 * w2, h2);
    }
    {
        const auto g =
            graded_widths(st.L_right, h2, st.L_right / 40.0, o.grade_ratio);
        widths.insert(widths.end(), g.begin(), g.end());
    }

    std::vector<double> nodes;
    nodes.reserve(widths.size() + 1);
    double x = st.f1 - w1 - st.L_left;
    nodes.push_back(x);
    for (double h : widths) nodes.push_back(x += h);
    return nodes;
}

struct TrainZone {
    double pos = 0.0;  // front center within the cell
    double w = 0.0;    // zone half width
    double h = 0.1;    // cell size inside the zone
};

// Periodic cell [0, T] holding several front zones: uniform inside each zone,
// graded plateau fill between zones and toward both cell ends.
inline std::vector<double> build_train_nodes(const std::vector<TrainZone>& zs,
                                             double T,
                                             const WaveSolveOptions& o) {
    std::vector<double> widths;
    auto append_reversed = [&](std::vector<double> g) {
        widths.insert(widths.end(), g.rbegin(), g.rend());
    };
    auto append_uniform = [&](double span, double h) {
        const int n = std::max(4, (int)std::ceil(span / h));
        for (int i = 0; i < n; ++i) widths.push_back(span / n);
    };
    auto plateau = [&](double span, double hl, double hr) {
        if (span <= 1e-9) return;
        const double hp = std::max(o.plateau_h, span / 80.0);
        auto a = graded_widths(0.5 * span, hl, hp, o.grade_ratio);
        auto b = graded_widths(span - 0.5 * span, hr, hp, o.grade_ratio);
        widths.insert(widths.end(), a.begin(), a.end());
        append_reversed(b);
    };

    {
        const double span = zs.front().pos - zs.front().w;
        append_reversed(graded_widths(span, zs.front().h,
                                      std::max(o.plateau_h, span / 40.0),
                                      o.grade_ratio));
    }
    for (size_t j = 0; j < zs.size(); ++j) {
        append_uniform(2.0 * zs[j].w, zs[j].h);
        if (j + 1 < zs.size())
            plateau((zs[j + 1].pos - zs[j + 1].w) - (zs[j].pos + zs[j].w),
                    zs[j].h, zs[j + 1].h);
    }
    {
        const double span = T - zs.back().pos - zs.back().w;
        const auto g = graded_widths(span, zs.back().h,
                                     std::max(o.plateau_h, span / 40.0),
                                     o.grade_ratio);
        widths.insert(widths.end(), g.begin(), g.end());
    }

    std::vector<double> nodes;
    nodes.reserve(widths.size() + 1);
    double x = 0.0;
    nodes.push_back(x);
    for (double h : widths) nodes.push_back(x += h);
    return nodes;
}

// ---- problem assembly -----------------------------------------------------

enum class VarSel { rainfall, speed, period };

inline const char* to_string(VarSel v) {
    switch (v) {
        case VarSel::rainfall: return "a";
        case VarSel::speed: return "c";
        case VarSel::period: return "T";
    }
    return "?";
}

struct Bvp {
    WaveKind kind;
    ModelParams p;
    double c = 0.0;
    double T = 0.0;
    VarSel free = VarSel::speed;  // the scalar solved alongside the profile
    bool pin_scalar = false;      // flat equilibrium branch: scalar frozen
    double pin_value = 0.0;

    std::vector<double> node;  // xi, or tau in [0,1] for periodic
    int N = 0;
    Eigen::VectorXd z;  // [y_0, S_0, y_1, S_1, ..., y_N, scalar]
    std::vector<V3> g_st, gp_st;  // phase reference at the stages

    // mesh bookkeeping for drift detection during continuation
    double mesh_f1 = 0.0, mesh_f2 = 0.0, mesh_w = 1.0;
    int n_fronts = 0;

    bool periodic() const { return kind == WaveKind::periodic; }
    int nz() const { return 12 * N + 4; }
    int scalar_index() const { return 12 * N + 3; }

    double value(VarSel s) const {
        switch (s) {
            case VarSel::rainfall: return p.a;
            case VarSel::speed: return c;
            case VarSel::period: return T;
        }
        return 0.0;
    }
    void set_value(VarSel s, double v) {
        switch (s) {
            case VarSel::rainfall: p.a = v; break;
            case VarSel::speed: c = v; break;
            case VarSel::period: T = v; break;
        }
    }
    void sync_scalar() { set_value(free, z[scalar_index()]); }

    V3 node_value(int i) const { return z.segment<3>(12 * i); }
    V3 stage_value(int i, int k) const {
        return z.segment<3>(12 * i + 3 + 3 * k);
    }
};

// Residual and Jacobian of the collocation system.  When trips is null only
// the residual is formed.  par_col, if requested, receives d(residual)/d(par)
// for the continuation parameter.
inline void assemble(const Bvp& B, Eigen::VectorXd& F,
                     std::vector<Eigen::Triplet<double>>* trips,
                     std::optional<VarSel> par = std::nullopt,
                     Eigen::VectorXd* par_col = nullptr) {
    const int N = B.N;
    const int ns = B.scalar_index();
    const double theta = B.periodic() ? B.T : 1.0;
    F.setZero(12 * N + 4);
    if (par_col) par_col->setZero(12 * N + 4);
    if (trips) trips->reserve(160 * N + 64);

    auto var_dir = [&](VarSel s, const V3& y) -> V3 {
        // derivative of theta*rhs with respect to the selected scalar
        switch (s) {
            case VarSel::rainfall: return theta * rhs_da(y, B.p, B.c);
            case VarSel::speed: return theta * rhs_dc(y, B.p, B.c);
            case VarSel::period: return rhs(y, B.p, B.c);
        }
        return V3::Zero();
    };

    for (int i = 0; i < N; ++i) {
        const double h = B.node[i + 1] - B.node[i];
        V3 Y[3], f[3];
        M3 Df[3];
        for (int k = 0; k < 3; ++k) {
            Y[k] = B.stage_value(i, k);
            f[k] = rhs(Y[k], B.p, B.c);
            Df[k] = rhs_jac(Y[k], B.p, B.c);
        }
        const V3 yi = B.node_value(i);
        for (int k = 0; k < 3; ++k) {
            const int row = 12 * i + 3 * k;
            V3 r = Y[k] - yi;
            for (int l = 0; l < 3; ++l) r -= h * theta * kA[k][l] * f[l];
            F.segment<3>(row) = r;
            if (trips) {
                for (int rr = 0; rr < 3; ++rr) {
                    trips->emplace_back(row + rr, 12 * i + 3 + 3 * k + rr, 1.0);
                    trips->emplace_back(row + rr, 12 * i + rr, -1.0);
                }
                for (int l = 0; l < 3; ++l) {
                    const M3 Mb = -h * theta * kA[k][l] * Df[l];
                    for (int rr = 0; rr < 3; ++rr)
                        for (int cc = 0; cc < 3; ++cc)
                            trips->emplace_back(row + rr, 12 * i + 3 + 3 * l + cc,
                                                Mb(rr, cc));
                }
                V3 sc = V3::Zero();
                for (int l = 0; l < 3; ++l)
                    sc -= h * kA[k][l] * var_dir(B.free, Y[l]);
                for (int rr = 0; rr < 3; ++rr)
                    trips->emplace_back(row + rr, ns, sc[rr]);
            }
            if (par_col) {
                V3 pc = V3::Zero();
                for (int l = 0; l < 3; ++l)
                    pc -= h * kA[k][l] * var_dir(*par, Y[l]);
                par_col->segment<3>(row) = pc;
            }
        }
        const int row = 12 * i + 9;
        V3 r = B.node_value(i + 1) - yi;
        for (int k = 0; k < 3; ++k) r -= h * theta * kB[k] * f[k];
        F.segment<3>(row) = r;
        if (trips) {
            for (int rr = 0; rr < 3; ++rr) {
                trips->emplace_back(row + rr, 12 * (i + 1) + rr, 1.0);
                trips->emplace_back(row + rr, 12 * i + rr, -1.0);
            }
            for (int k = 0; k < 3; ++k) {
                const M3 Mb = -h * theta * kB[k] * Df[k];
                for (int rr = 0; rr < 3; ++rr)
                    for (int cc = 0; cc < 3; ++cc)
                        trips->emplace_back(row + rr, 12 * i + 3 + 3 * k + cc,
                                            Mb(rr, cc));
            }
            V3 sc = V3::Zero();
            for (int k = 0; k < 3; ++k) sc -= h * kB[k] * var_dir(B.free, Y[k]);
            for (int rr = 0; rr < 3; ++rr)
                trips->emplace_back(row + rr, ns, sc[rr]);
        }
        if (par_col) {
            V3 pc = V3::Zero();
            for (int k = 0; k < 3; ++k) pc -= h * kB[k] * var_dir(*par, Y[k]);
            par_col->segment<3>(row) = pc;
        }
    }

    // side conditions
    const int rb = 12 * N;
    if (B.periodic()) {
        const V3 d = B.node_value(N) - B.node_value(0);
        F.segment<3>(rb) = d;
        if (trips)
            for (int rr = 0; rr < 3; ++rr) {
                trips->emplace_back(rb + rr, 12 * N + rr, 1.0);
                trips->emplace_back(rb + rr, rr, -1.0);
            }
    } else {
        auto bc_residual = [&](double a_val, double c_val) {
            ModelParams pp = B.p;
            pp.a = a_val;
            const BoundaryOperator bop = boundary_operator(B.kind, pp, c_val);
            Eigen::VectorXd r(3);
            int k = 0;
            const V3 y0 = B.node_value(0), yN = B.node_value(N);
            for (int i = 0; i < bop.left.rows(); ++i, ++k)
                r[k] = bop.left.row(i).dot(y0 - bop.eq_left);
            for (int i = 0; i < bop.right.rows(); ++i, ++k)
                r[k] = bop.right.row(i).dot(yN - bop.eq_right);
            return std::pair<Eigen::VectorXd, BoundaryOperator>(r, bop);
        };
        auto [r0, bop] = bc_residual(B.p.a, B.c);
        F.segment<3>(rb) = r0;
        if (trips) {
            int k = 0;
            for (int i = 0; i < bop.left.rows(); ++i, ++k)
                for (int cc = 0; cc < 3; ++cc)
                    trips->emplace_back(rb + k, cc, bop.left(i, cc));
            for (int i = 0; i < bop.right.rows(); ++i, ++k)
                for (int cc = 0; cc < 3; ++cc)
                    trips->emplace_back(rb + k, 12 * N + cc, bop.right(i, cc));
            if (B.free == VarSel::speed || B.free == VarSel::rainfall) {
                const double base = B.value(B.free);
                const double d = 1e-6 * (1.0 + std::abs(base));
                const double ap = B.free == VarSel::rainfall ? base + d : B.p.a;
                const double am = B.free == VarSel::rainfall ? base - d : B.p.a;
                const double cp = B.free == VarSel::speed ? base + d : B.c;
                const double cm = B.free == VarSel::speed ? base - d : B.c;
                const Eigen::VectorXd col =
                    (bc_residual(ap, cp).first - bc_residual(am, cm).first) /
                    (2.0 * d);
                for (int rr = 0; rr < 3; ++rr)
                    trips->emplace_back(rb + rr, ns, col[rr]);
            }
        }
        if (par_col && (*par == VarSel::speed || *par == VarSel::rainfall)) {
            const double base = B.value(*par);
            const double d = 1e-6 * (1.0 + std::abs(base));
            const double ap = *par == VarSel::rainfall ? base + d : B.p.a;
            const double am = *par == VarSel::rainfall ? base - d : B.p.a;
            const double cp = *par == VarSel::speed ? base + d : B.c;
            const double cm = *par == VarSel::speed ? base - d : B.c;
            par_col->segment<3>(rb) =
                (bc_residual(ap, cp).first - bc_residual(am, cm).first) /
                (2.0 * d);
        }
    }

    // phase condition
    const int rp = 12 * N + 3;
    if (B.pin_scalar) {
        F[rp] = B.z[ns] - B.pin_value;
        if (trips) trips->emplace_back(rp, ns, 1.0);
    } else {
        double acc = 0.0;
        for (int i = 0; i < N; ++i) {
            const double h = B.node[i + 1] - B.node[i];
            for (int k = 0; k < 3; ++k) {
                const int j = 3 * i + k;
                const V3 d = B.stage_value(i, k) - B.g_st[j];
                acc += h * kB[k] * d.dot(B.gp_st[j]);
                if (trips)
                    for (int cc = 0; cc < 3; ++cc)
                        trips->emplace_back(rp, 12 * i + 3 + 3 * k + cc,
                                            h * kB[k] * B.gp_st[j][cc]);
            }
        }
        F[rp] = acc;
    }
}

inline double collocation_residual(const Bvp& B, const Eigen::VectorXd& F) {
    const double theta = B.periodic() ? B.T : 1.0;
    double r = 0.0;
    for (int i = 0; i < B.N; ++i) {
        const double h = (B.node[i + 1] - B.node[i]) * theta;
        for (int k = 0; k < 9; ++k)
            r = std::max(r, std::abs(F[12 * i + k]) / h);
    }
    return r;
}

struct NewtonReport {
    int iterations = 0;
    double residual = 0.0;  // final max-norm of the algebraic system
};

inline NewtonReport newton_solve(Bvp& B, const WaveSolveOptions& o) {
    const int n = B.nz();
    Eigen::VectorXd F;
    std::vector<Eigen::Triplet<double>> trips;
    Eigen::SparseMatrix<double> J(n, n);
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
    NewtonReport rep;

    // Full Newton steps; the max-norm residual routinely grows for an
    // iteration or two while the profile reshapes, so damping only kicks in
    // against outright blowup.
    double fn = 0.0, f0 = -1.0;
    for (int it = 0; it < o.max_newton; ++it) {
        rep.iterations = it + 1;
        trips.clear();
        assemble(B, F, &trips);
        fn = F.lpNorm<Eigen::Infinity>();
        if (f0 < 0.0) f0 = fn;
        if (fn > 1e4 * (f0 + 1.0))
            throw SolverError("Newton residual diverged to " +
                              std::to_string(fn));
        J.setFromTriplets(trips.begin(), trips.end());
        lu.compute(J);
        if (lu.info() != Eigen::Success)
            throw SolverError("collocation Jacobian factorization failed");
        const Eigen::VectorXd dz = lu.solve(-F);

        double lam = 1.0, fnew = 0.0;
        const Eigen::VectorXd z_old = B.z;
        bool accepted = false;
        for (int half = 0; half < 5; ++half, lam *= 0.5) {
            B.z = z_old + lam * dz;
            B.sync_scalar();
            Eigen::VectorXd Ft;
            assemble(B, Ft, nullptr);
            fnew = Ft.lpNorm<Eigen::Infinity>();
            if (fnew <= 100.0 * fn + 1e-12 && std::isfinite(fnew)) {
                accepted = true;
                break;
            }
        }
        if (!accepted) {
            B.z = z_old;
            B.sync_scalar();
            throw SolverError("Newton step rejected; residual " +
                              std::to_string(fn));
        }
        if (lam * dz.lpNorm<Eigen::Infinity>() <
            o.newton_tol * (1.0 + B.z.lpNorm<Eigen::Infinity>())) {
            rep.residual = fnew;
            return rep;
        }
    }
    throw SolverError("Newton did not converge in " +
                      std::to_string(o.max_newton) + " iterations; residual " +
                      std::to_string(fn));
}

// ---- guess construction ---------------------------------------------------

// March u along a slow branch with the reduced flow u' = et*g(u), filling
// values at the given ascending points; anchor carries the known value.
inline std::vector<double> march_slow(SlowBranch br, const ModelParams& p,
                                      double et, double u_anchor,
                                      const std::vector<double>& pts,
                                      int anchor) {
    std::vector<double> u(pts.size());
    const double lo = fold_level(p) * (1.0 + 1e-12);
    auto g = [&](double uu) {
        return et * slow_flow_rhs(br, std::max(uu, lo), p);
    };
    auto rk4 = [&](double uu, double hh) {
        const double k1 = g(uu);
        const double k2 = g(uu + 0.5 * hh * k1);
        const double k3 = g(uu + 0.5 * hh * k2);
        const double k4 = g(uu + hh * k3);
        return std::max(uu + hh / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4), lo);
    };
    auto step = [&](double uu, double from, double to) {
        const int nsub =
            std::max(1, (int)std::ceil(std::abs(to - from) * et / 0.1));
        const double hh = (to - from) / nsub;
        for (int s = 0; s < nsub; ++s) uu = rk4(uu, hh);
        return uu;
    };
    u[anchor] = u_anchor;
    for (size_t i = anchor + 1; i < pts.size(); ++i)
        u[i] = step(u[i - 1], pts[i - 1], pts[i]);
    for (int i = anchor - 1; i >= 0; --i)
        u[i] = step(u[i + 1], pts[i + 1], pts[i]);
    return u;
}

// Length of the slow approach from u_eq to u_end along a branch, cut off
// after `decades` e-folds of the remaining gap.
inline double slow_transit_length(SlowBranch br, const ModelParams& p,
                                  double et, double u_eq, double u_end,
                                  double decades) {
    const double cut = std::abs(u_end - u_eq) * std::exp(-decades);
    auto g = [&](double uu) { return et * slow_flow_rhs(br, uu, p); };
    double u = u_end, xi = 0.0;
    const double hmax = 0.25 / et;
    for (int it = 0; it < 100000; ++it) {
        if (std::abs(u - u_eq) <= cut) return xi;
        // local rate limits the backward step
        const double rate = std::abs(g(u)) / std::max(std::abs(u - u_eq), cut);
        double h = std::min(hmax, 0.2 / std::max(rate, 1e-12));
        const double k1 = g(u);
        const double k2 = g(u - 0.5 * h * k1);
        const double k3 = g(u - 0.5 * h * k2);
        const double k4 = g(u - h * k3);
        u -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        xi += h;
    }
    throw SolverError("slow transit march failed to reach the equilibrium");
}

// All evaluation points of a mesh (nodes and Gauss stages), ascending:
// index 4i is node i, indices 4i+1..4i+3 its stages; last entry node N.
inline std::vector<double> eval_points(const std::vector<double>& nodes) {
    const int N = (int)nodes.size() - 1;
    std::vector<double> pts;
    pts.reserve(4 * N + 1);
    for (int i = 0; i < N; ++i) {
        const double h = nodes[i + 1] - nodes[i];
        pts.push_back(nodes[i]);
        for (int k = 0; k < 3; ++k) pts.push_back(nodes[i] + kC[k] * h);
    }
    pts.push_back(nodes[N]);
    return pts;
}

inline void pack(Bvp& B, const std::vector<V3>& vals, double scalar0) {
    const int N = B.N;
    B.z.resize(B.nz());
    for (int i = 0; i < N; ++i) {
        B.z.segment<3>(12 * i) = vals[4 * i];
        for (int k = 0; k < 3; ++k)
            B.z.segment<3>(12 * i + 3 + 3 * k) = vals[4 * i + 1 + k];
    }
    B.z.segment<3>(12 * N) = vals[4 * N];
    B.z[B.scalar_index()] = scalar0;
    B.sync_scalar();
    // phase reference from the same profile
    B.g_st.resize(3 * N);
    B.gp_st.resize(3 * N);
    const double theta = B.periodic() ? B.T : 1.0;
    for (int i = 0; i < N; ++i)
        for (int k = 0; k < 3; ++k) {
            B.g_st[3 * i + k] = vals[4 * i + 1 + k];
            B.gp_st[3 * i + k] = theta * rhs(vals[4 * i + 1 + k], B.p, B.c);
        }
}

inline void reanchor_phase(Bvp& B) {
    const int N = B.N;
    const double theta = B.periodic() ? B.T : 1.0;
    for (int i = 0; i < N; ++i)
        for (int k = 0; k < 3; ++k) {
            const V3 y = B.stage_value(i, k);
            B.g_st[3 * i + k] = y;
            B.gp_st[3 * i + k] = theta * rhs(y, B.p, B.c);
        }
}

// Composite zero-eps profile evaluated on a set of points; the workhorse of
// the initial guesses.  Front pieces are the layer tanh profiles, slow
// pieces ride the appropriate branch.
inline std::vector<V3> singular_profile(WaveKind kind, const ModelParams& p,
                                        double c0, double f2,
                                        const std::vector<double>& pts) {
    const double et = eps_tilde(p, c0);
    const int n = (int)pts.size();
    std::vector<V3> out(n);

    auto dense_v = [&](double u) {
        const auto vp = v_pm(u, p);
        return vp.v_plus;
    };
    auto dense_q = [&](double u) {
        // chain rule along the plateau: q = dv/du * du/dxi
        const double d = 1e-7 * std::max(1.0, u);
        const double dv =
            (dense_v(std::min(u + d, u * 2)) - dense_v(std::max(u - d, fold_level(p) * (1 + 1e-9)))) /
            (2.0 * d);
        return dv * et * slow_flow_rhs(SlowBranch::dense, u, p);
    };

    switch (kind) {
        case WaveKind::stripe: {
            const double us = u_star(p.a, p);
            const double mid = 0.5 * f2;
            // u: exact exponential on the bare tail, marched on the plateau;
            // the march anchors at the rise front where u = u*
            int i0 = 0;
            while (i0 < n && pts[i0] < 0.0) ++i0;
            std::vector<double> plateau;
            plateau.push_back(0.0);
            for (int i = i0; i < n; ++i)
                plateau.push_back(std::min(pts[i], f2));
            const auto up =
                march_slow(SlowBranch::dense, p, et, us, plateau, 0);
            for (int i = 0; i < n; ++i) {
                const double x = pts[i];
                double u;
                if (x < 0.0)
                    u = p.a + (us - p.a) * std::exp(et * x);
                else if (x <= f2)
                    u = up[i - i0 + 1];
                else
                    u = p.a;
                double v, q;
                if (x <= mid) {
                    const auto fp = front_profile(FrontKind::rise, us, p, x);
                    v = fp.v, q = fp.q;
                } else {
                    const auto fp = front_profile(FrontKind::fall, p.a, p, x - f2);
                    v = fp.v, q = fp.q;
                }
                // ride the plateau level between the fronts
                if (x > 8.0 / front_rate(us, p) && x < f2 - 8.0 / front_rate(p.a, p)) {
                    v = dense_v(u);
                    q = dense_q(u);
                }
                out[i] = {u, v, q};
            }
            break;
        }
        case WaveKind::gap: {
            const double u2 = u2_level(p);
            const double uh = u_hat2(p.a, p);
            int i0 = 0;
            while (i0 < n && pts[i0] < 0.0) ++i0;
            // left of the fall front: dense branch marched backward from uh
            std::vector<double> left(pts.begin(), pts.begin() + i0);
            std::vector<double> ul;
            if (!left.empty()) {
                left.push_back(0.0);
                ul = march_slow(SlowBranch::dense, p, et, uh, left,
                                (int)left.size() - 1);
                ul.pop_back();
            }
            const double mid = 0.5 * f2;
            for (int i = 0; i < n; ++i) {
                const double x = pts[i];
                double u, v, q;
                if (x < 0.0)
                    u = ul[i];
                else if (x <= f2)
                    u = p.a + (uh - p.a) * std::exp(et * x);
                else
                    u = u2;
                if (x <= mid) {
                    const auto fp = front_profile(FrontKind::fall, uh, p, x);
                    v = fp.v, q = fp.q;
                } else {
                    const auto fp = front_profile(FrontKind::rise, u2, p, x - f2);
                    v = fp.v, q = fp.q;
                }
                if (x < -8.0 / front_rate(uh, p)) {
                    v = dense_v(u);
                    q = dense_q(u);
                }
                out[i] = {u, v, q};
            }
            break;
        }
        case WaveKind::front_bare_to_veg: {
            const double u2 = u2_level(p);
            for (int i = 0; i < n; ++i) {
                const double x = pts[i];
                const double u =
                    x < 0.0 ? p.a + (u2 - p.a) * std::exp(et * x) : u2;
                const auto fp = front_profile(FrontKind::rise, u2, p, x);
                out[i] = {u, fp.v, fp.q};
            }
            break;
        }
        case WaveKind::front_veg_to_bare: {
            int i0 = 0;
            while (i0 < n && pts[i0] < 0.0) ++i0;
            std::vector<double> left(pts.begin(), pts.begin() + i0);
            std::vector<double> ul;
            if (!left.empty()) {
                left.push_back(0.0);
                ul = march_slow(SlowBranch::dense, p, et, p.a, left,
                                (int)left.size() - 1);
                ul.pop_back();
            }
            for (int i = 0; i < n; ++i) {
                const double x = pts[i];
                const double u = x < 0.0 ? ul[i] : p.a;
                const auto fp = front_profile(FrontKind::fall, p.a, p, x);
                double v = fp.v, q = fp.q;
                if (x < -8.0 / front_rate(p.a, p)) {
                    v = dense_v(u);
                    q = dense_q(u);
                }
                out[i] = {u, v, q};
            }
            break;
        }
        case WaveKind::periodic:
            throw ConfigError("periodic guesses wrap an existing pulse");
    }
    return out;
}

inline double desert_fast_stable_rate(const ModelParams& p, double c) {
    return 0.5 * (c + std::sqrt(c * c + 4.0 * p.m));  // |mu_minus|
}

// Decay rate of the stable subspace at the vegetated state; sizes the tail
// on sides that land there.
inline double veg_stable_rate(const ModelParams& p, double c) {
    const V3 veg = vegetated_equilibrium(p);
    Eigen::EigenSolver<M3> es(rhs_jac(veg, p, c));
    double r = 0.0;
    for (int i = 0; i < 3; ++i)
        r = std::min(r, es.eigenvalues()[i].real());
    if (!(r < 0.0))
        throw SolverError("vegetated state has no stable direction");
    return std::max(-r, 0.1);
}

inline Bvp bvp_from_singular(WaveKind kind, const ModelParams& p,
                             const SingularOrbit& orb,
                             const WaveSolveOptions& o) {
    p.validate();
    p.require_no_diffusion("solve_wave");
    if (wave_kind(orb.kind) != kind)
        throw ConfigError("singular seed kind does not match the requested wave");
    const double c0 = orb.speed;
    const double et = eps_tilde(p, c0);

    Bvp B;
    B.kind = kind;
    B.p = p;
    B.c = c0;
    B.free = VarSel::speed;

    WaveStructure st;
    switch (kind) {
        case WaveKind::stripe: {
            const double us = u_star(p.a, p);
            st.n_fronts = 2;
            st.f1 = 0.0;
            st.f2 = orb.slow_passage / et;
            st.kap1 = front_rate(us, p);
            st.kap2 = front_rate(p.a, p);
            st.L_left = o.tail_decades / et;
            st.L_right = 30.0 / desert_fast_stable_rate(p, c0);
            break;
        }
        case WaveKind::gap: {
            const double u2 = u2_level(p);
            const double uh = u_hat2(p.a, p);
            st.n_fronts = 2;
            st.f1 = 0.0;
            st.f2 = orb.slow_passage / et;
            st.kap1 = front_rate(uh, p);
            st.kap2 = front_rate(u2, p);
            st.L_left = slow_transit_length(SlowBranch::dense, p, et, u2, uh,
                                            o.tail_decades);
            st.L_right = 30.0 / veg_stable_rate(p, c0);
            break;
        }
        case WaveKind::front_bare_to_veg: {
            const double u2 = u2_level(p);
            st.n_fronts = 1;
            st.f1 = 0.0;
            st.kap1 = st.kap2 = front_rate(u2, p);
            st.L_left = o.tail_decades / et;
            st.L_right = 30.0 / veg_stable_rate(p, c0);
            break;
        }
        case WaveKind::front_veg_to_bare: {
            const double u2 = u2_level(p);
            st.n_fronts = 1;
            st.f1 = 0.0;
            st.kap1 = st.kap2 = front_rate(p.a, p);
            st.L_left = slow_transit_length(SlowBranch::dense, p, et, u2, p.a,
                                            o.tail_decades);
            st.L_right = 30.0 / desert_fast_stable_rate(p, c0);
            break;
        }
        case WaveKind::periodic:
            throw ConfigError("periodic waves start from a wrapped pulse");
    }

    B.node = build_nodes(st, o);
    B.N = (int)B.node.size() - 1;
    B.mesh_f1 = st.f1;
    B.mesh_f2 = st.f2;
    B.mesh_w = o.front_halfwidth / st.kap1;
    B.n_fronts = st.n_fronts;

    const auto pts = eval_points(B.node);
    const auto vals = singular_profile(kind, p, c0, st.f2, pts);
    pack(B, vals, c0);
    return B;
}

struct FrontPeak {
    double xi = 0.0;
    double u = 0.0;
    bool is_rise = false;
};

// Front centers of a computed profile: the rise layer is the maximum of q,
// the fall layer the minimum, which separates the two even when their tails
// overlap.  Empty when the profile is flat (an equilibrium branch).
inline std::vector<FrontPeak> detect_fronts(const TravelingWaveSolution& s) {
    const int n = (int)s.xi.size();
    int i_plus = 0, i_minus = 0;
    for (int i = 0; i < n; ++i) {
        if (s.y(2, i) > s.y(2, i_plus)) i_plus = i;
        if (s.y(2, i) < s.y(2, i_minus)) i_minus = i;
    }
    const double q_plus = s.y(2, i_plus), q_minus = s.y(2, i_minus);
    const double qmax = std::max(q_plus, -q_minus);
    if (qmax < 1e-7) return {};

    auto refine = [&](int j, bool is_rise) {
        FrontPeak fp;
        fp.u = s.y(0, j);
        fp.is_rise = is_rise;
        if (j == 0 || j == n - 1) {
            fp.xi = s.xi[j];
            return fp;
        }
        const double y0 = std::abs(s.y(2, j - 1)), y1 = std::abs(s.y(2, j)),
                     y2 = std::abs(s.y(2, j + 1));
        const double h1 = s.xi[j] - s.xi[j - 1], h2 = s.xi[j + 1] - s.xi[j];
        double shift = 0.0;
        const double denom = h2 * (y1 - y0) + h1 * (y1 - y2);
        if (std::abs(denom) > 1e-300)
            shift = 0.5 * (h2 * h2 * (y1 - y0) - h1 * h1 * (y1 - y2)) / denom;
        fp.xi = s.xi[j] + std::clamp(shift, -h1, h2);
        return fp;
    };

    // a lone front leaves the opposite-sign extremum at tail-ringing level
    const bool has_rise = q_plus > 1e-3 * qmax;
    const bool has_fall = -q_minus > 1e-3 * qmax;
    std::vector<FrontPeak> peaks;
    if (has_rise) peaks.push_back(refine(i_plus, true));
    if (has_fall) peaks.push_back(refine(i_minus, false));

    // multi-pulse trains: any interior extremum of comparable strength to its
    // own sign class is another layer; weak shoulders stay below the cut
    for (int i = 1; i + 1 < n; ++i) {
        const double q = s.y(2, i);
        if (has_rise && i != i_plus && q >= 0.3 * q_plus &&
            q > s.y(2, i - 1) && q >= s.y(2, i + 1))
            peaks.push_back(refine(i, true));
        else if (has_fall && i != i_minus && q <= 0.3 * q_minus &&
                 q < s.y(2, i - 1) && q <= s.y(2, i + 1))
            peaks.push_back(refine(i, false));
    }
    std::sort(peaks.begin(), peaks.end(),
              [](const FrontPeak& a, const FrontPeak& b) { return a.xi < b.xi; });

    // merge same-sign peaks within a few layer widths (flat tops, ringing)
    std::vector<FrontPeak> out;
    for (const auto& fp : peaks) {
        bool merged = false;
        for (auto& kept : out) {
            if (kept.is_rise != fp.is_rise) continue;
            const double kap = front_rate(
                std::max(std::min(fp.u, kept.u), fold_level(s.p) * 1.01), s.p);
            if (std::abs(fp.xi - kept.xi) < 3.0 / kap) {
                const double a = std::abs(s.value_at(kept.xi)[2]);
                const double b = std::abs(s.value_at(fp.xi)[2]);
                if (b > a) kept = fp;
                merged = true;
                break;
            }
        }
        if (!merged) out.push_back(fp);
    }
    return out;
}

inline V3 hermite_eval(const TravelingWaveSolution& s, double x) {
    return s.value_at(x);
}

inline Bvp bvp_periodic_wrap(const ModelParams& p, double T,
                             const TravelingWaveSolution& pulse,
                             const WaveSolveOptions& o, VarSel free_scalar);

// Restart problem: remesh around the detected fronts of an existing profile
// and interpolate it over.  Tail lengths keep whatever the guess provided,
// widened if the current decay rates require more room.
inline Bvp bvp_from_solution(WaveKind kind, const ModelParams& p,
                             const TravelingWaveSolution& guess,
                             const WaveSolveOptions& o, VarSel free_scalar) {
    p.validate();
    p.require_no_diffusion("solve_wave");
    Bvp B;
    B.kind = kind;
    B.p = p;
    B.c = guess.c;
    B.T = guess.T;
    B.free = free_scalar;

    auto peaks = detect_fronts(guess);
    const bool single_front = kind == WaveKind::front_bare_to_veg ||
                              kind == WaveKind::front_veg_to_bare;
    if (single_front && peaks.size() > 1) {
        // keep the dominant layer only; satellites are tail ringing
        auto strongest = peaks.begin();
        double best = 0.0;
        for (auto it = peaks.begin(); it != peaks.end(); ++it) {
            const double mag = std::abs(guess.value_at(it->xi)[2]);
            if (mag > best) {
                best = mag;
                strongest = it;
            }
        }
        peaks = {*strongest};
    }

    if (kind != WaveKind::periodic) {
        if (peaks.empty()) {
            // flat equilibrium profile: keep its mesh, pin the scalar
            B.node = guess.xi;
            B.N = (int)B.node.size() - 1;
            B.pin_scalar = true;
            B.pin_value = B.value(free_scalar);
            const auto pts = eval_points(B.node);
            std::vector<V3> vals(pts.size());
            for (size_t i = 0; i < pts.size(); ++i)
                vals[i] = hermite_eval(guess, pts[i]);
            pack(B, vals, B.pin_value);
            return B;
        }

        WaveStructure st;
        st.n_fronts = (int)peaks.size();
        st.f1 = peaks.front().xi;
        st.f2 = peaks.back().xi;
        st.kap1 = front_rate(std::max(peaks.front().u, fold_level(p) * 1.01), p);
        st.kap2 = front_rate(std::max(peaks.back().u, fold_level(p) * 1.01), p);
        const double et = eps_tilde(p, B.c);

        const double reused_left = st.f1 - guess.xi.front();
        const double reused_right = guess.xi.back() - st.f2;
        double need_left = o.tail_decades / et;
        double need_right = 20.0;
        try {
            switch (kind) {
                case WaveKind::stripe:
                    need_right = 30.0 / desert_fast_stable_rate(p, B.c);
                    break;
                case WaveKind::gap:
                    need_left = slow_transit_length(
                        SlowBranch::dense, p, et, u2_level(p), u_hat2(p.a, p),
                        o.tail_decades);
                    need_right = 30.0 / veg_stable_rate(p, B.c);
                    break;
                case WaveKind::front_bare_to_veg:
                    need_right = 30.0 / veg_stable_rate(p, B.c);
                    break;
                case WaveKind::front_veg_to_bare:
                    need_left = slow_transit_length(SlowBranch::dense, p, et,
                                                    u2_level(p), p.a,
                                                    o.tail_decades);
                    need_right = 30.0 / desert_fast_stable_rate(p, B.c);
                    break;
                default: break;
            }
        } catch (const std::exception&) {
            // window edge during continuation; the reused lengths stand
            need_left = reused_left;
            need_right = reused_right;
        }
        st.L_left = std::max(reused_left, need_left);
        st.L_right = std::max(reused_right, need_right);

        B.node = build_nodes(st, o);
        B.N = (int)B.node.size() - 1;
        B.mesh_f1 = st.f1;
        B.mesh_f2 = st.f2;
        B.mesh_w = o.front_halfwidth / st.kap1;
        B.n_fronts = st.n_fronts;
    } else {
        if (!(guess.T > 0.0))
            throw ConfigError("periodic restart requires a periodic guess");
        // recenter the pulse in its own cell; handles drifted fronts too
        return bvp_periodic_wrap(p, guess.T, guess, o, free_scalar);
    }

    const auto pts = eval_points(B.node);
    std::vector<V3> vals(pts.size());
    for (size_t i = 0; i < pts.size(); ++i)
        vals[i] = hermite_eval(guess, pts[i]);
    pack(B, vals, B.value(free_scalar));
    return B;
}

// Wrap a converged pulse into one spatial period T: the pulse keeps its
// shape, the background absorbs the rest of the cell.  A periodic source is
// sampled modulo its own period, so drifted profiles recenter cleanly.
inline Bvp bvp_periodic_wrap(const ModelParams& p, double T,
                             const TravelingWaveSolution& pulse,
                             const WaveSolveOptions& o, VarSel free_scalar) {
    p.validate();
    p.require_no_diffusion("solve_periodic");
    const auto peaks = detect_fronts(pulse);
    if (peaks.size() < 2)
        throw ConfigError("periodic wrap needs a two-front pulse as seed");

    Bvp B;
    B.kind = WaveKind::periodic;
    B.p = p;
    B.c = pulse.c;
    B.T = T;
    B.free = free_scalar;

    double shift = 0.0;
    if (peaks.size() == 2) {
        const double gap = peaks.back().xi - peaks.front().xi;
        const double kap1 =
            front_rate(std::max(peaks.front().u, fold_level(p) * 1.01), p);
        const double kap2 =
            front_rate(std::max(peaks.back().u, fold_level(p) * 1.01), p);
        const double w1 = std::min(o.front_halfwidth / kap1, 0.42 * gap);
        const double w2 = std::min(o.front_halfwidth / kap2, 0.42 * gap);
        const double pulse_span = gap + w1 + w2;
        if (!(T > pulse_span * 1.05))
            throw ConfigError("period too short for the seed pulse");

        WaveStructure st;
        st.T = T;
        st.n_fronts = 2;
        st.f1 = 0.5 * (T - pulse_span) + w1;
        st.f2 = st.f1 + gap;
        st.kap1 = kap1;
        st.kap2 = kap2;
        st.L_left = st.f1 - w1;
        st.L_right = T - st.f2 - w2;
        auto nodes = build_nodes(st, o);
        for (double& x : nodes) x /= T;
        nodes.front() = 0.0;
        nodes.back() = 1.0;
        B.node = nodes;
        B.N = (int)B.node.size() - 1;
        B.mesh_f1 = st.f1 / T;
        B.mesh_f2 = st.f2 / T;
        B.mesh_w = w1 / T;
        B.n_fronts = 2;
        shift = peaks.front().xi - st.f1;
    } else {
        // multi-pulse train: a zone around every layer, cyclic gap clipping
        const int K = (int)peaks.size();
        std::vector<double> rel(K), kap(K);
        for (int j = 0; j < K; ++j) {
            rel[j] = peaks[j].xi - peaks.front().xi;
            kap[j] =
                front_rate(std::max(peaks[j].u, fold_level(p) * 1.01), p);
        }
        const double g_wrap = T - rel.back();
        if (!(g_wrap > 1.0 / *std::min_element(kap.begin(), kap.end())))
            throw ConfigError("period too short for the seed train");
        std::vector<TrainZone> zs(K);
        for (int j = 0; j < K; ++j) {
            const double gl = j == 0 ? g_wrap : rel[j] - rel[j - 1];
            const double gr = j + 1 < K ? rel[j + 1] - rel[j] : g_wrap;
            zs[j].pos = rel[j] + 0.5 * g_wrap;
            zs[j].w = std::min(o.front_halfwidth / kap[j],
                               0.42 * std::min(gl, gr));
            zs[j].h = o.front_h / kap[j];
        }
        auto nodes = build_train_nodes(zs, T, o);
        for (double& x : nodes) x /= T;
        nodes.front() = 0.0;
        nodes.back() = 1.0;
        B.node = nodes;
        B.N = (int)B.node.size() - 1;
        B.mesh_f1 = zs.front().pos / T;
        B.mesh_f2 = zs.back().pos / T;
        B.mesh_w = zs.front().w / T;
        B.n_fronts = K;
        shift = peaks.front().xi - zs.front().pos;
    }
    auto sample = [&](double x) {
        if (pulse.T > 0.0) {
            x = std::fmod(x, pulse.T);
            if (x < 0.0) x += pulse.T;
        }
        return hermite_eval(pulse, x);
    };
    const auto pts = eval_points(B.node);
    std::vector<V3> vals(pts.size());
    for (size_t i = 0; i < pts.size(); ++i)
        vals[i] = sample(pts[i] * T + shift);
    pack(B, vals, B.value(free_scalar));
    return B;
}

inline TravelingWaveSolution extract(const Bvp& B, double residual) {
    TravelingWaveSolution s;
    s.kind = B.kind;
    s.p = B.p;
    s.c = B.c;
    s.T = B.periodic() ? B.T : 0.0;
    const double scale = B.periodic() ? B.T : 1.0;
    s.xi.resize(B.N + 1);
    s.y.resize(3, B.N + 1);
    for (int i = 0; i <= B.N; ++i) {
        s.xi[i] = B.node[i] * scale;
        s.y.col(i) = B.node_value(i);
    }
    s.residual_norm = residual;
    return s;
}

inline NewtonReport converge(Bvp& B, const WaveSolveOptions& o) {
    auto rep = newton_solve(B, o);
    Eigen::VectorXd F;
    assemble(B, F, nullptr);
    rep.residual = collocation_residual(B, F);
    if (!(rep.residual < o.residual_tol))
        throw SolverError("collocation residual " +
                          std::to_string(rep.residual) +
                          " above tolerance after Newton convergence");
    return rep;
}

}  // namespace tw_detail

inline Eigen::Vector3d TravelingWaveSolution::rhs_at(int i) const {
    return tw_detail::rhs(y.col(i), p, c);
}

inline Eigen::Vector3d TravelingWaveSolution::value_at(double x) const {
    const int n = (int)xi.size();
    if (x <= xi.front()) return y.col(0);
    if (x >= xi.back()) return y.col(n - 1);
    const int j =
        (int)(std::upper_bound(xi.begin(), xi.end(), x) - xi.begin()) - 1;
    const double h = xi[j + 1] - xi[j];
    const double t = (x - xi[j]) / h;
    const Eigen::Vector3d y0 = y.col(j), y1 = y.col(j + 1);
    const Eigen::Vector3d d0 = h * rhs_at(j), d1 = h * rhs_at(j + 1);
    const double t2 = t * t, t3 = t2 * t;
    return (2 * t3 - 3 * t2 + 1) * y0 + (t3 - 2 * t2 + t) * d0 +
           (-2 * t3 + 3 * t2) * y1 + (t3 - t2) * d1;
}

inline TravelingWaveSolution solve_wave(WaveKind kind, const ModelParams& p,
                                        const SingularOrbit& seed,
                                        const WaveSolveOptions& opts = {}) {
    auto B = tw_detail::bvp_from_singular(kind, p, seed, opts);
    const auto rep = tw_detail::converge(B, opts);
    auto s = tw_detail::extract(B, rep.residual);
    s.singular_speed_offset = s.c - seed.speed;
    return s;
}

inline TravelingWaveSolution solve_wave(WaveKind kind, const ModelParams& p,
                                        const TravelingWaveSolution& guess,
                                        const WaveSolveOptions& opts = {}) {
    auto B = tw_detail::bvp_from_solution(kind, p, guess, opts,
                                          tw_detail::VarSel::speed);
    const auto rep = tw_detail::converge(B, opts);
    return tw_detail::extract(B, rep.residual);
}

inline TravelingWaveSolution solve_periodic(const ModelParams& p, double T,
                                            const TravelingWaveSolution& guess,
                                            const WaveSolveOptions& opts = {}) {
    auto B = tw_detail::bvp_periodic_wrap(p, T, guess, opts,
                                          tw_detail::VarSel::speed);
    const auto rep = tw_detail::converge(B, opts);
    return tw_detail::extract(B, rep.residual);
}

// The zero-eps skeleton sampled on the solver's own mesh, phase-anchored the
// same way the solver is.  Not a solution of the eps>0 equations, so the
// residual is NaN; it is the reference profile for singular-limit distance
// checks and the solver's initial iterate.
inline TravelingWaveSolution singular_composite(WaveKind kind,
                                                const ModelParams& p,
                                                const SingularOrbit& seed,
                                                const WaveSolveOptions& opts = {}) {
    auto B = tw_detail::bvp_from_singular(kind, p, seed, opts);
    return tw_detail::extract(B, std::numeric_limits<double>::quiet_NaN());
}

// ---- continuation ---------------------------------------------------------

enum class BranchParameter { rainfall, period, speed };

inline const char* to_string(BranchParameter p) {
    switch (p) {
        case BranchParameter::rainfall: return "a";
        case BranchParameter::period: return "T";
        case BranchParameter::speed: return "c";
    }
    return "?";
}

struct BranchPoint {
    double parameter = 0.0;
    double c = 0.0;
    double T = 0.0;
    double B = 0.0;      // integral of v over one structure
    double v_max = 0.0;
    bool fold_flag = false;
};

struct ContinuationBranch {
    std::string parameter;
    std::vector<BranchPoint> points;
    std::vector<int> fold_indices;
    std::string termination;
    std::vector<TravelingWaveSolution> solutions;
};

struct ContinuationOptions {
    double initial_step = 0.1;   // weighted arclength units
    double min_step = 1e-6;
    double max_step = 0.6;
    int max_points = 400;
    double fold_tol = 1e-8;      // parameter resolution of refined folds
    bool trace = false;          // per-step diagnostics on stderr
};

namespace tw_detail {

inline VarSel var_of(BranchParameter p) {
    switch (p) {
        case BranchParameter::rainfall: return VarSel::rainfall;
        case BranchParameter::period: return VarSel::period;
        case BranchParameter::speed: return VarSel::speed;
    }
    return VarSel::rainfall;
}

inline BranchPoint summarize(const Bvp& B) {
    BranchPoint pt;
    pt.c = B.c;
    pt.T = B.periodic() ? B.T : 0.0;
    const double theta = B.periodic() ? B.T : 1.0;
    double acc = 0.0, vmax = 0.0;
    for (int i = 0; i < B.N; ++i) {
        const double h = (B.node[i + 1] - B.node[i]) * theta;
        for (int k = 0; k < 3; ++k) {
            const V3 y = B.stage_value(i, k);
            acc += h * kB[k] * y[1];
            vmax = std::max(vmax, y[1]);
        }
    }
    for (int i = 0; i <= B.N; ++i) vmax = std::max(vmax, B.node_value(i)[1]);
    pt.B = acc;
    pt.v_max = vmax;
    return pt;
}

struct ContState {
    Bvp bvp;
    Eigen::VectorXd tz;  // tangent, profile+scalar part
    double tp = 0.0;     // tangent, parameter component (scaled units)
};

// One factorized extended system: collocation rows with the parameter
// column, plus a normalization row.
struct ExtendedSystem {
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
    bool ok = false;

    void factor(const Bvp& B, VarSel par, const Eigen::VectorXd& nrow_z,
                double nrow_p, double pscale) {
        const int n = B.nz();
        std::vector<Eigen::Triplet<double>> trips;
        Eigen::VectorXd F, pc;
        assemble(B, F, &trips, par, &pc);
        for (int r = 0; r < n; ++r)
            if (pc[r] != 0.0) trips.emplace_back(r, n, pc[r] * pscale);
        const double wz = 1.0 / n;
        for (int j = 0; j < n; ++j)
            if (nrow_z[j] != 0.0) trips.emplace_back(n, j, nrow_z[j] * wz);
        trips.emplace_back(n, n, nrow_p);
        Eigen::SparseMatrix<double> J(n + 1, n + 1);
        J.setFromTriplets(trips.begin(), trips.end());
        lu.compute(J);
        ok = lu.info() == Eigen::Success;
    }
};

}  // namespace tw_detail

inline ContinuationBranch continue_branch(
    const TravelingWaveSolution& start, BranchParameter parameter,
    double target, const ContinuationOptions& copts = {},
    const WaveSolveOptions& wopts = {},
    std::optional<BranchParameter> free_override = std::nullopt) {
    using namespace tw_detail;

    const VarSel par = var_of(parameter);
    VarSel free;
    if (free_override) {
        free = var_of(*free_override);
    } else if (start.kind == WaveKind::periodic) {
        free = par == VarSel::speed ? VarSel::period : VarSel::speed;
    } else {
        free = par == VarSel::rainfall ? VarSel::speed : VarSel::rainfall;
    }
    if (free == par)
        throw ConfigError("continuation parameter equals the free scalar");
    if (start.kind != WaveKind::periodic && par == VarSel::period)
        throw ConfigError("period continuation requires a periodic start");

    ContinuationBranch br;
    br.parameter = to_string(parameter);

    Bvp B = bvp_from_solution(start.kind, start.p, start, wopts, free);
    converge(B, wopts);

    const double p0 = B.value(par);
    const double pscale = par == VarSel::period ? std::max(5.0, 0.05 * std::abs(p0))
                                                : (par == VarSel::rainfall ? 0.1 : 0.05);

    auto record = [&](const Bvp& bb, bool fold) {
        BranchPoint pt = summarize(bb);
        pt.parameter = bb.value(par);
        pt.fold_flag = fold;
        br.points.push_back(pt);
        Eigen::VectorXd F;
        assemble(bb, F, nullptr);
        br.solutions.push_back(extract(bb, collocation_residual(bb, F)));
        if (fold) br.fold_indices.push_back((int)br.points.size() - 1);
    };

    // tangent through the factorized extended system
    auto tangent = [&](Bvp& bb, const Eigen::VectorXd& prev_tz, double prev_tp,
                       Eigen::VectorXd& out_tz, double& out_tp) {
        const int n = bb.nz();
        const double wz = 1.0 / n;
        ExtendedSystem ext;
        ext.factor(bb, par, prev_tz, prev_tp, pscale);
        if (!ext.ok) throw SolverError("tangent factorization failed");
        Eigen::VectorXd e = Eigen::VectorXd::Zero(n + 1);
        e[n] = 1.0;
        Eigen::VectorXd t = ext.lu.solve(e);
        const double nrm = std::sqrt(t.head(n).squaredNorm() * wz + t[n] * t[n]);
        t /= nrm;
        const double dot = t.head(n).dot(prev_tz) * wz + t[n] * prev_tp;
        if (dot < 0.0) t = -t;
        out_tz = t.head(n);
        out_tp = t[n];
    };

    // corrector: Newton on collocation + arclength normalization
    auto correct = [&](Bvp& bb, const Eigen::VectorXd& tz, double tp,
                       const Eigen::VectorXd& z_pred, double sp_pred) -> bool {
        const int n = bb.nz();
        const double wz = 1.0 / n;
        for (int it = 0; it < wopts.max_newton; ++it) {
            std::vector<Eigen::Triplet<double>> trips;
            Eigen::VectorXd F, pc;
            assemble(bb, F, &trips, par, &pc);
            const double sp = bb.value(par) / pscale;
            const double arc =
                tz.dot(bb.z - z_pred) * wz + tp * (sp - sp_pred);
            Eigen::VectorXd Fe(n + 1);
            Fe.head(n) = F;
            Fe[n] = arc;
            const double fn = Fe.lpNorm<Eigen::Infinity>();
            for (int r = 0; r < n; ++r)
                if (pc[r] != 0.0) trips.emplace_back(r, n, pc[r] * pscale);
            for (int j = 0; j < n; ++j)
                if (tz[j] != 0.0) trips.emplace_back(n, j, tz[j] * wz);
            trips.emplace_back(n, n, tp);
            Eigen::SparseMatrix<double> J(n + 1, n + 1);
            J.setFromTriplets(trips.begin(), trips.end());
            Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
            lu.compute(J);
            if (lu.info() != Eigen::Success) return false;
            const Eigen::VectorXd d = lu.solve(-Fe);
            if (!d.allFinite() || d.lpNorm<Eigen::Infinity>() > 1e8)
                return false;
            bb.z += d.head(n);
            bb.sync_scalar();
            bb.set_value(par, (sp + d[n]) * pscale);
            if (d.lpNorm<Eigen::Infinity>() <
                wopts.newton_tol * (1.0 + bb.z.lpNorm<Eigen::Infinity>())) {
                if (fn > 1e-5 && it == 0) continue;  // settle the residual too
                return true;
            }
        }
        return false;
    };

    Eigen::VectorXd tz = Eigen::VectorXd::Zero(B.nz());
    double tp = 1.0;
    tangent(B, tz, tp, tz, tp);
    const double dir = target >= p0 ? 1.0 : -1.0;
    if (tp * dir < 0.0) {
        tz = -tz;
        tp = -tp;
    }

    record(B, false);
    double ds = copts.initial_step;
    double prev_sign = tp >= 0.0 ? 1.0 : -1.0;
    double last_fold_par = std::numeric_limits<double>::quiet_NaN();
    double prev_par = B.value(par);
    double prev_scalar = B.value(free);

    while ((int)br.points.size() < copts.max_points) {
        Bvp trial = B;
        const Eigen::VectorXd z_pred = B.z + ds * tz;
        const double sp_pred = B.value(par) / pscale + ds * tp;
        trial.z = z_pred;
        trial.sync_scalar();
        trial.set_value(par, sp_pred * pscale);

        bool ok = false;
        try {
            ok = correct(trial, tz, tp, z_pred, sp_pred);
        } catch (const std::exception&) {
            ok = false;
        }
        if (!ok) {
            if (copts.trace)
                std::fprintf(stderr, "  [ct] reject ds=%.3g\n", ds);
            ds *= 0.35;
            if (ds < copts.min_step) {
                br.termination = "step-underflow";
                return br;
            }
            continue;
        }

        // converged: tangent at the new point, fold check
        Eigen::VectorXd tz_new;
        double tp_new;
        reanchor_phase(trial);
        try {
            tangent(trial, tz, tp, tz_new, tp_new);
        } catch (const std::exception&) {
            br.termination = "tangent-failure";
            return br;
        }
        const double sign_new = tp_new >= 0.0 ? 1.0 : -1.0;
        if (copts.trace)
            std::fprintf(stderr,
                         "  [ct] pt %3zu par=%.10f sc=%.10f tp=%+.3e ds=%.3g\n",
                         br.points.size(), trial.value(par), trial.value(free),
                         tp_new, ds);

        const bool fold_jitter =
            std::isfinite(last_fold_par) &&
            std::abs(trial.value(par) - last_fold_par) <
                1e-6 * (1.0 + std::abs(last_fold_par));
        if (sign_new != prev_sign && !fold_jitter) {
            // fold between B and trial: secant refinement on the step length
            double s_lo = 0.0, g_lo = tp;
            double s_hi = ds, g_hi = tp_new;
            Bvp fold_pt = trial;
            double p_prev = trial.value(par);
            for (int it = 0; it < 20; ++it) {
                double s_mid = s_lo - g_lo * (s_hi - s_lo) / (g_hi - g_lo);
                const double margin = 0.05 * (s_hi - s_lo);
                s_mid = std::clamp(s_mid, s_lo + margin, s_hi - margin);
                Bvp probe = B;
                const Eigen::VectorXd zp = B.z + s_mid * tz;
                const double spp = B.value(par) / pscale + s_mid * tp;
                probe.z = zp;
                probe.sync_scalar();
                probe.set_value(par, spp * pscale);
                bool pok = false;
                try {
                    pok = correct(probe, tz, tp, zp, spp);
                } catch (const std::exception&) {
                }
                if (!pok) break;
                Eigen::VectorXd ptz;
                double ptp;
                reanchor_phase(probe);
                try {
                    tangent(probe, tz, tp, ptz, ptp);
                } catch (const std::exception&) {
                    break;
                }
                fold_pt = probe;
                if ((ptp >= 0.0 ? 1.0 : -1.0) == prev_sign) {
                    s_lo = s_mid;
                    g_lo = ptp;
                } else {
                    s_hi = s_mid;
                    g_hi = ptp;
                }
                if (std::abs(fold_pt.value(par) - p_prev) <
                    copts.fold_tol * (1.0 + std::abs(p_prev)))
                    break;
                p_prev = fold_pt.value(par);
            }
            record(fold_pt, true);
            last_fold_par = fold_pt.value(par);
            if (copts.trace)
                std::fprintf(stderr, "  [ct] fold recorded par=%.10f\n",
                             last_fold_par);
        }

        prev_par = B.value(par);
        prev_scalar = B.value(free);
        B = trial;
        tz = tz_new;
        tp = tp_new;
        prev_sign = sign_new;
        record(B, false);

        // structural drift: remesh around the moved fronts and re-converge
        if (B.n_fronts > 0 && !B.pin_scalar) {
            auto sol = extract(B, 0.0);
            const auto peaks = detect_fronts(sol);
            if ((int)peaks.size() == B.n_fronts) {
                const double scale = B.periodic() ? B.T : 1.0;
                const double drift = std::max(
                    std::abs(peaks.front().xi / scale - B.mesh_f1),
                    std::abs(peaks.back().xi / scale - B.mesh_f2));
                if (drift > 0.35 * B.mesh_w) {
                    try {
                        sol.c = B.c;
                        sol.T = B.periodic() ? B.T : 0.0;
                        Bvp re = bvp_from_solution(B.kind, B.p, sol, wopts,
                                                   free);
                        converge(re, wopts);
                        B = re;
                        // the unknown count changed, so restart the tangent
                        // from a pure parameter direction, then orient it by
                        // the last accepted step in the (scalar, parameter)
                        // plane; near a fold the parameter sign alone is
                        // meaningless and would randomize the march direction
                        tz = Eigen::VectorXd::Zero(B.nz());
                        tp = prev_sign;
                        tangent(B, tz, tp, tz, tp);
                        const double d_sc = B.value(free) - prev_scalar;
                        const double d_pp =
                            (B.value(par) - prev_par) / pscale;
                        const double t_sc = tz[B.scalar_index()];
                        if (std::hypot(d_sc, d_pp) > 1e-12 &&
                            t_sc * d_sc + tp * d_pp < 0.0) {
                            tz = -tz;
                            tp = -tp;
                        }
                        prev_sign = tp >= 0.0 ? 1.0 : -1.0;
                        if (copts.trace)
                            std::fprintf(stderr,
                                         "  [ct] remesh nz=%d tp=%+.3e "
                                         "dsc=%+.3e dpp=%+.3e\n",
                                         B.nz(), tp,
                                         B.value(free) - prev_scalar,
                                         (B.value(par) - prev_par) / pscale);
                    } catch (const std::exception&) {
                        // keep the old mesh if the rebuild fails
                    }
                }
            }
        }

        const double pv = B.value(par);
        if ((pv - target) * dir >= 0.0) {
            // land exactly on the requested endpoint
            try {
                Bvp fin = B;
                fin.set_value(par, target);
                converge(fin, wopts);
                record(fin, false);
                br.termination = "target";
            } catch (const std::exception&) {
                br.termination = "target-overshoot";
            }
            return br;
        }

        ds = std::min(ds * 1.3, copts.max_step);
    }
    br.termination = "max-points";
    return br;
}

inline ContinuationBranch continue_in_period(const TravelingWaveSolution& start,
                                             double T_target,
                                             const ContinuationOptions& copts = {},
                                             const WaveSolveOptions& wopts = {}) {
    if (start.kind != WaveKind::periodic)
        throw ConfigError("continue_in_period requires a periodic start");
    return continue_branch(start, BranchParameter::period, T_target, copts,
                           wopts, BranchParameter::speed);
}

inline ContinuationBranch wavenumber_sweep(const TravelingWaveSolution& start,
                                           double c_fixed, double a_target,
                                           const ContinuationOptions& copts = {},
                                           const WaveSolveOptions& wopts = {}) {
    if (start.kind != WaveKind::periodic)
        throw ConfigError("wavenumber_sweep requires a periodic start");
    // settle onto the prescribed speed first, with the period taking up the
    // slack, then sweep rainfall at that fixed speed
    auto B = tw_detail::bvp_from_solution(WaveKind::periodic, start.p, start,
                                          wopts, tw_detail::VarSel::period);
    B.c = c_fixed;
    tw_detail::converge(B, wopts);
    Eigen::VectorXd F;
    tw_detail::assemble(B, F, nullptr);
    auto settled = tw_detail::extract(B, tw_detail::collocation_residual(B, F));
    return continue_branch(settled, BranchParameter::rainfall, a_target, copts,
                           wopts, BranchParameter::period);
}

}  // namespace klab
