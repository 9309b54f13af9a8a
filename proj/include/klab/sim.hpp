#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "klab/common.hpp"
#include "klab/model.hpp"
#include "klab/singular.hpp"
#include "klab/tw.hpp"

// Direct 2D simulation of the model on a rectangle, method of lines with
// explicit RK4.  Water advects with speed 1/eps toward -x, so the upwind
// stencil for +(1/eps) u_x uses the right neighbor; vegetation diffuses with
// a 5-point Laplacian.  The grid is cell-centered: x_i = (i + 1/2) dx, which
// makes the zero-flux ghost a plain copy across the boundary face.

namespace klab {

enum class BcX { periodic, neumann };

// periodic in y exists so the y-translation symmetry of the scheme can be
// tested exactly; physical runs use neumann or corner.
enum class BcY { neumann, corner, periodic };

inline const char* to_string(BcX b) {
    return b == BcX::periodic ? "periodic" : "neumann";
}
inline const char* to_string(BcY b) {
    switch (b) {
        case BcY::neumann: return "neumann";
        case BcY::corner: return "corner";
        default: return "periodic";
    }
}

struct SimConfig {
    double Lx = 200.0;
    double Ly = 100.0;
    int nx = 800;
    int ny = 400;
    double dt = 0.0;  // 0 = choose cfl_safety times the stability bound
    BcX bc_x = BcX::periodic;
    BcY bc_y = BcY::neumann;
    double alpha = -1.0;  // tilt coefficient in v_y +- alpha v_x = 0
    double t_end = 200.0;
    double snapshot_every = 10.0;
    double cfl_safety = 0.9;

    double dx() const { return Lx / nx; }
    double dy() const { return Ly / ny; }

    // Advection at speed 1/eps limits dt to dx*eps; diffusion of v (and of u
    // when D > 0) limits it to h^2 / (2 max(1,D) dim) with dim = 2.
    double dt_bound(const ModelParams& p) const {
        const double h = std::min(dx(), dy());
        return std::min(dx() * p.eps, h * h / (4.0 * std::max(1.0, p.D)));
    }

    void validate(const ModelParams& p) const {
        p.validate();
        if (!(Lx > 0.0) || !(Ly > 0.0)) throw ConfigError("domain lengths must be positive");
        if (nx < 4 || ny < 4) throw ConfigError("grid needs nx, ny >= 4");
        if (!(t_end > 0.0)) throw ConfigError("t_end must be positive");
        if (!(snapshot_every > 0.0)) throw ConfigError("snapshot_every must be positive");
        if (!(cfl_safety > 0.0) || cfl_safety > 1.0)
            throw ConfigError("cfl_safety must lie in (0, 1]");
        if (!std::isfinite(alpha)) throw ConfigError("corner coefficient alpha must be finite");
        if (dt < 0.0) throw ConfigError("dt must be nonnegative (0 = automatic)");
        if (dt > 0.0 && dt > dt_bound(p) * (1.0 + 1e-12))
            throw ConfigError("dt exceeds the stability bound " + std::to_string(dt_bound(p)));
    }
};

struct FieldSnapshot {
    double t = 0.0;
    int nx = 0, ny = 0;
    // row-major, index iy*nx + ix; a row is one y = const line
    std::vector<double> u, v;
    // cumulative count of tiny negatives zeroed by the positivity guard,
    // carried along so clipping is never silent
    long clipped = 0;

    double& at_u(int ix, int iy) { return u[static_cast<size_t>(iy) * nx + ix]; }
    double& at_v(int ix, int iy) { return v[static_cast<size_t>(iy) * nx + ix]; }
    double at_u(int ix, int iy) const { return u[static_cast<size_t>(iy) * nx + ix]; }
    double at_v(int ix, int iy) const { return v[static_cast<size_t>(iy) * nx + ix]; }
};

inline FieldSnapshot uniform_state(double u0, double v0, const SimConfig& cfg) {
    FieldSnapshot s;
    s.nx = cfg.nx;
    s.ny = cfg.ny;
    s.u.assign(static_cast<size_t>(cfg.nx) * cfg.ny, u0);
    s.v.assign(static_cast<size_t>(cfg.nx) * cfg.ny, v0);
    return s;
}

namespace sim_detail {

template <class F>
inline void parallel_rows(int ny, F&& body) {
    const int nt = std::min(thread_count(), ny);
    if (nt <= 1) {
        body(0, ny);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(nt);
    for (int t = 0; t < nt; ++t) {
        const int r0 = static_cast<int>(static_cast<long>(ny) * t / nt);
        const int r1 = static_cast<int>(static_cast<long>(ny) * (t + 1) / nt);
        pool.emplace_back([&body, r0, r1] { body(r0, r1); });
    }
    for (auto& th : pool) th.join();
}

}  // namespace sim_detail

class Simulator {
  public:
    Simulator(const ModelParams& p, const SimConfig& cfg) : p_(p), cfg_(cfg) {
        cfg.validate(p);
        dt_ = cfg.dt > 0.0 ? cfg.dt : cfg.cfl_safety * cfg.dt_bound(p);
        const size_t n = static_cast<size_t>(cfg.nx) * cfg.ny;
        for (auto* a : {&k1u_, &k2u_, &k3u_, &k4u_, &k1v_, &k2v_, &k3v_, &k4v_, &su_, &sv_})
            a->assign(n, 0.0);
        gb_.assign(cfg.nx, 0.0);
        gt_.assign(cfg.nx, 0.0);
    }

    double dt() const { return dt_; }

    FieldSnapshot step(const FieldSnapshot& s) { return step(s, dt_); }

    FieldSnapshot step(const FieldSnapshot& s, double dt) {
        if (s.nx != cfg_.nx || s.ny != cfg_.ny)
            throw ConfigError("snapshot grid does not match the configuration");
        if (dt <= 0.0 || dt > cfg_.dt_bound(p_) * (1.0 + 1e-12))
            throw ConfigError("step dt violates the stability bound");
        const size_t n = s.u.size();
        const double* u0 = s.u.data();
        const double* v0 = s.v.data();

        rhs(u0, v0, k1u_.data(), k1v_.data());
        axpy(u0, v0, 0.5 * dt, k1u_.data(), k1v_.data());
        rhs(su_.data(), sv_.data(), k2u_.data(), k2v_.data());
        axpy(u0, v0, 0.5 * dt, k2u_.data(), k2v_.data());
        rhs(su_.data(), sv_.data(), k3u_.data(), k3v_.data());
        axpy(u0, v0, dt, k3u_.data(), k3v_.data());
        rhs(su_.data(), sv_.data(), k4u_.data(), k4v_.data());

        FieldSnapshot out;
        out.t = s.t + dt;
        out.nx = s.nx;
        out.ny = s.ny;
        out.u.resize(n);
        out.v.resize(n);
        out.clipped = s.clipped;
        {
            double* ou = out.u.data();
            double* ov = out.v.data();
            const double w = dt / 6.0;
            sim_detail::parallel_rows(cfg_.ny, [&](int r0, int r1) {
                const size_t i0 = static_cast<size_t>(r0) * cfg_.nx;
                const size_t i1 = static_cast<size_t>(r1) * cfg_.nx;
                for (size_t i = i0; i < i1; ++i) {
                    ou[i] = u0[i] + w * (k1u_[i] + 2.0 * (k2u_[i] + k3u_[i]) + k4u_[i]);
                    ov[i] = v0[i] + w * (k1v_[i] + 2.0 * (k2v_[i] + k3v_[i]) + k4v_[i]);
                }
            });
        }
        enforce_positivity(out);
        return out;
    }

  private:
    // Negatives beyond rounding depth mean the scheme lost positivity; abort
    // rather than hide it.  Rounding-level negatives are zeroed and counted.
    void enforce_positivity(FieldSnapshot& s) const {
        for (auto* f : {&s.u, &s.v}) {
            for (double& x : *f) {
                if (!std::isfinite(x) || std::abs(x) > 1e8)
                    throw SolverError("simulation blew up at t = " + std::to_string(s.t));
                if (x < 0.0) {
                    if (x < -1e-10)
                        throw SolverError("negative field value " + std::to_string(x) +
                                          " at t = " + std::to_string(s.t));
                    x = 0.0;
                    ++s.clipped;
                }
            }
        }
    }

    void axpy(const double* u0, const double* v0, double h, const double* ku, const double* kv) {
        double* su = su_.data();
        double* sv = sv_.data();
        sim_detail::parallel_rows(cfg_.ny, [&](int r0, int r1) {
            const size_t i0 = static_cast<size_t>(r0) * cfg_.nx;
            const size_t i1 = static_cast<size_t>(r1) * cfg_.nx;
            for (size_t i = i0; i < i1; ++i) {
                su[i] = u0[i] + h * ku[i];
                sv[i] = v0[i] + h * kv[i];
            }
        });
    }

    void rhs(const double* u, const double* v, double* du, double* dv) {
        const int nx = cfg_.nx, ny = cfg_.ny;
        const double dx = cfg_.dx(), dy = cfg_.dy();
        const double ie = 1.0 / (p_.eps * dx);
        const double rx = 1.0 / (dx * dx), ry = 1.0 / (dy * dy);
        const double a = p_.a, b = p_.b, m = p_.m, D = p_.D;

        // Corner ghost rows depend on the stage state, so refresh them here:
        // v_y -+ alpha v_x = 0 across the bottom/top face, with the x-slope
        // taken one-sided on the boundary row itself.
        if (cfg_.bc_y == BcY::corner) {
            auto fill = [&](const double* row, std::vector<double>& g) {
                for (int ix = 0; ix < nx; ++ix) {
                    const double vx = ix + 1 < nx ? (row[ix + 1] - row[ix]) / dx
                                                  : (row[ix] - row[ix - 1]) / dx;
                    g[ix] = row[ix] - dy * cfg_.alpha * vx;
                }
            };
            fill(v, gb_);
            fill(v + static_cast<size_t>(ny - 1) * nx, gt_);
        }

        sim_detail::parallel_rows(ny, [&](int r0, int r1) {
            for (int iy = r0; iy < r1; ++iy) {
                const size_t row = static_cast<size_t>(iy) * nx;
                const double* uc = u + row;
                const double* vc = v + row;

                // y-neighbor rows; pointing a ghost at the boundary row itself
                // realizes the zero-flux copy without extra storage
                const double* vdn;
                const double* vup;
                switch (cfg_.bc_y) {
                    case BcY::periodic:
                        vdn = v + static_cast<size_t>((iy + ny - 1) % ny) * nx;
                        vup = v + static_cast<size_t>((iy + 1) % ny) * nx;
                        break;
                    case BcY::corner:
                        vdn = iy > 0 ? vc - nx : gb_.data();
                        vup = iy + 1 < ny ? vc + nx : gt_.data();
                        break;
                    default:
                        vdn = iy > 0 ? vc - nx : vc;
                        vup = iy + 1 < ny ? vc + nx : vc;
                }
                // u only needs y-neighbors when it diffuses; the corner
                // condition is a statement about v, so u falls back to
                // zero flux there
                const double* udn = nullptr;
                const double* uup = nullptr;
                if (D > 0.0) {
                    if (cfg_.bc_y == BcY::periodic) {
                        udn = u + static_cast<size_t>((iy + ny - 1) % ny) * nx;
                        uup = u + static_cast<size_t>((iy + 1) % ny) * nx;
                    } else {
                        udn = iy > 0 ? uc - nx : uc;
                        uup = iy + 1 < ny ? uc + nx : uc;
                    }
                }

                double* duc = du + row;
                double* dvc = dv + row;

                auto cell = [&](int ix, double uL, double uR, double vL, double vR) {
                    const double uu = uc[ix], vv = vc[ix];
                    const double uv2 = uu * vv * vv;
                    double r = ie * (uR - uu) + a - uu - uv2;
                    if (D > 0.0)
                        r += D * ((uL + uR - 2.0 * uu) * rx +
                                  (udn[ix] + uup[ix] - 2.0 * uu) * ry);
                    duc[ix] = r;
                    dvc[ix] = (vL + vR - 2.0 * vv) * rx +
                              (vdn[ix] + vup[ix] - 2.0 * vv) * ry - m * vv +
                              (1.0 - b * vv) * uv2;
                };

                const bool perx = cfg_.bc_x == BcX::periodic;
                cell(0, perx ? uc[nx - 1] : uc[0], uc[1], perx ? vc[nx - 1] : vc[0], vc[1]);
                for (int ix = 1; ix + 1 < nx; ++ix)
                    cell(ix, uc[ix - 1], uc[ix + 1], vc[ix - 1], vc[ix + 1]);
                cell(nx - 1, uc[nx - 2], perx ? uc[0] : uc[nx - 1], vc[nx - 2],
                     perx ? vc[0] : vc[nx - 1]);
            }
        });
    }

    ModelParams p_;
    SimConfig cfg_;
    double dt_;
    std::vector<double> k1u_, k2u_, k3u_, k4u_, k1v_, k2v_, k3v_, k4v_, su_, sv_;
    std::vector<double> gb_, gt_;  // corner ghost rows below/above the domain
};

inline FieldSnapshot step(const FieldSnapshot& s, const ModelParams& p, const SimConfig& cfg) {
    Simulator sim(p, cfg);
    return sim.step(s);
}

struct RunResult {
    std::vector<FieldSnapshot> snapshots;
    bool aborted = false;
    std::string error;  // empty unless aborted; last snapshot is the last good state
};

// March to t_end, storing the initial state, every snapshot_every time units,
// and the final state.  dt is shrunk to land on t_end exactly.  A blowup stops
// the run and hands back everything collected so far.
inline RunResult run(FieldSnapshot state, const ModelParams& p, const SimConfig& cfg) {
    Simulator sim(p, cfg);
    const long nsteps = std::max(1L, static_cast<long>(std::ceil(cfg.t_end / sim.dt() - 1e-9)));
    const double dt = cfg.t_end / static_cast<double>(nsteps);
    const long stride = std::max(1L, std::lround(cfg.snapshot_every / dt));

    RunResult res;
    const double t0 = state.t;
    res.snapshots.push_back(state);
    for (long k = 1; k <= nsteps; ++k) {
        try {
            state = sim.step(state, dt);
        } catch (const SolverError& e) {
            res.aborted = true;
            res.error = e.what();
            return res;
        }
        state.t = t0 + dt * static_cast<double>(k);  // avoid accumulated roundoff
        if (k % stride == 0 || k == nsteps) res.snapshots.push_back(state);
    }
    return res;
}

struct BendSpec {
    // Interface tilt half-angle.  phi > 0 gives the orientation that is
    // attracting when the straight wave moves uphill (interface slopes
    // eta_- = +|tan phi| below mid-channel, eta_+ = -|tan phi| above);
    // phi < 0 gives the opposite, transient orientation.
    double phi = 0.0;
};

namespace sim_detail {

// Window of xi where v meaningfully departs from the nearer end state.  The
// water field trails the pulse by O(1/eps) and is deliberately ignored here:
// the simulation heals a truncated u-tail on the O(1) relaxation time, while
// v carries the actual pattern.
inline std::pair<double, double> v_active_window(const TravelingWaveSolution& wave) {
    const int n = static_cast<int>(wave.xi.size());
    const double vl = wave.y(1, 0), vr = wave.y(1, n - 1);
    double vmin = 1e300, vmax = -1e300;
    for (int i = 0; i < n; ++i) {
        vmin = std::min(vmin, wave.y(1, i));
        vmax = std::max(vmax, wave.y(1, i));
    }
    const double tol = 1e-3 * std::max(vmax - vmin, 1e-12);
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (int i = 0; i < n; ++i) {
        // active means away from both end states; the long constant-v
        // stretches over the slow water tail then drop out regardless of
        // which side of the mesh they sit on
        const double dev = std::min(std::abs(wave.y(1, i) - vl), std::abs(wave.y(1, i) - vr));
        if (dev > tol) {
            lo = std::min(lo, wave.xi[i]);
            hi = std::max(hi, wave.xi[i]);
        }
    }
    if (!(lo <= hi)) lo = hi = 0.5 * (wave.xi.front() + wave.xi.back());
    return {lo, hi};
}

}  // namespace sim_detail

// Extrudes a 1D wave profile across the channel, centering the vegetation
// structure in x.  A bend shifts the sampling coordinate by a piecewise-linear
// offset with slopes -+|tan phi| meeting at mid-channel, so the extruded
// interface is a wedge instead of a straight line.
inline FieldSnapshot init_from_wave(const TravelingWaveSolution& wave, const SimConfig& cfg,
                                    const BendSpec& bend = {}) {
    if (wave.xi.empty()) throw ConfigError("wave solution carries no mesh");
    if (!(std::abs(bend.phi) < 1.5)) throw ConfigError("bend angle must satisfy |phi| < 1.5");
    const bool periodic_wave = wave.kind == WaveKind::periodic;
    const double lo = wave.xi.front(), hi = wave.xi.back();

    double mid;  // wave coordinate mapped to the channel center
    if (periodic_wave) {
        // tiling a fraction of a period would leave a jump at the wrap seam
        const double ratio = cfg.Lx / wave.T;
        if (std::abs(ratio - std::round(ratio)) > 1e-8 * ratio || ratio < 0.5)
            throw ConfigError("Lx must be an integer multiple of the wave period");
        mid = 0.5 * (lo + hi);
    } else {
        const auto [wl, wr] = sim_detail::v_active_window(wave);
        if (wr - wl > 0.9 * cfg.Lx)
            throw ConfigError("vegetation structure of the wave does not fit in Lx");
        // center the steepest vegetation gradient; for fronts the active
        // window is lopsided (the vegetated side rings for ~100 units) and
        // its midpoint would push the interface against a wall
        int imax = 0;
        for (int i = 1; i < static_cast<int>(wave.xi.size()); ++i)
            if (std::abs(wave.y(2, i)) > std::abs(wave.y(2, imax))) imax = i;
        mid = wave.xi[imax];
    }

    const double slope = std::tan(std::abs(bend.phi));
    const double sign = bend.phi >= 0.0 ? 1.0 : -1.0;
    FieldSnapshot s = uniform_state(0.0, 0.0, cfg);
    for (int iy = 0; iy < cfg.ny; ++iy) {
        const double y = (iy + 0.5) * cfg.dy();
        // V-shaped offset, mean removed so the pattern stays centered
        const double h0 = sign * slope * (std::abs(y - 0.5 * cfg.Ly) - 0.25 * cfg.Ly);
        for (int ix = 0; ix < cfg.nx; ++ix) {
            double xi = (ix + 0.5) * cfg.dx() - 0.5 * cfg.Lx + mid + h0;
            if (periodic_wave) {
                xi = std::fmod(xi - lo, wave.T);
                if (xi < 0.0) xi += wave.T;
                xi += lo;
            } else {
                // beyond the solved window the profile is constant at the
                // boundary equilibria, so clamping extends it
                xi = std::clamp(xi, lo, hi);
            }
            const Eigen::Vector3d w = wave.value_at(xi);
            s.at_u(ix, iy) = std::max(0.0, w[0]);
            s.at_v(ix, iy) = std::max(0.0, w[1]);
        }
    }
    return s;
}

struct SpeedFit {
    double speed = 0.0;
    double residual = 0.0;  // rms misfit of the linear position-vs-time fit
    double level = 0.0;     // v level whose crossing was tracked
    std::vector<double> t, x;
};

namespace sim_detail {

// Rightmost crossing of level L in a 1D trace; linear interpolation between
// cells, NaN when the trace never crosses.  Prefers downcrossings (vegetated
// on the left) and falls back to any crossing.
inline double rightmost_crossing(const std::vector<double>& f, double L, double dx,
                                 bool periodic, int* count = nullptr) {
    const int n = static_cast<int>(f.size());
    double best = std::numeric_limits<double>::quiet_NaN();
    double best_any = best;
    int hits = 0;
    auto consider = [&](int i, int j, double xi_pos) {
        const double fi = f[i] - L, fj = f[j] - L;
        if (fi == 0.0 && fj == 0.0) return;
        if ((fi > 0.0 && fj > 0.0) || (fi < 0.0 && fj < 0.0)) return;
        ++hits;
        const double frac = fi / (fi - fj);
        const double x = xi_pos + frac * dx;
        best_any = x;
        if (fi > 0.0) best = x;
    };
    for (int i = 0; i + 1 < n; ++i) consider(i, i + 1, (i + 0.5) * dx);
    if (periodic) consider(n - 1, 0, (n - 0.5) * dx);
    if (count) *count = hits;
    return std::isnan(best) ? best_any : best;
}

inline double unwrap(double x, double prev, double Lx, bool periodic) {
    if (!periodic) return x;
    while (x - prev > 0.5 * Lx) x -= Lx;
    while (x - prev < -0.5 * Lx) x += Lx;
    return x;
}

struct LineFit {
    double slope, intercept, rms;
};

inline LineFit fit_line(const std::vector<double>& t, const std::vector<double>& x) {
    const int n = static_cast<int>(t.size());
    Eigen::MatrixXd A(n, 2);
    Eigen::VectorXd rhs(n);
    for (int i = 0; i < n; ++i) {
        A(i, 0) = t[i];
        A(i, 1) = 1.0;
        rhs(i) = x[i];
    }
    const Eigen::Vector2d c = A.colPivHouseholderQr().solve(rhs);
    const double rms = std::sqrt((A * c - rhs).squaredNorm() / n);
    return {c[0], c[1], rms};
}

}  // namespace sim_detail

// Tracks the x-position where the y-averaged v crosses `level` (default: half
// the top of the rising front, the stripe's leading edge) and fits position
// against time.  The fit residual is the honest error bar on the speed.
inline SpeedFit measure_speed(const std::vector<FieldSnapshot>& history, const ModelParams& p,
                              const SimConfig& cfg,
                              double level = std::numeric_limits<double>::quiet_NaN()) {
    if (history.size() < 3) throw ConfigError("speed fit needs at least 3 snapshots");
    if (std::isnan(level)) {
        try {
            level = 0.5 * v_pm(u_star(p.a, p), p).v_plus;
        } catch (const ConfigError&) {
            // outside the stripe window fall back to the half-range of the
            // final snapshot
            const auto& v = history.back().v;
            const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
            level = 0.5 * (*mn + *mx);
        }
    }

    SpeedFit out;
    out.level = level;
    const bool perx = cfg.bc_x == BcX::periodic;
    std::vector<double> avg(cfg.nx);
    for (const auto& s : history) {
        for (int ix = 0; ix < cfg.nx; ++ix) {
            double acc = 0.0;
            for (int iy = 0; iy < cfg.ny; ++iy) acc += s.at_v(ix, iy);
            avg[ix] = acc / cfg.ny;
        }
        double pos = sim_detail::rightmost_crossing(avg, level, cfg.dx(), perx);
        if (std::isnan(pos))
            throw SolverError("no crossing of the tracking level at t = " + std::to_string(s.t));
        if (!out.x.empty()) pos = sim_detail::unwrap(pos, out.x.back(), cfg.Lx, perx);
        out.t.push_back(s.t);
        out.x.push_back(pos);
    }
    const auto fit = sim_detail::fit_line(out.t, out.x);
    out.speed = fit.slope;
    out.residual = fit.rms;
    return out;
}

enum class CornerClass { interior, exterior, step, hole };

inline const char* to_string(CornerClass c) {
    switch (c) {
        case CornerClass::interior: return "interior";
        case CornerClass::exterior: return "exterior";
        case CornerClass::step: return "step";
        default: return "hole";
    }
}

struct CornerReport {
    std::vector<double> y;      // row centers
    std::vector<double> h_fit;  // interface offset about its mean
    double eta_plus = 0.0;      // asymptotic slope toward y = Ly
    double eta_minus = 0.0;     // asymptotic slope toward y = 0
    CornerClass classification = CornerClass::hole;
    double measured_speed = std::numeric_limits<double>::quiet_NaN();
    bool partial = false;  // interface had extra or missing crossings somewhere
};

// Slopes within this tolerance count as equal (and as zero) when classifying;
// separate interior from exterior only beyond measurement noise.
inline constexpr double kCornerSlopeTol = 1e-2;

inline CornerReport corner_report(const std::vector<FieldSnapshot>& history,
                                  const ModelParams& p, const SimConfig& cfg) {
    (void)p;
    if (history.empty()) throw ConfigError("corner report needs at least one snapshot");
    if (cfg.ny < 6) throw ConfigError("corner report needs ny >= 6 for the outer-third fits");
    const bool perx = cfg.bc_x == BcX::periodic;

    // interface = rightmost crossing of the half-range level, per row
    auto interface_of = [&](const FieldSnapshot& s, bool* flag) {
        const auto [mn, mx] = std::minmax_element(s.v.begin(), s.v.end());
        const double level = 0.5 * (*mn + *mx);
        std::vector<double> xi(cfg.ny);
        std::vector<int> hits(cfg.ny);
        std::vector<double> row(cfg.nx);
        for (int iy = 0; iy < cfg.ny; ++iy) {
            for (int ix = 0; ix < cfg.nx; ++ix) row[ix] = s.at_v(ix, iy);
            xi[iy] = sim_detail::rightmost_crossing(row, level, cfg.dx(), perx, &hits[iy]);
            if (std::isnan(xi[iy]))
                throw SolverError("row " + std::to_string(iy) + " has no interface crossing");
            if (iy > 0) xi[iy] = sim_detail::unwrap(xi[iy], xi[iy - 1], cfg.Lx, perx);
        }
        if (flag) {
            // fronts cross once, pulses twice; a row deviating from the
            // majority signals pinch-off or extra structure
            std::vector<int> sorted = hits;
            std::sort(sorted.begin(), sorted.end());
            const int modal = sorted[sorted.size() / 2];
            *flag = std::any_of(hits.begin(), hits.end(),
                                [&](int h) { return h != modal; });
        }
        return xi;
    };

    CornerReport rep;
    const auto& last = history.back();
    const auto xi = interface_of(last, &rep.partial);
    const double mean = std::accumulate(xi.begin(), xi.end(), 0.0) / xi.size();
    rep.y.resize(cfg.ny);
    rep.h_fit.resize(cfg.ny);
    for (int iy = 0; iy < cfg.ny; ++iy) {
        rep.y[iy] = (iy + 0.5) * cfg.dy();
        rep.h_fit[iy] = xi[iy] - mean;
    }

    const int third = cfg.ny / 3;
    auto slope_of = [&](int from, int to) {
        std::vector<double> ys(rep.y.begin() + from, rep.y.begin() + to);
        std::vector<double> hs(rep.h_fit.begin() + from, rep.h_fit.begin() + to);
        return sim_detail::fit_line(ys, hs).slope;
    };
    rep.eta_minus = slope_of(0, third);
    rep.eta_plus = slope_of(cfg.ny - third, cfg.ny);

    if (rep.eta_plus < rep.eta_minus - kCornerSlopeTol)
        rep.classification = CornerClass::interior;
    else if (rep.eta_plus > rep.eta_minus + kCornerSlopeTol)
        rep.classification = CornerClass::exterior;
    else if (std::abs(0.5 * (rep.eta_plus + rep.eta_minus)) > kCornerSlopeTol)
        rep.classification = CornerClass::step;
    else
        rep.classification = CornerClass::hole;

    if (history.size() >= 3) {
        std::vector<double> ts, xs;
        for (const auto& s : history) {
            const auto xr = interface_of(s, nullptr);
            double x = std::accumulate(xr.begin(), xr.end(), 0.0) / xr.size();
            if (!xs.empty()) x = sim_detail::unwrap(x, xs.back(), cfg.Lx, perx);
            ts.push_back(s.t);
            xs.push_back(x);
        }
        rep.measured_speed = sim_detail::fit_line(ts, xs).slope;
    }
    return rep;
}

struct DispersionPoint {
    double phi = 0.0;
    double c = std::numeric_limits<double>::quiet_NaN();
    double d = std::numeric_limits<double>::quiet_NaN();
    bool converged = false;
};

struct DispersionCurve {
    std::vector<DispersionPoint> points;  // sorted by phi
    double c_s = 0.0;                     // speed of the straight wave
    // second derivative of d at 0: centered difference over the innermost
    // symmetric phi pair, and twice the quadratic coefficient of a least
    // squares parabola through all converged points
    double d2_centered = std::numeric_limits<double>::quiet_NaN();
    double d2_fit = std::numeric_limits<double>::quiet_NaN();
    double fit_linear = std::numeric_limits<double>::quiet_NaN();
    bool partial = false;
};

// A stripe tilted by phi solves the same traveling-wave equation with eps
// replaced by eps / cos(phi); the directional flux is d(phi) = c(phi)/cos(phi)
// and its convexity at 0 matches the straight speed to leading order.
inline DispersionCurve directional_dispersion(WaveKind kind, const ModelParams& p,
                                              std::vector<double> phi_grid,
                                              const WaveSolveOptions& opts = {}) {
    p.validate();
    if (phi_grid.empty()) throw ConfigError("phi grid is empty");
    for (double phi : phi_grid)
        if (!(std::cos(phi) > 1e-6)) throw ConfigError("phi grid must stay inside (-pi/2, pi/2)");
    std::sort(phi_grid.begin(), phi_grid.end());
    phi_grid.erase(std::unique(phi_grid.begin(), phi_grid.end(),
                               [](double a, double b) { return std::abs(a - b) < 1e-12; }),
                   phi_grid.end());

    ModelParams p0 = p;
    p0.D = 0.0;  // diffusion enters the reduction only at higher order
    OrbitKind ok;
    switch (kind) {
        case WaveKind::stripe: ok = OrbitKind::stripe; break;
        case WaveKind::gap: ok = OrbitKind::gap; break;
        case WaveKind::front_veg_to_bare: ok = OrbitKind::front_veg_to_bare; break;
        case WaveKind::front_bare_to_veg: ok = OrbitKind::front_bare_to_veg; break;
        default:
            throw ConfigError("directional dispersion is defined for the non-periodic kinds");
    }
    const auto base = solve_wave(kind, p0, build_singular_orbit(ok, p0), opts);

    DispersionCurve out;
    out.c_s = base.c;
    out.points.resize(phi_grid.size());

    // walk outward from phi = 0 so each solve reseeds from its neighbor
    std::vector<size_t> order(phi_grid.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t i, size_t j) {
        return std::abs(phi_grid[i]) < std::abs(phi_grid[j]);
    });
    TravelingWaveSolution seed_pos = base, seed_neg = base;
    for (size_t idx : order) {
        const double phi = phi_grid[idx];
        auto& pt = out.points[idx];
        pt.phi = phi;
        ModelParams pp = p0;
        pp.eps = p0.eps / std::cos(phi);
        TravelingWaveSolution& seed = phi >= 0.0 ? seed_pos : seed_neg;
        try {
            const auto sol = solve_wave(kind, pp, seed, opts);
            pt.c = sol.c;
            pt.d = sol.c / std::cos(phi);
            pt.converged = true;
            seed = sol;
        } catch (const SolverError&) {
            out.partial = true;  // leave the point marked unconverged
        }
    }

    // centered estimate from the innermost symmetric pair around zero
    double best_h = std::numeric_limits<double>::infinity();
    for (const auto& pt : out.points) {
        if (!(pt.phi > 0.0) || !pt.converged) continue;
        const auto neg = std::find_if(out.points.begin(), out.points.end(), [&](const auto& q) {
            return q.converged && std::abs(q.phi + pt.phi) < 1e-12;
        });
        const auto zero = std::find_if(out.points.begin(), out.points.end(), [&](const auto& q) {
            return q.converged && std::abs(q.phi) < 1e-12;
        });
        if (neg != out.points.end() && zero != out.points.end() && pt.phi < best_h) {
            best_h = pt.phi;
            out.d2_centered = (pt.d - 2.0 * zero->d + neg->d) / (pt.phi * pt.phi);
        }
    }

    std::vector<const DispersionPoint*> ok_pts;
    for (const auto& pt : out.points)
        if (pt.converged) ok_pts.push_back(&pt);
    if (ok_pts.size() >= 3) {
        Eigen::MatrixXd A(ok_pts.size(), 3);
        Eigen::VectorXd rhs(ok_pts.size());
        for (size_t i = 0; i < ok_pts.size(); ++i) {
            A(i, 0) = 1.0;
            A(i, 1) = ok_pts[i]->phi;
            A(i, 2) = ok_pts[i]->phi * ok_pts[i]->phi;
            rhs(i) = ok_pts[i]->d;
        }
        const Eigen::Vector3d q = A.colPivHouseholderQr().solve(rhs);
        out.fit_linear = q[1];
        out.d2_fit = 2.0 * q[2];
    }
    return out;
}

}  // namespace klab
