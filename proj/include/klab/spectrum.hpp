#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <Eigen/SparseCore>
#include <Eigen/SparseLU>

#include "tw.hpp"

namespace klab {

using Complex = std::complex<double>;

// ---- essential spectrum ----------------------------------------------------

// One boundary family of the essential spectrum, sampled along its natural
// parameter (the Fourier wavenumber of the far-field mode).
struct SpectralCurve {
    std::string id;
    std::vector<double> parameter;
    std::vector<Complex> lambda;
};

struct EssentialBoundary {
    SteadyStateKind state = SteadyStateKind::desert;
    double ell = 0.0;
    std::vector<SpectralCurve> curves;
    double rightmost = 0.0;  // max Re over every boundary curve
};

namespace spectrum_detail {

// Roots of the complex quadratic a z^2 + b z + c = 0 without cancellation in
// the larger-|.| root.
inline std::pair<Complex, Complex> quadratic_roots(Complex a, Complex b,
                                                   Complex c) {
    const Complex r = std::sqrt(b * b - 4.0 * a * c);
    const Complex q =
        (std::real(std::conj(b) * r) >= 0.0) ? -0.5 * (b + r) : -0.5 * (b - r);
    if (std::abs(q) == 0.0) return {Complex(0, 0), Complex(0, 0)};
    return {q / a, c / q};
}

// Far-field dispersion relation of the vegetated state: for a transverse
// mode e^{i nu xi} the temporal eigenvalues solve a quadratic whose
// coefficients mix the advective u-row with the diffusive v-row.
inline std::pair<Complex, Complex> vegetated_dispersion(
    double nu, const ModelParams& p, double c_s, double ell, double U2,
    double V2) {
    const double ep = tw_detail::eps_tilde(p, c_s);
    const double sigma = (2.0 - 3.0 * p.b * V2) * U2 * V2;
    const double K = ep * 2.0 * U2 * V2 * (1.0 - p.b * V2) * V2 * V2;
    const Complex beta = Complex(ep * (1.0 + V2 * V2), -nu);
    const Complex gamma =
        Complex(-nu * nu - p.m - ell * ell + sigma, nu * c_s);
    return quadratic_roots(Complex(ep, 0.0), beta - ep * gamma,
                           Complex(K, 0.0) - beta * gamma);
}

inline double vegetated_max_re(double nu, const ModelParams& p, double c_s,
                               double ell, double U2, double V2) {
    const auto r = vegetated_dispersion(nu, p, c_s, ell, U2, V2);
    return std::max(r.first.real(), r.second.real());
}

}  // namespace spectrum_detail

inline EssentialBoundary essential_boundary(SteadyStateKind state,
                                            const ModelParams& p, double c_s,
                                            double ell = 0.0) {
    p.validate();
    EssentialBoundary out;
    out.state = state;
    out.ell = ell;

    if (state == SteadyStateKind::desert) {
        const double ep = tw_detail::eps_tilde(p, c_s);
        SpectralCurve line{"u-advective-line", {}, {}};
        SpectralCurve parab{"v-diffusive-parabola", {}, {}};
        const int n = 401;
        const double kl = 40.0 * ep, kp = 7.0;
        for (int i = 0; i < n; ++i) {
            const double t = -1.0 + 2.0 * i / (n - 1);
            const double k1 = kl * t, k2 = kp * t;
            line.parameter.push_back(k1);
            line.lambda.push_back(Complex(-1.0, k1 / ep));
            parab.parameter.push_back(k2);
            parab.lambda.push_back(
                Complex(-p.m - ell * ell - k2 * k2, c_s * k2));
        }
        out.curves.push_back(std::move(line));
        out.curves.push_back(std::move(parab));
        out.rightmost = -std::min(p.m + ell * ell, 1.0);
        return out;
    }
    if (state != SteadyStateKind::vegetated)
        throw ConfigError(
            "essential spectrum is reported for the desert and vegetated "
            "states only");

    if (!(p.a / p.m > 4.0 * p.b + 1.0 / p.b))
        throw WindowError(
            "vegetated essential spectrum requires a/m > 4b + 1/b", "canard");
    double U2 = 0.0, V2 = 0.0;
    for (const auto& s : uniform_steady_states(p))
        if (s.kind == SteadyStateKind::vegetated) {
            U2 = s.u;
            V2 = s.v;
        }

    const double numax = 10.0 * (1.0 + std::abs(c_s));
    SpectralCurve hi{"dispersion-upper", {}, {}};
    SpectralCurve lo{"dispersion-lower", {}, {}};
    const int n = 1601;
    for (int i = 0; i < n; ++i) {
        const double nu = -numax + 2.0 * numax * i / (n - 1);
        auto r = spectrum_detail::vegetated_dispersion(nu, p, c_s, ell, U2, V2);
        if (r.first.real() < r.second.real()) std::swap(r.first, r.second);
        hi.parameter.push_back(nu);
        hi.lambda.push_back(r.first);
        lo.parameter.push_back(nu);
        lo.lambda.push_back(r.second);
    }
    out.curves.push_back(std::move(hi));
    out.curves.push_back(std::move(lo));

    // The curves are even in nu up to conjugation, so the rightmost point
    // lives at some nu >= 0; locate it on a fine grid and polish by golden
    // section down to the last digits.
    auto g = [&](double nu) {
        return spectrum_detail::vegetated_max_re(nu, p, c_s, ell, U2, V2);
    };
    const int nf = 4001;
    int best = 0;
    double gbest = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < nf; ++i) {
        const double v = g(numax * i / (nf - 1));
        if (v > gbest) {
            gbest = v;
            best = i;
        }
    }
    double lo_nu = numax * std::max(0, best - 1) / (nf - 1);
    double hi_nu = numax * std::min(nf - 1, best + 1) / (nf - 1);
    const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
    double x1 = hi_nu - gr * (hi_nu - lo_nu), x2 = lo_nu + gr * (hi_nu - lo_nu);
    double f1 = g(x1), f2 = g(x2);
    for (int it = 0; it < 80 && hi_nu - lo_nu > 1e-13; ++it) {
        if (f1 < f2) {
            lo_nu = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo_nu + gr * (hi_nu - lo_nu);
            f2 = g(x2);
        } else {
            hi_nu = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi_nu - gr * (hi_nu - lo_nu);
            f1 = g(x1);
        }
    }
    out.rightmost = std::max(gbest, std::max(f1, f2));
    if (!(out.rightmost < 0.0))
        throw SolverError(
            "vegetated essential spectrum reaches the imaginary axis");
    return out;
}

// ---- point spectrum --------------------------------------------------------

struct SearchRegion {
    Complex center{0.0, 0.0};
    double radius = 0.5;
};

struct Eigenpair {
    Complex lambda;
    double residual = 0.0;  // ||L w - lambda w|| / ||w||
    Eigen::VectorXcd u, v;  // eigenfunction on the report mesh
    // |<w, wave'>| / (||w|| ||wave'||), identifies the translation mode
    double derivative_similarity = 0.0;
    // set when the eigenvalue is not strictly right of the far-field
    // essential spectrum, i.e. it may approximate a continuum mode
    bool essential_warning = false;
};

struct PointSpectrum {
    std::vector<double> xi;
    std::vector<Eigenpair> pairs;  // sorted by distance from region center
    double essential_rightmost = 0.0;
};

struct SpectrumOptions {
    double eta = 0.0;        // exponential weight e^{eta xi} on the frame
    int refine = 1;          // mesh points per wave cell
    int krylov = 80;         // Arnoldi subspace dimension
    double residual_tol = 1e-8;
    int max_pairs = 40;
};

namespace spectrum_detail {

// Fornberg weights: row m holds the m-th derivative weights at x0 from the
// given nodes (exact for polynomials up to degree n-1).
inline Eigen::MatrixXd fd_weights(const std::vector<double>& x, double x0,
                                  int mmax) {
    const int n = (int)x.size();
    Eigen::MatrixXd C = Eigen::MatrixXd::Zero(mmax + 1, n);
    double c1 = 1.0, c4 = x[0] - x0;
    C(0, 0) = 1.0;
    for (int i = 1; i < n; ++i) {
        const int mn = std::min(i, mmax);
        double c2 = 1.0;
        const double c5 = c4;
        c4 = x[i] - x0;
        for (int j = 0; j < i; ++j) {
            const double c3 = x[i] - x[j];
            c2 *= c3;
            if (j == i - 1) {
                for (int m = mn; m >= 1; --m)
                    C(m, i) = c1 * (m * C(m - 1, i - 1) - c5 * C(m, i - 1)) / c2;
                C(0, i) = -c1 * c5 * C(0, i - 1) / c2;
            }
            for (int m = mn; m >= 1; --m)
                C(m, j) = (c4 * C(m, j) - m * C(m - 1, j)) / c3;
            C(0, j) = c4 * C(0, j) / c3;
        }
        c1 = c2;
    }
    return C;
}

// The discretized linearized operator on the (optionally refined) wave mesh.
// Unknown layout: all u nodes except the rightmost, then all interior v
// nodes; for periodic waves the duplicate end node is identified instead.
struct Operator1D {
    std::vector<double> xi;
    bool periodic = false;
    int m = 0;                      // unique node count
    Eigen::SparseMatrix<double> A;
    std::vector<int> iu, iv;        // node -> unknown index, -1 if eliminated
    Eigen::VectorXd wave_deriv;     // (u', v') of the wave, unknown layout
    double ess_rightmost = std::numeric_limits<double>::quiet_NaN();
};

inline double essential_rightmost_for(const TravelingWaveSolution& w,
                                      double ell) {
    const double desert = -std::min(w.p.m + ell * ell, 1.0);
    switch (w.kind) {
        case WaveKind::stripe: return desert;
        case WaveKind::gap:
            return essential_boundary(SteadyStateKind::vegetated, w.p, w.c,
                                      ell)
                .rightmost;
        case WaveKind::front_veg_to_bare:
        case WaveKind::front_bare_to_veg:
            return std::max(desert,
                            essential_boundary(SteadyStateKind::vegetated,
                                               w.p, w.c, ell)
                                .rightmost);
        case WaveKind::periodic:
            // wavetrain background has no far field; no overlap warnings
            return std::numeric_limits<double>::quiet_NaN();
    }
    return desert;
}

inline Operator1D build_operator(const TravelingWaveSolution& wave, double ell,
                                 const SpectrumOptions& o) {
    if (!(o.refine >= 1 && o.refine <= 8))
        throw ConfigError("spectrum mesh refine factor must be in [1, 8]");
    const ModelParams& p = wave.p;
    const double ep = tw_detail::eps_tilde(p, wave.c);

    Operator1D op;
    op.periodic = wave.kind == WaveKind::periodic;

    // weight guard: the slowest far-field decay rate bounds usable eta
    if (o.eta != 0.0) {
        if (op.periodic)
            throw ConfigError("exponential weight needs a localized wave");
        const double rate = std::min(
            ep, 0.5 * (std::sqrt(wave.c * wave.c + 4.0 * (p.m + ell * ell)) -
                       std::abs(wave.c)));
        if (!(o.eta > -0.5 * rate && o.eta < 0.5 * rate))
            throw ConfigError(
                "exponential weight exceeds half the slowest far-field decay "
                "rate");
    }

    const int n = (int)wave.xi.size();
    const int cells = n - 1;
    for (int j = 0; j < cells; ++j) {
        const double x0 = wave.xi[j], x1 = wave.xi[j + 1];
        for (int r = 0; r < o.refine; ++r)
            op.xi.push_back(x0 + (x1 - x0) * r / o.refine);
    }
    if (!op.periodic) op.xi.push_back(wave.xi.back());
    op.m = (int)op.xi.size();
    const int m = op.m;

    // Node values are superconvergent, so keep them exact; points inserted
    // by refinement interpolate the node values with a 6-point Lagrange
    // window (the cubic Hermite interpolant is too lossy for eigenvalues).
    auto sample = [&](double x) {
        const int lo = std::clamp(
            (int)(std::upper_bound(wave.xi.begin(), wave.xi.end(), x) -
                  wave.xi.begin()) -
                3,
            0, n - 6);
        Eigen::Vector3d y = Eigen::Vector3d::Zero();
        for (int a = lo; a < lo + 6; ++a) {
            double w = 1.0;
            for (int b = lo; b < lo + 6; ++b)
                if (b != a) w *= (x - wave.xi[b]) / (wave.xi[a] - wave.xi[b]);
            y += w * wave.y.col(a);
        }
        return y;
    };
    std::vector<double> us(m), vs(m), du(m), dv(m);
    for (int i = 0; i < m; ++i) {
        const int cell = i / o.refine, off = i % o.refine;
        const bool at_node = off == 0 && cell < n;
        const Eigen::Vector3d y =
            at_node ? Eigen::Vector3d(wave.y.col(cell)) : sample(op.xi[i]);
        us[i] = y[0];
        vs[i] = y[1];
        const Eigen::Vector3d f = tw_detail::rhs(y, p, wave.c);
        du[i] = f[0];
        dv[i] = f[1];
    }

    op.iu.assign(m, -1);
    op.iv.assign(m, -1);
    int idx = 0;
    if (op.periodic) {
        for (int i = 0; i < m; ++i) op.iu[i] = idx++;
        for (int i = 0; i < m; ++i) op.iv[i] = idx++;
    } else {
        // one inflow condition for the first-order u-row (right end, where
        // the advection carries information in from), Dirichlet pair for v
        for (int i = 0; i + 1 < m; ++i) op.iu[i] = idx++;
        for (int i = 1; i + 1 < m; ++i) op.iv[i] = idx++;
    }
    const int size = idx;
    const double T = wave.T;

    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve((size_t)size * 14);
    auto node_of = [&](int r) {
        int k = r % m;
        if (k < 0) k += m;
        return k;
    };
    auto coord_of = [&](int r) {
        const int k = node_of(r);
        return op.xi[k] + T * std::floor((double)r / m);
    };

    std::vector<double> xw;
    std::vector<int> jw;
    for (int i = 0; i < m; ++i) {
        const double gl = -p.m - ell * ell +
                          (2.0 - 3.0 * p.b * vs[i]) * us[i] * vs[i];
        const double cu = 1.0 + vs[i] * vs[i];

        // u-row: upwinded first derivative (information flows right to left)
        if (op.iu[i] >= 0) {
            xw.clear();
            jw.clear();
            if (op.periodic) {
                for (int r = i - 2; r <= i + 3; ++r) {
                    jw.push_back(node_of(r));
                    xw.push_back(coord_of(r));
                }
            } else if (i + 3 <= m - 1) {
                const int lo = std::max(0, i - 2);
                for (int r = lo; r <= lo + 5; ++r) {
                    jw.push_back(r);
                    xw.push_back(op.xi[r]);
                }
            } else {
                // short right-biased stencil at the far tail, where the
                // u-component is exponentially negligible anyway
                jw = {i, i + 1};
                xw = {op.xi[i], op.xi[i + 1]};
            }
            const auto W = fd_weights(xw, op.xi[i], 1);
            const int row = op.iu[i];
            for (size_t k = 0; k < jw.size(); ++k)
                if (op.iu[jw[k]] >= 0)
                    trip.emplace_back(row, op.iu[jw[k]], W(1, k) / ep);
            trip.emplace_back(row, op.iu[i], -o.eta / ep - cu);
            if (op.iv[i] >= 0)
                trip.emplace_back(row, op.iv[i], -2.0 * us[i] * vs[i]);
        }

        // v-row: diffusion plus drift on a symmetric window
        if (op.iv[i] >= 0) {
            xw.clear();
            jw.clear();
            if (op.periodic) {
                for (int r = i - 3; r <= i + 3; ++r) {
                    jw.push_back(node_of(r));
                    xw.push_back(coord_of(r));
                }
            } else {
                const int w = std::min({3, i, m - 1 - i});
                for (int r = i - w; r <= i + w; ++r) {
                    jw.push_back(r);
                    xw.push_back(op.xi[r]);
                }
            }
            const auto W = fd_weights(xw, op.xi[i], 2);
            const int row = op.iv[i];
            const double cdrift = wave.c - 2.0 * o.eta;
            for (size_t k = 0; k < jw.size(); ++k)
                if (op.iv[jw[k]] >= 0)
                    trip.emplace_back(row, op.iv[jw[k]],
                                      W(2, k) + cdrift * W(1, k));
            trip.emplace_back(row, op.iv[i],
                              o.eta * o.eta - wave.c * o.eta + gl);
            if (op.iu[i] >= 0)
                trip.emplace_back(row, op.iu[i],
                                  (1.0 - p.b * vs[i]) * vs[i] * vs[i]);
        }
    }
    op.A.resize(size, size);
    op.A.setFromTriplets(trip.begin(), trip.end());
    op.A.makeCompressed();

    op.wave_deriv.resize(size);
    for (int i = 0; i < m; ++i) {
        if (op.iu[i] >= 0) op.wave_deriv[op.iu[i]] = du[i];
        if (op.iv[i] >= 0) op.wave_deriv[op.iv[i]] = dv[i];
    }
    op.ess_rightmost = essential_rightmost_for(wave, ell);
    return op;
}

using SpMatC = Eigen::SparseMatrix<Complex>;

inline SpMatC shifted(const SpMatC& A, Complex sigma) {
    SpMatC I(A.rows(), A.cols());
    I.setIdentity();
    return A - sigma * I;
}

// Shift-invert Arnoldi around sigma followed by inverse-iteration polish of
// every Ritz candidate near the region.  Returns (lambda, w, residual).
struct RitzPair {
    Complex lambda;
    Eigen::VectorXcd w;
    double residual = 0.0;
};

inline std::vector<RitzPair> eig_near(const SpMatC& A, const SearchRegion& rg,
                                      const SpectrumOptions& o) {
    const int size = (int)A.rows();
    const int k = std::min(o.krylov, size - 2);
    Complex sigma = rg.center;

    Eigen::SparseLU<SpMatC> lu;
    for (int tries = 0;; ++tries) {
        lu.compute(shifted(A, sigma));
        if (lu.info() == Eigen::Success) break;
        if (tries == 3) throw SolverError("shifted operator failed to factor");
        sigma += Complex(1e-8, 1e-8) * (1.0 + std::abs(sigma));
    }

    std::mt19937 gen(12345);
    std::normal_distribution<double> nd;
    Eigen::MatrixXcd V(size, k + 1);
    Eigen::MatrixXcd H = Eigen::MatrixXcd::Zero(k + 1, k);
    Eigen::VectorXcd v0(size);
    for (int i = 0; i < size; ++i) v0[i] = Complex(nd(gen), nd(gen));
    V.col(0) = v0 / v0.norm();

    int keff = k;
    for (int j = 0; j < k; ++j) {
        Eigen::VectorXcd w = lu.solve(V.col(j));
        for (int pass = 0; pass < 2; ++pass)
            for (int i = 0; i <= j; ++i) {
                const Complex h = V.col(i).adjoint() * w;
                H(i, j) += h;
                w -= h * V.col(i);
            }
        const double nrm = w.norm();
        H(j + 1, j) = nrm;
        if (nrm < 1e-12) {
            keff = j + 1;
            break;
        }
        V.col(j + 1) = w / nrm;
    }

    Eigen::ComplexEigenSolver<Eigen::MatrixXcd> es(H.topLeftCorner(keff, keff));
    struct Cand {
        Complex theta;
        int idx;
    };
    std::vector<Cand> cands;
    for (int i = 0; i < keff; ++i)
        cands.push_back({es.eigenvalues()[i], i});
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        return std::abs(a.theta) > std::abs(b.theta);
    });

    std::vector<RitzPair> out;
    for (const auto& c : cands) {
        if ((int)out.size() >= o.max_pairs) break;
        if (std::abs(c.theta) < 1e-12) continue;
        Complex lam = sigma + 1.0 / c.theta;
        if (std::abs(lam - rg.center) > 1.2 * rg.radius) continue;
        Eigen::VectorXcd w =
            V.leftCols(keff) * es.eigenvectors().col(c.idx);
        w /= w.norm();

        double res = (A * w - lam * w).norm();
        for (int it = 0; it < 5 && res > 0.1 * o.residual_tol; ++it) {
            Eigen::SparseLU<SpMatC> plu;
            plu.compute(shifted(A, lam));
            if (plu.info() != Eigen::Success) {
                lam += Complex(1e-12, 1e-12) * (1.0 + std::abs(lam));
                continue;
            }
            Eigen::VectorXcd z = plu.solve(w);
            const double zn = z.norm();
            if (!(zn > 0.0) || !std::isfinite(zn)) break;
            w = z / zn;
            lam = (w.adjoint() * (A * w))(0, 0);
            res = (A * w - lam * w).norm();
        }
        const bool dup =
            std::any_of(out.begin(), out.end(), [&](const RitzPair& r) {
                return std::abs(r.lambda - lam) <
                       3e-9 * (1.0 + std::abs(lam));
            });
        if (!dup) out.push_back({lam, std::move(w), res});
    }
    return out;
}

}  // namespace spectrum_detail

inline PointSpectrum point_spectrum(const TravelingWaveSolution& wave,
                                    double ell,
                                    const SearchRegion& region = {},
                                    const SpectrumOptions& opts = {}) {
    if (!(wave.residual_norm < 1e-6) || wave.xi.size() < 8)
        throw ConfigError("point spectrum needs a converged wave profile");
    auto op = spectrum_detail::build_operator(wave, ell, opts);
    const auto A = op.A.cast<Complex>().eval();
    auto ritz = spectrum_detail::eig_near(A, region, opts);

    PointSpectrum out;
    out.xi = op.xi;
    out.essential_rightmost = op.ess_rightmost;
    const double dn = op.wave_deriv.norm();
    const int m = op.m;
    for (auto& r : ritz) {
        if (std::abs(r.lambda - region.center) > region.radius) continue;
        if (!(r.residual < opts.residual_tol)) continue;
        Eigenpair e;
        e.lambda = r.lambda;
        e.residual = r.residual;
        e.u = Eigen::VectorXcd::Zero(m);
        e.v = Eigen::VectorXcd::Zero(m);
        for (int i = 0; i < m; ++i) {
            if (op.iu[i] >= 0) e.u[i] = r.w[op.iu[i]];
            if (op.iv[i] >= 0) e.v[i] = r.w[op.iv[i]];
        }
        if (dn > 0.0)
            e.derivative_similarity =
                std::abs((r.w.adjoint() *
                          op.wave_deriv.cast<Complex>())(0, 0)) /
                (r.w.norm() * dn);
        if (std::isfinite(op.ess_rightmost))
            e.essential_warning =
                r.lambda.real() <= op.ess_rightmost + 1e-6;
        out.pairs.push_back(std::move(e));
    }
    std::sort(out.pairs.begin(), out.pairs.end(),
              [&](const Eigenpair& a, const Eigenpair& b) {
                  return std::abs(a.lambda - region.center) <
                         std::abs(b.lambda - region.center);
              });
    return out;
}

// ---- transverse scan -------------------------------------------------------

struct ScanEig {
    Complex lambda;
    double residual = 0.0;
    double derivative_similarity = 0.0;
    bool essential_warning = false;
};

struct ScanPoint {
    double ell = 0.0;
    Complex lambda;
    double residual = 0.0;
};

struct PointSpectrumScan {
    std::vector<double> ell_grid;
    std::vector<std::vector<ScanEig>> eigenvalues;  // aligned with ell_grid
    std::vector<ScanPoint> lambda0_curve;
    std::vector<ScanPoint> lambdac_curve;  // empty for single-front waves
    double lambda0_slope0 = 0.0;  // d lambda0 / d ell at 0, finite differences
    double lambda0_curv0 = 0.0;   // d^2 lambda0 / d ell^2 at 0
    double max_quadratic_dev = 0.0;  // max |lambda0(ell) - lambda0(0) + ell^2|
    bool crossing_flag = false;   // branch assignment got ambiguous somewhere
};

inline PointSpectrumScan transverse_scan(const TravelingWaveSolution& wave,
                                         const std::vector<double>& ell_grid,
                                         const SpectrumOptions& opts = {}) {
    if (ell_grid.empty()) throw ConfigError("transverse scan needs a grid");
    for (double l : ell_grid)
        if (!(std::abs(l) <= 8.0))
            throw ConfigError("transverse wavenumber out of range");

    const bool two_fronts =
        wave.kind == WaveKind::stripe || wave.kind == WaveKind::gap ||
        wave.kind == WaveKind::periodic;

    PointSpectrumScan out;
    out.ell_grid = ell_grid;
    out.eigenvalues.resize(ell_grid.size());

    std::vector<size_t> order(ell_grid.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return std::abs(ell_grid[a]) < std::abs(ell_grid[b]);
    });

    // nearest-continuation from the smallest |ell| outward
    Complex l0_prev(0.0, 0.0), lc_prev(0.0, 0.0);
    double ell_prev = 0.0;
    bool have_prev = false, have_c = two_fronts;
    std::vector<std::pair<double, ScanPoint>> curve0, curvec;
    for (size_t oi : order) {
        const double ell = ell_grid[oi];
        const double shift =
            have_prev ? (ell_prev * ell_prev - ell * ell) : -ell * ell;
        const Complex pred0 = (have_prev ? l0_prev : Complex(0, 0)) + shift;
        const Complex predc = (have_prev ? lc_prev : Complex(0, 0)) + shift;

        SearchRegion rg;
        rg.center = 0.5 * (pred0 + predc);
        rg.radius = std::max(0.35, 3.0 * std::abs(shift));
        auto ps = point_spectrum(wave, ell, rg, opts);
        auto& lst = out.eigenvalues[oi];
        for (const auto& e : ps.pairs)
            lst.push_back({e.lambda, e.residual, e.derivative_similarity,
                           e.essential_warning});
        if (ps.pairs.empty())
            throw SolverError("transverse scan lost both critical branches");

        auto nearest = [&](Complex pred, size_t skip, bool flag_ties) {
            size_t best = ps.pairs.size();
            double d0 = std::numeric_limits<double>::infinity(), d1 = d0;
            for (size_t i = 0; i < ps.pairs.size(); ++i) {
                if (i == skip) continue;
                const double d = std::abs(ps.pairs[i].lambda - pred);
                if (d < d0) {
                    d1 = d0;
                    d0 = d;
                    best = i;
                } else if (d < d1) {
                    d1 = d;
                }
            }
            if (flag_ties && d1 < 1.2 * d0 && std::isfinite(d1))
                out.crossing_flag = true;
            return best;
        };
        const size_t none = ps.pairs.size();
        const size_t i0 = nearest(pred0, none, have_prev);
        curve0.push_back(
            {ell, {ell, ps.pairs[i0].lambda, ps.pairs[i0].residual}});
        l0_prev = ps.pairs[i0].lambda;
        if (have_c) {
            // on the seed point the two branches start at the same guess, so
            // the interface branch is simply the other near-zero eigenvalue
            const size_t ic = have_prev ? nearest(predc, none, true)
                                        : nearest(predc, i0, false);
            if (ic == none)
                throw SolverError("transverse scan lost the interface branch");
            if (ic == i0) out.crossing_flag = true;
            curvec.push_back(
                {ell, {ell, ps.pairs[ic].lambda, ps.pairs[ic].residual}});
            lc_prev = ps.pairs[ic].lambda;
        }
        ell_prev = ell;
        have_prev = true;
    }

    auto by_ell = [](const std::pair<double, ScanPoint>& a,
                     const std::pair<double, ScanPoint>& b) {
        return a.first < b.first;
    };
    std::sort(curve0.begin(), curve0.end(), by_ell);
    std::sort(curvec.begin(), curvec.end(), by_ell);
    for (auto& c : curve0) out.lambda0_curve.push_back(c.second);
    for (auto& c : curvec) out.lambdac_curve.push_back(c.second);

    // curvature at ell = 0 from the closest three curve samples
    if (out.lambda0_curve.size() >= 3) {
        std::vector<size_t> near(out.lambda0_curve.size());
        for (size_t i = 0; i < near.size(); ++i) near[i] = i;
        std::sort(near.begin(), near.end(), [&](size_t a, size_t b) {
            return std::abs(out.lambda0_curve[a].ell) <
                   std::abs(out.lambda0_curve[b].ell);
        });
        std::vector<double> xs;
        std::vector<Complex> fs;
        for (size_t i = 0; i < 3; ++i) {
            xs.push_back(out.lambda0_curve[near[i]].ell);
            fs.push_back(out.lambda0_curve[near[i]].lambda);
        }
        const auto W = spectrum_detail::fd_weights(xs, 0.0, 2);
        Complex d1(0, 0), d2(0, 0);
        for (int i = 0; i < 3; ++i) {
            d1 += W(1, i) * fs[i];
            d2 += W(2, i) * fs[i];
        }
        out.lambda0_slope0 = d1.real();
        out.lambda0_curv0 = d2.real();
    }

    if (!out.lambda0_curve.empty()) {
        Complex base = out.lambda0_curve.front().lambda;
        double best = std::numeric_limits<double>::infinity();
        for (const auto& c : out.lambda0_curve)
            if (std::abs(c.ell) < best) {
                best = std::abs(c.ell);
                base = c.lambda;
            }
        for (const auto& c : out.lambda0_curve)
            out.max_quadratic_dev =
                std::max(out.max_quadratic_dev,
                         std::abs(c.lambda - base + c.ell * c.ell));
    }
    return out;
}

}  // namespace klab
