#pragma once

#include <cstdio>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "klab/io.hpp"
#include "klab/melnikov.hpp"
#include "klab/model.hpp"
#include "klab/sim.hpp"
#include "klab/singular.hpp"
#include "klab/spectrum.hpp"
#include "klab/tw.hpp"

// Batch driver behind the `klab` binary: one JSON config per run, artifacts
// written through the atomic io layer, manifest lines printed and appended to
// <out-dir>/MANIFEST.txt.  Exit codes: 0 ok, 2 config error, 3 solver
// failure, 4 verification failure.

namespace klab::cli {

using nlohmann::json;

namespace detail {

inline void check_keys(const json& j, const std::string& ctx,
                       std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(ctx + " must be a JSON object");
    for (const auto& [key, val] : j.items()) {
        bool ok = false;
        for (const char* k : allowed)
            if (key == k) ok = true;
        if (!ok) throw ConfigError("unknown key \"" + key + "\" in " + ctx);
    }
}

inline double num(const json& j, const char* key, std::optional<double> dflt = std::nullopt) {
    if (!j.contains(key)) {
        if (dflt) return *dflt;
        throw ConfigError(std::string("missing required number \"") + key + "\"");
    }
    if (!j[key].is_number())
        throw ConfigError(std::string("\"") + key + "\" must be a number");
    return j[key].get<double>();
}

inline long integer(const json& j, const char* key, std::optional<long> dflt = std::nullopt) {
    if (!j.contains(key)) {
        if (dflt) return *dflt;
        throw ConfigError(std::string("missing required integer \"") + key + "\"");
    }
    if (!j[key].is_number_integer())
        throw ConfigError(std::string("\"") + key + "\" must be an integer");
    return j[key].get<long>();
}

inline std::string str(const json& j, const char* key,
                       std::optional<std::string> dflt = std::nullopt) {
    if (!j.contains(key)) {
        if (dflt) return *dflt;
        throw ConfigError(std::string("missing required string \"") + key + "\"");
    }
    if (!j[key].is_string())
        throw ConfigError(std::string("\"") + key + "\" must be a string");
    return j[key].get<std::string>();
}

inline ModelParams params_from(const json& root) {
    if (!root.contains("params")) throw ConfigError("config needs a \"params\" block");
    const json& p = root["params"];
    check_keys(p, "params", {"a", "b", "m", "eps", "D"});
    ModelParams mp{num(p, "a"), num(p, "b"), num(p, "m"), num(p, "eps")};
    mp.D = num(p, "D", 0.0);
    mp.validate();
    return mp;
}

inline WaveKind wave_kind_from(const std::string& s) {
    if (s == "stripe") return WaveKind::stripe;
    if (s == "gap") return WaveKind::gap;
    if (s == "front_veg_to_bare") return WaveKind::front_veg_to_bare;
    if (s == "front_bare_to_veg") return WaveKind::front_bare_to_veg;
    throw ConfigError("unknown wave kind \"" + s + "\"");
}

inline OrbitKind orbit_kind_from(WaveKind k) {
    switch (k) {
        case WaveKind::stripe: return OrbitKind::stripe;
        case WaveKind::gap: return OrbitKind::gap;
        case WaveKind::front_veg_to_bare: return OrbitKind::front_veg_to_bare;
        case WaveKind::front_bare_to_veg: return OrbitKind::front_bare_to_veg;
        default: throw ConfigError("periodic waves are built via the \"periodic\" command");
    }
}

inline WaveSolveOptions solve_opts_from(const json& j) {
    WaveSolveOptions o;
    o.newton_tol = num(j, "newton_tol", o.newton_tol);
    o.max_newton = static_cast<int>(integer(j, "max_newton", o.max_newton));
    o.residual_tol = num(j, "residual_tol", o.residual_tol);
    return o;
}

inline TravelingWaveSolution solve_by_kind(WaveKind k, const ModelParams& p,
                                           const WaveSolveOptions& o = {}) {
    return solve_wave(k, p, build_singular_orbit(orbit_kind_from(k), p), o);
}

inline SimConfig sim_config_from(const json& j) {
    SimConfig cfg;
    cfg.Lx = num(j, "Lx", cfg.Lx);
    cfg.Ly = num(j, "Ly", cfg.Ly);
    cfg.nx = static_cast<int>(integer(j, "nx", std::lround(cfg.Lx / 0.25)));
    cfg.ny = static_cast<int>(integer(j, "ny", std::lround(cfg.Ly / 0.25)));
    cfg.dt = num(j, "dt", 0.0);
    cfg.t_end = num(j, "t_end", cfg.t_end);
    cfg.snapshot_every = num(j, "snapshot_every", cfg.snapshot_every);
    cfg.cfl_safety = num(j, "cfl_safety", cfg.cfl_safety);
    cfg.alpha = num(j, "alpha", cfg.alpha);
    const std::string bx = str(j, "bc_x", "periodic");
    if (bx == "periodic")
        cfg.bc_x = BcX::periodic;
    else if (bx == "neumann")
        cfg.bc_x = BcX::neumann;
    else
        throw ConfigError("bc_x must be periodic or neumann");
    const std::string by = str(j, "bc_y", "neumann");
    if (by == "neumann")
        cfg.bc_y = BcY::neumann;
    else if (by == "corner")
        cfg.bc_y = BcY::corner;
    else if (by == "periodic")
        cfg.bc_y = BcY::periodic;
    else
        throw ConfigError("bc_y must be neumann, corner, or periodic");
    return cfg;
}

inline std::string join_path(const std::string& dir, const std::string& rel) {
    if (rel.empty()) throw ConfigError("empty artifact path");
    if (rel.front() == '/') return rel;
    return dir.empty() || dir == "." ? rel : dir + "/" + rel;
}

}  // namespace detail

struct CommandResult {
    std::vector<ArtifactInfo> artifacts;
    std::string summary;  // human-readable lines for stdout
};

// ---- steady-states ---------------------------------------------------------

inline CommandResult cmd_steady_states(const json& root, const std::string& out_dir) {
    const auto p = detail::params_from(root);
    const json block = root.value("steady_states", json::object());
    detail::check_keys(block, "steady_states", {"csv"});
    const auto path = detail::join_path(out_dir, detail::str(block, "csv", "steady_states.csv"));

    std::string s = "state,u,v,trace,det,stable,oscillatory,degenerate\n";
    std::size_t rows = 0;
    for (const auto& st : uniform_steady_states(p)) {
        const auto hs = homogeneous_stability(st, p);
        const char* name = st.kind == SteadyStateKind::desert ? "desert"
                           : st.kind == SteadyStateKind::vegetated_unstable ? "vegetated_unstable"
                                                                            : "vegetated";
        using io_detail::g17;
        s += std::string(name) + "," + g17(st.u) + "," + g17(st.v) + "," + g17(hs.trace) + "," +
             g17(hs.det) + "," + (hs.stable ? "1" : "0") + "," + (hs.oscillatory ? "1" : "0") +
             "," + (st.degenerate ? "1" : "0") + "\n";
        ++rows;
    }
    CommandResult res;
    res.artifacts.push_back(write_text(path, s, rows));
    res.summary = std::to_string(rows) + " uniform steady states\n";
    return res;
}

// ---- singular-diagram ------------------------------------------------------

inline CommandResult cmd_singular_diagram(const json& root, const std::string& out_dir) {
    if (!root.contains("params")) throw ConfigError("config needs a \"params\" block");
    const json& pj = root["params"];
    detail::check_keys(pj, "params", {"a", "b", "m", "eps", "D"});
    const double b = detail::num(pj, "b"), m = detail::num(pj, "m");

    const json block = root.value("diagram", json::object());
    detail::check_keys(block, "diagram", {"ratio_lo", "ratio_hi", "n", "csv"});
    const double lo = detail::num(block, "ratio_lo", 1.0);
    const double hi = detail::num(block, "ratio_hi", 9.0);
    const int n = static_cast<int>(detail::integer(block, "n", 400));
    const auto path =
        detail::join_path(out_dir, detail::str(block, "csv", "singular_diagram.csv"));

    const auto diagram = singular_bifurcation_diagram(b, m, lo, hi, n);
    std::string s = "family,a_over_m,a,c,inside_window\n";
    for (const auto& pt : diagram.points) {
        using io_detail::g17;
        s += std::string(to_string(pt.family)) + "," + g17(pt.a_over_m) + "," +
             g17(pt.a_over_m * m) + "," + g17(pt.c) + "," + (pt.inside_window ? "1" : "0") + "\n";
    }
    CommandResult res;
    res.artifacts.push_back(write_text(path, s, diagram.points.size()));
    res.summary = "singular speeds for 4 families on a/m in [" + std::to_string(lo) + ", " +
                  std::to_string(hi) + "]\n";
    return res;
}

// ---- solve-wave ------------------------------------------------------------

inline CommandResult cmd_solve_wave(const json& root, const std::string& out_dir) {
    const auto p = detail::params_from(root);
    p.require_no_diffusion("solve-wave");
    const json block = root.value("wave", json::object());
    detail::check_keys(block, "wave",
                       {"kind", "csv", "newton_tol", "max_newton", "residual_tol"});
    const auto kind = detail::wave_kind_from(detail::str(block, "kind", "stripe"));
    const auto opts = detail::solve_opts_from(block);
    const auto path = detail::join_path(out_dir, detail::str(block, "csv", "wave.csv"));

    const auto w = detail::solve_by_kind(kind, p, opts);
    CommandResult res;
    res.artifacts.push_back(write_wave_csv(path, w));
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "%s: c = %.12g, residual = %.3g, %zu nodes, singular offset %.3g\n",
                  to_string(kind), w.c, w.residual_norm, w.xi.size(), w.singular_speed_offset);
    res.summary = buf;
    return res;
}

// ---- continue --------------------------------------------------------------

inline CommandResult cmd_continue(const json& root, const std::string& out_dir) {
    const auto p = detail::params_from(root);
    p.require_no_diffusion("continue");
    const json block = root.value("continue", json::object());
    detail::check_keys(block, "continue",
                       {"kind", "target", "max_points", "initial_step", "max_step", "csv"});
    const auto kind = detail::wave_kind_from(detail::str(block, "kind", "stripe"));
    const double target = detail::num(block, "target");
    ContinuationOptions co;
    co.max_points = static_cast<int>(detail::integer(block, "max_points", co.max_points));
    co.initial_step = detail::num(block, "initial_step", co.initial_step);
    co.max_step = detail::num(block, "max_step", co.max_step);
    const auto path = detail::join_path(out_dir, detail::str(block, "csv", "branch.csv"));

    const auto start = detail::solve_by_kind(kind, p);
    const auto br = continue_branch(start, BranchParameter::rainfall, target, co);
    CommandResult res;
    res.artifacts.push_back(write_branch_csv(path, br));
    char buf[256];
    std::snprintf(buf, sizeof buf, "branch in a: %zu points, %zu folds, termination %s\n",
                  br.points.size(), br.fold_indices.size(), br.termination.c_str());
    res.summary = buf;
    return res;
}

// ---- periodic --------------------------------------------------------------

inline CommandResult cmd_periodic(const json& root, const std::string& out_dir) {
    const auto p = detail::params_from(root);
    p.require_no_diffusion("periodic");
    const json block = root.value("periodic", json::object());
    detail::check_keys(block, "periodic",
                       {"kind", "T", "continue_to_T", "csv", "wave_csv", "max_points"});
    const auto kind = detail::wave_kind_from(detail::str(block, "kind", "stripe"));
    const double T = detail::num(block, "T");

    const auto hom = detail::solve_by_kind(kind, p);
    auto per = solve_periodic(p, T, hom);

    CommandResult res;
    char buf[256];
    std::snprintf(buf, sizeof buf, "periodic %s at T = %.6g: c = %.12g\n", to_string(kind), T,
                  per.c);
    res.summary = buf;

    if (block.contains("continue_to_T")) {
        ContinuationOptions co;
        co.max_points = static_cast<int>(detail::integer(block, "max_points", co.max_points));
        const auto br = continue_in_period(per, detail::num(block, "continue_to_T"), co);
        const auto path =
            detail::join_path(out_dir, detail::str(block, "csv", "periodic_branch.csv"));
        res.artifacts.push_back(write_branch_csv(path, br));
        std::snprintf(buf, sizeof buf, "period branch: %zu points, termination %s\n",
                      br.points.size(), br.termination.c_str());
        res.summary += buf;
        if (!br.solutions.empty()) per = br.solutions.back();
    }
    if (block.contains("wave_csv")) {
        const auto path = detail::join_path(out_dir, detail::str(block, "wave_csv"));
        res.artifacts.push_back(write_wave_csv(path, per));
    }
    if (res.artifacts.empty()) {
        const auto path = detail::join_path(out_dir, detail::str(block, "csv", "periodic.csv"));
        res.artifacts.push_back(write_wave_csv(path, per));
    }
    return res;
}

// ---- spectrum --------------------------------------------------------------

inline CommandResult cmd_spectrum(const json& root, const std::string& out_dir) {
    const auto p = detail::params_from(root);
    p.require_no_diffusion("spectrum");
    const json block = root.value("spectrum", json::object());
    detail::check_keys(block, "spectrum",
                       {"kind", "ell_grid", "eta", "refine", "center", "radius", "scan_csv",
                        "essential_csv"});
    const auto kind = detail::wave_kind_from(detail::str(block, "kind", "stripe"));

    std::vector<double> ells{0.0};
    if (block.contains("ell_grid")) {
        if (!block["ell_grid"].is_array() || block["ell_grid"].empty())
            throw ConfigError("\"ell_grid\" must be a nonempty array");
        ells.clear();
        for (const auto& e : block["ell_grid"]) {
            if (!e.is_number()) throw ConfigError("\"ell_grid\" entries must be numbers");
            ells.push_back(e.get<double>());
        }
    }
    SpectrumOptions so;
    so.eta = detail::num(block, "eta", so.eta);
    so.refine = static_cast<int>(detail::integer(block, "refine", so.refine));
    SearchRegion region;
    if (block.contains("center")) {
        const auto& c = block["center"];
        if (!c.is_array() || c.size() != 2) throw ConfigError("\"center\" must be [re, im]");
        region.center = {c[0].get<double>(), c[1].get<double>()};
    }
    region.radius = detail::num(block, "radius", region.radius);

    const auto wave = detail::solve_by_kind(kind, p);

    CommandResult res;
    PointSpectrumScan scan;
    if (ells.size() == 1) {
        const auto ps = point_spectrum(wave, ells.front(), region, so);
        scan.ell_grid = ells;
        scan.eigenvalues.push_back({});
        for (const auto& pr : ps.pairs) {
            scan.eigenvalues.back().push_back(
                {pr.lambda, pr.residual, pr.derivative_similarity, pr.essential_warning});
        }
        char buf[256];
        std::snprintf(buf, sizeof buf, "%zu eigenvalues near (%g, %g), essential edge %.6g\n",
                      ps.pairs.size(), region.center.real(), region.center.imag(),
                      ps.essential_rightmost);
        res.summary = buf;
    } else {
        scan = transverse_scan(wave, ells, so);
        char buf[256];
        std::snprintf(buf, sizeof buf,
                      "translation curvature %.6g, max quadratic deviation %.3g, crossing=%d\n",
                      scan.lambda0_curv0, scan.max_quadratic_dev, int(scan.crossing_flag));
        res.summary = buf;
    }
    res.artifacts.push_back(write_scan_csv(
        detail::join_path(out_dir, detail::str(block, "scan_csv", "scan.csv")), scan));

    // essential boundaries for whichever far-field states this wave touches
    std::vector<EssentialBoundary> bounds;
    for (double ell : ells) {
        try {
            bounds.push_back(essential_boundary(SteadyStateKind::desert, p, wave.c, ell));
        } catch (const ConfigError&) {
        }
        try {
            bounds.push_back(essential_boundary(SteadyStateKind::vegetated, p, wave.c, ell));
        } catch (const ConfigError&) {
        }
    }
    res.artifacts.push_back(write_essential_csv(
        detail::join_path(out_dir, detail::str(block, "essential_csv", "essential.csv")),
        bounds));
    return res;
}

// ---- simulate --------------------------------------------------------------

inline CommandResult cmd_simulate(const json& root, const std::string& out_dir) {
    const auto p = detail::params_from(root);
    const json block = root.value("simulate", json::object());
    detail::check_keys(block, "simulate",
                       {"kind", "periodic_T", "uniform", "grid_in", "Lx", "Ly", "nx", "ny", "dt",
                        "bc_x", "bc_y", "alpha", "t_end", "snapshot_every", "cfl_safety",
                        "noise", "bend_phi", "grid_out", "spacetime_csv", "spacetime_row",
                        "measure_speed"});
    const auto cfg = detail::sim_config_from(block);

    FieldSnapshot init;
    int sources = 0;
    sources += block.contains("kind") || block.contains("periodic_T");
    sources += block.contains("uniform");
    sources += block.contains("grid_in");
    if (sources != 1)
        throw ConfigError("simulate needs exactly one of \"kind\"/\"periodic_T\", \"uniform\", "
                          "\"grid_in\"");
    if (block.contains("uniform")) {
        const auto& u = block["uniform"];
        detail::check_keys(u, "uniform", {"u", "v"});
        init = uniform_state(detail::num(u, "u"), detail::num(u, "v"), cfg);
    } else if (block.contains("grid_in")) {
        const auto g = read_grid(detail::join_path(out_dir, detail::str(block, "grid_in")));
        init = g.snap;
        if (init.nx != cfg.nx || init.ny != cfg.ny)
            throw ConfigError("grid_in size does not match nx/ny");
    } else {
        ModelParams p1 = p;
        p1.D = 0.0;  // the 1D profile solver is advection-only
        const auto kind = detail::wave_kind_from(detail::str(block, "kind", "stripe"));
        auto w = detail::solve_by_kind(kind, p1);
        if (block.contains("periodic_T")) w = solve_periodic(p1, detail::num(block, "periodic_T"), w);
        BendSpec bend;
        bend.phi = detail::num(block, "bend_phi", 0.0);
        init = init_from_wave(w, cfg, bend);
    }

    const double noise = detail::num(block, "noise", 0.0);
    if (noise > 0.0) {
        std::mt19937 rng(static_cast<unsigned>(detail::integer(root, "seed", 12345)));
        std::uniform_real_distribution<double> un(-noise, noise);
        for (double& x : init.v) x = std::max(0.0, x + un(rng));
    }

    auto rr = run(init, p, cfg);

    CommandResult res;
    const auto grid_path =
        detail::join_path(out_dir, detail::str(block, "grid_out", "final.klgrid"));
    res.artifacts.push_back(write_grid(grid_path, rr.snapshots.back(), cfg.Lx, cfg.Ly));
    if (block.contains("spacetime_csv")) {
        const int row =
            static_cast<int>(detail::integer(block, "spacetime_row", cfg.ny / 2));
        res.artifacts.push_back(write_spacetime_csv(
            detail::join_path(out_dir, detail::str(block, "spacetime_csv")), rr.snapshots, cfg,
            row));
    }
    char buf[256];
    std::snprintf(buf, sizeof buf, "simulated to t = %.6g (%zu snapshots, %ld clipped)\n",
                  rr.snapshots.back().t, rr.snapshots.size(), rr.snapshots.back().clipped);
    res.summary = buf;
    if (block.value("measure_speed", false)) {
        const auto fit = measure_speed(rr.snapshots, p, cfg);
        std::snprintf(buf, sizeof buf, "tracked speed %.12g (fit rms %.3g, level %.6g)\n",
                      fit.speed, fit.residual, fit.level);
        res.summary += buf;
    }
    // a blown-up run still writes the last good state, then reports failure
    if (rr.aborted) throw SolverError(rr.error + " (last good snapshot written to " + grid_path + ")");
    return res;
}

// ---- corner ----------------------------------------------------------------

inline CommandResult cmd_corner(const json& root, const std::string& out_dir) {
    const auto p = detail::params_from(root);
    const json block = root.value("corner", json::object());
    detail::check_keys(block, "corner",
                       {"kind", "periodic_T", "phi", "Lx", "Ly", "nx", "ny", "dt", "bc_x",
                        "bc_y", "alpha", "t_end", "snapshot_every", "cfl_safety", "report_csv",
                        "profile_csv", "grid_out"});
    json simj = block;
    simj.erase("kind");
    simj.erase("periodic_T");
    simj.erase("phi");
    simj.erase("report_csv");
    simj.erase("profile_csv");
    simj.erase("grid_out");
    if (!simj.contains("bc_y")) simj["bc_y"] = "corner";
    const double phi = detail::num(block, "phi");
    if (!simj.contains("alpha")) {
        // default wall tilt consistent with the imposed bend
        simj["alpha"] = (phi >= 0.0 ? -1.0 : 1.0) * std::tan(std::abs(phi));
    }
    const auto cfg = detail::sim_config_from(simj);

    ModelParams p1 = p;
    p1.D = 0.0;
    const auto kind = detail::wave_kind_from(detail::str(block, "kind", "stripe"));
    auto w = detail::solve_by_kind(kind, p1);
    if (block.contains("periodic_T")) w = solve_periodic(p1, detail::num(block, "periodic_T"), w);

    auto rr = run(init_from_wave(w, cfg, BendSpec{phi}), p, cfg);
    if (rr.aborted) throw SolverError(rr.error);
    const auto rep = corner_report(rr.snapshots, p, cfg);

    CommandResult res;
    using io_detail::g17;
    {
        std::string s = "eta_plus,eta_minus,classification,measured_speed,partial\n";
        s += g17(rep.eta_plus) + "," + g17(rep.eta_minus) + "," + to_string(rep.classification) +
             "," + g17(rep.measured_speed) + "," + (rep.partial ? "1" : "0") + "\n";
        res.artifacts.push_back(write_text(
            detail::join_path(out_dir, detail::str(block, "report_csv", "corner.csv")), s, 1));
    }
    if (block.contains("profile_csv")) {
        std::string s = "y,h\n";
        for (std::size_t i = 0; i < rep.y.size(); ++i)
            s += g17(rep.y[i]) + "," + g17(rep.h_fit[i]) + "\n";
        res.artifacts.push_back(write_text(
            detail::join_path(out_dir, detail::str(block, "profile_csv")), s, rep.y.size()));
    }
    if (block.contains("grid_out"))
        res.artifacts.push_back(
            write_grid(detail::join_path(out_dir, detail::str(block, "grid_out")),
                       rr.snapshots.back(), cfg.Lx, cfg.Ly));
    char buf[256];
    std::snprintf(buf, sizeof buf, "corner: eta+ = %.6g, eta- = %.6g, %s, speed %.6g%s\n",
                  rep.eta_plus, rep.eta_minus, to_string(rep.classification), rep.measured_speed,
                  rep.partial ? " (partial)" : "");
    res.summary = buf;
    return res;
}

// ---- dispersion ------------------------------------------------------------

inline CommandResult cmd_dispersion(const json& root, const std::string& out_dir) {
    const auto p = detail::params_from(root);
    const json block = root.value("dispersion", json::object());
    detail::check_keys(block, "dispersion", {"kind", "phi_max", "n", "phi_grid", "csv"});
    const auto kind = detail::wave_kind_from(detail::str(block, "kind", "stripe"));

    std::vector<double> grid;
    if (block.contains("phi_grid")) {
        for (const auto& e : block["phi_grid"]) grid.push_back(e.get<double>());
    } else {
        const double pm = detail::num(block, "phi_max", 0.3);
        const int n = static_cast<int>(detail::integer(block, "n", 7));
        if (n < 3 || !(pm > 0.0)) throw ConfigError("dispersion needs n >= 3 and phi_max > 0");
        for (int i = 0; i < n; ++i) grid.push_back(-pm + 2.0 * pm * i / (n - 1));
    }

    const auto curve = directional_dispersion(kind, p, grid);
    std::string s = "phi,c,d,converged\n";
    using io_detail::g17;
    for (const auto& pt : curve.points)
        s += g17(pt.phi) + "," + g17(pt.c) + "," + g17(pt.d) + "," + (pt.converged ? "1" : "0") +
             "\n";
    CommandResult res;
    res.artifacts.push_back(write_text(
        detail::join_path(out_dir, detail::str(block, "csv", "dispersion.csv")), s,
        curve.points.size()));
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "c_s = %.12g, d''(0) centered %.6g, fit %.6g, linear term %.2g%s\n", curve.c_s,
                  curve.d2_centered, curve.d2_fit, curve.fit_linear,
                  curve.partial ? " (partial)" : "");
    res.summary = buf;
    return res;
}

// ---- verify ----------------------------------------------------------------

inline CommandResult cmd_verify(const json& root, const std::string& out_dir) {
    const json block = root.value("verify", json::object());
    detail::check_keys(block, "verify", {"manifest", "checks"});

    CommandResult res;
    bool all_ok = true;
    auto report = [&](bool ok, const std::string& line) {
        all_ok = all_ok && ok;
        res.summary += std::string(ok ? "[ok]   " : "[FAIL] ") + line + "\n";
    };

    if (block.contains("manifest")) {
        const auto mpath = detail::join_path(out_dir, detail::str(block, "manifest"));
        std::ifstream in(mpath);
        if (!in) throw VerifyError("manifest " + mpath + " is missing");
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::istringstream ls(line);
            std::string path, rows, bytes, sum;
            ls >> path >> rows >> bytes >> sum;
            if (sum.rfind("fnv1a=", 0) != 0)
                throw VerifyError("manifest line not understood: " + line);
            std::uint64_t want = std::stoull(sum.substr(6), nullptr, 16);
            std::uint64_t got;
            try {
                got = file_checksum(detail::join_path(out_dir, path));
            } catch (const ConfigError&) {
                throw VerifyError("artifact " + path + " is missing");
            }
            if (got != want) throw VerifyError("artifact " + path + " checksum mismatch");
            report(true, "checksum " + path);
        }
    }

    const json checks = block.value("checks", json::array());
    if (!checks.is_array()) throw ConfigError("\"checks\" must be an array");
    for (const auto& ck : checks) {
        const auto type = detail::str(ck, "type");
        if (type == "melnikov-vs-spectrum") {
            detail::check_keys(ck, "check", {"type", "params", "kind", "tol"});
            const auto p = detail::params_from(ck);
            const auto kind = detail::wave_kind_from(detail::str(ck, "kind", "stripe"));
            const double tol = detail::num(ck, "tol", 0.35);
            const auto pred = critical_eig_prediction(detail::orbit_kind_from(kind), p);
            const auto wave = detail::solve_by_kind(kind, p);
            const auto ps = point_spectrum(wave, 0.0);
            // smallest nonzero eigenvalue is the interface mode
            double lc = 0.0, best = 1e300;
            for (const auto& pr : ps.pairs) {
                if (pr.derivative_similarity > 0.999) continue;
                if (std::abs(pr.lambda) < best) {
                    best = std::abs(pr.lambda);
                    lc = pr.lambda.real();
                }
            }
            const double rel = std::abs(lc - pred.lambda_c) / std::abs(pred.lambda_c);
            char buf[160];
            std::snprintf(buf, sizeof buf,
                          "interface eigenvalue %.6g vs quadrature %.6g (rel %.3g, tol %g)", lc,
                          pred.lambda_c, rel, tol);
            report(rel <= tol, buf);
        } else if (type == "bvp-vs-sim-speed") {
            detail::check_keys(ck, "check", {"type", "params", "T", "t_end", "tol"});
            const auto p = detail::params_from(ck);
            const double T = detail::num(ck, "T", 120.0);
            const double tol = detail::num(ck, "tol", 0.05);
            auto per = solve_periodic(p, T, detail::solve_by_kind(WaveKind::stripe, p));
            SimConfig cfg;
            cfg.Lx = T;
            cfg.Ly = 6.0;
            cfg.nx = static_cast<int>(std::lround(T / 0.25));
            cfg.ny = 24;
            cfg.t_end = detail::num(ck, "t_end", 40.0);
            cfg.snapshot_every = cfg.t_end / 10.0;
            auto rr = run(init_from_wave(per, cfg), p, cfg);
            if (rr.aborted) throw SolverError(rr.error);
            const auto fit = measure_speed(rr.snapshots, p, cfg);
            const double rel = std::abs(fit.speed - per.c) / std::abs(per.c);
            char buf[160];
            std::snprintf(buf, sizeof buf, "sim speed %.6g vs BVP %.6g (rel %.3g, tol %g)",
                          fit.speed, per.c, rel, tol);
            report(rel <= tol, buf);
        } else if (type == "singular-vs-eps-speed") {
            detail::check_keys(ck, "check", {"type", "params", "kind", "tol_per_eps"});
            const auto p = detail::params_from(ck);
            const auto kind = detail::wave_kind_from(detail::str(ck, "kind", "stripe"));
            const double C = detail::num(ck, "tol_per_eps", 8.0);
            const auto orb = build_singular_orbit(detail::orbit_kind_from(kind), p);
            const auto wave = solve_wave(kind, p, orb);
            const double off = std::abs(wave.c - orb.speed);
            char buf[160];
            std::snprintf(buf, sizeof buf, "speed offset |c - c0| = %.6g vs %g * eps = %.6g",
                          off, C, C * p.eps);
            report(off <= C * p.eps, buf);
        } else {
            throw ConfigError("unknown check type \"" + type + "\"");
        }
    }
    if (checks.empty() && !block.contains("manifest")) res.summary = "nothing to verify\n";
    if (!all_ok) throw VerifyError("verification failed:\n" + res.summary);
    return res;
}

// ---- driver ----------------------------------------------------------------

inline json load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        // e.byte is a char offset; report it as line/column
        std::size_t line = 1, col = 1;
        for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        throw ConfigError("config parse error at line " + std::to_string(line) + ", column " +
                          std::to_string(col) + ": " + e.what());
    }
}

inline CommandResult dispatch(const std::string& cmd, const json& root,
                              const std::string& out_dir) {
    detail::check_keys(root, "config",
                       {"command", "params", "seed", "steady_states", "diagram", "wave",
                        "continue", "periodic", "spectrum", "simulate", "corner", "dispersion",
                        "verify"});
    if (root.contains("command") && root["command"].get<std::string>() != cmd)
        throw ConfigError("config is for command \"" + root["command"].get<std::string>() +
                          "\" but \"" + cmd + "\" was requested");
    if (cmd == "steady-states") return cmd_steady_states(root, out_dir);
    if (cmd == "singular-diagram") return cmd_singular_diagram(root, out_dir);
    if (cmd == "solve-wave") return cmd_solve_wave(root, out_dir);
    if (cmd == "continue") return cmd_continue(root, out_dir);
    if (cmd == "periodic") return cmd_periodic(root, out_dir);
    if (cmd == "spectrum") return cmd_spectrum(root, out_dir);
    if (cmd == "simulate") return cmd_simulate(root, out_dir);
    if (cmd == "corner") return cmd_corner(root, out_dir);
    if (cmd == "dispersion") return cmd_dispersion(root, out_dir);
    if (cmd == "verify") return cmd_verify(root, out_dir);
    throw ConfigError("unknown command \"" + cmd + "\"");
}

inline int main_impl(int argc, char** argv) {
    CLI::App app{"numerical laboratory for advection-dominated vegetation patterns"};
    std::string command, config_path, out_dir = ".";
    app.add_option("command", command,
                   "steady-states | singular-diagram | solve-wave | continue | periodic | "
                   "spectrum | simulate | corner | dispersion | verify")
        ->required();
    app.add_option("--config", config_path, "path to a JSON experiment config")->required();
    app.add_option("--out-dir", out_dir, "directory for artifacts (default .)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // CLI11 prints its own message; fold argument problems into exit 2
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        (void)thread_count();  // validate KLAB_THREADS before doing any work
        const json root = load_config(config_path);
        const auto res = dispatch(command, root, out_dir);
        std::fputs(res.summary.c_str(), stdout);
        if (!res.artifacts.empty()) {
            std::ofstream manifest(detail::join_path(out_dir, "MANIFEST.txt"), std::ios::app);
            for (const auto& a : res.artifacts) {
                std::fprintf(stdout, "artifact: %s\n", a.manifest_line().c_str());
                manifest << a.manifest_line() << "\n";
            }
        }
        return 0;
    } catch (const VerifyError& e) {
        std::fprintf(stderr, "verification failure: %s\n", e.what());
        return 4;
    } catch (const SolverError& e) {
        std::fprintf(stderr, "solver failure: %s\n", e.what());
        return 3;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    }
}

}  // namespace klab::cli
