#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "klab/common.hpp"
#include "klab/sim.hpp"
#include "klab/spectrum.hpp"
#include "klab/tw.hpp"

// Artifact plumbing: every file is staged to <path>.tmp and renamed into
// place, so a crash never leaves a half-written artifact under the final
// name.  All floating-point text uses %.17g, which round-trips doubles and
// keeps reruns byte-identical.

namespace klab {

struct ArtifactInfo {
    std::string path;
    std::size_t rows = 0;   // data rows for CSV, grid cells for binary
    std::size_t bytes = 0;
    std::uint64_t checksum = 0;

    std::string manifest_line() const {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%016llx",
                      static_cast<unsigned long long>(checksum));
        return path + " rows=" + std::to_string(rows) +
               " bytes=" + std::to_string(bytes) + " fnv1a=" + buf;
    }
};

namespace io_detail {

inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 14695981039346656037ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string g17(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

inline ArtifactInfo commit(const std::string& path, const std::string& payload, std::size_t rows) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(target.parent_path(), ec);
        if (ec) throw ConfigError("cannot create directory " + target.parent_path().string());
    }
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ConfigError("cannot open " + tmp.string() + " for writing");
        out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
        out.flush();
        if (!out) throw ConfigError("short write to " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) throw ConfigError("cannot rename " + tmp.string() + " into place");
    return {path, rows, payload.size(), fnv1a(payload.data(), payload.size())};
}

template <class T>
inline void append_le(std::string& s, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    char buf[sizeof v];
    std::memcpy(buf, &v, sizeof v);
    // byte order is little-endian on every supported target; assert rather
    // than swap
    static_assert(std::endian::native == std::endian::little);
    s.append(buf, sizeof v);
}

}  // namespace io_detail

inline ArtifactInfo write_text(const std::string& path, const std::string& payload,
                               std::size_t rows = 0) {
    return io_detail::commit(path, payload, rows);
}

inline std::uint64_t file_checksum(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path);
    std::uint64_t h = 14695981039346656037ull;
    char buf[1 << 16];
    while (in.read(buf, sizeof buf) || in.gcount() > 0)
        h = io_detail::fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
    return h;
}

// branch CSV: parameter,c,T,B,v_max,fold_flag
inline ArtifactInfo write_branch_csv(const std::string& path, const ContinuationBranch& br) {
    std::string s = "parameter,c,T,B,v_max,fold_flag\n";
    for (const auto& pt : br.points) {
        using io_detail::g17;
        s += g17(pt.parameter) + "," + g17(pt.c) + "," + g17(pt.T) + "," + g17(pt.B) + "," +
             g17(pt.v_max) + "," + (pt.fold_flag ? "1" : "0") + "\n";
    }
    return io_detail::commit(path, s, br.points.size());
}

// transverse scan CSV: ell,branch,re_lambda,im_lambda,residual
inline ArtifactInfo write_scan_csv(const std::string& path, const PointSpectrumScan& scan) {
    std::string s = "ell,branch,re_lambda,im_lambda,residual\n";
    std::size_t rows = 0;
    using io_detail::g17;
    auto emit = [&](const char* branch, const std::vector<ScanPoint>& curve) {
        for (const auto& pt : curve) {
            s += g17(pt.ell) + std::string(",") + branch + "," + g17(pt.lambda.real()) + "," +
                 g17(pt.lambda.imag()) + "," + g17(pt.residual) + "\n";
            ++rows;
        }
    };
    emit("translation", scan.lambda0_curve);
    emit("interface", scan.lambdac_curve);
    for (std::size_t i = 0; i < scan.ell_grid.size(); ++i)
        for (const auto& e : scan.eigenvalues[i]) {
            s += g17(scan.ell_grid[i]) + ",all," + g17(e.lambda.real()) + "," +
                 g17(e.lambda.imag()) + "," + g17(e.residual) + "\n";
            ++rows;
        }
    return io_detail::commit(path, s, rows);
}

// essential spectrum CSV: state,ell,curve_id,k_or_nu,re,im
inline ArtifactInfo write_essential_csv(const std::string& path,
                                        const std::vector<EssentialBoundary>& bounds) {
    std::string s = "state,ell,curve_id,k_or_nu,re,im\n";
    std::size_t rows = 0;
    using io_detail::g17;
    for (const auto& eb : bounds) {
        const char* st = eb.state == SteadyStateKind::desert ? "desert" : "vegetated";
        for (const auto& c : eb.curves)
            for (std::size_t i = 0; i < c.parameter.size(); ++i) {
                s += std::string(st) + "," + g17(eb.ell) + "," + c.id + "," +
                     g17(c.parameter[i]) + "," + g17(c.lambda[i].real()) + "," +
                     g17(c.lambda[i].imag()) + "\n";
                ++rows;
            }
    }
    return io_detail::commit(path, s, rows);
}

// space-time CSV of a fixed-y cross-section: t,x,u,v
inline ArtifactInfo write_spacetime_csv(const std::string& path,
                                        const std::vector<FieldSnapshot>& history,
                                        const SimConfig& cfg, int iy) {
    if (iy < 0 || iy >= cfg.ny) throw ConfigError("cross-section row out of range");
    std::string s = "t,x,u,v\n";
    std::size_t rows = 0;
    using io_detail::g17;
    for (const auto& snap : history)
        for (int ix = 0; ix < cfg.nx; ++ix) {
            s += g17(snap.t) + "," + g17((ix + 0.5) * cfg.dx()) + "," + g17(snap.at_u(ix, iy)) +
                 "," + g17(snap.at_v(ix, iy)) + "\n";
            ++rows;
        }
    return io_detail::commit(path, s, rows);
}

// wave profile CSV: xi,u,v,q
inline ArtifactInfo write_wave_csv(const std::string& path, const TravelingWaveSolution& w) {
    std::string s = "xi,u,v,q\n";
    using io_detail::g17;
    for (std::size_t i = 0; i < w.xi.size(); ++i)
        s += g17(w.xi[i]) + "," + g17(w.y(0, i)) + "," + g17(w.y(1, i)) + "," + g17(w.y(2, i)) +
             "\n";
    return io_detail::commit(path, s, w.xi.size());
}

// binary snapshot, magic KLGRID1: u32 nx, u32 ny, f64 t, f64 Lx, f64 Ly,
// then nx*ny row-major u values, then v values, all little-endian
inline ArtifactInfo write_grid(const std::string& path, const FieldSnapshot& snap, double Lx,
                               double Ly) {
    std::string s;
    s.reserve(27 + 16 * snap.u.size());
    s += "KLGRID1";
    io_detail::append_le<std::uint32_t>(s, static_cast<std::uint32_t>(snap.nx));
    io_detail::append_le<std::uint32_t>(s, static_cast<std::uint32_t>(snap.ny));
    io_detail::append_le<double>(s, snap.t);
    io_detail::append_le<double>(s, Lx);
    io_detail::append_le<double>(s, Ly);
    for (double x : snap.u) io_detail::append_le<double>(s, x);
    for (double x : snap.v) io_detail::append_le<double>(s, x);
    return io_detail::commit(path, s, snap.u.size());
}

struct GridFile {
    FieldSnapshot snap;
    double Lx = 0.0, Ly = 0.0;
};

inline GridFile read_grid(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path);
    char magic[7];
    if (!in.read(magic, 7) || std::memcmp(magic, "KLGRID1", 7) != 0)
        throw ConfigError(path + " is not a KLGRID1 file");
    auto get = [&](auto& v) {
        if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
            throw ConfigError(path + " is truncated");
    };
    std::uint32_t nx = 0, ny = 0;
    get(nx);
    get(ny);
    GridFile g;
    g.snap.nx = static_cast<int>(nx);
    g.snap.ny = static_cast<int>(ny);
    get(g.snap.t);
    get(g.Lx);
    get(g.Ly);
    if (nx == 0 || ny == 0 || static_cast<std::uint64_t>(nx) * ny > (1u << 28))
        throw ConfigError(path + " has an implausible grid size");
    g.snap.u.resize(static_cast<std::size_t>(nx) * ny);
    g.snap.v.resize(g.snap.u.size());
    for (auto* f : {&g.snap.u, &g.snap.v})
        if (!in.read(reinterpret_cast<char*>(f->data()),
                     static_cast<std::streamsize>(f->size() * sizeof(double))))
            throw ConfigError(path + " is truncated");
    return g;
}

}  // namespace klab
