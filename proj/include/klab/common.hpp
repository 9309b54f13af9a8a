#pragma once

#include <cstdlib>
#include <stdexcept>
#include <string>

namespace klab {

// Error taxonomy mirrored by the CLI exit codes: ConfigError -> 2,
// SolverError -> 3, VerifyError -> 4.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SolverError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct VerifyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Rejection of a singular construction outside its existence window.  Carries
// the name of the violated threshold so callers can report *why*.
struct WindowError : ConfigError {
    WindowError(const std::string& what, std::string threshold_name)
        : ConfigError(what), threshold(std::move(threshold_name)) {}
    std::string threshold;
};

inline constexpr double sq(double x) { return x * x; }

// Worker count for row-partitioned loops.  Read on every call so tests can
// flip the variable; the cost is one getenv per parallel region, not per cell.
inline int thread_count() {
    const char* s = std::getenv("KLAB_THREADS");
    if (!s || !*s) return 1;
    char* end = nullptr;
    const long n = std::strtol(s, &end, 10);
    if (*end != '\0' || n < 1 || n > 256)
        throw ConfigError("KLAB_THREADS must be an integer in [1, 256]");
    return static_cast<int>(n);
}

}  // namespace klab
