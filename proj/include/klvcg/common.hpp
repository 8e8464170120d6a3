#pragma once

#include <cstdint>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace klvcg {

// Error taxonomy. Everything user-facing derives from Error so the CLI can
// catch one type and print a single-line diagnostic.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Mismatched tensor shapes or dimension constraints.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// A caller violated an operation precondition.
class ContractError : public Error {
public:
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Bad configuration value or inconsistent config combination.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// File ingestion / serialization problems.
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// All randomness flows through explicitly passed Rng instances; there is no
// global generator anywhere in the library. Draws are hand-rolled on top of
// the (standardized, byte-stable) mt19937_64 stream because the std
// distributions are implementation-defined and would break cross-platform
// reproducibility of generated fixtures.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    int64_t index(int64_t n) {
        if (n <= 0) throw std::invalid_argument("Rng::index needs n > 0");
        return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
    }

    // Box-Muller; one fresh pair of draws per call.
    double normal(double mean, double stddev) {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
        return mean + stddev * z;
    }

    // Derive an independent child generator; used to give each video /
    // window its own stream so results do not depend on iteration order.
    Rng fork(uint64_t salt) {
        return Rng(next_u64() ^ (salt * 0x9e3779b97f4a7c15ull));
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

// Stable 64-bit string hash (FNV-1a); used to derive per-key RNG streams.
inline uint64_t fnv1a(const std::string& s) {
    uint64_t h = 14695981039346656037ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace klvcg
