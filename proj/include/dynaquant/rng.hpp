#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace dynaquant {

using Rng = std::mt19937_64;

/// Uniform draw in the open interval (0, 1), built from the raw 64-bit stream so the
/// sequence does not depend on the standard library's distribution implementation.
inline double uniform_open01(Rng& rng) {
    return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) {
    return lo + (hi - lo) * uniform_open01(rng);
}

/// Standard Gumbel(0, 1) sample.
inline double gumbel(Rng& rng) {
    return -std::log(-std::log(uniform_open01(rng)));
}

/// Box-Muller; consumes two raw draws per call.
inline double standard_normal(Rng& rng) {
    const double u1 = uniform_open01(rng);
    const double u2 = uniform_open01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

}  // namespace dynaquant
