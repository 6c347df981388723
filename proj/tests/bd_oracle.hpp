#pragma once

// Independent Bjøntegaard reference for 4-point curves: the cubic through four points
// is their Lagrange interpolant, so no least squares is involved, and the integral is
// a dense trapezoid sum instead of the closed form.

#include <algorithm>
#include <cmath>
#include <vector>

#include "dynaquant/metrics.hpp"
#include "dynaquant/rng.hpp"

namespace dynaquant::testing {

inline long double lagrange_log_rate(const RDCurve& curve, long double psnr) {
    const auto& p = curve.points();
    long double total = 0.0L;
    for (std::size_t i = 0; i < p.size(); ++i) {
        long double term = std::log10(static_cast<long double>(p[i].bpp));
        for (std::size_t j = 0; j < p.size(); ++j)
            if (j != i) term *= (psnr - p[j].psnr_db) / static_cast<long double>(p[i].psnr_db - p[j].psnr_db);
        total += term;
    }
    return total;
}

/// Requires exactly four points per curve.
inline double bd_rate_oracle(const RDCurve& anchor, const RDCurve& test, int samples = 10000) {
    const auto range = [](const RDCurve& c) {
        long double lo = c.points()[0].psnr_db, hi = lo;
        for (const auto& p : c.points()) {
            lo = std::min<long double>(lo, p.psnr_db);
            hi = std::max<long double>(hi, p.psnr_db);
        }
        return std::pair{lo, hi};
    };
    const auto [alo, ahi] = range(anchor);
    const auto [tlo, thi] = range(test);
    const long double lo = std::max(alo, tlo), hi = std::min(ahi, thi);
    const long double step = (hi - lo) / samples;
    long double integral = 0.0L;
    for (int i = 0; i <= samples; ++i) {
        const long double q = lo + step * i;
        const long double diff = lagrange_log_rate(test, q) - lagrange_log_rate(anchor, q);
        integral += (i == 0 || i == samples ? 0.5L : 1.0L) * diff;
    }
    const long double mean = integral * step / (hi - lo);
    return static_cast<double>((std::pow(10.0L, mean) - 1.0L) * 100.0L);
}

/// A plausible 4-point RD curve: PSNR rising roughly logarithmically with bpp.
inline RDCurve random_rd_curve(Rng& rng, double rate_scale, double psnr_shift) {
    std::vector<RDPoint> points;
    double bpp = uniform(rng, 0.08, 0.15) * rate_scale;
    for (int i = 0; i < 4; ++i) {
        const double psnr = 36.0 + psnr_shift + 6.0 * std::log2(bpp / 0.5) + uniform(rng, -0.3, 0.3);
        points.push_back({bpp, psnr});
        bpp *= uniform(rng, 1.6, 2.4);
    }
    std::sort(points.begin(), points.end(), [](auto a, auto b) { return a.bpp < b.bpp; });
    return RDCurve(points);
}

}  // namespace dynaquant::testing
