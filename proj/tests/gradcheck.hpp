#pragma once

// Central finite-difference oracle for 64-bit graphs. Lives in test code only.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "dynaquant/autodiff.hpp"

namespace dynaquant::testing {

struct GradcheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_element = 0;
};

/// |a - n| / max(|a|, |n|, floor): relative error with an absolute floor so entries
/// whose true gradient is ~0 do not divide by FD noise.
inline double rel_error(double analytic, double numeric, double floor = 1e-3) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares backward() against central differences of `f` for every element of
/// every input. `f` must rebuild the graph from the given leaves on each call.
inline GradcheckResult gradcheck(const std::function<Tensor64(const std::vector<Tensor64>&)>& f,
                                 std::vector<Tensor64> inputs, double h = 1e-6) {
    for (auto& in : inputs) {
        in.set_requires_grad(true);
        in.zero_grad();
    }
    backward(f(inputs));
    std::vector<std::vector<double>> analytic;
    for (auto& in : inputs) {
        auto g = in.grad();
        analytic.emplace_back(g.begin(), g.end());
        if (analytic.back().empty()) analytic.back().assign(in.numel(), 0.0);
    }

    GradcheckResult result;
    NoGradGuard no_grad;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto data = inputs[k].mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + h;
            const double up = f(inputs).item();
            data[i] = saved - h;
            const double down = f(inputs).item();
            data[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double err = rel_error(analytic[k][i], numeric);
            if (err > result.max_rel_error) result = {err, k, i};
        }
    }
    return result;
}

inline Tensor64 random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = uniform(rng, lo, hi);
    return Tensor64::from(std::move(shape), std::move(v));
}

/// Weighted sum with fixed random coefficients: turns any tensor into a scalar
/// whose gradient exercises every output element differently.
inline Tensor64 probe(const Tensor64& t, std::uint64_t seed = 99) {
    Rng rng(seed);
    std::vector<double> w(t.numel());
    for (auto& x : w) x = uniform(rng, -1.0, 1.0);
    return sum(mul(t, Tensor64::from(t.shape(), std::move(w))));
}

}  // namespace dynaquant::testing
