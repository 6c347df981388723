#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dynaquant/autodiff.hpp"

namespace dynaquant {

struct AdamOptions {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First/second moments for one parameter.
template <typename T>
struct AdamMoments {
    std::vector<T> m;
    std::vector<T> v;
};

/// One bias-corrected Adam update of `param` in place. `step` is the 1-based index of
/// this update. Throws NumericError on a non-finite gradient without touching anything.
template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, AdamMoments<T>& moments, std::uint64_t step,
                 const AdamOptions& options);

/// Adam over a fixed parameter list. Parameters that do not require grad (frozen)
/// are skipped; parameters that received no gradient this step see a zero gradient.
template <typename T>
class Adam {
public:
    Adam(std::vector<BasicTensor<T>> params, AdamOptions options);

    /// Applies one update from the currently accumulated gradients. All gradients are
    /// validated before any parameter moves.
    void step();
    void zero_grad();

    std::uint64_t step_count() const { return step_; }
    const AdamOptions& options() const { return options_; }
    void set_lr(double lr) { options_.lr = lr; }

    const std::vector<BasicTensor<T>>& params() const { return params_; }
    std::vector<AdamMoments<T>>& moments() { return moments_; }
    const std::vector<AdamMoments<T>>& moments() const { return moments_; }
    void restore(std::vector<AdamMoments<T>> moments, std::uint64_t step);

private:
    std::vector<BasicTensor<T>> params_;
    std::vector<AdamMoments<T>> moments_;
    AdamOptions options_;
    std::uint64_t step_ = 0;
};

}  // namespace dynaquant
