#include "dynaquant/optim.hpp"

#include <cmath>
#include <string>

namespace dynaquant {

template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, AdamMoments<T>& moments, std::uint64_t step,
                 const AdamOptions& options) {
    if (step == 0) throw ContractError("adam_update: step index is 1-based");
    if (grad.size() != param.size())
        throw ShapeError("adam_update: gradient has " + std::to_string(grad.size()) + " elements, parameter " +
                         std::to_string(param.size()));
    for (std::size_t i = 0; i < grad.size(); ++i)
        if (!std::isfinite(grad[i])) throw NumericError("adam_update: non-finite gradient at element " + std::to_string(i));
    if (moments.m.empty()) {
        moments.m.assign(param.size(), T{0});
        moments.v.assign(param.size(), T{0});
    }
    if (moments.m.size() != param.size() || moments.v.size() != param.size())
        throw ShapeError("adam_update: moment arrays do not match parameter size");

    const double b1 = options.beta1, b2 = options.beta2;
    const double correction1 = 1.0 - std::pow(b1, static_cast<double>(step));
    const double correction2 = 1.0 - std::pow(b2, static_cast<double>(step));
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad[i];
        const double m = b1 * moments.m[i] + (1.0 - b1) * g;
        const double v = b2 * moments.v[i] + (1.0 - b2) * g * g;
        moments.m[i] = static_cast<T>(m);
        moments.v[i] = static_cast<T>(v);
        const double m_hat = m / correction1;
        const double v_hat = v / correction2;
        param[i] = static_cast<T>(param[i] - options.lr * m_hat / (std::sqrt(v_hat) + options.eps));
    }
}

template <typename T>
Adam<T>::Adam(std::vector<BasicTensor<T>> params, AdamOptions options)
    : params_(std::move(params)), moments_(params_.size()), options_(options) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
        moments_[k].m.assign(params_[k].numel(), T{0});
        moments_[k].v.assign(params_[k].numel(), T{0});
    }
}

template <typename T>
void Adam<T>::step() {
    for (std::size_t k = 0; k < params_.size(); ++k) {
        const auto g = params_[k].grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (!std::isfinite(g[i]))
                throw NumericError("Adam: non-finite gradient in parameter " + std::to_string(k) + " element " +
                                   std::to_string(i));
    }
    ++step_;
    std::vector<T> zeros;
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& p = params_[k];
        if (!p.requires_grad()) continue;
        std::span<const T> g = p.grad();
        if (g.empty()) {
            zeros.assign(p.numel(), T{0});
            g = zeros;
        }
        adam_update<T>(p.mutable_data(), g, moments_[k], step_, options_);
    }
}

template <typename T>
void Adam<T>::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

template <typename T>
void Adam<T>::restore(std::vector<AdamMoments<T>> moments, std::uint64_t step) {
    if (moments.size() != params_.size()) throw ContractError("Adam::restore: moment count mismatch");
    for (std::size_t k = 0; k < params_.size(); ++k)
        if (moments[k].m.size() != params_[k].numel() || moments[k].v.size() != params_[k].numel())
            throw ContractError("Adam::restore: moment shape mismatch for parameter " + std::to_string(k));
    moments_ = std::move(moments);
    step_ = step;
}

template void adam_update<float>(std::span<float>, std::span<const float>, AdamMoments<float>&, std::uint64_t,
                                  const AdamOptions&);
template void adam_update<double>(std::span<double>, std::span<const double>, AdamMoments<double>&, std::uint64_t,
                                  const AdamOptions&);
template class Adam<float>;
template class Adam<double>;

}  // namespace dynaquant
