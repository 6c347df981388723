#include "dynaquant/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace dynaquant {

GradientMode GradientMode::dgm(double beta) {
    if (!(beta > 0.0) || !std::isfinite(beta))
        throw ParameterError("DGM shape factor beta must be positive, got " + std::to_string(beta));
    return GradientMode(Kind::DGM, beta);
}

double dgm_proxy(double t, double beta) {
    if (!(beta > 0.0)) throw ParameterError("dgm: beta must be positive");
    return 0.5 * std::tanh(beta * (t - 0.5)) / std::tanh(0.5 * beta) + 0.5;
}

double dgm_soft_round(double u, double beta) {
    const double base = std::floor(u);
    return base + dgm_proxy(u - base, beta);
}

double dgm_grad(double t, double beta) {
    if (!(beta > 0.0)) throw ParameterError("dgm: beta must be positive");
    const double c = std::cosh(beta * (t - 0.5));
    return 0.5 * beta / (c * c * std::tanh(0.5 * beta));
}

double inverse_softplus(double s) {
    if (!(s > 0.0)) throw ParameterError("inverse_softplus: argument must be positive");
    return s + std::log(-std::expm1(-s));
}

namespace {

struct ChannelLayout {
    std::size_t outer = 1, channels = 1, inner = 1;
    std::size_t channel_of(std::size_t flat) const { return (flat / inner) % channels; }
};

ChannelLayout layout_for(const Shape& shape, std::size_t axis, std::size_t channels) {
    if (axis >= shape.size())
        throw ShapeError("quantizer channel axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
    if (shape[axis] != channels)
        throw ShapeError("quantizer has " + std::to_string(channels) + " channels, tensor " + shape_str(shape) +
                         " has " + std::to_string(shape[axis]) + " along axis " + std::to_string(axis));
    ChannelLayout l;
    for (std::size_t d = 0; d < axis; ++d) l.outer *= shape[d];
    l.channels = channels;
    for (std::size_t d = axis + 1; d < shape.size(); ++d) l.inner *= shape[d];
    return l;
}

void check_bits(int bits) {
    if (bits < 2 || bits > 24) throw ParameterError("bit-width must lie in [2, 24], got " + std::to_string(bits));
}

}  // namespace

template <typename T>
AffineQuantParams<T> AffineQuantParams<T>::make(int bits, std::size_t channel_axis, std::vector<T> scale,
                                                std::vector<T> zero_point, bool learn_scale, bool learn_zero) {
    check_bits(bits);
    if (scale.empty() || scale.size() != zero_point.size())
        throw ShapeError("quantizer needs matching non-empty scale/zero-point vectors");
    std::vector<T> raw(scale.size());
    for (std::size_t c = 0; c < scale.size(); ++c) raw[c] = static_cast<T>(inverse_softplus(scale[c]));
    AffineQuantParams p;
    p.bits = bits;
    p.channel_axis = channel_axis;
    const std::size_t n = scale.size();
    p.raw_scale = BasicTensor<T>::from({n}, std::move(raw), learn_scale);
    p.zero_point = BasicTensor<T>::from({n}, std::move(zero_point), learn_zero);
    return p;
}

template <typename T>
std::vector<T> AffineQuantParams<T>::scale_values() const {
    NoGradGuard guard;
    const auto s = softplus(raw_scale);
    return {s.data().begin(), s.data().end()};
}

template <typename T>
QuantizedTensor quantize(const BasicTensor<T>& x, const AffineQuantParams<T>& params) {
    const auto layout = layout_for(x.shape(), params.channel_axis, params.channels());
    const auto s = params.scale_values();
    const auto z = params.zero_point.data();
    const T n_max = params.n_max();
    QuantizedTensor out{x.shape(), std::vector<std::int32_t>(x.numel())};
    const auto xv = x.data();
    for (std::size_t i = 0; i < xv.size(); ++i) {
        if (std::isnan(xv[i])) throw NumericError("quantize: NaN input at element " + std::to_string(i));
        const std::size_t c = layout.channel_of(i);
        const T u = std::clamp(xv[i] / s[c] + z[c], T{0}, n_max);
        out.codes[i] = static_cast<std::int32_t>(std::round(u));
    }
    return out;
}

template <typename T>
BasicTensor<T> dequantize(const QuantizedTensor& xq, const AffineQuantParams<T>& params) {
    const auto layout = layout_for(xq.shape, params.channel_axis, params.channels());
    const auto s = params.scale_values();
    const auto z = params.zero_point.data();
    const auto n_max = static_cast<std::int32_t>(params.n_max());
    std::vector<T> out(xq.codes.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::int32_t q = xq.codes[i];
        if (q < 0 || q > n_max)
            throw ContractError("dequantize: code " + std::to_string(q) + " outside [0, " + std::to_string(n_max) +
                                "] at element " + std::to_string(i));
        const std::size_t c = layout.channel_of(i);
        out[i] = s[c] * (static_cast<T>(q) - z[c]);
    }
    return BasicTensor<T>::from(xq.shape, std::move(out));
}

template <typename T>
BasicTensor<T> fake_quantize_with_scale(const BasicTensor<T>& x, const BasicTensor<T>& scale,
                                        const BasicTensor<T>& zero_point, int bits, std::size_t channel_axis,
                                        const GradientMode& mode) {
    check_bits(bits);
    if (scale.shape() != zero_point.shape() || scale.ndim() != 1)
        throw ShapeError("fake_quantize: scale " + shape_str(scale.shape()) + " and zero-point " +
                         shape_str(zero_point.shape()) + " must be matching vectors");
    if (mode.is_dgm() && !(mode.beta() > 0.0)) throw ParameterError("fake_quantize: DGM needs beta > 0");
    const auto layout = layout_for(x.shape(), channel_axis, scale.numel());
    const T n_max = static_cast<T>((std::int64_t{1} << bits) - 1);

    auto forward = [layout, n_max](std::span<const BasicTensor<T>> in) {
        const auto xv = in[0].data();
        const auto s = in[1].data();
        const auto z = in[2].data();
        Array<T> out{in[0].shape(), std::vector<T>(xv.size())};
        for (std::size_t i = 0; i < xv.size(); ++i) {
            if (std::isnan(xv[i])) throw NumericError("fake_quantize: NaN input at element " + std::to_string(i));
            const std::size_t c = layout.channel_of(i);
            const T u = std::clamp(xv[i] / s[c] + z[c], T{0}, n_max);
            out.values[i] = s[c] * (std::round(u) - z[c]);
        }
        return out;
    };

    auto backward = [layout, n_max, mode](std::span<const BasicTensor<T>> in, std::span<const T>,
                                          std::span<const T> upstream) {
        const auto xv = in[0].data();
        const auto s = in[1].data();
        const auto z = in[2].data();
        std::vector<T> gx(xv.size());
        std::vector<double> gs(layout.channels, 0.0), gz(layout.channels, 0.0);
        // dgm_grad with the per-call constants hoisted; sech^2 via a single exp.
        const double beta = mode.is_dgm() ? mode.beta() : 0.0;
        const double amp = mode.is_dgm() ? 2.0 * beta / std::tanh(0.5 * beta) : 0.0;
        const auto surrogate = [beta, amp](double t) {
            const double e = std::exp(-2.0 * std::abs(beta * (t - 0.5)));
            return amp * e / ((1.0 + e) * (1.0 + e));
        };
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const std::size_t c = layout.channel_of(i);
            const double sc = s[c], zc = z[c], xi = xv[i], g = upstream[i];
            const T u_t = xv[i] / s[c] + z[c];
            const double u = u_t;
            double dx = 0.0, ds = 0.0, dz = 0.0;
            if (u < 0.0 || u > static_cast<double>(n_max)) {
                const double endpoint = u < 0.0 ? 0.0 : static_cast<double>(n_max);
                ds = endpoint - zc;
                dz = -sc;
            } else {
                const double r = mode.is_dgm() ? surrogate(u - std::floor(u)) : 1.0;
                const double q = std::round(u_t);
                dx = r;
                ds = (q - zc) - r * xi / sc;
                dz = sc * (r - 1.0);
            }
            gx[i] = static_cast<T>(g * dx);
            gs[c] += g * ds;
            gz[c] += g * dz;
        }
        return std::vector<std::vector<T>>{std::move(gx), std::vector<T>(gs.begin(), gs.end()),
                                           std::vector<T>(gz.begin(), gz.end())};
    };

    const char* name = mode.is_dgm() ? "fake_quantize_dgm" : "fake_quantize_ste";
    return CustomOp<T>(name, std::move(forward), std::move(backward))({x, scale, zero_point});
}

template <typename T>
BasicTensor<T> fake_quantize(const BasicTensor<T>& x, const AffineQuantParams<T>& params, const GradientMode& mode) {
    return fake_quantize_with_scale(x, params.scale(), params.zero_point, params.bits, params.channel_axis, mode);
}

namespace {

template <typename T>
std::vector<std::size_t> calibrate_values(const BasicTensor<T>& batch, std::size_t axis, std::size_t channels, int bits,
                                          std::vector<T>& raw_out, std::vector<T>& zero_out) {
    if (batch.numel() == 0) throw ShapeError("calibrate: empty batch");
    const auto layout = layout_for(batch.shape(), axis, channels);
    std::vector<T> lo(channels, std::numeric_limits<T>::infinity());
    std::vector<T> hi(channels, -std::numeric_limits<T>::infinity());
    const auto xv = batch.data();
    for (std::size_t i = 0; i < xv.size(); ++i) {
        if (!std::isfinite(xv[i])) throw NumericError("calibrate: non-finite value at element " + std::to_string(i));
        const std::size_t c = layout.channel_of(i);
        lo[c] = std::min(lo[c], xv[i]);
        hi[c] = std::max(hi[c], xv[i]);
    }
    const double levels = static_cast<double>((std::int64_t{1} << bits) - 1);
    std::vector<std::size_t> degenerate;
    raw_out.resize(channels);
    zero_out.resize(channels);
    for (std::size_t c = 0; c < channels; ++c) {
        double s = (static_cast<double>(hi[c]) - static_cast<double>(lo[c])) / levels;
        if (!(hi[c] > lo[c])) degenerate.push_back(c);
        s = std::max(s, 1e-8);
        raw_out[c] = static_cast<T>(inverse_softplus(s));
    }
    // z is computed against the scale the quantizer will actually use.
    const auto s_eff = softplus(BasicTensor<T>::from({channels}, raw_out));
    for (std::size_t c = 0; c < channels; ++c) zero_out[c] = -lo[c] / s_eff.data()[c];
    return degenerate;
}

}  // namespace

template <typename T>
Calibration<T> calibrate_init(const BasicTensor<T>& batch, int bits, std::size_t channel_axis) {
    check_bits(bits);
    NoGradGuard guard;
    const std::size_t channels = batch.dim(channel_axis);
    std::vector<T> raw, zero;
    auto degenerate = calibrate_values(batch, channel_axis, channels, bits, raw, zero);
    Calibration<T> out;
    out.params.bits = bits;
    out.params.channel_axis = channel_axis;
    out.params.raw_scale = BasicTensor<T>::from({channels}, std::move(raw), true);
    out.params.zero_point = BasicTensor<T>::from({channels}, std::move(zero), true);
    out.degenerate_channels = std::move(degenerate);
    return out;
}

template <typename T>
std::vector<std::size_t> calibrate_in_place(const BasicTensor<T>& batch, AffineQuantParams<T>& params) {
    NoGradGuard guard;
    std::vector<T> raw, zero;
    auto degenerate = calibrate_values(batch, params.channel_axis, params.channels(), params.bits, raw, zero);
    std::copy(raw.begin(), raw.end(), params.raw_scale.mutable_data().begin());
    std::copy(zero.begin(), zero.end(), params.zero_point.mutable_data().begin());
    return degenerate;
}

#define DYNAQUANT_INSTANTIATE(T)                                                                                   \
    template struct AffineQuantParams<T>;                                                                          \
    template QuantizedTensor quantize<T>(const BasicTensor<T>&, const AffineQuantParams<T>&);                      \
    template BasicTensor<T> dequantize<T>(const QuantizedTensor&, const AffineQuantParams<T>&);                    \
    template BasicTensor<T> fake_quantize<T>(const BasicTensor<T>&, const AffineQuantParams<T>&,                   \
                                             const GradientMode&);                                                 \
    template BasicTensor<T> fake_quantize_with_scale<T>(const BasicTensor<T>&, const BasicTensor<T>&,              \
                                                        const BasicTensor<T>&, int, std::size_t, const GradientMode&); \
    template Calibration<T> calibrate_init<T>(const BasicTensor<T>&, int, std::size_t);                            \
    template std::vector<std::size_t> calibrate_in_place<T>(const BasicTensor<T>&, AffineQuantParams<T>&);

DYNAQUANT_INSTANTIATE(float)
DYNAQUANT_INSTANTIATE(double)

#undef DYNAQUANT_INSTANTIATE

}  // namespace dynaquant
