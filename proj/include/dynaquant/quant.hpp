#pragma once

// Asymmetric affine fake quantization with learnable per-channel scale and
// zero-point, and a choice of straight-through or distance-aware (DGM) backward.

#include <cstdint>
#include <vector>

#include "dynaquant/autodiff.hpp"

namespace dynaquant {

/// Backward rule for round(): identity (STE) or the DGM proxy derivative.
class GradientMode {
public:
    enum class Kind { STE, DGM };

    static GradientMode ste() { return GradientMode(Kind::STE, 0.0); }
    /// Throws ParameterError unless beta > 0.
    static GradientMode dgm(double beta);

    Kind kind() const { return kind_; }
    double beta() const { return beta_; }
    bool is_dgm() const { return kind_ == Kind::DGM; }

    bool operator==(const GradientMode&) const = default;

private:
    GradientMode(Kind kind, double beta) : kind_(kind), beta_(beta) {}
    Kind kind_;
    double beta_;
};

// DGM proxy, with t = u - floor(u) in [0, 1):
//   g(t)  = 0.5 * tanh(beta (t - 0.5)) / tanh(beta / 2) + 0.5      (g(0) = 0, g(1) = 1)
//   g'(t) = (beta / 2) * sech^2(beta (t - 0.5)) / tanh(beta / 2)
double dgm_proxy(double t, double beta);
double dgm_soft_round(double u, double beta);
double dgm_grad(double t, double beta);

/// Per-channel affine quantizer parameters. The scale is stored unconstrained and
/// mapped through softplus, so the effective scale is always positive.
template <typename T>
struct AffineQuantParams {
    int bits = 8;
    /// Axis of the quantized tensor that indexes channels.
    std::size_t channel_axis = 1;
    BasicTensor<T> raw_scale;   ///< (C), pre-softplus
    BasicTensor<T> zero_point;  ///< (C), real-valued

    static AffineQuantParams make(int bits, std::size_t channel_axis, std::vector<T> scale, std::vector<T> zero_point,
                                  bool learn_scale = true, bool learn_zero = true);

    std::size_t channels() const { return zero_point.numel(); }
    T n_min() const { return T{0}; }
    T n_max() const { return static_cast<T>((std::int64_t{1} << bits) - 1); }
    /// Differentiable effective scale softplus(raw_scale).
    BasicTensor<T> scale() const { return softplus(raw_scale); }
    std::vector<T> scale_values() const;
};

/// Integer codes produced by quantize().
struct QuantizedTensor {
    Shape shape;
    std::vector<std::int32_t> codes;
};

/// x_q = round(clip(x/s + z, 0, 2^b - 1)), round half away from zero.
template <typename T>
QuantizedTensor quantize(const BasicTensor<T>& x, const AffineQuantParams<T>& params);

/// x~ = s (x_q - z). Throws ContractError for codes outside [0, 2^b - 1].
template <typename T>
BasicTensor<T> dequantize(const QuantizedTensor& xq, const AffineQuantParams<T>& params);

/// dequantize(quantize(x)) with gradients to x, the raw scale, and the zero-point.
/// With u = x/s + z, in = [0 <= u <= n_max], r' = 1 (STE) or dgm_grad(frac(u)):
///   dx~/dx = r' in,  dx~/ds = (q - z) - r' in x/s,  dx~/dz = s (r' in - 1).
template <typename T>
BasicTensor<T> fake_quantize(const BasicTensor<T>& x, const AffineQuantParams<T>& params, const GradientMode& mode);

/// Same contract as fake_quantize but with the effective scale passed directly,
/// so callers can differentiate with respect to s itself.
template <typename T>
BasicTensor<T> fake_quantize_with_scale(const BasicTensor<T>& x, const BasicTensor<T>& scale,
                                        const BasicTensor<T>& zero_point, int bits, std::size_t channel_axis,
                                        const GradientMode& mode);

template <typename T>
struct Calibration {
    AffineQuantParams<T> params;
    std::vector<std::size_t> degenerate_channels;  ///< channels with max == min
};

/// Min/max initialization per channel: s = max((max - min) / (2^b - 1), 1e-8), z = -min / s.
template <typename T>
Calibration<T> calibrate_init(const BasicTensor<T>& batch, int bits, std::size_t channel_axis);

/// Writes calibrated values into existing parameter tensors (keeps their identity and
/// requires_grad flags). Returns the degenerate channels.
template <typename T>
std::vector<std::size_t> calibrate_in_place(const BasicTensor<T>& batch, AffineQuantParams<T>& params);

/// softplus^{-1}(s) for s > 0.
double inverse_softplus(double s);

}  // namespace dynaquant
