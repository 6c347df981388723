#pragma once

// Dynamic bit-width selection: a small pool -> MLP -> Gumbel-Softmax network that
// picks one candidate bit-width per quantized block, and the DQ-Block that runs a
// layer under every candidate and fuses the branch outputs by selection weight.

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dynaquant/autodiff.hpp"
#include "dynaquant/quant.hpp"

namespace dynaquant {

/// Returns one standard Gumbel draw per call.
using NoiseSource = std::function<double()>;

NoiseSource zero_noise();
NoiseSource gumbel_noise(Rng& rng);

/// Relaxed categorical sample along the last axis: y = softmax((logits + g) / tau).
/// With `hard`, the forward value is the one-hot argmax of y and gradients flow as if
/// y had been returned.
template <typename T>
BasicTensor<T> gumbel_softmax(const BasicTensor<T>& logits, double tau, bool hard, const NoiseSource& noise);

/// Σ_k probs_k · bits_k. Throws ContractError unless probs sum to 1 within 1e-5.
double effective_bits(std::span<const float> probs, std::span<const int> bits);

/// Candidate set must have at least two distinct bit-widths, each >= 2. Returns it sorted.
std::vector<int> validate_candidate_bits(std::vector<int> bits);

struct SelectorConfig {
    std::size_t in_channels = 0;  ///< N, channels of the activation the selector reads
    std::size_t layers = 0;       ///< BL, number of blocks served
    std::vector<int> candidate_bits{4, 6, 8};
    std::size_t pool = 5;
    std::size_t hidden = 128;
    double dropout = 0.2;
    double tau = 1.0;
    bool hard = true;

    void validate() const;
};

struct Selection {
    /// (batch, BL, M): one-hot forward value. In training the gradient flows through
    /// the Gumbel-Softmax relaxation; at eval it is a constant.
    Tensor probs;
    /// (batch, BL, M): softmax(logits) without Gumbel noise; the expectation the
    /// bit-width loss consumes.
    Tensor soft;
    /// Flat (batch * BL) selected candidate indices.
    std::vector<std::size_t> choice;

    std::size_t batch() const { return probs.dim(0); }
    std::size_t layers() const { return probs.dim(1); }
    std::size_t index(std::size_t sample, std::size_t layer) const { return choice[sample * layers() + layer]; }
};

struct NamedParameter {
    std::string name;
    Tensor tensor;
};

class BitWidthSelector {
public:
    BitWidthSelector(SelectorConfig config, Rng& init_rng);

    /// A (batch, N, H, W) -> selection over (batch, BL, M). train=true samples with
    /// Gumbel noise and dropout drawn from `rng`; train=false is deterministic argmax.
    Selection select(const Tensor& activation, bool train, Rng* rng) const;
    /// MLP output reshaped to (batch * BL, M).
    Tensor logits(const Tensor& activation, bool train, Rng* rng) const;

    const SelectorConfig& config() const { return config_; }
    std::vector<NamedParameter> parameters(const std::string& prefix) const;

private:
    SelectorConfig config_;
    Tensor w1_, b1_, w2_, b2_;
};

/// One learned quantizer (scale + zero-point) that calibrates itself from the first
/// tensor it sees.
class Quantizer {
public:
    Quantizer(int bits, std::size_t channels, std::size_t channel_axis, bool learn_scale, bool learn_zero);

    Tensor operator()(const Tensor& x, const GradientMode& mode);
    void calibrate(const Tensor& x);
    bool calibrated() const { return calibrated_; }
    void set_calibrated(bool flag) { calibrated_ = flag; }

    int bits() const { return params_.bits; }
    const AffineQuantParams<float>& params() const { return params_; }

private:
    AffineQuantParams<float> params_;
    bool calibrated_ = false;
};

struct LayerSpec {
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t padding = 1;
    /// Nearest-neighbour upsampling factor applied to the input before the convolution.
    std::size_t upsample = 1;
};

struct QuantOptions {
    bool learn_scale = true;
    bool learn_zero = true;
};

/// Counts layer executions; lets tests and reports see how many branches ran.
struct ExecStats {
    std::size_t branch_evaluations = 0;
};

/// A convolution whose input X and weight W are fake-quantized once per candidate
/// bit-width, each branch with its own (s, z) pair.
class DQBlock {
public:
    DQBlock(std::string name, LayerSpec spec, std::vector<int> bits, QuantOptions options, Rng& init_rng);

    /// Probability-weighted fusion over all branches; probs is (batch, M).
    Tensor forward(const Tensor& x, const Tensor& probs, const GradientMode& mode, ExecStats* stats = nullptr);
    /// The plain layer at candidate index k for the whole batch.
    Tensor forward_branch(const Tensor& x, std::size_t k, const GradientMode& mode, ExecStats* stats = nullptr);
    /// Inference fast path: sample i runs only branch choice[i].
    Tensor infer(const Tensor& x, std::span<const std::size_t> choice, const GradientMode& mode,
                 ExecStats* stats = nullptr);

    const std::string& name() const { return name_; }
    const LayerSpec& spec() const { return spec_; }
    const std::vector<int>& bits() const { return bits_; }
    std::size_t branches() const { return bits_.size(); }
    const Tensor& weight() const { return weight_; }
    const Tensor& bias() const { return bias_; }
    Quantizer& weight_quantizer(std::size_t k) { return weight_q_.at(k); }
    Quantizer& input_quantizer(std::size_t k) { return input_q_.at(k); }
    const Quantizer& weight_quantizer(std::size_t k) const { return weight_q_.at(k); }
    const Quantizer& input_quantizer(std::size_t k) const { return input_q_.at(k); }

    /// Weight, bias, then (weight s, weight z, input s, input z) per branch.
    std::vector<NamedParameter> parameters() const;

private:
    std::string name_;
    LayerSpec spec_;
    std::vector<int> bits_;
    Tensor weight_, bias_;
    std::vector<Quantizer> weight_q_, input_q_;
};

}  // namespace dynaquant
