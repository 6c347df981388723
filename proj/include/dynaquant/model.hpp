#pragma once

// Toy learned-image-compression autoencoder that hosts the quantization stack.
//
// Encoder: a fixed 8-bit strided conv, then (stages - 1) strided DQ-Blocks ending in
// the latent y. Decoder mirrors it with upsample + conv. The first module on each
// side feeds that side's bit-width selector. The rate term comes from a factorized
// Gaussian over the rounded latent.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dynaquant/autodiff.hpp"
#include "dynaquant/quant.hpp"
#include "dynaquant/selector.hpp"

namespace dynaquant {

struct CoderConfig {
    std::size_t channels = 16;
    std::size_t latent_channels = 8;
    std::size_t stages = 3;
    std::vector<int> candidate_bits{4, 6, 8};
    GradientMode mode = GradientMode::dgm(5.0);
    /// false: no selectors, every non-first block runs at fixed_bits.
    bool dynamic = true;
    int fixed_bits = 8;
    QuantOptions quant;
    std::size_t selector_hidden = 128;
    double selector_dropout = 0.2;
    double selector_tau = 1.0;
    /// Pad inputs up to a multiple of 2^stages (and crop the reconstruction back).
    bool pad = true;

    void validate() const;
    /// BL: dynamically quantized blocks per side.
    std::size_t blocks_per_side() const { return stages - 1; }
    std::size_t stride() const { return std::size_t{1} << stages; }
    /// Bit-widths the non-first blocks choose from.
    std::vector<int> block_bits() const;
};

/// Rounded latent plus the source dimensions needed to undo padding.
struct LatentCode {
    Tensor y_hat;  ///< (batch, C_y, h, w), integer-valued
    std::size_t height = 0;
    std::size_t width = 0;
};

/// Per-latent-channel Gaussian (mu, sigma = softplus(raw)) used to price ŷ.
class RateModel {
public:
    explicit RateModel(std::size_t channels, double init_sigma = 2.0);

    /// Total bits of ŷ under the model, differentiable in ŷ, mu and the raw sigma.
    Tensor bits(const Tensor& y_hat) const;
    Tensor sigma() const { return softplus(raw_sigma_); }

    const Tensor& mu() const { return mu_; }
    const Tensor& raw_sigma() const { return raw_sigma_; }
    std::size_t channels() const { return mu_.numel(); }

private:
    Tensor mu_, raw_sigma_;
};

/// -log2 P(ŷ) for one element under N(mu, sigma) integrated over [ŷ - 0.5, ŷ + 0.5],
/// with the probability floored at 1e-9.
double element_bits(double y_hat, double mu, double sigma);

/// bpp of a code: total bits / (batch * height * width) using the original dimensions.
double estimate_rate(const LatentCode& code, const RateModel& rate_model);

enum class BitSource { Fixed8, Dynamic, FP32 };
const char* to_string(BitSource source);

/// What a parameter tensor is, for size accounting.
enum class ParamRole { Weight, Bias, Entropy, Quantizer, Selector };
const char* to_string(ParamRole role);

struct InventoryEntry {
    std::string name;
    std::size_t params = 0;
    BitSource source = BitSource::FP32;
    ParamRole role = ParamRole::Weight;
    /// Index of the dynamic layer this weight belongs to (encoder blocks first), if any.
    std::optional<std::size_t> dynamic_layer;
};

struct CodecOutput {
    Tensor x_hat;      ///< (batch, 3, H, W) in [0, 1]
    Tensor y_hat;      ///< rounded latent
    Tensor rate_bits;  ///< scalar total bits of y_hat
    double bpp = 0.0;
    std::optional<Selection> encoder_selection;
    std::optional<Selection> decoder_selection;
};

class ToyCodec {
public:
    ToyCodec(CoderConfig config, std::uint64_t init_seed);

    /// Full pass. train=true uses Gumbel sampling, dropout and probability-weighted
    /// fusion (needs `rng`); train=false runs argmax selections through the one-branch
    /// fast path.
    CodecOutput forward(const Tensor& images, bool train, Rng* rng, ExecStats* stats = nullptr);

    /// Accepts (3, H, W) or (batch, 3, H, W).
    LatentCode encode(const Tensor& images, bool train, Rng* rng, std::optional<Selection>* selection = nullptr,
                      ExecStats* stats = nullptr);
    Tensor decode(const LatentCode& code, bool train, Rng* rng, std::optional<Selection>* selection = nullptr,
                  ExecStats* stats = nullptr);

    const CoderConfig& config() const { return config_; }
    void set_mode(const GradientMode& mode) { config_.mode = mode; }
    const RateModel& rate_model() const { return rate_model_; }

    /// Every learnable tensor, in a fixed order (the checkpoint order).
    std::vector<NamedParameter> parameters() const;
    /// One entry per parameter tensor, same order as parameters().
    std::vector<InventoryEntry> bit_inventory() const;
    /// Number of non-first blocks across both sides (2 * BL).
    std::size_t dynamic_layers() const;
    /// Bits of every dynamic-capable block for one sample: selection when dynamic, else
    /// fixed_bits. Encoder blocks first.
    std::vector<int> layer_bits(const std::optional<Selection>& encoder, const std::optional<Selection>& decoder,
                                std::size_t sample) const;

    /// Lazy calibration flags of every activation quantizer, in parameters() order.
    std::vector<bool> calibration_flags() const;
    void set_calibration_flags(const std::vector<bool>& flags);

private:
    Tensor run_blocks(std::vector<DQBlock>& blocks, Tensor h, const std::optional<Selection>& sel, bool train,
                      bool last_is_output, ExecStats* stats);
    template <typename Self>
    static auto activation_quantizers(Self& self);

    CoderConfig config_;
    DQBlock enc_first_, dec_first_;
    std::vector<DQBlock> enc_blocks_, dec_blocks_;
    std::optional<BitWidthSelector> enc_selector_, dec_selector_;
    RateModel rate_model_;
};

}  // namespace dynaquant
