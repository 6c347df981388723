#include "dynaquant/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <type_traits>

namespace dynaquant {

void CoderConfig::validate() const {
    if (channels == 0 || latent_channels == 0) throw ParameterError("model: channel widths must be positive");
    if (stages < 2) throw ParameterError("model: need at least 2 stages (one fixed module plus one DQ-Block)");
    if (stages > 6) throw ParameterError("model: at most 6 stages");
    if (dynamic) validate_candidate_bits(candidate_bits);
    if (fixed_bits < 2 || fixed_bits > 16) throw ParameterError("model: fixed_bits must lie in [2, 16]");
}

std::vector<int> CoderConfig::block_bits() const {
    return dynamic ? validate_candidate_bits(candidate_bits) : std::vector<int>{fixed_bits};
}

// ---------------------------------------------------------------------------

namespace {

constexpr double kMinProbability = 1e-9;

double normal_cdf(double t) { return 0.5 * std::erfc(-t / std::numbers::sqrt2); }
double normal_pdf(double t) { return std::exp(-0.5 * t * t) / std::sqrt(2.0 * std::numbers::pi); }

/// Probability mass of [y - 0.5, y + 0.5]. Evaluated on the lower tail of |y - mu|
/// so large offsets do not cancel catastrophically.
double bin_mass(double y, double mu, double sigma) {
    const double v = std::abs(y - mu);
    return normal_cdf((0.5 - v) / sigma) - normal_cdf((-0.5 - v) / sigma);
}

}  // namespace

double element_bits(double y_hat, double mu, double sigma) {
    return -std::log2(std::max(bin_mass(y_hat, mu, sigma), kMinProbability));
}

RateModel::RateModel(std::size_t channels, double init_sigma)
    : mu_(Tensor::zeros({channels}, true)),
      raw_sigma_(Tensor::full({channels}, static_cast<float>(inverse_softplus(init_sigma)), true)) {}

Tensor RateModel::bits(const Tensor& y_hat) const {
    if (y_hat.ndim() != 4 || y_hat.dim(1) != channels())
        throw ShapeError("rate model expects (batch, " + std::to_string(channels()) + ", h, w), got " +
                         shape_str(y_hat.shape()));
    const std::size_t c_count = channels();
    const std::size_t plane = y_hat.dim(2) * y_hat.dim(3);

    auto forward = [c_count, plane](std::span<const Tensor> in) {
        const auto y = in[0].data();
        const auto mu = in[1].data();
        const auto sigma = in[2].data();
        double total = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            const std::size_t c = (i / plane) % c_count;
            total += element_bits(y[i], mu[c], sigma[c]);
        }
        return Array<float>{{1}, {static_cast<float>(total)}};
    };
    auto backward = [c_count, plane](std::span<const Tensor> in, std::span<const float>, std::span<const float> up) {
        const auto y = in[0].data();
        const auto mu = in[1].data();
        const auto sigma = in[2].data();
        const double g = up[0];
        std::vector<float> gy(y.size());
        std::vector<double> gmu(c_count, 0.0), gsigma(c_count, 0.0);
        for (std::size_t i = 0; i < y.size(); ++i) {
            const std::size_t c = (i / plane) % c_count;
            const double s = sigma[c];
            const double p = bin_mass(y[i], mu[c], s);
            if (p <= kMinProbability) continue;  // floored: constant bits
            const double a = (y[i] + 0.5 - mu[c]) / s, b = (y[i] - 0.5 - mu[c]) / s;
            const double dbits_dp = -1.0 / (p * std::numbers::ln2);
            const double dp_dy = (normal_pdf(a) - normal_pdf(b)) / s;
            const double dp_ds = -(a * normal_pdf(a) - b * normal_pdf(b)) / s;
            gy[i] = static_cast<float>(g * dbits_dp * dp_dy);
            gmu[c] -= g * dbits_dp * dp_dy;
            gsigma[c] += g * dbits_dp * dp_ds;
        }
        return std::vector<std::vector<float>>{std::move(gy), std::vector<float>(gmu.begin(), gmu.end()),
                                               std::vector<float>(gsigma.begin(), gsigma.end())};
    };
    return CustomOp<float>("gaussian_rate", std::move(forward), std::move(backward))({y_hat, mu_, sigma()});
}

double estimate_rate(const LatentCode& code, const RateModel& rate_model) {
    NoGradGuard guard;
    const double pixels = static_cast<double>(code.y_hat.dim(0) * code.height * code.width);
    return static_cast<double>(rate_model.bits(code.y_hat).item()) / pixels;
}

const char* to_string(BitSource source) {
    switch (source) {
        case BitSource::Fixed8: return "fixed8";
        case BitSource::Dynamic: return "dynamic";
        case BitSource::FP32: return "fp32";
    }
    return "?";
}

const char* to_string(ParamRole role) {
    switch (role) {
        case ParamRole::Weight: return "weight";
        case ParamRole::Bias: return "bias";
        case ParamRole::Entropy: return "entropy";
        case ParamRole::Quantizer: return "quantizer";
        case ParamRole::Selector: return "selector";
    }
    return "?";
}

// ---------------------------------------------------------------------------

namespace {

constexpr float kLeakySlope = 0.01f;

std::vector<DQBlock> make_blocks(const CoderConfig& cfg, bool decoder, Rng& rng) {
    std::vector<DQBlock> blocks;
    const std::size_t n = cfg.blocks_per_side();
    for (std::size_t l = 0; l < n; ++l) {
        const bool last = l + 1 == n;
        LayerSpec spec;
        spec.in_channels = cfg.channels;
        if (decoder) {
            spec.out_channels = last ? 3 : cfg.channels;
            spec.upsample = 2;
        } else {
            spec.out_channels = last ? cfg.latent_channels : cfg.channels;
            spec.stride = 2;
        }
        const std::string name = std::string(decoder ? "dec." : "enc.") + std::to_string(l + 1);
        blocks.emplace_back(name, spec, cfg.block_bits(), cfg.quant, rng);
    }
    if (decoder) {
        Tensor bias = blocks.back().bias();
        std::fill(bias.mutable_data().begin(), bias.mutable_data().end(), 0.5f);  // start mid-grey
    }
    return blocks;
}

std::optional<BitWidthSelector> make_selector(const CoderConfig& cfg, Rng& rng) {
    if (!cfg.dynamic) return std::nullopt;
    SelectorConfig sc;
    sc.in_channels = cfg.channels;
    sc.layers = cfg.blocks_per_side();
    sc.candidate_bits = cfg.candidate_bits;
    sc.hidden = cfg.selector_hidden;
    sc.dropout = cfg.selector_dropout;
    sc.tau = cfg.selector_tau;
    return BitWidthSelector(sc, rng);
}

const CoderConfig& validated(const CoderConfig& cfg) {
    cfg.validate();
    return cfg;
}

/// Replicates edge pixels so H and W become multiples of `stride`.
Tensor pad_to_multiple(const Tensor& x, std::size_t stride) {
    const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t ph = (h + stride - 1) / stride * stride, pw = (w + stride - 1) / stride * stride;
    if (ph == h && pw == w) return x;
    std::vector<float> out(b * c * ph * pw);
    const auto in = x.data();
    for (std::size_t n = 0; n < b * c; ++n)
        for (std::size_t i = 0; i < ph; ++i)
            for (std::size_t j = 0; j < pw; ++j)
                out[(n * ph + i) * pw + j] = in[(n * h + std::min(i, h - 1)) * w + std::min(j, w - 1)];
    return Tensor::from({b, c, ph, pw}, std::move(out));
}

Tensor as_batch(const Tensor& images) {
    if (images.ndim() == 3) return reshape(images, {1, images.dim(0), images.dim(1), images.dim(2)});
    if (images.ndim() != 4 || images.dim(1) != 3)
        throw ShapeError("codec expects (3, H, W) or (batch, 3, H, W) images, got " + shape_str(images.shape()));
    return images;
}

}  // namespace

ToyCodec::ToyCodec(CoderConfig config, std::uint64_t init_seed)
    : config_(validated(config)),
      enc_first_([&] {
          Rng rng(init_seed);
          return DQBlock("enc.0", {.in_channels = 3, .out_channels = config_.channels, .stride = 2}, {8},
                         config_.quant, rng);
      }()),
      dec_first_([&] {
          Rng rng(init_seed + 1);
          return DQBlock("dec.0", {.in_channels = config_.latent_channels, .out_channels = config_.channels, .upsample = 2},
                         {8}, config_.quant, rng);
      }()),
      rate_model_(config_.latent_channels) {
    Rng rng(init_seed + 2);
    enc_blocks_ = make_blocks(config_, false, rng);
    dec_blocks_ = make_blocks(config_, true, rng);
    enc_selector_ = make_selector(config_, rng);
    dec_selector_ = make_selector(config_, rng);
}

Tensor ToyCodec::run_blocks(std::vector<DQBlock>& blocks, Tensor h, const std::optional<Selection>& sel, bool train,
                            bool last_is_output, ExecStats* stats) {
    const std::size_t batch = h.dim(0);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        if (!sel) {
            h = blocks[l].forward_branch(h, 0, config_.mode, stats);
        } else if (train) {
            h = blocks[l].forward(h, select(sel->probs, 1, l), config_.mode, stats);
        } else {
            std::vector<std::size_t> choice(batch);
            for (std::size_t i = 0; i < batch; ++i) choice[i] = sel->index(i, l);
            h = blocks[l].infer(h, choice, config_.mode, stats);
        }
        if (l + 1 < blocks.size() || !last_is_output) h = leaky_relu(h, kLeakySlope);
    }
    return h;
}

LatentCode ToyCodec::encode(const Tensor& images, bool train, Rng* rng, std::optional<Selection>* selection,
                            ExecStats* stats) {
    auto x = as_batch(images);
    LatentCode code;
    code.height = x.dim(2);
    code.width = x.dim(3);
    if (code.height % config_.stride() != 0 || code.width % config_.stride() != 0) {
        if (!config_.pad)
            throw ShapeError("image " + std::to_string(code.height) + "x" + std::to_string(code.width) +
                             " is not divisible by " + std::to_string(config_.stride()) + " and padding is disabled");
        x = pad_to_multiple(x.detach(), config_.stride());
    }
    auto h = leaky_relu(enc_first_.forward_branch(x, 0, config_.mode, stats), kLeakySlope);
    std::optional<Selection> sel;
    if (enc_selector_) sel = enc_selector_->select(h, train, rng);
    const auto y = run_blocks(enc_blocks_, h, sel, train, true, stats);
    if (train) {
        code.y_hat = round_ste(y);
    } else {
        NoGradGuard guard;
        std::vector<float> v(y.data().begin(), y.data().end());
        for (auto& e : v) e = std::round(e);
        code.y_hat = Tensor::from(y.shape(), std::move(v));
    }
    if (selection) *selection = std::move(sel);
    return code;
}

Tensor ToyCodec::decode(const LatentCode& code, bool train, Rng* rng, std::optional<Selection>* selection,
                        ExecStats* stats) {
    auto h = leaky_relu(dec_first_.forward_branch(code.y_hat, 0, config_.mode, stats), kLeakySlope);
    std::optional<Selection> sel;
    if (dec_selector_) sel = dec_selector_->select(h, train, rng);
    auto out = clip(run_blocks(dec_blocks_, h, sel, train, true, stats), 0.0f, 1.0f);
    if (out.dim(2) != code.height || out.dim(3) != code.width) out = crop2d(out, 0, 0, code.height, code.width);
    if (selection) *selection = std::move(sel);
    return out;
}

CodecOutput ToyCodec::forward(const Tensor& images, bool train, Rng* rng, ExecStats* stats) {
    if (train && rng == nullptr) throw ContractError("codec: training forward needs a random generator");
    CodecOutput out;
    const auto code = encode(images, train, rng, &out.encoder_selection, stats);
    out.y_hat = code.y_hat;
    out.rate_bits = rate_model_.bits(code.y_hat);
    out.bpp = static_cast<double>(out.rate_bits.item()) / static_cast<double>(code.y_hat.dim(0) * code.height * code.width);
    out.x_hat = decode(code, train, rng, &out.decoder_selection, stats);
    return out;
}

std::vector<NamedParameter> ToyCodec::parameters() const {
    std::vector<NamedParameter> out;
    const auto append = [&out](std::vector<NamedParameter> more) {
        for (auto& p : more) out.push_back(std::move(p));
    };
    append(enc_first_.parameters());
    for (const auto& b : enc_blocks_) append(b.parameters());
    if (enc_selector_) append(enc_selector_->parameters("enc.selector"));
    append(dec_first_.parameters());
    for (const auto& b : dec_blocks_) append(b.parameters());
    if (dec_selector_) append(dec_selector_->parameters("dec.selector"));
    out.push_back({"rate.mu", rate_model_.mu()});
    out.push_back({"rate.raw_sigma", rate_model_.raw_sigma()});
    return out;
}

std::vector<InventoryEntry> ToyCodec::bit_inventory() const {
    std::vector<InventoryEntry> out;
    const auto add_block = [&out](const DQBlock& block, BitSource weight_source, std::optional<std::size_t> layer) {
        for (const auto& p : block.parameters()) {
            InventoryEntry e{p.name, p.tensor.numel(), BitSource::FP32, ParamRole::Quantizer, std::nullopt};
            if (p.name == block.name() + ".weight") {
                e.source = weight_source;
                e.role = ParamRole::Weight;
                e.dynamic_layer = layer;
            } else if (p.name == block.name() + ".bias") {
                e.role = ParamRole::Bias;
            }
            out.push_back(std::move(e));
        }
    };
    const auto add_selector = [&out](const std::optional<BitWidthSelector>& sel, const std::string& prefix) {
        if (!sel) return;
        for (const auto& p : sel->parameters(prefix))
            out.push_back({p.name, p.tensor.numel(), BitSource::FP32, ParamRole::Selector, std::nullopt});
    };
    const std::size_t bl = config_.blocks_per_side();
    add_block(enc_first_, BitSource::Fixed8, std::nullopt);
    for (std::size_t l = 0; l < bl; ++l) add_block(enc_blocks_[l], BitSource::Dynamic, l);
    add_selector(enc_selector_, "enc.selector");
    add_block(dec_first_, BitSource::Fixed8, std::nullopt);
    for (std::size_t l = 0; l < bl; ++l) add_block(dec_blocks_[l], BitSource::Dynamic, bl + l);
    add_selector(dec_selector_, "dec.selector");
    out.push_back({"rate.mu", rate_model_.channels(), BitSource::FP32, ParamRole::Entropy, std::nullopt});
    out.push_back({"rate.raw_sigma", rate_model_.channels(), BitSource::FP32, ParamRole::Entropy, std::nullopt});
    return out;
}

std::size_t ToyCodec::dynamic_layers() const { return 2 * config_.blocks_per_side(); }

std::vector<int> ToyCodec::layer_bits(const std::optional<Selection>& encoder, const std::optional<Selection>& decoder,
                                      std::size_t sample) const {
    const std::size_t bl = config_.blocks_per_side();
    std::vector<int> bits;
    for (const auto* sel : {&encoder, &decoder})
        for (std::size_t l = 0; l < bl; ++l)
            bits.push_back(sel->has_value() ? config_.candidate_bits.at((*sel)->index(sample, l)) : config_.fixed_bits);
    return bits;
}

template <typename Self>
auto ToyCodec::activation_quantizers(Self& self) {
    using Q = std::conditional_t<std::is_const_v<Self>, const Quantizer, Quantizer>;
    std::vector<Q*> out;
    const auto add = [&out](auto& b) {
        for (std::size_t k = 0; k < b.branches(); ++k) out.push_back(&b.input_quantizer(k));
    };
    add(self.enc_first_);
    for (auto& b : self.enc_blocks_) add(b);
    add(self.dec_first_);
    for (auto& b : self.dec_blocks_) add(b);
    return out;
}

std::vector<bool> ToyCodec::calibration_flags() const {
    std::vector<bool> flags;
    for (const auto* q : activation_quantizers(*this)) flags.push_back(q->calibrated());
    return flags;
}

void ToyCodec::set_calibration_flags(const std::vector<bool>& flags) {
    const auto quantizers = activation_quantizers(*this);
    if (flags.size() != quantizers.size())
        throw ContractError("codec: " + std::to_string(flags.size()) + " calibration flags for " +
                            std::to_string(quantizers.size()) + " quantizers");
    for (std::size_t i = 0; i < flags.size(); ++i) quantizers[i]->set_calibrated(flags[i]);
}

}  // namespace dynaquant
