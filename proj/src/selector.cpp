#include "dynaquant/selector.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <set>

namespace dynaquant {

NoiseSource zero_noise() {
    return [] { return 0.0; };
}

NoiseSource gumbel_noise(Rng& rng) {
    return [&rng] { return gumbel(rng); };
}

template <typename T>
BasicTensor<T> gumbel_softmax(const BasicTensor<T>& logits, double tau, bool hard, const NoiseSource& noise) {
    if (!(tau > 0.0)) throw ParameterError("gumbel_softmax: temperature must be positive, got " + std::to_string(tau));
    const std::size_t axis = logits.ndim() - 1;
    const std::size_t categories = logits.dim(axis);
    std::vector<T> g(logits.numel());
    for (auto& v : g) v = static_cast<T>(noise());
    const auto perturbed = mul_scalar(add(logits, BasicTensor<T>::from(logits.shape(), std::move(g))), static_cast<T>(1.0 / tau));
    auto y = softmax(perturbed, axis);
    if (!hard) return y;
    std::vector<T> one_hot(y.numel(), T{0});
    const auto yv = y.data();
    for (std::size_t row = 0; row < y.numel() / categories; ++row) {
        const auto first = yv.begin() + static_cast<std::ptrdiff_t>(row * categories);
        const auto best = static_cast<std::size_t>(std::max_element(first, first + static_cast<std::ptrdiff_t>(categories)) - first);
        one_hot[row * categories + best] = T{1};
    }
    return straight_through(std::move(one_hot), y);
}

template BasicTensor<float> gumbel_softmax<float>(const BasicTensor<float>&, double, bool, const NoiseSource&);
template BasicTensor<double> gumbel_softmax<double>(const BasicTensor<double>&, double, bool, const NoiseSource&);

double effective_bits(std::span<const float> probs, std::span<const int> bits) {
    if (probs.size() != bits.size())
        throw ShapeError("effective_bits: " + std::to_string(probs.size()) + " probabilities for " +
                         std::to_string(bits.size()) + " candidates");
    double total = 0.0, mass = 0.0;
    for (std::size_t k = 0; k < probs.size(); ++k) {
        total += static_cast<double>(probs[k]) * bits[k];
        mass += probs[k];
    }
    if (std::abs(mass - 1.0) > 1e-5) throw ContractError("effective_bits: probabilities sum to " + std::to_string(mass));
    return total;
}

std::vector<int> validate_candidate_bits(std::vector<int> bits) {
    std::sort(bits.begin(), bits.end());
    if (bits.size() < 2) throw ParameterError("candidate bit set needs at least two entries");
    if (std::adjacent_find(bits.begin(), bits.end()) != bits.end())
        throw ParameterError("candidate bit-widths must be distinct");
    if (bits.front() < 2) throw ParameterError("candidate bit-widths must be >= 2");
    if (bits.back() > 16) throw ParameterError("candidate bit-widths must be <= 16");
    return bits;
}

void SelectorConfig::validate() const {
    if (in_channels == 0) throw ParameterError("selector: input channel count must be positive");
    if (layers == 0) throw ParameterError("selector: must serve at least one block");
    validate_candidate_bits(candidate_bits);
    if (pool == 0 || hidden == 0) throw ParameterError("selector: pool size and hidden width must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ParameterError("selector: dropout must lie in [0, 1)");
    if (!(tau > 0.0)) throw ParameterError("selector: temperature must be positive");
}

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng, bool requires_grad = true) {
    std::vector<float> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<float>(uniform(rng, -bound, bound));
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace

BitWidthSelector::BitWidthSelector(SelectorConfig config, Rng& init_rng) : config_(std::move(config)) {
    config_.validate();
    config_.candidate_bits = validate_candidate_bits(config_.candidate_bits);
    const std::size_t in = config_.in_channels * config_.pool * config_.pool;
    const std::size_t out = config_.layers * config_.candidate_bits.size();
    const double b1 = 1.0 / std::sqrt(static_cast<double>(in));
    const double b2 = 1.0 / std::sqrt(static_cast<double>(config_.hidden));
    w1_ = uniform_tensor({config_.hidden, in}, b1, init_rng);
    b1_ = uniform_tensor({config_.hidden}, b1, init_rng);
    w2_ = uniform_tensor({out, config_.hidden}, b2, init_rng);
    b2_ = uniform_tensor({out}, b2, init_rng);
}

Tensor BitWidthSelector::logits(const Tensor& activation, bool train, Rng* rng) const {
    if (activation.ndim() != 4 || activation.dim(1) != config_.in_channels)
        throw ShapeError("selector expects (batch, " + std::to_string(config_.in_channels) + ", H, W), got " +
                         shape_str(activation.shape()));
    if (train && rng == nullptr) throw ContractError("selector: training mode needs a random generator");
    const std::size_t batch = activation.dim(0);
    auto h = reshape(adaptive_avg_pool2d(activation, config_.pool, config_.pool),
                     {batch, config_.in_channels * config_.pool * config_.pool});
    h = linear(h, w1_, b1_);
    if (train) h = dropout(h, config_.dropout, true, *rng);
    h = linear(h, w2_, b2_);
    return reshape(h, {batch * config_.layers, config_.candidate_bits.size()});
}

Selection BitWidthSelector::select(const Tensor& activation, bool train, Rng* rng) const {
    const std::size_t batch = activation.dim(0);
    const std::size_t m = config_.candidate_bits.size();
    const Shape out_shape{batch, config_.layers, m};
    const auto z = logits(activation, train, rng);

    Selection sel;
    sel.soft = reshape(softmax(z, 1), out_shape);
    sel.choice.resize(batch * config_.layers);
    if (train) {
        auto y = gumbel_softmax(z, config_.tau, config_.hard, gumbel_noise(*rng));
        sel.probs = reshape(y, out_shape);
    } else {
        std::vector<float> one_hot(batch * config_.layers * m, 0.0f);
        const auto zv = z.data();
        for (std::size_t row = 0; row < batch * config_.layers; ++row) {
            std::size_t best = 0;
            for (std::size_t k = 1; k < m; ++k)
                if (zv[row * m + k] > zv[row * m + best]) best = k;
            one_hot[row * m + best] = 1.0f;
        }
        sel.probs = Tensor::from(out_shape, std::move(one_hot));
    }
    const auto pv = sel.probs.data();
    for (std::size_t row = 0; row < batch * config_.layers; ++row)
        sel.choice[row] = static_cast<std::size_t>(
            std::max_element(pv.begin() + static_cast<std::ptrdiff_t>(row * m),
                             pv.begin() + static_cast<std::ptrdiff_t>((row + 1) * m)) -
            (pv.begin() + static_cast<std::ptrdiff_t>(row * m)));
    return sel;
}

std::vector<NamedParameter> BitWidthSelector::parameters(const std::string& prefix) const {
    return {{prefix + ".linear1.weight", w1_},
            {prefix + ".linear1.bias", b1_},
            {prefix + ".linear2.weight", w2_},
            {prefix + ".linear2.bias", b2_}};
}

// ---------------------------------------------------------------------------

Quantizer::Quantizer(int bits, std::size_t channels, std::size_t channel_axis, bool learn_scale, bool learn_zero)
    : params_(AffineQuantParams<float>::make(bits, channel_axis, std::vector<float>(channels, 1.0f),
                                             std::vector<float>(channels, 0.0f), learn_scale, learn_zero)) {}

void Quantizer::calibrate(const Tensor& x) {
    const auto degenerate = calibrate_in_place(x, params_);
    if (!degenerate.empty())
        std::clog << "[dynaquant] calibration: " << degenerate.size() << " constant channel(s) at " << params_.bits
                  << " bits, scale floored at 1e-8\n";
    calibrated_ = true;
}

Tensor Quantizer::operator()(const Tensor& x, const GradientMode& mode) {
    if (!calibrated_) calibrate(x);
    return fake_quantize(x, params_, mode);
}

DQBlock::DQBlock(std::string name, LayerSpec spec, std::vector<int> bits, QuantOptions options, Rng& init_rng)
    : name_(std::move(name)), spec_(spec), bits_(std::move(bits)) {
    if (bits_.empty()) throw ParameterError("DQBlock needs at least one bit-width");
    if (spec_.in_channels == 0 || spec_.out_channels == 0 || spec_.kernel == 0 || spec_.stride == 0 || spec_.upsample == 0)
        throw ParameterError("DQBlock '" + name_ + "': layer dimensions must be positive");
    const std::size_t fan_in = spec_.in_channels * spec_.kernel * spec_.kernel;
    weight_ = uniform_tensor({spec_.out_channels, spec_.in_channels, spec_.kernel, spec_.kernel},
                             std::sqrt(6.0 / static_cast<double>(fan_in)), init_rng);
    bias_ = Tensor::zeros({spec_.out_channels}, true);
    for (int b : bits_) {
        weight_q_.emplace_back(b, spec_.out_channels, 0, options.learn_scale, options.learn_zero);
        weight_q_.back().calibrate(weight_);
        input_q_.emplace_back(b, spec_.in_channels, 1, options.learn_scale, options.learn_zero);
    }
}

Tensor DQBlock::forward_branch(const Tensor& x, std::size_t k, const GradientMode& mode, ExecStats* stats) {
    if (k >= bits_.size())
        throw ContractError("DQBlock '" + name_ + "': branch " + std::to_string(k) + " of " + std::to_string(bits_.size()));
    if (x.ndim() != 4 || x.dim(1) != spec_.in_channels)
        throw ShapeError("DQBlock '" + name_ + "': expected (batch, " + std::to_string(spec_.in_channels) +
                         ", H, W), got " + shape_str(x.shape()));
    auto xq = input_q_[k](x, mode);
    if (spec_.upsample > 1) xq = upsample_nearest2d(xq, spec_.upsample);
    const auto wq = weight_q_[k](weight_, mode);
    if (stats) stats->branch_evaluations += x.dim(0);
    return conv2d(xq, wq, bias_, {spec_.stride, spec_.padding});
}

Tensor DQBlock::forward(const Tensor& x, const Tensor& probs, const GradientMode& mode, ExecStats* stats) {
    const std::size_t batch = x.dim(0);
    if (probs.ndim() != 2 || probs.dim(0) != batch || probs.dim(1) != bits_.size())
        throw ContractError("DQBlock '" + name_ + "': probabilities " + shape_str(probs.shape()) + " do not match (" +
                            std::to_string(batch) + ", " + std::to_string(bits_.size()) + ")");
    Tensor out;
    for (std::size_t k = 0; k < bits_.size(); ++k) {
        const auto branch = forward_branch(x, k, mode, stats);
        const auto weight = reshape(select(probs, 1, k), {batch, 1, 1, 1});
        const auto term = mul(weight, branch);
        out = out.defined() ? add(out, term) : term;
    }
    return out;
}

Tensor DQBlock::infer(const Tensor& x, std::span<const std::size_t> choice, const GradientMode& mode, ExecStats* stats) {
    const std::size_t batch = x.dim(0);
    if (choice.size() != batch)
        throw ContractError("DQBlock '" + name_ + "': " + std::to_string(choice.size()) + " choices for batch " +
                            std::to_string(batch));
    if (std::all_of(choice.begin(), choice.end(), [&](std::size_t c) { return c == choice.front(); }))
        return forward_branch(x, choice.front(), mode, stats);
    std::vector<Tensor> outputs;
    outputs.reserve(batch);
    Shape one = x.shape();
    one[0] = 1;
    for (std::size_t i = 0; i < batch; ++i) outputs.push_back(forward_branch(reshape(select(x, 0, i), one), choice[i], mode, stats));
    return concat(outputs, 0);
}

std::vector<NamedParameter> DQBlock::parameters() const {
    std::vector<NamedParameter> out{{name_ + ".weight", weight_}, {name_ + ".bias", bias_}};
    for (std::size_t k = 0; k < bits_.size(); ++k) {
        const std::string tag = name_ + ".b" + std::to_string(bits_[k]);
        out.push_back({tag + ".weight_quant.raw_scale", weight_q_[k].params().raw_scale});
        out.push_back({tag + ".weight_quant.zero_point", weight_q_[k].params().zero_point});
        out.push_back({tag + ".input_quant.raw_scale", input_q_[k].params().raw_scale});
        out.push_back({tag + ".input_quant.zero_point", input_q_[k].params().zero_point});
    }
    return out;
}

}  // namespace dynaquant
