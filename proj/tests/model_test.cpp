#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <thread>

#include "dynaquant/errors.hpp"
#include "dynaquant/model.hpp"
#include "gradcheck.hpp"

using namespace dynaquant;

namespace {

CoderConfig small_config() {
    CoderConfig c;
    c.channels = 8;
    c.latent_channels = 4;
    c.selector_hidden = 16;
    return c;
}

Tensor random_images(Shape shape, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<float> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<float>(uniform(rng, 0.0, 1.0));
    return Tensor::from(std::move(shape), std::move(v));
}

bool all_integer(const Tensor& t) {
    return std::all_of(t.data().begin(), t.data().end(), [](float v) { return v == std::round(v); });
}

// Bits of one element from first principles: -log2 of the N(mu, sigma) mass on the
// unit bin around y, computed with erfc in long double.
long double oracle_bits(long double y, long double mu, long double sigma) {
    const auto cdf = [](long double t) { return 0.5L * std::erfc(-t / std::sqrt(2.0L)); };
    const long double p = cdf((y + 0.5L - mu) / sigma) - cdf((y - 0.5L - mu) / sigma);
    return -std::log2(std::max(p, 1e-9L));
}

}  // namespace

TEST(CoderConfigTest, Validation) {
    auto c = small_config();
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(c.blocks_per_side(), 2u);
    EXPECT_EQ(c.stride(), 8u);
    c.stages = 1;
    EXPECT_THROW(c.validate(), ParameterError);
    c = small_config();
    c.candidate_bits = {};
    EXPECT_THROW(c.validate(), ParameterError);
}

TEST(ToyCodecTest, ZeroImageGivesFiniteLatentOfExpectedShape) {
    ToyCodec codec(small_config(), 1);
    NoGradGuard guard;
    const auto code = codec.encode(Tensor::zeros({3, 64, 48}), false, nullptr);
    EXPECT_EQ(code.y_hat.shape(), (Shape{1, 4, 8, 6}));
    EXPECT_EQ(code.height, 64u);
    EXPECT_EQ(code.width, 48u);
    for (float v : code.y_hat.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(ToyCodecTest, EvalIsDeterministicAndIntegerValued) {
    ToyCodec codec(small_config(), 2);
    const auto x = random_images({2, 3, 32, 32}, 5);
    NoGradGuard guard;
    std::optional<Selection> s1, s2;
    const auto a = codec.encode(x, false, nullptr, &s1);
    const auto b = codec.encode(x, false, nullptr, &s2);
    EXPECT_EQ(std::vector<float>(a.y_hat.data().begin(), a.y_hat.data().end()),
              std::vector<float>(b.y_hat.data().begin(), b.y_hat.data().end()));
    EXPECT_EQ(s1->choice, s2->choice);
    EXPECT_TRUE(all_integer(a.y_hat));

    const auto r1 = codec.decode(a, false, nullptr);
    const auto r2 = codec.decode(a, false, nullptr);
    EXPECT_EQ(std::vector<float>(r1.data().begin(), r1.data().end()),
              std::vector<float>(r2.data().begin(), r2.data().end()));
}

TEST(ToyCodecTest, TrainModeLatentIsIntegerAndGradientsFlow) {
    ToyCodec codec(small_config(), 3);
    Rng rng(11);
    const auto x = random_images({2, 3, 32, 32}, 6);
    const auto out = codec.forward(x, true, &rng);
    EXPECT_TRUE(all_integer(out.y_hat));
    backward(add(out.rate_bits, mse(out.x_hat, x)));
    // Encoder weights only reach the loss through the rounded latent.
    const auto params = codec.parameters();
    const auto enc0 = std::find_if(params.begin(), params.end(), [](const auto& p) { return p.name == "enc.0.weight"; });
    ASSERT_NE(enc0, params.end());
    ASSERT_TRUE(enc0->tensor.has_grad());
    const auto g = enc0->tensor.grad();
    EXPECT_TRUE(std::any_of(g.begin(), g.end(), [](float v) { return v != 0.0f; }));
}

TEST(ToyCodecTest, ReconstructionMatchesInputShapeAndRange) {
    ToyCodec codec(small_config(), 4);
    NoGradGuard guard;
    for (const Shape& shape : {Shape{1, 3, 32, 32}, Shape{2, 3, 50, 37}}) {
        const auto x = random_images(shape, 7);
        const auto out = codec.forward(x, false, nullptr);
        EXPECT_EQ(out.x_hat.shape(), shape);
        for (float v : out.x_hat.data()) {
            EXPECT_GE(v, 0.0f);
            EXPECT_LE(v, 1.0f);
        }
    }
}

TEST(ToyCodecTest, UnpaddedIndivisibleInputIsRejected) {
    auto c = small_config();
    c.pad = false;
    ToyCodec codec(c, 5);
    NoGradGuard guard;
    EXPECT_THROW(codec.encode(Tensor::zeros({3, 36, 32}), false, nullptr), ShapeError);
    EXPECT_NO_THROW(codec.encode(Tensor::zeros({3, 40, 32}), false, nullptr));
}

TEST(ToyCodecTest, TrainingNeedsAGenerator) {
    ToyCodec codec(small_config(), 6);
    EXPECT_THROW(codec.forward(Tensor::zeros({1, 3, 16, 16}), true, nullptr), ContractError);
}

TEST(ToyCodecTest, EncoderAndDecoderMirrorEachOther) {
    ToyCodec codec(small_config(), 7);
    EXPECT_EQ(codec.dynamic_layers(), 4u);
    NoGradGuard guard;
    const auto out = codec.forward(Tensor::zeros({1, 3, 16, 16}), false, nullptr);
    ASSERT_TRUE(out.encoder_selection && out.decoder_selection);
    EXPECT_EQ(out.encoder_selection->layers(), 2u);
    EXPECT_EQ(out.decoder_selection->layers(), 2u);
    const auto bits = codec.layer_bits(out.encoder_selection, out.decoder_selection, 0);
    ASSERT_EQ(bits.size(), 4u);
    for (int b : bits) EXPECT_TRUE(b == 4 || b == 6 || b == 8);
}

TEST(ToyCodecTest, FixedModeHasNoSelectors) {
    auto c = small_config();
    c.dynamic = false;
    c.fixed_bits = 6;
    ToyCodec codec(c, 8);
    NoGradGuard guard;
    const auto out = codec.forward(Tensor::zeros({1, 3, 16, 16}), false, nullptr);
    EXPECT_FALSE(out.encoder_selection.has_value());
    EXPECT_EQ(codec.layer_bits(std::nullopt, std::nullopt, 0), (std::vector<int>{6, 6, 6, 6}));
    for (const auto& e : codec.bit_inventory()) EXPECT_NE(e.role, ParamRole::Selector) << e.name;
}

TEST(ToyCodecTest, ConcurrentEvaluationOfAFrozenModel) {
    ToyCodec codec(small_config(), 9);
    const auto x = random_images({1, 3, 32, 32}, 8);
    std::vector<float> reference;
    {
        NoGradGuard guard;
        const auto out = codec.forward(x, false, nullptr);
        reference.assign(out.x_hat.data().begin(), out.x_hat.data().end());
    }
    std::vector<std::vector<float>> results(3);
    std::vector<std::thread> workers;
    for (auto& r : results)
        workers.emplace_back([&codec, &x, &r] {
            NoGradGuard guard;
            const auto out = codec.forward(x, false, nullptr);
            r.assign(out.x_hat.data().begin(), out.x_hat.data().end());
        });
    for (auto& w : workers) w.join();
    for (const auto& r : results) EXPECT_EQ(r, reference);
}

// ---------------------------------------------------------------------------

TEST(RateModelTest, BinCentredAtMeanMatchesNormalCdfOracle) {
    const long double expected = -std::log2(std::erf(1.0L / std::sqrt(2.0L)));
    EXPECT_NEAR(expected, 0.550699, 1e-6);
    EXPECT_NEAR(element_bits(0.0, 0.0, 0.5), static_cast<double>(expected), 1e-12);
    EXPECT_NEAR(element_bits(3.0, 3.0, 0.5), static_cast<double>(expected), 1e-12);
}

TEST(RateModelTest, ElementBitsAgreeWithOracle) {
    Rng rng(21);
    for (int i = 0; i < 500; ++i) {
        const double y = std::round(uniform(rng, -20, 20));
        const double mu = uniform(rng, -5, 5);
        const double sigma = uniform(rng, 0.05, 10);
        EXPECT_NEAR(element_bits(y, mu, sigma), static_cast<double>(oracle_bits(y, mu, sigma)), 1e-7)
            << y << " " << mu << " " << sigma;
    }
}

TEST(RateModelTest, WiderDistributionCostsMoreBitsAtFixedOffset) {
    double previous = 0.0;
    for (double sigma : {1.0, 2.0, 4.0, 8.0, 16.0, 64.0}) {
        const double b = element_bits(1.3, 1.0, sigma);
        EXPECT_GT(b, previous);
        previous = b;
    }
}

TEST(RateModelTest, FloorCapsBitsFarInTheTail) {
    EXPECT_NEAR(element_bits(1000.0, 0.0, 0.1), -std::log2(1e-9), 1e-9);
}

TEST(RateModelTest, SigmaStartsAtTheRequestedValueAndStaysPositive) {
    RateModel rm(3, 2.0);
    const auto initial = rm.sigma();
    for (float s : initial.data()) EXPECT_NEAR(s, 2.0f, 1e-5f);
    Tensor raw = rm.raw_sigma();
    std::fill(raw.mutable_data().begin(), raw.mutable_data().end(), -80.0f);
    const auto squashed = rm.sigma();
    for (float s : squashed.data()) EXPECT_GT(s, 0.0f);
}

TEST(RateModelTest, TotalBitsSumElementBits) {
    RateModel rm(2, 0.7);
    Tensor mu = rm.mu();
    mu.mutable_data()[0] = 0.25f;
    mu.mutable_data()[1] = -1.5f;
    const std::vector<float> y{0, 1, -2, 3, -1, -1, 0, 5};
    const auto bits = rm.bits(Tensor::from({1, 2, 2, 2}, y));
    long double expected = 0.0L;
    for (std::size_t i = 0; i < y.size(); ++i) expected += oracle_bits(y[i], i < 4 ? 0.25L : -1.5L, rm.sigma().at(0));
    EXPECT_NEAR(bits.item(), static_cast<double>(expected), 1e-4);
}

TEST(RateModelTest, GradientsMatchFiniteDifferences) {
    RateModel rm(2, 1.3);
    Tensor mu = rm.mu();
    mu.mutable_data()[0] = 0.3f;
    mu.mutable_data()[1] = -0.6f;
    Tensor y = Tensor::from({1, 2, 1, 3}, {0.2f, -1.1f, 2.4f, 0.7f, -0.4f, 1.9f}, true);
    const auto out = rm.bits(y);
    backward(out);

    // Central differences of the long-double oracle, elementwise.
    const double h = 1e-4;
    const auto total = [&](std::vector<double> yv, std::vector<double> m, std::vector<double> raw) {
        long double t = 0.0L;
        for (std::size_t i = 0; i < yv.size(); ++i) {
            const std::size_t c = i / 3;
            t += oracle_bits(yv[i], m[c], std::log1p(std::exp(raw[c])));
        }
        return static_cast<double>(t);
    };
    std::vector<double> yv(y.data().begin(), y.data().end());
    std::vector<double> m(rm.mu().data().begin(), rm.mu().data().end());
    std::vector<double> raw(rm.raw_sigma().data().begin(), rm.raw_sigma().data().end());
    for (std::size_t i = 0; i < yv.size(); ++i) {
        auto up = yv, dn = yv;
        up[i] += h;
        dn[i] -= h;
        const double fd = (total(up, m, raw) - total(dn, m, raw)) / (2 * h);
        EXPECT_LT(dynaquant::testing::rel_error(y.grad()[i], fd), 1e-3) << "y[" << i << "]";
    }
    for (std::size_t c = 0; c < 2; ++c) {
        auto up = m, dn = m;
        up[c] += h;
        dn[c] -= h;
        const double fd_mu = (total(yv, up, raw) - total(yv, dn, raw)) / (2 * h);
        EXPECT_LT(dynaquant::testing::rel_error(rm.mu().grad()[c], fd_mu), 1e-3) << "mu[" << c << "]";
        auto rup = raw, rdn = raw;
        rup[c] += h;
        rdn[c] -= h;
        const double fd_raw = (total(yv, m, rup) - total(yv, m, rdn)) / (2 * h);
        EXPECT_LT(dynaquant::testing::rel_error(rm.raw_sigma().grad()[c], fd_raw), 1e-3) << "raw_sigma[" << c << "]";
    }
}

TEST(RateModelTest, RateIsNonNegativeAndInvariantToTiledBatches) {
    ToyCodec codec(small_config(), 10);
    NoGradGuard guard;
    const auto x = random_images({1, 3, 32, 32}, 9);
    const auto tiled = concat<float>({x, x, x}, 0);
    const auto one = codec.forward(x, false, nullptr);
    const auto three = codec.forward(tiled, false, nullptr);
    EXPECT_GE(one.bpp, 0.0);
    EXPECT_NEAR(three.bpp, one.bpp, 1e-6 * std::max(1.0, one.bpp));

    const auto code = codec.encode(x, false, nullptr);
    EXPECT_NEAR(estimate_rate(code, codec.rate_model()), one.bpp, 1e-6 * std::max(1.0, one.bpp));
}

// ---------------------------------------------------------------------------

TEST(BitInventoryTest, CoversEveryParameterExactlyOnce) {
    ToyCodec codec(small_config(), 12);
    const auto params = codec.parameters();
    const auto inventory = codec.bit_inventory();
    ASSERT_EQ(params.size(), inventory.size());
    std::set<std::string> names;
    std::size_t total = 0, listed = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        EXPECT_EQ(params[i].name, inventory[i].name);
        EXPECT_EQ(params[i].tensor.numel(), inventory[i].params);
        EXPECT_TRUE(names.insert(inventory[i].name).second) << "duplicate " << inventory[i].name;
        total += params[i].tensor.numel();
        listed += inventory[i].params;
    }
    EXPECT_EQ(total, listed);
}

TEST(BitInventoryTest, FirstModulesAreFixedEightBitAndOthersDynamic) {
    ToyCodec codec(small_config(), 13);
    std::set<std::size_t> dynamic_layers;
    for (const auto& e : codec.bit_inventory()) {
        if (e.role != ParamRole::Weight) {
            EXPECT_EQ(e.source, BitSource::FP32) << e.name;
            continue;
        }
        if (e.name == "enc.0.weight" || e.name == "dec.0.weight") {
            EXPECT_EQ(e.source, BitSource::Fixed8);
        } else {
            EXPECT_EQ(e.source, BitSource::Dynamic) << e.name;
            ASSERT_TRUE(e.dynamic_layer.has_value());
            dynamic_layers.insert(*e.dynamic_layer);
        }
    }
    EXPECT_EQ(dynamic_layers, (std::set<std::size_t>{0, 1, 2, 3}));
}

TEST(BitInventoryTest, StableAcrossConstructions) {
    const auto a = ToyCodec(small_config(), 1).bit_inventory();
    const auto b = ToyCodec(small_config(), 99).bit_inventory();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].name, b[i].name);
        EXPECT_EQ(a[i].params, b[i].params);
        EXPECT_EQ(a[i].source, b[i].source);
    }
}

TEST(BitInventoryTest, FirstModulesIgnoreTheCandidateSet) {
    for (const std::vector<int>& bits : {std::vector<int>{4, 6, 8}, std::vector<int>{6, 8, 10}, std::vector<int>{2, 3}}) {
        auto c = small_config();
        c.candidate_bits = bits;
        ToyCodec codec(c, 14);
        std::vector<std::string> first;
        for (const auto& p : codec.parameters())
            if (p.name.starts_with("enc.0.") || p.name.starts_with("dec.0.")) first.push_back(p.name);
        EXPECT_EQ(first, (std::vector<std::string>{"enc.0.weight", "enc.0.bias", "enc.0.b8.weight_quant.raw_scale",
                                                   "enc.0.b8.weight_quant.zero_point", "enc.0.b8.input_quant.raw_scale",
                                                   "enc.0.b8.input_quant.zero_point", "dec.0.weight", "dec.0.bias",
                                                   "dec.0.b8.weight_quant.raw_scale", "dec.0.b8.weight_quant.zero_point",
                                                   "dec.0.b8.input_quant.raw_scale", "dec.0.b8.input_quant.zero_point"}));
    }
}
