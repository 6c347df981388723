#include <gtest/gtest.h>

#include <cmath>

#include "dynaquant/quant.hpp"
#include "gradcheck.hpp"
#include "surrogate_oracle.hpp"

using namespace dynaquant;
using dynaquant::testing::rel_error;
using dynaquant::testing::Surrogate;

namespace {

AffineQuantParams<double> scalar_params(double s, double z, int bits = 8, bool learn = false) {
    return AffineQuantParams<double>::make(bits, 0, {s}, {z}, learn, learn);
}

}  // namespace

TEST(Quantize, WorkedExamples) {
    const auto p = scalar_params(0.1, 0.0);
    EXPECT_EQ(quantize(Tensor64::from({1}, {1.234}), p).codes[0], 12);
    EXPECT_EQ(quantize(Tensor64::from({1}, {100.0}), p).codes[0], 255);
    EXPECT_EQ(quantize(Tensor64::from({1}, {-3.0}), p).codes[0], 0);
    EXPECT_NEAR(dequantize<double>({{1}, {12}}, p).item(), 1.2, 1e-12);
    EXPECT_NEAR(dequantize<double>({{1}, {128}}, scalar_params(1.0, 128.0)).item(), 0.0, 1e-12);
    EXPECT_NEAR(fake_quantize(Tensor64::from({1}, {1.234}), p, GradientMode::ste()).item(), 1.2, 1e-12);
}

TEST(Quantize, TiesRoundAwayFromZero) {
    const auto p = scalar_params(1.0, 0.0);
    EXPECT_EQ(quantize(Tensor64::from({1, 2}, {2.5, 3.5}), p).codes, (std::vector<std::int32_t>{3, 4}));
}

TEST(Quantize, Errors) {
    const auto p = scalar_params(0.1, 0.0);
    EXPECT_THROW(quantize(Tensor64::from({1}, {std::nan("")}), p), NumericError);
    EXPECT_THROW(dequantize<double>({{1}, {256}}, p), ContractError);
    EXPECT_THROW(dequantize<double>({{1}, {-1}}, p), ContractError);
    EXPECT_THROW(GradientMode::dgm(0.0), ParameterError);
    EXPECT_THROW(GradientMode::dgm(-1.0), ParameterError);
    EXPECT_THROW(quantize(Tensor64::zeros({2, 3}), AffineQuantParams<double>::make(8, 1, {1, 1}, {0, 0})), ShapeError);
}

TEST(Quantize, ScaleStaysPositiveUnderAnyRawValue) {
    auto p = scalar_params(0.5, 0.0);
    for (double raw : {-50.0, -5.0, 0.0, 5.0}) {
        p.raw_scale.mutable_data()[0] = raw;
        EXPECT_GT(p.scale_values()[0], 0.0);
    }
}

TEST(Quantize, RoundTripBoundGridAndIdempotence) {
    Rng rng(21);
    for (int bits : {2, 4, 8}) {
        const double s = uniform(rng, 0.01, 0.5), z = uniform(rng, 0.0, 10.0);
        const auto p = scalar_params(s, z, bits);
        const double lo = s * (0.0 - z), hi = s * (static_cast<double>(p.n_max()) - z);
        std::vector<double> xs(2000);
        for (auto& x : xs) x = uniform(rng, lo, hi);
        const auto x = Tensor64::from({1, xs.size()}, xs);
        const auto xt = fake_quantize(x, p, GradientMode::ste());
        const auto codes = quantize(x, p).codes;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            EXPECT_LE(std::abs(xt.data()[i] - xs[i]), p.scale_values()[0] / 2 + 1e-12);
            EXPECT_NEAR(xt.data()[i], p.scale_values()[0] * (codes[i] - z), 1e-12);
        }
        const auto again = fake_quantize(xt, p, GradientMode::ste());
        for (std::size_t i = 0; i < xs.size(); ++i) EXPECT_NEAR(again.data()[i], xt.data()[i], 1e-12);
    }
}

TEST(Quantize, PerChannelLayout) {
    // Axis 1 of a (2, 2, 1) tensor: channel 0 scale 1, channel 1 scale 10.
    const auto p = AffineQuantParams<double>::make(8, 1, {1.0, 10.0}, {0.0, 0.0});
    const auto codes = quantize(Tensor64::from({2, 2, 1}, {3.0, 30.0, 4.0, 40.0}), p).codes;
    EXPECT_EQ(codes, (std::vector<std::int32_t>{3, 3, 4, 4}));
}

TEST(FakeQuantize, SteInRangeIsIdentity) {
    auto x = Tensor64::from({1, 3}, {0.31, 1.77, 2.02}, true);
    auto s = Tensor64::from({1}, {0.1}, true);
    auto z = Tensor64::from({1}, {3.3}, true);
    backward(sum(fake_quantize_with_scale(x, s, z, 8, 0, GradientMode::ste())));
    for (double g : x.grad()) EXPECT_EQ(g, 1.0);
    EXPECT_NEAR(z.grad()[0], 0.0, 1e-15);
}

TEST(FakeQuantize, OutOfRangeUsesSaturatedEndpoint) {
    auto x = Tensor64::from({1, 2}, {-5.0, 500.0}, true);
    auto s = Tensor64::from({1}, {0.5}, true);
    auto z = Tensor64::from({1}, {2.0}, true);
    backward(sum(fake_quantize_with_scale(x, s, z, 8, 0, GradientMode::dgm(5.0))));
    EXPECT_EQ(x.grad()[0], 0.0);
    EXPECT_EQ(x.grad()[1], 0.0);
    EXPECT_NEAR(s.grad()[0], (0.0 - 2.0) + (255.0 - 2.0), 1e-12);
    EXPECT_NEAR(z.grad()[0], -1.0, 1e-12);
}

TEST(FakeQuantize, DgmMatchesSurrogateFiniteDifferences) {
    Rng rng(22);
    int checked = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const int bits = std::array{4, 6, 8}[trial % 3];
        const double beta = std::array{1.0, 2.0, 5.0, 10.0}[trial % 4];
        const double s = uniform(rng, 0.01, 0.3), z = uniform(rng, -2.0, 8.0);
        const double n_max = std::ldexp(1.0, bits) - 1;
        const double x = s * (uniform(rng, -3.0, n_max + 3.0) - z);
        const Surrogate oracle({x, s, z, bits, beta});
        if (oracle.boundary_distance() < 1e-3) continue;
        auto xt = Tensor64::from({1}, {x}, true);
        auto st = Tensor64::from({1}, {s}, true);
        auto zt = Tensor64::from({1}, {z}, true);
        backward(sum(fake_quantize_with_scale(xt, st, zt, bits, 0, GradientMode::dgm(beta))));
        const auto fd = oracle.finite_differences();
        EXPECT_LT(rel_error(xt.grad()[0], fd.dx), 1e-4) << "x, trial " << trial;
        EXPECT_LT(rel_error(st.grad()[0], fd.ds), 1e-4) << "s, trial " << trial;
        EXPECT_LT(rel_error(zt.grad()[0], fd.dz), 1e-4) << "z, trial " << trial;
        ++checked;
    }
    EXPECT_GT(checked, 150);
}

TEST(FakeQuantize, RawScaleGradientChainsThroughSoftplus) {
    auto p = scalar_params(0.2, 1.5, 8, true);
    auto x = Tensor64::from({1, 2}, {0.73, 4.1}, true);
    backward(sum(fake_quantize(x, p, GradientMode::dgm(5.0))));
    auto st = Tensor64::from({1}, {p.scale_values()[0]}, true);
    backward(sum(fake_quantize_with_scale(x, st, p.zero_point, 8, 0, GradientMode::dgm(5.0))));
    const double sigmoid = 1.0 / (1.0 + std::exp(-p.raw_scale.data()[0]));
    EXPECT_NEAR(p.raw_scale.grad()[0], st.grad()[0] * sigmoid, 1e-12);
}

TEST(FakeQuantize, RoundWithDgmBackwardMatchesFakeQuantize) {
    const double beta = 5.0;
    const auto round_dgm = register_custom_gradient<double>(
        "round_dgm",
        [](std::span<const Tensor64> in) {
            std::vector<double> v(in[0].data().begin(), in[0].data().end());
            for (auto& x : v) x = std::round(x);
            return Array<double>{in[0].shape(), std::move(v)};
        },
        [beta](std::span<const Tensor64> in, std::span<const double>, std::span<const double> up) {
            std::vector<double> g(up.begin(), up.end());
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double u = in[0].data()[i];
                g[i] *= dgm_grad(u - std::floor(u), beta);
            }
            return std::vector<std::vector<double>>{g};
        });
    auto a = Tensor64::from({1, 4}, {0.2, 3.61, 17.5, 100.93}, true);
    auto b = Tensor64::from({1, 4}, {0.2, 3.61, 17.5, 100.93}, true);
    backward(dynaquant::testing::probe(round_dgm({a})));
    backward(dynaquant::testing::probe(fake_quantize_with_scale(b, Tensor64::from({1}, {1.0}), Tensor64::from({1}, {0.0}), 8, 0,
                                                     GradientMode::dgm(beta))));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(a.grad()[i], b.grad()[i], 1e-14);
}

TEST(Dgm, ProxyValuesAtAnchors) {
    for (double beta : {0.5, 1.0, 2.0, 5.0, 10.0}) {
        EXPECT_DOUBLE_EQ(dgm_proxy(0.5, beta), 0.5);
        EXPECT_NEAR(dgm_proxy(0.0, beta), 0.0, 1e-15);
        EXPECT_NEAR(dgm_proxy(1.0, beta), 1.0, 1e-15);
        EXPECT_NEAR(dgm_soft_round(2.0, beta), 2.0, 1e-15);
        EXPECT_NEAR(dgm_grad(0.0, beta), dgm_grad(1.0, beta), 1e-15);
    }
}

TEST(Dgm, GradMatchesFiniteDifference) {
    const double h = 1e-5;
    const double fd = (dgm_proxy(0.25 + h, 2.0) - dgm_proxy(0.25 - h, 2.0)) / (2 * h);
    EXPECT_NEAR(dgm_grad(0.25, 2.0), fd, 1e-6);
}

TEST(Dgm, PositiveAndAmplitudeModulatedByBeta) {
    double prev_max = 0.0, prev_min = 1e9;
    for (double beta : {1.0, 2.0, 5.0, 10.0}) {
        double lo = 1e9, hi = 0.0;
        for (int i = 0; i <= 1000; ++i) {
            const double g = dgm_grad(i / 1000.0, beta);
            EXPECT_GT(g, 0.0);
            lo = std::min(lo, g);
            hi = std::max(hi, g);
        }
        EXPECT_GT(hi, prev_max);
        EXPECT_LT(lo, prev_min);
        EXPECT_DOUBLE_EQ(hi, dgm_grad(0.5, beta));
        prev_max = hi;
        prev_min = lo;
    }
}

TEST(Calibration, SymmetricRange) {
    const auto cal = calibrate_init(Tensor64::from({1, 3}, {-1.0, 0.3, 1.0}), 8, 0);
    EXPECT_NEAR(cal.params.scale_values()[0], 2.0 / 255.0, 1e-12);
    EXPECT_NEAR(cal.params.zero_point.data()[0], 127.5, 1e-9);
    EXPECT_TRUE(cal.degenerate_channels.empty());
}

TEST(Calibration, ConstantChannelIsDegenerate) {
    const auto cal = calibrate_init(Tensor64::from({2, 2}, {0.0, 1.0, 0.0, 2.0}), 8, 1);
    ASSERT_EQ(cal.degenerate_channels, (std::vector<std::size_t>{0}));
    EXPECT_NEAR(cal.params.scale_values()[0], 1e-8, 1e-14);
    EXPECT_NEAR(cal.params.zero_point.data()[0], 0.0, 1e-9);
}

TEST(Calibration, ReconstructionWithinHalfStep) {
    Rng rng(23);
    std::vector<double> v(4 * 500);
    for (auto& x : v) x = uniform(rng, -3.0, 2.0);
    const auto batch = Tensor64::from({500, 4}, v);
    const auto cal = calibrate_init(batch, 6, 1);
    const auto rec = fake_quantize(batch, cal.params, GradientMode::ste());
    const auto s = cal.params.scale_values();
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_LE(std::abs(rec.data()[i] - v[i]), s[i % 4] / 2 + 1e-9);
}

TEST(Calibration, MoreBitsNeverIncreaseError) {
    Rng rng(24);
    std::vector<double> v(3000);
    for (auto& x : v) x = standard_normal(rng);
    const auto batch = Tensor64::from({3000, 1}, v);
    double prev = 1e9;
    for (int bits = 2; bits <= 12; bits += 2) {
        const auto cal = calibrate_init(batch, bits, 1);
        const auto rec = fake_quantize(batch, cal.params, GradientMode::ste());
        double err = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) err += std::abs(rec.data()[i] - v[i]);
        err /= static_cast<double>(v.size());
        EXPECT_LE(err, prev);
        prev = err;
    }
}

TEST(Calibration, InPlaceKeepsTensorIdentity) {
    auto params = AffineQuantParams<float>::make(8, 0, {1.0f}, {0.0f});
    const auto* before = params.zero_point.node().get();
    calibrate_in_place(Tensor::from({1, 4}, {-1.0f, 0.0f, 0.5f, 1.0f}), params);
    EXPECT_EQ(params.zero_point.node().get(), before);
    EXPECT_TRUE(params.zero_point.requires_grad());
    EXPECT_NEAR(params.scale_values()[0], 2.0f / 255.0f, 1e-6f);
}
