#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "dynaquant/errors.hpp"
#include "dynaquant/train.hpp"

using namespace dynaquant;
namespace fs = std::filesystem;

namespace {

CoderConfig small_coder() {
    CoderConfig c;
    c.channels = 8;
    c.latent_channels = 4;
    c.selector_hidden = 16;
    return c;
}

TrainConfig small_train(std::uint64_t seed = 0) {
    TrainConfig t;
    t.batch_size = 2;
    t.crop = 32;
    t.steps = 10;
    t.seed = seed;
    t.lr = 1e-3;
    return t;
}

ImageSet small_images() {
    SyntheticSpec spec;
    spec.count = 4;
    spec.size = 32;
    return synthetic_dataset(spec);
}

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

class TempDir {
public:
    TempDir() {
        path_ = fs::temp_directory_path() /
                ("dynaquant_train_test_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
                 ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

std::vector<unsigned char> read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(BitsLossTest, WorkedExamples) {
    const std::vector<int> b468{4, 6, 8}, b6810{6, 8, 10};
    EXPECT_EQ(bits_loss(Tensor::from({1, 2, 3}, {0, 0, 1, 1, 0, 0}), b468).item(), 6.0f);
    EXPECT_EQ(bits_loss(Tensor::from({1, 2, 3}, std::vector<float>(6, 1.0f / 3.0f)), b6810).item(), 8.0f);
    EXPECT_FLOAT_EQ(bits_loss(Tensor::from({1, 1, 3}, {0.2f, 0.3f, 0.5f}), b468).item(), 6.6f);
}

TEST(BitsLossTest, AveragesOverBatch) {
    const std::vector<int> bits{4, 8};
    EXPECT_EQ(bits_loss(Tensor::from({2, 1, 2}, {1, 0, 0, 1}), bits).item(), 6.0f);
}

TEST(BitsLossTest, StaysWithinCandidateRange) {
    Rng rng(3);
    const std::vector<int> bits{4, 6, 8};
    for (int trial = 0; trial < 2000; ++trial) {
        const std::size_t batch = 1 + rng() % 3, layers = 1 + rng() % 5;
        std::vector<float> p(batch * layers * 3);
        for (std::size_t r = 0; r < batch * layers; ++r) {
            double total = 0;
            for (int k = 0; k < 3; ++k) total += (p[r * 3 + k] = static_cast<float>(uniform_open01(rng)));
            for (int k = 0; k < 3; ++k) p[r * 3 + k] = static_cast<float>(p[r * 3 + k] / total);
        }
        const float v = bits_loss(Tensor::from({batch, layers, 3}, p), bits).item();
        EXPECT_GE(v, 4.0f - 1e-5f);
        EXPECT_LE(v, 8.0f + 1e-5f);
    }
}

TEST(BitsLossTest, GradientIsTheBitWidthOverRows) {
    auto p = Tensor::from({1, 2, 3}, {0.2f, 0.3f, 0.5f, 0.1f, 0.1f, 0.8f}, true);
    backward(bits_loss(p, std::vector<int>{4, 6, 8}));
    EXPECT_EQ(values(Tensor::from({6}, std::vector<float>(p.grad().begin(), p.grad().end()))),
              (std::vector<float>{2, 3, 4, 2, 3, 4}));
}

TEST(BitsLossTest, Errors) {
    const std::vector<int> bits{4, 6, 8};
    // An empty layer set cannot even be built as a tensor.
    EXPECT_THROW(bits_loss(Tensor::zeros({1, 0, 3}), bits), ShapeError);
    EXPECT_THROW(bits_loss(Tensor::zeros({1, 2, 2}), bits), ShapeError);
    EXPECT_THROW(bits_loss(Tensor::zeros({2, 3}), bits), ShapeError);
}

TEST(TotalLossTest, WeightedSum) {
    EXPECT_DOUBLE_EQ(total_loss(1.0, 0.5, 8.0, 0.01, 0.001), 1.013);
    EXPECT_EQ(total_loss(0.3, 2.0, 4.0, 0.1, 0.0), total_loss(0.3, 2.0, 8.0, 0.1, 0.0));
    EXPECT_DOUBLE_EQ(total_loss(0.7, 0.0, 6.0, 0.1, 0.01), 0.7 + 0.06);
    EXPECT_TRUE(std::isnan(total_loss(NAN, 1.0, 1.0, 0.1, 0.1)));

    const auto t = total_loss(Tensor::scalar(1.0f), Tensor::scalar(0.5f), Tensor::scalar(8.0f), 0.01, 0.001);
    EXPECT_FLOAT_EQ(t.item(), 1.013f);
}

TEST(TrainConfigTest, ValidationNamesTheKey) {
    const auto key_of = [](TrainConfig c) {
        try {
            c.validate();
        } catch (const ConfigError& e) {
            return e.key();
        }
        return std::string();
    };
    EXPECT_EQ(key_of(TrainConfig{}), "");
    TrainConfig c;
    c.lambda = 0;
    EXPECT_EQ(key_of(c), "train.lambda");
    c = {};
    c.gamma = -1;
    EXPECT_EQ(key_of(c), "train.gamma");
    c = {};
    c.steps = 0;
    EXPECT_EQ(key_of(c), "train.steps");
    c = {};
    c.batch_size = 0;
    EXPECT_EQ(key_of(c), "train.batch_size");
}

// ---------------------------------------------------------------------------

TEST(TrainerTest, SameSeedGivesIdenticalTraces) {
    const auto images = small_images();
    Trainer a(small_coder(), small_train(7)), b(small_coder(), small_train(7));
    for (int i = 0; i < 3; ++i) {
        const auto ma = a.next_step(images);
        const auto mb = b.next_step(images);
        EXPECT_EQ(ma.loss, mb.loss);
        EXPECT_EQ(ma.rate, mb.rate);
        EXPECT_EQ(ma.avg_bits, mb.avg_bits);
    }
    const auto pa = a.model().parameters(), pb = b.model().parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(values(pa[i].tensor), values(pb[i].tensor)) << pa[i].name;
}

TEST(TrainerTest, DifferentSeedsDiffer) {
    const auto images = small_images();
    Trainer a(small_coder(), small_train(1)), b(small_coder(), small_train(2));
    EXPECT_NE(a.next_step(images).loss, b.next_step(images).loss);
}

TEST(TrainerTest, MetricsAreConsistent) {
    const auto images = small_images();
    auto tc = small_train(3);
    Trainer trainer(small_coder(), tc);
    const auto m = trainer.next_step(images);
    EXPECT_EQ(m.step, 0u);
    EXPECT_EQ(trainer.step(), 1u);
    EXPECT_NEAR(m.loss, total_loss(m.rate, m.distortion, m.bits_loss, tc.lambda, tc.gamma), 1e-3 * std::abs(m.loss));
    EXPECT_GE(m.bits_loss, 4.0 - 1e-5);
    EXPECT_LE(m.bits_loss, 8.0 + 1e-5);
    EXPECT_GE(m.avg_bits, 4.0);
    EXPECT_LE(m.avg_bits, 8.0);
    EXPECT_NEAR(m.psnr, 10 * std::log10(kDistortionScale / m.distortion), 1e-3);
    ASSERT_EQ(trainer.log().size(), 1u);
}

TEST(TrainerTest, EveryLearnableGroupReceivesGradient) {
    Trainer trainer(small_coder(), small_train(4));
    trainer.next_step(small_images());

    std::map<std::string, bool> group_nonzero;
    for (const auto& p : trainer.model().parameters()) {
        std::string group;
        if (p.name.find(".selector.") != std::string::npos)
            group = "selector";
        else if (p.name.ends_with("raw_scale"))
            group = "quant.scale";
        else if (p.name.ends_with("zero_point"))
            group = "quant.zero_point";
        else if (p.name == "rate.mu")
            group = "rate.mu";
        else if (p.name == "rate.raw_sigma")
            group = "rate.sigma";
        else if (p.name.ends_with(".weight"))
            group = "weights";
        else
            group = "biases";
        const auto g = p.tensor.grad();
        const bool nonzero = std::any_of(g.begin(), g.end(), [](float v) { return v != 0.0f; });
        group_nonzero[group] = group_nonzero[group] || nonzero;
        // Weights are shared by every branch, so each one must see gradient.
        if (group == "weights") EXPECT_TRUE(nonzero) << p.name;
    }
    EXPECT_EQ(group_nonzero.size(), 7u);
    for (const auto& [group, nonzero] : group_nonzero) EXPECT_TRUE(nonzero) << group;
}

TEST(TrainerTest, NonFiniteLossAbortsWithTheStepIndexAndKeepsState) {
    const auto images = small_images();
    Trainer trainer(small_coder(), small_train(5));
    trainer.next_step(images);
    for (const auto& p : trainer.model().parameters())
        if (p.name == "dec.2.bias") {
            Tensor t = p.tensor;
            t.mutable_data()[0] = NAN;
        }
    try {
        trainer.next_step(images);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
    }
    EXPECT_EQ(trainer.step(), 1u);
    EXPECT_EQ(trainer.log().size(), 1u);
    EXPECT_EQ(trainer.optimizer().step_count(), 1u);
}

TEST(TrainerTest, OverfittingOneCropLowersTheLoss) {
    auto tc = small_train(6);
    tc.batch_size = 1;
    tc.crop = 64;
    tc.lr = 1e-4;
    Trainer trainer(small_coder(), tc);
    SyntheticSpec spec;
    spec.count = 1;
    spec.size = 64;
    const auto crop = reshape(synthetic_dataset(spec)[0].tensor(), {1, 3, 64, 64});
    const double first = trainer.train_step(crop).loss;
    double last = first;
    for (int i = 1; i < 500; ++i) last = trainer.train_step(crop).loss;
    EXPECT_LT(last, first);
}

TEST(TrainerTest, BetaRampIsLinearThenConstant) {
    auto tc = small_train();
    tc.beta_start = 1.0;
    tc.beta_ramp_steps = 100;
    auto cc = small_coder();
    cc.mode = GradientMode::dgm(5.0);
    Trainer trainer(cc, tc);
    EXPECT_DOUBLE_EQ(trainer.mode_at(0).beta(), 1.0);
    EXPECT_DOUBLE_EQ(trainer.mode_at(50).beta(), 3.0);
    EXPECT_DOUBLE_EQ(trainer.mode_at(100).beta(), 5.0);
    EXPECT_DOUBLE_EQ(trainer.mode_at(1000).beta(), 5.0);

    cc.mode = GradientMode::ste();
    Trainer ste(cc, tc);
    EXPECT_FALSE(ste.mode_at(10).is_dgm());
}

TEST(TrainerTest, FixedModeUsesConstantBitsLoss) {
    auto cc = small_coder();
    cc.dynamic = false;
    Trainer trainer(cc, small_train(8));
    const auto m = trainer.next_step(small_images());
    EXPECT_EQ(m.bits_loss, 8.0);
    EXPECT_EQ(m.avg_bits, 8.0);
}

// ---------------------------------------------------------------------------

class CheckpointTest : public ::testing::Test {
protected:
    void SetUp() override {
        images = small_images();
        trainer.emplace(small_coder(), small_train(9));
        for (int i = 0; i < 3; ++i) trainer->next_step(images);
        path = dir / "run.ckpt";
        save_checkpoint(*trainer, path);
    }

    ImageSet images;
    std::optional<Trainer> trainer;
    TempDir dir;
    fs::path path;
};

TEST_F(CheckpointTest, RoundTripIsBitExact) {
    auto loaded = load_checkpoint(path);
    const auto a = trainer->model().parameters(), b = loaded.model().parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(values(a[i].tensor), values(b[i].tensor)) << a[i].name;
    EXPECT_EQ(loaded.step(), 3u);
    EXPECT_EQ(loaded.log().size(), 3u);
    EXPECT_EQ(loaded.log().back().loss, trainer->log().back().loss);

    for (const auto& image : images) {
        const auto ea = evaluate_image(trainer->model(), image);
        const auto eb = evaluate_image(loaded.model(), image);
        EXPECT_EQ(ea.bpp, eb.bpp);
        EXPECT_EQ(ea.psnr, eb.psnr);
        EXPECT_EQ(ea.layer_bits, eb.layer_bits);
    }
}

TEST_F(CheckpointTest, ResumedTrainingMatchesUninterrupted) {
    auto loaded = load_checkpoint(path);
    for (int i = 0; i < 2; ++i) EXPECT_EQ(trainer->next_step(images).loss, loaded.next_step(images).loss);
    const auto a = trainer->model().parameters(), b = loaded.model().parameters();
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(values(a[i].tensor), values(b[i].tensor)) << a[i].name;
}

TEST_F(CheckpointTest, SavingTwiceIsByteIdentical) {
    const auto again = dir / "again.ckpt";
    save_checkpoint(load_checkpoint(path), again);
    EXPECT_EQ(read_bytes(path), read_bytes(again));
    EXPECT_FALSE(fs::exists(dir / "again.ckpt.tmp"));
}

TEST_F(CheckpointTest, TruncationIsAnIntegrityError) {
    auto bytes = read_bytes(path);
    for (std::size_t keep : {bytes.size() - 1, bytes.size() / 2, std::size_t{20}}) {
        write_bytes(dir / "cut.ckpt", std::vector<unsigned char>(bytes.begin(), bytes.begin() + keep));
        EXPECT_THROW(load_checkpoint(dir / "cut.ckpt"), IntegrityError) << keep;
    }
}

TEST_F(CheckpointTest, CorruptionReportsAnOffset) {
    auto bytes = read_bytes(path);
    bytes[bytes.size() / 2] ^= 0x40;
    write_bytes(dir / "flip.ckpt", bytes);
    try {
        load_checkpoint(dir / "flip.ckpt");
        FAIL() << "expected IntegrityError";
    } catch (const IntegrityError& e) {
        EXPECT_EQ(e.offset(), bytes.size() - 4);
    }

    bytes = read_bytes(path);
    bytes[0] = 'X';
    write_bytes(dir / "magic.ckpt", bytes);
    try {
        load_checkpoint(dir / "magic.ckpt");
        FAIL() << "expected IntegrityError";
    } catch (const IntegrityError& e) {
        EXPECT_EQ(e.offset(), 0u);
    }
}

TEST_F(CheckpointTest, VersionMismatchIsRejected) {
    auto bytes = read_bytes(path);
    bytes[4] = static_cast<unsigned char>(kCheckpointVersion + 1);
    write_bytes(dir / "v2.ckpt", bytes);
    EXPECT_THROW(load_checkpoint(dir / "v2.ckpt"), VersionError);
}

TEST_F(CheckpointTest, CrossConfigLoadIsRejected) {
    auto other = small_coder();
    other.candidate_bits = {6, 8, 10};
    try {
        load_checkpoint(path, &other);
        FAIL() << "expected ConfigMismatchError";
    } catch (const ConfigMismatchError& e) {
        EXPECT_EQ(e.key(), "coder.candidate_bits");
    }
    const auto same = small_coder();
    EXPECT_NO_THROW(load_checkpoint(path, &same));
}

TEST_F(CheckpointTest, MissingFileIsADataError) {
    EXPECT_THROW(load_checkpoint(dir / "absent.ckpt"), DataError);
}

TEST(EvaluateImageTest, DeterministicPerImage) {
    Trainer trainer(small_coder(), small_train(10));
    const auto images = small_images();
    for (const auto& image : images) {
        const auto a = evaluate_image(trainer.model(), image);
        const auto b = evaluate_image(trainer.model(), image);
        EXPECT_EQ(a.layer_bits, b.layer_bits);
        EXPECT_EQ(a.bpp, b.bpp);
        EXPECT_EQ(a.layer_bits.size(), 4u);
        EXPECT_GE(a.avg_bits, 4.0);
        EXPECT_LE(a.avg_bits, 8.0);
    }
}
