#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dynaquant/data.hpp"
#include "dynaquant/model.hpp"
#include "dynaquant/optim.hpp"

namespace dynaquant {

struct TrainConfig {
    double lambda = 0.0067;
    double gamma = 0.001;
    double lr = 1e-4;
    std::size_t batch_size = 8;
    std::size_t crop = 64;
    std::uint64_t steps = 20000;
    std::uint64_t seed = 0;
    /// When set, DGM beta ramps linearly from beta_start to the configured beta over
    /// beta_ramp_steps, then stays constant.
    std::optional<double> beta_start;
    std::uint64_t beta_ramp_steps = 0;

    void validate() const;
};

/// Expected average bit-width: mean over batch and layers of Σ_k p_k b_k.
/// probs is (batch, L, M) soft probabilities. Throws ContractError when L == 0.
Tensor bits_loss(const Tensor& probs, std::span<const int> bits);

/// R + λD + γ L_bits.
double total_loss(double rate, double distortion, double bits, double lambda, double gamma);
Tensor total_loss(const Tensor& rate, const Tensor& distortion, const Tensor& bits, double lambda, double gamma);

/// Distortion term scale: D = 255^2 * MSE on [0, 1] images.
inline constexpr double kDistortionScale = 255.0 * 255.0;

struct StepMetrics {
    std::uint64_t step = 0;  ///< 0-based index of the step these numbers came from
    double rate = 0.0;       ///< bpp
    double distortion = 0.0;
    double psnr = 0.0;
    double bits_loss = 0.0;
    double loss = 0.0;
    double avg_bits = 0.0;  ///< parameter-weighted over dynamic layers, batch mean
};

class Trainer {
public:
    Trainer(CoderConfig coder, TrainConfig train);

    /// One forward/backward/Adam update on the given (batch, 3, H, W) images.
    /// Throws NumericError (naming the step) on a non-finite loss; the state is left
    /// as it was before the step.
    StepMetrics train_step(const Tensor& batch);
    /// Draws a batch of random crops with the trainer's data generator, then trains.
    StepMetrics next_step(const ImageSet& images);

    ToyCodec& model() { return model_; }
    const ToyCodec& model() const { return model_; }
    Adam<float>& optimizer() { return optimizer_; }
    const Adam<float>& optimizer() const { return optimizer_; }
    const CoderConfig& coder_config() const { return model_.config(); }
    const TrainConfig& train_config() const { return train_; }
    std::uint64_t step() const { return step_; }
    const std::vector<StepMetrics>& log() const { return log_; }
    GradientMode mode_at(std::uint64_t step) const;

    Rng& data_rng() { return data_rng_; }
    Rng& noise_rng() { return noise_rng_; }
    const Rng& data_rng() const { return data_rng_; }
    const Rng& noise_rng() const { return noise_rng_; }

private:
    friend Trainer load_checkpoint(const std::filesystem::path&, const CoderConfig*);

    GradientMode base_mode_;
    TrainConfig train_;
    ToyCodec model_;
    Adam<float> optimizer_;
    std::vector<InventoryEntry> inventory_;
    Rng data_rng_, noise_rng_;
    std::uint64_t step_ = 0;
    std::vector<StepMetrics> log_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "DQNT", u32 version, u32 length + canonical JSON header, length-prefixed LE f32
/// blobs (parameters in inventory order, then Adam first and second moments), and a
/// trailing CRC32 of everything before it.
void save_checkpoint(const Trainer& trainer, const std::filesystem::path& path);
/// Throws IntegrityError (with byte offset) on corruption, VersionError on a format
/// mismatch, and ConfigMismatchError when `expected` is given and differs.
Trainer load_checkpoint(const std::filesystem::path& path, const CoderConfig* expected = nullptr);

struct ImageEval {
    std::string name;
    double bpp = 0.0;
    double psnr = 0.0;
    std::vector<int> layer_bits;  ///< encoder blocks then decoder blocks
    double avg_bits = 0.0;        ///< parameter-weighted over the dynamic layers
};

/// Eval-mode (argmax, one branch per block) compression of a single image.
ImageEval evaluate_image(ToyCodec& model, const Image& image);

}  // namespace dynaquant
