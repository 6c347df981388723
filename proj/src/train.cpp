#include "dynaquant/train.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dynaquant/metrics.hpp"
#include "dynaquant/serialize.hpp"

namespace dynaquant {

void TrainConfig::validate() const {
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ConfigError("train.lambda", "must be positive");
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ConfigError("train.gamma", "must be >= 0");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr", "must be positive");
    if (batch_size == 0) throw ConfigError("train.batch_size", "must be >= 1");
    if (crop == 0) throw ConfigError("train.crop", "must be >= 1");
    if (steps == 0) throw ConfigError("train.steps", "must be >= 1");
    if (beta_start && !(*beta_start > 0.0)) throw ConfigError("quant.beta_start", "must be positive");
}

Tensor bits_loss(const Tensor& probs, std::span<const int> bits) {
    if (probs.ndim() != 3) throw ShapeError("bits_loss expects (batch, layers, M), got " + shape_str(probs.shape()));
    if (probs.dim(1) == 0) throw ContractError("bits_loss: empty layer set");
    if (probs.dim(2) != bits.size())
        throw ShapeError("bits_loss: " + std::to_string(probs.dim(2)) + " probabilities per row for " +
                         std::to_string(bits.size()) + " candidate bit-widths");
    std::vector<float> b(bits.begin(), bits.end());
    const float rows = static_cast<float>(probs.dim(0) * probs.dim(1));
    return mul_scalar(sum(mul(probs, Tensor::from({bits.size()}, std::move(b)))), 1.0f / rows);
}

double total_loss(double rate, double distortion, double bits, double lambda, double gamma) {
    return rate + lambda * distortion + gamma * bits;
}

Tensor total_loss(const Tensor& rate, const Tensor& distortion, const Tensor& bits, double lambda, double gamma) {
    return add(add(rate, mul_scalar(distortion, static_cast<float>(lambda))), mul_scalar(bits, static_cast<float>(gamma)));
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::uint64_t kDataStream = 0x9E3779B97F4A7C15ull;
constexpr std::uint64_t kNoiseStream = 0xD1B54A32D192ED03ull;

std::vector<Tensor> tensors_of(const ToyCodec& model) {
    std::vector<Tensor> out;
    for (const auto& p : model.parameters()) out.push_back(p.tensor);
    return out;
}

/// Parameter-weighted dynamic-scope bit-width for each sample, averaged.
double batch_avg_bits(const ToyCodec& model, const std::vector<InventoryEntry>& inventory,
                      const std::optional<Selection>& enc, const std::optional<Selection>& dec, std::size_t batch) {
    double total = 0.0;
    for (std::size_t i = 0; i < batch; ++i)
        total += avg_bitwidth(make_bit_profile(inventory, model.layer_bits(enc, dec, i)), BitScope::DynamicLayers);
    return total / static_cast<double>(batch);
}

}  // namespace

Trainer::Trainer(CoderConfig coder, TrainConfig train)
    : base_mode_(coder.mode),
      train_(std::move(train)),
      model_((train_.validate(), std::move(coder)), train_.seed),
      optimizer_(tensors_of(model_), AdamOptions{.lr = train_.lr}),
      inventory_(model_.bit_inventory()),
      data_rng_(train_.seed ^ kDataStream),
      noise_rng_(train_.seed ^ kNoiseStream) {}

GradientMode Trainer::mode_at(std::uint64_t step) const {
    if (!base_mode_.is_dgm() || !train_.beta_start || train_.beta_ramp_steps == 0) return base_mode_;
    const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(train_.beta_ramp_steps));
    return GradientMode::dgm(*train_.beta_start + t * (base_mode_.beta() - *train_.beta_start));
}

StepMetrics Trainer::train_step(const Tensor& batch) {
    model_.set_mode(mode_at(step_));
    const auto out = model_.forward(batch, true, &noise_rng_);
    const std::size_t n = batch.dim(0);
    const double pixels = static_cast<double>(n * batch.dim(2) * batch.dim(3));

    const auto rate = mul_scalar(out.rate_bits, static_cast<float>(1.0 / pixels));
    const auto err = mse(out.x_hat, batch);
    const auto distortion = mul_scalar(err, static_cast<float>(kDistortionScale));
    Tensor lbits;
    if (out.encoder_selection) {
        const auto soft = concat<float>({out.encoder_selection->soft, out.decoder_selection->soft}, 1);
        lbits = bits_loss(soft, model_.config().candidate_bits);
    } else {
        lbits = Tensor::scalar(static_cast<float>(model_.config().fixed_bits));
    }
    const auto loss = total_loss(rate, distortion, lbits, train_.lambda, train_.gamma);

    StepMetrics m;
    m.step = step_;
    m.rate = rate.item();
    m.distortion = distortion.item();
    m.psnr = psnr(batch, out.x_hat);
    m.bits_loss = lbits.item();
    m.loss = loss.item();
    m.avg_bits = batch_avg_bits(model_, inventory_, out.encoder_selection, out.decoder_selection, n);
    if (!std::isfinite(m.loss))
        throw NumericError("step " + std::to_string(step_) + ": non-finite loss (R=" + std::to_string(m.rate) +
                           ", D=" + std::to_string(m.distortion) + ")");

    optimizer_.zero_grad();
    backward(loss);
    try {
        optimizer_.step();
    } catch (const NumericError& e) {
        throw NumericError("step " + std::to_string(step_) + ": " + e.what());
    }
    ++step_;
    log_.push_back(m);
    return m;
}

StepMetrics Trainer::next_step(const ImageSet& images) {
    return train_step(random_crops(images, train_.batch_size, train_.crop, data_rng_));
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'D', 'Q', 'N', 'T'};

class Writer {
public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void raw(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        bytes_.insert(bytes_.end(), p, p + n);
    }
    void floats(std::span<const float> values) {
        u64(values.size());
        for (float f : values) u32(std::bit_cast<std::uint32_t>(f));
    }
    std::vector<unsigned char>& bytes() { return bytes_; }

private:
    std::vector<unsigned char> bytes_;
};

class Reader {
public:
    Reader(const std::vector<unsigned char>& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

    std::uint32_t u32() {
        need(4, "u32");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8, "u64");
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    std::string text(std::size_t n) {
        need(n, "text block");
        std::string s(reinterpret_cast<const char*>(&bytes_[pos_]), n);
        pos_ += n;
        return s;
    }
    std::vector<float> floats(std::size_t expected, const std::string& what) {
        const std::size_t at = pos_;
        const std::uint64_t n = u64();
        if (n != expected)
            throw IntegrityError("blob '" + what + "' has " + std::to_string(n) + " values, expected " +
                                 std::to_string(expected), at);
        std::vector<float> out(n);
        for (auto& f : out) f = std::bit_cast<float>(u32());
        return out;
    }
    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t n, const char* what) const {
        if (end_ - pos_ < n) throw IntegrityError(std::string("truncated checkpoint while reading ") + what, pos_);
    }
    const std::vector<unsigned char>& bytes_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

std::string rng_state(const Rng& rng) {
    std::ostringstream out;
    out << rng;
    return out.str();
}

void restore_rng(Rng& rng, const std::string& state) {
    std::istringstream in(state);
    in >> rng;
    if (in.fail()) throw ConfigError("rng", "corrupt generator state in checkpoint header");
}

std::uint32_t crc_of(const std::vector<unsigned char>& bytes, std::size_t n) {
    return static_cast<std::uint32_t>(crc32(crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(n)));
}

/// First key whose value differs between two flat JSON objects.
std::string first_difference(const nlohmann::json& a, const nlohmann::json& b) {
    for (const auto& [key, value] : a.items())
        if (!b.contains(key) || b.at(key) != value) return key;
    for (const auto& [key, value] : b.items())
        if (!a.contains(key)) return key;
    return {};
}

}  // namespace

void save_checkpoint(const Trainer& trainer, const std::filesystem::path& path) {
    const auto params = trainer.model().parameters();
    nlohmann::json header;
    header["format"] = "dynaquant-checkpoint";
    header["coder"] = to_json(trainer.coder_config());
    header["train"] = to_json(trainer.train_config());
    header["step"] = trainer.step();
    header["optimizer_step"] = trainer.optimizer().step_count();
    header["metrics"] = nlohmann::json::array();
    for (const auto& m : trainer.log()) header["metrics"].push_back(to_json(m));
    header["calibrated"] = trainer.model().calibration_flags();
    header["rng"] = {{"data", rng_state(trainer.data_rng())}, {"noise", rng_state(trainer.noise_rng())}};
    header["parameters"] = nlohmann::json::array();
    for (const auto& p : params) header["parameters"].push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
    const std::string text = header.dump();

    Writer w;
    w.raw(kMagic, 4);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(text.size()));
    w.raw(text.data(), text.size());
    for (const auto& p : params) w.floats(p.tensor.data());
    const auto& moments = trainer.optimizer().moments();
    for (const auto& m : moments) w.floats(m.m);
    for (const auto& m : moments) w.floats(m.v);
    w.u32(crc_of(w.bytes(), w.bytes().size()));

    const auto tmp = std::filesystem::path(path).concat(".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.bytes().size()));
        if (!out) throw DataError("cannot write checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Trainer load_checkpoint(const std::filesystem::path& path, const CoderConfig* expected) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw IntegrityError("not a dynaquant checkpoint (bad magic)", 0);
    if (bytes.size() < 12) throw IntegrityError("truncated checkpoint header", bytes.size());
    Reader head(bytes, bytes.size());
    head.text(4);
    const std::uint32_t version = head.u32();
    if (version != kCheckpointVersion)
        throw VersionError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                           std::to_string(kCheckpointVersion) + ")");
    if (bytes.size() < 16) throw IntegrityError("truncated checkpoint", bytes.size());
    const std::size_t payload = bytes.size() - 4;
    std::uint32_t stored_crc = 0;
    for (int i = 0; i < 4; ++i) stored_crc |= static_cast<std::uint32_t>(bytes[payload + i]) << (8 * i);
    if (stored_crc != crc_of(bytes, payload))
        throw IntegrityError("checkpoint CRC mismatch (file truncated or corrupted)", payload);

    Reader r(bytes, payload);
    r.text(8);
    const std::uint32_t header_len = r.u32();
    const std::size_t header_at = r.pos();
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(r.text(header_len));
    } catch (const nlohmann::json::parse_error& e) {
        throw IntegrityError(std::string("malformed checkpoint header: ") + e.what(), header_at);
    }

    CoderConfig coder;
    TrainConfig train;
    try {
        coder = coder_config_from_json(header.at("coder"));
        train = train_config_from_json(header.at("train"));
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("incomplete checkpoint header: ") + e.what(), header_at);
    }
    if (expected) {
        const auto want = to_json(*expected), have = to_json(coder);
        if (want != have) {
            const std::string key = first_difference(want, have);
            throw ConfigMismatchError("coder." + key, "checkpoint has " + have.value(key, nlohmann::json()).dump() +
                                                          ", expected " + want.value(key, nlohmann::json()).dump());
        }
    }

    Trainer trainer(coder, train);
    const auto params = trainer.model().parameters();
    const auto& names = header.at("parameters");
    if (names.size() != params.size())
        throw IntegrityError("checkpoint lists " + std::to_string(names.size()) + " parameters, model has " +
                             std::to_string(params.size()), header_at);
    std::vector<std::vector<float>> values;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (names[i].at("name") != params[i].name)
            throw IntegrityError("parameter " + std::to_string(i) + " is '" + names[i].at("name").get<std::string>() +
                                 "', model expects '" + params[i].name + "'", header_at);
        values.push_back(r.floats(params[i].tensor.numel(), params[i].name));
    }
    std::vector<AdamMoments<float>> moments(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) moments[i].m = r.floats(params[i].tensor.numel(), params[i].name + ".m");
    for (std::size_t i = 0; i < params.size(); ++i) moments[i].v = r.floats(params[i].tensor.numel(), params[i].name + ".v");
    if (r.pos() != payload) throw IntegrityError("unexpected trailing bytes in checkpoint", r.pos());

    // Everything parsed: now mutate the fresh trainer.
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor t = params[i].tensor;
        std::copy(values[i].begin(), values[i].end(), t.mutable_data().begin());
    }
    trainer.optimizer_.restore(std::move(moments), header.at("optimizer_step").get<std::uint64_t>());
    trainer.model_.set_calibration_flags(header.at("calibrated").get<std::vector<bool>>());
    restore_rng(trainer.data_rng_, header.at("rng").at("data").get<std::string>());
    restore_rng(trainer.noise_rng_, header.at("rng").at("noise").get<std::string>());
    trainer.step_ = header.at("step").get<std::uint64_t>();
    for (const auto& m : header.at("metrics")) trainer.log_.push_back(step_metrics_from_json(m));
    return trainer;
}

ImageEval evaluate_image(ToyCodec& model, const Image& image) {
    NoGradGuard guard;
    const auto x = reshape(image.tensor(), {1, 3, image.height, image.width});
    const auto out = model.forward(x, false, nullptr);
    ImageEval e;
    e.name = image.name;
    e.bpp = out.bpp;
    e.psnr = psnr(x, out.x_hat);
    e.layer_bits = model.layer_bits(out.encoder_selection, out.decoder_selection, 0);
    e.avg_bits = avg_bitwidth(make_bit_profile(model.bit_inventory(), e.layer_bits), BitScope::DynamicLayers);
    return e;
}

}  // namespace dynaquant
