#include "dynaquant/serialize.hpp"

namespace dynaquant {

using nlohmann::json;

json to_json(const CoderConfig& c) {
    return {{"channels", c.channels},
            {"latent_channels", c.latent_channels},
            {"stages", c.stages},
            {"candidate_bits", c.candidate_bits},
            {"gradient", c.mode.is_dgm() ? "dgm" : "ste"},
            {"beta", c.mode.beta()},
            {"dynamic", c.dynamic},
            {"fixed_bits", c.fixed_bits},
            {"learn_scale", c.quant.learn_scale},
            {"learn_zero", c.quant.learn_zero},
            {"selector_hidden", c.selector_hidden},
            {"selector_dropout", c.selector_dropout},
            {"selector_tau", c.selector_tau},
            {"pad", c.pad}};
}

json to_json(const TrainConfig& c) {
    json j = {{"lambda", c.lambda},         {"gamma", c.gamma}, {"lr", c.lr},
              {"batch_size", c.batch_size}, {"crop", c.crop},   {"steps", c.steps},
              {"seed", c.seed},             {"beta_start", nullptr}, {"beta_ramp_steps", c.beta_ramp_steps}};
    if (c.beta_start) j["beta_start"] = *c.beta_start;
    return j;
}

json to_json(const StepMetrics& m) {
    return {{"step", m.step},           {"rate_bpp", m.rate}, {"distortion", m.distortion}, {"psnr_db", m.psnr},
            {"bits_loss", m.bits_loss}, {"loss", m.loss},     {"avg_bits", m.avg_bits}};
}

namespace {

template <typename T>
T field(const json& j, const char* key) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(key, e.what());
    }
}

}  // namespace

CoderConfig coder_config_from_json(const json& j) {
    CoderConfig c;
    c.channels = field<std::size_t>(j, "channels");
    c.latent_channels = field<std::size_t>(j, "latent_channels");
    c.stages = field<std::size_t>(j, "stages");
    c.candidate_bits = field<std::vector<int>>(j, "candidate_bits");
    const auto gradient = field<std::string>(j, "gradient");
    c.mode = gradient == "dgm" ? GradientMode::dgm(field<double>(j, "beta")) : GradientMode::ste();
    c.dynamic = field<bool>(j, "dynamic");
    c.fixed_bits = field<int>(j, "fixed_bits");
    c.quant.learn_scale = field<bool>(j, "learn_scale");
    c.quant.learn_zero = field<bool>(j, "learn_zero");
    c.selector_hidden = field<std::size_t>(j, "selector_hidden");
    c.selector_dropout = field<double>(j, "selector_dropout");
    c.selector_tau = field<double>(j, "selector_tau");
    c.pad = field<bool>(j, "pad");
    return c;
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.lambda = field<double>(j, "lambda");
    c.gamma = field<double>(j, "gamma");
    c.lr = field<double>(j, "lr");
    c.batch_size = field<std::size_t>(j, "batch_size");
    c.crop = field<std::size_t>(j, "crop");
    c.steps = field<std::uint64_t>(j, "steps");
    c.seed = field<std::uint64_t>(j, "seed");
    if (j.contains("beta_start") && !j.at("beta_start").is_null()) c.beta_start = field<double>(j, "beta_start");
    c.beta_ramp_steps = field<std::uint64_t>(j, "beta_ramp_steps");
    return c;
}

StepMetrics step_metrics_from_json(const json& j) {
    StepMetrics m;
    m.step = field<std::uint64_t>(j, "step");
    m.rate = field<double>(j, "rate_bpp");
    m.distortion = field<double>(j, "distortion");
    m.psnr = field<double>(j, "psnr_db");
    m.bits_loss = field<double>(j, "bits_loss");
    m.loss = field<double>(j, "loss");
    m.avg_bits = field<double>(j, "avg_bits");
    return m;
}

}  // namespace dynaquant
