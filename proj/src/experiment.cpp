#include "dynaquant/experiment.hpp"

#include <cctype>
#include <numeric>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "dynaquant/errors.hpp"
#include "dynaquant/serialize.hpp"

namespace dynaquant {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, sep)) out.push_back(trim(item));
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out))
        throw ConfigError(key, "expected a finite number, got '" + v + "'");
    return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size())
        throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
    return out;
}

int parse_int(const std::string& key, const std::string& v) {
    const auto u = parse_u64(key, v);
    if (u > 64) throw ConfigError(key, "bit-width out of range: " + v);
    return static_cast<int>(u);
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key, "expected true or false, got '" + v + "'");
}

template <typename T, typename Parse>
std::vector<T> parse_list(const std::string& key, const std::string& v, Parse parse) {
    std::vector<T> out;
    if (v.empty()) return out;
    for (const auto& item : split(v, ',')) out.push_back(parse(key, item));
    return out;
}

std::string fmt(double v) { return json(v).dump(); }

template <typename T, typename Format>
std::string join(const std::vector<T>& values, Format format) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) out += (i ? "," : "") + format(values[i]);
    return out;
}

struct KeySpec {
    const char* name;
    void (*set)(RunConfig&, const std::string& key, const std::string& value);
    std::string (*get)(const RunConfig&);
};

// clang-format off
const std::vector<KeySpec>& key_specs() {
    static const std::vector<KeySpec> specs{
        {"experiment",
         [](RunConfig& c, const std::string&, const std::string& v) { c.experiment = v; },
         [](const RunConfig& c) { return c.experiment; }},
        {"output.dir",
         [](RunConfig& c, const std::string&, const std::string& v) { c.output_dir = v; },
         [](const RunConfig& c) { return c.output_dir.string(); }},
        {"output.log_every",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.log_every = parse_u64(k, v); },
         [](const RunConfig& c) { return std::to_string(c.log_every); }},
        {"data.source",
         [](RunConfig& c, const std::string&, const std::string& v) { c.data.source = v; },
         [](const RunConfig& c) { return c.data.source; }},
        {"data.path",
         [](RunConfig& c, const std::string&, const std::string& v) { c.data.path = v; },
         [](const RunConfig& c) { return c.data.path.string(); }},
        {"data.synthetic.count",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.data.synthetic.count = parse_u64(k, v); },
         [](const RunConfig& c) { return std::to_string(c.data.synthetic.count); }},
        {"data.synthetic.size",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.data.synthetic.size = parse_u64(k, v); },
         [](const RunConfig& c) { return std::to_string(c.data.synthetic.size); }},
        {"data.synthetic.kinds",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.data.synthetic.kinds = parse_list<SyntheticKind>(k, v, [](const std::string& key, const std::string& s) {
                 try {
                     return parse_synthetic_kind(s);
                 } catch (const ParameterError& e) {
                     throw ConfigError(key, e.what());
                 }
             });
         },
         [](const RunConfig& c) {
             return join(c.data.synthetic.kinds, [](SyntheticKind k) { return std::string(to_string(k)); });
         }},
        {"data.synthetic.seed",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.data.synthetic.seed = parse_u64(k, v); },
         [](const RunConfig& c) { return std::to_string(c.data.synthetic.seed); }},
        {"model.channels",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.coder.channels = parse_u64(k, v); },
         [](const RunConfig& c) { return std::to_string(c.coder.channels); }},
        {"model.latent_channels",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.coder.latent_channels = parse_u64(k, v); },
         [](const RunConfig& c) { return std::to_string(c.coder.latent_channels); }},
        {"model.stages",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.coder.stages = parse_u64(k, v); },
         [](const RunConfig& c) { return std::to_string(c.coder.stages); }},
        {"model.candidate_bits",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.coder.candidate_bits = parse_list<int>(k, v, parse_int); },
         [](const RunConfig& c) { return join(c.coder.candidate_bits, [](int b) { return std::to_string(b); }); }},
        {"model.dynamic",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.coder.dynamic = parse_bool(k, v); },
         [](const RunConfig& c) { return std::string(c.coder.dynamic ? "true" : "false"); }},
        {"model.fixed_bits",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.coder.fixed_bits = parse_int(k, v); },
         [](const RunConfig& c) { return std::to_string(c.coder.fixed_bits); }},
        {"model.selector_hidden",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.coder.selector_hidden = parse_u64(k, v); },
         [](const RunConfig& c) { return std::to_string(c.coder.selector_hidden); }},
        {"model.selector_dropout",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.coder.selector_dropout = parse_double(k, v); },
         [](const RunConfig& c) { return fmt(c.coder.selector_dropout); }},
        {"model.selector_tau",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.coder.selector_tau = parse_double(k, v); },
         [](const RunConfig& c) { return fmt(c.coder.selector_tau); }},
        {"model.pad",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.coder.pad = parse_bool(k, v); },
         [](const RunConfig& c) { return std::string(c.coder.pad ? "true" : "false"); }},
        {"quant.gradient",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             if (v == "ste") c.coder.mode = GradientMode::ste();
             else if (v == "dgm") c.coder.mode = GradientMode::dgm(c.beta);
             else throw ConfigError(k, "expected dgm or ste, got '" + v + "'");
         },
         [](const RunConfig& c) { return std::string(c.coder.mode.is_dgm() ? "dgm" : "ste"); }},
        {"quant.beta",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             const double beta = parse_double(k, v);
             if (!(beta > 0.0)) throw ConfigError(k, "must be positive");
             c.beta = beta;
             if (c.coder.mode.is_dgm()) c.coder.mode = GradientMode::dgm(beta);
         },
         [](const RunConfig& c) { return fmt(c.beta); }},
        {"quant.beta_start",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             if (v == "none" || v.empty()) c.train.beta_start.reset();
             else c.train.beta_start = parse_double(k, v);
         },
         [](const RunConfig& c) { return c.train.beta_start ? fmt(*c.train.beta_start) : std::string("none"); }},
        {"quant.beta_ramp_steps",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.train.beta_ramp_steps = parse_u64(k, v); },
         [](const RunConfig& c) { return std::to_string(c.train.beta_ramp_steps); }},
        {"quant.learn_scale",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.coder.quant.learn_scale = parse_bool(k, v); },
         [](const RunConfig& c) { return std::string(c.coder.quant.learn_scale ? "true" : "false"); }},
        {"quant.learn_zero",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.coder.quant.learn_zero = parse_bool(k, v); },
         [](const RunConfig& c) { return std::string(c.coder.quant.learn_zero ? "true" : "false"); }},
        {"train.lambda",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.train.lambda = parse_double(k, v); },
         [](const RunConfig& c) { return fmt(c.train.lambda); }},
        {"train.gamma",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.train.gamma = parse_double(k, v); },
         [](const RunConfig& c) { return fmt(c.train.gamma); }},
        {"train.lr",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.train.lr = parse_double(k, v); },
         [](const RunConfig& c) { return fmt(c.train.lr); }},
        {"train.batch_size",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.train.batch_size = parse_u64(k, v); },
         [](const RunConfig& c) { return std::to_string(c.train.batch_size); }},
        {"train.crop",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.train.crop = parse_u64(k, v); },
         [](const RunConfig& c) { return std::to_string(c.train.crop); }},
        {"train.steps",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.train.steps = parse_u64(k, v); },
         [](const RunConfig& c) { return std::to_string(c.train.steps); }},
        {"train.seed",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.train.seed = parse_u64(k, v); },
         [](const RunConfig& c) { return std::to_string(c.train.seed); }},
        {"ablate.suite",
         [](RunConfig& c, const std::string&, const std::string& v) { c.suite = v; },
         [](const RunConfig& c) { return c.suite; }},
        {"ablate.seeds",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.seeds = parse_list<std::uint64_t>(k, v, parse_u64); },
         [](const RunConfig& c) { return join(c.seeds, [](std::uint64_t s) { return std::to_string(s); }); }},
        {"ablate.gammas",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.gammas = parse_list<double>(k, v, parse_double); },
         [](const RunConfig& c) { return join(c.gammas, fmt); }},
    };
    return specs;
}
// clang-format on

const KeySpec& find_key(const std::string& key) {
    for (const auto& spec : key_specs())
        if (key == spec.name) return spec;
    throw ConfigError(key, "unknown configuration key");
}

}  // namespace

// ---------------------------------------------------------------------------

void RunConfig::validate() const {
    if (experiment != "train" && experiment != "ablate")
        throw ConfigError("experiment", "expected train or ablate, got '" + experiment + "'");
    if (output_dir.empty()) throw ConfigError("output.dir", "must not be empty");
    if (data.source == "dir") {
        if (data.path.empty()) throw ConfigError("data.path", "required when data.source = dir");
    } else if (data.source == "synthetic") {
        if (data.synthetic.size == 0 || data.synthetic.size % 8 != 0)
            throw ConfigError("data.synthetic.size", "must be a positive multiple of 8");
        if (data.synthetic.kinds.empty()) throw ConfigError("data.synthetic.kinds", "must list at least one kind");
        if (train.crop > data.synthetic.size)
            throw ConfigError("train.crop", "larger than the synthetic image size");
    } else {
        throw ConfigError("data.source", "expected synthetic or dir, got '" + data.source + "'");
    }
    if (coder.channels == 0) throw ConfigError("model.channels", "must be positive");
    if (coder.latent_channels == 0) throw ConfigError("model.latent_channels", "must be positive");
    if (coder.stages < 2 || coder.stages > 6) throw ConfigError("model.stages", "must lie in [2, 6]");
    try {
        validate_candidate_bits(coder.candidate_bits);
    } catch (const std::exception& e) {
        throw ConfigError("model.candidate_bits", e.what());
    }
    if (coder.fixed_bits < 2 || coder.fixed_bits > 16) throw ConfigError("model.fixed_bits", "must lie in [2, 16]");
    if (coder.selector_hidden == 0) throw ConfigError("model.selector_hidden", "must be positive");
    if (!(coder.selector_dropout >= 0.0 && coder.selector_dropout < 1.0))
        throw ConfigError("model.selector_dropout", "must lie in [0, 1)");
    if (!(coder.selector_tau > 0.0)) throw ConfigError("model.selector_tau", "must be positive");
    train.validate();
    if (experiment == "ablate") {
        if (seeds.empty()) throw ConfigError("ablate.seeds", "must list at least one seed");
        const auto suites = ablation_suites();
        if (std::find(suites.begin(), suites.end(), suite) == suites.end())
            throw ConfigError("ablate.suite", "unknown suite '" + suite + "'");
        for (double g : gammas)
            if (!(g >= 0.0)) throw ConfigError("ablate.gammas", "must be >= 0");
    }
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
    find_key(key).set(config, key, value);
}

void apply_override(RunConfig& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError(assignment, "override must look like key=value");
    set_config_value(config, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

RunConfig parse_run_config(const std::string& text) {
    RunConfig config;
    std::istringstream in(text);
    std::string line;
    std::vector<std::string> seen;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(line_no), "expected 'key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        if (std::find(seen.begin(), seen.end(), key) != seen.end()) throw ConfigError(key, "key given twice");
        seen.push_back(key);
        set_config_value(config, key, trim(line.substr(eq + 1)));
    }
    return config;
}

RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("", "cannot read config file " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_run_config(buffer.str());
}

std::string echo_config(const RunConfig& config) {
    std::string out;
    for (const auto& spec : key_specs()) out += std::string(spec.name) + " = " + spec.get(config) + "\n";
    return out;
}

std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const auto& spec : key_specs()) out.emplace_back(spec.name);
    return out;
}

ImageSet load_dataset(const DataSource& source, std::vector<std::string>* skipped) {
    ImageSet images;
    if (source.source == "dir") {
        images = load_image_dir(source.path, skipped);
        if (images.empty()) throw DataError("no readable images in " + source.path.string());
    } else {
        try {
            images = synthetic_dataset(source.synthetic);
        } catch (const ParameterError& e) {
            throw ConfigError("data.synthetic.size", e.what());
        }
        if (images.empty()) throw DataError("synthetic dataset is empty (data.synthetic.count = 0)");
    }
    return images;
}

// ---------------------------------------------------------------------------

std::vector<std::string> dynamic_layer_names(const ToyCodec& model) {
    std::vector<std::string> names(model.dynamic_layers());
    for (const auto& e : model.bit_inventory())
        if (e.dynamic_layer) names.at(*e.dynamic_layer) = e.name.substr(0, e.name.rfind('.'));
    return names;
}

EvalSummary evaluate_set(ToyCodec& model, const ImageSet& images, double lambda, double gamma) {
    if (images.empty()) throw DataError("evaluation needs at least one image");
    EvalSummary s;
    const auto inventory = model.bit_inventory();
    const auto names = dynamic_layer_names(model);
    s.histogram.resize(names.size());
    for (std::size_t l = 0; l < names.size(); ++l) s.histogram[l].layer = names[l];

    for (const auto& image : images) {
        auto e = evaluate_image(model, image);
        const auto profile = make_bit_profile(inventory, e.layer_bits);
        const double mse = std::pow(10.0, -e.psnr / 10.0);
        const double mean_bits =
            std::accumulate(e.layer_bits.begin(), e.layer_bits.end(), 0.0) / static_cast<double>(e.layer_bits.size());
        s.bpp += e.bpp;
        s.psnr += e.psnr;
        s.avg_bits += e.avg_bits;
        s.avg_bits_model += avg_bitwidth(profile, BitScope::WholeModel);
        s.loss += total_loss(e.bpp, kDistortionScale * mse, mean_bits, lambda, gamma);
        for (std::size_t l = 0; l < e.layer_bits.size(); ++l) ++s.histogram[l].counts[e.layer_bits[l]];
        if (s.images.empty()) {
            std::size_t params = 0;
            for (const auto& layer : profile.layers) params += layer.params;
            s.fp32_size_mb = static_cast<double>(params) * 4.0 / (1024.0 * 1024.0);
            s.overhead_bytes = profile.overhead_bytes();
        }
        s.images.push_back(std::move(e));
    }
    const double n = static_cast<double>(images.size());
    s.bpp /= n;
    s.psnr /= n;
    s.avg_bits /= n;
    s.avg_bits_model /= n;
    s.loss /= n;
    s.model_size_mb = model_size(s.fp32_size_mb, s.avg_bits_model);
    s.speedup = theoretical_speedup(s.avg_bits_model);
    return s;
}

Trainer train_run(const CoderConfig& coder, const TrainConfig& train, const ImageSet& images, const TrainHooks& hooks) {
    Trainer trainer(coder, train);
    for (std::uint64_t i = 0; i < train.steps; ++i) {
        const auto m = trainer.next_step(images);
        if (hooks.log && hooks.log_every && (m.step % hooks.log_every == 0 || m.step + 1 == train.steps))
            *hooks.log << "[dynaquant] step " << m.step << " loss " << m.loss << " bpp " << m.rate << " psnr "
                       << m.psnr << " bits " << m.avg_bits << "\n";
        if (hooks.after_step && !hooks.after_step(trainer, m)) break;
    }
    return trainer;
}

// ---------------------------------------------------------------------------

std::string trace_csv(const std::vector<StepMetrics>& trace) {
    std::ostringstream out;
    out << "step,rate_bpp,distortion,psnr_db,bits_loss,loss,avg_bits\n";
    out << std::setprecision(9);
    for (const auto& m : trace)
        out << m.step << ',' << m.rate << ',' << m.distortion << ',' << m.psnr << ',' << m.bits_loss << ',' << m.loss
            << ',' << m.avg_bits << '\n';
    return out.str();
}

json to_json(const EvalSummary& s) {
    json histogram = json::object();
    for (const auto& h : s.histogram) {
        json counts = json::object();
        for (const auto& [bits, n] : h.counts) counts[std::to_string(bits)] = n;
        histogram[h.layer] = counts;
    }
    json images = json::array();
    for (const auto& e : s.images)
        images.push_back({{"name", e.name}, {"bpp", e.bpp}, {"psnr_db", e.psnr}, {"avg_bits", e.avg_bits},
                          {"layer_bits", e.layer_bits}});
    return {{"final",
             {{"bpp", s.bpp},
              {"psnr_db", s.psnr},
              {"avg_bits", s.avg_bits},
              {"avg_bits_model", s.avg_bits_model},
              {"loss", s.loss},
              {"fp32_size_mb", s.fp32_size_mb},
              {"model_size_mb", s.model_size_mb},
              {"speedup", s.speedup},
              {"overhead_bytes", s.overhead_bytes}}},
            {"layer_bit_histogram", histogram},
            {"images", images}};
}

namespace {

json config_json(const RunConfig& config) {
    json out = json::object();
    std::istringstream in(echo_config(config));
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find(" = ");
        out[line.substr(0, eq)] = line.substr(eq + 3);
    }
    return out;
}

json trace_json(const std::vector<StepMetrics>& trace) {
    json out = json::array();
    for (const auto& m : trace) out.push_back(to_json(m));
    return out;
}

}  // namespace

json make_train_report(const RunConfig& config, const Trainer& trainer, const EvalSummary& summary) {
    json report = to_json(summary);
    report["schema_version"] = kReportSchemaVersion;
    report["kind"] = "train";
    report["config"] = config_json(config);
    report["steps_completed"] = trainer.step();
    report["trace"] = trace_json(trainer.log());
    return report;
}

std::vector<std::string> validate_report(const json& r) {
    std::vector<std::string> problems;
    const auto finite_number = [&](const json& j, const std::string& where) {
        if (!j.is_number()) {
            problems.push_back(where + ": expected a number");
        } else if (!std::isfinite(j.get<double>())) {
            problems.push_back(where + ": not finite");
        }
    };
    if (!r.is_object()) return {"report: expected an object"};
    if (r.value("schema_version", -1) != kReportSchemaVersion)
        problems.push_back("schema_version: expected " + std::to_string(kReportSchemaVersion));
    const std::string kind = r.contains("kind") && r["kind"].is_string() ? r["kind"].get<std::string>() : "";
    if (kind != "train" && kind != "eval" && kind != "ablate") problems.push_back("kind: expected train, eval or ablate");
    if (!r.contains("config") || !r["config"].is_object()) problems.push_back("config: expected an object");

    const auto check_summary = [&](const json& j, const std::string& where) {
        if (!j.contains("final") || !j["final"].is_object()) {
            problems.push_back(where + "final: expected an object");
            return;
        }
        for (const char* key : {"bpp", "psnr_db", "avg_bits", "avg_bits_model", "loss", "fp32_size_mb",
                                "model_size_mb", "speedup", "overhead_bytes"}) {
            if (!j["final"].contains(key))
                problems.push_back(where + "final." + key + ": missing");
            else
                finite_number(j["final"][key], where + "final." + key);
        }
        if (!j.contains("layer_bit_histogram") || !j["layer_bit_histogram"].is_object())
            problems.push_back(where + "layer_bit_histogram: expected an object");
        if (!j.contains("images") || !j["images"].is_array()) problems.push_back(where + "images: expected an array");
    };
    const auto check_trace = [&](const json& j, const std::string& where) {
        if (!j.is_array()) {
            problems.push_back(where + ": expected an array");
            return;
        }
        for (std::size_t i = 0; i < j.size(); ++i)
            for (const char* key : {"step", "rate_bpp", "distortion", "psnr_db", "bits_loss", "loss", "avg_bits"}) {
                const std::string at = where + "[" + std::to_string(i) + "]." + key;
                if (!j[i].contains(key))
                    problems.push_back(at + ": missing");
                else
                    finite_number(j[i][key], at);
            }
    };

    if (kind == "train") {
        check_summary(r, "");
        check_trace(r.value("trace", json()), "trace");
    } else if (kind == "eval") {
        if (!r.contains("checkpoints") || !r["checkpoints"].is_array() || r["checkpoints"].empty())
            problems.push_back("checkpoints: expected a non-empty array");
        else
            for (std::size_t i = 0; i < r["checkpoints"].size(); ++i)
                check_summary(r["checkpoints"][i], "checkpoints[" + std::to_string(i) + "].");
        if (!r.contains("skipped") || !r["skipped"].is_array()) problems.push_back("skipped: expected an array");
    } else if (kind == "ablate") {
        if (!r.contains("cells") || !r["cells"].is_array()) {
            problems.push_back("cells: expected an array");
        } else {
            for (std::size_t i = 0; i < r["cells"].size(); ++i) {
                const auto& cell = r["cells"][i];
                const std::string where = "cells[" + std::to_string(i) + "].";
                if (!cell.contains("ok") || !cell["ok"].is_boolean()) {
                    problems.push_back(where + "ok: expected a boolean");
                    continue;
                }
                if (cell["ok"].get<bool>()) {
                    check_summary(cell, where);
                    check_trace(cell.value("trace", json()), where + "trace");
                } else if (!cell.contains("error") || !cell["error"].is_string()) {
                    problems.push_back(where + "error: expected a message for a failed cell");
                }
            }
        }
    }
    return problems;
}

// ---------------------------------------------------------------------------

std::vector<std::string> ablation_suites() { return {"dgm-vs-ste", "dpa-components", "bitset", "gamma-pressure"}; }

namespace {

std::string slugify(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (std::isalnum(static_cast<unsigned char>(c)) || c == '.')
            out += c;
        else if (!out.empty() && out.back() != '-')
            out += '-';
    }
    while (!out.empty() && out.back() == '-') out.pop_back();
    return out;
}

std::string bits_label(const std::vector<int>& bits) {
    return "{" + join(bits, [](int b) { return std::to_string(b); }) + "}";
}

}  // namespace

std::vector<AblationCell> ablation_grid(const std::string& suite, const RunConfig& config) {
    struct Row {
        std::string label;
        CoderConfig coder;
        TrainConfig train;
    };
    std::vector<Row> rows;
    const double beta = config.beta;

    if (suite == "dgm-vs-ste" || suite == "dpa-components") {
        // Fixed bit-width rows: the selector is disabled and every block runs at fixed_bits.
        CoderConfig fixed = config.coder;
        fixed.dynamic = false;
        fixed.mode = GradientMode::dgm(beta);
        fixed.quant = {true, true};
        if (suite == "dgm-vs-ste") {
            rows.push_back({"dgm", fixed, config.train});
            CoderConfig ste = fixed;
            ste.mode = GradientMode::ste();
            rows.push_back({"ste", ste, config.train});
        } else {
            rows.push_back({"full", fixed, config.train});
            CoderConfig no_scale = fixed;
            no_scale.quant.learn_scale = false;
            rows.push_back({"no-learned-scale", no_scale, config.train});
            CoderConfig no_zero = fixed;
            no_zero.quant.learn_zero = false;
            rows.push_back({"no-learned-zero", no_zero, config.train});
            CoderConfig no_g = fixed;
            no_g.mode = GradientMode::ste();
            rows.push_back({"no-g(x)", no_g, config.train});
        }
    } else if (suite == "bitset") {
        for (const auto& bits : {std::vector<int>{4, 6, 8}, std::vector<int>{6, 8, 10}}) {
            CoderConfig c = config.coder;
            c.dynamic = true;
            c.candidate_bits = bits;
            rows.push_back({bits_label(bits), c, config.train});
        }
    } else if (suite == "gamma-pressure") {
        for (double g : config.gammas) {
            CoderConfig c = config.coder;
            c.dynamic = true;
            TrainConfig t = config.train;
            t.gamma = g;
            rows.push_back({"gamma=" + fmt(g), c, t});
        }
    } else {
        throw ConfigError("ablate.suite", "unknown suite '" + suite + "'");
    }

    std::vector<AblationCell> cells;
    for (const auto& row : rows)
        for (std::uint64_t seed : config.seeds) {
            AblationCell cell;
            cell.row = row.label;
            cell.slug = slugify(row.label);
            cell.seed = seed;
            cell.coder = row.coder;
            cell.train = row.train;
            cell.train.seed = seed;
            cells.push_back(std::move(cell));
        }
    return cells;
}

AblationResult run_ablation(const std::string& suite, const RunConfig& config, const ImageSet& images,
                            std::ostream* log) {
    AblationResult result{suite, ablation_grid(suite, config)};
    for (auto& cell : result.cells) {
        if (log) *log << "[dynaquant] " << suite << ": " << cell.row << " seed " << cell.seed << "\n";
        try {
            TrainHooks hooks;
            hooks.log = log;
            hooks.log_every = config.log_every;
            auto trainer = train_run(cell.coder, cell.train, images, hooks);
            cell.trace = trainer.log();
            cell.eval = evaluate_set(trainer.model(), images, cell.train.lambda, cell.train.gamma);
            cell.ok = true;
        } catch (const std::exception& e) {
            cell.error = e.what();
            if (log) *log << "[dynaquant] cell failed: " << e.what() << "\n";
        }
    }
    return result;
}

namespace {

std::vector<std::string> row_labels(const AblationResult& result) {
    std::vector<std::string> labels;
    for (const auto& c : result.cells)
        if (std::find(labels.begin(), labels.end(), c.row) == labels.end()) labels.push_back(c.row);
    return labels;
}

std::vector<std::uint64_t> seed_list(const AblationResult& result) {
    std::vector<std::uint64_t> seeds;
    for (const auto& c : result.cells)
        if (std::find(seeds.begin(), seeds.end(), c.seed) == seeds.end()) seeds.push_back(c.seed);
    return seeds;
}

const AblationCell* find_cell(const AblationResult& result, const std::string& row, std::uint64_t seed) {
    for (const auto& c : result.cells)
        if (c.row == row && c.seed == seed) return &c;
    return nullptr;
}

std::string num(double v, int precision) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(precision) << v;
    return out.str();
}

using Table = std::vector<std::vector<std::string>>;

// Per-cell rows, per-row means, then final loss pivoted by seed.
std::pair<Table, Table> ablation_tables(const AblationResult& result) {
    Table cells{{"method", "seed", "bitwidth", "bpp", "psnr_db", "final_loss"}};
    for (const auto& row : row_labels(result)) {
        double bits = 0, bpp = 0, psnr = 0, loss = 0;
        int ok = 0;
        for (std::uint64_t seed : seed_list(result)) {
            const auto* c = find_cell(result, row, seed);
            if (!c) continue;
            if (!c->ok) {
                cells.push_back({row, std::to_string(seed), "failed", "-", "-", c->error});
                continue;
            }
            cells.push_back({row, std::to_string(seed), num(c->eval.avg_bits, 2), num(c->eval.bpp, 4),
                             num(c->eval.psnr, 2), num(c->eval.loss, 4)});
            bits += c->eval.avg_bits;
            bpp += c->eval.bpp;
            psnr += c->eval.psnr;
            loss += c->eval.loss;
            ++ok;
        }
        if (ok > 0)
            cells.push_back({row, "mean", num(bits / ok, 2), num(bpp / ok, 4), num(psnr / ok, 2), num(loss / ok, 4)});
    }

    Table pivot{{"seed"}};
    for (const auto& row : row_labels(result)) pivot[0].push_back("final_loss[" + row + "]");
    for (std::uint64_t seed : seed_list(result)) {
        std::vector<std::string> line{std::to_string(seed)};
        for (const auto& row : row_labels(result)) {
            const auto* c = find_cell(result, row, seed);
            line.push_back(c && c->ok ? num(c->eval.loss, 4) : "failed");
        }
        pivot.push_back(std::move(line));
    }
    return {cells, pivot};
}

std::string aligned(const Table& table) {
    std::vector<std::size_t> width(table[0].size(), 0);
    for (const auto& row : table)
        for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
    std::ostringstream out;
    for (std::size_t r = 0; r < table.size(); ++r) {
        for (std::size_t i = 0; i < table[r].size(); ++i)
            out << (i ? "  " : "") << std::setw(static_cast<int>(width[i])) << (i == 0 ? std::left : std::right)
                << table[r][i];
        out << '\n';
        if (r == 0) {
            std::size_t total = 0;
            for (auto w : width) total += w + 2;
            out << std::string(total - 2, '-') << '\n';
        }
    }
    return out.str();
}

std::string csv(const Table& table) {
    std::string out;
    for (const auto& row : table) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            std::string cell = row[i];
            if (cell.find_first_of(",\"") != std::string::npos) {
                std::string quoted = "\"";
                for (char ch : cell) quoted += ch == '"' ? std::string("\"\"") : std::string(1, ch);
                cell = quoted + "\"";
            }
            out += (i ? "," : "") + cell;
        }
        out += '\n';
    }
    return out;
}

}  // namespace

std::string ablation_table_text(const AblationResult& result) {
    const auto [cells, pivot] = ablation_tables(result);
    return "suite: " + result.suite + "\n\n" + aligned(cells) + "\n" + aligned(pivot);
}

std::string ablation_table_csv(const AblationResult& result) { return csv(ablation_tables(result).first); }

json make_ablation_report(const RunConfig& config, const AblationResult& result) {
    json report;
    report["schema_version"] = kReportSchemaVersion;
    report["kind"] = "ablate";
    report["suite"] = result.suite;
    report["config"] = config_json(config);
    report["cells"] = json::array();
    for (const auto& c : result.cells) {
        json cell = c.ok ? to_json(c.eval) : json::object();
        cell["row"] = c.row;
        cell["seed"] = c.seed;
        cell["ok"] = c.ok;
        cell["coder"] = dynaquant::to_json(c.coder);
        cell["train"] = dynaquant::to_json(c.train);
        if (c.ok)
            cell["trace"] = trace_json(c.trace);
        else
            cell["error"] = c.error;
        report["cells"].push_back(std::move(cell));
    }
    return report;
}

}  // namespace dynaquant
