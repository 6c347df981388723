#include "dynaquant/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "dynaquant/errors.hpp"
#include "dynaquant/experiment.hpp"
#include "dynaquant/metrics.hpp"
#include "dynaquant/quant.hpp"

namespace dynaquant {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ConfigArgs {
    std::string path;
    std::vector<std::string> sets;
    std::string output;
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
    cmd->add_option("-c,--config", args.path, "key = value run configuration");
    cmd->add_option("-s,--set", args.sets, "override one key, e.g. --set train.steps=500");
    cmd->add_option("-o,--output", args.output, "output directory (overrides output.dir)");
}

RunConfig resolve_config(const ConfigArgs& args, std::ostream& err) {
    RunConfig config = args.path.empty() ? RunConfig{} : load_run_config(args.path);
    for (const auto& s : args.sets) apply_override(config, s);
    if (!args.output.empty()) config.output_dir = args.output;
    if (const char* env = std::getenv("DYNAQUANT_SEED"); env && *env) {
        set_config_value(config, "train.seed", env);
        err << "[dynaquant] DYNAQUANT_SEED=" << env << " overrides train.seed\n";
    }
    return config;
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw DataError("cannot write " + path.string());
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

void check_report(const json& report) {
    const auto problems = validate_report(report);
    if (!problems.empty()) throw NumericError("report failed validation: " + problems.front());
}

// ---------------------------------------------------------------------------

int cmd_train(const ConfigArgs& args, std::ostream& out, std::ostream& err) {
    RunConfig config = resolve_config(args, err);
    config.experiment = "train";
    config.validate();
    const auto images = load_dataset(config.data);

    TrainHooks hooks;
    hooks.log = &err;
    hooks.log_every = config.log_every;
    auto trainer = train_run(config.coder, config.train, images, hooks);
    const auto summary = evaluate_set(trainer.model(), images, config.train.lambda, config.train.gamma);
    const auto report = make_train_report(config, trainer, summary);
    check_report(report);

    fs::create_directories(config.output_dir);
    write_file(config.output_dir / "config.txt", echo_config(config));
    save_checkpoint(trainer, config.output_dir / "checkpoint.dqnt");
    write_file(config.output_dir / "trace.csv", trace_csv(trainer.log()));
    write_file(config.output_dir / "report.json", dump(report));

    out << std::fixed << std::setprecision(4) << "steps " << trainer.step() << "  bpp " << summary.bpp << "  psnr "
        << std::setprecision(2) << summary.psnr << " dB  avg bits " << summary.avg_bits << "  final loss "
        << std::setprecision(4) << summary.loss << "\n";
    out << "wrote " << config.output_dir.string() << "\n";
    return kExitOk;
}

struct EvalArgs {
    std::vector<std::string> checkpoints;
    std::string images;
    ConfigArgs config;
};

int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err) {
    RunConfig config = resolve_config(args.config, err);
    if (args.config.output.empty() && args.config.path.empty()) config.output_dir = "runs/eval";
    DataSource source = config.data;
    if (!args.images.empty()) {
        source.source = "dir";
        source.path = args.images;
    }
    std::vector<std::string> skipped;
    const auto images = load_dataset(source, &skipped);
    for (const auto& s : skipped) err << "[dynaquant] warning: skipped " << s << "\n";

    struct Entry {
        std::string path;
        TrainConfig train;
        std::vector<std::string> layers;
        EvalSummary summary;
    };
    std::vector<Entry> entries;
    for (const auto& path : args.checkpoints) {
        auto trainer = load_checkpoint(path);
        Entry e{path, trainer.train_config(), dynamic_layer_names(trainer.model()), {}};
        e.summary = evaluate_set(trainer.model(), images, e.train.lambda, e.train.gamma);
        entries.push_back(std::move(e));
    }

    std::ostringstream csv;
    csv << std::setprecision(9) << "checkpoint,lambda,image,bpp,psnr_db,avg_bits,layer_bits\n";
    json checkpoints = json::array();
    std::vector<RDPoint> curve;
    for (const auto& e : entries) {
        for (const auto& im : e.summary.images) {
            std::string bits;
            for (std::size_t l = 0; l < im.layer_bits.size(); ++l)
                bits += (l ? ";" : "") + e.layers.at(l) + "=" + std::to_string(im.layer_bits[l]);
            csv << e.path << ',' << e.train.lambda << ',' << im.name << ',' << im.bpp << ',' << im.psnr << ','
                << im.avg_bits << ',' << bits << '\n';
        }
        json j = to_json(e.summary);
        j["checkpoint"] = e.path;
        j["lambda"] = e.train.lambda;
        j["gamma"] = e.train.gamma;
        checkpoints.push_back(std::move(j));
        curve.push_back({e.summary.bpp, e.summary.psnr});
    }
    std::sort(curve.begin(), curve.end(), [](auto a, auto b) { return a.bpp < b.bpp; });
    std::ostringstream rd;
    rd << std::setprecision(9) << "bpp,psnr_db\n";
    for (const auto& p : curve) rd << p.bpp << ',' << p.psnr_db << '\n';

    json report{{"schema_version", kReportSchemaVersion},
                {"kind", "eval"},
                {"config", {{"images", source.source == "dir" ? source.path.string() : "synthetic"},
                            {"checkpoints", args.checkpoints}}},
                {"checkpoints", checkpoints},
                {"skipped", skipped}};
    check_report(report);

    fs::create_directories(config.output_dir);
    write_file(config.output_dir / "eval.csv", csv.str());
    write_file(config.output_dir / "rd_curve.csv", rd.str());
    write_file(config.output_dir / "eval.json", dump(report));
    for (const auto& e : entries)
        out << e.path << ": bpp " << std::fixed << std::setprecision(4) << e.summary.bpp << "  psnr "
            << std::setprecision(2) << e.summary.psnr << " dB  avg bits " << e.summary.avg_bits << "\n";
    out << "wrote " << config.output_dir.string() << "\n";
    return kExitOk;
}

int cmd_ablate(const ConfigArgs& args, const std::string& suite, std::ostream& out, std::ostream& err) {
    RunConfig config = resolve_config(args, err);
    config.experiment = "ablate";
    if (!suite.empty()) config.suite = suite;
    config.validate();
    const auto images = load_dataset(config.data);

    const auto result = run_ablation(config.suite, config, images, &err);
    const auto report = make_ablation_report(config, result);
    check_report(report);

    fs::create_directories(config.output_dir / "traces");
    write_file(config.output_dir / "config.txt", echo_config(config));
    write_file(config.output_dir / "table.txt", ablation_table_text(result));
    write_file(config.output_dir / "table.csv", ablation_table_csv(result));
    for (const auto& cell : result.cells)
        if (cell.ok)
            write_file(config.output_dir / "traces" / (cell.slug + "_seed" + std::to_string(cell.seed) + ".csv"),
                       trace_csv(cell.trace));
    write_file(config.output_dir / "report.json", dump(report));

    out << ablation_table_text(result);
    const bool any_ok = std::any_of(result.cells.begin(), result.cells.end(), [](const auto& c) { return c.ok; });
    return any_ok ? kExitOk : kExitNumeric;
}

int cmd_proxy_dump(const std::vector<double>& betas, int per_unit, const std::string& output, std::ostream& out) {
    if (betas.empty()) throw ConfigError("--beta", "need at least one value");
    for (double b : betas)
        if (!(b > 0.0)) throw ConfigError("--beta", "every beta must be positive");
    if (per_unit < 2) throw ConfigError("--samples-per-unit", "must be at least 2");

    std::ostringstream csv;
    csv << std::setprecision(12) << "beta,x,g,dg\n";
    for (double beta : betas)
        for (int i = 0; i <= 3 * per_unit; ++i) {
            const double x = static_cast<double>(i) / per_unit;
            csv << beta << ',' << x << ',' << dgm_soft_round(x, beta) << ',' << dgm_grad(x - std::floor(x), beta)
                << '\n';
        }
    fs::create_directories(output);
    write_file(fs::path(output) / "proxy.csv", csv.str());
    out << "wrote " << (fs::path(output) / "proxy.csv").string() << "\n";
    return kExitOk;
}

RDCurve read_curve(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path);
    std::stringstream buffer;
    buffer << in.rdbuf();
    try {
        return RDCurve::parse_csv(buffer.str());
    } catch (const CsvFormatError& e) {
        throw ConfigError(path, e.what());
    }
}

int cmd_bdrate(const std::string& anchor, const std::string& test, std::ostream& out) {
    const double v = bd_rate(read_curve(anchor), read_curve(test));
    out << std::fixed << std::setprecision(2) << v << "\n";
    return kExitOk;
}

int cmd_synth(const SyntheticSpec& spec, const std::string& format, const std::string& output, std::ostream& out) {
    if (format != "png" && format != "ppm") throw ConfigError("--format", "expected png or ppm");
    ImageSet images;
    try {
        images = synthetic_dataset(spec);
    } catch (const ParameterError& e) {
        throw ConfigError("--size", e.what());
    }
    if (images.empty()) throw DataError("synthetic dataset is empty (count = 0)");
    fs::create_directories(output);
    for (const auto& im : images) {
        const auto path = fs::path(output) / (im.name + "." + format);
        format == "png" ? write_png(path, im) : write_ppm(path, im);
    }
    out << "wrote " << images.size() << " images to " << output << "\n";
    return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Content-adaptive quantized toy image codec: training, evaluation and ablations"};
    app.require_subcommand(1);

    ConfigArgs train_args;
    auto* train = app.add_subcommand("train", "train a codec, then write checkpoint, report and trace");
    add_config_options(train, train_args);

    EvalArgs eval_args;
    auto* eval = app.add_subcommand("eval", "per-image bpp, PSNR and selected bit-widths for checkpoints");
    eval->add_option("--checkpoint", eval_args.checkpoints, "checkpoint file (repeat for an R-D curve)")->required();
    eval->add_option("--images", eval_args.images, "directory of PNG/PPM images (default: the config's data.*)");
    add_config_options(eval, eval_args.config);

    ConfigArgs ablate_args;
    std::string suite;
    auto* ablate = app.add_subcommand("ablate", "run an ablation suite over matched seeds");
    add_config_options(ablate, ablate_args);
    ablate->add_option("--suite", suite, "dgm-vs-ste, dpa-components, bitset or gamma-pressure");

    std::vector<double> betas{1, 2, 5, 10};
    int per_unit = 100;
    std::string proxy_out = "runs/proxy";
    auto* proxy = app.add_subcommand("proxy-dump", "sample g and g' of the gradient proxy over [0, 3]");
    proxy->add_option("--beta", betas, "beta values")->delimiter(',');
    proxy->add_option("--samples-per-unit", per_unit, "grid points per unit of x");
    proxy->add_option("-o,--output", proxy_out, "output directory");

    std::string anchor, test;
    auto* bdrate = app.add_subcommand("bdrate", "BD-rate of a test R-D curve against an anchor, in percent");
    bdrate->add_option("anchor", anchor, "anchor CSV (bpp,psnr_db)")->required();
    bdrate->add_option("test", test, "test CSV (bpp,psnr_db)")->required();

    SyntheticSpec synth_spec;
    std::vector<std::string> kinds;
    std::string synth_format = "png", synth_out;
    auto* synth = app.add_subcommand("synth", "write a synthetic image set");
    synth->add_option("--count", synth_spec.count);
    synth->add_option("--size", synth_spec.size);
    synth->add_option("--seed", synth_spec.seed);
    synth->add_option("--kinds", kinds)->delimiter(',');
    synth->add_option("--format", synth_format, "png or ppm");
    synth->add_option("-o,--output", synth_out, "output directory")->required();

    ConfigArgs config_args;
    auto* config = app.add_subcommand("config", "print the resolved configuration with every default");
    config->add_option("-c,--config", config_args.path);
    config->add_option("-s,--set", config_args.sets);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kExitConfig;
    }

    try {
        if (*train) return cmd_train(train_args, out, err);
        if (*eval) return cmd_eval(eval_args, out, err);
        if (*ablate) return cmd_ablate(ablate_args, suite, out, err);
        if (*proxy) return cmd_proxy_dump(betas, per_unit, proxy_out, out);
        if (*bdrate) return cmd_bdrate(anchor, test, out);
        if (*synth) {
            if (!kinds.empty()) {
                synth_spec.kinds.clear();
                for (const auto& k : kinds) {
                    try {
                        synth_spec.kinds.push_back(parse_synthetic_kind(k));
                    } catch (const ParameterError& e) {
                        throw ConfigError("--kinds", e.what());
                    }
                }
            }
            return cmd_synth(synth_spec, synth_format, synth_out, out);
        }
        if (*config) {
            RunConfig c = resolve_config(config_args, err);
            out << echo_config(c);
            return kExitOk;
        }
    } catch (const CsvFormatError& e) {
        err << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const IntegrityError& e) {
        err << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const VersionError& e) {
        err << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitFailure;
}

}  // namespace dynaquant
