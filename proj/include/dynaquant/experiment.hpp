#pragma once

// Run configuration files, dataset sources, set-level evaluation, reports and the
// ablation grids behind the command-line tool.

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynaquant/data.hpp"
#include "dynaquant/metrics.hpp"
#include "dynaquant/train.hpp"

namespace dynaquant {

struct DataSource {
    std::string source = "synthetic";  ///< "synthetic" or "dir"
    std::filesystem::path path;
    SyntheticSpec synthetic;
};

struct RunConfig {
    std::string experiment = "train";  ///< "train" or "ablate"
    std::filesystem::path output_dir = "runs/default";
    std::uint64_t log_every = 100;  ///< 0 silences progress lines
    DataSource data;
    CoderConfig coder;
    TrainConfig train;
    /// DGM temperature, kept even while quant.gradient = ste so key order is irrelevant.
    double beta = 5.0;
    std::string suite = "dgm-vs-ste";
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::vector<double> gammas{0.0, 0.1, 1.0};

    /// Throws ConfigError naming the first offending key.
    void validate() const;
};

/// Flat "key = value" lines with dotted keys; '#' starts a comment. Unknown or
/// repeated keys and unparsable values throw ConfigError with the key (or "line N").
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);
/// "key=value" form used by --set overrides.
void apply_override(RunConfig& config, const std::string& assignment);
/// Every key with its current value, in a fixed order; parses back to the same config.
std::string echo_config(const RunConfig& config);
std::vector<std::string> config_keys();

/// Throws DataError when the source is unreadable or yields no images.
ImageSet load_dataset(const DataSource& source, std::vector<std::string>* skipped = nullptr);

struct LayerHistogram {
    std::string layer;
    std::map<int, std::size_t> counts;  ///< bit-width -> images that selected it
};

struct EvalSummary {
    std::vector<ImageEval> images;
    double bpp = 0.0;
    double psnr = 0.0;
    double avg_bits = 0.0;        ///< dynamic layers, parameter-weighted, image mean
    double avg_bits_model = 0.0;  ///< every stored tensor (FP32 ones at 32 bits)
    double loss = 0.0;            ///< R + λD + γ·mean layer bits, image mean
    double fp32_size_mb = 0.0;
    double model_size_mb = 0.0;
    double speedup = 0.0;
    std::size_t overhead_bytes = 0;
    std::vector<LayerHistogram> histogram;
};

/// Dynamic layer labels in ToyCodec::layer_bits order ("enc.1", ..., "dec.2").
std::vector<std::string> dynamic_layer_names(const ToyCodec& model);

/// Eval-mode pass over every image.
EvalSummary evaluate_set(ToyCodec& model, const ImageSet& images, double lambda, double gamma);

struct TrainHooks {
    /// Return false to stop after this step.
    std::function<bool(Trainer&, const StepMetrics&)> after_step;
    std::ostream* log = nullptr;
    std::uint64_t log_every = 0;
};

/// Runs train.steps steps (or until the hook stops it) from a fresh trainer.
Trainer train_run(const CoderConfig& coder, const TrainConfig& train, const ImageSet& images,
                  const TrainHooks& hooks = {});

inline constexpr int kReportSchemaVersion = 1;

std::string trace_csv(const std::vector<StepMetrics>& trace);
nlohmann::json to_json(const EvalSummary& summary);
nlohmann::json make_train_report(const RunConfig& config, const Trainer& trainer, const EvalSummary& summary);
/// Empty when the report matches the schema.
std::vector<std::string> validate_report(const nlohmann::json& report);

struct AblationCell {
    std::string row;
    std::string slug;  ///< file-name-safe row label
    std::uint64_t seed = 0;
    CoderConfig coder;
    TrainConfig train;
    bool ok = false;
    std::string error;
    std::vector<StepMetrics> trace;
    EvalSummary eval;
};

struct AblationResult {
    std::string suite;
    std::vector<AblationCell> cells;
};

std::vector<std::string> ablation_suites();
/// The matched grid of a suite: every row crossed with every seed. Throws ConfigError
/// ("ablate.suite") for an unknown suite.
std::vector<AblationCell> ablation_grid(const std::string& suite, const RunConfig& config);
/// Runs every cell; failures are recorded in the cell and the suite continues.
AblationResult run_ablation(const std::string& suite, const RunConfig& config, const ImageSet& images,
                            std::ostream* log = nullptr);
std::string ablation_table_text(const AblationResult& result);
std::string ablation_table_csv(const AblationResult& result);
nlohmann::json make_ablation_report(const RunConfig& config, const AblationResult& result);

}  // namespace dynaquant
