#pragma once

// JSON forms of the configuration structs, shared by checkpoints and reports.

#include <json.hpp>

#include "dynaquant/model.hpp"
#include "dynaquant/train.hpp"

namespace dynaquant {

nlohmann::json to_json(const CoderConfig& config);
nlohmann::json to_json(const TrainConfig& config);
nlohmann::json to_json(const StepMetrics& metrics);

/// Throws ConfigError naming the offending key.
CoderConfig coder_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);
StepMetrics step_metrics_from_json(const nlohmann::json& j);

}  // namespace dynaquant
