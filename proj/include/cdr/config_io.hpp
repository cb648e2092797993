#pragma once

#include <nlohmann/json.hpp>

#include "cdr/io.hpp"
#include "cdr/scorer.hpp"
#include "cdr/synthbench.hpp"
#include "cdr/trainer.hpp"

namespace cdr {

// JSON forms of the configuration structs. Missing keys keep their defaults;
// unknown keys are rejected so typos do not silently fall back.

nlohmann::ordered_json to_json(const ScorerConfig& config);
ScorerConfig scorer_config_from_json(const nlohmann::json& j);

nlohmann::ordered_json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

nlohmann::ordered_json to_json(const BiasedDatasetConfig& config);
BiasedDatasetConfig dataset_config_from_json(const nlohmann::json& j);

nlohmann::json load_json(const fs::path& path);

}  // namespace cdr
