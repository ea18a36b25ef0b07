#pragma once

#include <string>

#include "json.hpp"
#include "ngpu/model.hpp"
#include "ngpu/trainer.hpp"

namespace ngpu {

// JSON run-configuration document. Unknown keys are rejected so typos fail
// loudly; every default is filled in, and the fully resolved document is
// echoed into the run directory so a run is self-describing.

nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

TrainConfig load_train_config(const std::string& path);
void write_train_config(const std::string& path, const TrainConfig& config);

}  // namespace ngpu
