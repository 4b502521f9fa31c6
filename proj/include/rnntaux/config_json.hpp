// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <set>
#include <string>

#include "json.hpp"
#include "rnntaux/data.hpp"
#include "rnntaux/model.hpp"

namespace rnntaux::train {
struct TrainConfig;
}

namespace rnntaux::config {

using nlohmann::json;

// Strict parsing: unknown keys are rejected so a config file always means
// what it says.
void require_known_keys(const json& j, const std::set<std::string>& allowed,
                        const std::string& context);

json to_json(const model::ModelConfig& c);
model::ModelConfig model_config_from_json(const json& j);

json to_json(const train::TrainConfig& c);
train::TrainConfig train_config_from_json(const json& j);

json to_json(const data::SyntheticTaskSpec& s);
data::SyntheticTaskSpec task_spec_from_json(const json& j);

}  // namespace rnntaux::config
