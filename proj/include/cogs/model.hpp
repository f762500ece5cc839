// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cogs/checkpoint.hpp"
#include "cogs/control.hpp"
#include "cogs/train.hpp"

#include <optional>

namespace cogs {

/// Pipeline stage of a saved model, in order of completion.
enum class Stage { dynamic, masked, controlled, finetuned };

std::string to_string(Stage stage);
Stage stage_from_string(const std::string& name);  // throws CheckpointError

/// Everything a checkpoint carries: training state plus the optional control sections.
struct Model {
    Stage stage = Stage::dynamic;
    TrainConfig config;
    std::uint64_t seed = 0;
    std::vector<double> times;  // distinct training times, ascending
    TrainerState state;
    std::vector<std::string> attribute_names;  // masked and later
    std::optional<ControlRig> rig;             // controlled and later

    const GaussianCloud& cloud() const { return state.cloud; }
    const DeformationModel& deformation() const { return state.model; }
    /// Throws StateError when the stage disagrees with the sections present.
    void validate() const;
};

Checkpoint to_checkpoint(const Model& model);
Model from_checkpoint(const Checkpoint& checkpoint);

void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

nlohmann::json config_to_json(const TrainConfig& config);
/// Unknown keys throw ConfigError; missing keys keep their defaults.
TrainConfig config_from_json(const nlohmann::json& j);

}  // namespace cogs
